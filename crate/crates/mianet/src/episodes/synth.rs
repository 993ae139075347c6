//! Synthetic segmentation data: eight shape classes, each with several
//! silhouette variants plus random affine jitter, rasterized onto textured
//! 3-channel images. A stand-in corpus sized for a desk, not a benchmark.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::tensor::{BinaryMask, Tensor};

/// Single-word English class names so real embedding files resolve them.
pub const CLASS_NAMES: [&str; 8] = [
    "disc", "ring", "cross", "star", "slab", "frame", "wedge", "fork",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub samples_per_class: usize,
    /// Per-pixel additive noise amplitude.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 96,
            width: 96,
            samples_per_class: 12,
            noise: 0.08,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub class_id: usize,
    pub variant: usize,
    pub image: Tensor,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
    pub per_class: Vec<Vec<usize>>,
    pub height: usize,
    pub width: usize,
}

pub fn variant_count(class_id: usize) -> usize {
    match class_id {
        0 => 3, // disc: circle, ellipse, offset blob
        _ => 2,
    }
}

/// Canonical silhouette predicate on `(u, v)` in roughly `[-1, 1]^2`.
fn shape_predicate(class_id: usize, variant: usize, u: f64, v: f64) -> bool {
    let r2 = u * u + v * v;
    match (class_id, variant) {
        // disc
        (0, 0) => r2 <= 0.55 * 0.55,
        (0, 1) => (u / 0.72) * (u / 0.72) + (v / 0.34) * (v / 0.34) <= 1.0,
        (0, _) => {
            let (du, dv) = (u - 0.25, v + 0.2);
            du * du + dv * dv <= 0.34 * 0.34
        }
        // ring
        (1, 0) => (0.30 * 0.30..=0.62 * 0.62).contains(&r2),
        (1, _) => (0.46 * 0.46..=0.72 * 0.72).contains(&r2),
        // cross: upright plus vs diagonal X
        (2, 0) => {
            (u.abs() <= 0.17 && v.abs() <= 0.66) || (v.abs() <= 0.17 && u.abs() <= 0.66)
        }
        (2, _) => {
            let (a, b) = ((u - v).abs(), (u + v).abs());
            (a <= 0.24 || b <= 0.24) && u.abs().max(v.abs()) <= 0.68
        }
        // star: radial spike profile, 5 vs 7 points
        (3, variant) => {
            let (points, r_out, r_in) = if variant == 0 { (5.0, 0.72, 0.26) } else { (7.0, 0.62, 0.40) };
            let phi = v.atan2(u);
            let frac = (phi * points / (2.0 * std::f64::consts::PI)).rem_euclid(1.0);
            let tri = 1.0 - (2.0 * frac - 1.0).abs(); // 1 at spike center, 0 at valley
            r2.sqrt() <= r_in + (r_out - r_in) * tri
        }
        // slab: horizontal vs vertical bar
        (4, 0) => v.abs() <= 0.27 && u.abs() <= 0.85,
        (4, _) => u.abs() <= 0.27 && v.abs() <= 0.85,
        // frame: square annulus, thick vs thin
        (5, 0) => {
            let m = u.abs().max(v.abs());
            (0.36..=0.62).contains(&m)
        }
        (5, _) => {
            let m = u.abs().max(v.abs());
            (0.54..=0.72).contains(&m)
        }
        // wedge: upward triangle vs circular sector
        (6, 0) => {
            v >= -0.55 && v <= 0.60 && u.abs() <= 0.58 * (0.60 - v) / 1.15
        }
        (6, _) => {
            let phi = v.atan2(u);
            r2.sqrt() <= 0.70 && phi.abs() <= std::f64::consts::PI / 3.2
        }
        // fork: three prongs vs two wide prongs
        (7, 0) => {
            let handle = u.abs() <= 0.10 && (0.02..=0.62).contains(&v);
            let bar = v.abs() <= 0.08 && u.abs() <= 0.38;
            let prong = |cu: f64| (u - cu).abs() <= 0.08 && (-0.62..=0.0).contains(&v);
            handle || bar || prong(-0.32) || prong(0.0) || prong(0.32)
        }
        (7, _) => {
            let handle = u.abs() <= 0.13 && (0.05..=0.66).contains(&v);
            let bar = (v - 0.05).abs() <= 0.09 && u.abs() <= 0.34;
            let prong = |cu: f64| (u - cu).abs() <= 0.12 && (-0.60..=0.05).contains(&v);
            handle || bar || prong(-0.22) || prong(0.22)
        }
        _ => false,
    }
}

/// Rasterizes a variant without jitter, for inspecting intra-class variation.
pub fn canonical_mask(class_id: usize, variant: usize, h: usize, w: usize) -> BinaryMask {
    let mut m = BinaryMask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64 * 2.0 - 1.0;
            let v = (y as f64 + 0.5) / h as f64 * 2.0 - 1.0;
            if shape_predicate(class_id, variant, u, v) {
                m.set(y, x, 1);
            }
        }
    }
    m
}

struct Jitter {
    cos: f64,
    sin: f64,
    sx: f64,
    sy: f64,
    tx: f64,
    ty: f64,
}

fn draw_jitter(rng: &mut ChaCha8Rng) -> Jitter {
    let theta: f64 = rng.gen_range(-0.45..0.45);
    Jitter {
        cos: theta.cos(),
        sin: theta.sin(),
        sx: rng.gen_range(0.78..1.22),
        sy: rng.gen_range(0.78..1.22),
        tx: rng.gen_range(-0.22..0.22),
        ty: rng.gen_range(-0.22..0.22),
    }
}

fn jittered_mask(class_id: usize, variant: usize, h: usize, w: usize, j: &Jitter) -> BinaryMask {
    let mut m = BinaryMask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let u0 = (x as f64 + 0.5) / w as f64 * 2.0 - 1.0 - j.tx;
            let v0 = (y as f64 + 0.5) / h as f64 * 2.0 - 1.0 - j.ty;
            // inverse rotation then inverse scale
            let u = (u0 * j.cos + v0 * j.sin) / j.sx;
            let v = (-u0 * j.sin + v0 * j.cos) / j.sy;
            if shape_predicate(class_id, variant, u, v) {
                m.set(y, x, 1);
            }
        }
    }
    m
}

/// Deterministic per seed. Variants cycle so each appears; jitter supplies
/// the perspective-style intra-class variation on top.
pub fn synth_dataset(cfg: &SynthConfig, seed: u64) -> SynthDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height, cfg.width);
    let n_classes = CLASS_NAMES.len();

    // stable per-class foreground colors, drawn before any sample
    let colors: Vec<[f64; 3]> = (0..n_classes)
        .map(|_| [rng.gen_range(0.3..0.95), rng.gen_range(0.3..0.95), rng.gen_range(0.3..0.95)])
        .collect();

    let mut samples = Vec::with_capacity(n_classes * cfg.samples_per_class);
    let mut per_class = vec![Vec::new(); n_classes];
    for class_id in 0..n_classes {
        for i in 0..cfg.samples_per_class {
            let variant = i % variant_count(class_id);
            let mut mask = jittered_mask(class_id, variant, h, w, &draw_jitter(&mut rng));
            for _ in 0..10 {
                if mask.count_ones() > 0 {
                    break;
                }
                mask = jittered_mask(class_id, variant, h, w, &draw_jitter(&mut rng));
            }

            // background: smooth two-frequency field; foreground: class color
            let phase: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
            let freq: Vec<f64> = (0..6).map(|_| rng.gen_range(1.0..3.5)).collect();
            let mut image = Tensor::zeros(&[3, h, w]);
            for ch in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let fx = x as f64 / w as f64;
                        let fy = y as f64 / h as f64;
                        let val = if mask.at(y, x) == 1 {
                            colors[class_id][ch]
                        } else {
                            0.45 + 0.18
                                * (freq[ch] * std::f64::consts::TAU * fx + phase[ch]).sin()
                                * (freq[ch + 3] * std::f64::consts::TAU * fy + phase[ch + 6]).sin()
                        };
                        let noisy = val + rng.gen_range(-cfg.noise..cfg.noise);
                        image.data_mut()[(ch * h + y) * w + x] = noisy.clamp(0.0, 1.0);
                    }
                }
            }
            per_class[class_id].push(samples.len());
            samples.push(Sample {
                class_id,
                variant,
                image,
                mask,
            });
        }
    }
    SynthDataset {
        classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        samples,
        per_class,
        height: h,
        width: w,
    }
}

// --- on-disk form: MIAT images, PGM masks, JSON manifest ---

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestSample {
    pub class_id: usize,
    pub variant: usize,
    pub image: String,
    pub mask: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub height: usize,
    pub width: usize,
    /// Test-class ids per fold.
    pub folds: Vec<Vec<usize>>,
    pub samples: Vec<ManifestSample>,
}

pub fn save_dataset(ds: &SynthDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(ds.samples.len());
    for (i, s) in ds.samples.iter().enumerate() {
        let image = format!("sample_{i:04}.miat");
        let mask = format!("sample_{i:04}.pgm");
        io::save_miat(&dir.join(&image), &s.image)?;
        io::save_mask_pgm(&dir.join(&mask), &s.mask)?;
        entries.push(ManifestSample {
            class_id: s.class_id,
            variant: s.variant,
            image,
            mask,
        });
    }
    let per = ds.classes.len() / super::N_FOLDS;
    let manifest = Manifest {
        classes: ds.classes.clone(),
        height: ds.height,
        width: ds.width,
        folds: (0..super::N_FOLDS)
            .map(|f| (f * per..(f + 1) * per).collect())
            .collect(),
        samples: entries,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

pub fn load_dataset(manifest_path: &Path) -> Result<SynthDataset> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    let dir = manifest_path
        .parent()
        .ok_or_else(|| Error::Dataset("manifest has no parent directory".into()))?;
    let n_classes = manifest.classes.len();
    let mut samples = Vec::with_capacity(manifest.samples.len());
    let mut per_class = vec![Vec::new(); n_classes];
    for entry in &manifest.samples {
        if entry.class_id >= n_classes {
            return Err(Error::Dataset(format!(
                "sample references class {} but only {n_classes} classes are declared",
                entry.class_id
            )));
        }
        let image = io::load_miat(&dir.join(&entry.image))?;
        if image.shape() != [3, manifest.height, manifest.width] {
            return Err(Error::Dataset(format!(
                "{}: image shape {:?} does not match manifest {}x{}",
                entry.image,
                image.shape(),
                manifest.height,
                manifest.width
            )));
        }
        let mask = io::load_mask_pgm(&dir.join(&entry.mask))?;
        per_class[entry.class_id].push(samples.len());
        samples.push(Sample {
            class_id: entry.class_id,
            variant: entry.variant,
            image,
            mask,
        });
    }
    Ok(SynthDataset {
        classes: manifest.classes,
        samples,
        per_class,
        height: manifest.height,
        width: manifest.width,
    })
}
