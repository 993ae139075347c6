//! The subcommands behind the `mianet` binary. Each one resolves a
//! `RunConfig`, works under the `--out` directory, and echoes the fully
//! resolved config next to its outputs so a run can be reproduced from the
//! directory alone.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{load_checkpoint_into, save_checkpoint, ParamStore};
use crate::config::RunConfig;
use crate::episodes::encoder::ToyEncoder;
use crate::episodes::eval::{evaluate, report_to_csv};
use crate::episodes::synth::{load_dataset, save_dataset, synth_dataset, SynthDataset};
use crate::episodes::{
    encode_dataset, fold_split, kshot_mean_pyramid, sample_episode, EncodedDataset, Episode,
};
use crate::error::{Error, Result};
use crate::gim::{class_tokens, WordEmbeddingTable};
use crate::hpm::{build_prior_pyramid, resize_support, HpmConfig, PriorPyramid};
use crate::io;
use crate::model::{train_episodes, Mianet};
use crate::tensor::Tensor;

fn run_dir(cfg: &RunConfig, fallback: &str) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from(fallback))
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), cfg.to_json())?;
    Ok(())
}

/// The dataset named by `--data`, or the configured synthetic one.
fn obtain_dataset(cfg: &RunConfig) -> Result<SynthDataset> {
    match &cfg.data {
        Some(manifest) => load_dataset(manifest),
        None => Ok(synth_dataset(&cfg.synth_config(), cfg.dataset_seed)),
    }
}

fn encode(cfg: &RunConfig, ds: &SynthDataset) -> Result<EncodedDataset> {
    let enc = ToyEncoder::new(&cfg.encoder_config())?;
    encode_dataset(ds, &enc)
}

/// Word embeddings for the model: the file named by `--embeddings`, or a
/// seeded synthetic table covering every token in the class names. Returns
/// `None` when the configuration does not consult embeddings at all.
fn embedding_table(cfg: &RunConfig, classes: &[String]) -> Result<Option<WordEmbeddingTable>> {
    if !cfg.model_config().words_used() {
        return Ok(None);
    }
    let table = match &cfg.embeddings {
        Some(path) => {
            let table = WordEmbeddingTable::load(path)?;
            if table.dimension() != cfg.d {
                return Err(Error::Config(format!(
                    "embedding file is {}-dimensional, config wants d = {}",
                    table.dimension(),
                    cfg.d
                )));
            }
            table
        }
        None => {
            let mut tokens: Vec<String> = Vec::new();
            for name in classes {
                for t in class_tokens(name) {
                    if !tokens.contains(&t) {
                        tokens.push(t);
                    }
                }
            }
            let refs: Vec<&str> = tokens.iter().map(|s| s.as_str()).collect();
            WordEmbeddingTable::synthetic(cfg.d, &refs, cfg.dataset_seed)
        }
    };
    Ok(Some(table))
}

fn build_model(cfg: &RunConfig, classes: &[String]) -> Result<(Mianet, ParamStore)> {
    Mianet::new(cfg.model_config(), embedding_table(cfg, classes)?)
}

/// Generate the synthetic dataset and write it out (images as MIAT, masks as
/// PGM, plus the JSON manifest).
pub fn run_synth(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let dir = run_dir(cfg, "synth_data");
    let ds = synth_dataset(&cfg.synth_config(), cfg.dataset_seed);
    let manifest = save_dataset(&ds, &dir)?;
    echo_config(cfg, &dir)?;
    println!(
        "synth: {} classes x {} samples at {}x{} -> {}",
        ds.classes.len(),
        cfg.samples_per_class,
        ds.height,
        ds.width,
        manifest.display()
    );
    Ok(())
}

/// Build the multi-scale prior maps for one sampled test episode and write
/// each map as both PGM (for eyeballing) and MIAT (for exact values).
pub fn run_prior(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let ds = obtain_dataset(cfg)?;
    let enc_ds = encode(cfg, &ds)?;
    let split = fold_split(enc_ds.classes.len(), cfg.fold)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed_list[0]);
    let ep = sample_episode(&enc_ds, &split.test_classes, cfg.shots, &mut rng, false)?;

    let hpm_cfg = HpmConfig {
        info_channels: cfg.info_channels,
        ..HpmConfig::with_scales(cfg.resolved_scales())
    };
    let pyramid = if cfg.hpm {
        let (h0, w0) = hpm_cfg.scales[0];
        let f_q_h = resize_support(&ep.query.high, h0, w0)?;
        let mut per_shot = Vec::with_capacity(ep.support.len());
        for shot in &ep.support {
            let f_s_h = resize_support(&shot.features.high, h0, w0)?;
            let (pyr, _) = build_prior_pyramid(&f_s_h, &f_q_h, &shot.mask, &hpm_cfg)?;
            per_shot.push(pyr);
        }
        kshot_mean_pyramid(&per_shot)?
    } else {
        PriorPyramid {
            maps: hpm_cfg
                .scales
                .iter()
                .map(|&(h, w)| Tensor::zeros(&[h, w]))
                .collect(),
        }
    };

    let dir = run_dir(cfg, "prior_out");
    echo_config(cfg, &dir)?;
    println!("class: {} ({} shot)", ep.class_name, ep.support.len());
    for (i, map) in pyramid.maps.iter().enumerate() {
        let stem = format!("m_ins_{}", i + 1);
        io::save_map_pgm(&dir.join(format!("{stem}.pgm")), map)?;
        io::save_miat(&dir.join(format!("{stem}.miat")), map)?;
        println!(
            "{stem}: {}x{} min={:.6} max={:.6}",
            map.shape()[0],
            map.shape()[1],
            map.min(),
            map.max()
        );
    }
    Ok(())
}

fn sample_training_pool(cfg: &RunConfig, enc_ds: &EncodedDataset) -> Result<Vec<Episode>> {
    let split = fold_split(enc_ds.classes.len(), cfg.fold)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train_seed);
    (0..cfg.train_pool)
        .map(|_| sample_episode(enc_ds, &split.train_classes, cfg.shots, &mut rng, true))
        .collect()
}

/// Train on the fold's training classes, then write the loss log and the
/// checkpoint.
pub fn run_train(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let dir = run_dir(cfg, "train_out");
    echo_config(cfg, &dir)?;
    let ds = obtain_dataset(cfg)?;
    let enc_ds = encode(cfg, &ds)?;
    let (model, mut store) = build_model(cfg, &enc_ds.classes)?;
    let pool = sample_training_pool(cfg, &enc_ds)?;

    let steps = cfg.train_steps();
    let logs = match train_episodes(&model, &mut store, &pool, steps, &cfg.sgd_config()) {
        Ok(logs) => logs,
        Err(e @ Error::NanLoss { .. }) => {
            // leave enough behind to see how far the run got and how big the
            // parameters were at the point of the blow-up
            let mut dump = format!("{e}\n");
            for p in store.iter() {
                let peak = p.value.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
                let _ = writeln!(dump, "{}: max |w| = {:.6e}", p.name, peak);
            }
            fs::write(dir.join("abort.txt"), dump)?;
            return Err(e);
        }
        Err(e) => return Err(e),
    };

    let mut csv = String::from("step,L_seg1,L_seg2,L_triplet,total\n");
    for log in &logs {
        let _ = writeln!(
            csv,
            "{},{:.6},{:.6},{:.6},{:.6}",
            log.step, log.l_seg1, log.l_seg2, log.l_triplet, log.total
        );
    }
    fs::write(dir.join("loss.csv"), csv)?;

    let ckpt = dir.join("checkpoint.miac");
    save_checkpoint(&ckpt, &store)?;
    match (logs.first(), logs.last()) {
        (Some(first), Some(last)) => println!(
            "train: {} steps, loss {:.6} -> {:.6}, checkpoint {}",
            steps,
            first.total,
            last.total,
            ckpt.display()
        ),
        _ => println!("train: 0 steps, checkpoint {}", ckpt.display()),
    }
    Ok(())
}

/// Run the seeded evaluation protocol on the fold's held-out classes and
/// write the per-class/per-seed CSV report.
pub fn run_eval(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let dir = run_dir(cfg, "eval_out");
    echo_config(cfg, &dir)?;
    let ds = obtain_dataset(cfg)?;
    let enc_ds = encode(cfg, &ds)?;
    let split = fold_split(enc_ds.classes.len(), cfg.fold)?;
    let (model, mut store) = build_model(cfg, &enc_ds.classes)?;
    if let Some(ckpt) = &cfg.checkpoint {
        load_checkpoint_into(ckpt, &mut store)?;
    }

    let protocol = cfg.protocol();
    let report = evaluate(
        &|ep: &Episode| model.predict_episode(&store, ep),
        &enc_ds,
        &split,
        &protocol,
    )?;

    for seed in &report.seeds {
        for (class, iou) in &seed.class_iou {
            if iou.is_none() {
                eprintln!(
                    "warning: class {} drew no episodes under seed {}",
                    report.classes[*class], seed.seed
                );
            }
        }
    }

    fs::write(dir.join("report.csv"), report_to_csv(&report))?;
    println!(
        "eval fold {}: mIoU {:.4} (std {:.4}), FB-IoU {:.4} (std {:.4}) over {} seeds x {} pairs",
        report.fold,
        report.mean_miou,
        report.std_miou,
        report.mean_fb,
        report.std_fb,
        protocol.seeds.len(),
        protocol.pairs_per_seed
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FileKind {
    Miat,
    Pgm,
    Csv,
}

fn file_kind(path: &Path) -> Result<FileKind> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "miat" => Ok(FileKind::Miat),
        "pgm" => Ok(FileKind::Pgm),
        "csv" => Ok(FileKind::Csv),
        _ => Err(Error::Format(format!(
            "unsupported file extension on {:?} (expected .miat, .pgm or .csv)",
            path
        ))),
    }
}

fn grid_csv(height: usize, width: usize, values: &[f64]) -> String {
    let mut out = String::new();
    for r in 0..height {
        for c in 0..width {
            if c > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", values[r * width + c]);
        }
        out.push('\n');
    }
    out
}

/// A rank-1 or rank-2 view of a tensor, squeezing a leading `[1, ...]` so
/// single-channel maps stored as `[1, h, w]` still export cleanly.
fn as_grid(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [n] => Ok((1, n)),
        [h, w] => Ok((h, w)),
        [1, h, w] => Ok((h, w)),
        ref s => Err(Error::Format(format!(
            "shape {s:?} has no 2-d layout; only vectors, matrices and single-plane maps convert"
        ))),
    }
}

/// Convert between the on-disk formats, dispatching on the file extensions.
/// CSV is export-only.
pub fn run_convert(input: &Path, output: &Path) -> Result<()> {
    match (file_kind(input)?, file_kind(output)?) {
        (FileKind::Miat, FileKind::Miat) => io::save_miat(output, &io::load_miat(input)?)?,
        (FileKind::Miat, FileKind::Pgm) => {
            let t = io::load_miat(input)?;
            let (h, w) = as_grid(&t)?;
            io::write_pgm(&mut fs::File::create(output)?, h, w, t.data())?;
        }
        (FileKind::Miat, FileKind::Csv) => {
            let t = io::load_miat(input)?;
            let (h, w) = as_grid(&t)?;
            fs::write(output, grid_csv(h, w, t.data()))?;
        }
        (FileKind::Pgm, FileKind::Miat) => {
            let (h, w, values) = io::read_pgm(&mut fs::File::open(input)?)?;
            io::save_miat(output, &Tensor::new(vec![h, w], values)?)?;
        }
        (FileKind::Pgm, FileKind::Pgm) => {
            let (h, w, values) = io::read_pgm(&mut fs::File::open(input)?)?;
            io::write_pgm(&mut fs::File::create(output)?, h, w, &values)?;
        }
        (FileKind::Pgm, FileKind::Csv) => {
            let (h, w, values) = io::read_pgm(&mut fs::File::open(input)?)?;
            fs::write(output, grid_csv(h, w, &values))?;
        }
        (FileKind::Csv, _) => {
            return Err(Error::Format(
                "csv is an export format; converting from it is not supported".into(),
            ))
        }
    }
    println!("convert: {} -> {}", input.display(), output.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("mianet_cmd_{}_{name}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn tiny_cfg(out: &Path) -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.image_size = 24;
        cfg.scales = vec![(6, 6), (3, 3)];
        cfg.c = 8;
        cfg.c_high = 4;
        cfg.d = 8;
        cfg.samples_per_class = 3;
        cfg.epochs = 1;
        cfg.train_pool = 2;
        cfg.batch_size = 2;
        cfg.eval_pairs = 2;
        cfg.seed_list = vec![0, 1];
        cfg.out = Some(out.to_path_buf());
        cfg
    }

    #[test]
    fn synth_then_load_matches_direct_synthesis() {
        let dir = tmp("synth");
        let cfg = tiny_cfg(&dir);
        run_synth(&cfg).unwrap();
        assert!(dir.join("config.json").exists());
        let loaded = load_dataset(&dir.join("manifest.json")).unwrap();
        assert_eq!(loaded.classes.len(), 8);
        assert_eq!(loaded.height, 24);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn prior_writes_one_map_per_scale() {
        let dir = tmp("prior");
        let cfg = tiny_cfg(&dir);
        run_prior(&cfg).unwrap();
        assert!(dir.join("m_ins_1.pgm").exists());
        assert!(dir.join("m_ins_2.miat").exists());
        let m1 = io::load_miat(&dir.join("m_ins_1.miat")).unwrap();
        assert_eq!(m1.shape(), &[6, 6]);
        assert!(m1.min() >= 0.0 && m1.max() <= 1.0);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn train_then_eval_roundtrips_the_checkpoint() {
        let dir = tmp("train_eval");
        let mut cfg = tiny_cfg(&dir.join("t"));
        run_train(&cfg).unwrap();
        let ckpt = dir.join("t").join("checkpoint.miac");
        assert!(ckpt.exists());
        let loss = fs::read_to_string(dir.join("t").join("loss.csv")).unwrap();
        assert!(loss.starts_with("step,L_seg1,L_seg2,L_triplet,total\n"));
        assert_eq!(loss.lines().count(), 2, "one step at epochs=1 pool=2 batch=2");

        cfg.checkpoint = Some(ckpt);
        cfg.out = Some(dir.join("e"));
        run_eval(&cfg).unwrap();
        let report = fs::read_to_string(dir.join("e").join("report.csv")).unwrap();
        assert!(report.starts_with("seed,fold,class,iou,fb_iou\n"));
        assert!(report.contains("\nmean,"));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn eval_without_checkpoint_uses_fresh_weights() {
        let dir = tmp("eval_fresh");
        let cfg = tiny_cfg(&dir);
        run_eval(&cfg).unwrap();
        assert!(dir.join("report.csv").exists());
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn convert_matrix_and_error_paths() {
        let dir = tmp("convert");
        let t = Tensor::new(vec![2, 3], vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125]).unwrap();
        let a = dir.join("a.miat");
        io::save_miat(&a, &t).unwrap();

        // miat -> miat is byte-identical
        let b = dir.join("b.miat");
        run_convert(&a, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

        // miat -> pgm -> miat survives the 8-bit quantization for x/255 values
        let q = Tensor::new(vec![1, 2], vec![34.0 / 255.0, 200.0 / 255.0]).unwrap();
        let qm = dir.join("q.miat");
        io::save_miat(&qm, &q).unwrap();
        let qp = dir.join("q.pgm");
        run_convert(&qm, &qp).unwrap();
        let back = dir.join("q2.miat");
        run_convert(&qp, &back).unwrap();
        let back_t = io::load_miat(&back).unwrap();
        for (x, y) in back_t.data().iter().zip(q.data()) {
            assert!((x - y).abs() < 1e-6);
        }

        // miat -> csv carries full precision
        let c = dir.join("a.csv");
        run_convert(&a, &c).unwrap();
        let text = fs::read_to_string(&c).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("0,0.25,0.5"));

        // csv is export-only, unknown extensions are rejected
        assert!(run_convert(&c, &a).is_err());
        assert!(run_convert(&a, &dir.join("x.txt")).is_err());

        fs::remove_dir_all(&dir).ok();
    }
}
