//! General information module: class-name word embeddings feed a two-layer
//! generator (GIG) that turns the masked-pool prototype into a general
//! prototype; a three-block local feature generator (LFG) compresses support
//! features into region vectors, which are partitioned by the mask into
//! foreground/background sets for hardest-positive triplet mining.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{uniform_init, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, BinaryMask, Tensor};

pub const DEFAULT_MARGIN: f64 = 0.5;
pub const DEFAULT_WORD_DIM: usize = 300;

/// Lowercase token -> vector map with a fixed dimension.
#[derive(Debug, Clone)]
pub struct WordEmbeddingTable {
    dimension: usize,
    vectors: HashMap<String, Tensor>,
}

impl WordEmbeddingTable {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            vectors: HashMap::new(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, token: &str, vector: Tensor) -> Result<()> {
        if vector.shape() != [self.dimension] {
            return Err(Error::ShapeMismatch(format!(
                "embedding for {token:?} has shape {:?}, table dimension is {}",
                vector.shape(),
                self.dimension
            )));
        }
        self.vectors.insert(token.to_lowercase(), vector);
        Ok(())
    }

    pub fn get(&self, token: &str) -> Option<&Tensor> {
        self.vectors.get(&token.to_lowercase())
    }

    /// Seeded random vectors for a fixed token list; the synthetic dataset
    /// and tests use this instead of shipping a real embedding file.
    pub fn synthetic(dimension: usize, tokens: &[&str], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = Self::new(dimension);
        for token in tokens {
            let data = (0..dimension).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v = Tensor::new(vec![dimension], data).expect("finite synthetic embedding");
            table.insert(token, v).expect("dimension fixed");
        }
        table
    }

    /// word2vec text format: header `<count> <dim>`, then one token and
    /// `dim` floats per line.
    pub fn from_word2vec_text<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty embedding file".into()))??;
        let mut parts = header.split_whitespace();
        let count: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("embedding header: bad vocab count".into()))?;
        let dimension: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("embedding header: bad dimension".into()))?;
        if dimension == 0 {
            return Err(Error::Format("embedding dimension must be positive".into()));
        }
        let mut table = Self::new(dimension);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let token = fields
                .next()
                .ok_or_else(|| Error::Format(format!("embedding line {}: no token", i + 2)))?;
            let values: Vec<f64> = fields
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| Error::Format(format!("embedding line {}: bad float", i + 2)))
                })
                .collect::<Result<_>>()?;
            if values.len() != dimension {
                return Err(Error::Format(format!(
                    "embedding line {}: {} values, expected {dimension}",
                    i + 2,
                    values.len()
                )));
            }
            table.insert(token, Tensor::new(vec![dimension], values)?)?;
        }
        if table.len() != count {
            return Err(Error::Format(format!(
                "embedding header promised {count} vectors, file has {}",
                table.len()
            )));
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_word2vec_text(BufReader::new(file))
    }
}

pub fn class_tokens(class_name: &str) -> Vec<String> {
    class_name
        .split(|c: char| c.is_whitespace() || c == '-')
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Mean of the per-token vectors for a (possibly multi-word) class name.
pub fn lookup_embedding(class_name: &str, table: &WordEmbeddingTable) -> Result<Tensor> {
    let tokens = class_tokens(class_name);
    if tokens.is_empty() {
        return Err(Error::UnknownToken(class_name.to_string()));
    }
    let mut acc = Tensor::zeros(&[table.dimension()]);
    for token in &tokens {
        let v = table
            .get(token)
            .ok_or_else(|| Error::UnknownToken(token.clone()))?;
        for (a, b) in acc.data_mut().iter_mut().zip(v.data()) {
            *a += b;
        }
    }
    let n = tokens.len() as f64;
    for a in acc.data_mut() {
        *a /= n;
    }
    Ok(acc)
}

/// Masked average pooling of the support features: the class prototype.
/// The flag reports an empty foreground after mask resizing.
pub fn support_prototype(f_s: &Tensor, mask: &BinaryMask) -> Result<(Tensor, bool)> {
    tensor::masked_average_pool(f_s, mask)
}

/// Two fully connected layers turning `w (+) p` into the general prototype.
#[derive(Debug, Clone)]
pub struct GigNetwork {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub input_dim: usize,
    pub width: usize,
}

impl GigNetwork {
    /// `input_dim` is `d + c` normally, `c` when word embeddings are ablated
    /// away; hidden and output width are both `c`.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        input_dim: usize,
        width: usize,
        prefix: &str,
    ) -> Self {
        let w1 = store.add(format!("{prefix}.fc1.weight"), uniform_init(rng, &[width, input_dim], input_dim));
        let b1 = store.add(format!("{prefix}.fc1.bias"), Tensor::zeros(&[width]));
        let w2 = store.add(format!("{prefix}.fc2.weight"), uniform_init(rng, &[width, width], width));
        let b2 = store.add(format!("{prefix}.fc2.bias"), Tensor::zeros(&[width]));
        Self {
            w1,
            b1,
            w2,
            b2,
            input_dim,
            width,
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (w1, b1) = (tape.param(store, self.w1), tape.param(store, self.b1));
        let h = tape.linear(x, w1, b1)?;
        let h = tape.relu(h);
        let (w2, b2) = (tape.param(store, self.w2), tape.param(store, self.b2));
        tape.linear(h, w2, b2)
    }
}

/// `p_gen = GIG(w (+) p)`; pass `word = None` on the no-word-embedding path,
/// where the generator consumes the prototype alone.
pub fn general_prototype(
    tape: &mut Tape,
    store: &ParamStore,
    gig: &GigNetwork,
    word: Option<Var>,
    p: Var,
) -> Result<Var> {
    let joined = match word {
        Some(w) => tape.concat0(w, p)?,
        None => p,
    };
    let got = tape.value(joined).len();
    if tape.value(joined).rank() != 1 || got != gig.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "generator input has length {got}, expected {}",
            gig.input_dim
        )));
    }
    let row = tape.reshape(joined, &[1, gig.input_dim])?;
    let out = gig.forward(tape, store, row)?;
    tape.reshape(out, &[gig.width])
}

/// Three conv3x3+ReLU blocks with strides (2,2,1): spatial size drops by 4x.
#[derive(Debug, Clone)]
pub struct LfgNetwork {
    pub weights: [ParamId; 3],
    pub biases: [ParamId; 3],
    pub channels: usize,
}

pub const LFG_STRIDES: [usize; 3] = [2, 2, 1];

impl LfgNetwork {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, channels: usize, prefix: &str) -> Self {
        let fan_in = channels * 9;
        let mk = |store: &mut ParamStore, rng: &mut ChaCha8Rng, i: usize| {
            (
                store.add(
                    format!("{prefix}.conv{i}.weight"),
                    uniform_init(rng, &[channels, channels, 3, 3], fan_in),
                ),
                store.add(format!("{prefix}.conv{i}.bias"), Tensor::zeros(&[channels])),
            )
        };
        let (w0, b0) = mk(store, rng, 0);
        let (w1, b1) = mk(store, rng, 1);
        let (w2, b2) = mk(store, rng, 2);
        Self {
            weights: [w0, w1, w2],
            biases: [b0, b1, b2],
            channels,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mut x: Var) -> Result<Var> {
        for i in 0..3 {
            let w = tape.param(store, self.weights[i]);
            let b = tape.param(store, self.biases[i]);
            x = tape.conv3x3(x, w, b, LFG_STRIDES[i])?;
            x = tape.relu(x);
        }
        Ok(x)
    }
}

/// Region grid produced by the LFG for an `h x w` input.
pub fn region_grid(h: usize, w: usize) -> (usize, usize) {
    (h.div_ceil(4), w.div_ceil(4))
}

/// LFG forward then reshape to one row per region, row-major spatial order.
/// Returns the rows and the region grid.
pub fn region_features(
    tape: &mut Tape,
    store: &ParamStore,
    lfg: &LfgNetwork,
    f_s: Var,
) -> Result<(Var, (usize, usize))> {
    let shape = tape.value(f_s).shape().to_vec();
    let [_, h, w] = match shape[..] {
        [c, h, w] => [c, h, w],
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "region features expect [c,h,w], got {shape:?}"
            )))
        }
    };
    if h < 4 || w < 4 {
        return Err(Error::ShapeMismatch(format!(
            "support features {h}x{w} too small for 4x reduction"
        )));
    }
    let out = lfg.forward(tape, store, f_s)?;
    let rows = tape.spatial_rows(out)?;
    Ok((rows, region_grid(h, w)))
}

/// Row indices routed by the resized support mask: 1 -> foreground set,
/// 0 -> background set; order preserved, every row in exactly one set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionPartition {
    pub fg: Vec<usize>,
    pub bg: Vec<usize>,
}

impl RegionPartition {
    pub fn total(&self) -> usize {
        self.fg.len() + self.bg.len()
    }
}

pub fn partition_indices(mask: &BinaryMask, grid_h: usize, grid_w: usize) -> Result<RegionPartition> {
    let m = if (mask.height(), mask.width()) == (grid_h, grid_w) {
        mask.clone()
    } else {
        tensor::resize_mask(mask, grid_h, grid_w)?
    };
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for k in 0..grid_h * grid_w {
        if m.data()[k] == 1 {
            fg.push(k);
        } else {
            bg.push(k);
        }
    }
    Ok(RegionPartition { fg, bg })
}

/// Value-level split of region rows into foreground/background vector sets.
pub fn partition_regions(
    f_reg: &Tensor,
    mask: &BinaryMask,
    grid_h: usize,
    grid_w: usize,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let [n, c] = match f_reg.shape() {
        [n, c] => [*n, *c],
        s => return Err(Error::ShapeMismatch(format!("region rows {s:?}"))),
    };
    if n != grid_h * grid_w {
        return Err(Error::ShapeMismatch(format!(
            "{n} region rows vs {grid_h}x{grid_w} grid"
        )));
    }
    let part = partition_indices(mask, grid_h, grid_w)?;
    let row = |k: usize| Tensor::new(vec![c], f_reg.data()[k * c..(k + 1) * c].to_vec());
    Ok((
        part.fg.iter().map(|&k| row(k)).collect::<Result<_>>()?,
        part.bg.iter().map(|&k| row(k)).collect::<Result<_>>()?,
    ))
}

/// Mean of the background vectors; `None` signals an empty set (the episode
/// skips its triplet term).
pub fn negative_sample(v_bg: &[Tensor]) -> Option<Tensor> {
    let first = v_bg.first()?;
    let c = first.len();
    let mut acc = Tensor::zeros(&[c]);
    for v in v_bg {
        for (a, b) in acc.data_mut().iter_mut().zip(v.data()) {
            *a += b;
        }
    }
    let n = v_bg.len() as f64;
    for a in acc.data_mut() {
        *a /= n;
    }
    Some(acc)
}

/// Foreground vector farthest (L2) from the anchor; ties break to the lowest
/// index. Returns the winning index alongside the vector.
pub fn hardest_positive(anchor: &Tensor, v_fg: &[Tensor]) -> Option<(usize, Tensor)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in v_fg.iter().enumerate() {
        let d = tensor::l2_distance(anchor, v).ok()?;
        match best {
            Some((_, bd)) if d <= bd => {}
            _ => best = Some((i, d)),
        }
    }
    best.map(|(i, _)| (i, v_fg[i].clone()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TripletMetric {
    Euclidean,
    Cosine,
}

/// One mined triplet with its margin, for value-level loss evaluation.
#[derive(Debug, Clone)]
pub struct TripletSample {
    pub anchor: Tensor,
    pub positive: Tensor,
    pub negative: Tensor,
    pub margin: f64,
}

impl TripletSample {
    pub fn loss(&self) -> f64 {
        let d_ap = tensor::l2_distance(&self.anchor, &self.positive).expect("same length");
        let d_an = tensor::l2_distance(&self.anchor, &self.negative).expect("same length");
        (d_ap + self.margin - d_an).max(0.0)
    }
}

/// `max(d(a,p) + margin - d(a,n), 0)` on the tape; the zero branch carries no
/// gradient.
pub fn triplet_loss(
    tape: &mut Tape,
    anchor: Var,
    positive: Var,
    negative: Var,
    margin: f64,
    metric: TripletMetric,
) -> Result<Var> {
    if margin <= 0.0 {
        return Err(Error::Config(format!("margin must be positive, got {margin}")));
    }
    let dist = |tape: &mut Tape, a: Var, b: Var| match metric {
        TripletMetric::Euclidean => tape.l2_distance(a, b),
        TripletMetric::Cosine => tape.cosine_distance(a, b),
    };
    let d_ap = dist(tape, anchor, positive)?;
    let d_an = dist(tape, anchor, negative)?;
    let neg = tape.scale(d_an, -1.0);
    let sum = tape.add(d_ap, neg)?;
    let shifted = tape.add_scalar(sum, margin);
    Ok(tape.relu(shifted))
}

/// Picks the mined positive/negative for an episode's triplet. `None` when
/// either region set is empty. With `stop_gradient` the mined rows enter the
/// tape as constants, so the loss only trains the anchor path.
pub fn mined_triplet_vars(
    tape: &mut Tape,
    f_reg: Var,
    partition: &RegionPartition,
    anchor_value: &Tensor,
    stop_gradient: bool,
) -> Result<Option<(Var, Var)>> {
    if partition.fg.is_empty() || partition.bg.is_empty() {
        return Ok(None);
    }
    let [_, c] = match tape.value(f_reg).shape() {
        [n, c] => [*n, *c],
        s => return Err(Error::ShapeMismatch(format!("region rows {s:?}"))),
    };
    let fg_rows: Vec<Tensor> = partition
        .fg
        .iter()
        .map(|&k| Tensor::new(vec![c], tape.value(f_reg).data()[k * c..(k + 1) * c].to_vec()))
        .collect::<Result<_>>()?;
    let (local_idx, _) = hardest_positive(anchor_value, &fg_rows)
        .expect("non-empty foreground");
    let hardest_row = partition.fg[local_idx];

    let positive = if stop_gradient {
        let v = fg_rows[local_idx].clone();
        tape.constant(v)
    } else {
        tape.select_row(f_reg, hardest_row)?
    };
    let negative = if stop_gradient {
        let rows: Vec<Tensor> = partition
            .bg
            .iter()
            .map(|&k| Tensor::new(vec![c], tape.value(f_reg).data()[k * c..(k + 1) * c].to_vec()))
            .collect::<Result<_>>()?;
        let v = negative_sample(&rows).expect("non-empty background");
        tape.constant(v)
    } else {
        tape.mean_rows_subset(f_reg, &partition.bg)?
    };
    Ok(Some((positive, negative)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckConfig};
    use crate::tensor::tests_support::rand_tensor;
    use proptest::prelude::*;

    fn toy_table() -> WordEmbeddingTable {
        let mut t = WordEmbeddingTable::new(3);
        t.insert("potted", Tensor::from_vec(vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        t.insert("plant", Tensor::from_vec(vec![3.0, 0.0, -1.0]).unwrap()).unwrap();
        t.insert("cat", Tensor::from_vec(vec![0.5, 0.5, 0.5]).unwrap()).unwrap();
        t
    }

    #[test]
    fn lookup_single_and_multi_token() {
        let t = toy_table();
        assert_eq!(
            lookup_embedding("cat", &t).unwrap().data(),
            &[0.5, 0.5, 0.5]
        );
        // mean of the two entries, by scalar loop
        let got = lookup_embedding("potted plant", &t).unwrap();
        let (a, b) = (t.get("potted").unwrap(), t.get("plant").unwrap());
        for i in 0..3 {
            assert_eq!(got.data()[i], (a.data()[i] + b.data()[i]) / 2.0);
        }
        // case and hyphen normalization both hit the same vectors
        let hyphen = lookup_embedding("Potted-Plant", &t).unwrap();
        assert_eq!(hyphen, got);
    }

    #[test]
    fn lookup_unknown_token_is_named() {
        let t = toy_table();
        let err = lookup_embedding("potted zebra", &t).unwrap_err();
        assert!(matches!(&err, Error::UnknownToken(tok) if tok == "zebra"), "{err}");
    }

    #[test]
    fn word2vec_text_roundtrip_and_validation() {
        let text = "2 3\nalpha 1.0 2.0 3.0\nbeta -1 0.5 0\n";
        let t = WordEmbeddingTable::from_word2vec_text(text.as_bytes()).unwrap();
        assert_eq!(t.dimension(), 3);
        assert_eq!(t.len(), 2);
        assert_eq!(t.get("beta").unwrap().data(), &[-1.0, 0.5, 0.0]);

        let short = "1 3\nalpha 1.0 2.0\n";
        assert!(WordEmbeddingTable::from_word2vec_text(short.as_bytes()).is_err());
        let wrong_count = "3 3\nalpha 1 2 3\n";
        assert!(WordEmbeddingTable::from_word2vec_text(wrong_count.as_bytes()).is_err());
        let bad_float = "1 3\nalpha 1 x 3\n";
        assert!(WordEmbeddingTable::from_word2vec_text(bad_float.as_bytes()).is_err());
    }

    #[test]
    fn prototype_delegates_to_masked_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let f = rand_tensor(&mut rng, &[3, 4, 4]);
        let (p, empty) = support_prototype(&f, &BinaryMask::ones(4, 4)).unwrap();
        assert!(!empty);
        let (want, _) = tensor::masked_average_pool(&f, &BinaryMask::ones(4, 4)).unwrap();
        assert_eq!(p, want);
        let (z, empty) = support_prototype(&f, &BinaryMask::zeros(4, 4)).unwrap();
        assert!(empty);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gig_zero_weights_zero_output() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let gig = GigNetwork::new(&mut store, &mut rng, 7, 4, "gig");
        for id in [gig.w1, gig.w2] {
            store.get_mut(id).value.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let w = tape.constant(rand_tensor(&mut rng, &[3]));
        let p = tape.constant(rand_tensor(&mut rng, &[4]));
        let out = general_prototype(&mut tape, &store, &gig, Some(w), p).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gig_identity_on_prototype_slots() {
        // first layer copies the p slots, second layer is identity: the
        // generator reproduces a non-negative prototype exactly
        let (d, c) = (3, 4);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let gig = GigNetwork::new(&mut store, &mut rng, d + c, c, "gig");
        let mut w1 = Tensor::zeros(&[c, d + c]);
        for i in 0..c {
            w1.data_mut()[i * (d + c) + d + i] = 1.0;
        }
        store.get_mut(gig.w1).value = w1;
        let mut w2 = Tensor::zeros(&[c, c]);
        for i in 0..c {
            w2.data_mut()[i * c + i] = 1.0;
        }
        store.get_mut(gig.w2).value = w2;

        let mut tape = Tape::new();
        let w = tape.constant(rand_tensor(&mut rng, &[d]));
        let p_val = Tensor::from_vec(vec![0.3, 0.0, 1.7, 0.2]).unwrap();
        let p = tape.constant(p_val.clone());
        let out = general_prototype(&mut tape, &store, &gig, Some(w), p).unwrap();
        assert_eq!(tape.value(out), &p_val);
    }

    #[test]
    fn gig_rejects_dim_mismatch() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let gig = GigNetwork::new(&mut store, &mut rng, 7, 4, "gig");
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::zeros(&[2])); // should be 3
        let p = tape.constant(Tensor::zeros(&[4]));
        assert!(general_prototype(&mut tape, &store, &gig, Some(w), p).is_err());
    }

    #[test]
    fn gig_triplet_gradcheck() {
        let (d, c) = (4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let mut store = ParamStore::new();
        let gig = GigNetwork::new(&mut store, &mut rng, d + c, c, "gig");
        let w_val = rand_tensor(&mut rng, &[d]);
        let p_val = rand_tensor(&mut rng, &[c]);
        let pos_val = rand_tensor(&mut rng, &[c]);
        let neg_val = rand_tensor(&mut rng, &[c]);
        let forward = |s: &ParamStore, t: &mut Tape| -> Var {
            let w = t.constant(w_val.clone());
            let p = t.constant(p_val.clone());
            let anchor = general_prototype(t, s, &gig, Some(w), p).unwrap();
            let pos = t.constant(pos_val.clone());
            let neg = t.constant(neg_val.clone());
            triplet_loss(t, anchor, pos, neg, 5.0, TripletMetric::Euclidean).unwrap()
        };
        let mut tape = Tape::new();
        let loss = forward(&store, &mut tape);
        assert!(tape.scalar(loss) > 0.0, "margin 5 keeps the hinge active");
        store.zero_grads();
        tape.backward(loss, &mut store).unwrap();
        let report = grad_check(
            &mut store,
            |s| {
                let mut t = Tape::new();
                let l = forward(s, &mut t);
                Ok(t.scalar(l))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures);
    }

    #[test]
    fn lfg_shape_law() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let lfg = LfgNetwork::new(&mut store, &mut rng, 4, "lfg");
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut rng, &[4, 8, 8]));
        let (rows, grid) = region_features(&mut tape, &store, &lfg, x).unwrap();
        assert_eq!(grid, (2, 2));
        assert_eq!(tape.value(rows).shape(), [4, 4]);

        // odd sizes follow ceil division through both stride-2 blocks
        assert_eq!(region_grid(60, 60), (15, 15));
        let mut tape = Tape::new();
        let lfg2 = {
            let mut s2 = ParamStore::new();
            let l = LfgNetwork::new(&mut s2, &mut rng, 2, "lfg");
            (s2, l)
        };
        let x = tape.constant(rand_tensor(&mut rng, &[2, 60, 60]));
        let (rows, grid) = region_features(&mut tape, &lfg2.0, &lfg2.1, x).unwrap();
        assert_eq!(grid, (15, 15));
        assert_eq!(tape.value(rows).shape(), [225, 2]);
    }

    #[test]
    fn lfg_zero_weights_rows_equal_bias() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let lfg = LfgNetwork::new(&mut store, &mut rng, 3, "lfg");
        for id in lfg.weights {
            store.get_mut(id).value.data_mut().fill(0.0);
        }
        store.get_mut(lfg.biases[2]).value = Tensor::from_vec(vec![0.25, 0.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut rng, &[3, 8, 8]));
        let (rows, _) = region_features(&mut tape, &store, &lfg, x).unwrap();
        for k in 0..4 {
            assert_eq!(tape.value(rows).data()[k * 3..(k + 1) * 3], [0.25, 0.0, 2.0]);
        }
    }

    #[test]
    fn region_features_rejects_tiny_input() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let lfg = LfgNetwork::new(&mut store, &mut rng, 2, "lfg");
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 8]));
        assert!(region_features(&mut tape, &store, &lfg, x).is_err());
    }

    #[test]
    fn partition_full_empty_and_diagonal() {
        let full = partition_indices(&BinaryMask::ones(2, 2), 2, 2).unwrap();
        assert_eq!(full.fg, vec![0, 1, 2, 3]);
        assert!(full.bg.is_empty());

        let none = partition_indices(&BinaryMask::zeros(2, 2), 2, 2).unwrap();
        assert!(none.fg.is_empty());
        assert_eq!(none.bg, vec![0, 1, 2, 3]);

        // 4x4 mask whose 2x2 resize is [[1,0],[0,1]]
        let mut m = BinaryMask::zeros(4, 4);
        for y in 0..2 {
            for x in 0..2 {
                m.set(y, x, 1);
                m.set(y + 2, x + 2, 1);
            }
        }
        let part = partition_indices(&m, 2, 2).unwrap();
        assert_eq!(part.fg, vec![0, 3]);
        assert_eq!(part.bg, vec![1, 2]);
    }

    #[test]
    fn partition_value_level_routing() {
        let mut rng = ChaCha8Rng::seed_from_u64(58);
        let f_reg = rand_tensor(&mut rng, &[9, 4]);
        let mut m = BinaryMask::zeros(3, 3);
        m.set(0, 0, 1);
        m.set(1, 2, 1);
        m.set(2, 1, 1);
        let (fg, bg) = partition_regions(&f_reg, &m, 3, 3).unwrap();
        assert_eq!(fg.len() + bg.len(), 9);
        assert_eq!(fg[0].data(), &f_reg.data()[0..4]);
        assert_eq!(fg[1].data(), &f_reg.data()[5 * 4..6 * 4]);
        assert_eq!(fg[2].data(), &f_reg.data()[7 * 4..8 * 4]);
    }

    proptest! {
        #[test]
        fn partition_is_bijection_on_rows(bits in proptest::collection::vec(0u8..2, 16)) {
            let m = BinaryMask::new(4, 4, bits).unwrap();
            let part = partition_indices(&m, 4, 4).unwrap();
            let mut all: Vec<usize> = part.fg.iter().chain(part.bg.iter()).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..16).collect::<Vec<_>>());
            // order preserved within each set
            prop_assert!(part.fg.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(part.bg.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn triplet_nonnegative_and_translation_invariant(
            a in proptest::collection::vec(-10.0f64..10.0, 4),
            p in proptest::collection::vec(-10.0f64..10.0, 4),
            n in proptest::collection::vec(-10.0f64..10.0, 4),
            shift in -100.0f64..100.0,
        ) {
            let mk = |v: &Vec<f64>| Tensor::from_vec(v.clone()).unwrap();
            let sample = TripletSample {
                anchor: mk(&a), positive: mk(&p), negative: mk(&n), margin: DEFAULT_MARGIN,
            };
            let loss = sample.loss();
            prop_assert!(loss >= 0.0);
            let shifted = TripletSample {
                anchor: mk(&a.iter().map(|v| v + shift).collect()),
                positive: mk(&p.iter().map(|v| v + shift).collect()),
                negative: mk(&n.iter().map(|v| v + shift).collect()),
                margin: DEFAULT_MARGIN,
            };
            prop_assert!((loss - shifted.loss()).abs() < 1e-9);
        }
    }

    #[test]
    fn negative_sample_cases() {
        assert!(negative_sample(&[]).is_none());
        let v = Tensor::from_vec(vec![1.0, 2.0]).unwrap();
        assert_eq!(negative_sample(&[v.clone()]).unwrap(), v);
        let neg = Tensor::from_vec(vec![-1.0, -2.0]).unwrap();
        let z = negative_sample(&[v, neg]).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let rows: Vec<Tensor> = (0..5).map(|_| rand_tensor(&mut rng, &[3])).collect();
        let mean = negative_sample(&rows).unwrap();
        for i in 0..3 {
            let want: f64 = rows.iter().map(|r| r.data()[i]).sum::<f64>() / 5.0;
            assert!((mean.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn hardest_positive_cases() {
        assert!(hardest_positive(&Tensor::zeros(&[2]), &[]).is_none());
        let single = Tensor::from_vec(vec![2.0, 2.0]).unwrap();
        assert_eq!(
            hardest_positive(&Tensor::zeros(&[2]), &[single.clone()]).unwrap().1,
            single
        );

        let anchor = Tensor::zeros(&[2]);
        let near = Tensor::from_vec(vec![1.0, 0.0]).unwrap();
        let far = Tensor::from_vec(vec![5.0, 0.0]).unwrap();
        let (idx, v) = hardest_positive(&anchor, &[near, far.clone()]).unwrap();
        assert_eq!((idx, v), (1, far));

        // tie -> lowest index
        let a = Tensor::from_vec(vec![3.0, 0.0]).unwrap();
        let b = Tensor::from_vec(vec![-3.0, 0.0]).unwrap();
        let (idx, _) = hardest_positive(&Tensor::zeros(&[2]), &[a, b]).unwrap();
        assert_eq!(idx, 0);
    }

    #[test]
    fn hardest_positive_matches_bruteforce_up_to_1000() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        for n in [20usize, 1000] {
            let anchor = rand_tensor(&mut rng, &[6]);
            let rows: Vec<Tensor> = (0..n).map(|_| rand_tensor(&mut rng, &[6])).collect();
            let (idx, _) = hardest_positive(&anchor, &rows).unwrap();
            let mut best = (0usize, f64::NEG_INFINITY);
            for (i, r) in rows.iter().enumerate() {
                let d = tensor::l2_distance(&anchor, r).unwrap();
                if d > best.1 {
                    best = (i, d);
                }
            }
            assert_eq!(idx, best.0);
        }
    }

    #[test]
    fn triplet_hand_cases() {
        let mk = |x: f64| Tensor::from_vec(vec![x, 0.0]).unwrap();
        let satisfied = TripletSample {
            anchor: mk(0.0),
            positive: mk(1.0),
            negative: mk(3.0),
            margin: DEFAULT_MARGIN,
        };
        assert_eq!(satisfied.loss(), 0.0);

        let active = TripletSample {
            anchor: mk(0.0),
            positive: mk(1.0),
            negative: mk(1.2),
            margin: DEFAULT_MARGIN,
        };
        // same expression the implementation evaluates
        let want = 1.0_f64 + DEFAULT_MARGIN - 1.2;
        assert_eq!(active.loss(), want);
        assert!((active.loss() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn triplet_tape_matches_value_level_and_zero_branch_has_zero_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let a = rand_tensor(&mut rng, &[4]);
        let p = rand_tensor(&mut rng, &[4]);
        let n = rand_tensor(&mut rng, &[4]);
        let sample = TripletSample {
            anchor: a.clone(),
            positive: p.clone(),
            negative: n.clone(),
            margin: DEFAULT_MARGIN,
        };
        let mut store = ParamStore::new();
        let aid = store.add("anchor", a);
        let mut tape = Tape::new();
        let av = tape.param(&store, aid);
        let pv = tape.constant(p);
        let nv = tape.constant(n);
        let loss = triplet_loss(&mut tape, av, pv, nv, DEFAULT_MARGIN, TripletMetric::Euclidean).unwrap();
        assert_eq!(tape.scalar(loss), sample.loss());

        // force the satisfied branch: gradient through the hinge is zero
        let mut store = ParamStore::new();
        let aid = store.add("anchor", Tensor::from_vec(vec![0.0, 0.0]).unwrap());
        let mut tape = Tape::new();
        let av = tape.param(&store, aid);
        let pv = tape.constant(Tensor::from_vec(vec![1.0, 0.0]).unwrap());
        let nv = tape.constant(Tensor::from_vec(vec![9.0, 0.0]).unwrap());
        let loss = triplet_loss(&mut tape, av, pv, nv, DEFAULT_MARGIN, TripletMetric::Euclidean).unwrap();
        assert_eq!(tape.scalar(loss), 0.0);
        tape.backward(loss, &mut store).unwrap();
        assert!(store.get(aid).grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn triplet_rejects_nonpositive_margin() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        let p = tape.constant(Tensor::zeros(&[2]));
        let n = tape.constant(Tensor::zeros(&[2]));
        assert!(triplet_loss(&mut tape, a, p, n, 0.0, TripletMetric::Euclidean).is_err());
    }

    #[test]
    fn cosine_metric_variant_differs() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let (a, p, n) = (
            rand_tensor(&mut rng, &[5]),
            rand_tensor(&mut rng, &[5]),
            rand_tensor(&mut rng, &[5]),
        );
        let mut tape = Tape::new();
        let (av, pv, nv) = (
            tape.constant(a.clone()),
            tape.constant(p.clone()),
            tape.constant(n.clone()),
        );
        let le = triplet_loss(&mut tape, av, pv, nv, 2.0, TripletMetric::Euclidean).unwrap();
        let lc = triplet_loss(&mut tape, av, pv, nv, 2.0, TripletMetric::Cosine).unwrap();
        assert_ne!(tape.scalar(le), tape.scalar(lc));
    }

    #[test]
    fn mined_triplet_skip_and_stop_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let anchor_value = rand_tensor(&mut rng, &[3]);

        // empty sets -> skip
        let mut tape = Tape::new();
        let rows = tape.constant(rand_tensor(&mut rng, &[4, 3]));
        let all_fg = RegionPartition { fg: vec![0, 1, 2, 3], bg: vec![] };
        assert!(mined_triplet_vars(&mut tape, rows, &all_fg, &anchor_value, false)
            .unwrap()
            .is_none());
        let all_bg = RegionPartition { fg: vec![], bg: vec![0, 1, 2, 3] };
        assert!(mined_triplet_vars(&mut tape, rows, &all_bg, &anchor_value, false)
            .unwrap()
            .is_none());

        // gradient flows into the region rows without the flag, not with it
        let part = RegionPartition { fg: vec![0, 2], bg: vec![1, 3] };
        for stop in [false, true] {
            let mut store = ParamStore::new();
            let rid = store.add("rows", rand_tensor(&mut rng, &[4, 3]));
            let mut tape = Tape::new();
            let rows = tape.param(&store, rid);
            let anchor = tape.constant(anchor_value.clone());
            let (pos, neg) =
                mined_triplet_vars(&mut tape, rows, &part, &anchor_value, stop).unwrap().unwrap();
            let loss =
                triplet_loss(&mut tape, anchor, pos, neg, 10.0, TripletMetric::Euclidean).unwrap();
            assert!(tape.scalar(loss) > 0.0);
            tape.backward(loss, &mut store).unwrap();
            let grad_norm: f64 = store.get(rid).grad.data().iter().map(|g| g.abs()).sum();
            if stop {
                assert_eq!(grad_norm, 0.0);
            } else {
                assert!(grad_norm > 0.0);
            }
        }
    }

    #[test]
    fn mined_positive_agrees_with_selected_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let f_reg = rand_tensor(&mut rng, &[6, 4]);
        let anchor = rand_tensor(&mut rng, &[4]);
        let part = RegionPartition { fg: vec![1, 3, 4], bg: vec![0, 2, 5] };
        let mut tape = Tape::new();
        let rows = tape.constant(f_reg.clone());
        let (pos, neg) = mined_triplet_vars(&mut tape, rows, &part, &anchor, false)
            .unwrap()
            .unwrap();
        // cross-check against the value-level pipeline
        let grid_rows: Vec<Tensor> = part
            .fg
            .iter()
            .map(|&k| Tensor::new(vec![4], f_reg.data()[k * 4..(k + 1) * 4].to_vec()).unwrap())
            .collect();
        let (_, want_pos) = hardest_positive(&anchor, &grid_rows).unwrap();
        assert_eq!(tape.value(pos), &want_pos);
        let bg_rows: Vec<Tensor> = part
            .bg
            .iter()
            .map(|&k| Tensor::new(vec![4], f_reg.data()[k * 4..(k + 1) * 4].to_vec()).unwrap())
            .collect();
        let want_neg = negative_sample(&bg_rows).unwrap();
        for (a, b) in tape.value(neg).data().iter().zip(want_neg.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
