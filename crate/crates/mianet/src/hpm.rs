//! Hierarchical prior module: a non-parametric pyramid of query activation
//! maps. High-level support features are mask-filtered, compared against the
//! query by pixel-wise cosine similarity, and the resulting map both becomes
//! a prior and steers weighted pooling of the query down to the next scale,
//! while the support is bilinearly resized alongside it.

use crate::error::{Error, Result};
use crate::tensor::{self, BinaryMask, Tensor};

/// How each query pixel aggregates its similarities to the support pixels.
/// `Mean` is the implemented method; `Max` is an experimental variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SupportReduce {
    Mean,
    Max,
}

#[derive(Debug, Clone)]
pub struct HpmConfig {
    /// Strictly decreasing map sizes, coarse stages last.
    pub scales: Vec<(usize, usize)>,
    /// Re-apply the (resized) support mask after each inter-scale resize.
    /// Off by default: the zeroed background survives resizing on its own,
    /// modulo bilinear bleed at the boundary.
    pub refilter_each_stage: bool,
    pub support_reduce: SupportReduce,
    /// When off, the inter-scale pooling ignores the activation map (the
    /// weighting degenerates to an all-ones plane).
    pub info_channels: bool,
}

impl Default for HpmConfig {
    fn default() -> Self {
        Self {
            scales: vec![(60, 60), (30, 30), (15, 15), (8, 8)],
            refilter_each_stage: false,
            support_reduce: SupportReduce::Mean,
            info_channels: true,
        }
    }
}

impl HpmConfig {
    pub fn with_scales(scales: Vec<(usize, usize)>) -> Self {
        Self {
            scales,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("prior pyramid needs at least one scale".into()));
        }
        if self.scales.iter().any(|&(h, w)| h == 0 || w == 0) {
            return Err(Error::Config("prior scale dimensions must be positive".into()));
        }
        for pair in self.scales.windows(2) {
            let ((h0, w0), (h1, w1)) = (pair[0], pair[1]);
            if h1 >= h0 || w1 >= w0 {
                return Err(Error::Config(format!(
                    "prior scales must strictly decrease, got ({h0},{w0}) then ({h1},{w1})"
                )));
            }
        }
        Ok(())
    }
}

/// Per-scale activation maps, one `[h_i, w_i]` tensor per configured scale,
/// every value in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct PriorPyramid {
    pub maps: Vec<Tensor>,
}

impl PriorPyramid {
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

/// Zeroes background positions of the support features. The mask is resized
/// to the feature grid if needed. The returned flag is true when the resized
/// mask has no foreground left.
pub fn filter_support(f_s: &Tensor, mask: &BinaryMask) -> Result<(Tensor, bool)> {
    let [_, h, w] = dims3(f_s)?;
    let m = if (mask.height(), mask.width()) == (h, w) {
        mask.clone()
    } else {
        tensor::resize_mask(mask, h, w)?
    };
    let empty = m.count_ones() == 0;
    let filtered = tensor::hadamard(f_s, &m.to_tensor())?;
    Ok((filtered, empty))
}

/// Per-query-pixel cosine similarity against every support pixel, reduced
/// over the support dimension and min-max normalized into `[h, w]`.
pub fn query_activation(f_s_filtered: &Tensor, f_q: &Tensor) -> Result<Tensor> {
    query_activation_reduced(f_s_filtered, f_q, SupportReduce::Mean)
}

pub fn query_activation_reduced(
    f_s_filtered: &Tensor,
    f_q: &Tensor,
    reduce: SupportReduce,
) -> Result<Tensor> {
    let [c, h, w] = dims3(f_q)?;
    if f_s_filtered.shape() != f_q.shape() {
        return Err(Error::ShapeMismatch(format!(
            "support {:?} vs query {:?}",
            f_s_filtered.shape(),
            f_q.shape()
        )));
    }
    let hw = h * w;
    let q = f_q.reshaped(&[c, hw])?;
    let s = f_s_filtered.reshaped(&[c, hw])?;
    let sim = tensor::cosine_similarity_matrix(&q, &s)?; // [query hw, support hw]
    let mut reduced = vec![0.0; hw];
    for (i, out) in reduced.iter_mut().enumerate() {
        let row = &sim.data()[i * hw..(i + 1) * hw];
        *out = match reduce {
            SupportReduce::Mean => row.iter().sum::<f64>() / hw as f64,
            SupportReduce::Max => row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        };
    }
    let flat = Tensor::new(vec![hw], reduced)?;
    tensor::minmax_normalize(&flat).reshaped(&[h, w])
}

/// Pools the query down to the next scale, weighting each pixel by the
/// current activation map before averaging.
pub fn weighted_downsample(
    f_q: &Tensor,
    map: &Tensor,
    next_h: usize,
    next_w: usize,
) -> Result<Tensor> {
    let weighted = tensor::hadamard(f_q, map)?;
    tensor::average_pool_to(&weighted, next_h, next_w)
}

/// Brings the (already filtered) support features to the query's next scale.
pub fn resize_support(f_s: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    tensor::resize_bilinear(f_s, target_h, target_w)
}

/// Runs the full stage loop over `cfg.scales`. Inputs must already be at the
/// first scale. Degenerate masks never fail: an empty foreground propagates
/// as all-zero features and all-zero maps, with the flag set.
pub fn build_prior_pyramid(
    f_s_h: &Tensor,
    f_q_h: &Tensor,
    mask: &BinaryMask,
    cfg: &HpmConfig,
) -> Result<(PriorPyramid, bool)> {
    cfg.validate()?;
    let [_, h, w] = dims3(f_q_h)?;
    if f_s_h.shape() != f_q_h.shape() {
        return Err(Error::ShapeMismatch(format!(
            "support {:?} vs query {:?}",
            f_s_h.shape(),
            f_q_h.shape()
        )));
    }
    if (h, w) != cfg.scales[0] {
        return Err(Error::ShapeMismatch(format!(
            "features are {h}x{w} but the first scale is {:?}",
            cfg.scales[0]
        )));
    }

    let (mut f_s, empty) = filter_support(f_s_h, mask)?;
    let mut f_q = f_q_h.clone();
    let mut maps = Vec::with_capacity(cfg.scales.len());
    for i in 0..cfg.scales.len() {
        let m = query_activation_reduced(&f_s, &f_q, cfg.support_reduce)?;
        if let Some(&(nh, nw)) = cfg.scales.get(i + 1) {
            let weights = if cfg.info_channels {
                m.clone()
            } else {
                Tensor::filled(m.shape(), 1.0)
            };
            f_q = weighted_downsample(&f_q, &weights, nh, nw)?;
            f_s = resize_support(&f_s, nh, nw)?;
            if cfg.refilter_each_stage {
                let rm = tensor::resize_mask(mask, nh, nw)?;
                f_s = tensor::hadamard(&f_s, &rm.to_tensor())?;
            }
        }
        maps.push(m);
    }
    Ok((PriorPyramid { maps }, empty))
}

fn dims3(t: &Tensor) -> Result<[usize; 3]> {
    match t.shape() {
        [a, b, c] => Ok([*a, *b, *c]),
        s => Err(Error::ShapeMismatch(format!("expected [c,h,w], got {s:?}"))),
    }
}
