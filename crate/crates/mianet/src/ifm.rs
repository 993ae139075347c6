//! Information fusion module. Each pyramid scale sees the resized query
//! features, the tiled general prototype and its prior map; a per-scale merge
//! stack fuses them, a top-down pathway feeds coarser context into finer
//! scales, and per-scale heads emit two-class logits. The finest head,
//! resized to image resolution, is the final prediction.
//!
//! The fusion internals are a deliberately small stand-in for the feature
//! enrichment structure they imitate: concat -> two conv3x3+ReLU -> additive
//! top-down refinement -> conv head per scale.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{uniform_init, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::hpm::PriorPyramid;
use crate::tensor::{BinaryMask, Tensor};

/// Per-scale fusion weights: merge convs (2c+1 -> c -> c) and a 2-class head.
#[derive(Debug, Clone)]
pub struct FusionBlock {
    pub merge_a: Vec<(ParamId, ParamId)>,
    pub merge_b: Vec<(ParamId, ParamId)>,
    pub heads: Vec<(ParamId, ParamId)>,
    pub channels: usize,
}

impl FusionBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        channels: usize,
        n_scales: usize,
        prefix: &str,
    ) -> Self {
        let c = channels;
        let mut merge_a = Vec::with_capacity(n_scales);
        let mut merge_b = Vec::with_capacity(n_scales);
        let mut heads = Vec::with_capacity(n_scales);
        for i in 0..n_scales {
            merge_a.push((
                store.add(
                    format!("{prefix}.scale{i}.merge_a.weight"),
                    uniform_init(rng, &[c, 2 * c + 1, 3, 3], (2 * c + 1) * 9),
                ),
                store.add(format!("{prefix}.scale{i}.merge_a.bias"), Tensor::zeros(&[c])),
            ));
            merge_b.push((
                store.add(
                    format!("{prefix}.scale{i}.merge_b.weight"),
                    uniform_init(rng, &[c, c, 3, 3], c * 9),
                ),
                store.add(format!("{prefix}.scale{i}.merge_b.bias"), Tensor::zeros(&[c])),
            ));
            heads.push((
                store.add(
                    format!("{prefix}.scale{i}.head.weight"),
                    uniform_init(rng, &[2, c, 3, 3], c * 9),
                ),
                store.add(format!("{prefix}.scale{i}.head.bias"), Tensor::zeros(&[2])),
            ));
        }
        Self {
            merge_a,
            merge_b,
            heads,
            channels,
        }
    }

    pub fn n_scales(&self) -> usize {
        self.heads.len()
    }
}

/// One scale's fusion inputs: query features, tiled prototype, prior plane.
#[derive(Debug, Clone, Copy)]
pub struct ScaleInputs {
    pub f_q: Var,
    pub p_gen: Var,
    pub prior: Var,
}

/// Brings the query features, the general prototype and the prior maps to
/// every pyramid scale: resize, channel-tile, and a 1-channel plane.
pub fn expand_inputs(
    tape: &mut Tape,
    f_q: Var,
    p_gen: Var,
    pyramid: &PriorPyramid,
) -> Result<Vec<ScaleInputs>> {
    let fq_shape = tape.value(f_q).shape().to_vec();
    let [_, fh, fw] = match fq_shape[..] {
        [c, h, w] => [c, h, w],
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "query features must be [c,h,w], got {fq_shape:?}"
            )))
        }
    };
    let mut out = Vec::with_capacity(pyramid.len());
    for map in &pyramid.maps {
        let (h, w) = (map.shape()[0], map.shape()[1]);
        let f_q_i = if (fh, fw) == (h, w) {
            f_q
        } else {
            tape.resize_bilinear(f_q, h, w)?
        };
        let p_gen_i = tape.expand_vector(p_gen, h, w)?;
        let plane = tape.constant(map.reshaped(&[1, h, w])?);
        out.push(ScaleInputs {
            f_q: f_q_i,
            p_gen: p_gen_i,
            prior: plane,
        });
    }
    Ok(out)
}

/// Intermediate logits per scale plus the final image-resolution logits.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    pub intermediate: Vec<Var>,
    pub final_logits: Var,
}

/// Coarse-to-fine fusion: merge each scale, cascade coarser fused maps into
/// finer ones, run the heads, and resize the finest head to `(out_h, out_w)`.
pub fn fuse_and_predict(
    tape: &mut Tape,
    store: &ParamStore,
    block: &FusionBlock,
    inputs: &[ScaleInputs],
    out_h: usize,
    out_w: usize,
) -> Result<PredictionSet> {
    if inputs.len() != block.n_scales() {
        return Err(Error::ShapeMismatch(format!(
            "{} scales of inputs vs {} fusion stages",
            inputs.len(),
            block.n_scales()
        )));
    }
    let merged: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, s)| -> Result<Var> {
            let cat = tape.concat0(s.f_q, s.p_gen)?;
            let cat = tape.concat0(cat, s.prior)?;
            let (wa, ba) = block.merge_a[i];
            let (wav, bav) = (tape.param(store, wa), tape.param(store, ba));
            let x = tape.conv3x3(cat, wav, bav, 1)?;
            let x = tape.relu(x);
            let (wb, bb) = block.merge_b[i];
            let (wbv, bbv) = (tape.param(store, wb), tape.param(store, bb));
            let x = tape.conv3x3(x, wbv, bbv, 1)?;
            Ok(tape.relu(x))
        })
        .collect::<Result<_>>()?;

    // coarsest first; each fused map is refined by the one below it
    let n = merged.len();
    let mut fused = vec![None; n];
    for i in (0..n).rev() {
        let mut x = merged[i];
        if i + 1 < n {
            let coarser: Var = fused[i + 1].expect("filled in reverse order");
            let shape = tape.value(x).shape().to_vec();
            let up = tape.resize_bilinear(coarser, shape[1], shape[2])?;
            x = tape.add(x, up)?;
        }
        fused[i] = Some(x);
    }

    let mut intermediate = Vec::with_capacity(n);
    for i in 0..n {
        let (wh, bh) = block.heads[i];
        let (whv, bhv) = (tape.param(store, wh), tape.param(store, bh));
        let logits = tape.conv3x3(fused[i].expect("filled"), whv, bhv, 1)?;
        intermediate.push(logits);
    }
    let finest = intermediate[0];
    let shape = tape.value(finest).shape().to_vec();
    let final_logits = if (shape[1], shape[2]) == (out_h, out_w) {
        finest
    } else {
        tape.resize_bilinear(finest, out_h, out_w)?
    };
    Ok(PredictionSet {
        intermediate,
        final_logits,
    })
}

/// `(L_seg1, L_seg2)`: the mean intermediate cross-entropy (each head resized
/// up to the mask resolution first) and the final-prediction cross-entropy.
pub fn segmentation_losses(
    tape: &mut Tape,
    preds: &PredictionSet,
    mask: &BinaryMask,
) -> Result<(Var, Var)> {
    let (h, w) = (mask.height(), mask.width());
    let l_seg2 = tape.cross_entropy_2class(preds.final_logits, mask)?;
    let mut acc: Option<Var> = None;
    for &logits in &preds.intermediate {
        let shape = tape.value(logits).shape().to_vec();
        let up = if (shape[1], shape[2]) == (h, w) {
            logits
        } else {
            tape.resize_bilinear(logits, h, w)?
        };
        let ce = tape.cross_entropy_2class(up, mask)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, ce)?,
            None => ce,
        });
    }
    let total = acc.ok_or_else(|| Error::ShapeMismatch("no intermediate heads".into()))?;
    let l_seg1 = tape.scale(total, 1.0 / preds.intermediate.len() as f64);
    Ok((l_seg1, l_seg2))
}

/// `L = L_seg1 + L_seg2 + L_triplet`; a skipped triplet contributes nothing.
pub fn total_loss(
    tape: &mut Tape,
    l_seg1: Var,
    l_seg2: Var,
    l_triplet: Option<Var>,
) -> Result<Var> {
    let seg = tape.add(l_seg1, l_seg2)?;
    match l_triplet {
        Some(t) => tape.add(seg, t),
        None => Ok(seg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckConfig};
    use crate::hpm::{build_prior_pyramid, HpmConfig};
    use crate::tensor::tests_support::rand_tensor;
    use rand::SeedableRng;

    fn toy_pyramid(rng: &mut ChaCha8Rng, c: usize, scales: &[(usize, usize)]) -> PriorPyramid {
        let (h, w) = scales[0];
        let fs = rand_tensor(rng, &[c, h, w]);
        let fq = rand_tensor(rng, &[c, h, w]);
        let cfg = HpmConfig::with_scales(scales.to_vec());
        build_prior_pyramid(&fs, &fq, &BinaryMask::ones(h, w), &cfg).unwrap().0
    }

    #[test]
    fn expand_identity_when_sizes_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let pyr = toy_pyramid(&mut rng, 2, &[(5, 5)]);
        let mut tape = Tape::new();
        let fq_val = rand_tensor(&mut rng, &[3, 5, 5]);
        let f_q = tape.constant(fq_val.clone());
        let p = tape.constant(rand_tensor(&mut rng, &[3]));
        let got = expand_inputs(&mut tape, f_q, p, &pyr).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(tape.value(got[0].f_q), &fq_val);
        assert_eq!(tape.value(got[0].prior).shape(), [1, 5, 5]);
    }

    #[test]
    fn expand_basis_vector_tiles_single_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let pyr = toy_pyramid(&mut rng, 2, &[(4, 4)]);
        let mut tape = Tape::new();
        let f_q = tape.constant(rand_tensor(&mut rng, &[3, 4, 4]));
        let e1 = tape.constant(Tensor::from_vec(vec![0.0, 1.0, 0.0]).unwrap());
        let got = expand_inputs(&mut tape, f_q, e1, &pyr).unwrap();
        let t = tape.value(got[0].p_gen);
        assert_eq!(t.shape(), [3, 4, 4]);
        assert!(t.data()[0..16].iter().all(|&v| v == 0.0));
        assert!(t.data()[16..32].iter().all(|&v| v == 1.0));
        assert!(t.data()[32..48].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn expand_shape_audit_default_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let scales = [(60, 60), (30, 30), (15, 15), (8, 8)];
        let pyr = toy_pyramid(&mut rng, 2, &scales);
        let mut tape = Tape::new();
        let c = 3;
        let f_q = tape.constant(rand_tensor(&mut rng, &[c, 60, 60]));
        let p = tape.constant(rand_tensor(&mut rng, &[c]));
        let got = expand_inputs(&mut tape, f_q, p, &pyr).unwrap();
        for (s, &(h, w)) in got.iter().zip(&scales) {
            assert_eq!(tape.value(s.f_q).shape(), [c, h, w]);
            assert_eq!(tape.value(s.p_gen).shape(), [c, h, w]);
            assert_eq!(tape.value(s.prior).shape(), [1, h, w]);
        }
    }

    fn toy_fusion(
        rng: &mut ChaCha8Rng,
        c: usize,
        scales: &[(usize, usize)],
    ) -> (ParamStore, FusionBlock, PriorPyramid, Tensor, Tensor) {
        let mut store = ParamStore::new();
        let block = FusionBlock::new(&mut store, rng, c, scales.len(), "fusion");
        let pyr = toy_pyramid(rng, 2, scales);
        let fq = rand_tensor(rng, &[c, scales[0].0, scales[0].1]);
        let p = rand_tensor(rng, &[c]);
        (store, block, pyr, fq, p)
    }

    #[test]
    fn zero_heads_give_uniform_logits_and_ln2_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let scales = [(6, 6), (3, 3)];
        let (mut store, block, pyr, fq, p) = toy_fusion(&mut rng, 4, &scales);
        for &(w, b) in &block.heads {
            store.get_mut(w).value.data_mut().fill(0.0);
            store.get_mut(b).value.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let f_q = tape.constant(fq);
        let p_gen = tape.constant(p);
        let inputs = expand_inputs(&mut tape, f_q, p_gen, &pyr).unwrap();
        let preds = fuse_and_predict(&mut tape, &store, &block, &inputs, 12, 12).unwrap();
        assert!(tape.value(preds.final_logits).data().iter().all(|&v| v == 0.0));
        let mask = BinaryMask::new(12, 12, (0..144).map(|i| (i % 3 == 0) as u8).collect()).unwrap();
        let (l1, l2) = segmentation_losses(&mut tape, &preds, &mask).unwrap();
        assert!((tape.scalar(l1) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((tape.scalar(l2) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn single_scale_matches_manual_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(74);
        let scales = [(5, 5)];
        let (store, block, pyr, fq, p) = toy_fusion(&mut rng, 3, &scales);
        let mut tape = Tape::new();
        let f_q = tape.constant(fq);
        let p_gen = tape.constant(p);
        let inputs = expand_inputs(&mut tape, f_q, p_gen, &pyr).unwrap();
        let preds = fuse_and_predict(&mut tape, &store, &block, &inputs, 5, 5).unwrap();

        // by hand: concat -> conv_a -> relu -> conv_b -> relu -> head
        let cat = tape.concat0(inputs[0].f_q, inputs[0].p_gen).unwrap();
        let cat = tape.concat0(cat, inputs[0].prior).unwrap();
        let (wa, ba) = block.merge_a[0];
        let (w, b) = (tape.param(&store, wa), tape.param(&store, ba));
        let x = tape.conv3x3(cat, w, b, 1).unwrap();
        let x = tape.relu(x);
        let (wb, bb) = block.merge_b[0];
        let (w, b) = (tape.param(&store, wb), tape.param(&store, bb));
        let x = tape.conv3x3(x, w, b, 1).unwrap();
        let x = tape.relu(x);
        let (wh, bh) = block.heads[0];
        let (w, b) = (tape.param(&store, wh), tape.param(&store, bh));
        let manual = tape.conv3x3(x, w, b, 1).unwrap();
        assert_eq!(tape.value(preds.final_logits), tape.value(manual));
        assert_eq!(preds.intermediate.len(), 1);
    }

    #[test]
    fn losses_match_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(75);
        // fabricate a prediction set directly from random logits
        let mask_bits: Vec<u8> = (0..25).map(|i| (i % 2) as u8).collect();
        let mask = BinaryMask::new(5, 5, mask_bits).unwrap();
        let inter_vals = [
            rand_tensor(&mut rng, &[2, 5, 5]),
            rand_tensor(&mut rng, &[2, 3, 3]),
        ];
        let final_val = rand_tensor(&mut rng, &[2, 5, 5]);
        let mut tape = Tape::new();
        let preds = PredictionSet {
            intermediate: inter_vals.iter().map(|t| tape.constant(t.clone())).collect(),
            final_logits: tape.constant(final_val.clone()),
        };
        let (l1, l2) = segmentation_losses(&mut tape, &preds, &mask).unwrap();

        let ce_oracle = |logits: &Tensor| -> f64 {
            let hw = 25;
            let mut acc = 0.0;
            for i in 0..hw {
                let (l0, l1) = (logits.data()[i], logits.data()[hw + i]);
                let z = l0.exp() + l1.exp();
                let p = if mask.data()[i] == 1 { l1.exp() / z } else { l0.exp() / z };
                acc += -p.ln();
            }
            acc / hw as f64
        };
        assert!((tape.scalar(l2) - ce_oracle(&final_val)).abs() < 1e-10);
        let up1 = ce_oracle(&inter_vals[0]);
        let up2 = ce_oracle(&crate::tensor::resize_bilinear(&inter_vals[1], 5, 5).unwrap());
        assert!((tape.scalar(l1) - (up1 + up2) / 2.0).abs() < 1e-10);
    }

    #[test]
    fn perfect_logits_drive_losses_to_zero() {
        let mask = BinaryMask::new(4, 4, (0..16).map(|i| (i < 8) as u8).collect()).unwrap();
        let mut logits = Tensor::zeros(&[2, 4, 4]);
        for i in 0..16 {
            let t = mask.data()[i] as usize;
            logits.data_mut()[t * 16 + i] = 60.0;
            logits.data_mut()[(1 - t) * 16 + i] = -60.0;
        }
        let mut tape = Tape::new();
        let preds = PredictionSet {
            intermediate: vec![tape.constant(logits.clone())],
            final_logits: tape.constant(logits),
        };
        let (l1, l2) = segmentation_losses(&mut tape, &preds, &mask).unwrap();
        assert!(tape.scalar(l1) < 1e-12);
        assert!(tape.scalar(l2) < 1e-12);
    }

    #[test]
    fn loss_rejects_mask_size_mismatch() {
        let mut tape = Tape::new();
        let preds = PredictionSet {
            intermediate: vec![tape.constant(Tensor::zeros(&[2, 4, 4]))],
            final_logits: tape.constant(Tensor::zeros(&[2, 4, 4])),
        };
        let mask = BinaryMask::zeros(5, 5);
        assert!(segmentation_losses(&mut tape, &preds, &mask).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut tape = Tape::new();
        let zero = tape.constant(Tensor::from_vec(vec![0.0]).unwrap());
        let t = total_loss(&mut tape, zero, zero, Some(zero)).unwrap();
        assert_eq!(tape.scalar(t), 0.0);

        let ln2 = tape.constant(Tensor::from_vec(vec![std::f64::consts::LN_2]).unwrap());
        let trip = tape.constant(Tensor::from_vec(vec![0.3]).unwrap());
        let t = total_loss(&mut tape, ln2, ln2, Some(trip)).unwrap();
        assert!((tape.scalar(t) - (2.0 * std::f64::consts::LN_2 + 0.3)).abs() < 1e-15);

        let skipped = total_loss(&mut tape, ln2, ln2, None).unwrap();
        assert!((tape.scalar(skipped) - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn fusion_gradcheck_end_to_end() {
        let mut rng = ChaCha8Rng::seed_from_u64(76);
        let scales = [(6, 6), (3, 3)];
        let (mut store, block, pyr, fq, p) = toy_fusion(&mut rng, 3, &scales);
        let mask = BinaryMask::new(6, 6, (0..36).map(|i| (i % 4 == 0) as u8).collect()).unwrap();
        let forward = |s: &ParamStore, t: &mut Tape| -> Var {
            let f_q = t.constant(fq.clone());
            let p_gen = t.constant(p.clone());
            let inputs = expand_inputs(t, f_q, p_gen, &pyr).unwrap();
            let preds = fuse_and_predict(t, s, &block, &inputs, 6, 6).unwrap();
            let (l1, l2) = segmentation_losses(t, &preds, &mask).unwrap();
            total_loss(t, l1, l2, None).unwrap()
        };
        let mut tape = Tape::new();
        let loss = forward(&store, &mut tape);
        assert!(tape.scalar(loss).is_finite() && tape.scalar(loss) >= 0.0);
        store.zero_grads();
        tape.backward(loss, &mut store).unwrap();
        // every fusion parameter sees gradient from the two heads
        for p in store.iter() {
            let l1: f64 = p.grad.data().iter().map(|g| g.abs()).sum();
            assert!(l1 > 0.0, "no gradient reached {}", p.name);
        }
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
        assert!(report.passed(), "{} failures, first: {:?}", report.failures.len(), report.failures.first());
    }
}
