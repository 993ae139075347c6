//! Episode data model: fold splits over the class list, support/query
//! sampling from an encoded dataset, and the K-shot aggregation rules
//! (per-scale map averaging, prototype averaging, region-row union).

pub mod encoder;
pub mod eval;
pub mod metrics;
pub mod synth;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hpm::PriorPyramid;
use crate::tensor::{BinaryMask, Tensor};

use encoder::ToyEncoder;
use synth::SynthDataset;

/// Frozen backbone output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ShotFeatures {
    pub mid: Tensor,
    pub high: Tensor,
}

#[derive(Debug, Clone)]
pub struct SupportShot {
    pub features: ShotFeatures,
    pub mask: BinaryMask,
}

/// One support/query task. The query mask is ground truth for scoring; the
/// `query_mask_available` flag tells the model whether it may be consumed
/// (training) or must stay untouched (testing).
#[derive(Debug, Clone)]
pub struct Episode {
    pub class_id: usize,
    pub class_name: String,
    pub support: Vec<SupportShot>,
    pub query: ShotFeatures,
    pub query_mask: BinaryMask,
    pub query_mask_available: bool,
}

impl Episode {
    pub fn shots(&self) -> usize {
        self.support.len()
    }
}

/// Disjoint train/test class lists for one of the evenly divided folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold: usize,
    pub train_classes: Vec<usize>,
    pub test_classes: Vec<usize>,
}

pub const N_FOLDS: usize = 4;

pub fn fold_split(n_classes: usize, fold: usize) -> Result<FoldSplit> {
    if fold >= N_FOLDS {
        return Err(Error::Config(format!(
            "fold {fold} out of range, {N_FOLDS} folds"
        )));
    }
    if n_classes % N_FOLDS != 0 {
        return Err(Error::Config(format!(
            "{n_classes} classes do not divide evenly into {N_FOLDS} folds"
        )));
    }
    let per = n_classes / N_FOLDS;
    let test: Vec<usize> = (fold * per..(fold + 1) * per).collect();
    let train: Vec<usize> = (0..n_classes).filter(|c| !test.contains(c)).collect();
    Ok(FoldSplit {
        fold,
        train_classes: train,
        test_classes: test,
    })
}

/// A dataset with all images run through the frozen encoder once, so episode
/// sampling is an index operation.
#[derive(Debug, Clone)]
pub struct EncodedDataset {
    pub classes: Vec<String>,
    /// Sample indices per class.
    pub per_class: Vec<Vec<usize>>,
    pub features: Vec<ShotFeatures>,
    pub masks: Vec<BinaryMask>,
    pub image_hw: (usize, usize),
}

pub fn encode_dataset(ds: &SynthDataset, enc: &ToyEncoder) -> Result<EncodedDataset> {
    let features = ds
        .samples
        .iter()
        .map(|s| {
            enc.encode(&s.image)
                .map(|(mid, high)| ShotFeatures { mid, high })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EncodedDataset {
        classes: ds.classes.clone(),
        per_class: ds.per_class.clone(),
        features,
        masks: ds.samples.iter().map(|s| s.mask.clone()).collect(),
        image_hw: (ds.height, ds.width),
    })
}

/// Draws a class from `classes` and K+1 distinct samples of it: K support
/// pairs and one query. Reproducible from the rng state.
pub fn sample_episode(
    ds: &EncodedDataset,
    classes: &[usize],
    k: usize,
    rng: &mut ChaCha8Rng,
    mask_available: bool,
) -> Result<Episode> {
    if k == 0 {
        return Err(Error::Config("need at least one support shot".into()));
    }
    if classes.is_empty() {
        return Err(Error::Dataset("empty class list for sampling".into()));
    }
    let class_id = classes[rng.gen_range(0..classes.len())];
    let pool = &ds.per_class[class_id];
    if pool.len() < k + 1 {
        return Err(Error::Dataset(format!(
            "class {} has {} samples, episode needs {}",
            ds.classes[class_id],
            pool.len(),
            k + 1
        )));
    }
    let picks = rand::seq::index::sample(rng, pool.len(), k + 1);
    let mut ids: Vec<usize> = picks.iter().map(|i| pool[i]).collect();
    let query_id = ids.pop().expect("k+1 picks");
    let support = ids
        .into_iter()
        .map(|id| SupportShot {
            features: ds.features[id].clone(),
            mask: ds.masks[id].clone(),
        })
        .collect();
    Ok(Episode {
        class_id,
        class_name: ds.classes[class_id].clone(),
        support,
        query: ds.features[query_id].clone(),
        query_mask: ds.masks[query_id].clone(),
        query_mask_available: mask_available,
    })
}

/// Per-scale arithmetic mean of K pyramids.
pub fn kshot_mean_pyramid(pyramids: &[PriorPyramid]) -> Result<PriorPyramid> {
    let k = pyramids.len();
    if k == 0 {
        return Err(Error::ShapeMismatch("no pyramids to aggregate".into()));
    }
    let n_scales = pyramids[0].len();
    let mut maps = Vec::with_capacity(n_scales);
    for s in 0..n_scales {
        let first = &pyramids[0].maps[s];
        let mut acc = Tensor::zeros(first.shape());
        for p in pyramids {
            if p.len() != n_scales || p.maps[s].shape() != first.shape() {
                return Err(Error::ShapeMismatch("pyramid shapes differ across shots".into()));
            }
            for (a, b) in acc.data_mut().iter_mut().zip(p.maps[s].data()) {
                *a += b;
            }
        }
        for a in acc.data_mut() {
            *a /= k as f64;
        }
        maps.push(acc);
    }
    Ok(PriorPyramid { maps })
}

/// Arithmetic mean of K prototype vectors.
pub fn kshot_mean_prototype(prototypes: &[Tensor]) -> Result<Tensor> {
    let k = prototypes.len();
    if k == 0 {
        return Err(Error::ShapeMismatch("no prototypes to aggregate".into()));
    }
    let mut proto = Tensor::zeros(prototypes[0].shape());
    for p in prototypes {
        if p.shape() != proto.shape() {
            return Err(Error::ShapeMismatch("prototype shapes differ across shots".into()));
        }
        for (a, b) in proto.data_mut().iter_mut().zip(p.data()) {
            *a += b;
        }
    }
    for a in proto.data_mut() {
        *a /= k as f64;
    }
    Ok(proto)
}

/// Row-wise union: K `[n_k, c]` matrices stacked into `[Σ n_k, c]`.
pub fn kshot_union_rows(region_rows: &[Tensor]) -> Result<Tensor> {
    let mut rows = region_rows
        .first()
        .ok_or_else(|| Error::ShapeMismatch("no region rows to aggregate".into()))?
        .clone();
    for r in &region_rows[1..] {
        rows = crate::tensor::concat_channels(&rows, r)?;
    }
    Ok(rows)
}

/// K-shot reduction: per-scale arithmetic mean of the K pyramids, mean of the
/// K prototypes, and the row-wise union of the K region features.
pub fn kshot_aggregate(
    pyramids: &[PriorPyramid],
    prototypes: &[Tensor],
    region_rows: &[Tensor],
) -> Result<(PriorPyramid, Tensor, Tensor)> {
    let k = pyramids.len();
    if k == 0 || prototypes.len() != k || region_rows.len() != k {
        return Err(Error::ShapeMismatch(format!(
            "k-shot inputs disagree: {k} pyramids, {} prototypes, {} region sets",
            prototypes.len(),
            region_rows.len()
        )));
    }
    Ok((
        kshot_mean_pyramid(pyramids)?,
        kshot_mean_prototype(prototypes)?,
        kshot_union_rows(region_rows)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tests_support::rand_tensor;
    use rand::SeedableRng;

    fn dummy_dataset(n_classes: usize, per_class: usize) -> EncodedDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let n = n_classes * per_class;
        EncodedDataset {
            classes: (0..n_classes).map(|c| format!("class{c}")).collect(),
            per_class: (0..n_classes)
                .map(|c| (c * per_class..(c + 1) * per_class).collect())
                .collect(),
            features: (0..n)
                .map(|_| ShotFeatures {
                    mid: rand_tensor(&mut rng, &[2, 4, 4]),
                    high: rand_tensor(&mut rng, &[2, 2, 2]),
                })
                .collect(),
            masks: (0..n).map(|_| BinaryMask::ones(8, 8)).collect(),
            image_hw: (8, 8),
        }
    }

    #[test]
    fn folds_are_disjoint_and_cover() {
        for fold in 0..N_FOLDS {
            let s = fold_split(8, fold).unwrap();
            assert_eq!(s.test_classes.len(), 2);
            assert_eq!(s.train_classes.len(), 6);
            for t in &s.test_classes {
                assert!(!s.train_classes.contains(t));
            }
            let mut all: Vec<usize> = s.train_classes.iter().chain(&s.test_classes).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..8).collect::<Vec<_>>());
        }
        assert!(fold_split(8, 4).is_err());
        assert!(fold_split(7, 0).is_err());
    }

    #[test]
    fn episode_sampling_replay_and_shapes() {
        let ds = dummy_dataset(4, 5);
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        let ea = sample_episode(&ds, &[0, 1], 3, &mut a, true).unwrap();
        let eb = sample_episode(&ds, &[0, 1], 3, &mut b, true).unwrap();
        assert_eq!(ea.class_id, eb.class_id);
        assert_eq!(ea.shots(), 3);
        for (sa, sb) in ea.support.iter().zip(&eb.support) {
            assert_eq!(sa.features.mid, sb.features.mid);
        }
        assert_eq!(ea.query.mid, eb.query.mid);

        // K=1 gives a single support pair
        let e1 = sample_episode(&ds, &[2], 1, &mut a, false).unwrap();
        assert_eq!(e1.shots(), 1);
        assert!(!e1.query_mask_available);
    }

    #[test]
    fn support_and_query_never_share_a_sample() {
        let ds = dummy_dataset(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10_000 {
            let e = sample_episode(&ds, &[0, 1, 2], 3, &mut rng, true).unwrap();
            // all four drawn samples must be distinct; compare identities
            // through the feature tensors (each sample is unique random data)
            let mut seen: Vec<&Tensor> = e.support.iter().map(|s| &s.features.mid).collect();
            seen.push(&e.query.mid);
            for i in 0..seen.len() {
                for j in i + 1..seen.len() {
                    assert_ne!(seen[i], seen[j]);
                }
            }
        }
    }

    #[test]
    fn sampling_errors_when_class_too_small() {
        let ds = dummy_dataset(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = sample_episode(&ds, &[1], 3, &mut rng, true).unwrap_err();
        assert!(matches!(err, Error::Dataset(_)), "{err}");
    }

    fn pyramid_of(maps: Vec<Tensor>) -> PriorPyramid {
        PriorPyramid { maps }
    }

    #[test]
    fn kshot_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pyr = pyramid_of(vec![rand_tensor(&mut rng, &[4, 4]), rand_tensor(&mut rng, &[2, 2])]);
        let proto = rand_tensor(&mut rng, &[3]);
        let rows = rand_tensor(&mut rng, &[4, 3]);
        let (p, pr, r) =
            kshot_aggregate(&[pyr.clone()], &[proto.clone()], &[rows.clone()]).unwrap();
        for (a, b) in p.maps.iter().zip(&pyr.maps) {
            assert_eq!(a, b);
        }
        assert_eq!(pr, proto);
        assert_eq!(r, rows);
    }

    #[test]
    fn kshot_two_with_zero_pyramid_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = rand_tensor(&mut rng, &[3, 3]);
        let pyr = pyramid_of(vec![m.clone()]);
        let zero = pyramid_of(vec![Tensor::zeros(&[3, 3])]);
        let proto = rand_tensor(&mut rng, &[2]);
        let rows = rand_tensor(&mut rng, &[2, 2]);
        let (p, _, _) = kshot_aggregate(
            &[pyr, zero],
            &[proto.clone(), proto],
            &[rows.clone(), rows],
        )
        .unwrap();
        for (a, b) in p.maps[0].data().iter().zip(m.data()) {
            assert_eq!(*a, b / 2.0);
        }
    }

    #[test]
    fn kshot_three_matches_scalar_oracle_and_union_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pyrs: Vec<PriorPyramid> = (0..3)
            .map(|_| pyramid_of(vec![rand_tensor(&mut rng, &[2, 2])]))
            .collect();
        let protos: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, &[4])).collect();
        let rows: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, &[2, 4])).collect();
        let (p, pr, r) = kshot_aggregate(&pyrs, &protos, &rows).unwrap();
        for i in 0..4 {
            let want = (pyrs[0].maps[0].data()[i] + pyrs[1].maps[0].data()[i] + pyrs[2].maps[0].data()[i]) / 3.0;
            assert!((p.maps[0].data()[i] - want).abs() < 1e-15);
            let wantp = (protos[0].data()[i] + protos[1].data()[i] + protos[2].data()[i]) / 3.0;
            assert!((pr.data()[i] - wantp).abs() < 1e-15);
        }
        assert_eq!(r.shape(), [6, 4]);
        assert_eq!(&r.data()[0..8], rows[0].data());
        assert_eq!(&r.data()[8..16], rows[1].data());
        assert_eq!(&r.data()[16..24], rows[2].data());
    }

    #[test]
    fn kshot_rejects_mismatched_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = pyramid_of(vec![rand_tensor(&mut rng, &[2, 2])]);
        let b = pyramid_of(vec![rand_tensor(&mut rng, &[3, 3])]);
        let proto = rand_tensor(&mut rng, &[2]);
        let rows = rand_tensor(&mut rng, &[1, 2]);
        assert!(kshot_aggregate(&[a, b], &[proto.clone(), proto], &[rows.clone(), rows]).is_err());
    }
}
