//! The assembled network. Frozen features plus a mask go in; prior maps,
//! prototypes and region routing are computed once per episode (they carry
//! no trainable weights), then the tape-level forward runs the generator,
//! the region branch and the fusion head to produce losses or a predicted
//! mask. Weights live in an external [`ParamStore`], so finite-difference
//! checking and checkpointing see the same flat parameter list the
//! optimizer does.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{sgd_step, ParamStore, SgdConfig, Tape, Var};
use crate::episodes::{kshot_mean_prototype, kshot_mean_pyramid, Episode};
use crate::error::{Error, Result};
use crate::gim::{
    general_prototype, lookup_embedding, mined_triplet_vars, partition_indices, region_features,
    region_grid, support_prototype, triplet_loss, GigNetwork, LfgNetwork, RegionPartition,
    TripletMetric, WordEmbeddingTable, DEFAULT_MARGIN,
};
use crate::hpm::{build_prior_pyramid, resize_support, HpmConfig, PriorPyramid, SupportReduce};
use crate::ifm::{
    expand_inputs, fuse_and_predict, segmentation_losses, total_loss, FusionBlock, PredictionSet,
};
use crate::tensor::{BinaryMask, Tensor};

/// Structure and ablation switches. `channels` must equal the encoder's
/// mid-level width; high-level features are resized to `scales[0]` before
/// the prior builder runs.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub channels: usize,
    pub word_dim: usize,
    pub scales: Vec<(usize, usize)>,
    pub margin: f64,
    pub metric: TripletMetric,
    pub use_hpm: bool,
    pub use_gim: bool,
    pub use_triplet: bool,
    pub use_word_embeddings: bool,
    pub info_channels: bool,
    pub stop_gradient_mined: bool,
    pub support_reduce: SupportReduce,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            word_dim: 16,
            scales: vec![(24, 24), (12, 12), (6, 6), (3, 3)],
            margin: DEFAULT_MARGIN,
            metric: TripletMetric::Euclidean,
            use_hpm: true,
            use_gim: true,
            use_triplet: true,
            use_word_embeddings: true,
            info_channels: true,
            stop_gradient_mined: false,
            support_reduce: SupportReduce::Mean,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        if self.words_used() && self.word_dim == 0 {
            return Err(Error::Config("word dimension must be positive".into()));
        }
        if self.triplet_used() && self.margin <= 0.0 {
            return Err(Error::Config(format!(
                "margin must be positive, got {}",
                self.margin
            )));
        }
        self.hpm_config().validate()
    }

    pub fn hpm_config(&self) -> HpmConfig {
        HpmConfig {
            scales: self.scales.clone(),
            refilter_each_stage: false,
            support_reduce: self.support_reduce,
            info_channels: self.info_channels,
        }
    }

    /// The triplet branch only exists inside the general-information module.
    pub fn triplet_used(&self) -> bool {
        self.use_gim && self.use_triplet
    }

    pub fn words_used(&self) -> bool {
        self.use_gim && self.use_word_embeddings
    }

    fn gig_input_dim(&self) -> usize {
        if self.use_word_embeddings {
            self.word_dim + self.channels
        } else {
            self.channels
        }
    }
}

pub struct Mianet {
    pub cfg: ModelConfig,
    gig: Option<GigNetwork>,
    lfg: Option<LfgNetwork>,
    fusion: FusionBlock,
    embeddings: Option<WordEmbeddingTable>,
}

/// Per-episode quantities that carry no trainable weights: computed once,
/// reused across optimization steps.
#[derive(Debug, Clone)]
pub struct EpisodeStatics {
    pub pyramid: PriorPyramid,
    pub prototype: Tensor,
    pub word: Option<Tensor>,
    support_mids: Vec<Tensor>,
    partitions: Vec<RegionPartition>,
    rows_per_shot: usize,
}

/// Tape handles for every loss component of one episode.
pub struct TrainOutputs {
    pub preds: PredictionSet,
    pub l_seg1: Var,
    pub l_seg2: Var,
    pub l_triplet: Option<Var>,
    pub total: Var,
}

impl Mianet {
    /// Builds the network and its parameter store. The embedding table is
    /// required exactly when word conditioning is active.
    pub fn new(
        cfg: ModelConfig,
        embeddings: Option<WordEmbeddingTable>,
    ) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        if cfg.words_used() {
            match &embeddings {
                None => {
                    return Err(Error::Config(
                        "word embeddings enabled but no table provided".into(),
                    ))
                }
                Some(t) if t.dimension() != cfg.word_dim => {
                    return Err(Error::Config(format!(
                        "embedding table dimension {} vs configured {}",
                        t.dimension(),
                        cfg.word_dim
                    )))
                }
                _ => {}
            }
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let gig = if cfg.use_gim {
            Some(GigNetwork::new(
                &mut store,
                &mut rng,
                cfg.gig_input_dim(),
                cfg.channels,
                "gig",
            ))
        } else {
            None
        };
        let lfg = if cfg.triplet_used() {
            Some(LfgNetwork::new(&mut store, &mut rng, cfg.channels, "lfg"))
        } else {
            None
        };
        let fusion = FusionBlock::new(&mut store, &mut rng, cfg.channels, cfg.scales.len(), "fusion");
        Ok((
            Self {
                cfg,
                gig,
                lfg,
                fusion,
                embeddings,
            },
            store,
        ))
    }

    /// Prior pyramid (K-shot mean or zero planes), mean instance prototype,
    /// word vector, and the cached region routing for the triplet branch.
    pub fn prepare_episode(&self, ep: &Episode) -> Result<EpisodeStatics> {
        if ep.support.is_empty() {
            return Err(Error::Dataset("episode has no support shots".into()));
        }
        let c = self.cfg.channels;
        let mid_shape = ep.support[0].features.mid.shape().to_vec();
        for shot in &ep.support {
            if shot.features.mid.shape() != mid_shape {
                return Err(Error::ShapeMismatch(
                    "support shots disagree on mid-feature shape".into(),
                ));
            }
        }
        if mid_shape[0] != c || ep.query.mid.shape()[0] != c {
            return Err(Error::ShapeMismatch(format!(
                "mid features carry {} / {} channels but the model is configured for {c}",
                mid_shape[0],
                ep.query.mid.shape()[0]
            )));
        }

        let pyramid = if self.cfg.use_hpm {
            let hpm_cfg = self.cfg.hpm_config();
            let (s0h, s0w) = self.cfg.scales[0];
            let f_q_h = resize_support(&ep.query.high, s0h, s0w)?;
            let mut pyrs = Vec::with_capacity(ep.shots());
            for shot in &ep.support {
                let f_s_h = resize_support(&shot.features.high, s0h, s0w)?;
                let (pyr, _) = build_prior_pyramid(&f_s_h, &f_q_h, &shot.mask, &hpm_cfg)?;
                pyrs.push(pyr);
            }
            kshot_mean_pyramid(&pyrs)?
        } else {
            PriorPyramid {
                maps: self
                    .cfg
                    .scales
                    .iter()
                    .map(|&(h, w)| Tensor::zeros(&[h, w]))
                    .collect(),
            }
        };

        let protos = ep
            .support
            .iter()
            .map(|s| support_prototype(&s.features.mid, &s.mask).map(|(p, _)| p))
            .collect::<Result<Vec<_>>>()?;
        let prototype = kshot_mean_prototype(&protos)?;

        let word = if self.cfg.words_used() {
            let table = self.embeddings.as_ref().expect("validated at construction");
            Some(lookup_embedding(&ep.class_name, table)?)
        } else {
            None
        };

        let (support_mids, partitions, rows_per_shot) = if self.lfg.is_some() {
            let (gh, gw) = region_grid(mid_shape[1], mid_shape[2]);
            let partitions = ep
                .support
                .iter()
                .map(|s| partition_indices(&s.mask, gh, gw))
                .collect::<Result<Vec<_>>>()?;
            let mids = ep.support.iter().map(|s| s.features.mid.clone()).collect();
            (mids, partitions, gh * gw)
        } else {
            (Vec::new(), Vec::new(), 0)
        };

        Ok(EpisodeStatics {
            pyramid,
            prototype,
            word,
            support_mids,
            partitions,
            rows_per_shot,
        })
    }

    /// Shared forward: general prototype (or plain prototype when the
    /// generator is off), multi-scale fusion, logits at `(out_h, out_w)`.
    /// Returns the predictions and the anchor vector.
    fn forward_core(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        statics: &EpisodeStatics,
        query_mid: &Tensor,
        out_h: usize,
        out_w: usize,
    ) -> Result<(PredictionSet, Var)> {
        let p = tape.constant(statics.prototype.clone());
        let p_gen = match &self.gig {
            Some(gig) => {
                let word = statics.word.clone().map(|w| tape.constant(w));
                general_prototype(tape, store, gig, word, p)?
            }
            None => p,
        };
        let f_q = tape.constant(query_mid.clone());
        let inputs = expand_inputs(tape, f_q, p_gen, &statics.pyramid)?;
        let preds = fuse_and_predict(tape, store, &self.fusion, &inputs, out_h, out_w)?;
        Ok((preds, p_gen))
    }

    fn triplet_term(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        statics: &EpisodeStatics,
        anchor: Var,
    ) -> Result<Option<Var>> {
        let Some(lfg) = &self.lfg else {
            return Ok(None);
        };
        let mut shot_rows = Vec::with_capacity(statics.support_mids.len());
        for mid in &statics.support_mids {
            let x = tape.constant(mid.clone());
            let (rows, _) = region_features(tape, store, lfg, x)?;
            shot_rows.push(rows);
        }
        let mut union = shot_rows[0];
        for &r in &shot_rows[1..] {
            union = tape.concat0(union, r)?;
        }
        let mut fg = Vec::new();
        let mut bg = Vec::new();
        for (k, part) in statics.partitions.iter().enumerate() {
            let off = k * statics.rows_per_shot;
            fg.extend(part.fg.iter().map(|&i| i + off));
            bg.extend(part.bg.iter().map(|&i| i + off));
        }
        let combined = RegionPartition { fg, bg };
        let anchor_value = tape.value(anchor).clone();
        match mined_triplet_vars(
            tape,
            union,
            &combined,
            &anchor_value,
            self.cfg.stop_gradient_mined,
        )? {
            None => Ok(None),
            Some((pos, neg)) => Ok(Some(triplet_loss(
                tape,
                anchor,
                pos,
                neg,
                self.cfg.margin,
                self.cfg.metric,
            )?)),
        }
    }

    /// Full training forward for one episode: all loss components on the tape.
    pub fn training_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ep: &Episode,
        statics: &EpisodeStatics,
    ) -> Result<TrainOutputs> {
        if !ep.query_mask_available {
            return Err(Error::Config(
                "training episode does not expose its query mask".into(),
            ));
        }
        let (h, w) = (ep.query_mask.height(), ep.query_mask.width());
        let (preds, anchor) = self.forward_core(tape, store, statics, &ep.query.mid, h, w)?;
        let (l_seg1, l_seg2) = segmentation_losses(tape, &preds, &ep.query_mask)?;
        let l_triplet = self.triplet_term(tape, store, statics, anchor)?;
        let total = total_loss(tape, l_seg1, l_seg2, l_triplet)?;
        Ok(TrainOutputs {
            preds,
            l_seg1,
            l_seg2,
            l_triplet,
            total,
        })
    }

    /// Segments the query: forward pass, argmax over the two logit planes.
    /// Only the query mask's geometry is read, never its contents.
    pub fn predict_episode(&self, store: &ParamStore, ep: &Episode) -> Result<BinaryMask> {
        let statics = self.prepare_episode(ep)?;
        let (h, w) = (ep.query_mask.height(), ep.query_mask.width());
        let mut tape = Tape::new();
        let (preds, _) = self.forward_core(&mut tape, store, &statics, &ep.query.mid, h, w)?;
        argmax_mask(tape.value(preds.final_logits))
    }
}

/// `[2,h,w]` logits to the per-pixel argmax mask (ties go to background).
pub fn argmax_mask(logits: &Tensor) -> Result<BinaryMask> {
    let (h, w) = match logits.shape() {
        [2, h, w] => (*h, *w),
        s => {
            return Err(Error::ShapeMismatch(format!(
                "expected [2,h,w] logits, got {s:?}"
            )))
        }
    };
    let mut m = BinaryMask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            if logits.at3(1, y, x) > logits.at3(0, y, x) {
                m.set(y, x, 1);
            }
        }
    }
    Ok(m)
}

/// One logged optimization step: batch-mean loss components.
#[derive(Debug, Clone, Copy)]
pub struct StepLog {
    pub step: usize,
    pub l_seg1: f64,
    pub l_seg2: f64,
    pub l_triplet: f64,
    pub total: f64,
}

/// Episodic training over a fixed pool: each step accumulates gradients of
/// `sgd.batch_size` episodes (losses scaled by 1/batch) cycling through the
/// pool in order, then applies one optimizer step. Episode statics are
/// computed once up front.
pub fn train_episodes(
    model: &Mianet,
    store: &mut ParamStore,
    episodes: &[Episode],
    steps: usize,
    sgd: &SgdConfig,
) -> Result<Vec<StepLog>> {
    if episodes.is_empty() {
        return Err(Error::Dataset("no training episodes".into()));
    }
    let statics = episodes
        .iter()
        .map(|e| model.prepare_episode(e))
        .collect::<Result<Vec<_>>>()?;
    let batch = sgd.batch_size.max(1);
    store.zero_grads();
    let mut logs = Vec::with_capacity(steps);
    let mut cursor = 0usize;
    for step in 0..steps {
        let (mut s1, mut s2, mut st, mut tot) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..batch {
            let idx = cursor % episodes.len();
            cursor += 1;
            let mut tape = Tape::new();
            let out = model.training_loss(&mut tape, store, &episodes[idx], &statics[idx])?;
            let total = tape.scalar(out.total);
            if !total.is_finite() {
                return Err(Error::NanLoss { step });
            }
            s1 += tape.scalar(out.l_seg1);
            s2 += tape.scalar(out.l_seg2);
            st += out.l_triplet.map(|t| tape.scalar(t)).unwrap_or(0.0);
            tot += total;
            let scaled = tape.scale(out.total, 1.0 / batch as f64);
            tape.backward(scaled, store)?;
        }
        let b = batch as f64;
        logs.push(StepLog {
            step,
            l_seg1: s1 / b,
            l_seg2: s2 / b,
            l_triplet: st / b,
            total: tot / b,
        });
        sgd_step(store, sgd);
    }
    Ok(logs)
}
