//! Adapter training loop: batched caption encoding, the gated composite
//! objective, and a decoupled-weight-decay Adam update over the adapter
//! parameters only. The encoder stays frozen throughout.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::dsaa::{DsaaTapeWeights, DsaaWeights};
use crate::encoder::EncoderTapeWeights;
use crate::objectives::{
    attr_contrastive_nodes, cls_loss_on_tape, det_loss_on_tape, total_loss_on_tape,
    BoundingBox, LossWeights, ObjectiveError,
};
use crate::pipeline::{DsaaPipeline, PipelineError};
use crate::rng::stream;
use crate::tape::{NodeId, Tape};
use crate::tensor::{NumericsError, Tensor};
use crate::world::SceneRecord;

#[derive(Debug)]
pub enum TrainError {
    BadConfig { detail: String },
    EmptyDataset,
    NonFinite { step: usize },
    Pipeline(PipelineError),
    Objective(ObjectiveError),
    Numerics(NumericsError),
}

impl core::fmt::Display for TrainError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TrainError::BadConfig { detail } => write!(f, "bad training config: {detail}"),
            TrainError::EmptyDataset => write!(f, "no training records"),
            TrainError::NonFinite { step } => {
                write!(f, "non-finite loss or gradient at step {step}")
            }
            TrainError::Pipeline(e) => write!(f, "{e}"),
            TrainError::Objective(e) => write!(f, "{e}"),
            TrainError::Numerics(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for TrainError {}

impl From<PipelineError> for TrainError {
    fn from(e: PipelineError) -> Self {
        TrainError::Pipeline(e)
    }
}

impl From<ObjectiveError> for TrainError {
    fn from(e: ObjectiveError) -> Self {
        TrainError::Objective(e)
    }
}

impl From<NumericsError> for TrainError {
    fn from(e: NumericsError) -> Self {
        TrainError::Numerics(e)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig {
                detail: "batch_size must be positive".into(),
            });
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::BadConfig {
                detail: format!("lr must be positive and finite, got {}", self.lr),
            });
        }
        if self.weight_decay < 0.0 {
            return Err(TrainError::BadConfig {
                detail: "weight_decay must be non-negative".into(),
            });
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(TrainError::BadConfig {
                    detail: format!("{name} must lie in [0, 1), got {b}"),
                });
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(TrainError::BadConfig {
                detail: "adam_eps must be positive".into(),
            });
        }
        self.loss.validate().map_err(TrainError::Objective)
    }
}

/// One optimization step's logged loss terms.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub cls: f64,
    pub attr: f64,
    /// Present once the detection gate is open.
    pub det: Option<f64>,
    pub grad_norm: f64,
}

/// Uniform with-replacement batch for one step, as a pure function of the
/// seed so logs and oracles can replay it.
pub fn batch_indices(seed: u64, step: usize, batch_size: usize, n: usize) -> Vec<usize> {
    let mut rng = stream(seed, &format!("train.batch.{step}"));
    (0..batch_size).map(|_| rng.gen_range(0..n)).collect()
}

struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

/// Layer-norm affine parameters are exempt from weight decay.
const DECAY_MASK: [bool; 8] = [true, true, false, false, true, true, true, true];

impl AdamW {
    fn new(sizes: &[usize]) -> Self {
        AdamW {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
        }
    }

    fn apply(&mut self, params: [&mut Tensor; 8], grads: &[Vec<f64>], cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(cfg.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(cfg.beta2, self.t as f64);
        for (i, p) in params.into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            let decay = if DECAY_MASK[i] { cfg.weight_decay } else { 0.0 };
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *x -= cfg.lr * (m_hat / (libm::sqrt(v_hat) + cfg.adam_eps) + decay * *x);
            }
        }
    }
}

pub struct Trainer {
    pipeline: DsaaPipeline,
    records: Vec<SceneRecord>,
    cfg: TrainConfig,
    opt: AdamW,
    step: usize,
}

impl Trainer {
    pub fn new(
        pipeline: DsaaPipeline,
        records: Vec<SceneRecord>,
        cfg: TrainConfig,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        if records.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let sizes: Vec<usize> = pipeline
            .dsaa
            .to_named()
            .iter()
            .map(|(_, t)| t.len())
            .collect();
        Ok(Trainer {
            pipeline,
            records,
            cfg,
            opt: AdamW::new(&sizes),
            step: 0,
        })
    }

    pub fn pipeline(&self) -> &DsaaPipeline {
        &self.pipeline
    }

    pub fn into_pipeline(self) -> DsaaPipeline {
        self.pipeline
    }

    pub fn current_step(&self) -> usize {
        self.step
    }

    /// One batch forward/backward/update. On a non-finite loss or gradient
    /// the update is skipped so the held weights stay at the last good
    /// state, and the error is returned.
    pub fn step(&mut self) -> Result<StepRecord, TrainError> {
        let step = self.step;
        let idx = batch_indices(
            self.cfg.seed,
            step,
            self.cfg.batch_size,
            self.records.len(),
        );
        let gate_open = self.cfg.loss.det_gate_open(step);

        let mut tape = Tape::new();
        let ew = EncoderTapeWeights::register(&mut tape, &self.pipeline.encoder);
        let dw = DsaaTapeWeights::register(&mut tape, &self.pipeline.dsaa, true);

        let mut bce_logits: Vec<NodeId> = Vec::new();
        let mut bce_targets: Vec<f64> = Vec::new();
        let mut batch_regions: Vec<(NodeId, NodeId)> = Vec::new();
        let mut batch_pos_pooled: Vec<NodeId> = Vec::new();
        let mut attr_pos: Vec<NodeId> = Vec::new();
        let mut attr_negs: Vec<NodeId> = Vec::new();
        let mut attr_offsets: Vec<usize> = vec![0];
        let mut det_terms: Vec<NodeId> = Vec::new();
        let inv_tau = 1.0 / self.cfg.loss.tau_cls;

        for &ri in &idx {
            let record = &self.records[ri];
            let target = &record.instances[record.target];
            let region_t = self.pipeline.project_region(&target.feature);
            let region = tape.constant(&region_t);
            let region_l2 = tape.l2_norm(region);

            let captions =
                core::iter::once(&record.caption.positive).chain(record.caption.negatives.iter());
            let mut pooled_nodes: Vec<(NodeId, NodeId)> = Vec::new();
            let mut attr_means: Vec<Option<NodeId>> = Vec::new();
            for caption in captions {
                let (tokens, spans) = self.pipeline.annotate(caption)?;
                let f = self
                    .pipeline
                    .forward_on_tape(&mut tape, &ew, &dw, &tokens, &spans, false)?;
                let mean = if f.attr_rows.is_empty() {
                    None
                } else {
                    Some(tape.row_mean_subset(f.nodes.hidden, &f.attr_rows)?)
                };
                let l2 = tape.l2_norm(f.nodes.pooled);
                pooled_nodes.push((f.nodes.pooled, l2));
                attr_means.push(mean);
            }

            for (ci, &(pooled, pooled_l2)) in pooled_nodes.iter().enumerate() {
                let cos = cosine_node(&mut tape, region, region_l2, pooled, pooled_l2)?;
                bce_logits.push(tape.scale(cos, inv_tau));
                bce_targets.push(if ci == 0 { 1.0 } else { 0.0 });
            }
            batch_pos_pooled.push(pooled_nodes[0].0);
            batch_regions.push((region, region_l2));

            if let Some(pos_mean) = attr_means[0] {
                let pl2 = tape.l2_norm(pos_mean);
                attr_pos.push(cosine_node(&mut tape, region, region_l2, pos_mean, pl2)?);
                let mut added = 0usize;
                for mean in attr_means.iter().skip(1).flatten() {
                    let nl2 = tape.l2_norm(*mean);
                    attr_negs.push(cosine_node(&mut tape, region, region_l2, *mean, nl2)?);
                    added += 1;
                }
                let prev = *attr_offsets.last().expect("seeded with 0");
                attr_offsets.push(prev + added);
            }

            if gate_open {
                let det = record_det_loss(
                    &mut tape,
                    &self.pipeline,
                    record,
                    &pooled_nodes,
                    inv_tau,
                    target.bbox,
                )?;
                det_terms.push(det);
            }
        }

        let logits_node = stack_scalars(&mut tape, &bce_logits)?;
        let sims = batch_similarities(&mut tape, &batch_regions, &batch_pos_pooled)?;
        let cls = cls_loss_on_tape(&mut tape, logits_node, &bce_targets, sims, &self.cfg.loss)?;

        let attr = if attr_pos.is_empty() {
            None
        } else {
            let pos_node = stack_scalars(&mut tape, &attr_pos)?;
            let negs_node = if attr_negs.is_empty() {
                tape.constant(&Tensor::new(vec![0], Vec::new())?)
            } else {
                stack_scalars(&mut tape, &attr_negs)?
            };
            Some(attr_contrastive_nodes(
                &mut tape,
                pos_node,
                negs_node,
                &attr_offsets,
                self.cfg.loss.tau_attr,
            )?)
        };

        let det = if det_terms.is_empty() {
            None
        } else {
            let stacked = stack_scalars(&mut tape, &det_terms)?;
            Some(tape.mean(stacked))
        };

        let total = total_loss_on_tape(&mut tape, cls, attr, det, &self.cfg.loss, step)?;
        let total_v = tape.value(total)[0];
        if !total_v.is_finite() {
            return Err(TrainError::NonFinite { step });
        }
        tape.backward(total)?;

        let mut grads: Vec<Vec<f64>> = Vec::with_capacity(8);
        let mut grad_sq = 0.0;
        for (&p, (_, init)) in dw.param_nodes().iter().zip(self.pipeline.dsaa.to_named()) {
            let g = match tape.grad(p) {
                Some(g) => g.to_vec(),
                None => vec![0.0; init.len()],
            };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFinite { step });
            }
            grad_sq += g.iter().map(|v| v * v).sum::<f64>();
            grads.push(g);
        }

        self.opt
            .apply(params_mut(&mut self.pipeline.dsaa), &grads, &self.cfg);
        self.step += 1;

        Ok(StepRecord {
            step,
            total: total_v,
            cls: tape.value(cls)[0],
            attr: attr.map(|a| tape.value(a)[0]).unwrap_or(0.0),
            det: det.map(|d| tape.value(d)[0]),
            grad_norm: libm::sqrt(grad_sq),
        })
    }

    /// Runs `steps` more steps, stopping at the first error.
    pub fn run(&mut self, steps: usize) -> Result<Vec<StepRecord>, TrainError> {
        let mut log = Vec::with_capacity(steps);
        for _ in 0..steps {
            log.push(self.step()?);
        }
        Ok(log)
    }
}

fn params_mut(w: &mut DsaaWeights) -> [&mut Tensor; 8] {
    [
        &mut w.apa.w1,
        &mut w.apa.w2,
        &mut w.apa.ln_gamma,
        &mut w.apa.ln_beta,
        &mut w.modulator.wk1,
        &mut w.modulator.wk2,
        &mut w.modulator.wv1,
        &mut w.modulator.wv2,
    ]
}

fn cosine_node(
    tape: &mut Tape,
    a: NodeId,
    a_l2: NodeId,
    b: NodeId,
    b_l2: NodeId,
) -> Result<NodeId, NumericsError> {
    let d = tape.dot(a, b)?;
    let n = tape.mul(a_l2, b_l2)?;
    tape.div(d, n)
}

/// Scalars `[1]` into one flat `[n]` vector node.
fn stack_scalars(tape: &mut Tape, nodes: &[NodeId]) -> Result<NodeId, NumericsError> {
    let rows: Vec<NodeId> = nodes
        .iter()
        .map(|&n| tape.reshape(n, vec![1, 1]))
        .collect::<Result<_, _>>()?;
    let mat = tape.concat_rows(&rows)?;
    tape.reshape(mat, vec![nodes.len()])
}

/// Raw cosine matrix `[B, B]`: region of sample i against the positive
/// caption of sample j; the diagonal holds the matched pairs.
fn batch_similarities(
    tape: &mut Tape,
    regions: &[(NodeId, NodeId)],
    pos_pooled: &[NodeId],
) -> Result<NodeId, NumericsError> {
    let pooled_l2: Vec<NodeId> = pos_pooled.iter().map(|&p| tape.l2_norm(p)).collect();
    let mut rows = Vec::with_capacity(regions.len());
    for &(r, rl2) in regions {
        let mut cells = Vec::with_capacity(pos_pooled.len());
        for (&p, &pl2) in pos_pooled.iter().zip(&pooled_l2) {
            let cos = cosine_node(tape, r, rl2, p, pl2)?;
            cells.push(tape.reshape(cos, vec![1, 1])?);
        }
        rows.push(tape.concat_cols(&cells)?);
    }
    tape.concat_rows(&rows)
}

/// Detection loss for one record: proposal boxes are frozen, logits are the
/// temperature-scaled cosines between projected proposal features and every
/// caption embedding, and the target instance is the single ground truth.
fn record_det_loss(
    tape: &mut Tape,
    pipeline: &DsaaPipeline,
    record: &SceneRecord,
    pooled_nodes: &[(NodeId, NodeId)],
    inv_tau: f64,
    gt_box: BoundingBox,
) -> Result<NodeId, TrainError> {
    let num_captions = pooled_nodes.len();
    let mut logit_rows = Vec::with_capacity(record.proposals.len());
    let mut boxes = Vec::with_capacity(record.proposals.len());
    for p in &record.proposals {
        let feat = pipeline.project_region(&p.feature);
        let f = tape.constant(&feat);
        let fl2 = tape.l2_norm(f);
        let mut cells = Vec::with_capacity(num_captions);
        for &(pooled, pl2) in pooled_nodes {
            let cos = cosine_node(tape, f, fl2, pooled, pl2)?;
            let lgt = tape.scale(cos, inv_tau);
            cells.push(tape.reshape(lgt, vec![1, 1])?);
        }
        logit_rows.push(tape.concat_cols(&cells)?);
        boxes.push(p.bbox);
    }
    let logits = tape.concat_rows(&logit_rows)?;
    let (loss, _) = det_loss_on_tape(tape, &boxes, Some(logits), &[gt_box], &[0], num_captions)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::objectives::{attr_contrastive, bce_loss, info_nce_loss, AttrLogitSet};
    use crate::world::{gen_benchmark, GenParams, SyntheticWorld, WorldConfig};

    fn setup(seed: u64, train_records: usize) -> (DsaaPipeline, Vec<SceneRecord>) {
        let world = SyntheticWorld::standard(WorldConfig::default(), seed).unwrap();
        let pipeline = DsaaPipeline::from_world(&world, EncoderConfig::desk(0), seed).unwrap();
        let params = GenParams {
            train_records,
            eval_records_per_subset: 1,
            ..GenParams::default()
        };
        let bench = gen_benchmark(&world, &params, seed).unwrap();
        (pipeline, bench.train)
    }

    fn named_bits(w: &DsaaWeights) -> Vec<Vec<u64>> {
        w.to_named()
            .iter()
            .map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect())
            .collect()
    }

    #[test]
    fn zero_steps_keeps_initialization() {
        let (pipeline, records) = setup(91, 8);
        let before = named_bits(&pipeline.dsaa);
        let trainer = Trainer::new(pipeline, records, TrainConfig::default()).unwrap();
        assert_eq!(named_bits(&trainer.pipeline().dsaa), before);
    }

    #[test]
    fn first_step_loss_matches_value_oracle() {
        let (pipeline, records) = setup(92, 8);
        let cfg = TrainConfig {
            seed: 92,
            batch_size: 4,
            ..TrainConfig::default()
        };

        // Value-level replay of the same batch with the objectives' own
        // value wrappers.
        let cosine = |a: &Tensor, b: &Tensor| {
            let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
            dot / (a.l2() * b.l2())
        };
        let idx = batch_indices(cfg.seed, 0, cfg.batch_size, records.len());
        let mut logits = Vec::new();
        let mut targets = Vec::new();
        let mut sims = Vec::new();
        let mut pos_list = Vec::new();
        let mut neg_list = Vec::new();
        let mut regions = Vec::new();
        let mut positives = Vec::new();
        for &ri in &idx {
            let record = &records[ri];
            let region = pipeline.project_region(&record.instances[record.target].feature);
            let mut caps = alloc::vec![record.caption.positive.clone()];
            caps.extend(record.caption.negatives.iter().cloned());
            let attr_mean = |caption: &str| {
                let f = pipeline.encode_caption(caption, false).unwrap();
                let pooled = f.result.pooled.clone();
                let mean = if f.attr_rows.is_empty() {
                    None
                } else {
                    let d = f.result.hidden.cols();
                    let mut acc = alloc::vec![0.0; d];
                    for &r in &f.attr_rows {
                        for (a, v) in acc.iter_mut().zip(f.result.hidden.row(r)) {
                            *a += v;
                        }
                    }
                    for a in acc.iter_mut() {
                        *a /= f.attr_rows.len() as f64;
                    }
                    Some(Tensor::new(alloc::vec![d], acc).unwrap())
                };
                (pooled, mean)
            };
            let encoded: Vec<(Tensor, Option<Tensor>)> =
                caps.iter().map(|c| attr_mean(c)).collect();
            for (ci, (pooled, _)) in encoded.iter().enumerate() {
                logits.push(cosine(&region, pooled) / cfg.loss.tau_cls);
                targets.push(if ci == 0 { 1.0 } else { 0.0 });
            }
            if let Some(pm) = &encoded[0].1 {
                pos_list.push(cosine(&region, pm));
                let negs: Vec<f64> = encoded[1..]
                    .iter()
                    .filter_map(|(_, m)| m.as_ref())
                    .map(|m| cosine(&region, m))
                    .collect();
                neg_list.push(negs);
            }
            positives.push(encoded[0].0.clone());
            regions.push(region);
        }
        for r in &regions {
            for p in &positives {
                sims.push(cosine(r, p));
            }
        }
        let b = idx.len();
        let logits_t = Tensor::new(alloc::vec![logits.len()], logits).unwrap();
        let targets_t = Tensor::new(alloc::vec![targets.len()], targets).unwrap();
        let sims_t = Tensor::new(alloc::vec![b, b], sims).unwrap();
        let expected_cls = bce_loss(&logits_t, &targets_t).unwrap()
            + cfg.loss.alpha_nce * info_nce_loss(&sims_t, cfg.loss.tau_cls).unwrap();
        let expected_attr = attr_contrastive(
            &AttrLogitSet {
                positives: pos_list,
                negatives: neg_list,
            },
            cfg.loss.tau_attr,
        )
        .unwrap();
        let expected_total = expected_cls + cfg.loss.lambda_attr * expected_attr;

        let mut trainer = Trainer::new(pipeline, records, cfg).unwrap();
        let rec = trainer.step().unwrap();
        assert!(rec.det.is_none());
        assert!((rec.cls - expected_cls).abs() < 1e-9, "{}", rec.cls);
        assert!((rec.attr - expected_attr).abs() < 1e-9);
        assert!((rec.total - expected_total).abs() < 1e-9);
    }

    #[test]
    fn training_is_deterministic() {
        let (pipeline, records) = setup(93, 8);
        let cfg = TrainConfig {
            seed: 93,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mut t1 = Trainer::new(pipeline.clone(), records.clone(), cfg.clone()).unwrap();
        let mut t2 = Trainer::new(pipeline, records, cfg).unwrap();
        let l1 = t1.run(3).unwrap();
        let l2 = t2.run(3).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(
            named_bits(&t1.pipeline().dsaa),
            named_bits(&t2.pipeline().dsaa)
        );
    }

    #[test]
    fn encoder_stays_frozen_and_adapters_move() {
        let (pipeline, records) = setup(94, 8);
        let encoder_before: Vec<Vec<u64>> = pipeline
            .encoder
            .to_named()
            .iter()
            .map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let dsaa_before = named_bits(&pipeline.dsaa);
        let cfg = TrainConfig {
            seed: 94,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(pipeline, records, cfg).unwrap();
        trainer.run(2).unwrap();
        let p = trainer.pipeline();
        let encoder_after: Vec<Vec<u64>> = p
            .encoder
            .to_named()
            .iter()
            .map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(encoder_before, encoder_after);
        assert_ne!(named_bits(&p.dsaa), dsaa_before);
    }

    #[test]
    fn detection_gate_opens_at_warmup() {
        let (pipeline, records) = setup(95, 8);
        let mut cfg = TrainConfig {
            seed: 95,
            batch_size: 2,
            ..TrainConfig::default()
        };
        cfg.loss.det_warmup_steps = 2;
        let mut trainer = Trainer::new(pipeline, records, cfg).unwrap();
        let log = trainer.run(3).unwrap();
        assert!(log[0].det.is_none());
        assert!(log[1].det.is_none());
        assert!(log[2].det.is_some());
    }

    #[test]
    fn non_finite_input_aborts_before_update() {
        let (pipeline, mut records) = setup(96, 4);
        let before = named_bits(&pipeline.dsaa);
        for record in records.iter_mut() {
            let t = record.target;
            record.instances[t].feature.data_mut()[0] = f64::NAN;
        }
        let cfg = TrainConfig {
            seed: 96,
            batch_size: records.len(),
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(pipeline, records, cfg).unwrap();
        let err = trainer.step().unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { step: 0 }));
        assert_eq!(named_bits(&trainer.pipeline().dsaa), before);
        assert_eq!(trainer.current_step(), 0);
    }

    #[test]
    fn loss_trends_down_on_small_task() {
        let (pipeline, records) = setup(97, 24);
        let cfg = TrainConfig {
            seed: 97,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(pipeline, records, cfg).unwrap();
        let log = trainer.run(120).unwrap();
        let head: f64 = log[..20].iter().map(|r| r.total).sum::<f64>() / 20.0;
        let tail: f64 = log[100..].iter().map(|r| r.total).sum::<f64>() / 20.0;
        assert!(
            tail < head,
            "loss failed to trend down: head {head:.4} tail {tail:.4}"
        );
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        for cfg in [
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                lr: -1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                beta2: 1.0,
                ..TrainConfig::default()
            },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
