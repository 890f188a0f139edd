//! SGD training with momentum, L2 weight decay and a step learning-rate
//! schedule, an optional classification pre-training phase, and model
//! selection by validation NMI.
//!
//! Per-item losses and gradients inside a mini-batch may be computed on
//! several threads; they are always summed in batch order, so results do
//! not depend on the thread count.

use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{clustering_nmi, embed_all, recall_at_k};
use crate::losses::{
    contrastive_loss, hard_class_mine, ml2_loss, ml2plus_loss, pretrain_loss, triplet_loss, GroupEmbedding,
    LossConfig,
};
use crate::model::{EmbedCache, EmbeddingModel, EncoderConfig};
use crate::numeric::{DenseMatrix, ParamStore};
use crate::sampler::{build_minibatch, AnchorGroup, MiniBatch, Regime};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub regime: Regime,
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiplier applied to the learning rate every `decay_period` steps.
    pub lr_decay: f64,
    pub decay_period: usize,
    pub margin: f64,
    pub eval_every: usize,
    pub seed: u64,
    pub pretrain: bool,
    pub pretrain_iterations: usize,
    pub pretrain_batch_size: usize,
    /// Keep only this many labels per group (hard class mining).
    pub hard_class_k: Option<usize>,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk_default(Regime::Ml2plus)
    }
}

impl TrainConfig {
    /// Reduced-length schedule: 3,000 iterations with a tenfold decay every
    /// 1,000, validation every 100. Batches hold 10 groups for the group
    /// losses and 36 anchors for the baselines.
    pub fn desk_default(regime: Regime) -> Self {
        Self {
            regime,
            batch_size: if regime.uses_groups() { 10 } else { 36 },
            iterations: 3000,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay: 0.1,
            decay_period: 1000,
            margin: 0.2,
            eval_every: 100,
            seed: 0,
            pretrain: false,
            pretrain_iterations: 1000,
            pretrain_batch_size: 32,
            hard_class_k: None,
            threads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if self.decay_period == 0 || self.eval_every == 0 || self.batch_size == 0 {
            return fail("decay_period, eval_every and batch_size must be at least 1".into());
        }
        if self.pretrain && self.pretrain_batch_size == 0 {
            return fail("pretrain_batch_size must be at least 1".into());
        }
        if self.threads == 0 {
            return fail("threads must be at least 1".into());
        }
        LossConfig::with_margin(self.margin).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// `lr₀ · decay^⌊iteration / period⌋`.
pub fn lr_schedule(iteration: usize, cfg: &TrainConfig) -> f64 {
    cfg.learning_rate * cfg.lr_decay.powi((iteration / cfg.decay_period) as i32)
}

/// One momentum step: `v ← μv + (g + λθ)`, `θ ← θ − lr·v`.
pub fn sgd_step(params: &mut ParamStore, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    for s in params.slots() {
        if !s.grad.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", s.name)));
        }
    }
    for s in params.slots_mut() {
        let value = s.value.data_mut();
        let grad = s.grad.data();
        let vel = s.momentum.data_mut();
        for k in 0..value.len() {
            vel[k] = momentum * vel[k] + grad[k] + weight_decay * value[k];
            value[k] -= lr * vel[k];
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: usize,
    /// Mean training loss since the previous evaluation point.
    pub train_loss: f64,
    pub val_nmi: f64,
    pub val_recall_at_1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub name: String,
    pub iterations: usize,
    /// Mean loss over the last `min(100, iterations)` steps.
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub regime: Option<Regime>,
    pub phases: Vec<PhaseSummary>,
    pub history: Vec<EvalRecord>,
    /// Iteration of the kept checkpoint, `None` when nothing was evaluated.
    pub best_iteration: Option<usize>,
    pub best_val_nmi: Option<f64>,
    /// Excluded from the serialized report so repeated runs compare equal.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainReport {
    /// Index of the maximal validation NMI, earliest on ties.
    pub fn argmax_nmi(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, r) in self.history.iter().enumerate() {
            if best.is_none_or(|b| r.val_nmi > self.history[b].val_nmi) {
                best = Some(i);
            }
        }
        best
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EmbeddingModel,
    pub report: TrainReport,
}

struct StepOutput {
    loss: f64,
    grads: Vec<DenseMatrix>,
}

fn forward_members(
    model: &EmbeddingModel,
    ds: &Dataset,
    indices: impl Iterator<Item = usize>,
) -> Result<Vec<(usize, Vec<f64>, EmbedCache)>> {
    indices
        .map(|i| {
            let (e, c) = model.forward_embed(&ds.example(i).features)?;
            Ok((i, e, c))
        })
        .collect()
}

fn lookup(members: &[(usize, Vec<f64>, EmbedCache)], index: usize) -> &(usize, Vec<f64>, EmbedCache) {
    members.iter().find(|m| m.0 == index).expect("member was forwarded")
}

fn group_step(
    model: &EmbeddingModel,
    ds: &Dataset,
    group: &AnchorGroup,
    regime: Regime,
    loss_cfg: &LossConfig,
    hard_class_k: Option<usize>,
) -> Result<StepOutput> {
    let members = forward_members(model, ds, group.indices())?;
    let full = GroupEmbedding::gather(group, |i| &lookup(&members, i).1);
    let mined;
    let (group, emb) = match hard_class_k {
        Some(k) if k < group.len() => {
            mined = hard_class_mine(group, &full, loss_cfg, k)?;
            if mined.positives.is_empty() || mined.negatives.is_empty() {
                (group, full)
            } else {
                let emb = GroupEmbedding::gather(&mined, |i| &lookup(&members, i).1);
                (&mined, emb)
            }
        }
        _ => (group, full),
    };
    let out = match regime {
        Regime::Ml2plus => ml2plus_loss(&emb, loss_cfg)?,
        _ => ml2_loss(&emb, loss_cfg)?,
    };
    let mut grads = model.params().grad_buffers();
    for (index, g) in group.indices().zip(&out.grads) {
        model.backward_embed_into(&lookup(&members, index).2, g, &mut grads)?;
    }
    Ok(StepOutput { loss: out.value, grads })
}

fn batch_step(model: &EmbeddingModel, ds: &Dataset, batch: &MiniBatch, cfg: &TrainConfig) -> Result<StepOutput> {
    let loss_cfg = LossConfig::with_margin(cfg.margin)?;
    let items: Vec<Result<StepOutput>> = match batch {
        MiniBatch::Groups(groups) => groups
            .par_iter()
            .map(|g| group_step(model, ds, g, cfg.regime, &loss_cfg, cfg.hard_class_k))
            .collect(),
        MiniBatch::Triplets(ts) => ts
            .par_iter()
            .map(|t| {
                let m = forward_members(model, ds, [t.anchor, t.positive, t.negative].into_iter())?;
                let out = triplet_loss(&m[0].1, &m[1].1, &m[2].1, &loss_cfg);
                let mut grads = model.params().grad_buffers();
                for (member, g) in m.iter().zip(&out.grads) {
                    model.backward_embed_into(&member.2, g, &mut grads)?;
                }
                Ok(StepOutput { loss: out.value, grads })
            })
            .collect(),
        MiniBatch::Pairs(ps) => ps
            .par_iter()
            .map(|p| {
                let m = forward_members(model, ds, [p.anchor, p.other].into_iter())?;
                let out = contrastive_loss(&m[0].1, &m[1].1, p.same, &loss_cfg);
                let mut grads = model.params().grad_buffers();
                for (member, g) in m.iter().zip(&out.grads) {
                    model.backward_embed_into(&member.2, g, &mut grads)?;
                }
                Ok(StepOutput { loss: out.value, grads })
            })
            .collect(),
    };
    reduce(model, items)
}

fn reduce(model: &EmbeddingModel, items: Vec<Result<StepOutput>>) -> Result<StepOutput> {
    let count = items.len() as f64;
    let mut total = StepOutput {
        loss: 0.0,
        grads: model.params().grad_buffers(),
    };
    for item in items {
        let item = item?;
        total.loss += item.loss;
        for (acc, g) in total.grads.iter_mut().zip(&item.grads) {
            acc.add_assign(g)?;
        }
    }
    total.loss /= count;
    for g in &mut total.grads {
        g.scale(1.0 / count);
    }
    Ok(total)
}

fn pretrain_step(
    model: &EmbeddingModel,
    ds: &Dataset,
    batch: &[usize],
) -> Result<StepOutput> {
    let items = batch
        .par_iter()
        .map(|&i| {
            let e = ds.example(i);
            let (lp, cache) = model.forward_classify(&e.features)?;
            let out = pretrain_loss(&lp, &e.labels, ds.label_count())?;
            let mut grads = model.params().grad_buffers();
            model.backward_classify_into(&cache, &out.grads, &mut grads)?;
            Ok(StepOutput { loss: out.value, grads })
        })
        .collect();
    reduce(model, items)
}

fn apply(model: &mut EmbeddingModel, step: &StepOutput, lr: f64, cfg: &TrainConfig) -> Result<()> {
    let params = model.params_mut();
    params.zero_grads();
    params.accumulate(&step.grads)?;
    sgd_step(params, lr, cfg.momentum, cfg.weight_decay)
}

/// Validation NMI and Recall@1 of the current parameters.
pub fn validate_model(model: &EmbeddingModel, val: &Dataset, seed: u64) -> Result<(f64, f64)> {
    let emb = embed_all(model, val)?;
    let nmi = clustering_nmi(&emb, val, seed)?;
    let r1 = recall_at_k(&emb, &val.label_sets(), 1)?;
    Ok((nmi, r1))
}

const PROJECTION_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Trains an encoder on `train`, selecting the checkpoint with the highest
/// validation NMI. Sampling is seeded by `cfg.seed`, initialization by
/// `encoder.seed`.
pub fn train(train_ds: &Dataset, val: &Dataset, encoder: &EncoderConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    train_ds.check_label_coverage()?;
    if train_ds.feature_dim() != encoder.input_dim {
        return Err(Error::Dimension(format!(
            "training data has {} features, encoder expects {}",
            train_ds.feature_dim(),
            encoder.input_dim
        )));
    }
    let mut encoder = encoder.clone();
    if cfg.pretrain {
        match encoder.label_heads {
            0 => encoder.label_heads = train_ds.label_count(),
            h if h == train_ds.label_count() => {}
            h => {
                return Err(Error::Config(format!(
                    "{h} classification heads for {} labels",
                    train_ds.label_count()
                )))
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| run(train_ds, val, encoder, cfg))
}

fn run(train_ds: &Dataset, val: &Dataset, encoder: EncoderConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let started = Instant::now();
    let mut model = EmbeddingModel::new(encoder)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport {
        regime: Some(cfg.regime),
        ..TrainReport::default()
    };
    let abort = |iteration: usize, reason: String, report: &TrainReport, started: Instant| {
        let mut report = report.clone();
        report.wall_clock_secs = started.elapsed().as_secs_f64();
        Error::TrainingAborted {
            iteration,
            reason,
            report: Box::new(report),
        }
    };

    if cfg.pretrain && cfg.pretrain_iterations > 0 {
        let b = cfg.pretrain_batch_size.min(train_ds.len());
        let mut recent = Vec::new();
        for it in 0..cfg.pretrain_iterations {
            let batch = sample_indices(&mut rng, train_ds.len(), b).into_vec();
            let step = pretrain_step(&model, train_ds, &batch)
                .and_then(|s| {
                    if s.loss.is_finite() {
                        Ok(s)
                    } else {
                        Err(Error::NonFinite(format!("pre-training loss {}", s.loss)))
                    }
                })
                .and_then(|s| apply(&mut model, &s, lr_schedule(it, cfg), cfg).map(|()| s))
                .map_err(|e| abort(it, e.to_string(), &report, started))?;
            recent.push(step.loss);
            if recent.len() > 100 {
                recent.remove(0);
            }
        }
        report.phases.push(PhaseSummary {
            name: "pretrain".into(),
            iterations: cfg.pretrain_iterations,
            final_loss: mean(&recent),
        });
        model.params_mut().zero_momentum();
        model.reinit_projection(cfg.seed ^ PROJECTION_SEED_SALT);
    }

    let mut best = (None::<usize>, f64::NEG_INFINITY, model.params().clone());
    let mut window = Vec::new();
    let mut recent = Vec::new();
    for it in 0..cfg.iterations {
        let step = build_minibatch(train_ds, cfg.batch_size, cfg.regime, &mut rng)
            .and_then(|batch| batch_step(&model, train_ds, &batch, cfg))
            .and_then(|s| {
                if s.loss.is_finite() {
                    Ok(s)
                } else {
                    Err(Error::NonFinite(format!("training loss {}", s.loss)))
                }
            })
            .and_then(|s| apply(&mut model, &s, lr_schedule(it, cfg), cfg).map(|()| s))
            .map_err(|e| abort(it, e.to_string(), &report, started))?;
        window.push(step.loss);
        recent.push(step.loss);
        if recent.len() > 100 {
            recent.remove(0);
        }

        let done = it + 1;
        if done % cfg.eval_every == 0 || done == cfg.iterations {
            let (val_nmi, val_recall_at_1) =
                validate_model(&model, val, cfg.seed).map_err(|e| abort(it, e.to_string(), &report, started))?;
            report.history.push(EvalRecord {
                iteration: done,
                train_loss: mean(&window).unwrap_or(0.0),
                val_nmi,
                val_recall_at_1,
            });
            window.clear();
            if val_nmi > best.1 {
                best = (Some(done), val_nmi, model.params().clone());
            }
        }
    }
    if cfg.iterations > 0 {
        report.phases.push(PhaseSummary {
            name: cfg.regime.name().into(),
            iterations: cfg.iterations,
            final_loss: mean(&recent),
        });
    }

    if let Some(iteration) = best.0 {
        model.load_values_from(&best.2)?;
        report.best_iteration = Some(iteration);
        report.best_val_nmi = Some(best.1);
    }
    model.params_mut().zero_grads();
    model.params_mut().zero_momentum();
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(TrainOutcome { model, report })
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticSpec};

    fn quadratic_store(theta: f64) -> ParamStore {
        ParamStore::single("theta", DenseMatrix::from_vec(1, 1, vec![theta]).unwrap())
    }

    #[test]
    fn plain_gradient_descent_when_no_momentum() {
        let mut p = quadratic_store(2.0);
        p.slot_mut(0).grad.data_mut()[0] = 0.5;
        sgd_step(&mut p, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p.slot(0).value.get(0, 0), 2.0 - 0.1 * 0.5);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = quadratic_store(2.0);
        sgd_step(&mut p, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p.slot(0).value.get(0, 0), 2.0);
    }

    #[test]
    fn momentum_matches_recurrence_on_quadratic_bowl() {
        // f(θ) = θ²/2, so g = θ
        let (lr, mu) = (0.1, 0.9);
        let mut p = quadratic_store(1.0);
        let (mut theta, mut v) = (1.0f64, 0.0f64);
        for _ in 0..10 {
            p.zero_grads();
            let t = p.slot(0).value.get(0, 0);
            p.slot_mut(0).grad.data_mut()[0] = t;
            sgd_step(&mut p, lr, mu, 0.0).unwrap();

            v = mu * v + theta;
            theta -= lr * v;
            assert!((p.slot(0).value.get(0, 0) - theta).abs() < 1e-15);
        }
    }

    #[test]
    fn weight_decay_shrinks_parameters() {
        let mut p = ParamStore::single("w", DenseMatrix::from_vec(1, 3, vec![1.0, -2.0, 0.5]).unwrap());
        let mut last = p.value_norm_sq();
        for _ in 0..20 {
            p.zero_grads();
            sgd_step(&mut p, 0.1, 0.9, 1e-2).unwrap();
            let now = p.value_norm_sq();
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = quadratic_store(1.0);
        p.slot_mut(0).grad.data_mut()[0] = f64::NAN;
        assert!(matches!(sgd_step(&mut p, 0.1, 0.9, 0.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn schedule_steps() {
        let cfg = TrainConfig {
            decay_period: 25_000,
            ..TrainConfig::desk_default(Regime::Ml2)
        };
        assert_eq!(lr_schedule(0, &cfg), 0.01);
        assert!((lr_schedule(24_999, &cfg) - 0.01).abs() < 1e-18);
        assert!((lr_schedule(25_000, &cfg) - 0.001).abs() < 1e-15);
        assert!((lr_schedule(50_000, &cfg) - 0.0001).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for it in (0..100_000).step_by(997) {
            let lr = lr_schedule(it, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        for bad in [
            TrainConfig { momentum: 1.0, ..ok.clone() },
            TrainConfig { learning_rate: 0.0, ..ok.clone() },
            TrainConfig { weight_decay: -1.0, ..ok.clone() },
            TrainConfig { margin: 0.0, ..ok.clone() },
            TrainConfig { threads: 0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    fn small_data() -> crate::dataset::Splits {
        let mut spec = SyntheticSpec::desk_default(21);
        spec.train_size = 300;
        spec.val_size = 60;
        spec.test_size = 60;
        generate_synthetic(&spec).unwrap()
    }

    fn small_encoder() -> EncoderConfig {
        EncoderConfig {
            input_dim: 32,
            hidden: vec![16],
            embedding_dim: 8,
            label_heads: 0,
            seed: 3,
        }
    }

    #[test]
    fn zero_iterations_returns_initial_model() {
        let d = small_data();
        let cfg = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        let out = train(&d.train, &d.val, &small_encoder(), &cfg).unwrap();
        assert_eq!(out.model, EmbeddingModel::new(small_encoder()).unwrap());
        assert!(out.report.history.is_empty());
        assert!(out.report.phases.is_empty());
        assert_eq!(out.report.best_iteration, None);
    }

    #[test]
    fn runs_are_deterministic_and_thread_independent() {
        let d = small_data();
        for regime in [Regime::Ml2, Regime::Ml2plus, Regime::Triplet, Regime::Contrastive] {
            let cfg = TrainConfig {
                iterations: 30,
                eval_every: 10,
                batch_size: 4,
                ..TrainConfig::desk_default(regime)
            };
            let a = train(&d.train, &d.val, &small_encoder(), &cfg).unwrap();
            let b = train(&d.train, &d.val, &small_encoder(), &TrainConfig { threads: 3, ..cfg.clone() }).unwrap();
            assert_eq!(a.model, b.model, "{regime}");
            assert_eq!(
                serde_json::to_string(&a.report).unwrap(),
                serde_json::to_string(&b.report).unwrap()
            );
            assert_eq!(a.report.history.len(), 3);
            let best = a.report.argmax_nmi().unwrap();
            assert_eq!(a.report.best_iteration, Some(a.report.history[best].iteration));
        }
    }

    #[test]
    fn pretraining_phase_precedes_metric_phase() {
        let d = small_data();
        let cfg = TrainConfig {
            iterations: 10,
            eval_every: 5,
            pretrain: true,
            pretrain_iterations: 20,
            ..TrainConfig::desk_default(Regime::Ml2plus)
        };
        let out = train(&d.train, &d.val, &small_encoder(), &cfg).unwrap();
        let names: Vec<&str> = out.report.phases.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["pretrain", "ml2plus"]);
        assert!(out.model.has_heads());
    }

    #[test]
    fn hard_class_mining_trains() {
        let d = small_data();
        let cfg = TrainConfig {
            iterations: 10,
            eval_every: 10,
            hard_class_k: Some(3),
            ..TrainConfig::desk_default(Regime::Ml2)
        };
        let out = train(&d.train, &d.val, &small_encoder(), &cfg).unwrap();
        assert!(out.report.phases[0].final_loss.unwrap().is_finite());
    }

    #[test]
    fn best_selection_prefers_earliest_tie() {
        let rec = |iteration, val_nmi| EvalRecord {
            iteration,
            train_loss: 0.0,
            val_nmi,
            val_recall_at_1: 0.0,
        };
        let r = TrainReport {
            history: vec![rec(1, 0.2), rec(2, 0.5), rec(3, 0.5), rec(4, 0.1)],
            ..TrainReport::default()
        };
        assert_eq!(r.argmax_nmi(), Some(1));
    }

    #[test]
    fn feature_mismatch_is_rejected() {
        let d = small_data();
        let mut enc = small_encoder();
        enc.input_dim = 7;
        assert!(matches!(
            train(&d.train, &d.val, &enc, &TrainConfig::default()),
            Err(Error::Dimension(_))
        ));
    }
}
