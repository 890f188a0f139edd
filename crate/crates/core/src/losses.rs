//! Metric-learning losses over unit-norm embeddings, with analytic
//! gradients with respect to every input embedding.
//!
//! Distances are plain Euclidean. The derivative `∂d/∂u = (u − v)/d` is
//! singular at `d = 0`, so the gradient uses `(u − v)/(d + ε_dist)`.

use serde::{Deserialize, Serialize};

use crate::dataset::LabelSet;
use crate::error::{Error, Result};
use crate::sampler::{AnchorGroup, Member};

/// Margin used throughout unless configured otherwise.
pub const DEFAULT_MARGIN: f64 = 0.2;

/// Guard added to the distance in gradient denominators.
pub const EPS_DIST: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    pub eps_dist: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
            eps_dist: EPS_DIST,
        }
    }
}

impl LossConfig {
    pub fn with_margin(margin: f64) -> Result<Self> {
        let cfg = Self {
            margin,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(Error::Contract(format!("margin must be positive, got {}", self.margin)));
        }
        Ok(())
    }
}

/// Loss value plus one gradient vector per input embedding.
///
/// Gradient order follows the inputs: `[x1, x2]` for pairs,
/// `[anchor, positive, negative]` for triplets, and
/// `[anchor, positives.., negatives..]` for groups.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grads: Vec<Vec<f64>>,
}

impl LossOutput {
    fn zeros(value: f64, count: usize, dim: usize) -> Self {
        Self {
            value,
            grads: vec![vec![0.0; dim]; count],
        }
    }
}

/// Embeddings of one anchor group, positives and negatives in group order.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupEmbedding {
    pub anchor: Vec<f64>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
    /// Label-overlap term for each positive.
    pub taus: Vec<f64>,
}

impl GroupEmbedding {
    /// Looks every member of `group` up through `embed`.
    pub fn gather<'a, F>(group: &AnchorGroup, mut embed: F) -> Self
    where
        F: FnMut(usize) -> &'a [f64],
    {
        Self {
            anchor: embed(group.anchor).to_vec(),
            positives: group.positives.iter().map(|m| embed(m.index).to_vec()).collect(),
            negatives: group.negatives.iter().map(|m| embed(m.index).to_vec()).collect(),
            taus: group.taus.clone(),
        }
    }

    fn dim(&self) -> usize {
        self.anchor.len()
    }

    fn check(&self) -> Result<()> {
        if self.positives.is_empty() {
            return Err(Error::DegenerateGroup("no positives".into()));
        }
        if self.negatives.is_empty() {
            return Err(Error::DegenerateGroup("no negatives".into()));
        }
        if self.taus.len() != self.positives.len() {
            return Err(Error::Contract(format!(
                "{} tau values for {} positives",
                self.taus.len(),
                self.positives.len()
            )));
        }
        Ok(())
    }
}

/// Euclidean distance `‖u − v‖₂`.
pub fn dist(u: &[f64], v: &[f64]) -> f64 {
    u.iter()
        .zip(v)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Adds `coef · ∂d(u,v)/∂u` to `gu` and `coef · ∂d(u,v)/∂v` to `gv`.
fn push_dist_grad(u: &[f64], v: &[f64], d: f64, coef: f64, eps: f64, gu: &mut [f64], gv: &mut [f64]) {
    let s = coef / (d + eps);
    for k in 0..u.len() {
        let g = s * (u[k] - v[k]);
        gu[k] += g;
        gv[k] -= g;
    }
}

/// Splits a gradient list into the anchor slot and the rest.
fn split_anchor(grads: &mut [Vec<f64>]) -> (&mut Vec<f64>, &mut [Vec<f64>]) {
    let (a, rest) = grads.split_first_mut().expect("anchor slot");
    (a, rest)
}

/// Hinged triplet loss `max(0, d(a,x⁺) − d(a,x⁻) + α)`.
pub fn triplet_loss(a: &[f64], pos: &[f64], neg: &[f64], cfg: &LossConfig) -> LossOutput {
    let dp = dist(a, pos);
    let dn = dist(a, neg);
    let h = dp - dn + cfg.margin;
    let mut out = LossOutput::zeros(h.max(0.0), 3, a.len());
    if h > 0.0 {
        let (ga, rest) = split_anchor(&mut out.grads);
        let (gp, gn) = rest.split_at_mut(1);
        push_dist_grad(a, pos, dp, 1.0, cfg.eps_dist, ga, &mut gp[0]);
        push_dist_grad(a, neg, dn, -1.0, cfg.eps_dist, ga, &mut gn[0]);
    }
    out
}

/// Mean of the hinged triplet losses over all `p · n` (positive, negative)
/// combinations.
pub fn group_loss(g: &GroupEmbedding, cfg: &LossConfig) -> Result<LossOutput> {
    g.check()?;
    let (p, n) = (g.positives.len(), g.negatives.len());
    let scale = 1.0 / (p * n) as f64;
    let dpos: Vec<f64> = g.positives.iter().map(|x| dist(&g.anchor, x)).collect();
    let dneg: Vec<f64> = g.negatives.iter().map(|x| dist(&g.anchor, x)).collect();

    let mut out = LossOutput::zeros(0.0, 1 + p + n, g.dim());
    let mut pos_coef = vec![0.0; p];
    let mut neg_coef = vec![0.0; n];
    let mut total = 0.0;
    for i in 0..p {
        for j in 0..n {
            let h = dpos[i] - dneg[j] + cfg.margin;
            if h > 0.0 {
                total += h;
                pos_coef[i] += scale;
                neg_coef[j] -= scale;
            }
        }
    }
    out.value = total * scale;
    let (ga, rest) = split_anchor(&mut out.grads);
    let (gp, gn) = rest.split_at_mut(p);
    for i in 0..p {
        if pos_coef[i] != 0.0 {
            push_dist_grad(&g.anchor, &g.positives[i], dpos[i], pos_coef[i], cfg.eps_dist, ga, &mut gp[i]);
        }
    }
    for j in 0..n {
        if neg_coef[j] != 0.0 {
            push_dist_grad(&g.anchor, &g.negatives[j], dneg[j], neg_coef[j], cfg.eps_dist, ga, &mut gn[j]);
        }
    }
    Ok(out)
}

/// Hardest-negative term `max_j [α − d(a, x⁻ⱼ)]`.
pub fn max_negative(anchor: &[f64], negatives: &[Vec<f64>], cfg: &LossConfig) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::DegenerateGroup("no negatives".into()));
    }
    Ok(negatives
        .iter()
        .map(|x| cfg.margin - dist(anchor, x))
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Smooth upper bound `log Σⱼ exp(α − d(a, x⁻ⱼ))` of [`max_negative`].
///
/// Gradients are `[anchor, negatives..]`.
pub fn smooth_max_negative(anchor: &[f64], negatives: &[Vec<f64>], cfg: &LossConfig) -> Result<LossOutput> {
    if negatives.is_empty() {
        return Err(Error::DegenerateGroup("no negatives".into()));
    }
    let dneg: Vec<f64> = negatives.iter().map(|x| dist(anchor, x)).collect();
    let terms: Vec<f64> = dneg.iter().map(|d| cfg.margin - d).collect();
    let (value, weights) = log_sum_exp(&terms);
    let mut out = LossOutput::zeros(value, 1 + negatives.len(), anchor.len());
    let (ga, gn) = split_anchor(&mut out.grads);
    for j in 0..negatives.len() {
        push_dist_grad(anchor, &negatives[j], dneg[j], -weights[j], cfg.eps_dist, ga, &mut gn[j]);
    }
    Ok(out)
}

/// Max-shifted log-sum-exp together with its softmax weights.
pub fn log_sum_exp(xs: &[f64]) -> (f64, Vec<f64>) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    (m + s.ln(), exps.into_iter().map(|e| e / s).collect())
}

/// Label-overlap term `(|A ∪ B| − |A ∩ B|) / |A ∪ B|`.
///
/// Zero for identical sets, one for disjoint sets.
pub fn overlap_tau(a: &LabelSet, b: &LabelSet) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("overlap of an empty label set".into()));
    }
    let union = a.union_len(b);
    let inter = a.intersection_len(b);
    Ok((union - inter) as f64 / union as f64)
}

/// `(1/p) Σᵢ max(0, d(a,x⁺ᵢ) − α·τᵢ + L̂⁻(a, 𝓝))`, using the per-positive
/// overlap terms stored in the group.
pub fn ml2_loss(g: &GroupEmbedding, cfg: &LossConfig) -> Result<LossOutput> {
    g.check()?;
    let (p, n) = (g.positives.len(), g.negatives.len());
    let smooth = smooth_max_negative(&g.anchor, &g.negatives, cfg)?;
    let dpos: Vec<f64> = g.positives.iter().map(|x| dist(&g.anchor, x)).collect();

    let mut out = LossOutput::zeros(0.0, 1 + p + n, g.dim());
    let mut active = 0usize;
    let mut total = 0.0;
    {
        let (ga, rest) = split_anchor(&mut out.grads);
        let (gp, _) = rest.split_at_mut(p);
        for i in 0..p {
            let h = dpos[i] - cfg.margin * g.taus[i] + smooth.value;
            if h > 0.0 {
                total += h;
                active += 1;
                push_dist_grad(&g.anchor, &g.positives[i], dpos[i], 1.0 / p as f64, cfg.eps_dist, ga, &mut gp[i]);
            }
        }
    }
    out.value = total / p as f64;
    if active > 0 {
        // every active hinge carries one copy of the smooth negative term
        let c = active as f64 / p as f64;
        for (k, gk) in smooth.grads[0].iter().enumerate() {
            out.grads[0][k] += c * gk;
        }
        for j in 0..n {
            for (k, gk) in smooth.grads[1 + j].iter().enumerate() {
                out.grads[1 + p + j][k] += c * gk;
            }
        }
    }
    Ok(out)
}

/// [`ml2_loss`] with every overlap term fixed to `(p − 1)/p`, for groups
/// whose positives each carry exactly one of the anchor's labels.
pub fn ml2plus_loss(g: &GroupEmbedding, cfg: &LossConfig) -> Result<LossOutput> {
    g.check()?;
    let p = g.positives.len();
    let tau = ml2plus_tau(p);
    if g.taus.iter().any(|&t| t != tau) {
        return Err(Error::Contract(format!(
            "group is not single-label-positive: expected tau {tau} for p = {p}"
        )));
    }
    ml2_loss(g, cfg)
}

/// Overlap term shared by all positives of a single-label-positive group.
pub fn ml2plus_tau(p: usize) -> f64 {
    (p - 1) as f64 / p as f64
}

/// Squared-hinge contrastive loss: `d²` for similar pairs and
/// `max(0, α − d)²` for dissimilar ones.
pub fn contrastive_loss(x1: &[f64], x2: &[f64], same: bool, cfg: &LossConfig) -> LossOutput {
    let d = dist(x1, x2);
    let mut out = LossOutput::zeros(0.0, 2, x1.len());
    let (g1, g2) = out.grads.split_at_mut(1);
    if same {
        out.value = d * d;
        for k in 0..x1.len() {
            let g = 2.0 * (x1[k] - x2[k]);
            g1[0][k] += g;
            g2[0][k] -= g;
        }
    } else {
        let h = cfg.margin - d;
        if h > 0.0 {
            out.value = h * h;
            push_dist_grad(x1, x2, d, -2.0 * h, cfg.eps_dist, &mut g1[0], &mut g2[0]);
        }
    }
    out
}

/// Keeps the `k` labels of `group` whose representatives contribute most:
/// `d(a,x⁺ᵢ) − α·τᵢ` for positives and `α − d(a,x⁻ⱼ)` for negatives.
/// Ties keep the lower label index.
pub fn hard_class_mine(
    group: &AnchorGroup,
    emb: &GroupEmbedding,
    cfg: &LossConfig,
    k: usize,
) -> Result<AnchorGroup> {
    let total = group.positives.len() + group.negatives.len();
    if k < 1 {
        return Err(Error::Contract("hard class mining needs k >= 1".into()));
    }
    if k > total {
        return Err(Error::Contract(format!("k = {k} exceeds {total} labels in the group")));
    }
    let contributions = class_contributions(group, emb, cfg);
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&x, &y| {
        contributions[y]
            .1
            .total_cmp(&contributions[x].1)
            .then(contributions[x].0.cmp(&contributions[y].0))
    });
    let keep: Vec<bool> = {
        let mut keep = vec![false; total];
        for &i in &order[..k] {
            keep[i] = true;
        }
        keep
    };
    let p = group.positives.len();
    let mut positives = Vec::new();
    let mut taus = Vec::new();
    for (i, m) in group.positives.iter().enumerate() {
        if keep[i] {
            positives.push(*m);
            taus.push(group.taus[i]);
        }
    }
    let negatives: Vec<Member> = group
        .negatives
        .iter()
        .enumerate()
        .filter(|(j, _)| keep[p + j])
        .map(|(_, m)| *m)
        .collect();
    Ok(AnchorGroup {
        anchor: group.anchor,
        positives,
        negatives,
        taus,
    })
}

/// `(slot label, contribution)` for positives followed by negatives.
pub fn class_contributions(group: &AnchorGroup, emb: &GroupEmbedding, cfg: &LossConfig) -> Vec<(usize, f64)> {
    let pos = group
        .positives
        .iter()
        .zip(&emb.positives)
        .zip(&group.taus)
        .map(|((m, x), tau)| (m.label, dist(&emb.anchor, x) - cfg.margin * tau));
    let neg = group
        .negatives
        .iter()
        .zip(&emb.negatives)
        .map(|(m, x)| (m.label, cfg.margin - dist(&emb.anchor, x)));
    pos.chain(neg).collect()
}

/// Averaged negative log-likelihood of per-label present/absent
/// log-probability pairs. Index 0 of each pair is "present", index 1
/// "absent".
///
/// Gradients are with respect to the pre-softmax logits of each head:
/// `(softmax − one_hot) / l`, one two-vector per label.
pub fn pretrain_loss(log_probs: &[[f64; 2]], y: &LabelSet, label_count: usize) -> Result<LossOutput> {
    if log_probs.len() != label_count {
        return Err(Error::Contract(format!(
            "{} heads for {label_count} labels",
            log_probs.len()
        )));
    }
    let scale = 1.0 / label_count as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(label_count);
    for (i, lp) in log_probs.iter().enumerate() {
        let probs = [lp[0].exp(), lp[1].exp()];
        if lp.iter().any(|v| !v.is_finite() && *v != f64::NEG_INFINITY) || (probs[0] + probs[1] - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!(
                "head {i} is not a log-softmax pair: {lp:?}"
            )));
        }
        let state = if y.contains(i) { 0 } else { 1 };
        value -= lp[state];
        let mut g = [probs[0] * scale, probs[1] * scale];
        g[state] -= scale;
        grads.push(g.to_vec());
    }
    Ok(LossOutput {
        value: value * scale,
        grads,
    })
}
