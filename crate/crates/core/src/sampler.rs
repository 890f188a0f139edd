//! Anchor-group sampling.
//!
//! For an anchor, one example is drawn uniformly for every label; the draws
//! sharing a label with the anchor become positives and the rest negatives.
//! The single-label-positive variant instead takes, for each anchor label,
//! an example carrying only that label, and draws negatives from examples
//! sharing nothing with the anchor. All draws are uniform: there is no
//! hard-negative mining here.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{label_complement, Dataset, LabelSet};
use crate::error::{Error, Result};
use crate::losses::{ml2plus_tau, overlap_tau};

/// Draw attempts per slot before giving up on an anchor.
pub const MAX_REDRAWS: usize = 100;

/// Loss family, which also fixes how mini-batches are sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Anchor/partner pairs for the contrastive loss.
    Contrastive,
    Triplet,
    Ml2,
    Ml2plus,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Contrastive => "contrastive",
            Regime::Triplet => "triplet",
            Regime::Ml2 => "ml2",
            Regime::Ml2plus => "ml2plus",
        }
    }

    pub fn uses_groups(self) -> bool {
        matches!(self, Regime::Ml2 | Regime::Ml2plus)
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contrastive" => Ok(Regime::Contrastive),
            "triplet" => Ok(Regime::Triplet),
            "ml2" => Ok(Regime::Ml2),
            "ml2plus" | "ml2+" => Ok(Regime::Ml2plus),
            other => Err(Error::Config(format!("unknown loss regime {other:?}"))),
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A drawn example and the label slot it was drawn for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Member {
    pub index: usize,
    pub label: usize,
}

/// One anchor with its positive and negative sets. Indices refer to the
/// dataset the group was drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorGroup {
    pub anchor: usize,
    pub positives: Vec<Member>,
    pub negatives: Vec<Member>,
    pub taus: Vec<f64>,
}

impl AnchorGroup {
    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every example index in the group, anchor first.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.anchor)
            .chain(self.positives.iter().map(|m| m.index))
            .chain(self.negatives.iter().map(|m| m.index))
    }

    /// Checks the group invariants against `ds` for the given regime.
    /// `expected_len` is the label count for full groups or `k` for mined
    /// ones.
    pub fn validate(&self, ds: &Dataset, regime: Regime, expected_len: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(format!("group of anchor {}: {m}", self.anchor)));
        if self.len() != expected_len {
            return bad(format!("p + n = {} != {expected_len}", self.len()));
        }
        if self.taus.len() != self.positives.len() {
            return bad("tau count differs from positive count".into());
        }
        let mut seen: Vec<usize> = self.indices().collect();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate example or anchor inside its own sets".into());
        }
        let anchor = &ds.example(self.anchor).labels;
        let p = self.positives.len();
        for (m, &tau) in self.positives.iter().zip(&self.taus) {
            let labels = &ds.example(m.index).labels;
            if !labels.shares_any(anchor) {
                return bad(format!("positive {} shares no label", m.index));
            }
            let expected = match regime {
                Regime::Ml2plus => {
                    if labels.as_slice() != [m.label] || !anchor.contains(m.label) {
                        return bad(format!("positive {} is not single-label {}", m.index, m.label));
                    }
                    ml2plus_tau(p)
                }
                _ => overlap_tau(anchor, labels)?,
            };
            if tau != expected || !(0.0..=1.0).contains(&tau) {
                return bad(format!("tau {tau} for positive {} should be {expected}", m.index));
            }
        }
        for m in &self.negatives {
            let labels = &ds.example(m.index).labels;
            if labels.shares_any(anchor) {
                return bad(format!("negative {} shares a label", m.index));
            }
            if anchor.contains(m.label) || !labels.contains(m.label) {
                return bad(format!("negative {} drawn for wrong slot {}", m.index, m.label));
            }
        }
        for m in &self.positives {
            if !ds.example(m.index).labels.contains(m.label) {
                return bad(format!("positive {} drawn for wrong slot {}", m.index, m.label));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub anchor: usize,
    pub other: usize,
    pub same: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MiniBatch {
    Groups(Vec<AnchorGroup>),
    Pairs(Vec<Pair>),
    Triplets(Vec<Triplet>),
}

impl MiniBatch {
    /// Number of anchors in the batch.
    pub fn anchors(&self) -> usize {
        match self {
            MiniBatch::Groups(g) => g.len(),
            MiniBatch::Pairs(p) => p.len() / 2,
            MiniBatch::Triplets(t) => t.len(),
        }
    }
}

/// Uniform draw from `candidates` that avoids `taken`, with bounded retries.
fn draw_avoiding<R: Rng + ?Sized>(
    rng: &mut R,
    candidates: &[usize],
    taken: &[usize],
    label: usize,
) -> Result<usize> {
    if candidates.iter().all(|c| taken.contains(c)) {
        return Err(Error::DegenerateGroup(format!(
            "every candidate for label {label} is already in the group"
        )));
    }
    for _ in 0..MAX_REDRAWS {
        let c = candidates[rng.random_range(0..candidates.len())];
        if !taken.contains(&c) {
            return Ok(c);
        }
    }
    Err(Error::DegenerateGroup(format!(
        "no distinct draw for label {label} after {MAX_REDRAWS} attempts"
    )))
}

/// One draw per label, partitioned by the shared-label test.
pub fn sample_group_ml2<R: Rng + ?Sized>(ds: &Dataset, anchor: usize, rng: &mut R) -> Result<AnchorGroup> {
    let anchor_labels = &ds.example(anchor).labels;
    let mut taken = vec![anchor];
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for label in 0..ds.label_count() {
        let candidates = ds.with_label(label);
        if candidates.is_empty() {
            return Err(Error::Sampling(format!("label {label} has no candidates")));
        }
        let index = draw_avoiding(rng, candidates, &taken, label)?;
        taken.push(index);
        let m = Member { index, label };
        if ds.example(index).labels.shares_any(anchor_labels) {
            positives.push(m);
        } else {
            negatives.push(m);
        }
    }
    if negatives.is_empty() {
        return Err(Error::DegenerateGroup(format!("anchor {anchor} has no negatives")));
    }
    let taus = positives
        .iter()
        .map(|m| overlap_tau(anchor_labels, &ds.example(m.index).labels))
        .collect::<Result<_>>()?;
    Ok(AnchorGroup {
        anchor,
        positives,
        negatives,
        taus,
    })
}

/// Single-label positives, one per anchor label; negatives share no label
/// with the anchor.
pub fn sample_group_ml2plus<R: Rng + ?Sized>(ds: &Dataset, anchor: usize, rng: &mut R) -> Result<AnchorGroup> {
    let anchor_labels = &ds.example(anchor).labels;
    let missing = label_complement(anchor_labels, ds.label_count());
    if missing.is_empty() {
        return Err(Error::DegenerateGroup(format!("anchor {anchor} has no negatives")));
    }
    let mut taken = vec![anchor];
    let mut positives = Vec::with_capacity(anchor_labels.len());
    for label in anchor_labels.iter() {
        let candidates = ds.with_only_label(label);
        if candidates.is_empty() {
            return Err(Error::Sampling(format!("label {label} has no single-label candidate")));
        }
        let index = draw_avoiding(rng, candidates, &taken, label)?;
        taken.push(index);
        positives.push(Member { index, label });
    }
    let mut negatives = Vec::with_capacity(missing.len());
    for label in missing.iter() {
        let candidates: Vec<usize> = ds
            .with_label(label)
            .iter()
            .copied()
            .filter(|&c| !ds.example(c).labels.shares_any(anchor_labels))
            .collect();
        if candidates.is_empty() {
            return Err(Error::Sampling(format!(
                "label {label} has no candidate disjoint from anchor labels {:?}",
                anchor_labels.as_slice()
            )));
        }
        let index = draw_avoiding(rng, &candidates, &taken, label)?;
        taken.push(index);
        negatives.push(Member { index, label });
    }
    let tau = ml2plus_tau(positives.len());
    Ok(AnchorGroup {
        anchor,
        taus: vec![tau; positives.len()],
        positives,
        negatives,
    })
}

fn uniform_where<R, F>(ds: &Dataset, rng: &mut R, anchor: usize, pred: F) -> Option<usize>
where
    R: Rng + ?Sized,
    F: Fn(&LabelSet) -> bool,
{
    let ok = |i: usize| i != anchor && pred(&ds.example(i).labels);
    // rejection sampling is uniform over the accepted set; scan only when it
    // keeps missing
    for _ in 0..MAX_REDRAWS {
        let i = rng.random_range(0..ds.len());
        if ok(i) {
            return Some(i);
        }
    }
    let candidates: Vec<usize> = (0..ds.len()).filter(|&i| ok(i)).collect();
    (!candidates.is_empty()).then(|| candidates[rng.random_range(0..candidates.len())])
}

fn sample_triplet<R: Rng + ?Sized>(ds: &Dataset, anchor: usize, rng: &mut R) -> Result<Triplet> {
    let a = &ds.example(anchor).labels;
    let positive = uniform_where(ds, rng, anchor, |l| l.shares_any(a))
        .ok_or_else(|| Error::DegenerateGroup(format!("anchor {anchor} has no positive")))?;
    let negative = uniform_where(ds, rng, anchor, |l| !l.shares_any(a))
        .ok_or_else(|| Error::DegenerateGroup(format!("anchor {anchor} has no negative")))?;
    Ok(Triplet {
        anchor,
        positive,
        negative,
    })
}

/// Draws `b` distinct anchors uniformly and expands each per `regime`.
/// Anchors whose group is degenerate are replaced by the next anchor of the
/// same permutation.
pub fn build_minibatch<R: Rng + ?Sized>(ds: &Dataset, b: usize, regime: Regime, rng: &mut R) -> Result<MiniBatch> {
    if b == 0 {
        return Err(Error::Sampling("batch size must be at least 1".into()));
    }
    if b > ds.len() {
        return Err(Error::Sampling(format!("batch size {b} exceeds split size {}", ds.len())));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(rng);
    let mut next = order.into_iter();

    let mut groups = Vec::new();
    let mut pairs = Vec::new();
    let mut triplets = Vec::new();
    let mut produced = 0;
    while produced < b {
        let Some(anchor) = next.next() else {
            return Err(Error::Sampling(format!(
                "ran out of usable anchors after {produced} of {b}"
            )));
        };
        let outcome = match regime {
            Regime::Ml2 => sample_group_ml2(ds, anchor, rng).map(|g| groups.push(g)),
            Regime::Ml2plus => sample_group_ml2plus(ds, anchor, rng).map(|g| groups.push(g)),
            Regime::Triplet => sample_triplet(ds, anchor, rng).map(|t| triplets.push(t)),
            Regime::Contrastive => sample_triplet(ds, anchor, rng).map(|t| {
                pairs.push(Pair {
                    anchor,
                    other: t.positive,
                    same: true,
                });
                pairs.push(Pair {
                    anchor,
                    other: t.negative,
                    same: false,
                });
            }),
        };
        match outcome {
            Ok(()) => produced += 1,
            Err(Error::DegenerateGroup(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(match regime {
        Regime::Ml2 | Regime::Ml2plus => MiniBatch::Groups(groups),
        Regime::Triplet => MiniBatch::Triplets(triplets),
        Regime::Contrastive => MiniBatch::Pairs(pairs),
    })
}
