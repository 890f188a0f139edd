//! Multi-labelled examples, synthetic data with controllable label
//! co-occurrence, and JSON Lines ingestion.
//!
//! Label index 0 is the mutually exclusive "normal" label in the default
//! synthetic setup; every other index is an abnormality that may co-occur
//! with the others.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label index of the exclusive "normal" class in synthetic data.
pub const NORMAL_LABEL: usize = 0;

/// Seed of the default prototype directions.
pub const DEFAULT_PROTOTYPE_SEED: u64 = 0x5eed_0001;

/// Sorted, duplicate-free set of label indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSet(Vec<usize>);

impl LabelSet {
    /// Builds a set from arbitrary indices, sorting and checking range.
    /// Duplicates are rejected rather than silently merged.
    pub fn new(labels: impl IntoIterator<Item = usize>, label_count: usize) -> Result<Self> {
        let mut v: Vec<usize> = labels.into_iter().collect();
        v.sort_unstable();
        if let Some(w) = v.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Contract(format!("duplicate label {}", w[0])));
        }
        if let Some(&bad) = v.iter().find(|&&k| k >= label_count) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {label_count} labels"
            )));
        }
        Ok(Self(v))
    }

    pub fn single(label: usize) -> Self {
        Self(vec![label])
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, label: usize) -> bool {
        self.0.binary_search(&label).is_ok()
    }

    pub fn intersection_len(&self, other: &LabelSet) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < self.0.len() && j < other.0.len() {
            match self.0[i].cmp(&other.0[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }

    pub fn union_len(&self, other: &LabelSet) -> usize {
        self.len() + other.len() - self.intersection_len(other)
    }

    /// True when the two sets have at least one label in common.
    pub fn shares_any(&self, other: &LabelSet) -> bool {
        self.intersection_len(other) > 0
    }
}

/// Labels in `0..label_count` that are not in `labels`.
pub fn label_complement(labels: &LabelSet, label_count: usize) -> LabelSet {
    LabelSet((0..label_count).filter(|&k| !labels.contains(k)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub features: Vec<f64>,
    pub labels: LabelSet,
}

impl Example {
    pub fn is_normal(&self) -> bool {
        self.labels.as_slice() == [NORMAL_LABEL]
    }
}

/// A split of examples with a per-label index.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<Example>,
    label_count: usize,
    feature_dim: usize,
    by_label: Vec<Vec<usize>>,
    only_label: Vec<Vec<usize>>,
}

impl Dataset {
    /// Validates every record and builds the per-label index.
    pub fn new(examples: Vec<Example>, label_count: usize) -> Result<Self> {
        if label_count == 0 {
            return Err(Error::Contract("label count must be positive".into()));
        }
        let feature_dim = examples.first().map_or(0, |e| e.features.len());
        let mut by_label = vec![Vec::new(); label_count];
        let mut only_label = vec![Vec::new(); label_count];
        for (pos, e) in examples.iter().enumerate() {
            let fail = |message: String| Error::Format {
                id: e.id.clone(),
                message,
            };
            if e.features.len() != feature_dim {
                return Err(fail(format!(
                    "feature length {} differs from {feature_dim}",
                    e.features.len()
                )));
            }
            if let Some(i) = e.features.iter().position(|v| !v.is_finite()) {
                return Err(fail(format!("feature {i} is not finite")));
            }
            if e.labels.is_empty() {
                return Err(fail("empty label set".into()));
            }
            if e.labels.0.windows(2).any(|w| w[0] >= w[1]) {
                return Err(fail("labels must be sorted and distinct".into()));
            }
            for k in e.labels.iter() {
                if k >= label_count {
                    return Err(fail(format!(
                        "label index {k} out of range for {label_count} labels"
                    )));
                }
                by_label[k].push(pos);
            }
            if let [k] = e.labels.as_slice() {
                only_label[*k].push(pos);
            }
        }
        Ok(Self {
            examples,
            label_count,
            feature_dim,
            by_label,
            only_label,
        })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn example(&self, i: usize) -> &Example {
        &self.examples[i]
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn label_count(&self) -> usize {
        self.label_count
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Positions of the examples carrying `label`.
    pub fn with_label(&self, label: usize) -> &[usize] {
        &self.by_label[label]
    }

    /// Positions of the examples whose label set is exactly `{label}`.
    pub fn with_only_label(&self, label: usize) -> &[usize] {
        &self.only_label[label]
    }

    /// Fails naming the first label with no example in this split.
    pub fn check_label_coverage(&self) -> Result<()> {
        match self.by_label.iter().position(Vec::is_empty) {
            Some(k) => Err(Error::Sampling(format!("label {k} has no examples"))),
            None => Ok(()),
        }
    }

    pub fn label_sets(&self) -> Vec<LabelSet> {
        self.examples.iter().map(|e| e.labels.clone()).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    features: Vec<f64>,
    labels: Vec<i64>,
}

pub fn save_jsonl(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in &ds.examples {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_jsonl(path: impl AsRef<Path>, label_count: usize) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut examples = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Format {
            id: format!("line {}", n + 1),
            message: e.to_string(),
        })?;
        let fail = |message: String| Error::Format {
            id: rec.id.clone(),
            message,
        };
        if rec.labels.is_empty() {
            return Err(fail("empty label set".into()));
        }
        let mut labels = Vec::with_capacity(rec.labels.len());
        for &k in &rec.labels {
            if k < 0 || k as usize >= label_count {
                return Err(fail(format!(
                    "label index {k} out of range for {label_count} labels"
                )));
            }
            labels.push(k as usize);
        }
        let labels = LabelSet::new(labels, label_count).map_err(|e| fail(e.to_string()))?;
        examples.push(Example {
            id: rec.id,
            features: rec.features,
            labels,
        });
    }
    Dataset::new(examples, label_count)
}

/// Parameters of the synthetic multi-label generator.
///
/// Label sets are drawn by picking a seed label with probability
/// proportional to the diagonal of `cooccurrence`, then repeatedly
/// expanding: each newly added label `i` pulls in every absent label `j`
/// independently with probability `cooccurrence[i][j]`. Hence
/// `cooccurrence[i][j] == 1` forces `j` whenever `i` is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub label_count: usize,
    pub feature_dim: usize,
    pub prototypes: Vec<Vec<f64>>,
    pub noise_std: f64,
    pub cooccurrence: Vec<Vec<f64>>,
    /// Labels that never co-occur with any other label.
    #[serde(default = "default_exclusive")]
    pub exclusive: Vec<usize>,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

fn default_exclusive() -> Vec<usize> {
    vec![NORMAL_LABEL]
}

impl SyntheticSpec {
    /// Five labels (normal plus four abnormalities), 32 features,
    /// 2,000/500/500 examples.
    pub fn desk_default(seed: u64) -> Self {
        let label_count = 5;
        let feature_dim = 32;
        let prototypes = random_prototypes(label_count, feature_dim, 1.0, DEFAULT_PROTOTYPE_SEED);
        #[rustfmt::skip]
        let cooccurrence = vec![
            vec![0.30, 0.00, 0.00, 0.00, 0.00],
            vec![0.00, 0.20, 0.30, 0.15, 0.10],
            vec![0.00, 0.30, 0.20, 0.20, 0.15],
            vec![0.00, 0.15, 0.20, 0.15, 0.25],
            vec![0.00, 0.10, 0.15, 0.25, 0.15],
        ];
        Self {
            label_count,
            feature_dim,
            prototypes,
            noise_std: 0.2,
            cooccurrence,
            exclusive: default_exclusive(),
            train_size: 2000,
            val_size: 500,
            test_size: 500,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.label_count;
        if l == 0 {
            return Err(Error::Spec("label_count must be positive".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Spec("feature_dim must be positive".into()));
        }
        if self.prototypes.len() != l {
            return Err(Error::Spec(format!(
                "prototypes: {} vectors for {l} labels",
                self.prototypes.len()
            )));
        }
        for (k, p) in self.prototypes.iter().enumerate() {
            if p.len() != self.feature_dim {
                return Err(Error::Spec(format!(
                    "prototypes[{k}]: length {} differs from feature_dim {}",
                    p.len(),
                    self.feature_dim
                )));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Spec(format!("prototypes[{k}]: non-finite entry")));
            }
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Spec(format!("noise_std: {} is invalid", self.noise_std)));
        }
        if self.cooccurrence.len() != l || self.cooccurrence.iter().any(|r| r.len() != l) {
            return Err(Error::Spec(format!("cooccurrence: must be {l}x{l}")));
        }
        for i in 0..l {
            for j in 0..l {
                let v = self.cooccurrence[i][j];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Spec(format!(
                        "cooccurrence[{i}][{j}]: {v} outside [0, 1]"
                    )));
                }
                if v != self.cooccurrence[j][i] {
                    return Err(Error::Spec(format!(
                        "cooccurrence[{i}][{j}]: table is not symmetric"
                    )));
                }
            }
        }
        if self.cooccurrence.iter().enumerate().all(|(i, r)| r[i] == 0.0) {
            return Err(Error::Spec("cooccurrence: diagonal is all zero".into()));
        }
        for &e in &self.exclusive {
            if e >= l {
                return Err(Error::Spec(format!("exclusive: label {e} out of range")));
            }
            if let Some(j) = (0..l).find(|&j| j != e && self.cooccurrence[e][j] != 0.0) {
                return Err(Error::Spec(format!(
                    "cooccurrence[{e}][{j}]: exclusive label {e} must not co-occur"
                )));
            }
        }
        Ok(())
    }

    /// Draws one label set according to the seed-and-expand process.
    pub fn sample_labels<R: Rng + ?Sized>(&self, rng: &mut R) -> LabelSet {
        let l = self.label_count;
        let total: f64 = (0..l).map(|k| self.cooccurrence[k][k]).sum();
        let mut u = rng.random::<f64>() * total;
        let mut seed_label = l - 1;
        for k in 0..l {
            let w = self.cooccurrence[k][k];
            if u < w {
                seed_label = k;
                break;
            }
            u -= w;
        }
        // guard against landing on a zero-weight label through round-off
        while self.cooccurrence[seed_label][seed_label] == 0.0 {
            seed_label -= 1;
        }

        let mut present = vec![false; l];
        present[seed_label] = true;
        let mut queue = std::collections::VecDeque::from([seed_label]);
        while let Some(i) = queue.pop_front() {
            for (j, p) in present.iter_mut().enumerate() {
                if *p || j == i {
                    continue;
                }
                if rng.random::<f64>() < self.cooccurrence[i][j] {
                    *p = true;
                    queue.push_back(j);
                }
            }
        }
        LabelSet((0..l).filter(|&k| present[k]).collect())
    }

    /// Sum of the active prototypes.
    pub fn mean_features(&self, labels: &LabelSet) -> Vec<f64> {
        let mut x = vec![0.0; self.feature_dim];
        for k in labels.iter() {
            for (xi, pi) in x.iter_mut().zip(&self.prototypes[k]) {
                *xi += pi;
            }
        }
        x
    }
}

/// Train, validation and test datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Random Gaussian prototype directions rescaled to `norm`.
pub fn random_prototypes(label_count: usize, dim: usize, norm: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..label_count)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = crate::numeric::norm(&v);
            v.into_iter().map(|x| x * norm / n).collect()
        })
        .collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Splits> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut split = |name: &str, size: usize| -> Result<Dataset> {
        let examples = (0..size)
            .map(|i| {
                let labels = spec.sample_labels(&mut rng);
                let mut features = spec.mean_features(&labels);
                if spec.noise_std > 0.0 {
                    for f in &mut features {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *f += spec.noise_std * z;
                    }
                }
                Example {
                    id: format!("{name}-{i:05}"),
                    features,
                    labels,
                }
            })
            .collect();
        Dataset::new(examples, spec.label_count)
    };
    Ok(Splits {
        train: split("train", spec.train_size)?,
        val: split("val", spec.val_size)?,
        test: split("test", spec.test_size)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn tiny_spec() -> SyntheticSpec {
        let mut s = SyntheticSpec::desk_default(3);
        s.train_size = 300;
        s.val_size = 50;
        s.test_size = 50;
        s
    }

    #[test]
    fn complement_of_single() {
        let c = label_complement(&LabelSet::single(0), 5);
        assert_eq!(c.as_slice(), &[1, 2, 3, 4]);
    }

    #[test]
    fn complement_of_full_set_is_empty() {
        let full = LabelSet::new(0..5, 5).unwrap();
        assert!(label_complement(&full, 5).is_empty());
    }

    proptest! {
        #[test]
        fn complement_is_involution(mask in 0u32..(1 << 8)) {
            let s = LabelSet::new((0..8).filter(|k| mask & (1 << k) != 0), 8).unwrap();
            prop_assert_eq!(label_complement(&label_complement(&s, 8), 8), s);
        }
    }

    #[test]
    fn label_set_rejects_bad_input() {
        assert!(LabelSet::new([1, 1], 3).is_err());
        assert!(LabelSet::new([3], 3).is_err());
        assert_eq!(LabelSet::new([2, 0], 3).unwrap().as_slice(), &[0, 2]);
    }

    #[test]
    fn zero_noise_single_label_is_prototype() {
        let mut spec = tiny_spec();
        spec.noise_std = 0.0;
        let splits = generate_synthetic(&spec).unwrap();
        let mut seen = 0;
        for e in splits.train.examples() {
            if e.labels.len() == 1 {
                let k = e.labels.as_slice()[0];
                assert_eq!(e.features, spec.prototypes[k]);
                seen += 1;
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = tiny_spec();
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        save_jsonl(&a.train, dir.path().join("a.jsonl")).unwrap();
        save_jsonl(&b.train, dir.path().join("b.jsonl")).unwrap();
        assert_eq!(
            std::fs::read(dir.path().join("a.jsonl")).unwrap(),
            std::fs::read(dir.path().join("b.jsonl")).unwrap()
        );
        let mut other = spec.clone();
        other.seed += 1;
        assert_ne!(generate_synthetic(&other).unwrap(), a);
    }

    #[test]
    fn forced_cooccurrence_holds_everywhere() {
        let mut spec = tiny_spec();
        spec.cooccurrence[2][3] = 1.0;
        spec.cooccurrence[3][2] = 1.0;
        let splits = generate_synthetic(&spec).unwrap();
        let mut with_two = 0;
        for ds in [&splits.train, &splits.val, &splits.test] {
            for e in ds.examples() {
                if e.labels.contains(2) {
                    with_two += 1;
                    assert!(e.labels.contains(3), "{} has 2 without 3", e.id);
                }
            }
        }
        assert!(with_two > 0);
    }

    #[test]
    fn normal_never_cooccurs_and_splits_are_disjoint() {
        let splits = generate_synthetic(&tiny_spec()).unwrap();
        let mut ids = std::collections::HashSet::new();
        for ds in [&splits.train, &splits.val, &splits.test] {
            for e in ds.examples() {
                assert!(!e.labels.contains(NORMAL_LABEL) || e.labels.len() == 1);
                assert!(ids.insert(e.id.clone()));
            }
        }
    }

    #[test]
    fn per_label_index_is_consistent() {
        let ds = generate_synthetic(&tiny_spec()).unwrap().train;
        ds.check_label_coverage().unwrap();
        for k in 0..ds.label_count() {
            let expected: Vec<usize> = (0..ds.len())
                .filter(|&i| ds.example(i).labels.contains(k))
                .collect();
            assert_eq!(ds.with_label(k), expected.as_slice());
        }
    }

    /// Exact label-set distribution of the seed-and-expand process,
    /// enumerated over every Bernoulli outcome.
    fn exact_set_distribution(spec: &SyntheticSpec) -> HashMap<Vec<usize>, f64> {
        fn expand(
            spec: &SyntheticSpec,
            present: Vec<bool>,
            queue: Vec<usize>,
            j: usize,
            prob: f64,
            out: &mut HashMap<Vec<usize>, f64>,
        ) {
            let l = spec.label_count;
            if prob == 0.0 {
                return;
            }
            let Some(&i) = queue.first() else {
                let key = (0..l).filter(|&k| present[k]).collect();
                *out.entry(key).or_default() += prob;
                return;
            };
            if j == l {
                expand(spec, present, queue[1..].to_vec(), 0, prob, out);
                return;
            }
            if present[j] || j == i {
                expand(spec, present, queue, j + 1, prob, out);
                return;
            }
            let c = spec.cooccurrence[i][j];
            let mut with = present.clone();
            with[j] = true;
            let mut q = queue.clone();
            q.push(j);
            expand(spec, with, q, j + 1, prob * c, out);
            expand(spec, present, queue, j + 1, prob * (1.0 - c), out);
        }
        let l = spec.label_count;
        let total: f64 = (0..l).map(|k| spec.cooccurrence[k][k]).sum();
        let mut out = HashMap::new();
        for k in 0..l {
            let mut present = vec![false; l];
            present[k] = true;
            expand(spec, present, vec![k], 0, spec.cooccurrence[k][k] / total, &mut out);
        }
        out
    }

    #[test]
    fn empirical_marginals_match_exact_enumeration() {
        let mut spec = SyntheticSpec::desk_default(11);
        spec.train_size = 10_000;
        spec.val_size = 0;
        spec.test_size = 0;
        let dist = exact_set_distribution(&spec);
        assert!((dist.values().sum::<f64>() - 1.0).abs() < 1e-12);
        let ds = generate_synthetic(&spec).unwrap().train;
        let n = ds.len() as f64;
        for k in 0..spec.label_count {
            let p: f64 = dist.iter().filter(|(s, _)| s.contains(&k)).map(|(_, p)| p).sum();
            let observed = ds.with_label(k).len() as f64 / n;
            let se = (p * (1.0 - p) / n).sqrt();
            assert!(
                (observed - p).abs() <= 3.0 * se,
                "label {k}: observed {observed}, expected {p} ± {se}"
            );
        }
    }

    #[test]
    fn nearest_prototype_recovers_single_labels() {
        let mut spec = SyntheticSpec::desk_default(5);
        spec.train_size = 3000;
        let ds = generate_synthetic(&spec).unwrap().train;
        let (mut hit, mut total) = (0, 0);
        for e in ds.examples().iter().filter(|e| e.labels.len() == 1) {
            let best = (0..spec.label_count)
                .min_by(|&a, &b| {
                    let da: f64 = e.features.iter().zip(&spec.prototypes[a]).map(|(x, p)| (x - p).powi(2)).sum();
                    let db: f64 = e.features.iter().zip(&spec.prototypes[b]).map(|(x, p)| (x - p).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            total += 1;
            hit += usize::from(best == e.labels.as_slice()[0]);
        }
        assert!(hit as f64 >= 0.99 * total as f64, "{hit}/{total}");
    }

    #[test]
    fn spec_validation_names_the_key() {
        let mut spec = tiny_spec();
        spec.cooccurrence[1][2] = 1.5;
        spec.cooccurrence[2][1] = 1.5;
        let msg = spec.validate().unwrap_err().to_string();
        assert!(msg.contains("cooccurrence[1][2]"), "{msg}");

        let mut spec = tiny_spec();
        spec.prototypes[3].pop();
        assert!(spec.validate().unwrap_err().to_string().contains("prototypes[3]"));

        let mut spec = tiny_spec();
        spec.cooccurrence[0][4] = 0.1;
        spec.cooccurrence[4][0] = 0.1;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let ds = generate_synthetic(&tiny_spec()).unwrap().val;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("val.jsonl");
        save_jsonl(&ds, &p).unwrap();
        assert_eq!(load_jsonl(&p, ds.label_count()).unwrap(), ds);
    }

    fn load_str(body: &str, l: usize) -> Result<Dataset> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(&p, body).unwrap();
        load_jsonl(&p, l)
    }

    #[test]
    fn jsonl_rejects_bad_records() {
        let err = load_str(r#"{"id":"a","features":[1.0],"labels":[]}"#, 3).unwrap_err();
        assert!(matches!(&err, Error::Format { id, .. } if id == "a"), "{err}");

        let err = load_str(r#"{"id":"b","features":[1.0],"labels":[3]}"#, 3).unwrap_err();
        assert!(matches!(&err, Error::Format { id, .. } if id == "b"), "{err}");

        let body = concat!(
            r#"{"id":"c","features":[1.0,2.0],"labels":[0]}"#,
            "\n",
            r#"{"id":"d","features":[1.0],"labels":[1]}"#
        );
        let err = load_str(body, 3).unwrap_err();
        assert!(matches!(&err, Error::Format { id, .. } if id == "d"), "{err}");

        let err = load_str(r#"{"id":"e","features":[1.0],"labels":[-1]}"#, 3).unwrap_err();
        assert!(matches!(&err, Error::Format { id, .. } if id == "e"), "{err}");
    }
}
