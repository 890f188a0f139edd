//! Fully connected encoder with a normalized projection head,
//! `f(x) = (g(x)·β + b) / ‖g(x)·β + b‖₂`, and optional per-label two-way
//! classification heads used for pre-training.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{add_outer, dot, mat_vec, norm, vecmat, DenseMatrix, ParamStore, EPS_NORM};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    /// Widths of the rectified hidden layers.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    /// Number of per-label classification heads; zero disables them.
    #[serde(default)]
    pub label_heads: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

fn default_embedding_dim() -> usize {
    64
}

impl EncoderConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: default_hidden(),
            embedding_dim: default_embedding_dim(),
            label_heads: 0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim < 2 {
            return Err(Error::Config(format!(
                "embedding_dim must be at least 2, got {}",
                self.embedding_dim
            )));
        }
        if self.input_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("layer sizes must be at least 1".into()));
        }
        Ok(())
    }

    fn trunk_out(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    hidden: Vec<(usize, usize)>,
    projection: (usize, usize),
    heads: Vec<(usize, usize)>,
}

/// Encoder parameters and the slot layout inside the [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    config: EncoderConfig,
    params: ParamStore,
    layout: Layout,
}

/// Activations kept from a trunk forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TrunkCache {
    inputs: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
    output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedCache {
    trunk: TrunkCache,
    embedding: Vec<f64>,
    scale: f64,
}

impl EmbedCache {
    /// Hidden-layer inputs to the ReLU, one vector per layer.
    pub fn pre_activations(&self) -> &[Vec<f64>] {
        &self.trunk.pre_activations
    }

    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyCache {
    trunk: TrunkCache,
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> DenseMatrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    DenseMatrix::from_vec(fan_in, fan_out, data).expect("shape")
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn log_softmax2(z: &[f64]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
    [z[0] - lse, z[1] - lse]
}

impl EmbeddingModel {
    /// Glorot-uniform weights, zero biases, deterministic in `config.seed`.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let mut hidden = Vec::new();
        let mut fan_in = config.input_dim;
        for (i, &width) in config.hidden.iter().enumerate() {
            let w = params.insert(format!("hidden{i}.weight"), glorot(&mut rng, fan_in, width));
            let b = params.insert(format!("hidden{i}.bias"), DenseMatrix::zeros(1, width));
            hidden.push((w, b));
            fan_in = width;
        }
        let h = config.trunk_out();
        let m = config.embedding_dim;
        let projection = (
            params.insert("projection.weight", glorot(&mut rng, h, m)),
            params.insert("projection.bias", DenseMatrix::zeros(1, m)),
        );
        let heads = (0..config.label_heads)
            .map(|i| {
                (
                    params.insert(format!("head{i}.weight"), glorot(&mut rng, h, 2)),
                    params.insert(format!("head{i}.bias"), DenseMatrix::zeros(1, 2)),
                )
            })
            .collect();
        Ok(Self {
            config,
            params,
            layout: Layout {
                hidden,
                projection,
                heads,
            },
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    pub fn has_heads(&self) -> bool {
        !self.layout.heads.is_empty()
    }

    /// Draws a fresh projection (β, b) from `seed`, leaving the trunk and
    /// heads untouched.
    pub fn reinit_projection(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, b) = self.layout.projection;
        let (h, m) = self.params.slot(w).value.shape();
        self.params.slot_mut(w).value = glorot(&mut rng, h, m);
        self.params.slot_mut(w).momentum.fill(0.0);
        self.params.slot_mut(b).value.fill(0.0);
        self.params.slot_mut(b).momentum.fill(0.0);
    }

    fn trunk(&self, x: &[f64]) -> Result<TrunkCache> {
        if x.len() != self.config.input_dim {
            return Err(Error::Dimension(format!(
                "input has {} features, encoder expects {}",
                x.len(),
                self.config.input_dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input features".into()));
        }
        let mut inputs = Vec::with_capacity(self.layout.hidden.len());
        let mut pre_activations = Vec::with_capacity(self.layout.hidden.len());
        let mut h = x.to_vec();
        for &(w, b) in &self.layout.hidden {
            let mut z = vecmat(&h, &self.params.slot(w).value);
            for (zi, bi) in z.iter_mut().zip(self.params.slot(b).value.data()) {
                *zi += bi;
            }
            inputs.push(h);
            h = z.clone();
            relu_in_place(&mut h);
            pre_activations.push(z);
        }
        Ok(TrunkCache {
            inputs,
            pre_activations,
            output: h,
        })
    }

    pub fn forward_embed(&self, x: &[f64]) -> Result<(Vec<f64>, EmbedCache)> {
        let trunk = self.trunk(x)?;
        let (w, b) = self.layout.projection;
        let mut u = vecmat(&trunk.output, &self.params.slot(w).value);
        for (ui, bi) in u.iter_mut().zip(self.params.slot(b).value.data()) {
            *ui += bi;
        }
        let n = norm(&u);
        if !n.is_finite() {
            return Err(Error::NonFinite("projection output".into()));
        }
        if n < EPS_NORM {
            return Err(Error::Degenerate(format!(
                "projection output norm {n:e} below {EPS_NORM:e}"
            )));
        }
        let embedding: Vec<f64> = u.iter().map(|v| v / n).collect();
        Ok((
            embedding.clone(),
            EmbedCache {
                trunk,
                embedding,
                scale: n,
            },
        ))
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward_embed(x).map(|(e, _)| e)
    }

    /// Per-label `[log P(present), log P(absent)]`.
    pub fn forward_classify(&self, x: &[f64]) -> Result<(Vec<[f64; 2]>, ClassifyCache)> {
        if !self.has_heads() {
            return Err(Error::Config("model has no classification heads".into()));
        }
        let trunk = self.trunk(x)?;
        let log_probs = self
            .layout
            .heads
            .iter()
            .map(|&(w, b)| {
                let mut z = vecmat(&trunk.output, &self.params.slot(w).value);
                for (zi, bi) in z.iter_mut().zip(self.params.slot(b).value.data()) {
                    *zi += bi;
                }
                log_softmax2(&z)
            })
            .collect();
        Ok((log_probs, ClassifyCache { trunk }))
    }

    fn check_trunk_cache(&self, cache: &TrunkCache) -> Result<()> {
        if cache.inputs.len() != self.layout.hidden.len()
            || cache.output.len() != self.config.trunk_out()
            || cache.inputs.first().is_some_and(|x| x.len() != self.config.input_dim)
        {
            return Err(Error::Contract("forward cache does not match this model".into()));
        }
        Ok(())
    }

    fn backward_trunk(&self, cache: &TrunkCache, mut grad_h: Vec<f64>, grads: &mut [DenseMatrix]) {
        for (layer, &(w, b)) in self.layout.hidden.iter().enumerate().rev() {
            let z = &cache.pre_activations[layer];
            for (g, zi) in grad_h.iter_mut().zip(z) {
                if *zi <= 0.0 {
                    *g = 0.0;
                }
            }
            add_outer(&mut grads[w], &cache.inputs[layer], &grad_h);
            for (gb, g) in grads[b].data_mut().iter_mut().zip(&grad_h) {
                *gb += g;
            }
            if layer > 0 {
                grad_h = mat_vec(&self.params.slot(w).value, &grad_h);
            }
        }
    }

    fn check_buffers(&self, grads: &[DenseMatrix]) -> Result<()> {
        if grads.len() != self.params.len()
            || grads
                .iter()
                .zip(self.params.slots())
                .any(|(g, s)| g.shape() != s.value.shape())
        {
            return Err(Error::Dimension("gradient buffers do not match parameters".into()));
        }
        Ok(())
    }

    /// Accumulates the parameter gradient of `upstream · f(x)` into `grads`
    /// (one buffer per parameter slot, see [`ParamStore::grad_buffers`]).
    pub fn backward_embed_into(&self, cache: &EmbedCache, upstream: &[f64], grads: &mut [DenseMatrix]) -> Result<()> {
        self.check_trunk_cache(&cache.trunk)?;
        self.check_buffers(grads)?;
        if upstream.len() != self.config.embedding_dim || cache.embedding.len() != upstream.len() {
            return Err(Error::Dimension(format!(
                "upstream gradient has length {}, embedding has {}",
                upstream.len(),
                self.config.embedding_dim
            )));
        }
        // d(u/|u|)/du = (I - f fᵀ)/|u|
        let f = &cache.embedding;
        let along = dot(f, upstream);
        let grad_u: Vec<f64> = upstream
            .iter()
            .zip(f)
            .map(|(g, fi)| (g - fi * along) / cache.scale)
            .collect();
        let (w, b) = self.layout.projection;
        add_outer(&mut grads[w], &cache.trunk.output, &grad_u);
        for (gb, g) in grads[b].data_mut().iter_mut().zip(&grad_u) {
            *gb += g;
        }
        let grad_h = mat_vec(&self.params.slot(w).value, &grad_u);
        self.backward_trunk(&cache.trunk, grad_h, grads);
        Ok(())
    }

    /// Accumulates parameter gradients given the loss gradient with respect
    /// to each head's two logits.
    pub fn backward_classify_into(
        &self,
        cache: &ClassifyCache,
        logit_grads: &[Vec<f64>],
        grads: &mut [DenseMatrix],
    ) -> Result<()> {
        self.check_trunk_cache(&cache.trunk)?;
        self.check_buffers(grads)?;
        if logit_grads.len() != self.layout.heads.len() || logit_grads.iter().any(|g| g.len() != 2) {
            return Err(Error::Dimension(format!(
                "expected {} two-way logit gradients",
                self.layout.heads.len()
            )));
        }
        let mut grad_h = vec![0.0; self.config.trunk_out()];
        for (&(w, b), g) in self.layout.heads.iter().zip(logit_grads) {
            add_outer(&mut grads[w], &cache.trunk.output, g);
            for (gb, gi) in grads[b].data_mut().iter_mut().zip(g) {
                *gb += gi;
            }
            for (acc, v) in grad_h.iter_mut().zip(mat_vec(&self.params.slot(w).value, g)) {
                *acc += v;
            }
        }
        self.backward_trunk(&cache.trunk, grad_h, grads);
        Ok(())
    }

    /// [`Self::backward_embed_into`] accumulating into the store's own
    /// gradient accumulators.
    pub fn backward_embed(&mut self, cache: &EmbedCache, upstream: &[f64]) -> Result<()> {
        let mut grads = self.params.grad_buffers();
        self.backward_embed_into(cache, upstream, &mut grads)?;
        self.params.accumulate(&grads)
    }

    pub fn backward_classify(&mut self, cache: &ClassifyCache, logit_grads: &[Vec<f64>]) -> Result<()> {
        let mut grads = self.params.grad_buffers();
        self.backward_classify_into(cache, logit_grads, &mut grads)?;
        self.params.accumulate(&grads)
    }

    /// Copies parameter values from `other`, which must share the layout.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameter slots, model has {}",
                other.len(),
                self.params.len()
            )));
        }
        for (dst, src) in self.params.slots_mut().iter_mut().zip(other.slots()) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "slot {} {:?} does not match {} {:?}",
                    src.name,
                    src.value.shape(),
                    dst.name,
                    dst.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

const MAGIC: &[u8; 8] = b"ML2CKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Header stored with every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: EncoderConfig,
    /// Training iteration the parameters were captured at.
    pub iteration: usize,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes the model as: magic, u32 version, u32-length-prefixed JSON
/// header, u32 slot count, then per slot a length-prefixed name, u32 rows,
/// u32 cols and little-endian f64 values. All integers are little-endian.
pub fn checkpoint_bytes(model: &EmbeddingModel, iteration: usize) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        config: model.config.clone(),
        iteration,
    };
    let header = serde_json::to_vec(&meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, header.len())?;
    out.extend_from_slice(&header);
    put_u32(&mut out, model.params.len())?;
    for slot in model.params.slots() {
        put_u32(&mut out, slot.name.len())?;
        out.extend_from_slice(slot.name.as_bytes());
        put_u32(&mut out, slot.value.rows())?;
        put_u32(&mut out, slot.value.cols())?;
        for v in slot.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn model_from_checkpoint_bytes(buf: &[u8]) -> Result<(EmbeddingModel, CheckpointMeta)> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = c.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let header_len = c.u32()?;
    let meta: CheckpointMeta = serde_json::from_slice(c.take(header_len)?)?;
    let mut model = EmbeddingModel::new(meta.config.clone())?;
    let count = c.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = c.u32()?;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Checkpoint("slot name is not UTF-8".into()))?
            .to_string();
        let rows = c.u32()?;
        let cols = c.u32()?;
        let bytes = c.take(rows.saturating_mul(cols).saturating_mul(8))?;
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        store.insert(name, DenseMatrix::from_vec(rows, cols, data)?);
    }
    if c.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    model.load_values_from(&store)?;
    Ok((model, meta))
}

pub fn save_checkpoint(model: &EmbeddingModel, iteration: usize, path: impl AsRef<Path>) -> Result<()> {
    let bytes = checkpoint_bytes(model, iteration)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(EmbeddingModel, CheckpointMeta)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    model_from_checkpoint_bytes(&buf)
}
