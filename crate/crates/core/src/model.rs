//! Attention-pooled transformer regressor over token sequences.
//!
//! Pre-LN blocks with causal multi-head self-attention and a GELU MLP,
//! a final layer norm, a learned-query attention pooling over positions and
//! a two-layer MLP head producing one scalar. Gradients are computed by hand
//! in f64.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::textgen::PatternCorpus;

const LN_EPS: f64 = 1e-5;
const CHECKPOINT_MAGIC: &[u8; 4] = b"CGFM";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("empty token sequence")]
    EmptySequence,
    #[error("token id {id} outside vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("non-finite values in {tensor} (epoch {epoch}, step {step})")]
    NonFinite { tensor: String, epoch: usize, step: usize },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    /// Hidden width of the block MLPs and of the regression head.
    pub mlp_hidden: usize,
    pub max_sequence_length: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 50257,
            embed_dim: 128,
            num_heads: 4,
            num_blocks: 2,
            mlp_hidden: 512,
            max_sequence_length: 256,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.vocab_size == 0 || self.embed_dim == 0 || self.mlp_hidden == 0 || self.max_sequence_length == 0 {
            return bad("sizes must be positive".into());
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        Ok(())
    }

    /// Closed-form number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        let (v, s, d, m, l) = (
            self.vocab_size,
            self.max_sequence_length,
            self.embed_dim,
            self.mlp_hidden,
            self.num_blocks,
        );
        let block = 4 * d * d + 2 * d * m + 9 * d + m;
        v * d + s * d + l * block + 3 * d + d * m + 2 * m + 1
    }

    fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Train only the pooling query and the head.
    pub freezing: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            freezing: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

// Per-block tensor offsets.
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const QKV_W: usize = 2;
const QKV_B: usize = 3;
const OUT_W: usize = 4;
const OUT_B: usize = 5;
const LN2_G: usize = 6;
const LN2_B: usize = 7;
const FC_W: usize = 8;
const FC_B: usize = 9;
const PROJ_W: usize = 10;
const PROJ_B: usize = 11;
const PER_BLOCK: usize = 12;

const TOK: usize = 0;
const POS: usize = 1;

#[derive(Debug, Clone, Copy)]
struct Layout {
    blocks: usize,
}

impl Layout {
    fn block(&self, b: usize, k: usize) -> usize {
        2 + b * PER_BLOCK + k
    }
    fn lnf_g(&self) -> usize {
        2 + self.blocks * PER_BLOCK
    }
    fn lnf_b(&self) -> usize {
        self.lnf_g() + 1
    }
    fn query(&self) -> usize {
        self.lnf_g() + 2
    }
    fn head_w1(&self) -> usize {
        self.lnf_g() + 3
    }
    fn head_b1(&self) -> usize {
        self.lnf_g() + 4
    }
    fn head_w2(&self) -> usize {
        self.lnf_g() + 5
    }
    fn head_b2(&self) -> usize {
        self.lnf_g() + 6
    }
    fn count(&self) -> usize {
        self.lnf_g() + 7
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRegressor {
    config: ModelConfig,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
}

/// Gradients aligned with [`SequenceRegressor::tensors`].
pub type Gradients = Vec<Vec<f64>>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Mean loss over the training set before the first update.
    pub initial_loss: f64,
    /// Mean per-record loss seen during each epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean loss over the training set after the last update.
    pub final_loss: f64,
    pub trainable_parameters: usize,
}

/// Intermediate quantities of one forward pass, exposed for inspection.
#[derive(Debug, Clone)]
pub struct Inspection {
    pub prediction: f64,
    pub pooling_weights: Vec<f64>,
    /// `[block][head]` row-major `T x T` causal attention matrices.
    pub attention: Vec<Vec<Vec<f64>>>,
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

struct BlockCache {
    ln1: LnCache,
    a: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    o: Vec<f64>,
    ln2: LnCache,
    c: Vec<f64>,
    hpre: Vec<f64>,
    hact: Vec<f64>,
}

struct Cache {
    len: usize,
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    z: Vec<f64>,
    pool: Vec<f64>,
    pooled: Vec<f64>,
    h1: Vec<f64>,
    g1: Vec<f64>,
    out: f64,
}

const GELU_C: f64 = 0.797_884_560_802_865_4;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `out[r] = bias + a[r] * w` for `a: rows x k`, `w: k x n`.
fn linear(a: &[f64], rows: usize, k: usize, w: &[f64], bias: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        let o = &mut out[r * n..(r + 1) * n];
        o.copy_from_slice(bias);
        for (i, &x) in a[r * k..(r + 1) * k].iter().enumerate() {
            if x != 0.0 {
                for (oj, wj) in o.iter_mut().zip(&w[i * n..(i + 1) * n]) {
                    *oj += x * wj;
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients of [`linear`] and returns the
/// input gradient when `need_input` is set.
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    a: &[f64],
    rows: usize,
    k: usize,
    w: &[f64],
    n: usize,
    dout: &[f64],
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
    need_input: bool,
) -> Option<Vec<f64>> {
    if let Some(dw) = dw {
        for r in 0..rows {
            let d = &dout[r * n..(r + 1) * n];
            for (i, &x) in a[r * k..(r + 1) * k].iter().enumerate() {
                if x != 0.0 {
                    for (g, dj) in dw[i * n..(i + 1) * n].iter_mut().zip(d) {
                        *g += x * dj;
                    }
                }
            }
        }
    }
    if let Some(db) = db {
        for r in 0..rows {
            for (g, dj) in db.iter_mut().zip(&dout[r * n..(r + 1) * n]) {
                *g += dj;
            }
        }
    }
    need_input.then(|| {
        let mut da = vec![0.0; rows * k];
        for r in 0..rows {
            let d = &dout[r * n..(r + 1) * n];
            for i in 0..k {
                da[r * k + i] = w[i * n..(i + 1) * n].iter().zip(d).map(|(a, b)| a * b).sum();
            }
        }
        da
    })
}

fn layer_norm(x: &[f64], rows: usize, d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, LnCache) {
    let mut y = vec![0.0; rows * d];
    let mut xhat = vec![0.0; rows * d];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = s;
        for j in 0..d {
            let h = (row[j] - mean) * s;
            xhat[r * d + j] = h;
            y[r * d + j] = g[j] * h + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    cache: &LnCache,
    rows: usize,
    d: usize,
    g: &[f64],
    dy: &[f64],
    mut grads: Option<(&mut [f64], &mut [f64])>,
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * d];
    for r in 0..rows {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        if let Some((dg, db)) = grads.as_mut() {
            for j in 0..d {
                dg[j] += dyr[j] * xh[j];
                db[j] += dyr[j];
            }
        }
        let dxhat: Vec<f64> = (0..d).map(|j| dyr[j] * g[j]).collect();
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            dx[r * d + j] = cache.rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

fn split_two(grads: &mut [Vec<f64>], i: usize, j: usize) -> (&mut [f64], &mut [f64]) {
    assert!(i < j);
    let (lo, hi) = grads.split_at_mut(j);
    (&mut lo[i], &mut hi[0])
}

impl SequenceRegressor {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (v, s, d, m) = (
            config.vocab_size,
            config.max_sequence_length,
            config.embed_dim,
            config.mlp_hidden,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut tensors = Vec::new();
        let mut uniform = |name: String, shape: Vec<usize>, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor { name, shape, data }
        };
        let fill = |name: String, shape: Vec<usize>, value: f64| {
            let n = shape.iter().product();
            Tensor {
                name,
                shape,
                data: vec![value; n],
            }
        };
        tensors.push(uniform("tok_emb".into(), vec![v, d], d));
        tensors.push(uniform("pos_emb".into(), vec![s, d], d));
        for b in 0..config.num_blocks {
            let p = |n: &str| format!("block{b}.{n}");
            tensors.push(fill(p("ln1.gamma"), vec![d], 1.0));
            tensors.push(fill(p("ln1.beta"), vec![d], 0.0));
            tensors.push(uniform(p("attn.qkv.weight"), vec![d, 3 * d], d));
            tensors.push(fill(p("attn.qkv.bias"), vec![3 * d], 0.0));
            tensors.push(uniform(p("attn.out.weight"), vec![d, d], d));
            tensors.push(fill(p("attn.out.bias"), vec![d], 0.0));
            tensors.push(fill(p("ln2.gamma"), vec![d], 1.0));
            tensors.push(fill(p("ln2.beta"), vec![d], 0.0));
            tensors.push(uniform(p("mlp.fc.weight"), vec![d, m], d));
            tensors.push(fill(p("mlp.fc.bias"), vec![m], 0.0));
            tensors.push(uniform(p("mlp.proj.weight"), vec![m, d], m));
            tensors.push(fill(p("mlp.proj.bias"), vec![d], 0.0));
        }
        tensors.push(fill("ln_f.gamma".into(), vec![d], 1.0));
        tensors.push(fill("ln_f.beta".into(), vec![d], 0.0));
        tensors.push(uniform("pool.query".into(), vec![d], d));
        tensors.push(uniform("head.fc1.weight".into(), vec![d, m], d));
        tensors.push(fill("head.fc1.bias".into(), vec![m], 0.0));
        tensors.push(uniform("head.fc2.weight".into(), vec![m], m));
        tensors.push(fill("head.fc2.bias".into(), vec![1], 0.0));
        debug_assert_eq!(
            tensors.len(),
            Layout {
                blocks: config.num_blocks
            }
            .count()
        );
        let trainable = vec![true; tensors.len()];
        Ok(Self {
            config,
            tensors,
            trainable,
        })
    }

    fn layout(&self) -> Layout {
        Layout {
            blocks: self.config.num_blocks,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.tensors[index].data
    }

    pub fn tensor_index(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn trainable(&self) -> &[bool] {
        &self.trainable
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.tensors
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(t, _)| t.data.len())
            .sum()
    }

    /// With freezing only the pooling query and the head stay trainable.
    pub fn set_freezing(&mut self, freezing: bool) {
        let first_free = self.layout().query();
        for (i, t) in self.trainable.iter_mut().enumerate() {
            *t = !freezing || i >= first_free;
        }
    }

    fn backbone_trainable(&self) -> bool {
        self.trainable[..self.layout().query()].iter().any(|&t| t)
    }

    /// Leading tokens are kept when a record exceeds the context length;
    /// slots are ordered by increasing lag, so these are the most recent.
    pub fn clip<'a>(&self, ids: &'a [u32]) -> &'a [u32] {
        &ids[..ids.len().min(self.config.max_sequence_length)]
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        match ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            Some(&id) => Err(ModelError::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    fn t(&self, i: usize) -> &[f64] {
        &self.tensors[i].data
    }

    /// Hidden states after the final layer norm.
    fn backbone(&self, ids: &[u32]) -> (Vec<BlockCache>, LnCache, Vec<f64>) {
        let d = self.config.embed_dim;
        let m = self.config.mlp_hidden;
        let h = self.config.num_heads;
        let dh = self.config.head_dim();
        let len = ids.len();
        assert!(len <= self.config.max_sequence_length, "sequence longer than context");
        let lay = self.layout();
        let tok = self.t(TOK);
        let pos = self.t(POS);
        let mut x = vec![0.0; len * d];
        for (t, &id) in ids.iter().enumerate() {
            let id = id as usize;
            for j in 0..d {
                x[t * d + j] = tok[id * d + j] + pos[t * d + j];
            }
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let mut caches = Vec::with_capacity(self.config.num_blocks);
        for b in 0..self.config.num_blocks {
            let p = |k| self.t(lay.block(b, k));
            let (a, ln1) = layer_norm(&x, len, d, p(LN1_G), p(LN1_B));
            let qkv = linear(&a, len, d, p(QKV_W), p(QKV_B), 3 * d);
            let mut probs = vec![0.0; h * len * len];
            let mut o = vec![0.0; len * d];
            for hd in 0..h {
                let off = hd * dh;
                for t in 0..len {
                    let q = &qkv[t * 3 * d + off..t * 3 * d + off + dh];
                    let row = &mut probs[(hd * len + t) * len..(hd * len + t) * len + t + 1];
                    for (u, s) in row.iter_mut().enumerate() {
                        let k = &qkv[u * 3 * d + d + off..u * 3 * d + d + off + dh];
                        *s = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    softmax_in_place(row);
                    let ot = &mut o[t * d + off..t * d + off + dh];
                    for (u, &pw) in row.iter().enumerate() {
                        let v = &qkv[u * 3 * d + 2 * d + off..u * 3 * d + 2 * d + off + dh];
                        for (oj, vj) in ot.iter_mut().zip(v) {
                            *oj += pw * vj;
                        }
                    }
                }
            }
            let y = linear(&o, len, d, p(OUT_W), p(OUT_B), d);
            for (xi, yi) in x.iter_mut().zip(&y) {
                *xi += yi;
            }
            let (c, ln2) = layer_norm(&x, len, d, p(LN2_G), p(LN2_B));
            let hpre = linear(&c, len, d, p(FC_W), p(FC_B), m);
            let hact: Vec<f64> = hpre.iter().map(|&v| gelu(v)).collect();
            let mo = linear(&hact, len, m, p(PROJ_W), p(PROJ_B), d);
            for (xi, yi) in x.iter_mut().zip(&mo) {
                *xi += yi;
            }
            caches.push(BlockCache {
                ln1,
                a,
                qkv,
                probs,
                o,
                ln2,
                c,
                hpre,
                hact,
            });
        }
        let (z, lnf) = layer_norm(&x, len, d, self.t(lay.lnf_g()), self.t(lay.lnf_b()));
        (caches, lnf, z)
    }

    fn pool_and_head(&self, z: Vec<f64>, len: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, f64) {
        let d = self.config.embed_dim;
        let m = self.config.mlp_hidden;
        let lay = self.layout();
        let q = self.t(lay.query());
        let scale = 1.0 / (d as f64).sqrt();
        let mut pool: Vec<f64> = (0..len)
            .map(|t| z[t * d..(t + 1) * d].iter().zip(q).map(|(a, b)| a * b).sum::<f64>() * scale)
            .collect();
        softmax_in_place(&mut pool);
        let mut pooled = vec![0.0; d];
        for (t, &w) in pool.iter().enumerate() {
            for (pj, zj) in pooled.iter_mut().zip(&z[t * d..(t + 1) * d]) {
                *pj += w * zj;
            }
        }
        let h1 = linear(&pooled, 1, d, self.t(lay.head_w1()), self.t(lay.head_b1()), m);
        let g1: Vec<f64> = h1.iter().map(|&v| gelu(v)).collect();
        let out = g1.iter().zip(self.t(lay.head_w2())).map(|(a, b)| a * b).sum::<f64>() + self.t(lay.head_b2())[0];
        (z, pool, pooled, h1, g1, out)
    }

    fn forward_cached(&self, ids: &[u32]) -> Cache {
        let (blocks, lnf, z) = self.backbone(ids);
        let len = ids.len();
        let (z, pool, pooled, h1, g1, out) = self.pool_and_head(z, len);
        Cache {
            len,
            blocks,
            lnf,
            z,
            pool,
            pooled,
            h1,
            g1,
            out,
        }
    }

    /// Scalar prediction for a token sequence (clipped to the context length).
    pub fn forward(&self, ids: &[u32]) -> Result<f64> {
        let ids = self.clip(ids);
        self.check_ids(ids)?;
        Ok(self.forward_cached(ids).out)
    }

    pub fn inspect(&self, ids: &[u32]) -> Result<Inspection> {
        let ids = self.clip(ids);
        self.check_ids(ids)?;
        let c = self.forward_cached(ids);
        let len = c.len;
        let attention = c
            .blocks
            .iter()
            .map(|b| {
                (0..self.config.num_heads)
                    .map(|h| b.probs[h * len * len..(h + 1) * len * len].to_vec())
                    .collect()
            })
            .collect();
        Ok(Inspection {
            prediction: c.out,
            pooling_weights: c.pool,
            attention,
        })
    }

    pub fn zero_gradients(&self) -> Gradients {
        self.tensors
            .iter()
            .zip(&self.trainable)
            .map(|(t, &on)| if on { vec![0.0; t.data.len()] } else { Vec::new() })
            .collect()
    }

    /// Accumulates `dloss/dout * dout/dparams` for one record.
    fn backward(&self, cache: &Cache, ids: &[u32], dout: f64, grads: &mut Gradients) {
        let d = self.config.embed_dim;
        let m = self.config.mlp_hidden;
        let len = cache.len;
        let lay = self.layout();
        let tr = |i: usize| self.trainable[i];

        // head
        if tr(lay.head_b2()) {
            grads[lay.head_b2()][0] += dout;
        }
        if tr(lay.head_w2()) {
            for (g, &a) in grads[lay.head_w2()].iter_mut().zip(&cache.g1) {
                *g += dout * a;
            }
        }
        let dh1: Vec<f64> = self
            .t(lay.head_w2())
            .iter()
            .zip(&cache.h1)
            .map(|(&w, &h)| dout * w * gelu_grad(h))
            .collect();
        let (w1i, b1i) = (lay.head_w1(), lay.head_b1());
        let (dw1, db1) = split_two(grads, w1i, b1i);
        let dpooled = linear_backward(
            &cache.pooled,
            1,
            d,
            self.t(w1i),
            m,
            &dh1,
            tr(w1i).then_some(dw1),
            tr(b1i).then_some(db1),
            true,
        )
        .expect("input gradient requested");

        // pooling
        let scale = 1.0 / (d as f64).sqrt();
        let q = self.t(lay.query());
        let dw: Vec<f64> = (0..len)
            .map(|t| {
                cache.z[t * d..(t + 1) * d]
                    .iter()
                    .zip(&dpooled)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let avg: f64 = cache.pool.iter().zip(&dw).map(|(a, b)| a * b).sum();
        let dscore: Vec<f64> = cache.pool.iter().zip(&dw).map(|(p, g)| p * (g - avg)).collect();
        if tr(lay.query()) {
            let dq = &mut grads[lay.query()];
            for t in 0..len {
                for j in 0..d {
                    dq[j] += dscore[t] * cache.z[t * d + j] * scale;
                }
            }
        }
        if !self.backbone_trainable() {
            return;
        }
        let mut dz = vec![0.0; len * d];
        for t in 0..len {
            for j in 0..d {
                dz[t * d + j] = cache.pool[t] * dpooled[j] + dscore[t] * q[j] * scale;
            }
        }
        let lnf_grads = (tr(lay.lnf_g()) && tr(lay.lnf_b())).then(|| split_two(grads, lay.lnf_g(), lay.lnf_b()));
        let mut dx = layer_norm_backward(&cache.lnf, len, d, self.t(lay.lnf_g()), &dz, lnf_grads);

        let h = self.config.num_heads;
        let dh = self.config.head_dim();
        let ascale = 1.0 / (dh as f64).sqrt();
        for b in (0..self.config.num_blocks).rev() {
            let bc = &cache.blocks[b];
            let idx = |k| lay.block(b, k);
            let p = |k| self.t(lay.block(b, k));

            // MLP
            let (dwp, dbp) = split_two(grads, idx(PROJ_W), idx(PROJ_B));
            let dhact = linear_backward(&bc.hact, len, m, p(PROJ_W), d, &dx, Some(dwp), Some(dbp), true).unwrap();
            let dhpre: Vec<f64> = dhact.iter().zip(&bc.hpre).map(|(g, &x)| g * gelu_grad(x)).collect();
            let (dwf, dbf) = split_two(grads, idx(FC_W), idx(FC_B));
            let dc = linear_backward(&bc.c, len, d, p(FC_W), m, &dhpre, Some(dwf), Some(dbf), true).unwrap();
            let g2 = split_two(grads, idx(LN2_G), idx(LN2_B));
            let dmid = layer_norm_backward(&bc.ln2, len, d, p(LN2_G), &dc, Some(g2));
            for (a, b) in dx.iter_mut().zip(&dmid) {
                *a += b;
            }

            // attention
            let (dwo, dbo) = split_two(grads, idx(OUT_W), idx(OUT_B));
            let d_o = linear_backward(&bc.o, len, d, p(OUT_W), d, &dx, Some(dwo), Some(dbo), true).unwrap();
            let mut dqkv = vec![0.0; len * 3 * d];
            for hd in 0..h {
                let off = hd * dh;
                for t in 0..len {
                    let row = &bc.probs[(hd * len + t) * len..(hd * len + t) * len + t + 1];
                    let dot = &d_o[t * d + off..t * d + off + dh];
                    let dp: Vec<f64> = (0..=t)
                        .map(|u| {
                            let v = &bc.qkv[u * 3 * d + 2 * d + off..u * 3 * d + 2 * d + off + dh];
                            dot.iter().zip(v).map(|(a, b)| a * b).sum()
                        })
                        .collect();
                    let avg: f64 = row.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for u in 0..=t {
                        let ds = row[u] * (dp[u] - avg) * ascale;
                        for j in 0..dh {
                            let qi = t * 3 * d + off + j;
                            let ki = u * 3 * d + d + off + j;
                            let vi = u * 3 * d + 2 * d + off + j;
                            dqkv[qi] += ds * bc.qkv[ki];
                            dqkv[ki] += ds * bc.qkv[qi];
                            dqkv[vi] += row[u] * dot[j];
                        }
                    }
                }
            }
            let (dwq, dbq) = split_two(grads, idx(QKV_W), idx(QKV_B));
            let da = linear_backward(&bc.a, len, d, p(QKV_W), 3 * d, &dqkv, Some(dwq), Some(dbq), true).unwrap();
            let g1 = split_two(grads, idx(LN1_G), idx(LN1_B));
            let din = layer_norm_backward(&bc.ln1, len, d, p(LN1_G), &da, Some(g1));
            for (a, b) in dx.iter_mut().zip(&din) {
                *a += b;
            }
        }

        let (dtok, dpos) = split_two(grads, TOK, POS);
        for (t, &id) in ids.iter().enumerate() {
            let id = id as usize;
            for j in 0..d {
                dtok[id * d + j] += dx[t * d + j];
                dpos[t * d + j] += dx[t * d + j];
            }
        }
    }

    /// Mean squared error over a batch and its gradient with respect to
    /// every trainable tensor. Frozen tensors get an all-zero gradient.
    pub fn gradients(&self, batch: &[(&[u32], f64)]) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(ModelError::EmptyCorpus);
        }
        self.assert_backbone_all_or_nothing();
        let mut grads = self.zero_gradients();
        let mut loss = 0.0;
        let n = batch.len() as f64;
        for &(ids, target) in batch {
            let ids = self.clip(ids);
            self.check_ids(ids)?;
            let cache = self.forward_cached(ids);
            loss += mse(cache.out, target) / n;
            self.backward(&cache, ids, 2.0 * (cache.out - target) / n, &mut grads);
        }
        for (g, t) in grads.iter_mut().zip(&self.tensors) {
            if g.is_empty() {
                *g = vec![0.0; t.data.len()];
            }
        }
        Ok((loss, grads))
    }

    fn assert_backbone_all_or_nothing(&self) {
        let q = self.layout().query();
        let backbone = &self.trainable[..q];
        assert!(
            backbone.iter().all(|&t| t) || backbone.iter().all(|&t| !t),
            "backbone tensors must be all trainable or all frozen"
        );
    }

    /// Mean squared error of the model over `(tokens, target)` pairs.
    pub fn mean_loss(&self, batch: &[(&[u32], f64)]) -> Result<f64> {
        let mut total = 0.0;
        for &(ids, target) in batch {
            total += mse(self.forward(ids)?, target);
        }
        Ok(total / batch.len().max(1) as f64)
    }

    pub fn train(&mut self, corpus: &PatternCorpus, cfg: &TrainConfig) -> Result<TrainTrace> {
        if corpus.is_empty() {
            return Err(ModelError::EmptyCorpus);
        }
        if cfg.epochs == 0 || cfg.batch_size == 0 {
            return Err(ModelError::InvalidConfig(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        let truncated = corpus
            .records
            .iter()
            .filter(|r| r.tokens.len() > self.config.max_sequence_length)
            .count();
        if truncated > 0 {
            log::warn!(
                "{truncated} records exceed {} tokens and keep only their leading tokens",
                self.config.max_sequence_length
            );
        }
        self.set_freezing(cfg.freezing);
        let data: Vec<(&[u32], f64)> = corpus
            .records
            .iter()
            .map(|r| (self.clip(&r.tokens), r.target))
            .collect();
        for (ids, _) in &data {
            self.check_ids(ids)?;
        }

        // With a frozen backbone the final hidden states never change.
        let frozen_states: Option<Vec<Vec<f64>>> =
            (!self.backbone_trainable()).then(|| data.iter().map(|(ids, _)| self.backbone(ids).2).collect());

        let initial_loss = self.mean_loss(&data)?;
        let mut adam = Adam::new(self, cfg.learning_rate);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let n = chunk.len() as f64;
                let mut grads = self.zero_gradients();
                for &i in chunk {
                    let (ids, target) = data[i];
                    let cache = match &frozen_states {
                        Some(states) => {
                            let (z, pool, pooled, h1, g1, out) = self.pool_and_head(states[i].clone(), ids.len());
                            Cache {
                                len: ids.len(),
                                blocks: Vec::new(),
                                lnf: LnCache {
                                    xhat: Vec::new(),
                                    rstd: Vec::new(),
                                },
                                z,
                                pool,
                                pooled,
                                h1,
                                g1,
                                out,
                            }
                        }
                        None => self.forward_cached(ids),
                    };
                    epoch_loss += mse(cache.out, target);
                    self.backward(&cache, ids, 2.0 * (cache.out - target) / n, &mut grads);
                }
                if let Some(bad) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
                    return Err(ModelError::NonFinite {
                        tensor: format!("gradient of {}", self.tensors[bad].name),
                        epoch,
                        step,
                    });
                }
                adam.step(self, &grads);
                if let Some(bad) = self.first_non_finite() {
                    return Err(ModelError::NonFinite {
                        tensor: bad.to_string(),
                        epoch,
                        step,
                    });
                }
            }
            let mean = epoch_loss / data.len() as f64;
            log::debug!("epoch {epoch}: loss {mean:.6}");
            epoch_losses.push(mean);
        }
        let final_loss = self.mean_loss(&data)?;
        Ok(TrainTrace {
            initial_loss,
            epoch_losses,
            final_loss,
            trainable_parameters: self.trainable_parameter_count(),
        })
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|t| t.data.iter().any(|v| !v.is_finite()))
            .map(|t| t.name.as_str())
    }

    /// Forecasts for every record, mapped through `inverse` to original units.
    pub fn predict(&self, corpus: &PatternCorpus, inverse: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
        corpus
            .records
            .iter()
            .map(|r| self.forward(&r.tokens).map(&inverse))
            .collect()
    }

    /// SHA-256 over tensor names and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tensors {
            h.update(t.name.as_bytes());
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn tensor_checksum(&self, index: usize) -> String {
        let mut h = Sha256::new();
        for v in &self.tensors[index].data {
            h.update(v.to_le_bytes());
        }
        hex(&h.finalize())
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let header = CheckpointHeader {
            config: self.config,
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorHeader {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
            trainable: self.trainable.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for t in &self.tensors {
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::Checkpoint("missing CGFM magic".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
        }
        let mut long = [0u8; 8];
        r.read_exact(&mut long)?;
        let mut json = vec![0u8; u64::from_le_bytes(long) as usize];
        r.read_exact(&mut json)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&json).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut model = Self::new(header.config)?;
        if header.tensors.len() != model.tensors.len() || header.trainable.len() != model.tensors.len() {
            return Err(ModelError::Checkpoint("tensor count does not match config".into()));
        }
        for (t, h) in model.tensors.iter_mut().zip(&header.tensors) {
            if t.name != h.name || t.shape != h.shape {
                return Err(ModelError::Checkpoint(format!(
                    "unexpected tensor {} {:?}",
                    h.name, h.shape
                )));
            }
            for v in t.data.iter_mut() {
                r.read_exact(&mut long)?;
                *v = f64::from_le_bytes(long);
            }
        }
        model.trainable = header.trainable;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_checkpoint(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(f))
    }
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    tensors: Vec<TensorHeader>,
    trainable: Vec<bool>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn mse(prediction: f64, target: f64) -> f64 {
    (prediction - target).powi(2)
}

pub fn batch_mse(predictions: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(predictions.len(), targets.len());
    predictions.iter().zip(targets).map(|(&p, &t)| mse(p, t)).sum::<f64>() / predictions.len().max(1) as f64
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    fn new(model: &SequenceRegressor, lr: f64) -> Self {
        let zeros = model.zero_gradients();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn step(&mut self, model: &mut SequenceRegressor, grads: &Gradients) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, t) in model.tensors.iter_mut().enumerate() {
            if !model.trainable[i] {
                continue;
            }
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for j in 0..t.data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                t.data[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textgen::PatternRecord;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            embed_dim: 8,
            num_heads: 2,
            num_blocks: 2,
            mlp_hidden: 12,
            max_sequence_length: 16,
            seed: 3,
        }
    }

    fn corpus(records: Vec<(Vec<u32>, f64)>) -> PatternCorpus {
        PatternCorpus {
            records: records
                .into_iter()
                .enumerate()
                .map(|(t, (tokens, target))| PatternRecord {
                    t,
                    text: String::new(),
                    target,
                    slots: vec![],
                    tokens,
                })
                .collect(),
        }
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig {
            embed_dim: 64,
            num_heads: 5,
            ..small()
        };
        assert!(matches!(SequenceRegressor::new(bad), Err(ModelError::InvalidConfig(_))));
    }

    #[test]
    fn parameter_count_by_hand() {
        // independent count from the tensor shapes listed per layer
        let c = small();
        let (v, s, d, m) = (20, 16, 8, 12);
        let per_block = (d + d) + (d * 3 * d + 3 * d) + (d * d + d) + (d + d) + (d * m + m) + (m * d + d);
        let expected = v * d + s * d + 2 * per_block + (d + d) + d + (d * m + m) + (m + 1);
        assert_eq!(c.parameter_count(), expected);
        assert_eq!(SequenceRegressor::new(c).unwrap().parameter_count(), expected);
        assert_eq!(
            ModelConfig::default().parameter_count(),
            SequenceRegressor::new(ModelConfig::default())
                .unwrap()
                .parameter_count()
        );
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = SequenceRegressor::new(small()).unwrap();
        let b = SequenceRegressor::new(small()).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let c = SequenceRegressor::new(ModelConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn loss_examples() {
        assert_eq!(mse(1.5, 1.5), 0.0);
        assert_eq!(mse(3.0, 1.0), 4.0);
        assert_eq!(batch_mse(&[0.0, 2.0], &[0.0, 0.0]), 2.0);
    }

    #[test]
    fn single_token_pools_with_weight_one() {
        let m = SequenceRegressor::new(small()).unwrap();
        let ins = m.inspect(&[5]).unwrap();
        assert_eq!(ins.pooling_weights, vec![1.0]);
    }

    #[test]
    fn weights_are_distributions() {
        let m = SequenceRegressor::new(small()).unwrap();
        let ins = m.inspect(&[1, 4, 4, 9, 0, 13]).unwrap();
        assert!((ins.pooling_weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(ins.pooling_weights.iter().all(|&w| w >= 0.0));
        let len = 6;
        for block in &ins.attention {
            for head in block {
                for t in 0..len {
                    let row = &head[t * len..(t + 1) * len];
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    assert!(row.iter().all(|&w| w >= 0.0));
                    assert!(row[t + 1..].iter().all(|&w| w == 0.0));
                }
            }
        }
    }

    #[test]
    fn order_matters() {
        let m = SequenceRegressor::new(small()).unwrap();
        let a = m.forward(&[1, 2, 3, 4]).unwrap();
        let b = m.forward(&[4, 3, 2, 1]).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, m.forward(&[1, 2, 3, 4]).unwrap());
    }

    #[test]
    fn zero_network_outputs_head_bias() {
        let mut m = SequenceRegressor::new(small()).unwrap();
        for t in &mut m.tensors {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let b = m.tensor_index("head.fc2.bias").unwrap();
        m.tensors[b].data[0] = 0.37;
        assert_eq!(m.forward(&[3, 1, 7]).unwrap(), 0.37);
        assert_eq!(m.forward(&[0]).unwrap(), 0.37);
        let c = corpus(vec![(vec![1, 2], 0.0), (vec![5], 1.0)]);
        let preds = m.predict(&c, |z| 10.0 + 2.0 * z).unwrap();
        assert_eq!(preds, vec![10.74, 10.74]);
    }

    #[test]
    fn input_errors() {
        let m = SequenceRegressor::new(small()).unwrap();
        assert!(matches!(m.forward(&[]), Err(ModelError::EmptySequence)));
        assert!(matches!(
            m.forward(&[20]),
            Err(ModelError::TokenOutOfRange { id: 20, .. })
        ));
    }

    #[test]
    fn long_sequences_keep_leading_tokens() {
        let m = SequenceRegressor::new(small()).unwrap();
        let long: Vec<u32> = (0..40).map(|i| i % 20).collect();
        assert_eq!(m.forward(&long).unwrap(), m.forward(&long[..16]).unwrap());
    }

    fn finite_difference_check(m: &mut SequenceRegressor, batch: &[(Vec<u32>, f64)], per_tensor: usize, seed: u64) {
        let refs: Vec<(&[u32], f64)> = batch.iter().map(|(t, y)| (t.as_slice(), *y)).collect();
        let (_, grads) = m.gradients(&refs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 1e-5;
        for ti in 0..m.tensors.len() {
            for _ in 0..per_tensor {
                let j = rng.random_range(0..m.tensors[ti].data.len());
                let orig = m.tensors[ti].data[j];
                m.tensors[ti].data[j] = orig + h;
                let up = m.mean_loss(&refs).unwrap();
                m.tensors[ti].data[j] = orig - h;
                let down = m.mean_loss(&refs).unwrap();
                m.tensors[ti].data[j] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads[ti][j];
                let scale = analytic.abs().max(numeric.abs());
                let rel = if scale == 0.0 {
                    0.0
                } else {
                    (analytic - numeric).abs() / scale
                };
                assert!(
                    rel < 1e-4 || (analytic - numeric).abs() < 1e-9,
                    "{}[{j}]: analytic {analytic} numeric {numeric}",
                    m.tensors[ti].name
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = SequenceRegressor::new(ModelConfig {
            vocab_size: 6,
            ..small()
        })
        .unwrap();
        let batch = vec![(vec![1, 3, 5, 0, 2], 0.7), (vec![4, 4, 1], -1.2), (vec![2], 0.1)];
        finite_difference_check(&mut m, &batch, 12, 1);
    }

    #[test]
    fn duplicated_batch_keeps_gradients() {
        let m = SequenceRegressor::new(small()).unwrap();
        let a: Vec<(&[u32], f64)> = vec![(&[1, 2, 3][..], 0.5), (&[7, 7][..], -0.3)];
        let mut b = a.clone();
        b.extend(a.clone());
        let (la, ga) = m.gradients(&a).unwrap();
        let (lb, gb) = m.gradients(&b).unwrap();
        assert!((la - lb).abs() < 1e-12);
        for (x, y) in ga.iter().zip(&gb) {
            for (u, v) in x.iter().zip(y) {
                assert!((u - v).abs() < 1e-12 * (1.0 + u.abs()));
            }
        }
    }

    #[test]
    fn frozen_gradients_are_zero() {
        let mut m = SequenceRegressor::new(small()).unwrap();
        let full = m.trainable_parameter_count();
        m.set_freezing(true);
        assert!(m.trainable_parameter_count() < full);
        let (_, g) = m.gradients(&[(&[1, 2, 3][..], 0.5)]).unwrap();
        assert!(g[TOK].iter().all(|&v| v == 0.0));
        let q = m.tensor_index("pool.query").unwrap();
        assert!(g[q].iter().any(|&v| v != 0.0));
    }

    fn linear_signal_corpus(n: usize, seed: u64) -> PatternCorpus {
        // the target is a linear function of the first token
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        corpus(
            (0..n)
                .map(|_| {
                    let a = rng.random_range(0..10u32);
                    let b = rng.random_range(10..20u32);
                    (vec![a, b], (a as f64 - 4.5) / 3.0)
                })
                .collect(),
        )
    }

    #[test]
    fn training_halves_loss_and_is_reproducible() {
        let data = linear_signal_corpus(200, 9);
        let cfg = TrainConfig {
            epochs: 20,
            ..TrainConfig::default()
        };
        let mut a = SequenceRegressor::new(small()).unwrap();
        let trace = a.train(&data, &cfg).unwrap();
        assert_eq!(trace.epoch_losses.len(), 20);
        assert!(trace.final_loss <= 0.5 * trace.initial_loss, "{trace:?}");
        let mut b = SequenceRegressor::new(small()).unwrap();
        b.train(&data, &cfg).unwrap();
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn freezing_leaves_backbone_untouched() {
        let data = linear_signal_corpus(50, 2);
        let mut m = SequenceRegressor::new(small()).unwrap();
        let before: Vec<String> = (0..m.tensors.len()).map(|i| m.tensor_checksum(i)).collect();
        let cfg = TrainConfig {
            epochs: 3,
            freezing: true,
            ..TrainConfig::default()
        };
        m.train(&data, &cfg).unwrap();
        let q = m.tensor_index("pool.query").unwrap();
        for (i, cs) in before.iter().enumerate() {
            if i < q {
                assert_eq!(&m.tensor_checksum(i), cs, "{}", m.tensors[i].name);
            }
        }
        assert_ne!(m.tensor_checksum(q + 1), before[q + 1]);
    }

    #[test]
    fn frozen_training_matches_uncached_gradients() {
        // the cached-backbone path must take the same steps as plain gradients
        let data = linear_signal_corpus(8, 4);
        let mut a = SequenceRegressor::new(small()).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            freezing: true,
            ..TrainConfig::default()
        };
        a.train(&data, &cfg).unwrap();
        let mut b = SequenceRegressor::new(small()).unwrap();
        b.set_freezing(true);
        let refs: Vec<(&[u32], f64)> = data.records.iter().map(|r| (r.tokens.as_slice(), r.target)).collect();
        let (_, g) = b.gradients(&refs).unwrap();
        let mut adam = Adam::new(&b, cfg.learning_rate);
        let g: Gradients = g
            .into_iter()
            .zip(&b.trainable)
            .map(|(g, &t)| if t { g } else { Vec::new() })
            .collect();
        adam.step(&mut b, &g);
        for (x, y) in a.tensors.iter().zip(&b.tensors) {
            for (u, v) in x.data.iter().zip(&y.data) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nan_guard_names_tensor() {
        let data = linear_signal_corpus(10, 1);
        let mut m = SequenceRegressor::new(small()).unwrap();
        let i = m.tensor_index("block1.mlp.fc.weight").unwrap();
        m.tensors[i].data[0] = f64::NAN;
        let err = m.train(&data, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("non-finite"), "{err}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = SequenceRegressor::new(small()).unwrap();
        m.set_freezing(true);
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"CGFM");
        let back = SequenceRegressor::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.checksum(), m.checksum());
        buf[0] = b'X';
        assert!(SequenceRegressor::read_checkpoint(buf.as_slice()).is_err());
    }
}
