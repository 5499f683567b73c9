//! Tiny causal transformer student with a token head and a detachable
//! multi-position byte head. Gradients are derived by hand; every tensor
//! lives in one flat parameter vector so optimizers, clipping, freezing and
//! checkpointing can treat the model uniformly.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LanguageModel, TokenDistribution};
use crate::distill::LossBreakdown;
use crate::error::{BldError, Result};
use crate::tokenizer::{TokenId, Vocabulary};

/// Special slots of the 260-way byte vocabulary, after the 256 byte values.
pub const BYTE_SLOT_BOS: usize = 256;
pub const BYTE_SLOT_EOS: usize = 257;
pub const BYTE_SLOT_PAD: usize = 258;
pub const BYTE_SLOT_OOV: usize = 259;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    /// Rows of the embedding and width of the token head: content tokens
    /// plus end-of-sequence.
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub n_byte_heads: usize,
    pub byte_vocab_size: usize,
    pub seed: u64,
}

impl StudentConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 128,
            n_byte_heads: 10,
            byte_vocab_size: 260,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(BldError::Config(m));
        if self.vocab_size < 2 || self.d_model == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return fail(format!("degenerate student dimensions: {self:?}"));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_byte_heads == 0 {
            return fail("n_byte_heads must be positive".into());
        }
        if self.byte_vocab_size <= BYTE_SLOT_EOS {
            return fail(format!(
                "byte vocabulary of {} cannot hold 256 bytes plus the end-of-sequence slot",
                self.byte_vocab_size
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Indices {
    tok_embed: usize,
    pos_embed: usize,
    layers: Vec<LayerIdx>,
    lnf_g: usize,
    lnf_b: usize,
    head_w: usize,
    head_b: usize,
    byte_w: Option<usize>,
    byte_b: Option<usize>,
}

fn build_layout(c: &StudentConfig, byte_head: bool) -> (Vec<ParamSpec>, Indices) {
    let mut specs: Vec<ParamSpec> = Vec::new();
    let mut add = |name: String, shape: Vec<usize>| {
        let offset = specs.last().map_or(0, |p: &ParamSpec| p.offset + p.len());
        specs.push(ParamSpec {
            name,
            shape,
            offset,
        });
        specs.len() - 1
    };
    let d = c.d_model;
    let tok_embed = add("tok_embed".into(), vec![c.vocab_size, d]);
    let pos_embed = add("pos_embed".into(), vec![c.max_seq_len, d]);
    let layers = (0..c.n_layers)
        .map(|l| LayerIdx {
            ln1_g: add(format!("layers.{l}.ln1.gain"), vec![d]),
            ln1_b: add(format!("layers.{l}.ln1.bias"), vec![d]),
            wq: add(format!("layers.{l}.attn.q_proj"), vec![d, d]),
            wk: add(format!("layers.{l}.attn.k_proj"), vec![d, d]),
            wv: add(format!("layers.{l}.attn.v_proj"), vec![d, d]),
            wo: add(format!("layers.{l}.attn.o_proj"), vec![d, d]),
            ln2_g: add(format!("layers.{l}.ln2.gain"), vec![d]),
            ln2_b: add(format!("layers.{l}.ln2.bias"), vec![d]),
            w1: add(format!("layers.{l}.mlp.up_proj"), vec![d, c.d_ff]),
            b1: add(format!("layers.{l}.mlp.up_bias"), vec![c.d_ff]),
            w2: add(format!("layers.{l}.mlp.down_proj"), vec![c.d_ff, d]),
            b2: add(format!("layers.{l}.mlp.down_bias"), vec![d]),
        })
        .collect();
    let lnf_g = add("ln_f.gain".into(), vec![d]);
    let lnf_b = add("ln_f.bias".into(), vec![d]);
    let head_w = add("token_head.weight".into(), vec![d, c.vocab_size]);
    let head_b = add("token_head.bias".into(), vec![c.vocab_size]);
    // One independent d x V_b projection per byte position, stacked.
    let (byte_w, byte_b) = if byte_head {
        (
            Some(add(
                "byte_head.weight".into(),
                vec![c.n_byte_heads, d, c.byte_vocab_size],
            )),
            Some(add(
                "byte_head.bias".into(),
                vec![c.n_byte_heads, c.byte_vocab_size],
            )),
        )
    } else {
        (None, None)
    };
    let idx = Indices {
        tok_embed,
        pos_embed,
        layers,
        lnf_g,
        lnf_b,
        head_w,
        head_b,
        byte_w,
        byte_b,
    };
    (specs, idx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    config: StudentConfig,
    specs: Vec<ParamSpec>,
    idx: Indices,
    params: Vec<f64>,
}

/// Logits for every input position. `byte_logits[[l, j, v]]` scores byte
/// value (or special slot) `v` at offset `j` of the token following
/// position `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentOutputs {
    pub token_logits: Array2<f64>,
    pub byte_logits: Option<Array3<f64>>,
}

/// Flat gradient vector, laid out exactly like the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    values: Vec<f64>,
}

impl GradientSet {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Gradient of a scalar loss with respect to the model outputs of one
/// sequence. A missing byte gradient means the loss ignores the byte head.
#[derive(Debug, Clone)]
pub struct OutputGrad {
    pub breakdown: LossBreakdown,
    pub d_token_logits: Array2<f64>,
    pub d_byte_logits: Option<Array3<f64>>,
}

/// A loss over the outputs of each sequence of a batch.
pub trait SequenceLoss: Sync {
    fn evaluate(&self, index: usize, outputs: &StudentOutputs) -> Result<OutputGrad>;

    /// Which byte-head slots the loss reads for sequence `index`.
    fn byte_slots(&self, index: usize) -> ByteSlots {
        let _ = index;
        ByteSlots::All
    }
}

/// Byte-head slots to evaluate. Slots left out are reported as zero logits
/// and must receive zero gradient.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ByteSlots {
    None,
    All,
    /// The first `n` heads at each position.
    PerPosition(Vec<usize>),
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

struct LayerCache {
    ln1: LnCache,
    h: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LnCache,
    h2: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
}

struct ForwardCache {
    tokens: Vec<TokenId>,
    byte_slots: ByteSlots,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    hf: Array2<f64>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

fn layer_norm(x: &Array2<f64>, gain: &[f64], bias: &[f64]) -> (Array2<f64>, LnCache) {
    let (n, d) = x.dim();
    let mut xhat = Array2::zeros((n, d));
    let mut rstd = Array1::zeros(n);
    let mut y = Array2::zeros((n, d));
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let xh = (row[j] - mean) * r;
            xhat[[i, j]] = xh;
            y[[i, j]] = xh * gain[j] + bias[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gain: &[f64],
) -> (Array2<f64>, Vec<f64>, Vec<f64>) {
    let (n, d) = dy.dim();
    let mut dx = Array2::zeros((n, d));
    let mut dgain = vec![0.0; d];
    let mut dbias = vec![0.0; d];
    for i in 0..n {
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            let g = dy[[i, j]];
            let xh = cache.xhat[[i, j]];
            dgain[j] += g * xh;
            dbias[j] += g;
            let dxh = g * gain[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh;
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for j in 0..d {
            let dxh = dy[[i, j]] * gain[j];
            dx[[i, j]] = cache.rstd[i] * (dxh - mean_dxhat - cache.xhat[[i, j]] * mean_dxhat_xhat);
        }
    }
    (dx, dgain, dbias)
}

fn add_row_vector(m: &mut Array2<f64>, v: &[f64]) {
    for mut row in m.rows_mut() {
        for (x, b) in row.iter_mut().zip(v) {
            *x += b;
        }
    }
}

impl StudentModel {
    /// Freshly initialized model with a byte head. Initial values are
    /// rounded to `f32` so that a checkpoint of the initial state restores
    /// it exactly.
    pub fn new(config: StudentConfig) -> Result<Self> {
        config.validate()?;
        let (specs, idx) = build_layout(&config, true);
        let total = specs.last().map_or(0, |p| p.offset + p.len());
        let mut params = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let residual_std = INIT_STD / (2.0 * config.n_layers.max(1) as f64).sqrt();
        for spec in &specs {
            let range = spec.range();
            let name = spec.name.as_str();
            if name.ends_with(".gain") {
                params[range].fill(1.0);
            } else if !name.ends_with("bias") {
                let std = if name.ends_with("o_proj") || name.ends_with("down_proj") {
                    residual_std
                } else {
                    INIT_STD
                };
                let normal = Normal::new(0.0, std).expect("positive std");
                for p in &mut params[range] {
                    *p = normal.sample(&mut rng) as f32 as f64;
                }
            }
        }
        Ok(Self {
            config,
            specs,
            idx,
            params,
        })
    }

    pub(crate) fn from_parts(
        config: StudentConfig,
        byte_head: bool,
        params: Vec<f64>,
    ) -> Result<Self> {
        config.validate()?;
        let (specs, idx) = build_layout(&config, byte_head);
        let total = specs.last().map_or(0, |p| p.offset + p.len());
        if params.len() != total {
            return Err(BldError::Shape(format!(
                "expected {total} parameters, found {}",
                params.len()
            )));
        }
        Ok(Self {
            config,
            specs,
            idx,
            params,
        })
    }

    pub fn config(&self) -> &StudentConfig {
        &self.config
    }

    pub fn has_byte_head(&self) -> bool {
        self.idx.byte_w.is_some()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn spec(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.spec(name).map(|s| &self.params[s.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.spec(name)?.range();
        Some(&mut self.params[range])
    }

    fn slice(&self, i: usize) -> &[f64] {
        &self.params[self.specs[i].range()]
    }

    fn mat(&self, i: usize) -> ArrayView2<'_, f64> {
        let s = &self.specs[i];
        ArrayView2::from_shape((s.shape[0], s.shape[1]), &self.params[s.range()])
            .expect("layout shape")
    }

    fn byte_weights(&self) -> Option<ArrayView3<'_, f64>> {
        self.idx.byte_w.map(|i| {
            let s = &self.specs[i];
            ArrayView3::from_shape(
                (s.shape[0], s.shape[1], s.shape[2]),
                &self.params[s.range()],
            )
            .expect("layout shape")
        })
    }

    fn byte_biases(&self) -> Option<ArrayView2<'_, f64>> {
        self.idx.byte_b.map(|i| self.mat(i))
    }

    fn check_input(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(BldError::EmptyInput("student input sequence"));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(BldError::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&bad) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(BldError::UnknownToken(bad));
        }
        Ok(())
    }

    pub fn forward(&self, tokens: &[TokenId]) -> Result<StudentOutputs> {
        self.forward_cached(tokens, ByteSlots::All)
            .map(|(out, _)| out)
    }

    /// Forward pass that skips the byte head.
    pub fn forward_tokens(&self, tokens: &[TokenId]) -> Result<Array2<f64>> {
        self.forward_cached(tokens, ByteSlots::None)
            .map(|(out, _)| out.token_logits)
    }

    fn forward_cached(
        &self,
        tokens: &[TokenId],
        byte_slots: ByteSlots,
    ) -> Result<(StudentOutputs, ForwardCache)> {
        self.check_input(tokens)?;
        let c = &self.config;
        let n = tokens.len();
        let d = c.d_model;
        let dh = d / c.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let emb = self.mat(self.idx.tok_embed);
        let pos = self.mat(self.idx.pos_embed);
        let mut x = Array2::zeros((n, d));
        for (i, &t) in tokens.iter().enumerate() {
            let mut row = x.row_mut(i);
            row.assign(&emb.row(t as usize));
            row += &pos.row(i);
        }

        let mut layers = Vec::with_capacity(c.n_layers);
        for li in &self.idx.layers {
            let (h, ln1) = layer_norm(&x, self.slice(li.ln1_g), self.slice(li.ln1_b));
            let q = h.dot(&self.mat(li.wq));
            let k = h.dot(&self.mat(li.wk));
            let v = h.dot(&self.mat(li.wv));
            let mut o = Array2::zeros((n, d));
            let mut attn = Vec::with_capacity(c.n_heads);
            for head in 0..c.n_heads {
                let cols = s![.., head * dh..(head + 1) * dh];
                let mut scores = q.slice(cols).dot(&k.slice(cols).t());
                for i in 0..n {
                    let mut row = scores.row_mut(i);
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        row[j] *= scale;
                        max = max.max(row[j]);
                    }
                    let mut total = 0.0;
                    for j in 0..n {
                        if j <= i {
                            row[j] = (row[j] - max).exp();
                            total += row[j];
                        } else {
                            row[j] = 0.0;
                        }
                    }
                    for j in 0..=i {
                        row[j] /= total;
                    }
                }
                o.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
                attn.push(scores);
            }
            x = x + o.dot(&self.mat(li.wo));
            let (h2, ln2) = layer_norm(&x, self.slice(li.ln2_g), self.slice(li.ln2_b));
            let mut u = h2.dot(&self.mat(li.w1));
            add_row_vector(&mut u, self.slice(li.b1));
            let g = u.mapv(gelu);
            let mut m = g.dot(&self.mat(li.w2));
            add_row_vector(&mut m, self.slice(li.b2));
            x = x + m;
            layers.push(LayerCache {
                ln1,
                h,
                q,
                k,
                v,
                attn,
                o,
                ln2,
                h2,
                u,
                g,
            });
        }

        let (hf, lnf) = layer_norm(&x, self.slice(self.idx.lnf_g), self.slice(self.idx.lnf_b));
        let mut token_logits = hf.dot(&self.mat(self.idx.head_w));
        add_row_vector(&mut token_logits, self.slice(self.idx.head_b));

        let byte_logits = match (&byte_slots, self.byte_weights(), self.byte_biases()) {
            (ByteSlots::None, _, _) | (_, None, _) | (_, _, None) => None,
            (ByteSlots::All, Some(w), Some(b)) => {
                let mut out = Array3::zeros((n, c.n_byte_heads, c.byte_vocab_size));
                for j in 0..c.n_byte_heads {
                    let mut logits = hf.dot(&w.index_axis(Axis(0), j));
                    logits += &b.row(j);
                    out.index_axis_mut(Axis(1), j).assign(&logits);
                }
                Some(out)
            }
            (ByteSlots::PerPosition(depths), Some(w), Some(b)) => {
                if depths.len() != n {
                    return Err(BldError::Shape(format!(
                        "byte slot depths cover {} positions, input has {n}",
                        depths.len()
                    )));
                }
                let mut out = Array3::zeros((n, c.n_byte_heads, c.byte_vocab_size));
                for (l, &depth) in depths.iter().enumerate() {
                    let h = hf.row(l);
                    for j in 0..depth.min(c.n_byte_heads) {
                        let mut logits = h.dot(&w.index_axis(Axis(0), j));
                        logits += &b.row(j);
                        out.slice_mut(s![l, j, ..]).assign(&logits);
                    }
                }
                Some(out)
            }
        };

        Ok((
            StudentOutputs {
                token_logits,
                byte_logits,
            },
            ForwardCache {
                tokens: tokens.to_vec(),
                byte_slots,
                layers,
                lnf,
                hf,
            },
        ))
    }

    fn accumulate<'a>(
        &self,
        grads: &mut [f64],
        i: usize,
        values: impl IntoIterator<Item = &'a f64>,
    ) {
        for (dst, src) in grads[self.specs[i].range()].iter_mut().zip(values) {
            *dst += src;
        }
    }

    fn backward(
        &self,
        cache: &ForwardCache,
        d_token: &Array2<f64>,
        d_byte: Option<&Array3<f64>>,
    ) -> GradientSet {
        let c = &self.config;
        let n = cache.tokens.len();
        let d = c.d_model;
        let dh = d / c.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut grads = vec![0.0; self.params.len()];

        // Output heads.
        let hf = &cache.hf;
        self.accumulate(&mut grads, self.idx.head_w, hf.t().dot(d_token).iter());
        self.accumulate(
            &mut grads,
            self.idx.head_b,
            d_token.sum_axis(Axis(0)).iter(),
        );
        let mut dhf = d_token.dot(&self.mat(self.idx.head_w).t());
        if let (Some(db), Some(w), Some(wi), Some(bi)) = (
            d_byte,
            self.byte_weights(),
            self.idx.byte_w,
            self.idx.byte_b,
        ) {
            let plane = d * c.byte_vocab_size;
            let w_base = self.specs[wi].offset;
            let b_base = self.specs[bi].offset;
            match &cache.byte_slots {
                ByteSlots::PerPosition(depths) => {
                    for (l, &depth) in depths.iter().enumerate() {
                        let h = hf.row(l);
                        for j in 0..depth.min(c.n_byte_heads) {
                            let g = db.slice(s![l, j, ..]);
                            let w_off = w_base + j * plane;
                            for (r, &hr) in h.iter().enumerate() {
                                let row = &mut grads[w_off + r * c.byte_vocab_size
                                    ..w_off + (r + 1) * c.byte_vocab_size];
                                for (dst, &gv) in row.iter_mut().zip(g.iter()) {
                                    *dst += hr * gv;
                                }
                            }
                            let b_off = b_base + j * c.byte_vocab_size;
                            for (dst, &gv) in grads[b_off..b_off + c.byte_vocab_size]
                                .iter_mut()
                                .zip(g.iter())
                            {
                                *dst += gv;
                            }
                            let back = w.index_axis(Axis(0), j).dot(&g);
                            let mut dh_row = dhf.row_mut(l);
                            dh_row += &back;
                        }
                    }
                }
                _ => {
                    for j in 0..c.n_byte_heads {
                        let dbj = db.index_axis(Axis(1), j);
                        let dw = hf.t().dot(&dbj);
                        let w_off = w_base + j * plane;
                        for (dst, src) in grads[w_off..w_off + plane].iter_mut().zip(dw.iter()) {
                            *dst += src;
                        }
                        let b_off = b_base + j * c.byte_vocab_size;
                        for (dst, src) in grads[b_off..b_off + c.byte_vocab_size]
                            .iter_mut()
                            .zip(dbj.sum_axis(Axis(0)).iter())
                        {
                            *dst += src;
                        }
                        dhf = dhf + dbj.dot(&w.index_axis(Axis(0), j).t());
                    }
                }
            }
        }
        let (mut dx, dg, db) = layer_norm_backward(&dhf, &cache.lnf, self.slice(self.idx.lnf_g));
        self.accumulate(&mut grads, self.idx.lnf_g, dg.iter());
        self.accumulate(&mut grads, self.idx.lnf_b, db.iter());

        for (li, lc) in self.idx.layers.iter().zip(&cache.layers).rev() {
            // MLP block.
            self.accumulate(&mut grads, li.w2, lc.g.t().dot(&dx).iter());
            self.accumulate(&mut grads, li.b2, dx.sum_axis(Axis(0)).iter());
            let dg = dx.dot(&self.mat(li.w2).t());
            let du = &dg * &lc.u.mapv(gelu_grad);
            self.accumulate(&mut grads, li.w1, lc.h2.t().dot(&du).iter());
            self.accumulate(&mut grads, li.b1, du.sum_axis(Axis(0)).iter());
            let dh2 = du.dot(&self.mat(li.w1).t());
            let (dx2, dgain, dbias) = layer_norm_backward(&dh2, &lc.ln2, self.slice(li.ln2_g));
            self.accumulate(&mut grads, li.ln2_g, dgain.iter());
            self.accumulate(&mut grads, li.ln2_b, dbias.iter());
            dx = dx + dx2;

            // Attention block.
            self.accumulate(&mut grads, li.wo, lc.o.t().dot(&dx).iter());
            let d_o = dx.dot(&self.mat(li.wo).t());
            let mut dq = Array2::zeros((n, d));
            let mut dk = Array2::zeros((n, d));
            let mut dv = Array2::zeros((n, d));
            for head in 0..c.n_heads {
                let cols = s![.., head * dh..(head + 1) * dh];
                let a = &lc.attn[head];
                let do_h = d_o.slice(cols);
                let da = do_h.dot(&lc.v.slice(cols).t());
                dv.slice_mut(cols).assign(&a.t().dot(&do_h));
                let mut ds = Array2::zeros((n, n));
                for i in 0..n {
                    let dot: f64 = (0..=i).map(|j| da[[i, j]] * a[[i, j]]).sum();
                    for j in 0..=i {
                        ds[[i, j]] = a[[i, j]] * (da[[i, j]] - dot) * scale;
                    }
                }
                dq.slice_mut(cols).assign(&ds.dot(&lc.k.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&lc.q.slice(cols)));
            }
            self.accumulate(&mut grads, li.wq, lc.h.t().dot(&dq).iter());
            self.accumulate(&mut grads, li.wk, lc.h.t().dot(&dk).iter());
            self.accumulate(&mut grads, li.wv, lc.h.t().dot(&dv).iter());
            let dh = dq.dot(&self.mat(li.wq).t())
                + dk.dot(&self.mat(li.wk).t())
                + dv.dot(&self.mat(li.wv).t());
            let (dx1, dgain, dbias) = layer_norm_backward(&dh, &lc.ln1, self.slice(li.ln1_g));
            self.accumulate(&mut grads, li.ln1_g, dgain.iter());
            self.accumulate(&mut grads, li.ln1_b, dbias.iter());
            dx = dx + dx1;
        }

        let e_off = self.specs[self.idx.tok_embed].offset;
        let p_off = self.specs[self.idx.pos_embed].offset;
        for (i, &t) in cache.tokens.iter().enumerate() {
            let row = dx.row(i);
            let e = e_off + t as usize * d;
            let p = p_off + i * d;
            for j in 0..d {
                grads[e + j] += row[j];
                grads[p + j] += row[j];
            }
        }
        GradientSet { values: grads }
    }

    /// Loss and gradient of one sequence.
    pub fn sequence_gradient<L: SequenceLoss + ?Sized>(
        &self,
        loss: &L,
        index: usize,
        tokens: &[TokenId],
    ) -> Result<(LossBreakdown, GradientSet)> {
        let (outputs, cache) = self.forward_cached(tokens, loss.byte_slots(index))?;
        let og = loss.evaluate(index, &outputs)?;
        if !og.breakdown.total.is_finite() {
            return Err(BldError::NonFiniteLoss { index });
        }
        let grads = self.backward(&cache, &og.d_token_logits, og.d_byte_logits.as_ref());
        Ok((og.breakdown, grads))
    }

    /// Summed loss and gradient over a batch of input sequences. Sequences
    /// are processed in parallel and reduced in batch order, so the result
    /// does not depend on the thread count.
    pub fn compute_gradients<L: SequenceLoss + ?Sized>(
        &self,
        loss: &L,
        batch: &[Vec<TokenId>],
    ) -> Result<(LossBreakdown, GradientSet)> {
        let parts: Vec<(LossBreakdown, GradientSet)> = batch
            .par_iter()
            .enumerate()
            .map(|(i, tokens)| self.sequence_gradient(loss, i, tokens))
            .collect::<Result<_>>()?;
        let mut total = LossBreakdown::default();
        let mut grads = GradientSet::zeros(self.params.len());
        for (b, g) in &parts {
            total = total + *b;
            grads.add_assign(g);
        }
        Ok((total, grads))
    }

    /// Copy of the model without the byte head. Token-level outputs are
    /// unchanged because the byte head runs parallel to the token head.
    pub fn detach_byte_head(&self) -> StudentModel {
        let (specs, idx) = build_layout(&self.config, false);
        let total = specs.last().map_or(0, |p| p.offset + p.len());
        StudentModel {
            config: self.config,
            specs,
            idx,
            params: self.params[..total].to_vec(),
        }
    }

    /// Indices of parameters belonging to tensors whose name matches `pred`.
    pub fn param_mask(&self, pred: impl Fn(&str) -> bool) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        for spec in &self.specs {
            if pred(&spec.name) {
                mask[spec.range()].fill(true);
            }
        }
        mask
    }
}

/// A student paired with its vocabulary, usable wherever a
/// [`LanguageModel`] is expected. The first input position is the
/// end-of-sequence id acting as a start marker.
#[derive(Debug, Clone)]
pub struct StudentLm {
    model: StudentModel,
    vocab: Arc<Vocabulary>,
}

impl StudentLm {
    pub fn new(model: StudentModel, vocab: Arc<Vocabulary>) -> Result<Self> {
        if model.config().vocab_size != vocab.len() {
            return Err(BldError::VocabMismatch(format!(
                "student has {} token slots, vocabulary has {}",
                model.config().vocab_size,
                vocab.len()
            )));
        }
        Ok(Self { model, vocab })
    }

    pub fn model(&self) -> &StudentModel {
        &self.model
    }

    pub fn into_model(self) -> StudentModel {
        self.model
    }
}

impl LanguageModel for StudentLm {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_token_dist(&self, prefix: &[TokenId]) -> Result<TokenDistribution> {
        let mut input = Vec::with_capacity(prefix.len() + 1);
        input.push(self.vocab.eos_id());
        input.extend_from_slice(prefix);
        let logits = self.model.forward_tokens(&input)?;
        let last = logits.row(logits.nrows() - 1).to_vec();
        Ok(TokenDistribution::from_logits(&last))
    }
}
