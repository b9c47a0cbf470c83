//! Decoder-only transformer over the unified vocabulary.
//!
//! Pre-norm residual blocks: RMS normalization, multi-head attention with rotary
//! positions, a SiLU-gated feed-forward layer, then a final normalization and the output
//! projection. Weights are stored `[out, in]`.
//!
//! Every kernel processes rows independently with a fixed reduction order, so the logits
//! of a position do not depend on how many other positions share its forward call. The
//! cached single-token path and a batched window therefore agree bitwise.

pub mod backprop;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvcache::{CausalMask, StaticKvCache, StaticMaskView};
use crate::quant::QuantizedTensor;
use crate::vocab::TokenId;

pub const INIT_STD: f32 = 0.02;
pub const PRESETS: [&str; 4] = ["tiny", "small", "2B", "7B"];

fn default_rope_base() -> f32 {
    10_000.0
}

fn default_norm_eps() -> f32 {
    1e-5
}

fn default_max_seq_len() -> usize {
    4096
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub num_heads: usize,
    pub num_kv_heads: usize,
    pub num_layers: usize,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f32,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f32,
    /// Reuse the token embedding as the output projection.
    #[serde(default)]
    pub tie_word_embeddings: bool,
}

impl ModelConfig {
    fn shape(
        vocab_size: usize,
        hidden_size: usize,
        intermediate_size: usize,
        heads: usize,
        kv_heads: usize,
        layers: usize,
        tie_word_embeddings: bool,
    ) -> Self {
        ModelConfig {
            vocab_size,
            hidden_size,
            intermediate_size,
            num_heads: heads,
            num_kv_heads: kv_heads,
            num_layers: layers,
            max_seq_len: default_max_seq_len(),
            rope_base: default_rope_base(),
            norm_eps: default_norm_eps(),
            tie_word_embeddings,
        }
    }

    /// Named configurations. The two large ones share the embedding with the output
    /// projection so their counts land on their names.
    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "tiny" => Self::shape(1296, 128, 352, 4, 4, 4, false),
            "small" => Self::shape(1296, 256, 704, 8, 8, 8, false),
            "2B" => Self::shape(171_385, 2048, 8192, 32, 32, 32, true),
            "7B" => Self::shape(171_385, 4096, 11008, 32, 32, 32, true),
            other => {
                return Err(Error::Config(format!(
                    "unknown model preset {other:?} (expected one of {PRESETS:?})"
                )))
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.hidden_size == 0 || self.intermediate_size == 0 {
            return bad("model dimensions must be positive".into());
        }
        if self.num_layers == 0 || self.num_heads == 0 || self.num_kv_heads == 0 {
            return bad("layer and head counts must be positive".into());
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return bad(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            ));
        }
        if !self.num_heads.is_multiple_of(self.num_kv_heads) {
            return bad(format!(
                "num_kv_heads {} does not divide num_heads {}",
                self.num_kv_heads, self.num_heads
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad("head dimension must be even for rotary positions".into());
        }
        if !(self.rope_base > 0.0) || !(self.norm_eps > 0.0) {
            return bad("rope_base and norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.num_kv_heads * self.head_dim()
    }

    pub fn layer_param_count(&self) -> u64 {
        let (h, kv, f) = (
            self.hidden_size as u64,
            self.kv_dim() as u64,
            self.intermediate_size as u64,
        );
        2 * h * h + 2 * kv * h + 3 * f * h + 2 * h
    }

    pub fn param_count(&self) -> u64 {
        let vh = (self.vocab_size * self.hidden_size) as u64;
        let head = if self.tie_word_embeddings { 0 } else { vh };
        vh + self.num_layers as u64 * self.layer_param_count() + self.hidden_size as u64 + head
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// A projection weight, dense or 4-bit quantized (dequantized row by row on use).
#[derive(Clone, Debug, PartialEq)]
pub enum Linear {
    Dense(Matrix),
    Q4(QuantizedTensor),
}

impl Linear {
    pub fn rows(&self) -> usize {
        match self {
            Linear::Dense(m) => m.rows,
            Linear::Q4(q) => q.rows,
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            Linear::Dense(m) => m.cols,
            Linear::Q4(q) => q.cols,
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, Linear::Q4(_))
    }

    pub fn dense(&self) -> Option<&Matrix> {
        match self {
            Linear::Dense(m) => Some(m),
            Linear::Q4(_) => None,
        }
    }

    pub fn dense_mut(&mut self) -> Option<&mut Matrix> {
        match self {
            Linear::Dense(m) => Some(m),
            Linear::Q4(_) => None,
        }
    }

    /// `out[i, o] = x[i] · W[o]` for the `n = x.len() / cols` input rows.
    pub fn apply(&self, x: &[f32], out: &mut [f32]) {
        match self {
            Linear::Dense(m) => matmul_wt(x, m, out),
            Linear::Q4(q) => {
                let (rows, cols) = (q.rows, q.cols);
                let n = x.len() / cols;
                let mut w = vec![0f32; cols];
                for o in 0..rows {
                    q.dequantize_row(o, &mut w);
                    for i in 0..n {
                        out[i * rows + o] = dot(&x[i * cols..(i + 1) * cols], &w);
                    }
                }
            }
        }
    }

    /// Single output row `o` applied to one input vector.
    pub fn apply_row(&self, o: usize, x: &[f32], scratch: &mut Vec<f32>) -> f32 {
        match self {
            Linear::Dense(m) => dot(x, m.row(o)),
            Linear::Q4(q) => {
                scratch.resize(q.cols, 0.0);
                q.dequantize_row(o, scratch);
                dot(x, scratch)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub attn_norm: Vec<f32>,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ffn_norm: Vec<f32>,
    pub w_gate: Linear,
    pub w_up: Linear,
    pub w_down: Linear,
}

impl LayerParams {
    pub fn linears(&self) -> [&Linear; 7] {
        [
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
        ]
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 7] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

/// Borrowed view of one named tensor.
pub enum TensorRef<'a> {
    Vector(&'a [f32]),
    Matrix(&'a Matrix),
    Linear(&'a Linear),
}

pub enum TensorMut<'a> {
    Vector(&'a mut Vec<f32>),
    Matrix(&'a mut Matrix),
    Linear(&'a mut Linear),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub config: ModelConfig,
    pub embed: Matrix,
    pub layers: Vec<LayerParams>,
    pub final_norm: Vec<f32>,
    /// `None` when the embedding doubles as the output projection.
    pub lm_head: Option<Linear>,
}

const LAYER_TENSORS: [&str; 9] = [
    "attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down",
];

impl Parameters {
    /// All-zero dense parameters (gains included) shaped by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (h, kv, f, v) = (
            cfg.hidden_size,
            cfg.kv_dim(),
            cfg.intermediate_size,
            cfg.vocab_size,
        );
        let lin = |r, c| Linear::Dense(Matrix::zeros(r, c));
        let layer = || LayerParams {
            attn_norm: vec![0.0; h],
            wq: lin(h, h),
            wk: lin(kv, h),
            wv: lin(kv, h),
            wo: lin(h, h),
            ffn_norm: vec![0.0; h],
            w_gate: lin(f, h),
            w_up: lin(f, h),
            w_down: lin(h, f),
        };
        Ok(Parameters {
            config: cfg.clone(),
            embed: Matrix::zeros(v, h),
            layers: (0..cfg.num_layers).map(|_| layer()).collect(),
            final_norm: vec![0.0; h],
            lm_head: (!cfg.tie_word_embeddings).then(|| lin(v, h)),
        })
    }

    /// Tensors in canonical order with their checkpoint names.
    pub fn tensors(&self) -> Vec<(String, TensorRef<'_>)> {
        let mut out = vec![("embed".to_string(), TensorRef::Matrix(&self.embed))];
        for (i, l) in self.layers.iter().enumerate() {
            let items = [
                TensorRef::Vector(&l.attn_norm),
                TensorRef::Linear(&l.wq),
                TensorRef::Linear(&l.wk),
                TensorRef::Linear(&l.wv),
                TensorRef::Linear(&l.wo),
                TensorRef::Vector(&l.ffn_norm),
                TensorRef::Linear(&l.w_gate),
                TensorRef::Linear(&l.w_up),
                TensorRef::Linear(&l.w_down),
            ];
            for (name, t) in LAYER_TENSORS.iter().zip(items) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".into(), TensorRef::Vector(&self.final_norm)));
        if let Some(h) = &self.lm_head {
            out.push(("lm_head".into(), TensorRef::Linear(h)));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        let mut out = vec![("embed".to_string(), TensorMut::Matrix(&mut self.embed))];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let items = [
                TensorMut::Vector(&mut l.attn_norm),
                TensorMut::Linear(&mut l.wq),
                TensorMut::Linear(&mut l.wk),
                TensorMut::Linear(&mut l.wv),
                TensorMut::Linear(&mut l.wo),
                TensorMut::Vector(&mut l.ffn_norm),
                TensorMut::Linear(&mut l.w_gate),
                TensorMut::Linear(&mut l.w_up),
                TensorMut::Linear(&mut l.w_down),
            ];
            for (name, t) in LAYER_TENSORS.iter().zip(items) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".into(), TensorMut::Vector(&mut self.final_norm)));
        if let Some(h) = &mut self.lm_head {
            out.push(("lm_head".into(), TensorMut::Linear(h)));
        }
        out
    }

    /// Flat views of every tensor; fails if any projection is quantized.
    pub fn flat(&self) -> Result<Vec<&[f32]>> {
        self.tensors()
            .into_iter()
            .map(|(name, t)| match t {
                TensorRef::Vector(v) => Ok(v),
                TensorRef::Matrix(m) => Ok(&m.data[..]),
                TensorRef::Linear(Linear::Dense(m)) => Ok(&m.data[..]),
                TensorRef::Linear(Linear::Q4(_)) => Err(quantized_error(&name)),
            })
            .collect()
    }

    pub fn flat_mut(&mut self) -> Result<Vec<&mut [f32]>> {
        self.tensors_mut()
            .into_iter()
            .map(|(name, t)| match t {
                TensorMut::Vector(v) => Ok(&mut v[..]),
                TensorMut::Matrix(m) => Ok(&mut m.data[..]),
                TensorMut::Linear(Linear::Dense(m)) => Ok(&mut m.data[..]),
                TensorMut::Linear(Linear::Q4(_)) => Err(quantized_error(&name)),
            })
            .collect()
    }

    pub fn is_quantized(&self) -> bool {
        self.tensors()
            .iter()
            .any(|(_, t)| matches!(t, TensorRef::Linear(l) if l.is_quantized()))
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| match t {
            TensorRef::Vector(v) => v.iter().all(|x| x.is_finite()),
            TensorRef::Matrix(m) => m.data.iter().all(|x| x.is_finite()),
            TensorRef::Linear(Linear::Dense(m)) => m.data.iter().all(|x| x.is_finite()),
            TensorRef::Linear(Linear::Q4(q)) => q
                .scales
                .iter()
                .chain(&q.offsets)
                .all(|x| x.is_finite()),
        })
    }

    /// SHA-256 over tensor names and contents in canonical order, hex encoded.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        let feed = |h: &mut Sha256, v: &[f32]| {
            for x in v {
                h.update(x.to_le_bytes());
            }
        };
        for (name, t) in self.tensors() {
            h.update(name.as_bytes());
            match t {
                TensorRef::Vector(v) => feed(&mut h, v),
                TensorRef::Matrix(m) | TensorRef::Linear(Linear::Dense(m)) => feed(&mut h, &m.data),
                TensorRef::Linear(Linear::Q4(q)) => {
                    h.update(&q.packed);
                    feed(&mut h, &q.scales);
                    feed(&mut h, &q.offsets);
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Output projection row `t` (the embedding row when tied).
    #[inline]
    pub fn head_logit(&self, t: usize, x: &[f32], scratch: &mut Vec<f32>) -> f32 {
        match &self.lm_head {
            Some(h) => h.apply_row(t, x, scratch),
            None => dot(x, self.embed.row(t)),
        }
    }
}

fn quantized_error(name: &str) -> Error {
    Error::invalid(format!("tensor {name} is quantized; dense weights required"))
}

fn truncated_normal(rng: &mut ChaCha8Rng, normal: &Normal<f32>, n: usize) -> Vec<f32> {
    let bound = 3.0 * INIT_STD;
    (0..n)
        .map(|_| loop {
            let v = normal.sample(rng);
            if v.abs() <= bound {
                break v;
            }
        })
        .collect()
}

/// Deterministic random initialization: weights from a normal(0, 0.02²) truncated at
/// three standard deviations, gains at 1.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<Parameters> {
    let mut p = Parameters::zeros(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, INIT_STD).expect("valid std");
    for (_, t) in p.tensors_mut() {
        match t {
            TensorMut::Vector(v) => v.fill(1.0),
            TensorMut::Matrix(m) | TensorMut::Linear(Linear::Dense(m)) => {
                m.data = truncated_normal(&mut rng, &normal, m.data.len());
            }
            TensorMut::Linear(Linear::Q4(_)) => unreachable!("fresh parameters are dense"),
        }
    }
    Ok(p)
}

pub fn param_count(cfg: &ModelConfig) -> u64 {
    cfg.param_count()
}

// ---------------------------------------------------------------------------
// Kernels

const LANES: usize = 16;

/// Dot product with a fixed 16-lane partial-sum layout.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    let mut acc = [0f32; LANES];
    for (x, y) in ca.zip(cb) {
        for k in 0..LANES {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0f32;
    for (x, y) in ta.iter().zip(tb) {
        tail += x * y;
    }
    let mut half = LANES / 2;
    while half > 0 {
        for k in 0..half {
            acc[k] += acc[k + half];
        }
        half /= 2;
    }
    acc[0] + tail
}

/// `dst += a * src`.
#[inline]
pub fn axpy(a: f32, src: &[f32], dst: &mut [f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// `out[i, o] = x[i] · w[o]` for every row of `x`.
pub fn matmul_wt(x: &[f32], w: &Matrix, out: &mut [f32]) {
    let n = x.len() / w.cols;
    debug_assert_eq!(out.len(), n * w.rows);
    for o in 0..w.rows {
        let wr = w.row(o);
        for i in 0..n {
            out[i * w.rows + o] = dot(&x[i * w.cols..(i + 1) * w.cols], wr);
        }
    }
}

/// Returns `1 / rms(x)` and writes `x * gain / rms(x)` to `out`.
#[inline]
pub fn rmsnorm(x: &[f32], gain: &[f32], eps: f32, out: &mut [f32]) -> f32 {
    let ms = dot(x, x) / x.len() as f32;
    let r = 1.0 / (ms + eps).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * r * g;
    }
    r
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Rotates each `head_dim` chunk of `v` in place for absolute position `pos`.
/// `sign = -1.0` applies the inverse rotation.
pub fn rope(v: &mut [f32], head_dim: usize, pos: usize, base: f32, sign: f32) {
    let half = head_dim / 2;
    let (cos, sin) = rope_angles(head_dim, pos, base);
    for head in v.chunks_mut(head_dim) {
        for i in 0..half {
            let (a, b) = (head[i], head[i + half]);
            let s = sign * sin[i];
            head[i] = a * cos[i] - b * s;
            head[i + half] = b * cos[i] + a * s;
        }
    }
}

fn rope_angles(head_dim: usize, pos: usize, base: f32) -> (Vec<f32>, Vec<f32>) {
    let half = head_dim / 2;
    (0..half)
        .map(|i| {
            let inv = (base as f64).powf(-((2 * i) as f64) / head_dim as f64);
            let (s, c) = (pos as f64 * inv).sin_cos();
            (c as f32, s as f32)
        })
        .unzip()
}

/// Numerically stable softmax in place.
pub fn softmax_in_place(x: &mut [f32]) {
    let m = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0f32;
    for v in x.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

// ---------------------------------------------------------------------------
// Inference forward

/// Which logits rows `forward_window` returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogitRows {
    All,
    Last,
}

/// Runs `tokens` at positions `[committed, committed + n)`, writing their keys and values
/// into `cache` without committing them. Returns `rows × vocab_size` logits.
pub fn forward_window(
    params: &Parameters,
    cache: &mut StaticKvCache,
    mask: &CausalMask,
    tokens: &[TokenId],
    rows: LogitRows,
) -> Result<Matrix> {
    let cfg = &params.config;
    let n = tokens.len();
    if n == 0 {
        return Err(Error::invalid("forward over an empty window"));
    }
    let start = cache.committed();
    if start + n > cache.capacity() {
        return Err(Error::Capacity {
            requested: start + n,
            capacity: cache.capacity(),
        });
    }
    let view = mask.view(start, n)?;
    let (h, kv, f) = (cfg.hidden_size, cfg.kv_dim(), cfg.intermediate_size);
    let hd = cfg.head_dim();

    let mut x = vec![0f32; n * h];
    for (i, t) in tokens.iter().enumerate() {
        if t.index() >= cfg.vocab_size {
            return Err(Error::invalid(format!(
                "token {t} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        x[i * h..(i + 1) * h].copy_from_slice(params.embed.row(t.index()));
    }
    let mut xn = vec![0f32; n * h];
    let (mut q, mut k, mut v) = (vec![0f32; n * h], vec![0f32; n * kv], vec![0f32; n * kv]);
    let mut att = vec![0f32; n * h];
    let mut proj = vec![0f32; n * h];
    let (mut g, mut u) = (vec![0f32; n * f], vec![0f32; n * f]);
    let mut scores = vec![0f32; view.cols()];

    for (l, layer) in params.layers.iter().enumerate() {
        for i in 0..n {
            rmsnorm(
                &x[i * h..(i + 1) * h],
                &layer.attn_norm,
                cfg.norm_eps,
                &mut xn[i * h..(i + 1) * h],
            );
        }
        layer.wq.apply(&xn, &mut q);
        layer.wk.apply(&xn, &mut k);
        layer.wv.apply(&xn, &mut v);
        for i in 0..n {
            rope(&mut q[i * h..(i + 1) * h], hd, start + i, cfg.rope_base, 1.0);
            rope(&mut k[i * kv..(i + 1) * kv], hd, start + i, cfg.rope_base, 1.0);
        }
        cache.write_window(l, start, &k, &v)?;
        attend(
            cfg,
            &view,
            &q,
            cache.keys(l),
            cache.values(l),
            &mut att,
            &mut scores,
        );
        layer.wo.apply(&att, &mut proj);
        for (a, b) in x.iter_mut().zip(&proj) {
            *a += b;
        }

        for i in 0..n {
            rmsnorm(
                &x[i * h..(i + 1) * h],
                &layer.ffn_norm,
                cfg.norm_eps,
                &mut xn[i * h..(i + 1) * h],
            );
        }
        layer.w_gate.apply(&xn, &mut g);
        layer.w_up.apply(&xn, &mut u);
        for (a, b) in g.iter_mut().zip(&u) {
            *a = silu(*a) * b;
        }
        layer.w_down.apply(&g, &mut proj);
        for (a, b) in x.iter_mut().zip(&proj) {
            *a += b;
        }
    }

    let first = match rows {
        LogitRows::All => 0,
        LogitRows::Last => n - 1,
    };
    let m = n - first;
    let mut xf = vec![0f32; m * h];
    for i in 0..m {
        rmsnorm(
            &x[(first + i) * h..(first + i + 1) * h],
            &params.final_norm,
            cfg.norm_eps,
            &mut xf[i * h..(i + 1) * h],
        );
    }
    let mut logits = Matrix::zeros(m, cfg.vocab_size);
    match &params.lm_head {
        Some(head) => head.apply(&xf, &mut logits.data),
        None => matmul_wt(&xf, &params.embed, &mut logits.data),
    }
    Ok(logits)
}

/// Attention of each window row over the positions its mask row permits, in ascending
/// position order.
fn attend(
    cfg: &ModelConfig,
    view: &StaticMaskView<'_>,
    q: &[f32],
    keys: &[f32],
    values: &[f32],
    out: &mut [f32],
    scores: &mut [f32],
) {
    let (h, kv, hd) = (cfg.hidden_size, cfg.kv_dim(), cfg.head_dim());
    let group = cfg.num_heads / cfg.num_kv_heads;
    let scale = 1.0 / (hd as f32).sqrt();
    for i in 0..view.rows() {
        for head in 0..cfg.num_heads {
            let kh = head / group;
            let qv = &q[i * h + head * hd..i * h + (head + 1) * hd];
            let mut cnt = 0;
            for j in view.visible(i) {
                scores[cnt] = dot(qv, &keys[j * kv + kh * hd..j * kv + (kh + 1) * hd]) * scale;
                cnt += 1;
            }
            softmax_in_place(&mut scores[..cnt]);
            let o = &mut out[i * h + head * hd..i * h + (head + 1) * hd];
            o.fill(0.0);
            for (w, j) in scores[..cnt].iter().zip(view.visible(i)) {
                axpy(*w, &values[j * kv + kh * hd..j * kv + (kh + 1) * hd], o);
            }
        }
    }
}

/// Full uncached forward over `tokens` starting at position 0.
pub fn forward_logits(params: &Parameters, tokens: &[TokenId]) -> Result<Matrix> {
    let cfg = &params.config;
    if tokens.is_empty() || tokens.len() > cfg.max_seq_len {
        return Err(Error::invalid(format!(
            "sequence length {} outside 1..={}",
            tokens.len(),
            cfg.max_seq_len
        )));
    }
    let mut cache = StaticKvCache::with_capacity(cfg, tokens.len())?;
    let mask = CausalMask::new(tokens.len());
    forward_window(params, &mut cache, &mask, tokens, LogitRows::All)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig::preset("tiny").unwrap()
    }

    #[test]
    fn preset_counts() {
        // Hand sum for tiny: embeddings and head 1296*128 each; per layer
        // 4*128*128 attention + 3*352*128 feed-forward + 2*128 gains; final gain 128.
        let per_layer = 4 * 128 * 128 + 3 * 352 * 128 + 2 * 128;
        assert_eq!(per_layer, 200_960);
        assert_eq!(tiny().param_count(), 2 * 165_888 + 4 * 200_960 + 128);
        let b2 = ModelConfig::preset("2B").unwrap().param_count() as f64;
        let b7 = ModelConfig::preset("7B").unwrap().param_count() as f64;
        assert!((1.5e9..=2.5e9).contains(&b2), "{b2}");
        assert!((6.0e9..=8.0e9).contains(&b7), "{b7}");
        assert!(ModelConfig::preset("huge").is_err());
    }

    #[test]
    fn param_count_matches_tensors() {
        for name in ["tiny", "small"] {
            let cfg = ModelConfig::preset(name).unwrap();
            let p = Parameters::zeros(&cfg).unwrap();
            let total: usize = p.flat().unwrap().iter().map(|t| t.len()).sum();
            assert_eq!(total as u64, cfg.param_count());
        }
    }

    #[test]
    fn init_is_deterministic_with_unit_gains() {
        let a = init_params(&tiny(), 7).unwrap();
        let b = init_params(&tiny(), 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(&tiny(), 8).unwrap());
        assert!(a.layers.iter().all(|l| l.attn_norm.iter().all(|&g| g == 1.0)));
        assert!(a.final_norm.iter().all(|&g| g == 1.0));
        let w = &a.layers[0].wq.dense().unwrap().data;
        assert!(w.iter().all(|v| v.abs() <= 0.06));
        let mean = w.iter().sum::<f32>() / w.len() as f32;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / w.len() as f32;
        assert!(mean.abs() < 1e-3);
        // Truncation at 3 sigma shrinks the std by about 1.3%.
        assert!((var.sqrt() - 0.0197).abs() < 5e-4, "{}", var.sqrt());
    }

    #[test]
    fn invalid_configs() {
        let mut c = tiny();
        c.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.num_kv_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn dot_matches_f64_reference() {
        let a: Vec<f32> = (0..77).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..77).map(|i| (i as f32 * 0.11).cos()).collect();
        let r: f64 = a.iter().zip(&b).map(|(x, y)| *x as f64 * *y as f64).sum();
        assert!((dot(&a, &b) as f64 - r).abs() < 1e-5);
    }

    #[test]
    fn rope_inverse_and_norm() {
        let mut v: Vec<f32> = (0..64).map(|i| i as f32 * 0.1 - 3.0).collect();
        let orig = v.clone();
        rope(&mut v, 32, 17, 10_000.0, 1.0);
        let n0: f32 = orig.iter().map(|x| x * x).sum();
        let n1: f32 = v.iter().map(|x| x * x).sum();
        assert!((n0 - n1).abs() < 1e-3);
        rope(&mut v, 32, 17, 10_000.0, -1.0);
        assert!(v.iter().zip(&orig).all(|(a, b)| (a - b).abs() < 1e-5));
    }

    #[test]
    fn rows_are_distributions() {
        let p = init_params(&tiny(), 1).unwrap();
        let toks: Vec<TokenId> = [3usize, 300, 900, 1290, 5].map(TokenId::from).to_vec();
        let logits = forward_logits(&p, &toks).unwrap();
        for r in 0..logits.rows {
            let mut row = logits.row(r).to_vec();
            softmax_in_place(&mut row);
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn overlong_and_out_of_vocab_inputs() {
        let mut cfg = tiny();
        cfg.max_seq_len = 8;
        let p = init_params(&cfg, 1).unwrap();
        assert!(forward_logits(&p, &[TokenId(1); 9]).is_err());
        assert!(forward_logits(&p, &[]).is_err());
        assert!(forward_logits(&p, &[TokenId(1296)]).is_err());
        assert!(forward_logits(&p, &[TokenId(1); 8]).is_ok());
    }

    #[test]
    fn window_forward_matches_token_by_token_bitwise() {
        let p = init_params(&tiny(), 2).unwrap();
        let toks: Vec<TokenId> = (0..12).map(|i| TokenId(i * 97 % 1296)).collect();
        let full = forward_logits(&p, &toks).unwrap();
        let mask = CausalMask::new(32);
        let mut cache = StaticKvCache::with_capacity(&p.config, 32).unwrap();
        for (i, &t) in toks.iter().enumerate() {
            let row = forward_window(&p, &mut cache, &mask, &[t], LogitRows::Last).unwrap();
            cache.commit(1).unwrap();
            assert_eq!(row.row(0), full.row(i), "position {i}");
        }
    }
}
