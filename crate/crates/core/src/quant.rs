//! Post-training weight-only quantization: 4-bit codes in groups of 128 consecutive
//! elements along the input dimension, one scale and offset per group.
//!
//! A group with minimum `lo` and maximum `hi` uses `scale = (hi - lo) / 15` (1 when the
//! group is constant) and stores `code = clamp(round((v - lo) / scale), 0, 15)`; it
//! dequantizes as `lo + scale * code`, i.e. `scale * (code - zero_point)` with the real
//! valued `zero_point = -lo / scale`. Activations, norms and embeddings stay in f32.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Linear, Matrix, ModelConfig, Parameters};

pub const GROUP_SIZE: usize = 128;
pub const MAX_CODE: u8 = 15;
/// Checkpoint dtype tag of quantized tensors.
pub const DTYPE_TAG: &str = "q4g128";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub rows: usize,
    pub cols: usize,
    /// Two codes per byte in row-major element order, even element in the low nibble.
    pub packed: Vec<u8>,
    /// `rows × groups_per_row()` scales, row-major.
    pub scales: Vec<f32>,
    /// Group minima, laid out like `scales`.
    pub offsets: Vec<f32>,
    /// Dtype the tensor had before quantization.
    pub source_dtype: String,
}

pub fn groups_per_row(cols: usize) -> usize {
    cols.div_ceil(GROUP_SIZE)
}

impl QuantizedTensor {
    pub fn groups_per_row(&self) -> usize {
        groups_per_row(self.cols)
    }

    #[inline]
    pub fn code(&self, index: usize) -> u8 {
        let b = self.packed[index / 2];
        if index.is_multiple_of(2) {
            b & 0x0f
        } else {
            b >> 4
        }
    }

    pub fn codes(&self) -> Vec<u8> {
        (0..self.rows * self.cols).map(|i| self.code(i)).collect()
    }

    /// Writes the dequantized row `r` into `out`.
    #[inline]
    pub fn dequantize_row(&self, r: usize, out: &mut [f32]) {
        let gpr = self.groups_per_row();
        let base = r * self.cols;
        for (g, chunk) in out[..self.cols].chunks_mut(GROUP_SIZE).enumerate() {
            let (scale, offset) = (self.scales[r * gpr + g], self.offsets[r * gpr + g]);
            for (c, o) in chunk.iter_mut().enumerate() {
                *o = offset + scale * self.code(base + g * GROUP_SIZE + c) as f32;
            }
        }
    }

    /// Bytes held by codes, scales and offsets.
    pub fn storage_bytes(&self) -> usize {
        self.packed.len() + 4 * (self.scales.len() + self.offsets.len())
    }

    /// Per-group `scale`, for error-bound checks.
    pub fn group_scale(&self, r: usize, c: usize) -> f32 {
        self.scales[r * self.groups_per_row() + c / GROUP_SIZE]
    }
}

/// Quantizes a row-major `rows × cols` matrix.
pub fn quantize_groupwise(rows: usize, cols: usize, data: &[f32]) -> Result<QuantizedTensor> {
    if data.len() != rows * cols {
        return Err(Error::invalid(format!(
            "{rows}x{cols} matrix needs {} values, got {}",
            rows * cols,
            data.len()
        )));
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite weight at element {i}")));
    }
    let gpr = groups_per_row(cols);
    let mut packed = vec![0u8; (rows * cols).div_ceil(2)];
    let mut scales = Vec::with_capacity(rows * gpr);
    let mut offsets = Vec::with_capacity(rows * gpr);
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        for (g, group) in row.chunks(GROUP_SIZE).enumerate() {
            let lo = group.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = group.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let scale = if hi > lo { (hi - lo) / MAX_CODE as f32 } else { 1.0 };
            for (c, &v) in group.iter().enumerate() {
                let code = ((v - lo) / scale).round().clamp(0.0, MAX_CODE as f32) as u8;
                let idx = r * cols + g * GROUP_SIZE + c;
                packed[idx / 2] |= if idx.is_multiple_of(2) { code } else { code << 4 };
            }
            scales.push(scale);
            offsets.push(lo);
        }
    }
    Ok(QuantizedTensor {
        rows,
        cols,
        packed,
        scales,
        offsets,
        source_dtype: "f32".into(),
    })
}

pub fn dequantize(qt: &QuantizedTensor) -> Matrix {
    let mut data = vec![0f32; qt.rows * qt.cols];
    for (r, row) in data.chunks_mut(qt.cols.max(1)).enumerate().take(qt.rows) {
        qt.dequantize_row(r, row);
    }
    Matrix::from_vec(qt.rows, qt.cols, data)
}

/// Which projections are quantized. Norm gains and the token embedding always stay f32.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantPolicy {
    /// Also quantize an untied output projection.
    pub output_projection: bool,
}

impl Default for QuantPolicy {
    fn default() -> Self {
        QuantPolicy {
            output_projection: true,
        }
    }
}

fn quantize_linear(l: &Linear) -> Result<Linear> {
    match l {
        Linear::Dense(m) => Ok(Linear::Q4(quantize_groupwise(m.rows, m.cols, &m.data)?)),
        Linear::Q4(q) => Ok(Linear::Q4(q.clone())),
    }
}

/// One-shot offline pass producing quantized parameters.
pub fn quantize_params(params: &Parameters, policy: QuantPolicy) -> Result<Parameters> {
    let mut out = params.clone();
    for layer in &mut out.layers {
        for l in layer.linears_mut() {
            *l = quantize_linear(l)?;
        }
    }
    if policy.output_projection {
        if let Some(head) = out.lm_head.as_mut() {
            *head = quantize_linear(head)?;
        }
    }
    Ok(out)
}

/// Errors unless every block projection (and the untied head, when the policy covers it)
/// is quantized.
pub fn check_quantized(params: &Parameters, policy: QuantPolicy) -> Result<()> {
    for (i, layer) in params.layers.iter().enumerate() {
        if layer.linears().iter().any(|l| !l.is_quantized()) {
            return Err(Error::Config(format!(
                "layer {i} has projections without a quantized counterpart"
            )));
        }
    }
    if policy.output_projection {
        if let Some(h) = &params.lm_head {
            if !h.is_quantized() {
                return Err(Error::Config("output projection is not quantized".into()));
            }
        }
    }
    Ok(())
}

/// Weight-buffer bytes of a configuration: 16-bit storage for every parameter versus the
/// quantized layout (non-quantized tensors still counted at 16 bits).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Footprint {
    pub baseline_bytes: u64,
    pub quantized_bytes: u64,
}

impl Footprint {
    pub fn reduction(&self) -> f64 {
        1.0 - self.quantized_bytes as f64 / self.baseline_bytes as f64
    }
}

fn q4_bytes(rows: usize, cols: usize) -> u64 {
    ((rows * cols).div_ceil(2) + 8 * rows * groups_per_row(cols)) as u64
}

pub fn weight_footprint(cfg: &ModelConfig, policy: QuantPolicy) -> Footprint {
    let (h, kv, ffn, v) = (
        cfg.hidden_size,
        cfg.kv_dim(),
        cfg.intermediate_size,
        cfg.vocab_size,
    );
    let mut linears = vec![(h, h), (kv, h), (kv, h), (h, h), (ffn, h), (ffn, h), (h, ffn)];
    linears = linears
        .into_iter()
        .cycle()
        .take(7 * cfg.num_layers)
        .collect();
    let mut kept: u64 = (v * h + (2 * cfg.num_layers + 1) * h) as u64;
    if !cfg.tie_word_embeddings {
        if policy.output_projection {
            linears.push((v, h));
        } else {
            kept += (v * h) as u64;
        }
    }
    let quantized: u64 = linears.iter().map(|&(r, c)| q4_bytes(r, c)).sum();
    Footprint {
        baseline_bytes: 2 * cfg.param_count(),
        quantized_bytes: quantized + 2 * kept,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64, scale: f32) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..rows * cols)
            .map(|_| (rng.random::<f32>() * 2.0 - 1.0) * scale)
            .collect()
    }

    #[test]
    fn constant_group_is_exact() {
        let q = quantize_groupwise(1, 128, &[0.5; 128]).unwrap();
        let codes = q.codes();
        assert!(codes.iter().all(|&c| c == codes[0]));
        assert!(dequantize(&q).data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn group_endpoints_survive() {
        let mut v = random(1, 128, 1, 0.3);
        v[5] = -0.7;
        v[77] = 0.9;
        let q = quantize_groupwise(1, 128, &v).unwrap();
        let d = dequantize(&q);
        assert_eq!(d.data[5], -0.7);
        assert!((d.data[77] - 0.9).abs() <= 1e-6);
    }

    #[test]
    fn error_bound_brute_force() {
        let v = random(3, 300, 2, 1.0);
        let q = quantize_groupwise(3, 300, &v).unwrap();
        let d = dequantize(&q);
        for r in 0..3 {
            for c in 0..300 {
                let i = r * 300 + c;
                // Recompute the group extremes independently.
                let g0 = c / 128 * 128;
                let g = &v[r * 300 + g0..r * 300 + (g0 + 128).min(300)];
                let lo = g.iter().cloned().fold(f32::MAX, f32::min);
                let hi = g.iter().cloned().fold(f32::MIN, f32::max);
                let scale = (hi - lo) / 15.0;
                assert!((v[i] - d.data[i]).abs() <= scale / 2.0 + 1e-6);
            }
        }
        assert_eq!(q.scales.len(), 3 * 3);
    }

    #[test]
    fn all_positive_groups_are_representable() {
        let v: Vec<f32> = (0..128).map(|i| 1.0 + i as f32 / 127.0).collect();
        let q = quantize_groupwise(1, 128, &v).unwrap();
        let d = dequantize(&q);
        let scale = 1.0 / 15.0;
        assert!(v.iter().zip(&d.data).all(|(a, b)| (a - b).abs() <= scale / 2.0 + 1e-6));
    }

    #[test]
    fn zeros_and_non_finite() {
        let q = quantize_groupwise(4, 130, &vec![0.0; 520]).unwrap();
        assert!(dequantize(&q).data.iter().all(|&v| v == 0.0));
        let mut bad = vec![0.0; 128];
        bad[3] = f32::NAN;
        assert!(matches!(quantize_groupwise(1, 128, &bad), Err(Error::Numeric(_))));
    }

    #[test]
    fn idempotent_on_random_tensors() {
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (rows, cols) = (rng.random_range(1..6), rng.random_range(1..400));
            let q = quantize_groupwise(rows, cols, &random(rows, cols, seed, 2.0)).unwrap();
            let again = quantize_groupwise(rows, cols, &dequantize(&q).data).unwrap();
            assert_eq!(again.packed, q.packed, "seed {seed}");
            assert_eq!(again.offsets, q.offsets);
            for (a, b) in again.scales.iter().zip(&q.scales) {
                assert!((a - b).abs() <= 1e-6 * b.abs());
            }
        }
    }

    #[test]
    fn large_matrix_accounting() {
        let bytes = q4_bytes(4096, 4096) as f64;
        let sixteen_bit = 4096.0 * 4096.0 * 2.0;
        // 4096*4096/2 packed + 4096*32 groups * 8 bytes.
        assert_eq!(bytes, 8_388_608.0 + 1_048_576.0);
        assert!(bytes <= 0.40 * sixteen_bit);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn per_element_error_within_half_scale(seed in 0u64..10_000, rows in 1usize..4, cols in 1usize..300, mag in 0.001f32..10.0) {
            let v = random(rows, cols, seed, mag);
            let q = quantize_groupwise(rows, cols, &v).unwrap();
            let d = dequantize(&q);
            for r in 0..rows {
                for c in 0..cols {
                    let i = r * cols + c;
                    let bound = q.group_scale(r, c) / 2.0 + 1e-6 * (1.0 + mag);
                    proptest::prop_assert!((v[i] - d.data[i]).abs() <= bound);
                }
            }
        }
    }
}
