//! Training forward pass with an activation tape, reverse-mode gradients, and the
//! grammar-masked cross-entropy loss.
//!
//! The softmax of each target position is restricted to the tokens the image-block
//! grammar allows there, so a position with a single legal token contributes zero loss
//! and zero gradient. Loss sums are carried in f64.

use crate::error::{Error, Result};
use crate::model::{
    axpy, dot, matmul_wt, rmsnorm, rope, silu, Linear, Matrix, ModelConfig, Parameters,
};
use crate::seqbuild::Legal;
use crate::vocab::TokenId;

/// One sequence prepared for the loss: `targets[i]` is predicted from `inputs[..=i]`.
#[derive(Clone, Copy, Debug)]
pub struct LossInput<'a> {
    pub inputs: &'a [TokenId],
    pub targets: &'a [TokenId],
    pub mask: &'a [u8],
    pub legality: &'a [Legal],
}

impl<'a> LossInput<'a> {
    /// Next-token view of a full sequence whose `loss_mask` and `legality` describe each
    /// position as a prediction target.
    pub fn shifted(tokens: &'a [TokenId], loss_mask: &'a [u8], legality: &'a [Legal]) -> Self {
        let n = tokens.len().saturating_sub(1);
        LossInput {
            inputs: &tokens[..n],
            targets: &tokens[1..],
            mask: &loss_mask[1..],
            legality: &legality[1..],
        }
    }

    /// Mean of ln(legal support size) over masked positions: the loss of a model whose
    /// restricted distributions are uniform.
    pub fn uniform_reference(&self, vocab_size: usize) -> f64 {
        let (mut s, mut c) = (0f64, 0usize);
        for (m, l) in self.mask.iter().zip(self.legality) {
            if *m == 1 {
                s += (l.support_size(vocab_size) as f64).ln();
                c += 1;
            }
        }
        s / c.max(1) as f64
    }
}

/// Summed loss over `count` masked positions.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossSum {
    pub sum: f64,
    pub count: usize,
}

impl LossSum {
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }

    pub fn add(&mut self, o: LossSum) {
        self.sum += o.sum;
        self.count += o.count;
    }
}

struct LayerTape {
    x_in: Vec<f32>,
    r1: Vec<f32>,
    xn1: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    /// `n × heads × n` attention weights, zero above the diagonal.
    probs: Vec<f32>,
    att: Vec<f32>,
    x_mid: Vec<f32>,
    r2: Vec<f32>,
    xn2: Vec<f32>,
    gate: Vec<f32>,
    up: Vec<f32>,
    act: Vec<f32>,
}

struct Tape {
    n: usize,
    layers: Vec<LayerTape>,
    x_out: Vec<f32>,
    rf: Vec<f32>,
    xf: Vec<f32>,
}

fn dense(l: &Linear) -> Result<&Matrix> {
    l.dense()
        .ok_or_else(|| Error::invalid("training requires dense projection weights"))
}

fn norm_rows(x: &[f32], gain: &[f32], eps: f32, h: usize, out: &mut [f32]) -> Vec<f32> {
    x.chunks(h)
        .zip(out.chunks_mut(h))
        .map(|(xr, o)| rmsnorm(xr, gain, eps, o))
        .collect()
}

fn forward_tape(params: &Parameters, tokens: &[TokenId]) -> Result<Tape> {
    let cfg = &params.config;
    let n = tokens.len();
    if n == 0 || n > cfg.max_seq_len {
        return Err(Error::invalid(format!(
            "sequence length {n} outside 1..={}",
            cfg.max_seq_len
        )));
    }
    let (h, kv, f, hd) = (
        cfg.hidden_size,
        cfg.kv_dim(),
        cfg.intermediate_size,
        cfg.head_dim(),
    );
    let heads = cfg.num_heads;
    let group = heads / cfg.num_kv_heads;
    let scale = 1.0 / (hd as f32).sqrt();

    let mut x = vec![0f32; n * h];
    for (i, t) in tokens.iter().enumerate() {
        if t.index() >= cfg.vocab_size {
            return Err(Error::invalid(format!("token {t} outside vocabulary")));
        }
        x[i * h..(i + 1) * h].copy_from_slice(params.embed.row(t.index()));
    }
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for layer in &params.layers {
        let x_in = x.clone();
        let mut xn1 = vec![0f32; n * h];
        let r1 = norm_rows(&x, &layer.attn_norm, cfg.norm_eps, h, &mut xn1);
        let (mut q, mut k, mut v) = (vec![0f32; n * h], vec![0f32; n * kv], vec![0f32; n * kv]);
        matmul_wt(&xn1, dense(&layer.wq)?, &mut q);
        matmul_wt(&xn1, dense(&layer.wk)?, &mut k);
        matmul_wt(&xn1, dense(&layer.wv)?, &mut v);
        for i in 0..n {
            rope(&mut q[i * h..(i + 1) * h], hd, i, cfg.rope_base, 1.0);
            rope(&mut k[i * kv..(i + 1) * kv], hd, i, cfg.rope_base, 1.0);
        }
        let mut probs = vec![0f32; n * heads * n];
        let mut att = vec![0f32; n * h];
        for i in 0..n {
            for hh in 0..heads {
                let kh = hh / group;
                let qv = &q[i * h + hh * hd..i * h + (hh + 1) * hd];
                let p = &mut probs[(i * heads + hh) * n..(i * heads + hh) * n + i + 1];
                for (j, s) in p.iter_mut().enumerate() {
                    *s = dot(qv, &k[j * kv + kh * hd..j * kv + (kh + 1) * hd]) * scale;
                }
                crate::model::softmax_in_place(p);
                let o = &mut att[i * h + hh * hd..i * h + (hh + 1) * hd];
                for (j, &w) in p.iter().enumerate() {
                    axpy(w, &v[j * kv + kh * hd..j * kv + (kh + 1) * hd], o);
                }
            }
        }
        let mut proj = vec![0f32; n * h];
        matmul_wt(&att, dense(&layer.wo)?, &mut proj);
        for (a, b) in x.iter_mut().zip(&proj) {
            *a += b;
        }
        let x_mid = x.clone();
        let mut xn2 = vec![0f32; n * h];
        let r2 = norm_rows(&x, &layer.ffn_norm, cfg.norm_eps, h, &mut xn2);
        let (mut gate, mut up) = (vec![0f32; n * f], vec![0f32; n * f]);
        matmul_wt(&xn2, dense(&layer.w_gate)?, &mut gate);
        matmul_wt(&xn2, dense(&layer.w_up)?, &mut up);
        let act: Vec<f32> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect();
        matmul_wt(&act, dense(&layer.w_down)?, &mut proj);
        for (a, b) in x.iter_mut().zip(&proj) {
            *a += b;
        }
        layers.push(LayerTape {
            x_in,
            r1,
            xn1,
            q,
            k,
            v,
            probs,
            att,
            x_mid,
            r2,
            xn2,
            gate,
            up,
            act,
        });
    }
    let mut xf = vec![0f32; n * h];
    let rf = norm_rows(&x, &params.final_norm, cfg.norm_eps, h, &mut xf);
    Ok(Tape {
        n,
        layers,
        x_out: x,
        rf,
        xf,
    })
}

fn head_matrix(params: &Parameters) -> Result<&Matrix> {
    match &params.lm_head {
        Some(l) => dense(l),
        None => Ok(&params.embed),
    }
}

/// Full logits computed through the training path; an independent route to the same
/// function as the cached inference forward.
pub fn tape_logits(params: &Parameters, tokens: &[TokenId]) -> Result<Matrix> {
    let tape = forward_tape(params, tokens)?;
    let head = head_matrix(params)?;
    let mut out = Matrix::zeros(tape.n, params.config.vocab_size);
    matmul_wt(&tape.xf, head, &mut out.data);
    Ok(out)
}

fn legal_span(l: &Legal, vocab: usize) -> Option<(usize, usize)> {
    match *l {
        Legal::Any => Some((0, vocab)),
        Legal::Span { start, end } => Some((start as usize, end as usize)),
        Legal::Only(_) => None,
    }
}

fn check_input(cfg: &ModelConfig, input: &LossInput<'_>) -> Result<()> {
    let n = input.inputs.len();
    if input.targets.len() != n || input.mask.len() != n || input.legality.len() != n {
        return Err(Error::invalid(
            "inputs, targets, mask and legality must have equal lengths",
        ));
    }
    for (i, (t, l)) in input.targets.iter().zip(input.legality).enumerate() {
        if input.mask[i] == 1 && (!l.allows(*t) || t.index() >= cfg.vocab_size) {
            return Err(Error::Data(format!(
                "target {t} at position {i} is not a legal token there"
            )));
        }
    }
    Ok(())
}

/// Masked loss of one sequence; when `grads` is given, adds d(sum)/dθ into it.
pub fn loss_and_grad(
    params: &Parameters,
    input: &LossInput<'_>,
    grads: Option<&mut Parameters>,
) -> Result<LossSum> {
    let cfg = &params.config;
    check_input(cfg, input)?;
    if input.inputs.is_empty() {
        return Ok(LossSum::default());
    }
    let tape = forward_tape(params, input.inputs)?;
    let head = head_matrix(params)?;
    let (n, h, vsz) = (tape.n, cfg.hidden_size, cfg.vocab_size);

    let mut loss = LossSum::default();
    let mut dxf = grads.as_ref().map(|_| vec![0f32; n * h]);
    let mut dhead: Vec<(usize, usize, Vec<f32>)> = Vec::new();
    let mut logits = Vec::new();
    for i in 0..n {
        if input.mask[i] != 1 {
            continue;
        }
        loss.count += 1;
        let Some((s, e)) = legal_span(&input.legality[i], vsz) else {
            continue;
        };
        let xi = &tape.xf[i * h..(i + 1) * h];
        logits.clear();
        logits.extend((s..e).map(|t| dot(xi, head.row(t))));
        let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let z: f64 = logits.iter().map(|&l| ((l - m) as f64).exp()).sum();
        let tgt = input.targets[i].index() - s;
        loss.sum += z.ln() + m as f64 - logits[tgt] as f64;
        if let Some(dxf) = dxf.as_mut() {
            let d: Vec<f32> = logits
                .iter()
                .enumerate()
                .map(|(t, &l)| {
                    let p = (((l - m) as f64).exp() / z) as f32;
                    if t == tgt {
                        p - 1.0
                    } else {
                        p
                    }
                })
                .collect();
            let dxi = &mut dxf[i * h..(i + 1) * h];
            for (t, &dt) in d.iter().enumerate() {
                axpy(dt, head.row(s + t), dxi);
            }
            dhead.push((i, s, d));
        }
    }
    if !loss.sum.is_finite() {
        return Err(Error::Numeric("non-finite training loss".into()));
    }
    let (Some(grads), Some(dxf)) = (grads, dxf) else {
        return Ok(loss);
    };
    backward(params, input.inputs, &tape, dxf, &dhead, grads)?;
    Ok(loss)
}

fn dense_mut(l: &mut Linear) -> Result<&mut Matrix> {
    l.dense_mut()
        .ok_or_else(|| Error::invalid("gradient buffers must be dense"))
}

/// `dx[i] += Σ_o dy[i, o] · w[o]`.
fn back_input(dy: &[f32], w: &Matrix, dx: &mut [f32]) {
    for (dyr, dxr) in dy.chunks(w.rows).zip(dx.chunks_mut(w.cols)) {
        for (o, &d) in dyr.iter().enumerate() {
            if d != 0.0 {
                axpy(d, w.row(o), dxr);
            }
        }
    }
}

/// `dw[o] += Σ_i dy[i, o] · x[i]`.
fn back_weight(dy: &[f32], x: &[f32], dw: &mut Matrix) {
    let (out, inp) = (dw.rows, dw.cols);
    let n = x.len() / inp;
    for o in 0..out {
        let row = dw.row_mut(o);
        for i in 0..n {
            let d = dy[i * out + o];
            if d != 0.0 {
                axpy(d, &x[i * inp..(i + 1) * inp], row);
            }
        }
    }
}

/// Backward through `y = x · r · g`; adds into `dx` and `dg`.
fn back_norm(dy: &[f32], x: &[f32], r: &[f32], g: &[f32], dx: &mut [f32], dg: &mut [f32]) {
    let h = g.len();
    for (i, &ri) in r.iter().enumerate() {
        let (dyr, xr) = (&dy[i * h..(i + 1) * h], &x[i * h..(i + 1) * h]);
        let mut s = 0f32;
        for k in 0..h {
            s += g[k] * dyr[k] * xr[k];
            dg[k] += dyr[k] * xr[k] * ri;
        }
        let c = ri * ri * ri * s / h as f32;
        let dxr = &mut dx[i * h..(i + 1) * h];
        for k in 0..h {
            dxr[k] += ri * g[k] * dyr[k] - xr[k] * c;
        }
    }
}

fn backward(
    params: &Parameters,
    tokens: &[TokenId],
    tape: &Tape,
    dxf: Vec<f32>,
    dhead: &[(usize, usize, Vec<f32>)],
    grads: &mut Parameters,
) -> Result<()> {
    let cfg = &params.config;
    let (n, h, kv, f, hd) = (
        tape.n,
        cfg.hidden_size,
        cfg.kv_dim(),
        cfg.intermediate_size,
        cfg.head_dim(),
    );
    let heads = cfg.num_heads;
    let group = heads / cfg.num_kv_heads;
    let scale = 1.0 / (hd as f32).sqrt();

    {
        let gh = match &mut grads.lm_head {
            Some(l) => dense_mut(l)?,
            None => &mut grads.embed,
        };
        for (i, s, d) in dhead {
            let xi = &tape.xf[i * h..(i + 1) * h];
            for (t, &dt) in d.iter().enumerate() {
                axpy(dt, xi, gh.row_mut(s + t));
            }
        }
    }
    let mut dx = vec![0f32; n * h];
    back_norm(
        &dxf,
        &tape.x_out,
        &tape.rf,
        &params.final_norm,
        &mut dx,
        &mut grads.final_norm,
    );

    for (l, (layer, t)) in params.layers.iter().zip(&tape.layers).enumerate().rev() {
        let gl = &mut grads.layers[l];
        // Feed-forward half.
        let mut dact = vec![0f32; n * f];
        back_input(&dx, dense(&layer.w_down)?, &mut dact);
        back_weight(&dx, &t.act, dense_mut(&mut gl.w_down)?);
        let mut dgate = vec![0f32; n * f];
        let mut dup = vec![0f32; n * f];
        for k in 0..n * f {
            let g = t.gate[k];
            let sig = 1.0 / (1.0 + (-g).exp());
            let sg = g * sig;
            dup[k] = dact[k] * sg;
            dgate[k] = dact[k] * t.up[k] * (sig * (1.0 + g * (1.0 - sig)));
        }
        let mut dxn2 = vec![0f32; n * h];
        back_input(&dgate, dense(&layer.w_gate)?, &mut dxn2);
        back_input(&dup, dense(&layer.w_up)?, &mut dxn2);
        back_weight(&dgate, &t.xn2, dense_mut(&mut gl.w_gate)?);
        back_weight(&dup, &t.xn2, dense_mut(&mut gl.w_up)?);
        // dx currently holds d/dx_out; the residual passes it to x_mid.
        back_norm(&dxn2, &t.x_mid, &t.r2, &layer.ffn_norm, &mut dx, &mut gl.ffn_norm);

        // Attention half.
        let mut datt = vec![0f32; n * h];
        back_input(&dx, dense(&layer.wo)?, &mut datt);
        back_weight(&dx, &t.att, dense_mut(&mut gl.wo)?);
        let mut dq = vec![0f32; n * h];
        let mut dk = vec![0f32; n * kv];
        let mut dv = vec![0f32; n * kv];
        let mut dp = vec![0f32; n];
        for i in 0..n {
            for hh in 0..heads {
                let kh = hh / group;
                let p = &t.probs[(i * heads + hh) * n..(i * heads + hh) * n + i + 1];
                let da = &datt[i * h + hh * hd..i * h + (hh + 1) * hd];
                let mut s = 0f32;
                for j in 0..=i {
                    let vj = j * kv + kh * hd..j * kv + (kh + 1) * hd;
                    dp[j] = dot(da, &t.v[vj.clone()]);
                    s += p[j] * dp[j];
                    axpy(p[j], da, &mut dv[vj]);
                }
                let qi = i * h + hh * hd..i * h + (hh + 1) * hd;
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - s) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = j * kv + kh * hd..j * kv + (kh + 1) * hd;
                    axpy(ds, &t.k[kj.clone()], &mut dq[qi.clone()]);
                    axpy(ds, &t.q[qi.clone()], &mut dk[kj]);
                }
            }
        }
        for i in 0..n {
            rope(&mut dq[i * h..(i + 1) * h], hd, i, cfg.rope_base, -1.0);
            rope(&mut dk[i * kv..(i + 1) * kv], hd, i, cfg.rope_base, -1.0);
        }
        let mut dxn1 = vec![0f32; n * h];
        back_input(&dq, dense(&layer.wq)?, &mut dxn1);
        back_input(&dk, dense(&layer.wk)?, &mut dxn1);
        back_input(&dv, dense(&layer.wv)?, &mut dxn1);
        back_weight(&dq, &t.xn1, dense_mut(&mut gl.wq)?);
        back_weight(&dk, &t.xn1, dense_mut(&mut gl.wk)?);
        back_weight(&dv, &t.xn1, dense_mut(&mut gl.wv)?);
        back_norm(&dxn1, &t.x_in, &t.r1, &layer.attn_norm, &mut dx, &mut gl.attn_norm);
    }
    for (i, tok) in tokens.iter().enumerate() {
        axpy(1.0, &dx[i * h..(i + 1) * h], grads.embed.row_mut(tok.index()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_logits, init_params};

    fn toy() -> Parameters {
        let mut cfg = ModelConfig::preset("tiny").unwrap();
        cfg.vocab_size = 40;
        cfg.hidden_size = 16;
        cfg.intermediate_size = 24;
        cfg.num_heads = 2;
        cfg.num_kv_heads = 1;
        cfg.num_layers = 2;
        let mut p = init_params(&cfg, 5).unwrap();
        // Larger weights make every term of the gradient visible.
        for w in p.flat_mut().unwrap() {
            for v in w.iter_mut() {
                *v *= 3.0;
            }
        }
        p
    }

    #[test]
    fn tape_matches_cached_forward() {
        let p = toy();
        let toks: Vec<TokenId> = (0..9).map(|i| TokenId(i * 7 % 40)).collect();
        let a = tape_logits(&p, &toks).unwrap();
        let b = forward_logits(&p, &toks).unwrap();
        let d = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0f32, f32::max);
        assert!(d < 1e-5, "{d}");
    }

    #[test]
    fn gradients_match_central_differences() {
        let p = toy();
        let toks: Vec<TokenId> = [1usize, 5, 9, 33, 2, 20, 7].map(TokenId::from).to_vec();
        let mask = [0u8, 1, 1, 0, 1, 1, 1];
        let legality = vec![
            Legal::Any,
            Legal::Any,
            Legal::Span { start: 0, end: 20 },
            Legal::Any,
            Legal::Span { start: 0, end: 30 },
            Legal::Span { start: 10, end: 25 },
            Legal::Only(TokenId(7)),
        ];
        let input = LossInput::shifted(&toks, &mask, &legality);
        let mut g = Parameters::zeros(&p.config).unwrap();
        let base = loss_and_grad(&p, &input, Some(&mut g)).unwrap();
        assert!(base.count > 0);
        let grads: Vec<Vec<f32>> = g.flat().unwrap().iter().map(|s| s.to_vec()).collect();
        let eps = 1e-3f32;
        let mut checked = 0;
        for (ti, gt) in grads.iter().enumerate() {
            for idx in (0..gt.len()).step_by(gt.len() / 5 + 1) {
                let mut plus = p.clone();
                plus.flat_mut().unwrap()[ti][idx] += eps;
                let mut minus = p.clone();
                minus.flat_mut().unwrap()[ti][idx] -= eps;
                let lp = loss_and_grad(&plus, &input, None).unwrap().sum;
                let lm = loss_and_grad(&minus, &input, None).unwrap().sum;
                let fd = (lp - lm) / (2.0 * eps as f64);
                let an = gt[idx] as f64;
                let err = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-2);
                assert!(err < 1e-2, "tensor {ti} index {idx}: fd {fd} analytic {an}");
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn forced_positions_add_nothing() {
        let p = toy();
        let toks: Vec<TokenId> = [1usize, 5, 9].map(TokenId::from).to_vec();
        let legality = vec![Legal::Any, Legal::Only(TokenId(5)), Legal::Only(TokenId(9))];
        let input = LossInput::shifted(&toks, &[0, 1, 1], &legality);
        let mut g = Parameters::zeros(&p.config).unwrap();
        let l = loss_and_grad(&p, &input, Some(&mut g)).unwrap();
        assert_eq!(l, LossSum { sum: 0.0, count: 2 });
        assert!(g.flat().unwrap().iter().all(|t| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn illegal_target_is_rejected() {
        let p = toy();
        let toks: Vec<TokenId> = [1usize, 25].map(TokenId::from).to_vec();
        let legality = vec![Legal::Any, Legal::Span { start: 0, end: 20 }];
        let input = LossInput::shifted(&toks, &[0, 1], &legality);
        assert!(matches!(loss_and_grad(&p, &input, None), Err(Error::Data(_))));
    }
}
