//! Autoregressive and speculative Jacobi decoding over the static KV cache.
//!
//! Both decoders share one state layout: every context token is committed to the cache
//! except the newest generated token (the *head*), whose successor distribution is the
//! next thing to compute. The first forward pass is the prefill over the prefix, and it
//! yields the first generated token. After that, autoregressive decoding forwards the head
//! alone, while Jacobi decoding forwards the head together with `W - 1` draft tokens and
//! keeps the longest prefix that passes the likelihood-ratio test.
//!
//! Under this accounting both decoders spend exactly one forward pass per token at
//! `W = 1`, and any accepted draft is a pass saved.

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvcache::{CausalMask, StaticKvCache};
use crate::model::{forward_window, LogitRows, Matrix, Parameters};
use crate::seqbuild::{BlockGrammar, Legal};
use crate::vocab::TokenId;

pub const DEFAULT_WINDOW: usize = 16;

fn default_temperature() -> f32 {
    1.0
}

fn default_max_new_tokens() -> usize {
    4096
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// 0 selects the argmax.
    #[serde(default = "default_temperature")]
    pub temperature: f32,
    #[serde(default)]
    pub top_k: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
    /// Logit-level guidance scale (at least 1); off when absent.
    #[serde(default)]
    pub guidance_scale: Option<f32>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            temperature: default_temperature(),
            top_k: None,
            seed: 0,
            max_new_tokens: default_max_new_tokens(),
            guidance_scale: None,
        }
    }
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        SamplerConfig {
            temperature: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config("temperature must be a finite value >= 0".into()));
        }
        if let Some(k) = self.top_k {
            if k == 0 || k > vocab_size {
                return Err(Error::Config(format!("top_k must be in 1..={vocab_size}")));
            }
        }
        if let Some(s) = self.guidance_scale {
            if !(s >= 1.0) {
                return Err(Error::Config("guidance_scale must be at least 1".into()));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Distributions and sampling

fn candidates(logits: &[f32], top_k: Option<usize>, legal: Legal) -> Vec<usize> {
    let mut ids: Vec<usize> = match legal {
        Legal::Any => (0..logits.len()).collect(),
        Legal::Span { start, end } => (start as usize..(end as usize).min(logits.len())).collect(),
        Legal::Only(t) => vec![t.index()],
    };
    if let Some(k) = top_k {
        if k < ids.len() {
            // Larger logit first; equal logits keep ascending id order.
            ids.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
            ids.truncate(k);
            ids.sort_unstable();
        }
    }
    ids
}

fn check_logits(logits: &[f32]) -> Result<()> {
    if logits.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN in logits".into()));
    }
    Ok(())
}

fn softmax_over(logits: &[f32], ids: &[usize], temperature: f32) -> Vec<f32> {
    let mut out = vec![0f32; logits.len()];
    let m = ids.iter().map(|&i| logits[i]).fold(f32::NEG_INFINITY, f32::max);
    let w: Vec<f64> = ids
        .iter()
        .map(|&i| (((logits[i] - m) / temperature) as f64).exp())
        .collect();
    let z: f64 = w.iter().sum();
    for (&i, wi) in ids.iter().zip(&w) {
        out[i] = (wi / z) as f32;
    }
    out
}

fn argmax_of(logits: &[f32], ids: &[usize]) -> usize {
    let mut best = ids[0];
    for &i in &ids[1..] {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    best
}

/// The distribution `sample_token` draws from: temperature- and top-k-filtered softmax
/// over the legal ids, or a point mass on the argmax at temperature 0.
pub fn distribution(logits: &[f32], sc: &SamplerConfig, legal: Legal) -> Result<Vec<f32>> {
    check_logits(logits)?;
    let ids = candidates(logits, sc.top_k, legal);
    if ids.is_empty() {
        return Err(Error::invalid("no legal token to sample"));
    }
    if sc.temperature == 0.0 {
        let mut out = vec![0f32; logits.len()];
        out[argmax_of(logits, &ids)] = 1.0;
        return Ok(out);
    }
    Ok(softmax_over(logits, &ids, sc.temperature))
}

/// Inverse-CDF draw; ties in the uniform go to the lower id.
pub fn sample_from(dist: &[f32], rng: &mut impl Rng) -> usize {
    let total: f64 = dist.iter().map(|&p| p as f64).sum();
    let target = rng.random::<f64>() * total;
    let mut acc = 0f64;
    for (i, &p) in dist.iter().enumerate() {
        acc += p as f64;
        if target < acc && p > 0.0 {
            return i;
        }
    }
    dist.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Samples one token and returns it with its post-filter probability. At temperature 0
/// the argmax is returned with its probability under the filtered softmax.
pub fn sample_token(
    logits: &[f32],
    sc: &SamplerConfig,
    legal: Legal,
    rng: &mut impl Rng,
) -> Result<(TokenId, f32)> {
    check_logits(logits)?;
    let ids = candidates(logits, sc.top_k, legal);
    if ids.is_empty() {
        return Err(Error::invalid("no legal token to sample"));
    }
    if sc.temperature == 0.0 {
        let best = argmax_of(logits, &ids);
        let p = softmax_over(logits, &ids, 1.0)[best];
        return Ok((TokenId::from(best), p));
    }
    let dist = softmax_over(logits, &ids, sc.temperature);
    let t = sample_from(&dist, rng);
    Ok((TokenId::from(t), dist[t]))
}

/// Likelihood-ratio acceptance: `u < min(1, target / draft)`.
pub fn sjd_accept(draft_prob: f32, target_prob: f32, u: f32) -> bool {
    u < (target_prob / draft_prob).min(1.0)
}

/// `normalize(max(0, target - draft))`, or `target` when that residual has no mass.
pub fn residual(target: &[f32], draft: &[f32]) -> Vec<f32> {
    let mut r: Vec<f32> = target.iter().zip(draft).map(|(t, d)| (t - d).max(0.0)).collect();
    let z: f64 = r.iter().map(|&v| v as f64).sum();
    if z <= 1e-12 {
        return target.to_vec();
    }
    for v in r.iter_mut() {
        *v = (*v as f64 / z) as f32;
    }
    r
}

/// `dist` restricted to `legal` and renormalized; uniform over `legal` when no mass is left.
pub fn restrict(dist: &[f32], legal: Legal) -> Vec<f32> {
    let mut out = vec![0f32; dist.len()];
    let ids = candidates(dist, None, legal);
    let z: f64 = ids.iter().map(|&i| dist[i] as f64).sum();
    for &i in &ids {
        out[i] = if z > 0.0 {
            (dist[i] as f64 / z) as f32
        } else {
            1.0 / ids.len() as f32
        };
    }
    out
}

// ---------------------------------------------------------------------------
// Constraints

/// What may be generated at each step.
#[derive(Clone, Debug)]
pub enum Constraint {
    /// Follow an image-block grammar; generation ends with the block.
    Grammar(BlockGrammar),
    /// Any token; generation ends after a stop token.
    Free { stop: Vec<TokenId> },
}

impl Constraint {
    /// Legality of the `k`-th generated token (0-based).
    pub fn legal(&self, k: usize) -> Legal {
        match self {
            Constraint::Grammar(g) => g.legal_at(k),
            Constraint::Free { .. } => Legal::Any,
        }
    }

    /// Upper bound on generated tokens.
    pub fn limit(&self) -> usize {
        match self {
            Constraint::Grammar(g) => g.remaining(),
            Constraint::Free { .. } => usize::MAX,
        }
    }

    fn stops(&self, t: TokenId) -> bool {
        match self {
            Constraint::Grammar(g) => t == g.vocab.special(crate::vocab::Special::ImageEnd),
            Constraint::Free { stop } => stop.contains(&t),
        }
    }
}

// ---------------------------------------------------------------------------
// Generator state

struct Branch {
    cache: StaticKvCache,
    scale: f32,
}

/// Cache arenas and the shared mask for one generation task. Arenas are allocated once
/// and reused by every generation run through this value.
pub struct Generator<'p> {
    params: &'p Parameters,
    mask: Arc<CausalMask>,
    cache: StaticKvCache,
    uncond: Option<Branch>,
}

impl<'p> Generator<'p> {
    pub fn new(params: &'p Parameters, capacity: usize) -> Result<Self> {
        Self::with_mask(params, Arc::new(CausalMask::new(capacity)))
    }

    /// Shares a pre-computed mask; the cache capacity equals the mask's.
    pub fn with_mask(params: &'p Parameters, mask: Arc<CausalMask>) -> Result<Self> {
        Ok(Generator {
            cache: StaticKvCache::with_capacity(&params.config, mask.capacity())?,
            params,
            mask,
            uncond: None,
        })
    }

    /// Adds the unconditional arena used by guidance.
    pub fn enable_guidance(&mut self, scale: f32) -> Result<()> {
        if !(scale >= 1.0) {
            return Err(Error::Config("guidance_scale must be at least 1".into()));
        }
        match &mut self.uncond {
            Some(b) => b.scale = scale,
            None => {
                self.uncond = Some(Branch {
                    cache: StaticKvCache::with_capacity(&self.params.config, self.mask.capacity())?,
                    scale,
                })
            }
        }
        Ok(())
    }

    pub fn params(&self) -> &Parameters {
        self.params
    }

    pub fn cache(&self) -> &StaticKvCache {
        &self.cache
    }

    pub fn arena_fingerprint(&self) -> Vec<(usize, usize)> {
        let mut f = self.cache.arena_fingerprint();
        if let Some(b) = &self.uncond {
            f.extend(b.cache.arena_fingerprint());
        }
        f
    }

    fn forward(&mut self, tokens: &[TokenId], rows: LogitRows) -> Result<Matrix> {
        let mut c = forward_window(self.params, &mut self.cache, &self.mask, tokens, rows)?;
        if let Some(b) = &mut self.uncond {
            let u = forward_window(self.params, &mut b.cache, &self.mask, tokens, rows)?;
            for (cv, uv) in c.data.iter_mut().zip(&u.data) {
                *cv = uv + b.scale * (*cv - uv);
            }
        }
        Ok(c)
    }

    fn commit(&mut self, n: usize) -> Result<()> {
        self.cache.commit(n)?;
        if let Some(b) = &mut self.uncond {
            b.cache.commit(n)?;
        }
        Ok(())
    }

    /// Resets the arenas and runs the prefix; returns the logits of the first new token.
    fn prefill(&mut self, input: &GenerationInput<'_>) -> Result<Vec<f32>> {
        if input.prefix.is_empty() {
            return Err(Error::invalid("empty prefix"));
        }
        self.cache.reset();
        let mut c =
            forward_window(self.params, &mut self.cache, &self.mask, input.prefix, LogitRows::Last)?;
        self.cache.commit(input.prefix.len())?;
        if let Some(b) = &mut self.uncond {
            let up = input
                .uncond_prefix
                .ok_or_else(|| Error::invalid("guidance needs an unconditional prefix"))?;
            b.cache.reset();
            let u = forward_window(self.params, &mut b.cache, &self.mask, up, LogitRows::Last)?;
            b.cache.commit(up.len())?;
            for (cv, uv) in c.data.iter_mut().zip(&u.data) {
                *cv = uv + b.scale * (*cv - uv);
            }
        }
        Ok(c.data)
    }
}

/// Prefix and constraint of one generation.
#[derive(Clone, Debug)]
pub struct GenerationInput<'a> {
    pub prefix: &'a [TokenId],
    /// Prefix of the unconditional branch; required when guidance is on.
    pub uncond_prefix: Option<&'a [TokenId]>,
    pub constraint: Constraint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Ar,
    Sjd,
}

impl DecodeMode {
    pub fn name(self) -> &'static str {
        match self {
            DecodeMode::Ar => "ar",
            DecodeMode::Sjd => "sjd",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeStats {
    pub mode: String,
    #[serde(rename = "W")]
    pub window: usize,
    pub forward_passes: usize,
    pub tokens: usize,
    pub accepted_per_pass_mean: f64,
    pub wall_ms: f64,
}

impl DecodeStats {
    fn new(mode: DecodeMode, window: usize, passes: usize, tokens: usize, start: Instant) -> Self {
        DecodeStats {
            mode: mode.name().into(),
            window,
            forward_passes: passes,
            tokens,
            accepted_per_pass_mean: if passes == 0 {
                0.0
            } else {
                tokens as f64 / passes as f64
            },
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        }
    }

    /// Single-line JSON record.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("stats serialize")
    }
}

fn limit(sc: &SamplerConfig, c: &Constraint) -> usize {
    sc.max_new_tokens.min(c.limit())
}

impl Generator<'_> {
    /// One forward pass per generated token.
    pub fn ar_generate(
        &mut self,
        input: &GenerationInput<'_>,
        sc: &SamplerConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<TokenId>, DecodeStats)> {
        let start = Instant::now();
        let limit = limit(sc, &input.constraint);
        let mut out = Vec::new();
        if limit == 0 {
            return Ok((out, DecodeStats::new(DecodeMode::Ar, 1, 0, 0, start)));
        }
        let mut logits = self.prefill(input)?;
        let mut passes = 1;
        loop {
            let (t, _) = sample_token(&logits, sc, input.constraint.legal(out.len()), rng)?;
            out.push(t);
            if out.len() >= limit || input.constraint.stops(t) {
                break;
            }
            logits = self.forward(&[t], LogitRows::Last)?.data;
            self.commit(1)?;
            passes += 1;
        }
        let n = out.len();
        Ok((out, DecodeStats::new(DecodeMode::Ar, 1, passes, n, start)))
    }
}

// ---------------------------------------------------------------------------
// Speculative Jacobi decoding

/// The tokens forwarded together in one Jacobi pass. Entry 0 is the head, an exact
/// sample of its conditional, so it is never tested; entries `1..` are drafts.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobiWindow {
    pub window_size: usize,
    pub draft_tokens: Vec<TokenId>,
    /// Probability of each token under the distribution it was drawn from.
    pub draft_probs: Vec<f32>,
    /// Those distributions, kept for residual resampling on rejection.
    pub draft_dists: Vec<Vec<f32>>,
    /// Absolute position of entry 0.
    pub committed_base: usize,
    /// Generation index of entry 0.
    pub head_index: usize,
}

/// Outcome of one Jacobi pass.
#[derive(Clone, Debug)]
pub struct SjdStep {
    /// Tokens committed by this pass (the old head first).
    pub accepted: Vec<TokenId>,
    /// New head followed by refreshed drafts.
    pub window: JacobiWindow,
}

fn draft(dist: &[f32], legal: Legal, rng: &mut ChaCha8Rng) -> (TokenId, f32, Vec<f32>) {
    let q = restrict(dist, legal);
    let t = sample_from(&q, rng);
    (TokenId::from(t), q[t], q)
}

fn uniform(vocab: usize) -> Vec<f32> {
    vec![1.0 / vocab as f32; vocab]
}

impl Generator<'_> {
    /// Verifies `window` with one forward pass, commits the accepted prefix and returns the
    /// next window of at most `next_size` entries. `targets` receives the pass's
    /// distributions (row `i` is the distribution of generation index `head_index + i + 1`).
    pub fn sjd_step(
        &mut self,
        window: &JacobiWindow,
        constraint: &Constraint,
        sc: &SamplerConfig,
        next_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<SjdStep> {
        let n = window.draft_tokens.len();
        if n == 0 || n > window.window_size {
            return Err(Error::invalid("window must hold 1..=W entries"));
        }
        if window.committed_base != self.cache.committed() {
            return Err(Error::invalid("window base does not match the cache cursor"));
        }
        let g0 = window.head_index;
        let logits = self.forward(&window.draft_tokens, LogitRows::All)?;
        let targets = (0..n)
            .map(|i| distribution(logits.row(i), sc, constraint.legal(g0 + i + 1)))
            .collect::<Result<Vec<_>>>()?;

        let mut r = n;
        for i in 1..n {
            let x = window.draft_tokens[i].index();
            let u = rng.random::<f32>();
            if !sjd_accept(window.draft_probs[i], targets[i - 1][x], u) {
                r = i;
                break;
            }
        }
        self.commit(r)?;
        let accepted = window.draft_tokens[..r].to_vec();

        // New head: residual resample at the rejected slot, or the free token.
        let head_dist = if r < n {
            residual(&targets[r - 1], &window.draft_dists[r])
        } else {
            targets[n - 1].clone()
        };
        let head = sample_from(&head_dist, rng);
        let head_index = g0 + r;
        let mut next = JacobiWindow {
            window_size: window.window_size,
            draft_tokens: vec![TokenId::from(head)],
            draft_probs: vec![head_dist[head]],
            draft_dists: vec![head_dist],
            committed_base: self.cache.committed(),
            head_index,
        };
        for m in 1..next_size.min(window.window_size) {
            let k = head_index + m;
            // Row `k - g0 - 1` of this pass predicted index `k`; past the last row, reuse it.
            let src = &targets[(k - g0 - 1).min(n - 1)];
            let (t, p, q) = draft(src, constraint.legal(k), rng);
            next.draft_tokens.push(t);
            next.draft_probs.push(p);
            next.draft_dists.push(q);
        }
        Ok(SjdStep {
            accepted,
            window: next,
        })
    }

    /// Speculative Jacobi decoding with window size `w`.
    pub fn sjd_generate(
        &mut self,
        input: &GenerationInput<'_>,
        sc: &SamplerConfig,
        w: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<TokenId>, DecodeStats)> {
        if w == 0 {
            return Err(Error::invalid("window size must be at least 1"));
        }
        let start = Instant::now();
        let limit = limit(sc, &input.constraint);
        let c = &input.constraint;
        let mut out = Vec::new();
        if limit == 0 {
            return Ok((out, DecodeStats::new(DecodeMode::Sjd, w, 0, 0, start)));
        }
        let first = self.prefill(input)?;
        let mut passes = 1;
        let vocab = self.params.config.vocab_size;
        let head_dist = distribution(&first, sc, c.legal(0))?;
        let head = sample_from(&head_dist, rng);
        let mut window = JacobiWindow {
            window_size: w,
            draft_tokens: vec![TokenId::from(head)],
            draft_probs: vec![head_dist[head]],
            draft_dists: vec![head_dist],
            committed_base: self.cache.committed(),
            head_index: 0,
        };
        for k in 1..w.min(limit) {
            let (t, p, q) = draft(&uniform(vocab), c.legal(k), rng);
            window.draft_tokens.push(t);
            window.draft_probs.push(p);
            window.draft_dists.push(q);
        }
        loop {
            // `produced` counts the head; the window may not run past the limit.
            let produced = window.head_index + 1;
            let head = window.draft_tokens[0];
            if produced >= limit || c.stops(head) {
                out.push(head);
                break;
            }
            // Committing all `size` entries makes the new head index `head_index + size`.
            let size = w.min(limit - produced).min(window.draft_tokens.len());
            window.draft_tokens.truncate(size);
            window.draft_probs.truncate(size);
            window.draft_dists.truncate(size);
            let step = self.sjd_step(&window, c, sc, w, rng)?;
            passes += 1;
            let stop_at = step.accepted.iter().position(|&t| c.stops(t));
            match stop_at {
                Some(i) => {
                    out.extend_from_slice(&step.accepted[..=i]);
                    break;
                }
                None => out.extend_from_slice(&step.accepted),
            }
            window = step.window;
        }
        let n = out.len();
        Ok((out, DecodeStats::new(DecodeMode::Sjd, w, passes, n, start)))
    }
}

/// Convenience wrapper: allocates a generator sized for `input` and runs autoregressive
/// decoding with the RNG stream `(sc.seed, stream)`.
pub fn ar_generate(
    params: &Parameters,
    input: &GenerationInput<'_>,
    sc: &SamplerConfig,
    stream: u64,
) -> Result<(Vec<TokenId>, DecodeStats)> {
    let mut g = generator_for(params, input, sc)?;
    g.ar_generate(input, sc, &mut rng_for(sc.seed, stream))
}

/// Convenience wrapper for speculative Jacobi decoding; see [`ar_generate`].
pub fn sjd_generate(
    params: &Parameters,
    input: &GenerationInput<'_>,
    sc: &SamplerConfig,
    w: usize,
    stream: u64,
) -> Result<(Vec<TokenId>, DecodeStats)> {
    let mut g = generator_for(params, input, sc)?;
    g.sjd_generate(input, sc, w, &mut rng_for(sc.seed, stream))
}

pub fn generator_for<'p>(
    params: &'p Parameters,
    input: &GenerationInput<'_>,
    sc: &SamplerConfig,
) -> Result<Generator<'p>> {
    sc.validate(params.config.vocab_size)?;
    let longest = input
        .prefix
        .len()
        .max(input.uncond_prefix.map_or(0, |u| u.len()));
    let need = longest + limit(sc, &input.constraint).min(params.config.max_seq_len);
    let cap = need.min(params.config.max_seq_len).max(1);
    if longest > cap {
        return Err(Error::Capacity {
            requested: longest,
            capacity: cap,
        });
    }
    let mut g = Generator::new(params, cap)?;
    if let Some(s) = sc.guidance_scale {
        g.enable_guidance(s)?;
    }
    Ok(g)
}

/// Counter-based stream: candidate `stream` of base seed `seed`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_logits, init_params, ModelConfig};

    fn toy(vocab: usize, seed: u64, sharpen: f32) -> Parameters {
        let mut cfg = ModelConfig::preset("tiny").unwrap();
        cfg.vocab_size = vocab;
        cfg.hidden_size = 32;
        cfg.intermediate_size = 64;
        cfg.num_layers = 2;
        cfg.max_seq_len = 128;
        let mut p = init_params(&cfg, seed).unwrap();
        if let Some(h) = p.lm_head.as_mut().and_then(|h| h.dense_mut()) {
            h.data.iter_mut().for_each(|v| *v *= sharpen);
        }
        p
    }

    fn free(prefix: &[TokenId]) -> GenerationInput<'_> {
        GenerationInput {
            prefix,
            uncond_prefix: None,
            constraint: Constraint::Free { stop: vec![] },
        }
    }

    #[test]
    fn sample_token_examples() {
        let mut rng = rng_for(0, 0);
        let mut l = vec![0f32; 5];
        l[3] = 1e9;
        let sc = SamplerConfig::default();
        let (t, p) = sample_token(&l, &sc, Legal::Any, &mut rng).unwrap();
        assert_eq!((t, p), (TokenId(3), 1.0));
        let (t, _) = sample_token(&[1.0, 2.0, 3.0], &SamplerConfig::greedy(), Legal::Any, &mut rng).unwrap();
        assert_eq!(t, TokenId(2));
        let k1 = SamplerConfig {
            top_k: Some(1),
            ..Default::default()
        };
        let (t, p) = sample_token(&[0.5; 4], &k1, Legal::Any, &mut rng).unwrap();
        assert_eq!((t, p), (TokenId(0), 1.0));
        assert!(matches!(
            sample_token(&[f32::NAN, 1.0], &sc, Legal::Any, &mut rng),
            Err(Error::Numeric(_))
        ));
        let (t, _) = sample_token(&[9.0, 0.0, 1.0], &SamplerConfig::greedy(), Legal::Span { start: 1, end: 3 }, &mut rng).unwrap();
        assert_eq!(t, TokenId(2));
    }

    #[test]
    fn greedy_probability_is_filtered_softmax() {
        let mut rng = rng_for(0, 0);
        let (_, p) = sample_token(&[0.0, 0.0, 1.0], &SamplerConfig::greedy(), Legal::Any, &mut rng).unwrap();
        let e = 1f64.exp();
        assert!((p as f64 - e / (e + 2.0)).abs() < 1e-6);
    }

    #[test]
    fn accept_rule_examples() {
        assert!(sjd_accept(0.3, 0.3, 0.999));
        assert!(sjd_accept(0.4, 0.2, 0.3));
        assert!(!sjd_accept(0.4, 0.2, 0.7));
    }

    #[test]
    fn residual_examples() {
        let r = residual(&[0.5, 0.5, 0.0], &[1.0, 0.0, 0.0]);
        assert_eq!(r, vec![0.0, 1.0, 0.0]);
        let t = [0.2, 0.8];
        assert_eq!(residual(&t, &t), t.to_vec());
    }

    #[test]
    fn zero_budget_is_empty() {
        let p = toy(16, 1, 1.0);
        let prefix = [TokenId(1), TokenId(2)];
        let sc = SamplerConfig {
            max_new_tokens: 0,
            ..Default::default()
        };
        assert!(ar_generate(&p, &free(&prefix), &sc, 0).unwrap().0.is_empty());
        assert!(sjd_generate(&p, &free(&prefix), &sc, 4, 0).unwrap().0.is_empty());
    }

    #[test]
    fn greedy_sjd_equals_ar_and_uncached_oracle() {
        let p = toy(16, 3, 4.0);
        let sc = SamplerConfig {
            max_new_tokens: 20,
            ..SamplerConfig::greedy()
        };
        for s in 0..10u32 {
            let prefix: Vec<TokenId> = (0..3).map(|i| TokenId((s * 5 + i * 3) % 16)).collect();
            let (ar, st) = ar_generate(&p, &free(&prefix), &sc, 0).unwrap();
            assert_eq!(st.forward_passes, st.tokens);
            for w in [1, 2, 5, 16] {
                let (sj, stats) = sjd_generate(&p, &free(&prefix), &sc, w, 0).unwrap();
                assert_eq!(sj, ar, "prefix {s} W {w}");
                assert!(stats.forward_passes <= stats.tokens);
                assert!(stats.tokens <= stats.forward_passes * w);
                if w == 1 {
                    assert_eq!(stats.forward_passes, stats.tokens);
                }
            }
            // Uncached greedy oracle.
            let mut seq = prefix.clone();
            for _ in 0..20 {
                let l = forward_logits(&p, &seq).unwrap();
                let row = l.row(l.rows - 1);
                let best = (0..16).fold(0, |b, i| if row[i] > row[b] { i } else { b });
                seq.push(TokenId::from(best));
            }
            assert_eq!(&seq[3..], &ar[..]);
        }
    }

    #[test]
    fn stop_tokens_end_generation() {
        let p = toy(16, 3, 4.0);
        let sc = SamplerConfig {
            max_new_tokens: 30,
            ..SamplerConfig::greedy()
        };
        let prefix = [TokenId(1)];
        let (full, _) = ar_generate(&p, &free(&prefix), &sc, 0).unwrap();
        let stop = full[4];
        let first = full.iter().position(|&t| t == stop).unwrap();
        let input = GenerationInput {
            prefix: &prefix,
            uncond_prefix: None,
            constraint: Constraint::Free { stop: vec![stop] },
        };
        let (ar, _) = ar_generate(&p, &input, &sc, 0).unwrap();
        let (sj, _) = sjd_generate(&p, &input, &sc, 6, 0).unwrap();
        assert_eq!(ar, full[..=first].to_vec());
        assert_eq!(sj, ar);
    }

    #[test]
    fn stochastic_runs_are_reproducible() {
        let p = toy(16, 2, 2.0);
        let sc = SamplerConfig {
            max_new_tokens: 12,
            seed: 9,
            ..Default::default()
        };
        let prefix = [TokenId(4), TokenId(5)];
        let a = sjd_generate(&p, &free(&prefix), &sc, 4, 3).unwrap().0;
        assert_eq!(a, sjd_generate(&p, &free(&prefix), &sc, 4, 3).unwrap().0);
        assert_eq!(a.len(), 12);
    }

    #[test]
    fn guidance_with_unit_scale_matches_plain_greedy() {
        let p = toy(16, 5, 3.0);
        let prefix = [TokenId(2), TokenId(3), TokenId(4)];
        let sc = SamplerConfig {
            max_new_tokens: 10,
            ..SamplerConfig::greedy()
        };
        let plain = ar_generate(&p, &free(&prefix), &sc, 0).unwrap().0;
        let guided = SamplerConfig {
            guidance_scale: Some(1.0),
            ..sc.clone()
        };
        let input = GenerationInput {
            prefix: &prefix,
            uncond_prefix: Some(&prefix[2..]),
            constraint: Constraint::Free { stop: vec![] },
        };
        assert_eq!(ar_generate(&p, &input, &guided, 0).unwrap().0, plain);
        let strong = SamplerConfig {
            guidance_scale: Some(3.0),
            ..sc
        };
        let a = ar_generate(&p, &input, &strong, 0).unwrap().0;
        assert_eq!(sjd_generate(&p, &input, &strong, 4, 0).unwrap().0, a);
    }
}
