//! End-to-end generation: optional prompt refinement, candidate fan-out over RNG streams,
//! verifier scoring and best-of-N selection.
//!
//! Verifier scores are min-max normalized per verifier across the candidate set and
//! averaged with equal weights. A verifier with no spread across the set contributes 0.
//! Candidates whose token stream does not parse are kept with `-inf` scores.

use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::corpus::PALETTE;
use crate::decode::{
    generator_for, rng_for, Constraint, DecodeMode, DecodeStats, GenerationInput, SamplerConfig,
};
use crate::error::{Error, Result};
use crate::imgcodec::{decode_tokens, encode_image, psnr, Codebook, ImageGrid};
use crate::model::Parameters;
use crate::quant::{quantize_params, QuantPolicy};
use crate::seqbuild::{SeqBuilder, TaskKind, TaskTexts};
use crate::vocab::TokenId;

pub const ENV_ENDPOINT: &str = "REFINER_ENDPOINT";
pub const ENV_KEY: &str = "REFINER_KEY";
pub const DEFAULT_SUFFIX: &str = ", one centered object, flat solid colors, plain background";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(20);
/// Marker the endpoint is asked to put before its final answer.
pub const REFINED_MARKER: &str = "Refined prompt:";

/// Instruction sent ahead of the user's prompt in endpoint mode.
pub const REFINER_INSTRUCTION: &str = "You prepare prompts for an image generator. \
Work through the request step by step: name every object, how many of each there are, \
their colors, where they sit relative to each other and the overall style. \
Point out anything ambiguous and settle it with a sensible choice. \
Finish with a single line that starts with \"Refined prompt:\" followed by one detailed prompt \
that states all of these decisions explicitly.";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThinkMode {
    #[default]
    Off,
    Mock,
    Endpoint,
}

impl ThinkMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(ThinkMode::Off),
            "mock" => Ok(ThinkMode::Mock),
            "endpoint" => Ok(ThinkMode::Endpoint),
            _ => Err(Error::invalid(format!("unknown think mode {s:?}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Refinement

#[derive(Clone)]
enum RefinerMode {
    Mock { suffix: String },
    Endpoint { url: Option<String>, key: Option<String> },
}

/// Rewrites a raw prompt before generation.
#[derive(Clone)]
pub struct RefinerClient {
    mode: RefinerMode,
    pub timeout: Duration,
    pub model: String,
}

impl fmt::Debug for RefinerClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.mode {
            RefinerMode::Mock { suffix } => f.debug_struct("RefinerClient").field("mock_suffix", suffix).finish(),
            RefinerMode::Endpoint { url, key } => f
                .debug_struct("RefinerClient")
                .field("endpoint", url)
                .field("key", &key.as_ref().map(|_| "<redacted>"))
                .field("timeout", &self.timeout)
                .finish(),
        }
    }
}

/// A refined prompt, or the raw one with a warning when refinement failed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Refinement {
    pub prompt: String,
    pub warning: Option<String>,
}

impl RefinerClient {
    /// Appends `suffix`; never touches the network.
    pub fn mock(suffix: impl Into<String>) -> Self {
        RefinerClient {
            mode: RefinerMode::Mock {
                suffix: suffix.into(),
            },
            timeout: DEFAULT_TIMEOUT,
            model: String::new(),
        }
    }

    pub fn endpoint(url: impl Into<String>, key: Option<String>, timeout: Duration) -> Self {
        RefinerClient {
            mode: RefinerMode::Endpoint {
                url: Some(url.into()),
                key,
            },
            timeout,
            model: "gpt-4o".into(),
        }
    }

    /// Endpoint client configured from `REFINER_ENDPOINT` and `REFINER_KEY`. A missing
    /// endpoint is reported as a warning at refinement time.
    pub fn from_env(timeout: Duration) -> Self {
        let var = |k| std::env::var(k).ok().filter(|v: &String| !v.is_empty());
        RefinerClient {
            mode: RefinerMode::Endpoint {
                url: var(ENV_ENDPOINT),
                key: var(ENV_KEY),
            },
            timeout,
            model: "gpt-4o".into(),
        }
    }

    pub fn is_mock(&self) -> bool {
        matches!(self.mode, RefinerMode::Mock { .. })
    }

    pub fn refine(&self, raw: &str) -> Result<Refinement> {
        if raw.trim().is_empty() {
            return Err(Error::invalid("empty prompt"));
        }
        match &self.mode {
            RefinerMode::Mock { suffix } => Ok(Refinement {
                prompt: format!("{raw}{suffix}"),
                warning: None,
            }),
            RefinerMode::Endpoint { url, key } => {
                let outcome = match url {
                    None => Err(format!("{ENV_ENDPOINT} is not set")),
                    Some(u) => self.call(u, key.as_deref(), raw),
                };
                Ok(match outcome {
                    Ok(prompt) => Refinement {
                        prompt,
                        warning: None,
                    },
                    Err(e) => {
                        log::warn!("prompt refinement failed, using the raw prompt: {e}");
                        Refinement {
                            prompt: raw.to_string(),
                            warning: Some(format!("refinement failed: {e}")),
                        }
                    }
                })
            }
        }
    }

    /// Chat-style request body for `raw`.
    pub fn payload(&self, raw: &str) -> serde_json::Value {
        json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": REFINER_INSTRUCTION},
                {"role": "user", "content": raw},
            ],
            "temperature": 0,
        })
    }

    fn call(&self, url: &str, key: Option<&str>, raw: &str) -> std::result::Result<String, String> {
        let body = self.payload(raw);
        log::debug!(
            "refiner POST {url} (authorization: {}): {body}",
            if key.is_some() { "Bearer <redacted>" } else { "none" }
        );
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut req = agent.post(url);
        if let Some(k) = key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| e.to_string())?;
        let reply: serde_json::Value = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        log::debug!("refiner response: {reply}");
        let content = response_text(&reply).ok_or("response carries no message text")?;
        extract_refined(content).ok_or_else(|| "response carries an empty prompt".to_string())
    }
}

/// Message text of an OpenAI- or Anthropic-style chat response, or a bare `content` field.
pub fn response_text(v: &serde_json::Value) -> Option<&str> {
    v.pointer("/choices/0/message/content")
        .or_else(|| v.pointer("/content/0/text"))
        .or_else(|| v.get("content"))
        .and_then(|c| c.as_str())
}

/// The text after the last refined-prompt marker, or the last non-empty line.
pub fn extract_refined(content: &str) -> Option<String> {
    let lower = content.to_ascii_lowercase();
    let tail = match lower.rfind(&REFINED_MARKER.to_ascii_lowercase()) {
        Some(i) => &content[i + REFINED_MARKER.len()..],
        None => content.lines().rev().find(|l| !l.trim().is_empty())?,
    };
    let line = tail.trim().lines().next().unwrap_or("").trim();
    let line = line.trim_matches(|c| c == '"' || c == '*').trim();
    (!line.is_empty()).then(|| line.to_string())
}

// ---------------------------------------------------------------------------
// Verifiers

/// Scores an image against its prompt; higher is better.
pub trait Verifier: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, prompt: &str, image: &ImageGrid) -> f64;
}

/// Fraction of the prompt's color words whose nearest-palette pixels cover more than 1%
/// of the image. A prompt without color words scores 1.
#[derive(Clone, Debug, Default)]
pub struct ColorCoverage;

impl ColorCoverage {
    pub const MIN_FRACTION: f64 = 0.01;
}

fn nearest_color(p: [f32; 3]) -> usize {
    let d = |c: [f32; 3]| (0..3).map(|i| (p[i] - c[i]).powi(2)).sum::<f32>();
    let mut best = 0;
    for (i, (_, c)) in PALETTE.iter().enumerate() {
        if d(*c) < d(PALETTE[best].1) {
            best = i;
        }
    }
    best
}

impl Verifier for ColorCoverage {
    fn name(&self) -> &str {
        "color_coverage"
    }

    fn score(&self, prompt: &str, image: &ImageGrid) -> f64 {
        let lower = prompt.to_ascii_lowercase();
        let mut wanted = [false; PALETTE.len()];
        for w in lower.split(|c: char| !c.is_ascii_alphabetic()) {
            if let Some(i) = PALETTE.iter().position(|(n, _)| *n == w) {
                wanted[i] = true;
            }
        }
        let n_wanted = wanted.iter().filter(|&&w| w).count();
        if n_wanted == 0 {
            return 1.0;
        }
        let mut counts = [0usize; PALETTE.len()];
        for y in 0..image.height {
            for x in 0..image.width {
                counts[nearest_color(image.pixel(x, y))] += 1;
            }
        }
        let total = (image.width * image.height).max(1) as f64;
        let covered = (0..PALETTE.len())
            .filter(|&i| wanted[i] && counts[i] as f64 / total > Self::MIN_FRACTION)
            .count();
        covered as f64 / n_wanted as f64
    }
}

/// Mean absolute 4-neighbour Laplacian over interior pixels and channels.
#[derive(Clone, Debug, Default)]
pub struct Sharpness;

impl Verifier for Sharpness {
    fn name(&self) -> &str {
        "sharpness"
    }

    fn score(&self, _prompt: &str, image: &ImageGrid) -> f64 {
        let (w, h) = (image.width, image.height);
        if w < 3 || h < 3 {
            return 0.0;
        }
        let at = |x: usize, y: usize, c: usize| image.pixels[(y * w + x) * 3 + c] as f64;
        let mut sum = 0.0;
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                for c in 0..3 {
                    let lap = 4.0 * at(x, y, c)
                        - at(x - 1, y, c)
                        - at(x + 1, y, c)
                        - at(x, y - 1, c)
                        - at(x, y + 1, c);
                    sum += lap.abs();
                }
            }
        }
        sum / ((w - 2) * (h - 2) * 3) as f64
    }
}

/// PSNR between the image and its codec round trip.
#[derive(Clone, Debug)]
pub struct CodecFaithfulness {
    pub codebook: Codebook,
}

impl Verifier for CodecFaithfulness {
    fn name(&self) -> &str {
        "codec_faithfulness"
    }

    fn score(&self, _prompt: &str, image: &ImageGrid) -> f64 {
        let round_trip = encode_image(image, &self.codebook)
            .and_then(|tm| decode_tokens(&tm, &self.codebook))
            .and_then(|r| psnr(image, &r));
        round_trip.unwrap_or(0.0)
    }
}

pub fn builtin_verifiers(codebook: &Codebook) -> Vec<Box<dyn Verifier>> {
    vec![
        Box::new(ColorCoverage),
        Box::new(Sharpness),
        Box::new(CodecFaithfulness {
            codebook: codebook.clone(),
        }),
    ]
}

// ---------------------------------------------------------------------------
// Best-of-N

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Candidate {
    pub seed_index: u64,
    #[serde(skip)]
    pub tokens: Vec<TokenId>,
    #[serde(skip)]
    pub image: Option<ImageGrid>,
    /// Raw verifier scores in verifier order; `-inf` for failed candidates.
    pub scores: Vec<f64>,
    pub aggregate: f64,
    pub stats: Option<DecodeStats>,
    pub error: Option<String>,
}

/// Output of one candidate run, before scoring.
#[derive(Clone, Debug)]
pub struct Draft {
    pub tokens: Vec<TokenId>,
    pub stats: Option<DecodeStats>,
    pub image: std::result::Result<ImageGrid, String>,
}

/// Scores candidates with every verifier and fills in the normalized aggregates.
pub fn score_candidates(prompt: &str, drafts: Vec<Draft>, verifiers: &[Box<dyn Verifier>]) -> Vec<Candidate> {
    let mut out: Vec<Candidate> = drafts
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            let (image, error) = match d.image {
                Ok(img) => (Some(img), None),
                Err(e) => (None, Some(e)),
            };
            let scores = match &image {
                Some(img) => verifiers.iter().map(|v| v.score(prompt, img)).collect(),
                None => vec![f64::NEG_INFINITY; verifiers.len()],
            };
            Candidate {
                seed_index: i as u64,
                tokens: d.tokens,
                image,
                scores,
                aggregate: f64::NEG_INFINITY,
                stats: d.stats,
                error,
            }
        })
        .collect();
    let aggregates = normalized_aggregates(
        &out.iter()
            .map(|c| c.image.is_some().then_some(c.scores.as_slice()))
            .collect::<Vec<_>>(),
        verifiers.len(),
    );
    for (c, a) in out.iter_mut().zip(aggregates) {
        c.aggregate = a;
    }
    out
}

/// Mean over verifiers of `(s - min) / (max - min)`, with min and max taken over the
/// successful rows. Failed rows (`None`) get `-inf`.
pub fn normalized_aggregates(rows: &[Option<&[f64]>], n_verifiers: usize) -> Vec<f64> {
    let mut lo = vec![f64::INFINITY; n_verifiers];
    let mut hi = vec![f64::NEG_INFINITY; n_verifiers];
    for r in rows.iter().flatten() {
        for (v, &s) in r.iter().enumerate() {
            lo[v] = lo[v].min(s);
            hi[v] = hi[v].max(s);
        }
    }
    rows.iter()
        .map(|r| match r {
            None => f64::NEG_INFINITY,
            Some(_) if n_verifiers == 0 => 0.0,
            Some(r) => {
                let sum: f64 = r
                    .iter()
                    .enumerate()
                    .map(|(v, &s)| {
                        let span = hi[v] - lo[v];
                        if span > 0.0 {
                            (s - lo[v]) / span
                        } else {
                            0.0
                        }
                    })
                    .sum();
                sum / n_verifiers as f64
            }
        })
        .collect()
}

/// Index of the highest aggregate, first on ties.
pub fn select_winner(candidates: &[Candidate]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        if c.image.is_none() {
            continue;
        }
        if best.is_none_or(|b| c.aggregate > candidates[b].aggregate) {
            best = Some(i);
        }
    }
    best.ok_or_else(|| {
        Error::Generation(format!("all {} candidates failed to parse", candidates.len()))
    })
}

/// Runs `produce(i)` for `i in 0..n`, scores the drafts and picks the winner.
pub fn best_of_n(
    n: usize,
    prompt: &str,
    verifiers: &[Box<dyn Verifier>],
    mut produce: impl FnMut(u64) -> Result<Draft>,
) -> Result<(usize, Vec<Candidate>)> {
    if n == 0 {
        return Err(Error::invalid("best-of-N needs N >= 1"));
    }
    let drafts = (0..n as u64).map(&mut produce).collect::<Result<Vec<_>>>()?;
    let candidates = score_candidates(prompt, drafts, verifiers);
    let winner = select_winner(&candidates)?;
    Ok((winner, candidates))
}

// ---------------------------------------------------------------------------
// Requests

#[derive(Clone, Debug)]
pub struct GenerationRequest {
    pub task: TaskKind,
    pub prompt: String,
    pub reference: Option<ImageGrid>,
    /// Side of the generated image in pixels.
    pub resolution: usize,
    pub n: usize,
    pub mode: DecodeMode,
    pub window: usize,
    pub quantized: bool,
    pub think: ThinkMode,
    pub sampler: SamplerConfig,
}

impl GenerationRequest {
    pub fn t2i(prompt: impl Into<String>, resolution: usize) -> Self {
        GenerationRequest {
            task: TaskKind::TextToImage,
            prompt: prompt.into(),
            reference: None,
            resolution,
            n: 1,
            mode: DecodeMode::Sjd,
            window: crate::decode::DEFAULT_WINDOW,
            quantized: false,
            think: ThinkMode::Off,
            sampler: SamplerConfig::default(),
        }
    }
}

/// Fills every text field with `prompt`; each template reads the fields it needs.
pub fn texts_for(prompt: &str) -> TaskTexts {
    let s = Some(prompt.to_string());
    TaskTexts {
        prompt: s.clone(),
        object_description: s.clone(),
        subject_prompt: s.clone(),
        image_description: s.clone(),
        editing_instruction: s,
    }
}

#[derive(Clone, Debug)]
pub struct GenerationResult {
    pub raw_prompt: String,
    pub refinement: Refinement,
    pub prefix: Vec<TokenId>,
    pub verifiers: Vec<String>,
    pub candidates: Vec<Candidate>,
    pub winner: usize,
}

impl GenerationResult {
    pub fn winner(&self) -> &Candidate {
        &self.candidates[self.winner]
    }

    pub fn winner_image(&self) -> &ImageGrid {
        self.winner()
            .image
            .as_ref()
            .expect("the winner always parsed")
    }

    /// Writes `winner.ppm`, `candidates/NNN.ppm` and `result.jsonl` (one summary line, then
    /// one line per candidate).
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("candidates"))?;
        self.winner_image().write_ppm(dir.join("winner.ppm"))?;
        let mut lines = vec![json!({
            "kind": "summary",
            "raw_prompt": self.raw_prompt,
            "refined_prompt": self.refinement.prompt,
            "warning": self.refinement.warning,
            "winner": self.winner().seed_index,
            "verifiers": self.verifiers,
            "prefix_len": self.prefix.len(),
        })
        .to_string()];
        for c in &self.candidates {
            if let Some(img) = &c.image {
                img.write_ppm(dir.join("candidates").join(format!("{:03}.ppm", c.seed_index)))?;
            }
            let scores: serde_json::Map<_, _> = self
                .verifiers
                .iter()
                .zip(&c.scores)
                .map(|(n, s)| (n.clone(), json!(s)))
                .collect();
            lines.push(
                json!({
                    "kind": "candidate",
                    "seed_index": c.seed_index,
                    "winner": c.seed_index == self.winner().seed_index,
                    "scores": scores,
                    "aggregate": c.aggregate,
                    "tokens": c.tokens.len(),
                    "stats": c.stats,
                    "error": c.error,
                })
                .to_string(),
            );
        }
        fs::write(dir.join("result.jsonl"), lines.join("\n") + "\n")?;
        Ok(())
    }
}

/// Loaded weights, codec and verifiers shared across requests.
pub struct Engine {
    pub checkpoint: Checkpoint,
    pub builder: SeqBuilder,
    pub verifiers: Vec<Box<dyn Verifier>>,
    pub mock_suffix: String,
    pub refiner_timeout: Duration,
    quantized: OnceLock<Parameters>,
}

impl Engine {
    pub fn new(checkpoint: Checkpoint) -> Self {
        let builder = SeqBuilder::new(checkpoint.vocab.clone(), checkpoint.codebook.patch_size);
        let verifiers = builtin_verifiers(&checkpoint.codebook);
        Engine {
            checkpoint,
            builder,
            verifiers,
            mock_suffix: DEFAULT_SUFFIX.into(),
            refiner_timeout: DEFAULT_TIMEOUT,
            quantized: OnceLock::new(),
        }
    }

    /// Full-precision or 4-bit weights; the latter are built on first use.
    pub fn weights(&self, quantized: bool) -> Result<&Parameters> {
        let p = &self.checkpoint.params;
        if !quantized || p.is_quantized() {
            return Ok(p);
        }
        if let Some(q) = self.quantized.get() {
            return Ok(q);
        }
        let q = quantize_params(p, QuantPolicy::default())?;
        Ok(self.quantized.get_or_init(|| q))
    }

    pub fn refiner(&self, mode: ThinkMode) -> Option<RefinerClient> {
        match mode {
            ThinkMode::Off => None,
            ThinkMode::Mock => Some(RefinerClient::mock(self.mock_suffix.clone())),
            ThinkMode::Endpoint => Some(RefinerClient::from_env(self.refiner_timeout)),
        }
    }

    pub fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult> {
        if req.prompt.trim().is_empty() {
            return Err(Error::invalid("empty prompt").at_stage("request"));
        }
        let patch = self.builder.patch_size;
        if req.resolution == 0 || !req.resolution.is_multiple_of(patch) {
            return Err(Error::invalid(format!(
                "resolution {} is not a positive multiple of the patch size {patch}",
                req.resolution
            ))
            .at_stage("request"));
        }
        let refinement = match self.refiner(req.think) {
            None => Refinement {
                prompt: req.prompt.clone(),
                warning: None,
            },
            Some(r) => r.refine(&req.prompt).map_err(|e| e.at_stage("refine"))?,
        };
        let texts = texts_for(&refinement.prompt);
        let cb = &self.checkpoint.codebook;
        let reference = req
            .reference
            .as_ref()
            .map(|r| encode_image(r, cb))
            .transpose()
            .map_err(|e| e.at_stage("reference"))?;
        let side = req.resolution / patch;
        let prefix = self
            .builder
            .build_inference_prefix(req.task, &texts, reference.as_ref(), side, side)
            .map_err(|e| e.at_stage("prefix"))?;
        let uncond = match req.sampler.guidance_scale {
            None => None,
            Some(_) => Some(
                self.builder
                    .build_inference_prefix(req.task, &texts.blanked(), reference.as_ref(), side, side)
                    .map_err(|e| e.at_stage("prefix"))?
                    .tokens,
            ),
        };
        let input = GenerationInput {
            prefix: &prefix.tokens,
            uncond_prefix: uncond.as_deref(),
            constraint: Constraint::Grammar(prefix.grammar.clone()),
        };
        let weights = self.weights(req.quantized).map_err(|e| e.at_stage("quantize"))?;
        let mut gen = generator_for(weights, &input, &req.sampler).map_err(|e| e.at_stage("decode"))?;
        let builder = &self.builder;
        let (winner, candidates) = best_of_n(req.n, &req.prompt, &self.verifiers, |i| {
            let mut rng = rng_for(req.sampler.seed, i);
            let (tokens, stats) = match req.mode {
                DecodeMode::Ar => gen.ar_generate(&input, &req.sampler, &mut rng),
                DecodeMode::Sjd => gen.sjd_generate(&input, &req.sampler, req.window, &mut rng),
            }
            .map_err(|e| e.at_stage("decode"))?;
            let mut full = prefix.tokens.clone();
            full.extend_from_slice(&tokens);
            let image = builder
                .parse_generated(&full)
                .and_then(|p| decode_tokens(p.output(), cb))
                .map_err(|e| e.to_string());
            Ok(Draft {
                tokens,
                stats: Some(stats),
                image,
            })
        })
        .map_err(|e| match e {
            Error::Stage { .. } => e,
            e => e.at_stage("select"),
        })?;
        Ok(GenerationResult {
            raw_prompt: req.prompt.clone(),
            refinement,
            prefix: prefix.tokens,
            verifiers: self.verifiers.iter().map(|v| v.name().to_string()).collect(),
            candidates,
            winner,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::vocab::Vocabulary;

    fn engine() -> Engine {
        let cfg = ModelConfig::preset("tiny").unwrap();
        Engine::new(
            Checkpoint::new(
                init_params(&cfg, 3).unwrap(),
                Vocabulary::new(1024).unwrap(),
                Codebook::random(1024, 2, 3),
            )
            .unwrap(),
        )
    }

    #[test]
    fn mock_refiner_is_deterministic() {
        let r = RefinerClient::mock(" in a field");
        assert_eq!(r.refine("a cat").unwrap().prompt, "a cat in a field");
        assert!(matches!(r.refine("  "), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn unreachable_endpoint_falls_back() {
        let r = RefinerClient::endpoint("http://127.0.0.1:9/v1", Some("secret".into()), Duration::from_millis(300));
        let out = r.refine("a cat").unwrap();
        assert_eq!(out.prompt, "a cat");
        assert!(out.warning.is_some());
        assert!(!format!("{r:?}").contains("secret"));
    }

    #[test]
    fn extraction() {
        let c = "Step 1: one cat.\nStep 2: orange.\nRefined prompt: an orange cat on a mat\n";
        assert_eq!(extract_refined(c).unwrap(), "an orange cat on a mat");
        assert_eq!(extract_refined("just this").unwrap(), "just this");
        assert_eq!(extract_refined("Refined prompt:   "), None);
    }

    #[test]
    fn verifier_examples() {
        let red = ImageGrid::filled(8, 8, [1.0, 0.0, 0.0]);
        assert_eq!(ColorCoverage.score("red square", &red), 1.0);
        assert_eq!(ColorCoverage.score("red and blue", &red), 0.5);
        assert_eq!(Sharpness.score("", &red), 0.0);
        let cb = Codebook::random(16, 2, 1);
        let img = decode_tokens(&crate::imgcodec::TokenMap::new(2, 2, vec![1, 5, 7, 3]).unwrap(), &cb).unwrap();
        let v = CodecFaithfulness { codebook: cb };
        assert_eq!(v.score("", &img), crate::imgcodec::PSNR_CAP);
    }

    struct Rigged;
    impl Verifier for Rigged {
        fn name(&self) -> &str {
            "rigged"
        }
        fn score(&self, _: &str, img: &ImageGrid) -> f64 {
            img.pixels[0] as f64
        }
    }

    fn draft(v: f32) -> Draft {
        Draft {
            tokens: vec![],
            stats: None,
            image: Ok(ImageGrid::filled(1, 1, [v; 3])),
        }
    }

    #[test]
    fn rigged_selection() {
        let vs: Vec<Box<dyn Verifier>> = vec![Box::new(Rigged)];
        let (w, all) = best_of_n(4, "", &vs, |i| Ok(draft(i as f32))).unwrap();
        assert_eq!(all[w].seed_index, 3);
        let (w, _) = best_of_n(1, "", &vs, |_| Ok(draft(0.0))).unwrap();
        assert_eq!(w, 0);
        let (w, _) = best_of_n(3, "", &vs, |_| Ok(draft(0.5))).unwrap();
        assert_eq!(w, 0, "ties go to the lowest index");
    }

    #[test]
    fn failures_are_kept_and_all_failed_errors() {
        let vs: Vec<Box<dyn Verifier>> = vec![Box::new(Rigged)];
        let (w, all) = best_of_n(3, "", &vs, |i| {
            Ok(if i == 1 {
                draft(0.2)
            } else {
                Draft {
                    tokens: vec![],
                    stats: None,
                    image: Err("bad".into()),
                }
            })
        })
        .unwrap();
        assert_eq!((w, all.len()), (1, 3));
        assert_eq!(all[0].aggregate, f64::NEG_INFINITY);
        let r = best_of_n(2, "", &vs, |_| {
            Ok(Draft {
                tokens: vec![],
                stats: None,
                image: Err("bad".into()),
            })
        });
        assert!(matches!(r, Err(Error::Generation(_))));
    }

    #[test]
    fn greedy_generation_is_deterministic_and_mode_independent() {
        let e = engine();
        let mut req = GenerationRequest::t2i("a red square", 8);
        req.sampler = SamplerConfig::greedy();
        req.mode = DecodeMode::Ar;
        let a = e.generate(&req).unwrap();
        let b = e.generate(&req).unwrap();
        req.mode = DecodeMode::Sjd;
        let c = e.generate(&req).unwrap();
        assert_eq!(a.winner().tokens, b.winner().tokens);
        assert_eq!(a.winner_image(), c.winner_image());
        req.think = ThinkMode::Mock;
        let d = e.generate(&req).unwrap();
        assert_ne!(d.prefix, a.prefix);
        assert_eq!(d.winner_image().width, 8);
    }

    #[test]
    fn output_directory() {
        let e = engine();
        let mut req = GenerationRequest::t2i("a blue circle", 8);
        req.n = 3;
        req.sampler.seed = 5;
        let r = e.generate(&req).unwrap();
        let dir = tempfile::tempdir().unwrap();
        r.write_dir(dir.path()).unwrap();
        assert!(dir.path().join("winner.ppm").exists());
        let text = fs::read_to_string(dir.path().join("result.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(fs::read_dir(dir.path().join("candidates")).unwrap().count(), 3);
    }
}
