//! From-scratch training: image-block-only cross-entropy, AdamW with global-norm
//! clipping, gradient accumulation to a fixed global batch, and a staged resolution
//! curriculum with a constant learning rate per stage.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{record_sample, DataSource, ManifestRecord};
use crate::error::{Error, Result};
use crate::imgcodec::Codebook;
use crate::model::backprop::{loss_and_grad, LossInput, LossSum};
use crate::model::{Parameters, TensorRef};
use crate::seqbuild::{SeqBuilder, SequenceSample};
use crate::vocab::Vocabulary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f32,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumStage {
    /// Pixels per image side.
    pub resolution: usize,
    pub learning_rate: f32,
    /// Training samples seen in this stage.
    pub samples: usize,
    pub data: DataSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stages: Vec<CurriculumStage>,
    pub optim: OptimConfig,
    /// Samples per optimizer step, reached by accumulation.
    pub global_batch: usize,
    pub seed: u64,
    /// Held-out records evaluated at the start and end of each stage.
    pub eval_records: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stages: desk_curriculum(2e-3, [512, 384, 256]),
            optim: OptimConfig::default(),
            global_batch: 8,
            seed: 0,
            eval_records: 16,
        }
    }
}

/// The 16/24/32-pixel curriculum: `lr` for the first stage, a tenth of it afterwards.
pub fn desk_curriculum(lr: f32, samples: [usize; 3]) -> Vec<CurriculumStage> {
    [16, 24, 32]
        .into_iter()
        .zip(samples)
        .enumerate()
        .map(|(i, (resolution, samples))| CurriculumStage {
            resolution,
            learning_rate: if i == 0 { lr } else { lr / 10.0 },
            samples,
            data: DataSource::Generated {
                records: samples.max(1),
                seed: 1000 + i as u64,
            },
        })
        .collect()
}

impl TrainConfig {
    pub fn validate(&self, patch_size: usize) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("training needs at least one stage".into()));
        }
        if self.global_batch == 0 {
            return Err(Error::Config("global_batch must be positive".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if !(s.learning_rate > 0.0) {
                return Err(Error::Config(format!("stage {i}: learning_rate must be positive")));
            }
            if s.resolution == 0 || s.resolution % patch_size != 0 {
                return Err(Error::Config(format!(
                    "stage {i}: resolution {} is not a multiple of patch size {patch_size}",
                    s.resolution
                )));
            }
        }
        Ok(())
    }
}

/// AdamW moments for every tensor, in canonical tensor order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
    decay: Vec<bool>,
}

impl AdamW {
    pub fn new(params: &Parameters) -> Result<Self> {
        let flat = params.flat()?;
        let decay = params
            .tensors()
            .iter()
            .map(|(_, t)| !matches!(t, TensorRef::Vector(_)))
            .collect();
        Ok(AdamW {
            m: flat.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: flat.iter().map(|t| vec![0.0; t.len()]).collect(),
            step: 0,
            decay,
        })
    }

    fn update(&mut self, params: &mut Parameters, grads: &Parameters, lr: f32, c: &OptimConfig) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let gs = grads.flat()?;
        for (ti, p) in params.flat_mut()?.into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[ti], &mut self.v[ti], gs[ti]);
            let wd = if self.decay[ti] { c.weight_decay } else { 0.0 };
            for k in 0..p.len() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= lr * (mh / (vh.sqrt() + c.eps) + wd * p[k]);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Mean masked loss of the batch before the update.
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

fn sample_input<'a>(s: &'a SequenceSample, legality: &'a [crate::seqbuild::Legal]) -> LossInput<'a> {
    LossInput::shifted(&s.tokens, &s.loss_mask, legality)
}

/// Masked loss and mean gradient over a batch; the gradient lands in `grads`.
pub fn batch_gradient(
    params: &Parameters,
    batch: &[SequenceSample],
    vocab: &Vocabulary,
    grads: &mut Parameters,
) -> Result<LossSum> {
    for t in grads.flat_mut()? {
        t.fill(0.0);
    }
    let mut total = LossSum::default();
    for s in batch {
        let legality = s.legality(vocab);
        total.add(loss_and_grad(params, &sample_input(s, &legality), Some(grads))?);
    }
    if total.count == 0 {
        return Err(Error::invalid("batch has no loss-masked positions"));
    }
    let inv = 1.0 / total.count as f32;
    for t in grads.flat_mut()? {
        t.iter_mut().for_each(|g| *g *= inv);
    }
    Ok(total)
}

/// One optimizer step on `batch`.
pub fn train_step(
    params: &mut Parameters,
    batch: &[SequenceSample],
    vocab: &Vocabulary,
    opt: &mut AdamW,
    lr: f32,
    cfg: &OptimConfig,
) -> Result<StepReport> {
    let mut grads = Parameters::zeros(&params.config)?;
    let loss = batch_gradient(params, batch, vocab, &mut grads)?;
    let norm = grads
        .flat()?
        .iter()
        .flat_map(|t| t.iter())
        .map(|&g| g as f64 * g as f64)
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Err(Error::Numeric("non-finite gradient norm".into()));
    }
    if cfg.clip_norm > 0.0 && norm > cfg.clip_norm as f64 {
        let s = (cfg.clip_norm as f64 / norm) as f32;
        for t in grads.flat_mut()? {
            t.iter_mut().for_each(|g| *g *= s);
        }
    }
    opt.update(params, &grads, lr, cfg)?;
    Ok(StepReport {
        loss: loss.mean(),
        grad_norm: norm,
    })
}

/// Masked cross-entropy over `samples`, averaged over all loss positions.
pub fn eval_loss(params: &Parameters, samples: &[SequenceSample], vocab: &Vocabulary) -> Result<f64> {
    let mut total = LossSum::default();
    for s in samples {
        let legality = s.legality(vocab);
        total.add(loss_and_grad(params, &sample_input(s, &legality), None)?);
    }
    Ok(total.mean())
}

/// One line of the loss curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub stage: usize,
    pub loss: f64,
    pub lr: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub resolution: usize,
    pub steps: usize,
    pub start_checksum: String,
    pub end_checksum: String,
    /// Held-out loss before the stage's first update.
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug)]
pub struct CurriculumOutcome {
    pub params: Parameters,
    pub stages: Vec<StageReport>,
    pub curve: Vec<LossRecord>,
}

/// Training sequences and held-out set of one stage.
pub struct StageData {
    pub train: Vec<SequenceSample>,
    pub eval: Vec<SequenceSample>,
}

/// Builds a stage's sequences. The last `eval_records` records are held out.
pub fn stage_data(
    records: &[ManifestRecord],
    resolution: usize,
    eval_records: usize,
    builder: &SeqBuilder,
    codebook: &Codebook,
) -> Result<StageData> {
    let seqs = records
        .iter()
        .map(|r| record_sample(r, resolution, builder, codebook))
        .collect::<Result<Vec<_>>>()?;
    let split = seqs.len().saturating_sub(eval_records).max(1).min(seqs.len());
    let mut train = seqs;
    let eval = train.split_off(split);
    let eval = if eval.is_empty() { train.clone() } else { eval };
    if train.is_empty() {
        return Err(Error::Data(format!("stage at {resolution}px has no training records")));
    }
    Ok(StageData { train, eval })
}

/// Runs the stages in order, resuming each from the previous stage's weights. After each
/// stage `on_stage_end` receives the report and parameters (to write a checkpoint).
pub fn run_curriculum(
    mut params: Parameters,
    cfg: &TrainConfig,
    data: &[StageData],
    vocab: &Vocabulary,
    mut on_step: impl FnMut(&LossRecord),
    mut on_stage_end: impl FnMut(&StageReport, &Parameters) -> Result<()>,
) -> Result<CurriculumOutcome> {
    if data.len() != cfg.stages.len() {
        return Err(Error::Data(format!(
            "{} stages configured, data for {}",
            cfg.stages.len(),
            data.len()
        )));
    }
    let mut opt = AdamW::new(&params)?;
    let mut curve = Vec::new();
    let mut reports = Vec::new();
    let mut step = 0;
    for (si, (stage, d)) in cfg.stages.iter().zip(data).enumerate() {
        let start_checksum = params.checksum();
        let initial_loss = eval_loss(&params, &d.eval, vocab).map_err(|e| e.at_stage("train"))?;
        if !initial_loss.is_finite() {
            return Err(Error::Numeric(format!("stage {si} starts from a non-finite loss")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(si as u64));
        let mut order: Vec<usize> = (0..d.train.len()).collect();
        order.shuffle(&mut rng);
        let mut cursor = 0;
        let steps = stage.samples.div_ceil(cfg.global_batch);
        for _ in 0..steps {
            let mut batch = Vec::with_capacity(cfg.global_batch);
            for _ in 0..cfg.global_batch {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(d.train[order[cursor]].clone());
                cursor += 1;
            }
            let r = train_step(&mut params, &batch, vocab, &mut opt, stage.learning_rate, &cfg.optim)?;
            step += 1;
            let rec = LossRecord {
                step,
                stage: si,
                loss: r.loss,
                lr: stage.learning_rate,
            };
            on_step(&rec);
            curve.push(rec);
        }
        let report = StageReport {
            stage: si,
            resolution: stage.resolution,
            steps,
            start_checksum,
            end_checksum: params.checksum(),
            initial_loss,
            final_loss: eval_loss(&params, &d.eval, vocab)?,
        };
        on_stage_end(&report, &params)?;
        reports.push(report);
    }
    Ok(CurriculumOutcome {
        params,
        stages: reports,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_manifest, record_images};
    use crate::imgcodec::fit_codebook;
    use crate::model::{init_params, ModelConfig};
    use crate::seqbuild::TaskKind;

    fn setup() -> (Parameters, Vocabulary, SeqBuilder, Codebook, Vec<ManifestRecord>) {
        let vocab = Vocabulary::new(32).unwrap();
        let mut cfg = ModelConfig::preset("tiny").unwrap();
        cfg.vocab_size = vocab.total_size();
        cfg.hidden_size = 32;
        cfg.intermediate_size = 64;
        cfg.num_layers = 2;
        let recs = generate_manifest(12, 8, &[TaskKind::TextToImage], 0.1, 4).unwrap();
        let imgs: Vec<_> = recs.iter().flat_map(|r| record_images(r).unwrap()).collect();
        let cb = fit_codebook(&imgs, 32, 2, 4, 0).unwrap();
        let b = SeqBuilder::new(vocab.clone(), 2);
        (init_params(&cfg, 3).unwrap(), vocab, b, cb, recs)
    }

    #[test]
    fn steps_are_deterministic_and_reduce_loss() {
        let (p0, vocab, b, cb, recs) = setup();
        let d = stage_data(&recs, 8, 4, &b, &cb).unwrap();
        let run = |mut p: Parameters| {
            let mut opt = AdamW::new(&p).unwrap();
            let mut losses = vec![];
            for _ in 0..30 {
                let r = train_step(&mut p, &d.train[..4], &vocab, &mut opt, 3e-3, &OptimConfig::default()).unwrap();
                losses.push(r.loss);
            }
            (p, losses)
        };
        let (a, la) = run(p0.clone());
        let (b2, _) = run(p0);
        assert_eq!(a, b2);
        assert!(la.last().unwrap() < &(la[0] * 0.7), "{la:?}");
    }

    #[test]
    fn empty_mask_is_rejected() {
        let (mut p, vocab, b, cb, recs) = setup();
        let mut s = stage_data(&recs, 8, 0, &b, &cb).unwrap().train[0].clone();
        s.loss_mask.fill(0);
        let mut opt = AdamW::new(&p).unwrap();
        assert!(train_step(&mut p, &[s], &vocab, &mut opt, 1e-3, &OptimConfig::default()).is_err());
    }

    #[test]
    fn curriculum_continuity_and_records() {
        let (p, vocab, b, cb, recs) = setup();
        let mut cfg = TrainConfig::default();
        cfg.stages = desk_curriculum(2e-3, [8, 8, 8]);
        for s in cfg.stages.iter_mut() {
            s.resolution = 8;
        }
        cfg.global_batch = 4;
        let data: Vec<StageData> = (0..3).map(|_| stage_data(&recs, 8, 2, &b, &cb).unwrap()).collect();
        let mut ends = 0;
        let out = run_curriculum(p, &cfg, &data, &vocab, |_| {}, |_, _| {
            ends += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(ends, 3);
        assert_eq!(out.curve.len(), 6);
        for w in out.stages.windows(2) {
            assert_eq!(w[0].end_checksum, w[1].start_checksum);
        }
        assert!((out.curve[2].lr - 2e-4).abs() < 1e-9);
    }
}
