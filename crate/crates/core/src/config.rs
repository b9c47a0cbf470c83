//! Run configuration (TOML) and the training workflow built on it.
//!
//! Every key has a default, so a file holding only `model.preset = "tiny"` is a complete
//! config. Unknown keys are rejected at every level.
//!
//! ```toml
//! [model]
//! preset = "tiny"        # tiny | small | 2B | 7B
//! seed = 0               # weight and codebook init when no checkpoint is given
//! patch_size = 2
//!
//! [sampler]
//! temperature = 1.0      # 0 = greedy
//! seed = 0
//! max_new_tokens = 4096
//! # top_k = 64
//! # guidance_scale = 3.0
//!
//! [decode]
//! mode = "sjd"           # ar | sjd
//! window = 16
//! quantized = false
//!
//! [pipeline]
//! n = 16
//! think = "off"          # off | mock | endpoint
//! task = "t2i"
//! resolution = 16
//!
//! [train]
//! tasks = ["t2i"]
//! records_per_stage = 256
//!
//! [paths]
//! output_dir = "out"
//! # checkpoint = "out/model.ckpt"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::corpus::{generate_manifest, read_manifest, record_images, DataSource, ManifestRecord};
use crate::decode::{DecodeMode, SamplerConfig, DEFAULT_WINDOW};
use crate::error::{Error, Result};
use crate::imgcodec::{fit_codebook, Codebook};
use crate::model::{init_params, ModelConfig};
use crate::pipeline::{ThinkMode, DEFAULT_SUFFIX};
use crate::seqbuild::{SeqBuilder, TaskKind};
use crate::train::{run_curriculum, stage_data, CurriculumOutcome, LossRecord, StageReport, TrainConfig};
use crate::vocab::{Vocabulary, SPECIAL_SLOTS, TEXT_SIZE};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub sampler: SamplerConfig,
    pub decode: DecodeSection,
    pub pipeline: PipelineSection,
    pub train: TrainSection,
    pub paths: PathsSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: String,
    pub seed: u64,
    pub patch_size: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: "tiny".into(),
            seed: 0,
            patch_size: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub mode: DecodeMode,
    pub window: usize,
    pub quantized: bool,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection {
            mode: DecodeMode::Sjd,
            window: DEFAULT_WINDOW,
            quantized: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    /// Best-of-N candidate count.
    pub n: usize,
    pub think: ThinkMode,
    pub task: String,
    /// Generated image side in pixels.
    pub resolution: usize,
    /// Text appended by the mock refiner.
    pub mock_suffix: String,
    pub refiner_timeout_secs: u64,
}

impl Default for PipelineSection {
    fn default() -> Self {
        PipelineSection {
            n: 16,
            think: ThinkMode::Off,
            task: "t2i".into(),
            resolution: 16,
            mock_suffix: DEFAULT_SUFFIX.into(),
            refiner_timeout_secs: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Task mix of generated records.
    pub tasks: Vec<String>,
    /// Position jitter of generated scenes, as a fraction of the image side.
    pub jitter: f32,
    /// Records generated per stage when the stage itself does not name a data source.
    pub records_per_stage: usize,
    pub codebook_iterations: usize,
    /// Images (from the first stage's records) used to fit the codebook.
    pub codebook_images: usize,
    pub schedule: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            tasks: vec!["t2i".into()],
            jitter: 0.08,
            records_per_stage: 256,
            codebook_iterations: 10,
            codebook_images: 128,
            schedule: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Weights to load; random init when absent.
    pub checkpoint: Option<PathBuf>,
    /// Where training writes checkpoints and the loss log, and generation its results.
    pub output_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            checkpoint: None,
            output_dir: "out".into(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = self.model_config()?;
        self.sampler.validate(cfg.vocab_size)?;
        self.codebook_size()?;
        if self.decode.window == 0 {
            return Err(Error::Config("decode.window must be at least 1".into()));
        }
        if self.pipeline.n == 0 {
            return Err(Error::Config("pipeline.n must be at least 1".into()));
        }
        TaskKind::parse(&self.pipeline.task).map_err(|e| Error::Config(e.to_string()))?;
        self.tasks()?;
        self.train.schedule.validate(self.model.patch_size)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::preset(&self.model.preset)
    }

    /// Image ids left in the preset's vocabulary after text and control ids.
    pub fn codebook_size(&self) -> Result<usize> {
        let v = self.model_config()?.vocab_size;
        v.checked_sub(TEXT_SIZE + SPECIAL_SLOTS)
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("vocabulary of {v} leaves no image ids")))
    }

    pub fn tasks(&self) -> Result<Vec<TaskKind>> {
        self.train
            .tasks
            .iter()
            .map(|t| TaskKind::parse(t).map_err(|e| Error::Config(e.to_string())))
            .collect()
    }

    /// The configured checkpoint, or fresh weights with a random codebook.
    pub fn load_or_init(&self) -> Result<Checkpoint> {
        if let Some(p) = &self.paths.checkpoint {
            return load_checkpoint(p).map_err(|e| e.at_stage("load"));
        }
        let cfg = self.model_config()?;
        let n = self.codebook_size()?;
        Checkpoint::new(
            init_params(&cfg, self.model.seed)?,
            Vocabulary::new(n)?,
            Codebook::random(n, self.model.patch_size, self.model.seed),
        )
    }

    /// Records of every stage, generated or read from manifests.
    pub fn stage_records(&self) -> Result<Vec<Vec<ManifestRecord>>> {
        let tasks = self.tasks()?;
        let sched = &self.train.schedule;
        sched
            .stages
            .iter()
            .enumerate()
            .map(|(i, st)| match &st.data {
                DataSource::Manifest(p) => read_manifest(p),
                DataSource::Generated { records, seed } => generate_manifest(
                    if *records == 0 { self.train.records_per_stage } else { *records },
                    st.resolution,
                    &tasks,
                    self.train.jitter,
                    sched.seed.wrapping_mul(1000).wrapping_add(*seed).wrapping_add(i as u64),
                ),
            })
            .collect()
    }
}

/// Fits a codebook on images of `records`.
pub fn fit_codebook_on(
    records: &[ManifestRecord],
    size: usize,
    patch: usize,
    max_images: usize,
    iterations: usize,
    seed: u64,
) -> Result<Codebook> {
    let mut images = Vec::new();
    for r in records {
        if images.len() >= max_images {
            break;
        }
        images.extend(record_images(r)?);
    }
    images.truncate(max_images.max(1));
    fit_codebook(&images, size, patch, iterations, seed)
}

pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub outcome: CurriculumOutcome,
}

/// Fits the codebook (unless a checkpoint is configured), builds the stage data, runs the
/// curriculum and, when `write` is set, saves `stage-<i>.ckpt` after each stage and
/// `model.ckpt` plus `loss.jsonl` at the end under `paths.output_dir`.
pub fn train_from_config(
    cfg: &RunConfig,
    write: bool,
    mut on_step: impl FnMut(&LossRecord),
    mut on_stage: impl FnMut(&StageReport),
) -> Result<TrainRun> {
    cfg.validate()?;
    let records = cfg.stage_records().map_err(|e| e.at_stage("data"))?;
    let start = cfg.load_or_init()?;
    let patch = start.codebook.patch_size;
    let codebook = if cfg.paths.checkpoint.is_some() {
        start.codebook.clone()
    } else {
        fit_codebook_on(
            &records[0],
            start.codebook.len(),
            patch,
            cfg.train.codebook_images,
            cfg.train.codebook_iterations,
            cfg.model.seed,
        )
        .map_err(|e| e.at_stage("codebook"))?
    };
    let vocab = start.vocab.clone();
    let builder = SeqBuilder::new(vocab.clone(), patch);
    let sched = &cfg.train.schedule;
    let data = sched
        .stages
        .iter()
        .zip(&records)
        .map(|(st, recs)| stage_data(recs, st.resolution, sched.eval_records, &builder, &codebook))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.at_stage("data"))?;
    let out = cfg.paths.output_dir.clone();
    if write {
        fs::create_dir_all(&out)?;
    }
    let outcome = run_curriculum(start.params, sched, &data, &vocab, &mut on_step, |rep, params| {
        on_stage(rep);
        if write {
            let ck = Checkpoint::new(params.clone(), vocab.clone(), codebook.clone())?;
            save_checkpoint(out.join(format!("stage-{}.ckpt", rep.stage)), &ck).map_err(|e| e.at_stage("checkpoint"))?;
        }
        Ok(())
    })
    .map_err(|e| match e {
        Error::Stage { .. } => e,
        e => e.at_stage("train"),
    })?;
    let checkpoint = Checkpoint::new(outcome.params.clone(), vocab, codebook)?;
    if write {
        save_checkpoint(out.join("model.ckpt"), &checkpoint).map_err(|e| e.at_stage("checkpoint"))?;
        let lines: Vec<String> = outcome
            .curve
            .iter()
            .map(|r| serde_json::to_string(r).expect("loss record serializes"))
            .collect();
        fs::write(out.join("loss.jsonl"), lines.join("\n") + "\n")?;
    }
    Ok(TrainRun { checkpoint, outcome })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_alone_is_complete() {
        let c = RunConfig::from_toml("[model]\npreset = \"tiny\"\n").unwrap();
        assert_eq!(c.codebook_size().unwrap(), 1024);
        assert_eq!(c.decode.window, 16);
        assert_eq!(c.pipeline.n, 16);
        let ck = c.load_or_init().unwrap();
        assert_eq!(ck.params.config.vocab_size, 1296);
    }

    #[test]
    fn unknown_keys_rejected() {
        for bad in [
            "[model]\npresett = \"tiny\"\n",
            "[decode]\nwindw = 3\n",
            "[train.schedule.optim]\nbeta3 = 1\n",
            "typo = 1\n",
        ] {
            assert!(matches!(RunConfig::from_toml(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let d = RunConfig::default();
        let text = toml::to_string(&d).unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), d);
    }

    #[test]
    fn bad_values_rejected() {
        assert!(RunConfig::from_toml("[model]\npreset = \"huge\"\n").is_err());
        assert!(RunConfig::from_toml("[pipeline]\nn = 0\n").is_err());
        assert!(RunConfig::from_toml("[sampler]\ntemperature = -1.0\n").is_err());
    }
}
