//! `unigen` command-line tool.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use unigen_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use unigen_core::config::{train_from_config, RunConfig};
use unigen_core::corpus::{read_manifest, record_images};
use unigen_core::decode::{generator_for, rng_for, Constraint, DecodeMode, GenerationInput};
use unigen_core::imgcodec::{decode_tokens, encode_image, fit_codebook, psnr, ssim, ImageGrid};
use unigen_core::pipeline::{Engine, GenerationRequest, ThinkMode};
use unigen_core::quant::{quantize_params, weight_footprint, QuantPolicy};
use unigen_core::seqbuild::{SeqBuilder, TaskKind};

#[derive(Parser)]
#[command(name = "unigen", version, about = "Unified text-and-image token generation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Ar,
    Sjd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ThinkArg {
    Off,
    Mock,
    Endpoint,
}

#[derive(Subcommand)]
enum Command {
    /// Run the resolution curriculum and write checkpoints and the loss log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `paths.output_dir`.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Generate an image for one prompt.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        prompt: String,
        /// t2i | subject | edit | control:<canny|hed|depth|openpose> | dense:<...>
        #[arg(long)]
        task: Option<String>,
        /// Reference image (PPM) for dual-panel tasks.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        quantized: bool,
        #[arg(long, value_enum)]
        think: Option<ThinkArg>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        temperature: Option<f32>,
        /// Output directory; defaults to `paths.output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert a checkpoint's projections to 4-bit group-quantized weights.
    Quantize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare forward passes and wall time of ar, sjd and sjd on quantized weights.
    BenchDecode {
        #[arg(long)]
        config: PathBuf,
        /// One prompt per line.
        #[arg(long)]
        prompts_file: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write one JSON stats record per row to this file.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Reconstruction quality of fitted codebooks of several sizes.
    EvalCodec {
        /// A manifest (JSON lines) or a directory of PPM images.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "16,64,256,1024")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 2)]
        patch: usize,
        #[arg(long, default_value_t = 10)]
        iterations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, output_dir } => train(&config, output_dir),
        Command::Generate {
            config,
            prompt,
            task,
            reference,
            n,
            mode,
            quantized,
            think,
            checkpoint,
            seed,
            temperature,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(c) = checkpoint {
                cfg.paths.checkpoint = Some(c);
            }
            if let Some(s) = seed {
                cfg.sampler.seed = s;
            }
            if let Some(t) = temperature {
                cfg.sampler.temperature = t;
            }
            let task = TaskKind::parse(task.as_deref().unwrap_or(&cfg.pipeline.task))?;
            let reference = reference
                .map(|p| ImageGrid::read_ppm(&p).with_context(|| format!("reference {}", p.display())))
                .transpose()?;
            let req = GenerationRequest {
                task,
                prompt,
                reference,
                resolution: cfg.pipeline.resolution,
                n: n.unwrap_or(cfg.pipeline.n),
                mode: match mode {
                    Some(ModeArg::Ar) => DecodeMode::Ar,
                    Some(ModeArg::Sjd) => DecodeMode::Sjd,
                    None => cfg.decode.mode,
                },
                window: cfg.decode.window,
                quantized: quantized || cfg.decode.quantized,
                think: match think {
                    Some(ThinkArg::Off) => ThinkMode::Off,
                    Some(ThinkArg::Mock) => ThinkMode::Mock,
                    Some(ThinkArg::Endpoint) => ThinkMode::Endpoint,
                    None => cfg.pipeline.think,
                },
                sampler: cfg.sampler.clone(),
            };
            let mut engine = Engine::new(cfg.load_or_init()?);
            engine.mock_suffix = cfg.pipeline.mock_suffix.clone();
            engine.refiner_timeout = std::time::Duration::from_secs(cfg.pipeline.refiner_timeout_secs);
            let result = engine.generate(&req)?;
            let dir = out.unwrap_or(cfg.paths.output_dir);
            result.write_dir(&dir).context("writing results")?;
            if let Some(w) = &result.refinement.warning {
                log::warn!("{w}");
            }
            let win = result.winner();
            println!(
                "winner {} of {} (aggregate {:.4}) -> {}",
                win.seed_index,
                result.candidates.len(),
                win.aggregate,
                dir.join("winner.ppm").display()
            );
            if let Some(s) = &win.stats {
                println!("{}", s.to_json_line());
            }
            Ok(())
        }
        Command::Quantize { input, out } => {
            let ck = load_checkpoint(&input).with_context(|| format!("loading {}", input.display()))?;
            let policy = QuantPolicy::default();
            let q = quantize_params(&ck.params, policy)?;
            let fp = weight_footprint(&ck.params.config, policy);
            save_checkpoint(&out, &Checkpoint::new(q, ck.vocab, ck.codebook)?)?;
            println!(
                "wrote {} ({} -> {} weight bytes, {:.1}% smaller)",
                out.display(),
                fp.baseline_bytes,
                fp.quantized_bytes,
                100.0 * fp.reduction()
            );
            Ok(())
        }
        Command::BenchDecode {
            config,
            prompts_file,
            checkpoint,
            json,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(c) = checkpoint {
                cfg.paths.checkpoint = Some(c);
            }
            bench(&cfg, &prompts_file, json.as_deref())
        }
        Command::EvalCodec {
            corpus,
            sizes,
            patch,
            iterations,
            seed,
        } => eval_codec(&corpus, &sizes, patch, iterations, seed),
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("config {}", path.display()))
}

fn train(config: &Path, output_dir: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(d) = output_dir {
        cfg.paths.output_dir = d;
    }
    let run = train_from_config(
        &cfg,
        true,
        |r| log::info!("step {} stage {} loss {:.4} lr {:e}", r.step, r.stage, r.loss, r.lr),
        |s| {
            println!(
                "stage {} ({}px): {} steps, held-out loss {:.4} -> {:.4}",
                s.stage, s.resolution, s.steps, s.initial_loss, s.final_loss
            )
        },
    )?;
    println!(
        "wrote {} ({} steps)",
        cfg.paths.output_dir.join("model.ckpt").display(),
        run.outcome.curve.len()
    );
    Ok(())
}

fn bench(cfg: &RunConfig, prompts_file: &Path, json: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(prompts_file).with_context(|| format!("prompts {}", prompts_file.display()))?;
    let prompts: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if prompts.is_empty() {
        bail!("{} holds no prompts", prompts_file.display());
    }
    let ck = cfg.load_or_init()?;
    let q = quantize_params(&ck.params, QuantPolicy::default())?;
    let builder = SeqBuilder::new(ck.vocab.clone(), ck.codebook.patch_size);
    let task = TaskKind::parse(&cfg.pipeline.task)?;
    if task.requires_reference() {
        bail!("bench-decode runs reference-free tasks only, not {task}");
    }
    let side = cfg.pipeline.resolution / ck.codebook.patch_size;
    let w = cfg.decode.window;
    let modes: [(&str, DecodeMode, usize, &_); 3] = [
        ("ar", DecodeMode::Ar, 1, &ck.params),
        ("sjd", DecodeMode::Sjd, w, &ck.params),
        ("sjd+q4", DecodeMode::Sjd, w, &q),
    ];
    println!(
        "{:>6}  {:<8} {:>3} {:>14} {:>7} {:>16} {:>10}",
        "prompt", "mode", "W", "forward_passes", "tokens", "accepted/pass", "wall_ms"
    );
    let mut records = Vec::new();
    let mut totals = [(0usize, 0usize, 0f64); 3];
    for (i, p) in prompts.iter().enumerate() {
        let texts = unigen_core::pipeline::texts_for(p);
        let prefix = builder.build_inference_prefix(task, &texts, None, side, side)?;
        let input = GenerationInput {
            prefix: &prefix.tokens,
            uncond_prefix: None,
            constraint: Constraint::Grammar(prefix.grammar.clone()),
        };
        let sc = unigen_core::decode::SamplerConfig {
            guidance_scale: None,
            ..cfg.sampler.clone()
        };
        for (m, (name, mode, w, params)) in modes.iter().enumerate() {
            let mut g = generator_for(params, &input, &sc)?;
            let mut rng = rng_for(sc.seed, i as u64);
            let (_, stats) = match mode {
                DecodeMode::Ar => g.ar_generate(&input, &sc, &mut rng)?,
                DecodeMode::Sjd => g.sjd_generate(&input, &sc, *w, &mut rng)?,
            };
            println!(
                "{:>6}  {:<8} {:>3} {:>14} {:>7} {:>16.3} {:>10.1}",
                i, name, stats.window, stats.forward_passes, stats.tokens, stats.accepted_per_pass_mean, stats.wall_ms
            );
            totals[m].0 += stats.forward_passes;
            totals[m].1 += stats.tokens;
            totals[m].2 += stats.wall_ms;
            let mut v = serde_json::to_value(&stats)?;
            v["prompt"] = i.into();
            v["variant"] = (*name).into();
            records.push(v.to_string());
        }
    }
    println!();
    let base = totals[0].2.max(1e-9);
    for (m, (name, ..)) in modes.iter().enumerate() {
        let (passes, tokens, ms) = totals[m];
        println!(
            "{name:<8} passes {passes:>7}  tokens {tokens:>7}  tokens/pass {:.3}  wall {:.1} ms ({:+.1}% vs ar)",
            tokens as f64 / passes.max(1) as f64,
            ms,
            100.0 * (ms - base) / base
        );
    }
    let fp = weight_footprint(&ck.params.config, QuantPolicy::default());
    println!(
        "weight footprint: {} -> {} bytes ({:.1}% smaller)",
        fp.baseline_bytes,
        fp.quantized_bytes,
        100.0 * fp.reduction()
    );
    if let Some(path) = json {
        fs::write(path, records.join("\n") + "\n")?;
    }
    Ok(())
}

fn load_corpus(path: &Path) -> Result<Vec<ImageGrid>> {
    let mut images = Vec::new();
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for p in entries.iter().filter(|p| p.extension().is_some_and(|e| e == "ppm")) {
            images.push(ImageGrid::read_ppm(p).with_context(|| format!("image {}", p.display()))?);
        }
    } else {
        for r in read_manifest(path)? {
            images.extend(record_images(&r)?);
        }
    }
    if images.is_empty() {
        bail!("corpus {} holds no images", path.display());
    }
    Ok(images)
}

fn eval_codec(corpus: &Path, sizes: &[usize], patch: usize, iterations: usize, seed: u64) -> Result<()> {
    let images = load_corpus(corpus)?;
    println!("{} images from {}", images.len(), corpus.display());
    println!("{:<12} {:>7} {:>9} {:>7}", "Tokenizer", "Ratio", "PSNR", "SSIM");
    for &k in sizes {
        let cb = fit_codebook(&images, k, patch, iterations, seed)?;
        let (mut p, mut s) = (0.0, 0.0);
        for img in &images {
            let rec = decode_tokens(&encode_image(img, &cb)?, &cb)?;
            p += psnr(img, &rec)?;
            s += ssim(img, &rec)?;
        }
        let n = images.len() as f64;
        println!(
            "{:<12} {:>7} {:>9.4} {:>7.4}",
            format!("vq-{k}"),
            format!("{patch}x{patch}"),
            p / n,
            s / n
        );
    }
    Ok(())
}
