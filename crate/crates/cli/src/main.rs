use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use semfill::checkpoint::{
    load_attribute_net, load_segmentation_net, save_attribute_net, save_segmentation_net,
};
use semfill::config::ExperimentConfig;
use semfill::domain::{composite, Image, Mask};
use semfill::embed::{pretrain_attribute, pretrain_segmentation};
use semfill::experiment::{ablation_grid, evaluate_pixels, run_ablation, run_experiment, Pipeline};
use semfill::io::{load_mask_png, load_png, save_png};
use semfill::retrieval::{semantic_map_protocol, FeatureExtractor, RetrievalCorpus};
use semfill::synth::{center_mask, sample_id, Dataset, DatasetRole, Split};
use semfill::train::{train, TrainData, TrainState};
use semfill::Error;

#[derive(Parser)]
#[command(
    name = "semfill",
    version,
    about = "Semantically conditioned GAN inpainting"
)]
struct Cli {
    /// Disable data-parallel execution.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Key-value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key (repeatable), e.g. `--set lambda_a=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, extra: &[(&str, Option<&Path>)]) -> Result<ExperimentConfig> {
        let mut overrides = self.set.clone();
        for (k, v) in extra {
            if let Some(p) = v {
                overrides.push(format!("{k}={}", p.display()));
            }
        }
        Ok(ExperimentConfig::load(self.config.as_deref(), &overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        canvas: usize,
        /// inpainting, attributes or segmentation.
        #[arg(long, default_value = "inpainting")]
        role: String,
    },
    /// Train the attribute classifier.
    PretrainAttr {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the segmentation network.
    PretrainSeg {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the inpainting model.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        attr_ckpt: Option<PathBuf>,
        #[arg(long)]
        seg_ckpt: Option<PathBuf>,
        /// Output directory for the loss log and checkpoints.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a training checkpoint made with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Restore one image.
    Inpaint {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// PNG whose nonzero pixels mark the hole.
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write the raw generator output instead of the composite.
        #[arg(long)]
        raw: bool,
    },
    /// Pixel metrics on a dataset split.
    EvalPixel {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Masked-query retrieval evaluation.
    EvalRetrieval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Feature extractor; defaults to the attribute network in `--ckpt`.
        #[arg(long)]
        attr_ckpt: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep the two semantic trade-off weights.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        attr_ckpt: Option<PathBuf>,
        #[arg(long)]
        seg_ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        /// Restrict to the given points, e.g. `0.1:0.1,0:0`.
        #[arg(long, value_delimiter = ',')]
        points: Vec<String>,
    },
}

fn require(path: &str, what: &str) -> Result<PathBuf> {
    if path.is_empty() {
        return Err(Error::Config(format!("{what} is not set")).into());
    }
    let p = PathBuf::from(path);
    if !p.exists() {
        return Err(Error::Config(format!("{what} {} does not exist", p.display())).into());
    }
    Ok(p)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn parse_split(s: &str) -> Result<Split> {
    Ok(match s {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => bail!("unknown split {other:?} (expected train, val or test)"),
    })
}

fn check_canvas(cfg: &ExperimentConfig, ds: &Dataset) -> Result<()> {
    if ds.canvas != (cfg.canvas, cfg.canvas) {
        return Err(Error::Config(format!(
            "dataset canvas {:?} does not match config canvas {}",
            ds.canvas, cfg.canvas
        ))
        .into());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    semfill::nn::exec::set_parallel(!cli.sequential);
    match cli.command {
        Command::GenData {
            out,
            n,
            seed,
            canvas,
            role,
        } => {
            let role = DatasetRole::parse(&role)?;
            let ds = Dataset::generate(n, seed, (canvas, canvas), role)?;
            ds.save(&out)?;
            println!("wrote {n} samples to {}", out.display());
        }
        Command::PretrainAttr { cfg, data, out } => {
            let cfg = cfg.load(&[])?;
            let ds = Dataset::load(&require(&data.display().to_string(), "dataset")?)?;
            check_canvas(&cfg, &ds)?;
            let (net, report) = pretrain_attribute(&ds, &cfg.arch(), &cfg.pretrain(cfg.seed))?;
            let report = serde_json::to_value(&report)?;
            save_attribute_net(&out, &net, &cfg, Some(report.clone()))?;
            println!(
                "{}",
                serde_json::to_string_pretty(
                    &json!({"fingerprint": cfg.fingerprint(), "report": report})
                )?
            );
        }
        Command::PretrainSeg { cfg, data, out } => {
            let cfg = cfg.load(&[])?;
            let ds = Dataset::load(&require(&data.display().to_string(), "dataset")?)?;
            check_canvas(&cfg, &ds)?;
            let (net, report) = pretrain_segmentation(&ds, &cfg.arch(), &cfg.pretrain(cfg.seed))?;
            let report = serde_json::to_value(&report)?;
            save_segmentation_net(&out, &net, &cfg, Some(report.clone()))?;
            println!(
                "{}",
                serde_json::to_string_pretty(
                    &json!({"fingerprint": cfg.fingerprint(), "report": report})
                )?
            );
        }
        Command::Train {
            cfg,
            data,
            attr_ckpt,
            seg_ckpt,
            out,
            resume,
        } => {
            let cfg = cfg.load(&[
                ("data", data.as_deref()),
                ("attr_ckpt", attr_ckpt.as_deref()),
                ("seg_ckpt", seg_ckpt.as_deref()),
                ("out", out.as_deref()),
            ])?;
            let data_dir = require(&cfg.data, "dataset")?;
            if cfg.out.is_empty() {
                return Err(Error::Config("output directory (out) is not set".into()).into());
            }
            let mut state = match &resume {
                Some(path) => TrainState::load(path, Some(&cfg))?,
                None => {
                    let attr = require(&cfg.attr_ckpt, "attribute checkpoint")?;
                    let seg = require(&cfg.seg_ckpt, "segmentation checkpoint")?;
                    let (attr_net, _) = load_attribute_net(&attr)?;
                    let (seg_net, _) = load_segmentation_net(&seg)?;
                    TrainState::new(cfg.clone(), attr_net, seg_net)?
                }
            };
            let ds = Dataset::load(&data_dir)?;
            check_canvas(&cfg, &ds)?;
            let td = TrainData::prepare(&ds, &state.attr_net, &state.seg_net)?;
            let every = (cfg.steps / 20).max(1);
            let outputs = train(&mut state, &td, Path::new(&cfg.out), |l| {
                if l.step % every == 0 {
                    eprintln!("{}", l.csv_row());
                }
            })?;
            println!(
                "{}",
                serde_json::to_string_pretty(&json!({
                    "fingerprint": cfg.fingerprint(),
                    "steps": state.step,
                    "final_checkpoint": outputs.final_checkpoint,
                    "loss_log": outputs.loss_log,
                    "running": state.running,
                }))?
            );
        }
        Command::Inpaint {
            ckpt,
            input,
            mask,
            out,
            raw,
        } => {
            let state = TrainState::load(&ckpt, None)?;
            let x: Image = load_png(&input)?;
            let m: Mask = load_mask_png(&mask)?;
            let x = semfill::domain::apply_mask(&x, &m)?;
            let z = Pipeline::from_state(&state).restore(&[&x])?.remove(0);
            let result = if raw { z } else { composite(&z, &x, &m)? };
            save_png(&result, &out)?;
        }
        Command::EvalPixel {
            ckpt,
            data,
            out,
            split,
            limit,
        } => {
            let state = TrainState::load(&ckpt, None)?;
            let ds = Dataset::load(&require(&data.display().to_string(), "dataset")?)?;
            check_canvas(&state.config, &ds)?;
            let mut idx = ds.split_indices(parse_split(&split)?);
            if let Some(l) = limit {
                idx.truncate(l);
            }
            let summary =
                evaluate_pixels(&Pipeline::from_state(&state), &ds, &idx, state.config.seed)?;
            write_json(
                &out,
                &json!({
                    "fingerprint": state.config.fingerprint(),
                    "step": state.step,
                    "split": split,
                    "summary": summary,
                }),
            )?;
            println!(
                "composited PSNR {:.2} dB, SSIM {:.3}; masked input PSNR {:.2} dB",
                summary.composited.psnr, summary.composited.ssim, summary.masked.psnr
            );
        }
        Command::EvalRetrieval {
            ckpt,
            attr_ckpt,
            corpus,
            queries,
            k,
            out,
        } => {
            let state = TrainState::load(&ckpt, None)?;
            let extractor = match &attr_ckpt {
                Some(p) => load_attribute_net(p)?.0,
                None => state.attr_net.clone(),
            };
            let k = k.unwrap_or(state.config.retrieval_k);
            let cds = Dataset::load(&require(&corpus.display().to_string(), "corpus")?)?;
            let qds = Dataset::load(&require(&queries.display().to_string(), "queries")?)?;
            let imgs: Vec<&Image> = cds.samples.iter().map(|s| &s.image).collect();
            let source = format!("corpus seed {} n {}", cds.seed, cds.len());
            let corpus = RetrievalCorpus::build(
                (0..cds.len()).map(sample_id).collect(),
                &imgs,
                &extractor,
                source,
            )?;
            let q: Vec<&Image> = qds.samples.iter().map(|s| &s.image).collect();
            let pipeline = Pipeline::from_state(&state);
            let inpainter = |m: &[Image], masks: &[Mask]| pipeline.restore_composited(m, masks);
            let fraction = state.config.retrieval_mask_fraction;
            let masker = |im: &Image| center_mask((im.height(), im.width()), fraction);
            let result = semantic_map_protocol(&q, &corpus, &extractor, &inpainter, &masker, k)?;
            write_json(
                &out,
                &json!({
                    "fingerprint": state.config.fingerprint(),
                    "extractor": extractor.fingerprint(),
                    "corpus": corpus,
                    "result": result,
                }),
            )?;
            println!(
                "mAP {:.4} (masked baseline {:.4}, K = {k})",
                result.map, result.masked_map
            );
        }
        Command::Ablate {
            cfg,
            data,
            attr_ckpt,
            seg_ckpt,
            out,
            seeds,
            points,
        } => {
            let cfg = cfg.load(&[
                ("data", data.as_deref()),
                ("attr_ckpt", attr_ckpt.as_deref()),
                ("seg_ckpt", seg_ckpt.as_deref()),
            ])?;
            let ds = Dataset::load(&require(&cfg.data, "dataset")?)?;
            check_canvas(&cfg, &ds)?;
            let (attr_net, _) =
                load_attribute_net(&require(&cfg.attr_ckpt, "attribute checkpoint")?)?;
            let (seg_net, _) =
                load_segmentation_net(&require(&cfg.seg_ckpt, "segmentation checkpoint")?)?;
            let grid = if points.is_empty() {
                ablation_grid()
            } else {
                points
                    .iter()
                    .map(|p| {
                        let (a, s) = p.split_once(':').context("points are lambda_a:lambda_s")?;
                        Ok((a.trim().parse::<f64>()?, s.trim().parse::<f64>()?))
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            let td = TrainData::prepare(&ds, &attr_net, &seg_net)?;
            let eval = ds.split_indices(Split::Val);
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let table = run_ablation(&cfg, &grid, &seeds, |c| {
                eprintln!(
                    "lambda_a={} lambda_s={} seed={}",
                    c.weights.lambda_a, c.weights.lambda_s, c.seed
                );
                let (_, r) = run_experiment(c, &td, &attr_net, &seg_net, &eval, cfg.seed)?;
                Ok(r)
            })?;
            write_json(&out.join("ablation.json"), &serde_json::to_value(&table)?)?;
            let text = table.render();
            fs::write(out.join("table.txt"), &text)
                .with_context(|| format!("writing {}", out.display()))?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
