use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::json;

use segsr_core::config::RunConfig;
use segsr_core::dataset::{build_dataset, mask_to_rgb, read_mask, read_rgb, write_mask, write_rgb, Dataset, Split};
use segsr_core::eval::ablation_run;
use segsr_core::sampler::{sample_batch, Frame, Mode, SampleInput, TRAJECTORY_EVERY};
use segsr_core::segdm::resize_codec_decode;
use segsr_core::selftest;
use segsr_core::synth::SceneGeometry;
use segsr_core::trainer::{load_final_models, run_stage, Stage, TrainData};
use segsr_core::{Error, Tensor};

#[derive(Parser)]
#[command(name = "segsr", version, about = "Coupled image and segmentation diffusion for toy super-resolution")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a synthetic dataset of HQ/LQ/mask triples.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 6)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage, or every stage in order with `--stage all`.
    Train {
        #[arg(long)]
        stage: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ckpt_dir: Option<PathBuf>,
        /// Continue from the stage's resume file when present.
        #[arg(long)]
        resume: bool,
    },
    /// Restore one LQ image with the trained models.
    Sample {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt_dir: Option<PathBuf>,
        /// LQ PNG file, or a scene index of the dataset given by `--data`.
        #[arg(long)]
        input: String,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Ground-truth mask PNG (HQ size) for mode 5 with a file input.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// 1..5, a mode name, or `zero`.
        #[arg(long, default_value = "coupled")]
        mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for restored.png, mask.png and trajectory.png.
        #[arg(long)]
        out: PathBuf,
        /// Also write a grid of intermediate predictions.
        #[arg(long)]
        trajectory: bool,
    },
    /// Ablation table over the validation split.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt_dir: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated modes.
        #[arg(long, default_value = "1,2,3,4,5,zero")]
        modes: String,
        /// Comma-separated sampling seeds; defaults to the config's.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in oracle and property checks.
    Selftest,
    /// Write the effective configuration with every default filled in.
    Config {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Exit 1 for bad input, 2 for failures while running.
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: if e.is_validation() { 1 } else { 2 },
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        kind: "usage",
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                report(&invalid(e.kind().to_string()));
                return ExitCode::from(1);
            }
            return ExitCode::SUCCESS;
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("segsr: error: {}", f.message);
            report(&f);
            ExitCode::from(f.code)
        }
    }
}

fn report(f: &Failure) {
    eprintln!("{}", json!({"error": {"code": f.code, "kind": f.kind, "message": f.message}}));
}

fn run(cmd: Cmd) -> CliResult<()> {
    match cmd {
        Cmd::GenData { n, seed, k, out } => {
            let m = build_dataset(n, seed, k, &SceneGeometry::default(), &out)?;
            let val = m.scenes.iter().filter(|s| s.split == Split::Val).count();
            println!("wrote {n} scenes ({val} validation) to {}", out.display());
            Ok(())
        }
        Cmd::Train {
            stage,
            config,
            data,
            ckpt_dir,
            resume,
        } => {
            let cfg = load_config(config.as_deref())?;
            let stages: Vec<Stage> = if stage == "all" {
                Stage::ALL.to_vec()
            } else {
                vec![stage.parse()?]
            };
            let data_dir = pick(data, &cfg.paths.data, "--data")?;
            let ckpt = pick(ckpt_dir, &cfg.paths.ckpt_dir, "--ckpt-dir")?;
            let ds = Dataset::load(&data_dir)?;
            let train = TrainData::from_dataset(&ds, Split::Train, &cfg)?;
            for st in stages {
                let plan = cfg.stage_plan(st);
                let t0 = Instant::now();
                let every = (plan.iterations / 10).max(1);
                let rep = run_stage(&plan, &cfg, &train, &ckpt, resume, |step, loss| {
                    if (step + 1) % every == 0 {
                        eprintln!("{st} {:>6}/{} loss {loss:.5}", step + 1, plan.iterations);
                    }
                })?;
                let tail = rep.rows.last().map_or(f64::NAN, |r| r.loss);
                println!(
                    "{st}: {} steps, final window loss {tail:.5}, {:.1}s",
                    plan.iterations,
                    t0.elapsed().as_secs_f64()
                );
            }
            Ok(())
        }
        Cmd::Sample {
            config,
            ckpt_dir,
            input,
            data,
            mask,
            mode,
            seed,
            out,
            trajectory,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.sampler.trajectory |= trajectory;
            let mode: Mode = mode.parse()?;
            let net = cfg.net.clone();
            let (lq, gt) = match input.parse::<usize>() {
                Ok(index) => {
                    let dir = pick(data, &cfg.paths.data, "--data")?;
                    let ds = Dataset::load(&dir)?;
                    let s = ds
                        .samples
                        .iter()
                        .find(|s| s.index == index)
                        .ok_or_else(|| invalid(format!("dataset {} has no scene {index}", dir.display())))?;
                    (s.lq.clone(), s.mask.clone())
                }
                Err(_) => {
                    let lq = read_rgb(Path::new(&input))?;
                    let gt = match mask {
                        Some(p) => {
                            let (m, h, w) = read_mask(&p, net.classes)?;
                            if (h, w) != (net.hq_size, net.hq_size) {
                                return Err(invalid(format!("mask {} is {h}x{w}, expected HQ size", p.display())));
                            }
                            Some(m)
                        }
                        None => None,
                    };
                    (lq, gt)
                }
            };
            if mode == Mode::GtMask && gt.is_none() {
                return Err(Error::MissingGroundTruth(format!(
                    "mode 5 needs a ground-truth mask; input {input} has none (pass --mask or a dataset index)"
                ))
                .into());
            }
            let ckpt = pick(ckpt_dir, &cfg.paths.ckpt_dir, "--ckpt-dir")?;
            let models = load_final_models(&cfg, &ckpt)?;
            let gs = cfg.image_schedule()?;
            let ds = cfg.mask_schedule()?;
            let inputs = [SampleInput {
                lq: &lq,
                gt_mask: gt.as_deref(),
                seed,
            }];
            let res = sample_batch(&models, &gs, &ds, &inputs, mode, &cfg.sampler)?;
            let res = &res[0];
            write_rgb(&out.join("restored.png"), &res.image)?;
            let m = net.mask_size();
            if let Some(mk) = &res.mask {
                let full = resize_codec_decode(mk, m, m, net.hq_size, net.hq_size)?;
                write_mask(&out.join("mask.png"), &full, net.hq_size, net.hq_size)?;
            }
            if cfg.sampler.trajectory {
                let grid = trajectory_grid(&res.trajectory, m, net.hq_size)?;
                write_rgb(&out.join("trajectory.png"), &grid)?;
            }
            println!("mode {mode}, seed {seed}: wrote {}", out.display());
            Ok(())
        }
        Cmd::Eval {
            config,
            ckpt_dir,
            data,
            modes,
            seeds,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let modes: Vec<Mode> = split_list(&modes)
                .map(|s| s.parse())
                .collect::<std::result::Result<_, Error>>()?;
            let seeds: Vec<u64> = match seeds {
                Some(s) => split_list(&s)
                    .map(|v| v.parse().map_err(|_| invalid(format!("bad seed {v:?}"))))
                    .collect::<CliResult<_>>()?,
                None => cfg.seeds.sample.clone(),
            };
            let data_dir = pick(data, &cfg.paths.data, "--data")?;
            let ckpt = pick(ckpt_dir, &cfg.paths.ckpt_dir, "--ckpt-dir")?;
            let ds = Dataset::load(&data_dir)?;
            let models = load_final_models(&cfg, &ckpt)?;
            let table = ablation_run(&models, &cfg, &ds, &modes, &seeds, |mode, done, total| {
                eprintln!("{mode}: {done}/{total}");
            })?;
            std::fs::write(&out, table.to_tsv()).map_err(|e| Error::io(&out, e))?;
            print!("{}", table.to_text());
            Ok(())
        }
        Cmd::Selftest => {
            let checks = selftest::run_all();
            for c in &checks {
                println!("{} {:<30} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(Failure {
                    code: 2,
                    kind: "selftest",
                    message: format!("{failed} of {} checks failed", checks.len()),
                });
            }
            Ok(())
        }
        Cmd::Config { config, out } => {
            let cfg = load_config(config.as_deref())?;
            match out {
                Some(p) => cfg.save(&p)?,
                None => print!("{}", cfg.to_json()),
            }
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn pick(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| invalid(format!("{name} is required (or set it under paths in the config)")))
}

fn split_list(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').map(str::trim).filter(|v| !v.is_empty())
}

/// Columns of captured steps: predicted clean image above, mask below.
fn trajectory_grid(frames: &[Frame], m: usize, hq: usize) -> CliResult<Tensor<f32>> {
    if frames.is_empty() {
        return Err(invalid(format!("no trajectory frames (captured every {TRAJECTORY_EVERY} steps)")));
    }
    let rows = if frames[0].mask.is_some() { 2 } else { 1 };
    let (gh, gw) = (rows * hq, frames.len() * hq);
    let mut data = vec![1.0f32; 3 * gh * gw];
    for (fi, f) in frames.iter().enumerate() {
        let x0 = f.x0.data();
        for c in 0..3 {
            for y in 0..hq {
                for x in 0..hq {
                    data[(c * gh + y) * gw + fi * hq + x] = x0[(c * hq + y) * hq + x];
                }
            }
        }
        if let Some(mk) = &f.mask {
            let full = resize_codec_decode(mk, m, m, hq, hq)?;
            let rgb = mask_to_rgb(&full, hq, hq)?;
            for c in 0..3 {
                for y in 0..hq {
                    for x in 0..hq {
                        data[(c * gh + hq + y) * gw + fi * hq + x] = rgb.data()[(c * hq + y) * hq + x];
                    }
                }
            }
        }
    }
    Ok(Tensor::new(&[3, gh, gw], data)?)
}
