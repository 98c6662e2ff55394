mod config;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dfu_core::checkpoint::{load_checkpoint, load_dataset, save_checkpoint, save_dataset};
use dfu_core::diffusion::{sample, CovarianceOperator, Denoiser, GaussianData, GaussianDenoiser, KlBasis, ModelDenoiser};
use dfu_core::engine::op_suite;
use dfu_core::eval::{band_errors, proxy_fid, score_error, PROBE_SIGMAS};
use dfu_core::grid::{
    build_dataset, sample_on_grid, DataSource, DataSourceSpec, DatasetSource, FieldSpectrum, GridFunction, MultiResDataset,
    Normalization, SyntheticKind, SyntheticSource,
};
use dfu_core::imageio::save_png_grid;
use dfu_core::model::{block_grad_check, build};
use dfu_core::trainer::{finetune, train, ConditionalFreeze, MetricRecord, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use config::RunConfig;
use run::{MetricLog, RunDir};

#[derive(Parser)]
#[command(name = "dfu", version, about = "Resolution-agnostic diffusion models on function grids")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a multi-resolution dataset cache.
    PrepareData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from scratch or resume a checkpoint.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.steps`.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Write an intermediate checkpoint every N steps.
        #[arg(long)]
        save_every: Option<u64>,
    },
    /// Fine-tune a pretrained checkpoint toward `finetune.target_resolution`.
    Finetune {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Draw samples and write one PNG grid per resolution.
    Sample {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated list; overrides `sample.resolutions`.
        #[arg(long, value_delimiter = ',')]
        resolutions: Option<Vec<usize>>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Score error, band spectrum errors and proxy-FID.
    Eval {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Evaluate the exact Gaussian denoiser instead of a network.
        #[arg(long)]
        oracle: bool,
        #[arg(long, value_enum, default_value = "all")]
        metric: Metric,
    },
    /// Finite-difference checks of every op and of one model block.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gaussian oracle battery for the diffusion core.
    OracleSuite {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Metric {
    ScoreError,
    Spectrum,
    ProxyFid,
    All,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// `Ok(false)` means a check ran and failed.
fn dispatch(cli: Cli) -> Result<bool> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::PrepareData { out } => prepare_data(cfg, &out),
        Command::Train {
            out,
            steps,
            resume,
            save_every,
        } => {
            let mut cfg = cfg;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            run_train(cfg, &out, resume.as_deref(), save_every)
        }
        Command::Finetune { out, checkpoint, steps } => {
            let mut cfg = cfg;
            if steps.is_some() {
                cfg.finetune.steps = steps;
            }
            run_finetune(cfg, &out, &checkpoint)
        }
        Command::Sample {
            out,
            checkpoint,
            resolutions,
            count,
        } => {
            let mut cfg = cfg;
            if let Some(r) = resolutions {
                cfg.sample.resolutions = r;
            }
            if let Some(c) = count {
                cfg.sample.count = c;
            }
            run_sample(cfg, &out, &checkpoint)
        }
        Command::Eval {
            out,
            checkpoint,
            oracle,
            metric,
        } => run_eval(cfg, &out, checkpoint.as_deref(), oracle, metric),
        Command::Gradcheck { out } => run_gradcheck(cfg, out.as_deref()),
        Command::OracleSuite { out } => run_oracle(cfg, out.as_deref()),
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn make_dataset(cfg: &RunConfig, resolutions: &[usize]) -> Result<MultiResDataset> {
    let spec = cfg.data.synthetic(cfg.seed);
    let source = match &cfg.data.images {
        Some(dir) => DataSourceSpec::Images(dir),
        None => DataSourceSpec::Synthetic(&spec),
    };
    Ok(build_dataset(source, resolutions, cfg.data.count, &mut rng(cfg.seed, 10))?)
}

fn prepare_data(cfg: RunConfig, out: &Path) -> Result<bool> {
    let dir = RunDir::open(out, &cfg)?;
    let ds = make_dataset(&cfg, &cfg.data.resolutions)?;
    let path = dir.file("dataset.dfu");
    save_dataset(&path, &ds, &dir.info)?;
    println!("wrote {} pyramids at {:?} to {}", ds.len(), ds.resolutions(), path.display());
    Ok(true)
}

/// Training data: a cached dataset, an image directory, or fresh synthetic draws.
enum Source {
    Stored(MultiResDataset),
    Synthetic(SyntheticSource),
}

impl Source {
    fn new(cfg: &RunConfig, upsample_to: Option<usize>) -> Result<Self> {
        let top = cfg.data.resolutions.iter().copied().max().context("data.resolutions is empty")?;
        if let Some(path) = &cfg.data.cache {
            let (ds, _) = load_dataset(path).with_context(|| format!("loading {}", path.display()))?;
            return Ok(Self::Stored(match upsample_to {
                Some(r) => ds.with_upsampled(r)?,
                None => ds,
            }));
        }
        if cfg.data.images.is_some() {
            let ds = make_dataset(cfg, &cfg.data.resolutions)?;
            return Ok(Self::Stored(match upsample_to {
                Some(r) => ds.with_upsampled(r)?,
                None => ds,
            }));
        }
        let src = SyntheticSource::new(cfg.data.synthetic(cfg.seed), &cfg.data.resolutions);
        Ok(Self::Synthetic(match upsample_to {
            Some(r) => src.with_upsampled(r, top),
            None => src,
        }))
    }

    fn with<T>(&mut self, f: impl FnOnce(&mut dyn DataSource) -> T) -> T {
        match self {
            Self::Stored(ds) => f(&mut DatasetSource { dataset: ds }),
            Self::Synthetic(s) => f(s),
        }
    }
}

fn run_train(cfg: RunConfig, out: &Path, resume: Option<&Path>, save_every: Option<u64>) -> Result<bool> {
    let dir = RunDir::open(out, &cfg)?;
    let mut state = match resume {
        Some(p) => load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?.0,
        None => TrainState::new(build(&cfg.model, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?),
    };
    let mix = cfg.mixture.build(&cfg.data.resolutions)?;
    let mut source = Source::new(&cfg, None)?;
    let mut log = MetricLog::create(&dir, "metrics.jsonl")?;
    let t0 = Instant::now();
    let mut last: Option<MetricRecord> = None;
    let mut remaining = cfg.train.steps;
    let chunk = save_every.filter(|&n| n > 0).unwrap_or(remaining.max(1));
    loop {
        let n = remaining.min(chunk);
        let step_cfg = dfu_core::trainer::TrainConfig {
            steps: n,
            ..cfg.train.clone()
        };
        source.with(|src| {
            train(&mut state, src, &mix, &step_cfg, &ConditionalFreeze::default(), &mut |m| {
                last = Some(m.clone());
                log.write(m).map_err(|e| dfu_core::Error::Contract(e.to_string()))
            })
        })?;
        remaining -= n;
        if remaining == 0 {
            break;
        }
        save_checkpoint(&dir.file(&format!("checkpoint-{}.dfu", state.step)), &state, &dir.info)?;
    }
    log.finish()?;
    save_checkpoint(&dir.file("checkpoint.dfu"), &state, &dir.info)?;
    match last {
        Some(m) => println!(
            "step {} loss {:.5} ({:.1}s)",
            m.step,
            m.loss.unwrap_or(f64::NAN),
            t0.elapsed().as_secs_f64()
        ),
        None => println!("no steps run; checkpoint holds the initial state"),
    }
    Ok(true)
}

fn run_finetune(cfg: RunConfig, out: &Path, checkpoint: &Path) -> Result<bool> {
    let dir = RunDir::open(out, &cfg)?;
    let (pre, _) = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let ft = cfg.finetune_config();
    let mut source = Source::new(&cfg, Some(ft.target_resolution))?;
    let mut log = MetricLog::create(&dir, "metrics.jsonl")?;
    let mut violations = 0u64;
    let state = source.with(|src| {
        finetune(pre.ema_model(), src, &ft, &mut |m| {
            if m.freeze.as_ref().is_some_and(|a| a.active && !a.unchanged) {
                violations += 1;
            }
            log.write(m).map_err(|e| dfu_core::Error::Contract(e.to_string()))
        })
    })?;
    log.finish()?;
    save_checkpoint(&dir.file("checkpoint.dfu"), &state, &dir.info)?;
    println!("fine-tuned {} steps toward r={}", state.step, ft.target_resolution);
    if violations > 0 {
        eprintln!("frozen spatial kernels moved on {violations} target-resolution batches");
    }
    Ok(violations == 0)
}

#[derive(Serialize)]
struct SampleReport {
    resolution: usize,
    count: usize,
    evaluations: usize,
    file: String,
}

fn run_sample(cfg: RunConfig, out: &Path, checkpoint: &Path) -> Result<bool> {
    let (state, _) = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    // Reject inadmissible requests before touching the output directory.
    for &r in &cfg.sample.resolutions {
        state.model.check_resolution(r)?;
    }
    let dir = RunDir::open(out, &cfg)?;
    let params = if cfg.sample.ema { &state.ema } else { &state.model.params };
    let mut den = ModelDenoiser::with_params(&state.model, params);
    let schedule = cfg.sample.schedule()?;
    let mut reports = Vec::new();
    for &r in &cfg.sample.resolutions {
        let run = sample(
            &mut den,
            cfg.sample.count,
            r,
            state.model.spec.data_channels,
            &schedule,
            &CovarianceOperator::WHITE,
            &mut rng(cfg.seed, 1000 + r as u64),
        )?;
        let name = format!("samples_r{r}.png");
        save_png_grid(&run.samples, cfg.sample.cols, &[Normalization::BYTE], &dir.file(&name))?;
        println!("r={r}: {} samples, {} denoiser calls -> {name}", run.samples.len(), run.evaluations);
        reports.push(SampleReport {
            resolution: r,
            count: run.samples.len(),
            evaluations: run.evaluations,
            file: name,
        });
    }
    dir.write_report("samples.json", &reports)?;
    Ok(true)
}

#[derive(Serialize, Default)]
struct EvalRow {
    resolution: usize,
    score_error: Option<f64>,
    coherence_error: Option<f64>,
    fidelity_error: Option<f64>,
    proxy_fid: Option<f64>,
}

fn run_eval(cfg: RunConfig, out: &Path, checkpoint: Option<&Path>, oracle: bool, metric: Metric) -> Result<bool> {
    let state = match checkpoint {
        Some(p) if !oracle => Some(load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?.0),
        _ => None,
    };
    if let Some(s) = &state {
        for &r in &cfg.eval.resolutions {
            s.model.check_resolution(r)?;
        }
    }
    let dir = RunDir::open(out, &cfg)?;
    let data_spec = cfg.data.synthetic(cfg.seed);
    let gp = match data_spec.kind {
        SyntheticKind::GaussianProcess { alpha, cutoff } if cfg.data.images.is_none() => Some((alpha, cutoff)),
        _ => None,
    };
    if oracle && gp.is_none() {
        bail!("--oracle needs data.kind = \"gaussian-process\"");
    }
    let wants = |m: Metric| metric == Metric::All || metric == m;
    if wants(Metric::ScoreError) && gp.is_none() && metric == Metric::ScoreError {
        bail!("score-error needs data.kind = \"gaussian-process\"");
    }
    let train_max = cfg.eval.train_max.or(cfg.data.resolutions.iter().copied().max()).unwrap_or(1);
    let schedule = cfg.sample.schedule()?;
    let mut rows = Vec::new();
    for &r in &cfg.eval.resolutions {
        let mut row = EvalRow {
            resolution: r,
            ..Default::default()
        };
        let basis = match gp {
            Some(_) => Some(KlBasis::new(&CovarianceOperator::WHITE, r)?),
            None => None,
        };
        let gdata = match (gp, &basis) {
            (Some((alpha, cutoff)), Some(b)) => Some(GaussianData::from_spectrum(&FieldSpectrum::gaussian_process(alpha, cutoff), b)),
            _ => None,
        };
        let mut den: Box<dyn Denoiser + '_> = match (&state, &gdata, &basis) {
            (Some(s), _, _) => Box::new(ModelDenoiser::with_params(&s.model, &s.ema)),
            (None, Some(d), Some(b)) => Box::new(GaussianDenoiser { data: d, basis: b }),
            _ => bail!("nothing to evaluate: pass --checkpoint or --oracle"),
        };
        if wants(Metric::ScoreError) {
            if let (Some(d), Some(b)) = (&gdata, &basis) {
                let rep = score_error(den.as_mut(), d, b, &PROBE_SIGMAS, cfg.eval.probes, &mut rng(cfg.seed, 2000 + r as u64))?;
                row.score_error = Some(rep.mean);
            }
        }
        if wants(Metric::Spectrum) || wants(Metric::ProxyFid) {
            if cfg.data.images.is_some() {
                bail!("spectrum and proxy-fid compare against synthetic draws; image data is not supported");
            }
            let channels = cfg.data.channels;
            let samples = sample(den.as_mut(), cfg.eval.count, r, channels, &schedule, &CovarianceOperator::WHITE, &mut rng(cfg.seed, 3000 + r as u64))?.samples;
            let mut gt_rng = rng(cfg.seed, 4000 + r as u64);
            let truth: Vec<GridFunction> = (0..cfg.eval.count).map(|_| sample_on_grid(&data_spec, r, &mut gt_rng)).collect::<dfu_core::Result<_>>()?;
            if wants(Metric::Spectrum) {
                let e = band_errors(&samples, &truth, train_max)?;
                row.coherence_error = Some(e.coherence);
                row.fidelity_error = Some(e.fidelity);
            }
            if wants(Metric::ProxyFid) {
                row.proxy_fid = Some(proxy_fid(&samples, &truth, &cfg.eval.extractor)?);
            }
        }
        let show = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        println!(
            "r={r}: score_error {} coherence {} fidelity {} proxy_fid {}",
            show(row.score_error),
            show(row.coherence_error),
            show(row.fidelity_error),
            show(row.proxy_fid)
        );
        rows.push(row);
    }
    dir.write_report("eval.json", &rows)?;
    Ok(true)
}

#[derive(Serialize)]
struct CheckLine {
    name: String,
    value: f64,
    tolerance: f64,
    passed: bool,
}

fn report_checks(lines: &[CheckLine], out: Option<&Path>, cfg: &RunConfig, file: &str) -> Result<bool> {
    for l in lines {
        println!("{} {}: {:.3e} (tolerance {:.0e})", if l.passed { "PASS" } else { "FAIL" }, l.name, l.value, l.tolerance);
    }
    if let Some(out) = out {
        RunDir::open(out, cfg)?.write_report(file, &lines)?;
    }
    Ok(lines.iter().all(|l| l.passed))
}

const GRAD_TOLERANCE: f64 = 1e-4;

fn run_gradcheck(cfg: RunConfig, out: Option<&Path>) -> Result<bool> {
    let mut reports = op_suite(&[1, 2, 5, 8], cfg.seed)?;
    let r = (1..=1024).find(|&r| cfg.model.is_admissible(r)).context("model has no admissible resolution")?;
    reports.extend(block_grad_check(&cfg.model, r, 1e-5, cfg.seed)?);
    let lines: Vec<CheckLine> = reports
        .iter()
        .map(|rep| CheckLine {
            name: rep.label.clone(),
            value: rep.max_rel_error,
            tolerance: GRAD_TOLERANCE,
            passed: rep.passed(GRAD_TOLERANCE),
        })
        .collect();
    report_checks(&lines, out, &cfg, "gradcheck.json")
}

fn run_oracle(cfg: RunConfig, out: Option<&Path>) -> Result<bool> {
    let checks = dfu_core::diffusion::oracle_suite(cfg.seed)?;
    let lines: Vec<CheckLine> = checks
        .into_iter()
        .map(|c| CheckLine {
            name: c.name,
            value: c.value,
            tolerance: c.tolerance,
            passed: c.passed,
        })
        .collect();
    report_checks(&lines, out, &cfg, "oracle.json")
}
