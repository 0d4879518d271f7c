use std::path::Path;

use anyhow::{bail, Context as _, Result};
use fpdiff::dataset::{ProductMixture, RecoveryMetrics, Sample};
use fpdiff::sampler::{sample_many, JointDriver, ModelDriver, OracleDriver};
use fpdiff::toy_model::{Architecture, Context, DenoiserParams};
use fpdiff::trainer::{evaluate, train as fit, EvalMetrics, StepReport, TrainConfig};
use fpdiff::verification::{run_verification, VerifyReport};
use fpdiff::Error;
use serde::Serialize;

use crate::config::{Driver, RunConfig};
use crate::output::{num, RunDir};

/// Training corpus and held-out set: substreams 0 and 1 of the master seed.
pub fn corpus(cfg: &RunConfig) -> Result<(ProductMixture, Vec<Sample>, Vec<Sample>)> {
    let m = ProductMixture::from_spec(&cfg.dataset)?;
    let train = m.generate(cfg.corpus.n_train, cfg.seed, 0);
    let heldout = m.generate(cfg.corpus.n_heldout, cfg.seed, 1);
    Ok((m, train, heldout))
}

pub fn architecture(cfg: &RunConfig) -> Architecture {
    Architecture {
        hidden: cfg.model.hidden,
        ..Architecture::new(cfg.dataset.n_residues, 1, cfg.model.context.len(), cfg.dataset.n_types)
    }
}

pub fn dataset(cfg: &RunConfig, out: &Path) -> Result<Vec<Sample>> {
    let dir = RunDir::create(out, cfg)?;
    let (_, train, _) = corpus(cfg)?;
    dir.write_samples(&train)?;
    Ok(train)
}

pub struct TrainOutcome {
    pub params: DenoiserParams,
    pub reports: Vec<StepReport>,
    pub eval: EvalMetrics,
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    let dir = RunDir::create(out, cfg)?;
    let (_, data, heldout) = corpus(cfg)?;
    let ctx = Context(cfg.model.context.clone());
    let init = DenoiserParams::new(architecture(cfg), cfg.seed)?;
    let (params, reports) = fit(&data, init, &cfg.schedules, &ctx, &cfg.train, &cfg.fpe)?;
    let mut lines = String::new();
    for r in &reports {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    dir.write_text("steps.jsonl", &lines)?;
    dir.write_csv(
        "loss_curve.csv",
        &["step", "dsm_x", "dsm_r", "ce", "fpe", "priors", "total"],
        reports.iter().map(|r| {
            let mut row = vec![r.step.to_string()];
            row.extend([r.dsm_x, r.dsm_r, r.ce, r.fpe, r.priors, r.total].iter().map(num));
            row
        }),
    )?;
    dir.write_text("checkpoint.txt", &params.to_checkpoint())?;
    let eval = evaluate(&params, &heldout, &cfg.schedules, &ctx, &cfg.eval)?;
    dir.write_json("eval.json", &eval)?;
    Ok(TrainOutcome { params, reports, eval })
}

#[derive(Debug, Serialize)]
pub struct SampleMetrics {
    pub driver: Driver,
    pub num_steps: usize,
    #[serde(flatten)]
    pub recovery: RecoveryMetrics,
}

pub fn sample(cfg: &RunConfig, checkpoint: Option<&Path>, out: &Path) -> Result<(Vec<Sample>, SampleMetrics)> {
    let mut cfg = cfg.clone();
    if let Some(p) = checkpoint {
        cfg.sample.checkpoint = Some(p.to_path_buf());
        cfg.sample.driver = Driver::Model;
    }
    let dir = RunDir::create(out, &cfg)?;
    let mixture = ProductMixture::from_spec(&cfg.dataset)?;
    let dims = (mixture.dim_x(), mixture.n_residues);
    let ctx = Context(cfg.model.context.clone());
    let params;
    let oracle;
    let driver: &dyn JointDriver = match cfg.sample.driver {
        Driver::Model => {
            let path = cfg
                .sample
                .checkpoint
                .as_deref()
                .context("the model driver needs --checkpoint or sample.checkpoint")?;
            let text =
                std::fs::read_to_string(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
            params = DenoiserParams::from_checkpoint(&text)?;
            let a = params.arch();
            if a.dim_x() != dims.0 || a.n_residues != dims.1 || a.n_types != mixture.n_types || a.ctx_dim != ctx.0.len() {
                bail!("checkpoint architecture ({}) does not match the dataset and context", a.descriptor());
            }
            &ModelDriver {
                params: &params,
                schedules: cfg.schedules,
                ctx: &ctx,
            }
        }
        Driver::Oracle => {
            oracle = OracleDriver {
                mixture: &mixture,
                schedules: cfg.schedules,
            };
            &oracle
        }
    };
    let samples = match sample_many(driver, &cfg.schedules, dims, &cfg.sample.sampling(), cfg.seed) {
        Ok(s) => s,
        Err(Error::SampleDiverged { sample, step, dump }) => {
            dir.write_text("trajectory_dump.csv", &dump)?;
            bail!(
                "sample {sample} became non-finite at step {step}; last states in {}",
                dir.file("trajectory_dump.csv").display()
            );
        }
        Err(e) => return Err(e.into()),
    };
    dir.write_samples(&samples)?;
    let metrics = SampleMetrics {
        driver: cfg.sample.driver,
        num_steps: cfg.sample.num_steps,
        recovery: mixture.recovery(&cfg.schedules, &samples)?,
    };
    dir.write_json("metrics.json", &metrics)?;
    Ok((samples, metrics))
}

pub fn verify_fpe(cfg: &RunConfig, out: &Path) -> Result<VerifyReport> {
    let dir = RunDir::create(out, cfg)?;
    let report = run_verification(&cfg.schedules, &cfg.verify, cfg.seed)?;
    dir.write_csv(
        "verify_report.csv",
        &["case", "manifold", "t", "relative_residual", "budget", "expect", "pass"],
        report.cases.iter().map(|c| {
            vec![
                c.case.clone(),
                c.manifold.to_string(),
                num(c.t),
                num(c.relative_residual),
                num(c.budget),
                if c.expect_consistent { "below" } else { "above" }.to_string(),
                c.pass.to_string(),
            ]
        }),
    )?;
    dir.write_csv(
        "fd_order.csv",
        &["dt", "error", "order"],
        report
            .fd_order
            .iter()
            .map(|r| vec![num(r.dt), num(r.error), r.order.map(num).unwrap_or_default()]),
    )?;
    dir.write_csv(
        "residual_curve.csv",
        &["t", "kernel_x", "kernel_r", "mixture_x", "scaled_x"],
        report
            .curve
            .iter()
            .map(|r| [r.t, r.kernel_x, r.kernel_r, r.mixture_x, r.scaled_x].iter().map(num).collect()),
    )?;
    Ok(report)
}

/// Deterministic half of the benchmark.
#[derive(Debug, Serialize)]
pub struct BenchCounters {
    pub reps: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub forward_passes_on: u64,
    pub forward_passes_off: u64,
    pub forward_pass_ratio: f64,
    /// Off-mode counters equal those of a zero-weight regularized run.
    pub baseline_matches_zero_weight: bool,
}

#[derive(Debug, Serialize)]
pub struct BenchTiming {
    pub mean_on_s: f64,
    pub mean_off_s: f64,
    pub var_on_s2: f64,
    pub var_off_s2: f64,
    /// Mean and sample variance of the per-repetition on/off ratio.
    pub ratio_mean: f64,
    pub ratio_var: f64,
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var)
}

pub fn bench(cfg: &RunConfig, out: &Path) -> Result<(BenchCounters, BenchTiming)> {
    let dir = RunDir::create(out, cfg)?;
    let (_, data, _) = corpus(cfg)?;
    let ctx = Context(cfg.model.context.clone());
    let init = DenoiserParams::new(architecture(cfg), cfg.seed)?;
    let mode = |enabled: bool, weight: f64| TrainConfig {
        steps: cfg.bench.steps,
        fpe_enabled: enabled,
        fpe_weight: weight,
        ..cfg.train.clone()
    };
    let on_cfg = mode(true, if cfg.train.fpe_weight > 0.0 { cfg.train.fpe_weight } else { 0.05 });
    let run = |tc: &TrainConfig| -> Result<(f64, u64)> {
        let (_, reports) = fit(&data, init.clone(), &cfg.schedules, &ctx, tc, &cfg.fpe)?;
        Ok((
            reports.iter().map(|r| r.wall_time_s).sum(),
            reports.iter().map(|r| r.forward_passes).sum(),
        ))
    };
    let (mut on_t, mut off_t, mut ratios) = (Vec::new(), Vec::new(), Vec::new());
    let (mut on_passes, mut off_passes) = (0, 0);
    for _ in 0..cfg.bench.reps {
        let (a, pa) = run(&on_cfg)?;
        let (b, pb) = run(&mode(false, cfg.train.fpe_weight))?;
        on_t.push(a);
        off_t.push(b);
        ratios.push(a / b);
        on_passes = pa;
        off_passes = pb;
    }
    let (_, zero_passes) = run(&mode(true, 0.0))?;
    let counters = BenchCounters {
        reps: cfg.bench.reps,
        steps: cfg.bench.steps,
        batch_size: cfg.train.batch_size,
        forward_passes_on: on_passes,
        forward_passes_off: off_passes,
        forward_pass_ratio: on_passes as f64 / off_passes as f64,
        baseline_matches_zero_weight: zero_passes == off_passes,
    };
    let (mean_on_s, var_on_s2) = mean_var(&on_t);
    let (mean_off_s, var_off_s2) = mean_var(&off_t);
    let (ratio_mean, ratio_var) = mean_var(&ratios);
    let timing = BenchTiming {
        mean_on_s,
        mean_off_s,
        var_on_s2,
        var_off_s2,
        ratio_mean,
        ratio_var,
    };
    dir.write_json("bench.json", &counters)?;
    dir.write_json("timing.json", &timing)?;
    Ok((counters, timing))
}
