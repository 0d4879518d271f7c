//! One line per acceptance criterion. Runs without the libtest harness so the
//! lines show up in plain `cargo test` output.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use fpdiff::diffusion_r3::{self, gmm_marginal_score, reverse_em_step, GaussianMixture, NoiseScheduleR3};
use fpdiff::diffusion_so3::{reverse_step, NoiseScheduleSO3};
use fpdiff::igso3::{self, angle_marginal, IgSo3Params};
use fpdiff::rng::{normal, normal_vec, seeded, substream};
use fpdiff::score_fpe::{hutchinson_divergence, FieldOrigin, FpeConfig, ProbeDesign, ScoreField};
use fpdiff::seq_ctmc::{forward_corrupt, reverse_rates, tau_leap_step, SeqSchedule, SeqState};
use fpdiff::so3::{exp_map, geodesic_distance, sample_haar, Rotation, TangentVector};
use fpdiff::toy_model::{fidelity_grad, Architecture, Context, DenoiserParams, FidelityItem, FidelityOptions};
use fpdiff::{diffusion_so3, seq_ctmc, GeoState, Schedules};
use fpdiff_cli::commands;
use fpdiff_cli::config::RunConfig;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn verify_report() -> fpdiff::verification::VerifyReport {
    let dir = tempfile::tempdir().unwrap();
    commands::verify_fpe(&RunConfig::default().resolve(None).unwrap(), dir.path()).unwrap()
}

fn score_fpe_satisfaction() -> Check {
    let start = Instant::now();
    let r = verify_report();
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    for c in &r.cases {
        let key = format!("{}/{}", c.case, c.manifold);
        let w = worst.entry(key).or_insert(if c.expect_consistent { 0.0 } else { f64::INFINITY });
        *w = if c.expect_consistent { w.max(c.relative_residual) } else { w.min(c.relative_residual) };
    }
    let detail = format!(
        "{} in {:.1}s",
        worst.iter().map(|(k, v)| format!("{k} {v:.2e}")).collect::<Vec<_>>().join(", "),
        start.elapsed().as_secs_f64()
    );
    ensure(r.cases.iter().all(|c| c.pass), detail)
}

fn fd_order() -> Check {
    let r = verify_report();
    let orders: Vec<f64> = r.fd_order.iter().filter_map(|row| row.order).collect();
    let detail = format!(
        "dt {:?}, orders {:?}",
        r.fd_order.iter().map(|row| row.dt).collect::<Vec<_>>(),
        orders.iter().map(|o| (o * 1000.0).round() / 1000.0).collect::<Vec<_>>()
    );
    ensure(orders.len() == 2 && orders.iter().all(|&o| o >= 1.9), detail)
}

/// `s(x) = A·x`, with divergence `tr A`.
struct Linear {
    a: Vec<Vec<f64>>,
}

impl ScoreField for Linear {
    fn eval_x(&self, state: &GeoState, _t: f64) -> Vec<f64> {
        self.a.iter().map(|row| row.iter().zip(&state.x).map(|(a, x)| a * x).sum()).collect()
    }

    fn eval_r(&self, state: &GeoState, _t: f64) -> Vec<TangentVector> {
        vec![TangentVector::ZERO; state.n_residues()]
    }

    fn origin(&self) -> FieldOrigin {
        FieldOrigin::Synthetic
    }
}

fn hutchinson() -> Check {
    let d = 10;
    let mut rng = seeded(41);
    let a: Vec<Vec<f64>> = (0..d)
        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 } + 0.5 * normal(&mut rng)).collect())
        .collect();
    let trace: f64 = (0..d).map(|i| a[i][i]).sum();
    let field = Linear { a };
    let state = GeoState::new(normal_vec(&mut rng, d), Vec::new()).unwrap();
    let cfg = |n| FpeConfig {
        n_probes: n,
        probe_design: ProbeDesign::Iid,
        ..FpeConfig::default()
    };
    let big = hutchinson_divergence(&field, &state, 0.5, &cfg(10_000), &mut seeded(42)).unwrap();
    let rel = (big - trace).abs() / trace.abs();
    let n = 10_000;
    let singles: Vec<f64> = (0..n)
        .map(|j| hutchinson_divergence(&field, &state, 0.5, &cfg(1), &mut substream(43, j)).unwrap())
        .collect();
    let mean = singles.iter().sum::<f64>() / n as f64;
    let sd = (singles.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let se = sd / (n as f64).sqrt();
    let z = (mean - trace) / se;
    ensure(
        rel < 0.01 && z.abs() < 3.0,
        format!("trace {trace:.4}, 10^4 probes {big:.4} (rel {rel:.2e}); single-probe mean {mean:.4}, z = {z:.2}"),
    )
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
    }
    s * h / 3.0
}

fn kernels() -> Check {
    let mut worst_norm = 0.0f64;
    for k in 0..=10 {
        let s2 = 10f64.powf(-3.0 + 0.5 * k as f64);
        let p = IgSo3Params::new(s2).unwrap();
        let total = simpson(|w| angle_marginal(w, &p).unwrap(), 0.0, PI, 200_000);
        worst_norm = worst_norm.max((total - 1.0).abs());
    }
    let haar = IgSo3Params::new(100.0).unwrap();
    let haar_gap = (0..=100)
        .map(|i| {
            let w = PI * i as f64 / 100.0;
            (angle_marginal(w, &haar).unwrap() - (1.0 - w.cos()) / PI).abs()
        })
        .fold(0.0, f64::max);

    let sched = NoiseScheduleR3::default();
    let n = 100_000;
    let mut rng = seeded(44);
    let x0 = [2.0, -1.0, 0.5];
    let mut m1 = [0.0; 3];
    let mut m2 = [0.0; 3];
    for _ in 0..n {
        let x = diffusion_r3::forward_sample(&sched, &x0, 1.0, &mut rng).unwrap().x;
        for d in 0..3 {
            m1[d] += x[d] / n as f64;
            m2[d] += x[d] * x[d] / n as f64;
        }
    }
    let se1 = 1.0 / (n as f64).sqrt();
    let se2 = (2.0 / n as f64).sqrt();
    let (alpha, var) = sched.kernel_params(1.0);
    let mut z_max = 0.0f64;
    for d in 0..3 {
        let mean = alpha * x0[d];
        z_max = z_max.max(((m1[d] - mean) / se1).abs());
        z_max = z_max.max(((m2[d] - var - mean * mean) / se2).abs());
    }
    let to_standard = m1.iter().map(|m| m.abs() / se1).chain(m2.iter().map(|m| (m - 1.0).abs() / se2)).fold(0.0, f64::max);
    ensure(
        worst_norm < 1e-4 && haar_gap < 1e-4 && z_max < 3.0 && to_standard < 4.0,
        format!(
            "max |∫f - 1| {worst_norm:.1e} over σ² ∈ [1e-3, 100]; σ² = 100 vs Haar {haar_gap:.1e}; \
             VP t = 1 moments max z {z_max:.2} (vs N(0,1): {to_standard:.2})"
        ),
    )
}

fn oracle_sampling() -> Check {
    let start = Instant::now();
    let sched = NoiseScheduleR3::default();
    let means = [vec![1.5, -0.5, 0.8], vec![-1.2, 1.0, -0.6]];
    let weights = [0.3, 0.7];
    let gmm = GaussianMixture::isotropic(weights.to_vec(), means.to_vec(), 0.05).unwrap();
    let clean = gmm.marginal(1.0, 0.0).unwrap();
    let (n, steps) = (10_000, 500);
    let tau = (1.0 - sched.t_eps) / steps as f64;
    let mut sums = [[0.0; 3]; 2];
    let mut counts = [0usize; 2];
    for j in 0..n {
        let mut rng = substream(45, j);
        let mut x = normal_vec(&mut rng, 3);
        for k in 0..steps {
            let t = 1.0 - k as f64 * tau;
            x = reverse_em_step(&sched, &x, t, tau, |x, t| gmm_marginal_score(&gmm, &sched, x, t).unwrap(), &mut rng, false)
                .unwrap()
                .x;
        }
        let r = clean.responsibilities(&x);
        let c = usize::from(r[1] > r[0]);
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(&x) {
            *s += v;
        }
    }
    let mut mean_err = 0.0f64;
    let mut frac_err = 0.0f64;
    for c in 0..2 {
        frac_err = frac_err.max((counts[c] as f64 / n as f64 - weights[c]).abs());
        let err: f64 = sums[c].iter().zip(&means[c]).map(|(s, m)| (s / counts[c] as f64 - m).powi(2)).sum::<f64>().sqrt();
        mean_err = mean_err.max(err / means[c].iter().map(|v| v * v).sum::<f64>().sqrt());
    }

    let so3 = NoiseScheduleSO3::default();
    let mode = exp_map(&TangentVector::new(0.4, -1.1, 0.7));
    let tau = (1.0 - so3.t_eps) / steps as f64;
    let mut dist: Vec<f64> = (0..2000)
        .map(|j| {
            let mut rng = substream(46, j);
            let mut r = vec![sample_haar(&mut rng)];
            for k in 0..steps {
                let t = 1.0 - k as f64 * tau;
                let p = so3.kernel(t).unwrap();
                r = reverse_step(&so3, &r, t, tau, |r, _| vec![igso3::score(&mode, &r[0], &p)], &mut rng, false)
                    .unwrap()
                    .rotations;
            }
            geodesic_distance(&mode, &r[0])
        })
        .collect();
    dist.sort_by(|a, b| a.total_cmp(b));
    let median = dist[dist.len() / 2];
    ensure(
        mean_err < 0.05 && frac_err < 0.03 && median < 0.2,
        format!(
            "mixture mean error {mean_err:.3}, fraction error {frac_err:.3}; frame median {median:.3} rad; {:.1}s",
            start.elapsed().as_secs_f64()
        ),
    )
}

const P0: [[f64; 2]; 2] = [[0.45, 0.1], [0.05, 0.4]];

fn enumerated_posterior(sched: &SeqSchedule, at: &[usize], t: f64) -> Vec<Vec<f64>> {
    let mut post = vec![vec![0.0; 2]; 2];
    let mut z = 0.0;
    for a in 0..2 {
        for b in 0..2 {
            let w = P0[a][b] * sched.transition(t, a, at[0]) * sched.transition(t, b, at[1]);
            post[0][a] += w;
            post[1][b] += w;
            z += w;
        }
    }
    post.iter_mut().for_each(|row| row.iter_mut().for_each(|v| *v /= z));
    post
}

fn sequence_ctmc() -> Check {
    let sched = SeqSchedule {
        n_types: 2,
        ..SeqSchedule::default()
    };
    let steps = 200;
    let tau = (1.0 - 1e-3) / steps as f64;
    let n = 100_000;
    let mut hist = [[0.0; 2]; 2];
    for j in 0..n {
        let mut rng = substream(47, j);
        let mut s = SeqState {
            types: vec![j as usize % 2, (j as usize / 2) % 2],
            t: 1.0,
        };
        for k in 0..steps {
            let t = 1.0 - k as f64 * tau;
            let post = enumerated_posterior(&sched, &s.types, t);
            let rates = reverse_rates(&sched, &post, &s.types, t).unwrap();
            s = tau_leap_step(&SeqState { t, ..s }, &rates, tau, &mut rng).unwrap();
        }
        hist[s.types[0]][s.types[1]] += 1.0 / n as f64;
    }
    let tv = 0.5 * (0..4).map(|i| (hist[i / 2][i % 2] - P0[i / 2][i % 2]).abs()).sum::<f64>();

    let full = SeqSchedule::default();
    let k = full.n_types as f64;
    let m = 50_000;
    let mut z_max = 0.0f64;
    for (i, &t) in [0.02, 0.05, 0.1, 0.2, 0.3, 0.5].iter().enumerate() {
        let at = forward_corrupt(&full, &vec![7usize; m], t, &mut substream(48, i as u64)).unwrap();
        let same = at.types.iter().filter(|&&a| a == 7).count() as f64 / m as f64;
        let keep = (-full.beta_bar(t)).exp();
        let p = keep + (1.0 - keep) / k;
        z_max = z_max.max((same - p).abs() / (p * (1.0 - p) / m as f64).sqrt());
    }
    ensure(
        tv < 1e-2 && z_max < 4.0,
        format!("tau-leaping TV {tv:.2e} at 200 steps; keep-probability curve max z {z_max:.2}"),
    )
}

fn regularizer_config() -> RunConfig {
    RunConfig::load(&workspace_root().join("configs/regularizer.toml")).unwrap()
}

fn regularizer_effect() -> Check {
    let base = regularizer_config();
    let mut wins = 0;
    let mut worst_mse = f64::NEG_INFINITY;
    let mut parts = Vec::new();
    for seed in 1..=3 {
        let run = |enabled: bool| {
            let mut cfg = base.clone();
            cfg.train.fpe_enabled = enabled;
            let cfg = cfg.resolve(Some(seed)).unwrap();
            let dir = tempfile::tempdir().unwrap();
            commands::train(&cfg, dir.path()).unwrap().eval
        };
        let (on, off) = (run(true), run(false));
        if on.fpe_loss < off.fpe_loss {
            wins += 1;
        }
        let dmse = on.denoise_mse / off.denoise_mse - 1.0;
        worst_mse = worst_mse.max(dmse);
        parts.push(format!("seed {seed}: fpe {:.3} -> {:.3}, mse {:+.1}%", off.fpe_loss, on.fpe_loss, 100.0 * dmse));
    }
    ensure(wins == 3 && worst_mse <= 0.10, format!("{wins}/3 wins; {}", parts.join("; ")))
}

fn cost_accounting() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::default().resolve(None).unwrap();
    let (n, t) = commands::bench(&cfg, dir.path()).unwrap();
    ensure(
        n.forward_pass_ratio == 3.0 && n.baseline_matches_zero_weight && n.reps >= 20 && t.ratio_mean.is_finite(),
        format!(
            "forward passes {} / {} = {}; wall-clock ratio {:.2} ± {:.2} over {} reps (not asserted)",
            n.forward_passes_on,
            n.forward_passes_off,
            n.forward_pass_ratio,
            t.ratio_mean,
            t.ratio_var.sqrt(),
            n.reps
        ),
    )
}

fn gradient_correctness() -> Check {
    let sch = Schedules::default();
    let arch = Architecture::new(4, 1, 2, 20);
    let ctx = Context(vec![0.5, -1.0]);
    let mut rng = seeded(49);
    let mut worst = f64::INFINITY;
    for trial in 0..3 {
        let theta = (0..arch.n_params()).map(|_| 0.3 * normal(&mut rng)).collect();
        let p = DenoiserParams::from_vec(arch, theta).unwrap();
        let batch: Vec<FidelityItem> = [0.15, 0.4, 0.65, 0.9]
            .iter()
            .map(|&t| {
                let x0 = normal_vec(&mut rng, 12);
                let r0: Vec<Rotation> = (0..4).map(|_| sample_haar(&mut rng)).collect();
                let a0: Vec<usize> = (0..4).map(|i| (5 * i + trial) % 20).collect();
                let xt = diffusion_r3::forward_sample(&sch.r3, &x0, t, &mut rng).unwrap().x;
                let rt = diffusion_so3::forward_sample(&sch.so3, &r0, t, &mut rng).unwrap().rotations;
                let a_t = seq_ctmc::forward_corrupt(&sch.seq, &a0, t, &mut rng).unwrap().types;
                FidelityItem {
                    x0,
                    r0,
                    a0,
                    state: GeoState::new(xt, rt).unwrap(),
                    a_t,
                    t,
                }
            })
            .collect();
        let opts = FidelityOptions::default();
        let ev = fidelity_grad(&p, &batch, &sch, &ctx, &opts).unwrap();
        let h = 1e-6;
        let fd: Vec<f64> = (0..p.len())
            .map(|k| {
                let at = |d: f64| {
                    let mut th = p.as_slice().to_vec();
                    th[k] += d;
                    fidelity_grad(&DenoiserParams::from_vec(arch, th).unwrap(), &batch, &sch, &ctx, &opts)
                        .unwrap()
                        .loss
                };
                (at(h) - at(-h)) / (2.0 * h)
            })
            .collect();
        let dot: f64 = ev.grad.iter().zip(&fd).map(|(a, b)| a * b).sum();
        let na = ev.grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.min(dot / (na * nb));
    }
    ensure(worst > 1.0 - 1e-6, format!("worst cosine 1 - {:.1e} over 3 random batches", 1.0 - worst))
}

fn run_cli(args: &[&str], out: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_fpdiff"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    if status.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&status.stderr)))
    }
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_name() != "timing.json")
        .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
        .collect()
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("small.toml");
    std::fs::write(
        &cfg_path,
        "seed = 5\n[corpus]\nn_train = 64\nn_heldout = 4\n[train]\nsteps = 20\nbatch_size = 8\n\
         [eval]\nt_grid = [0.3, 0.7]\n[sample]\nnum_steps = 50\nnum_samples = 8\n[bench]\nreps = 20\nsteps = 1\n",
    )
    .unwrap();
    let oracle_path = tmp.path().join("oracle.toml");
    std::fs::write(&oracle_path, "[sample]\ndriver = \"oracle\"\nnum_steps = 100\nnum_samples = 32\n").unwrap();
    let cfg = cfg_path.to_str().unwrap();
    let oracle = oracle_path.to_str().unwrap();
    let ckpt = tmp.path().join("train-a/checkpoint.txt");
    let ckpt = ckpt.to_str().unwrap();
    let cases: Vec<(&str, Vec<&str>)> = vec![
        ("dataset", vec!["dataset", "--config", cfg]),
        ("train", vec!["train", "--config", cfg]),
        ("sample", vec!["sample", "--config", cfg, "--checkpoint", ckpt]),
        ("sample-oracle", vec!["sample", "--config", oracle, "--seed", "9"]),
        ("verify-fpe", vec!["verify-fpe", "--config", cfg]),
        ("bench", vec!["bench", "--config", cfg]),
    ];
    let mut compared = 0;
    for (name, args) in &cases {
        let (a, b) = (tmp.path().join(format!("{name}-a")), tmp.path().join(format!("{name}-b")));
        run_cli(args, &a)?;
        run_cli(args, &b)?;
        let (fa, fb) = (files(&a), files(&b));
        if fa.len() < 3 {
            return Err(format!("{name}: only {} files", fa.len()));
        }
        if fa != fb {
            let diff: Vec<_> = fa.keys().filter(|k| fa.get(*k) != fb.get(*k)).collect();
            return Err(format!("{name}: files differ: {diff:?}"));
        }
        compared += fa.len();
    }
    Ok(format!("{} commands run twice, {compared} files byte-identical (timing.json excluded)", cases.len()))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("score-FPE satisfaction on exact scores", score_fpe_satisfaction),
        ("finite-difference order of accuracy", fd_order),
        ("Hutchinson correctness", hutchinson),
        ("kernel correctness", kernels),
        ("oracle sampling", oracle_sampling),
        ("sequence CTMC", sequence_ctmc),
        ("regularizer effect", regularizer_effect),
        ("cost accounting", cost_accounting),
        ("gradient correctness", gradient_correctness),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".to_string()))
        });
        match outcome {
            Ok(d) => println!("PASS criterion {:>2} {name}: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {:>2} {name}: {d}", i + 1)
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
