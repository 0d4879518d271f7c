use super::*;
use rand::Rng;
use crate::diffusion_r3::{self, exact_kernel_score};
use crate::diffusion_so3;
use crate::igso3;
use crate::rng::{normal, seeded};
use crate::score_fpe::{self, FpeConfig};
use crate::seq_ctmc;
use crate::so3::{log_map, sample_haar};

fn arch(n: usize) -> Architecture {
    Architecture::new(n, 1, 2, 20)
}

fn ctx() -> Context {
    Context(vec![0.5, -1.0])
}

/// Parameters with every entry random, so both heads are active.
fn random_params(a: Architecture, seed: u64, scale: f64) -> DenoiserParams {
    let mut rng = seeded(seed);
    let theta = (0..a.n_params()).map(|_| scale * normal(&mut rng)).collect();
    DenoiserParams::from_vec(a, theta).unwrap()
}

fn random_state(rng: &mut crate::rng::StreamRng, n: usize) -> GeoState {
    let x = (0..3 * n).map(|_| normal(rng)).collect();
    let r = (0..n).map(|_| sample_haar(rng)).collect();
    GeoState::new(x, r).unwrap()
}

fn random_item(rng: &mut crate::rng::StreamRng, n: usize, t: f64) -> FidelityItem {
    let sch = Schedules::default();
    let x0: Vec<f64> = (0..3 * n).map(|_| normal(rng)).collect();
    let r0: Vec<Rotation> = (0..n).map(|_| sample_haar(rng)).collect();
    let a0: Vec<usize> = (0..n).map(|i| (7 * i + 3) % 20).collect();
    let xt = diffusion_r3::forward_sample(&sch.r3, &x0, t, rng).unwrap().x;
    let rt = diffusion_so3::forward_sample(&sch.so3, &r0, t, rng).unwrap().rotations;
    let a_t = seq_ctmc::forward_corrupt(&sch.seq, &a0, t, rng).unwrap().types;
    FidelityItem {
        x0,
        r0,
        a0,
        state: GeoState::new(xt, rt).unwrap(),
        a_t,
        t,
    }
}

fn opts() -> FidelityOptions {
    FidelityOptions::default()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / (na * nb)
}

#[test]
fn default_architecture_fits_the_cap() {
    let a = arch(4);
    assert_eq!(a.input_dim(), 27);
    assert_eq!(a.output_dim(), 26);
    assert_eq!(a.n_params(), 1754);
    assert!(a.validate().is_ok());
    let wide = Architecture { hidden: 64, ..a };
    assert!(DenoiserParams::zeros(wide).is_err());
}

#[test]
fn fresh_model_is_identity_denoiser() {
    let p = DenoiserParams::new(arch(4), 11).unwrap();
    let mut rng = seeded(1);
    let s = random_state(&mut rng, 4);
    let pred = p.predict_clean(&Schedules::default(), &s, 0.3, &ctx()).unwrap();
    assert_eq!(pred.x0, s.x);
    for (i, v) in pred.v.iter().enumerate() {
        assert_eq!(*v, TangentVector::ZERO);
        assert!((pred.r0[i].matrix() - s.rotations[i].matrix()).abs().max() < 1e-12);
    }
}

#[test]
fn outputs_finite_and_rotations_valid() {
    let p = random_params(arch(4), 2, 0.5);
    let mut rng = seeded(3);
    for k in 0..10_000 {
        let mut s = random_state(&mut rng, 4);
        for x in &mut s.x {
            *x *= 5.0;
        }
        let t = 1e-3 + (k as f64 / 10_000.0) * (1.0 - 1e-3);
        let pred = p.predict_clean(&Schedules::default(), &s, t, &ctx()).unwrap();
        assert!(pred.x0.iter().all(|v| v.is_finite()));
        assert!(pred.logits.iter().flatten().all(|v| v.is_finite()));
        for r in &pred.r0 {
            assert!(r.invariant_error() < 1e-9);
        }
    }
}

#[test]
fn prediction_is_deterministic() {
    let p = random_params(arch(3), 4, 0.3);
    let s = random_state(&mut seeded(5), 3);
    assert_eq!(p.predict_clean(&Schedules::default(), &s, 0.4, &ctx()).unwrap(), p.predict_clean(&Schedules::default(), &s, 0.4, &ctx()).unwrap());
}

#[test]
fn rejects_bad_shapes_and_times() {
    let sch = Schedules::default();
    let p = DenoiserParams::new(arch(3), 0).unwrap();
    let s = random_state(&mut seeded(6), 3);
    assert!(implied_score(&p, &sch, &s, 5e-4, &ctx()).is_err());
    assert!(implied_score(&p, &sch, &s, 0.5, &Context(vec![0.0])).is_err());
    assert!(implied_score(&p, &sch, &random_state(&mut seeded(6), 2), 0.5, &ctx()).is_err());
    assert!(implied_score(&p, &sch, &s, 0.5, &ctx()).is_ok());
}

#[test]
fn perfect_prediction_reproduces_kernel_scores() {
    let sch = Schedules::default();
    let mut rng = seeded(7);
    for &t in &[0.05, 0.3, 0.7, 1.0] {
        let item = random_item(&mut rng, 3, t);
        let v: Vec<TangentVector> = item
            .state
            .rotations
            .iter()
            .zip(&item.r0)
            .map(|(rt, r0)| log_map(&(rt.transpose() * *r0)))
            .collect();
        let pred = Prediction {
            x0: item.x0.clone(),
            r0: item.r0.clone(),
            v,
            logits: vec![vec![0.0; 20]; 3],
        };
        let s = implied_from_prediction(&sch, &item.state, &pred, t).unwrap();
        let exact = exact_kernel_score(&sch.r3, &item.x0, &item.state.x, t).unwrap();
        for (a, b) in s.s_x.iter().zip(&exact) {
            assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
        let p = sch.so3.kernel(t).unwrap();
        for (i, sr) in s.s_r.iter().enumerate() {
            let want = igso3::score(&item.r0[i], &item.state.rotations[i], &p);
            assert!((sr.0 - want.0).norm() <= 1e-9 * (1.0 + want.norm()));
        }
    }
}

#[test]
fn large_corrections_wrap_consistently() {
    let p = IgSo3Params::new(0.4).unwrap();
    let mut rng = seeded(8);
    for _ in 0..200 {
        let rt = sample_haar(&mut rng);
        let v = TangentVector(crate::so3::sample_unit_vector(&mut rng) * (0.2 + 9.0 * rng.random::<f64>()));
        let r0 = rt * exp_map(&v);
        let (s, _) = frame_score(&v, &p);
        let want = igso3::score(&r0, &rt, &p);
        if (v.norm() / PI).fract().abs() > 1e-3 {
            assert!((s.0 - want.0).norm() < 1e-8 * (1.0 + want.norm()));
        }
    }
}

#[test]
fn frame_score_jacobian_matches_fd() {
    let p = IgSo3Params::new(0.6).unwrap();
    for v in [TangentVector::new(0.3, -0.2, 0.5), TangentVector::new(2.5, 3.1, -1.0)] {
        let (_, jac) = frame_score(&v, &p);
        let h = 1e-6;
        for j in 0..3 {
            let mut d = Vector3::zeros();
            d[j] = h;
            let plus = frame_score(&TangentVector(v.0 + d), &p).0;
            let minus = frame_score(&TangentVector(v.0 - d), &p).0;
            let fd = (plus.0 - minus.0) / (2.0 * h);
            assert!((fd - jac.column(j)).norm() < 1e-6 * (1.0 + fd.norm()));
        }
    }
}

#[test]
fn implied_field_is_continuous_in_time() {
    let sch = Schedules::default();
    let p = random_params(arch(3), 9, 0.3);
    let s = random_state(&mut seeded(10), 3);
    let mut prev = implied_score(&p, &sch, &s, 0.02, &ctx()).unwrap();
    let steps = 2000;
    for k in 1..=steps {
        let t = 0.02 + 0.96 * k as f64 / steps as f64;
        let cur = implied_score(&p, &sch, &s, t, &ctx()).unwrap();
        let scale = 1.0 + cur.s_x.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let jump = cur.s_x.iter().zip(&prev.s_x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(jump < 0.05 * scale, "coordinate jump {jump} at t = {t}");
        let rscale = 1.0 + cur.s_r.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let rjump = cur.s_r.iter().zip(&prev.s_r).map(|(a, b)| (a.0 - b.0).norm()).fold(0.0, f64::max);
        assert!(rjump < 0.05 * rscale, "frame jump {rjump} at t = {t}");
        prev = cur;
    }
}

#[test]
fn zero_noise_batch_has_zero_structure_loss() {
    let sch = Schedules::default();
    let p = DenoiserParams::new(arch(4), 12).unwrap();
    let mut rng = seeded(13);
    let batch: Vec<FidelityItem> = (0..4)
        .map(|_| {
            let mut it = random_item(&mut rng, 4, 1e-3);
            it.state = GeoState::new(it.x0.clone(), it.r0.clone()).unwrap();
            it.a_t = it.a0.clone();
            it
        })
        .collect();
    let ev = fidelity_grad(&p, &batch, &sch, &ctx(), &opts()).unwrap();
    assert!(ev.dsm_x < 1e-20);
    assert!(ev.dsm_r.abs() < 1e-12);
    assert!(ev.ce < 1e-3);
}

#[test]
fn single_item_dsm_x_is_mean_squared_error() {
    let sch = Schedules::default();
    let p = random_params(arch(3), 14, 0.2);
    let item = random_item(&mut seeded(15), 3, 0.4);
    let pred = p.predict_clean(&Schedules::default(), &item.state, item.t, &ctx()).unwrap();
    let mse = pred.x0.iter().zip(&item.x0).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 9.0;
    let ev = fidelity_grad(&p, std::slice::from_ref(&item), &sch, &ctx(), &opts()).unwrap();
    assert_eq!(ev.dsm_x, mse);
    assert_eq!(ev.loss, ev.dsm_x + ev.dsm_r + 0.4 * ev.ce);

    let post: Vec<Vec<f64>> = pred
        .logits
        .iter()
        .zip(&item.a_t)
        .map(|(l, &a)| seq_ctmc::posterior_from_logits(&sch.seq, l, a, item.t))
        .collect();
    let ce = seq_ctmc::ce_loss(&post, &item.a0).unwrap();
    assert!((ev.ce - ce).abs() < 1e-12);
}

#[test]
fn fidelity_gradient_matches_finite_differences() {
    let sch = Schedules::default();
    let a = arch(4);
    let mut rng = seeded(16);
    for trial in 0..4 {
        let o = FidelityOptions {
            scale_rot_scores: trial % 2 == 0,
            ..opts()
        };
        let p = random_params(a, 100 + trial, 0.3);
        let batch: Vec<FidelityItem> = [0.1, 0.35, 0.6, 0.9]
            .iter()
            .map(|&t| random_item(&mut rng, 4, t))
            .collect();
        let ev = fidelity_grad(&p, &batch, &sch, &ctx(), &o).unwrap();
        // The unscaled loss is sharply curved near |v| = π; keep h small.
        let h = 1e-6;
        let fd: Vec<f64> = (0..p.len())
            .map(|k| {
                let at = |d: f64| {
                    let mut th = p.as_slice().to_vec();
                    th[k] += d;
                    fidelity_grad(&DenoiserParams::from_vec(a, th).unwrap(), &batch, &sch, &ctx(), &o)
                        .unwrap()
                        .loss
                };
                (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h)
            })
            .collect();
        let c = cosine(&ev.grad, &fd);
        assert!(c > 1.0 - 1e-6, "cosine {c}");
        let err = ev.grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err < 1e-5 * norm, "trial {trial}: relative error {}", err / norm);
    }
}

#[test]
fn fpe_gradient_pullback_matches_finite_differences() {
    let sch = Schedules::default();
    let a = arch(2);
    let p = random_params(a, 17, 0.2);
    let cfg = FpeConfig::default();
    let c = ctx();
    let mut rng = seeded(18);
    let cases: Vec<(GeoState, f64)> = [0.3, 0.7]
        .iter()
        .map(|&t| (random_item(&mut rng, 2, t).state, t))
        .collect();

    let loss = |theta: &[f64]| -> f64 {
        let q = DenoiserParams::from_vec(a, theta.to_vec()).unwrap();
        let f = ModelField {
            params: &q,
            schedules: sch,
            ctx: &c,
        };
        cases
            .iter()
            .enumerate()
            .map(|(i, (s, t))| {
                score_fpe::residual_loss_with_cotangents(&f, &sch, s, *t, &cfg, i as u64, 1.0)
                    .unwrap()
                    .1
            })
            .sum()
    };

    let field = ModelField {
        params: &p,
        schedules: sch,
        ctx: &c,
    };
    let mut grad = vec![0.0; p.len()];
    for (i, (s, t)) in cases.iter().enumerate() {
        let (_, _, cots) = score_fpe::residual_loss_with_cotangents(&field, &sch, s, *t, &cfg, i as u64, 1.0).unwrap();
        field.pullback(&cots, &mut grad).unwrap();
    }

    let mut pick = seeded(19);
    let idx: Vec<usize> = (0..60).map(|_| pick.random_range(0..p.len())).collect();
    let h = 1e-4;
    let fd: Vec<f64> = idx
        .iter()
        .map(|&k| {
            let at = |d: f64| {
                let mut th = p.as_slice().to_vec();
                th[k] += d;
                loss(&th)
            };
            (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h)
        })
        .collect();
    let analytic: Vec<f64> = idx.iter().map(|&k| grad[k]).collect();
    let cs = cosine(&analytic, &fd);
    assert!(cs > 1.0 - 1e-6, "cosine {cs}");
}

#[test]
fn checkpoint_round_trips_exactly() {
    let p = random_params(arch(4), 20, 1.0);
    let text = p.to_checkpoint();
    assert!(text.starts_with("fpdiff-checkpoint 1\narchitecture residues=4 atoms=1 ctx=2 hidden=32 types=20\nparameters 1754\n"));
    assert_eq!(DenoiserParams::from_checkpoint(&text).unwrap(), p);
}

#[test]
fn checkpoint_rejects_corruption() {
    let p = DenoiserParams::new(arch(2), 21).unwrap();
    let text = p.to_checkpoint();
    assert!(DenoiserParams::from_checkpoint(&text.replacen("fpdiff", "other", 1)).is_err());
    assert!(DenoiserParams::from_checkpoint(&text.replacen("parameters", "params", 1)).is_err());
    let truncated: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
    assert!(DenoiserParams::from_checkpoint(&truncated).is_err());
    assert!(DenoiserParams::from_checkpoint(&format!("{text}nan\n")).is_err());
}

