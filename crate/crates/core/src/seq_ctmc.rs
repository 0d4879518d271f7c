//! Discrete diffusion over residue types.
//!
//! Forward process: at rate `β_A(t)` a position is resampled uniformly over
//! the alphabet, so after integrated rate `β̄` a token is kept with
//! probability `k = e^{-β̄}` and otherwise uniform:
//! `q(b | a) = k δ_ab + (1 - k)/K`.
//!
//! The reverse rate from the current token `x` to `s ≠ x` is
//!
//! ```text
//! R(x → s) = (β_A(t)/K) · Σ_a p(a | A_t) q(s | a) / q(x | a),
//! ```
//!
//! which is the time reversal `Q(s → x) p_t(s)/p_t(x)` with the density ratio
//! expressed through a clean-token posterior `p(a | A_t)`.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const AMINO_ACIDS: &[u8; 20] = b"ACDEFGHIKLMNPQRSTVWY";
pub const N_AMINO_ACIDS: usize = 20;
pub const RATE_MAX: f64 = 1e4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeqSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    pub n_types: usize,
}

impl Default for SeqSchedule {
    fn default() -> Self {
        SeqSchedule {
            beta_min: 0.1,
            beta_max: 20.0,
            n_types: N_AMINO_ACIDS,
        }
    }
}

impl SeqSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_min > 0.0 && self.beta_max > self.beta_min && self.beta_max.is_finite()) {
            return Err(Error::invalid("sequence schedule", "need 0 < beta_min < beta_max"));
        }
        if self.n_types < 2 {
            return Err(Error::invalid("sequence schedule", "alphabet needs at least two types"));
        }
        Ok(())
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min)
    }

    pub fn beta_bar(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t
    }

    pub fn keep_prob(&self, t: f64) -> f64 {
        (-self.beta_bar(t)).exp()
    }

    /// `q_{t|0}(b | a)`.
    pub fn transition(&self, t: f64, a: usize, b: usize) -> f64 {
        let k = self.keep_prob(t);
        let base = (1.0 - k) / self.n_types as f64;
        if a == b {
            k + base
        } else {
            base
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqState {
    pub types: Vec<usize>,
    pub t: f64,
}

impl SeqState {
    pub fn to_letters(&self) -> Result<String> {
        to_letters(&self.types)
    }
}

pub fn to_letters(types: &[usize]) -> Result<String> {
    types
        .iter()
        .map(|&a| {
            AMINO_ACIDS
                .get(a)
                .map(|&c| c as char)
                .ok_or_else(|| Error::invalid("sequence", format!("type index {a} has no letter")))
        })
        .collect()
}

pub fn from_letters(s: &str) -> Result<Vec<usize>> {
    s.bytes()
        .map(|c| {
            AMINO_ACIDS
                .iter()
                .position(|&a| a == c)
                .ok_or_else(|| Error::invalid("sequence", format!("unknown residue letter {:?}", c as char)))
        })
        .collect()
}

/// Reverse jump rates, one row per position; the entry at the current token is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqRates {
    pub rates: Vec<Vec<f64>>,
}

fn check_types(types: &[usize], k: usize) -> Result<()> {
    if let Some(&a) = types.iter().find(|&&a| a >= k) {
        return Err(Error::invalid("sequence", format!("type {a} outside alphabet of size {k}")));
    }
    Ok(())
}

pub fn forward_corrupt<R: Rng + ?Sized>(sched: &SeqSchedule, a0: &[usize], t: f64, rng: &mut R) -> Result<SeqState> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain {
            name: "t",
            value: t,
            domain: "[0, 1]",
        });
    }
    check_types(a0, sched.n_types)?;
    let keep = sched.keep_prob(t);
    let types = a0
        .iter()
        .map(|&a| {
            if rng.random::<f64>() < keep {
                a
            } else {
                rng.random_range(0..sched.n_types)
            }
        })
        .collect();
    Ok(SeqState { types, t })
}

fn check_posterior(posterior: &[Vec<f64>], k: usize) -> Result<()> {
    for row in posterior {
        if row.len() != k {
            return Err(Error::invalid("posterior", format!("row has {} entries, expected {k}", row.len())));
        }
        if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::invalid("posterior", "entries must be finite and nonnegative"));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::invalid("posterior", format!("row sums to {s}")));
        }
    }
    Ok(())
}

pub fn reverse_rates(sched: &SeqSchedule, posterior: &[Vec<f64>], at: &[usize], t: f64) -> Result<SeqRates> {
    let k = sched.n_types;
    check_posterior(posterior, k)?;
    check_types(at, k)?;
    if posterior.len() != at.len() {
        return Err(Error::invalid("posterior", "one row per position required"));
    }
    let scale = sched.beta(t) / k as f64;
    let rates = posterior
        .iter()
        .zip(at)
        .map(|(row, &x)| {
            let weights: Vec<f64> = (0..k).map(|a| row[a] / sched.transition(t, a, x)).collect();
            (0..k)
                .map(|s| {
                    if s == x {
                        return 0.0;
                    }
                    let ratio: f64 = weights.iter().enumerate().map(|(a, w)| w * sched.transition(t, a, s)).sum();
                    (scale * ratio).clamp(0.0, RATE_MAX)
                })
                .collect()
        })
        .collect();
    Ok(SeqRates { rates })
}

/// Tau-leaping update. Each target type fires `Poisson(τ·rate)` events; the
/// type with the most events wins, ties going to the larger rate and then
/// the lower index.
pub fn tau_leap_step<R: Rng + ?Sized>(at: &SeqState, rates: &SeqRates, tau: f64, rng: &mut R) -> Result<SeqState> {
    if !(tau > 0.0) {
        return Err(Error::invalid("tau", "step must be positive"));
    }
    if rates.rates.len() != at.types.len() {
        return Err(Error::invalid("rates", "one row per position required"));
    }
    let mut types = at.types.clone();
    for (d, row) in rates.rates.iter().enumerate() {
        let x = at.types[d];
        let mut best: Option<(u64, f64, usize)> = None;
        for (s, &r) in row.iter().enumerate() {
            if s == x || r <= 0.0 {
                continue;
            }
            let count = poisson_count(tau * r, rng);
            if count == 0 {
                continue;
            }
            let better = match best {
                None => true,
                Some((c, br, _)) => count > c || (count == c && r > br),
            };
            if better {
                best = Some((count, r, s));
            }
        }
        if let Some((_, _, s)) = best {
            types[d] = s;
        }
    }
    Ok(SeqState {
        types,
        t: (at.t - tau).max(0.0),
    })
}

pub fn poisson_count<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> u64 {
    if !(lambda > 0.0) {
        return 0;
    }
    // Poisson::new only fails for nonpositive or non-finite rates.
    Poisson::new(lambda).map(|p| p.sample(rng) as u64).unwrap_or(0)
}

/// Mean negative log-probability of the true types.
pub fn ce_loss(posterior: &[Vec<f64>], a0: &[usize]) -> Result<f64> {
    if posterior.is_empty() || posterior.len() != a0.len() {
        return Err(Error::invalid("posterior", "one row per position required"));
    }
    let k = posterior[0].len();
    check_posterior(posterior, k)?;
    check_types(a0, k)?;
    let total: f64 = posterior.iter().zip(a0).map(|(row, &a)| -row[a].ln()).sum();
    Ok(total / a0.len() as f64)
}

/// Clean-token posterior from a head's logits: `softmax(logits) ⊙ q(a_t | ·)`,
/// renormalized.
pub fn posterior_from_logits(sched: &SeqSchedule, logits: &[f64], a_t: usize, t: f64) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(a, &l)| (l - m).exp() * sched.transition(t, a, a_t))
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Exact clean-token posterior for independent positions with prior `p0`.
pub fn bayes_posterior(sched: &SeqSchedule, p0: &[f64], a_t: usize, t: f64) -> Vec<f64> {
    let w: Vec<f64> = p0.iter().enumerate().map(|(a, &p)| p * sched.transition(t, a, a_t)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn letters_round_trip() {
        let s = "ACDEFGHIKLMNPQRSTVWY";
        assert_eq!(to_letters(&from_letters(s).unwrap()).unwrap(), s);
        assert!(from_letters("AXB").is_err());
    }

    #[test]
    fn transition_rows_sum_to_one() {
        let s = SeqSchedule::default();
        for &t in &[0.0, 0.1, 0.5, 1.0] {
            let total: f64 = (0..20).map(|b| s.transition(t, 3, b)).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_at_zero_is_identity() {
        let s = SeqSchedule::default();
        let a0 = vec![0, 5, 19, 7];
        assert_eq!(forward_corrupt(&s, &a0, 0.0, &mut seeded(0)).unwrap().types, a0);
        assert!(forward_corrupt(&s, &[20], 0.5, &mut seeded(0)).is_err());
    }

    #[test]
    fn rates_vanish_for_confident_current_token() {
        let s = SeqSchedule::default();
        let mut row = vec![0.0; 20];
        row[4] = 1.0;
        // Near the data end the chain has nothing left to undo.
        let r = reverse_rates(&s, &[row], &[4], 0.01).unwrap();
        assert!(r.rates[0].iter().all(|&v| v.abs() < 1e-5));
    }

    #[test]
    fn rates_nonnegative_and_finite() {
        let s = SeqSchedule::default();
        let mut rng = seeded(8);
        for _ in 0..100 {
            let raw: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
            let z: f64 = raw.iter().sum();
            let row: Vec<f64> = raw.iter().map(|v| v / z).collect();
            let x = rng.random_range(0..20);
            let t = rng.random_range(0.001..1.0);
            let r = reverse_rates(&s, &[row], &[x], t).unwrap();
            assert!(r.rates[0].iter().all(|v| v.is_finite() && *v >= 0.0 && *v <= RATE_MAX));
            assert_eq!(r.rates[0][x], 0.0);
        }
    }

    #[test]
    fn rejects_malformed_posterior() {
        let s = SeqSchedule::default();
        assert!(reverse_rates(&s, &[vec![0.5; 20]], &[0], 0.5).is_err());
        assert!(reverse_rates(&s, &[vec![1.0]], &[0], 0.5).is_err());
    }

    #[test]
    fn zero_rates_keep_state() {
        let at = SeqState {
            types: vec![1, 2, 3],
            t: 0.5,
        };
        let rates = SeqRates {
            rates: vec![vec![0.0; 20]; 3],
        };
        assert_eq!(tau_leap_step(&at, &rates, 0.01, &mut seeded(1)).unwrap().types, at.types);
    }

    #[test]
    fn huge_rate_flips() {
        let mut row = vec![0.0; 20];
        row[7] = 5000.0;
        let at = SeqState { types: vec![2], t: 0.5 };
        let rates = SeqRates { rates: vec![row] };
        let mut rng = seeded(2);
        for _ in 0..1000 {
            assert_eq!(tau_leap_step(&at, &rates, 0.01, &mut rng).unwrap().types, vec![7]);
        }
    }

    #[test]
    fn collision_prefers_larger_rate_on_equal_counts() {
        // With tiny τ both fire at most once; whenever both fire, rate order decides.
        let mut row = vec![0.0; 20];
        row[3] = 1.0;
        row[9] = 1.5;
        let at = SeqState { types: vec![0], t: 0.5 };
        let rates = SeqRates { rates: vec![row] };
        let out = tau_leap_step(&at, &rates, 0.2, &mut seeded(3)).unwrap();
        assert!([0, 3, 9].contains(&out.types[0]));
    }

    #[test]
    fn ce_loss_reference_values() {
        let mut one_hot = vec![0.0; 20];
        one_hot[5] = 1.0;
        assert_eq!(ce_loss(&[one_hot], &[5]).unwrap(), 0.0);
        let uniform = vec![0.05; 20];
        assert!((ce_loss(&[uniform.clone(), uniform], &[0, 11]).unwrap() - 20f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn posterior_from_logits_is_normalized() {
        let s = SeqSchedule::default();
        let logits: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let p = posterior_from_logits(&s, &logits, 4, 0.3);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Uniform logits give the Bayes posterior under a uniform prior.
        let flat = posterior_from_logits(&s, &[0.0; 20], 4, 0.3);
        let bayes = bayes_posterior(&s, &[0.05; 20], 4, 0.3);
        for (a, b) in flat.iter().zip(&bayes) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
