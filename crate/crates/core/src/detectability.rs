//! Empirical check of sample-based incremental input/output-to-state stability.
//!
//! Pairs of trajectories share an input but start from different states and
//! see different noise. For a candidate certificate the dissipation bound
//!
//! `|x_k - x~_k|^2_P1 <= |x_0 - x~_0|^2_P2 eta^k
//!     + sum_{j<k} eta^(k-j-1) |w_j - w~_j|^2_Q
//!     + sum_{j<k, j in K} eta^(k-j-1) |y_j - y~_j|^2_R`
//!
//! is evaluated at every step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dosing::{DoseSchedule, InputSignal, Medication, STEP_SECONDS};
use crate::error::{Error, Result};
use crate::integrator::{step_map, IntegratorConfig};
use crate::model::{output, PatientState, ProcessNoise, OUTPUT_DIM};
use crate::params::{ModelParameters, Variant};
use crate::sampling::{realize, SamplingSet, Scheme};
use crate::sets::{constraint_sets, BoxSet};

/// Diagonal weights and decay rate of a detectability certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IossCertificate {
    pub p1: Vec<f64>,
    pub p2: Vec<f64>,
    /// Weights on the stacked noise `(w, v)`.
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub eta: f64,
}

impl IossCertificate {
    pub fn scaled_identity(variant: Variant, p1: f64, p2: f64, q: f64, r: f64, eta: f64) -> Self {
        let n = variant.state_dim();
        let m = variant.noise_dim() + OUTPUT_DIM;
        Self {
            p1: vec![p1; n],
            p2: vec![p2; n],
            q: vec![q; m],
            r: vec![r; OUTPUT_DIM],
            eta,
        }
    }

    /// Certificate used for the given variant and sampling scheme.
    pub fn published(variant: Variant, scheme: Scheme) -> Self {
        match variant {
            Variant::Hypo => {
                let r = match scheme {
                    Scheme::A => 0.5,
                    Scheme::B => 5e2,
                    Scheme::C => 5e3,
                    Scheme::D => 1e5,
                };
                Self::scaled_identity(variant, 1.0, 2e3, 0.5, r, 0.95)
            }
            Variant::Hyper => {
                let r = match scheme {
                    Scheme::A => 20.0,
                    Scheme::B => 3e3,
                    Scheme::C => 5e4,
                    Scheme::D => 2e6,
                };
                Self::scaled_identity(variant, 1.0, 2e3, 5.0, r, 0.96)
            }
        }
    }

    /// Sampling sets start at index 1 for hypo and 2 for hyper by default.
    pub fn default_start(variant: Variant) -> usize {
        match variant {
            Variant::Hypo => 1,
            Variant::Hyper => 2,
        }
    }

    pub fn validate(&self, variant: Variant) -> Result<()> {
        let n = variant.state_dim();
        let m = variant.noise_dim() + OUTPUT_DIM;
        for (what, v, len) in [("P1", &self.p1, n), ("P2", &self.p2, n), ("Q", &self.q, m), ("R", &self.r, OUTPUT_DIM)] {
            if v.len() != len {
                return Err(Error::InvalidArgument(format!(
                    "certificate weight {what} has length {}, expected {len}",
                    v.len()
                )));
            }
        }
        if self.p1.iter().chain(&self.p2).any(|d| !(*d > 0.0)) {
            return Err(Error::InvalidArgument("P1 and P2 must be positive definite".into()));
        }
        if self.q.iter().chain(&self.r).any(|d| !(*d >= 0.0)) {
            return Err(Error::InvalidArgument("Q and R must be positive semidefinite".into()));
        }
        if !(0.0..1.0).contains(&self.eta) {
            return Err(Error::InvalidArgument(format!("eta must lie in [0, 1), got {}", self.eta)));
        }
        Ok(())
    }
}

fn weighted_sq(weights: &[f64], a: &[f64], b: &[f64]) -> f64 {
    weights.iter().zip(a.iter().zip(b)).map(|(w, (x, y))| w * (x - y).powi(2)).sum()
}

/// Two trajectories driven by the same input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPair {
    pub seed: u64,
    /// Daily doses shared by both trajectories.
    pub doses: Vec<f64>,
    pub states: [Vec<PatientState>; 2],
    /// Stacked noise `(w_k, v_k)` per step.
    pub noise: [Vec<Vec<f64>>; 2],
    pub outputs: [Vec<[f64; OUTPUT_DIM]>; 2],
}

impl TrajectoryPair {
    pub fn variant(&self) -> Variant {
        self.states[0][0].variant()
    }

    pub fn horizon(&self) -> usize {
        self.states[0].len() - 1
    }
}

fn uniform_in<R: Rng>(rng: &mut R, set: &BoxSet) -> Vec<f64> {
    (0..set.dim())
        .map(|i| {
            let (l, u) = set.interval(i);
            if l == u {
                l
            } else {
                rng.gen_range(l..=u)
            }
        })
        .collect()
}

/// Simulates one trajectory given an initial state, per-step stacked noise and the input.
pub fn simulate_with_noise(
    x0: &PatientState,
    noise: &[Vec<f64>],
    input: &InputSignal,
    p: &ModelParameters,
    cfg: &IntegratorConfig,
) -> Result<(Vec<PatientState>, Vec<[f64; OUTPUT_DIM]>)> {
    let variant = x0.variant();
    let c = p.coefficients();
    let nw = variant.noise_dim();
    let mut states = vec![*x0];
    let mut outputs = Vec::with_capacity(noise.len());
    for (k, om) in noise.iter().enumerate() {
        let x = *states.last().expect("nonempty");
        let v = [om[nw], om[nw + 1], om[nw + 2]];
        outputs.push(output(&x, &v).as_array());
        if k + 1 < noise.len() {
            let w = ProcessNoise::new(variant, &om[..nw])?;
            states.push(step_map(&x, &input.window(k, STEP_SECONDS), &w, &c, cfg)?);
        }
    }
    Ok((states, outputs))
}

/// Draws a pair over `horizon` steps: initial states uniform in `X`, noise
/// uniform in `W x V` per step and a shared daily dose, uniform on
/// [0, 40] ug of L-T4 (hypo) or [0, 35] mg of MMI (hyper).
pub fn sample_pair(
    seed: u64,
    variant: Variant,
    horizon: usize,
    p: &ModelParameters,
    cfg: &IntegratorConfig,
) -> Result<TrajectoryPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sets = constraint_sets(variant);
    let omega = sets.omega();
    let (medication, max_dose) = match variant {
        Variant::Hypo => (Medication::Lt4, 40.0),
        Variant::Hyper => (Medication::Mmi, 35.0),
    };
    let days = horizon / 3 + 1;
    let doses: Vec<f64> = (0..days).map(|_| rng.gen_range(0.0..=max_dose)).collect();
    let input = InputSignal::from_schedule(variant, &DoseSchedule::new(medication, doses.clone())?, p)?;

    let x0s = [
        PatientState::new(variant, &uniform_in(&mut rng, &sets.x))?,
        PatientState::new(variant, &uniform_in(&mut rng, &sets.x))?,
    ];
    let mut noise: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
    for _ in 0..=horizon {
        noise[0].push(uniform_in(&mut rng, &omega));
        noise[1].push(uniform_in(&mut rng, &omega));
    }
    let a = simulate_with_noise(&x0s[0], &noise[0], &input, p, cfg)?;
    let b = simulate_with_noise(&x0s[1], &noise[1], &input, p, cfg)?;
    Ok(TrajectoryPair {
        seed,
        doses,
        states: [a.0, b.0],
        noise,
        outputs: [a.1, b.1],
    })
}

/// Both sides of the dissipation inequality along a pair.
#[derive(Debug, Clone, PartialEq)]
pub struct IossSides {
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub rhs_recursive: Vec<f64>,
}

pub fn iioss_sides(pair: &TrajectoryPair, cert: &IossCertificate, k_set: &SamplingSet) -> Result<IossSides> {
    let variant = pair.variant();
    cert.validate(variant)?;
    let horizon = pair.horizon();
    let sampled = |j: usize| k_set.contains(j);
    let x = |s: usize, k: usize| pair.states[s][k].as_slice();

    let lhs: Vec<f64> = (0..=horizon).map(|k| weighted_sq(&cert.p1, x(0, k), x(1, k))).collect();
    let init = weighted_sq(&cert.p2, x(0, 0), x(1, 0));
    let noise_terms: Vec<f64> = (0..horizon)
        .map(|j| weighted_sq(&cert.q, &pair.noise[0][j], &pair.noise[1][j]))
        .collect();
    let output_terms: Vec<f64> = (0..horizon)
        .map(|j| {
            if sampled(j) {
                weighted_sq(&cert.r, &pair.outputs[0][j], &pair.outputs[1][j])
            } else {
                0.0
            }
        })
        .collect();

    let rhs: Vec<f64> = (0..=horizon)
        .map(|k| {
            let mut s = init * cert.eta.powi(k as i32);
            for j in 0..k {
                s += cert.eta.powi((k - j - 1) as i32) * (noise_terms[j] + output_terms[j]);
            }
            s
        })
        .collect();

    let mut rhs_recursive = Vec::with_capacity(horizon + 1);
    let mut acc = init;
    rhs_recursive.push(acc);
    for j in 0..horizon {
        acc = cert.eta * acc + noise_terms[j] + output_terms[j];
        rhs_recursive.push(acc);
    }
    Ok(IossSides { lhs, rhs, rhs_recursive })
}

/// Worst step of one pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub seed: u64,
    pub violations: usize,
    pub worst_k: usize,
    pub worst_ratio: f64,
    pub max_recursion_mismatch: f64,
}

pub fn check_pair(pair: &TrajectoryPair, cert: &IossCertificate, k_set: &SamplingSet) -> Result<PairOutcome> {
    let s = iioss_sides(pair, cert, k_set)?;
    let mut out = PairOutcome {
        seed: pair.seed,
        violations: 0,
        worst_k: 0,
        worst_ratio: 0.0,
        max_recursion_mismatch: 0.0,
    };
    for k in 0..s.lhs.len() {
        if s.lhs[k] > s.rhs[k] * (1.0 + 1e-9) {
            out.violations += 1;
        }
        let ratio = if s.rhs[k] > 0.0 {
            s.lhs[k] / s.rhs[k]
        } else if s.lhs[k] > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        if ratio > out.worst_ratio {
            out.worst_ratio = ratio;
            out.worst_k = k;
        }
        let scale = s.rhs[k].abs().max(f64::MIN_POSITIVE);
        out.max_recursion_mismatch = out.max_recursion_mismatch.max((s.rhs[k] - s.rhs_recursive[k]).abs() / scale);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub variant: Variant,
    pub scheme: Scheme,
    pub i: usize,
    pub n_pairs: usize,
    pub horizon: usize,
    pub violations: usize,
    pub max_ratio: f64,
    pub max_recursion_mismatch: f64,
    pub base_seed: u64,
    pub seeds: Vec<u64>,
    pub per_pair_worst_k: Vec<usize>,
}

/// Seed of pair `index` derived from a base seed.
pub fn pair_seed(base: u64, index: usize) -> u64 {
    let mut z = base.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Simulates `n_pairs` pairs in parallel.
pub fn sample_pairs(
    base_seed: u64,
    n_pairs: usize,
    variant: Variant,
    horizon: usize,
    p: &ModelParameters,
    cfg: &IntegratorConfig,
) -> Result<Vec<TrajectoryPair>> {
    (0..n_pairs)
        .into_par_iter()
        .map(|i| {
            let seed = pair_seed(base_seed, i);
            sample_pair(seed, variant, horizon, p, cfg)
                .map_err(|e| Error::InvalidArgument(format!("pair {i} (seed {seed}) failed: {e}")))
        })
        .collect()
}

/// Checks a certificate on already simulated pairs.
pub fn verify_pairs(
    pairs: &[TrajectoryPair],
    cert: &IossCertificate,
    scheme: Scheme,
    start: usize,
    base_seed: u64,
) -> Result<VerificationReport> {
    let first = pairs.first().ok_or_else(|| Error::InvalidArgument("no pairs to verify".into()))?;
    let variant = first.variant();
    let horizon = first.horizon();
    let k_set = realize(scheme, start, horizon)?;
    let outcomes: Vec<PairOutcome> = pairs
        .par_iter()
        .map(|pair| check_pair(pair, cert, &k_set))
        .collect::<Result<_>>()?;
    Ok(VerificationReport {
        variant,
        scheme,
        i: start,
        n_pairs: pairs.len(),
        horizon,
        violations: outcomes.iter().map(|o| o.violations).sum(),
        max_ratio: outcomes.iter().map(|o| o.worst_ratio).fold(0.0, f64::max),
        max_recursion_mismatch: outcomes.iter().map(|o| o.max_recursion_mismatch).fold(0.0, f64::max),
        base_seed,
        seeds: outcomes.iter().map(|o| o.seed).collect(),
        per_pair_worst_k: outcomes.iter().map(|o| o.worst_k).collect(),
    })
}

#[allow(clippy::too_many_arguments)]
pub fn verify(
    n_pairs: usize,
    cert: &IossCertificate,
    variant: Variant,
    scheme: Scheme,
    start: usize,
    horizon: usize,
    base_seed: u64,
    p: &ModelParameters,
    cfg: &IntegratorConfig,
) -> Result<VerificationReport> {
    cert.validate(variant)?;
    let pairs = sample_pairs(base_seed, n_pairs, variant, horizon, p, cfg)?;
    verify_pairs(&pairs, cert, scheme, start, base_seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_pair(variant: Variant) -> TrajectoryPair {
        let p = ModelParameters::for_variant(variant);
        sample_pair(7, variant, 9, &p, &IntegratorConfig::default()).unwrap()
    }

    #[test]
    fn published_certificates_are_valid() {
        for v in [Variant::Hypo, Variant::Hyper] {
            for s in Scheme::ALL {
                IossCertificate::published(v, s).validate(v).unwrap();
            }
        }
        assert_eq!(IossCertificate::published(Variant::Hypo, Scheme::A).q.len(), 8);
        assert_eq!(IossCertificate::published(Variant::Hyper, Scheme::A).q.len(), 7);
        let bad = IossCertificate { eta: 1.0, ..IossCertificate::published(Variant::Hypo, Scheme::A) };
        assert!(bad.validate(Variant::Hypo).is_err());
        assert!(IossCertificate::published(Variant::Hypo, Scheme::A).validate(Variant::Hyper).is_err());
    }

    #[test]
    fn identical_pair_has_zero_sides() {
        let mut pair = toy_pair(Variant::Hypo);
        pair.states[1] = pair.states[0].clone();
        pair.noise[1] = pair.noise[0].clone();
        pair.outputs[1] = pair.outputs[0].clone();
        let k = realize(Scheme::A, 1, pair.horizon()).unwrap();
        let s = iioss_sides(&pair, &IossCertificate::published(Variant::Hypo, Scheme::A), &k).unwrap();
        assert!(s.lhs.iter().chain(&s.rhs).all(|v| *v == 0.0));
    }

    #[test]
    fn zero_discount_keeps_only_last_terms() {
        let pair = toy_pair(Variant::Hyper);
        let mut cert = IossCertificate::published(Variant::Hyper, Scheme::A);
        cert.eta = 0.0;
        let k = realize(Scheme::A, 1, pair.horizon()).unwrap();
        let s = iioss_sides(&pair, &cert, &k).unwrap();
        for j in 0..pair.horizon() {
            let expected = weighted_sq(&cert.q, &pair.noise[0][j], &pair.noise[1][j])
                + weighted_sq(&cert.r, &pair.outputs[0][j], &pair.outputs[1][j]);
            approx::assert_relative_eq!(s.rhs[j + 1], expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn pair_seed_is_injective_on_small_ranges() {
        let mut seeds: Vec<u64> = (0..1000).map(|i| pair_seed(42, i)).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 1000);
    }
}
