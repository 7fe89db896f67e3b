//! Sample-based moving horizon estimation in filtering form.
//!
//! At sampled instants a discounted least-squares problem over the last
//! `M` steps is solved by single shooting: the decision is the state at the
//! start of the window, the process noise on every step and the
//! measurement noise at every sampled instant. Between samples the estimate
//! is propagated open loop with zero noise.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dosing::{InputSignal, STEP_SECONDS};
use crate::error::{Error, Result};
use crate::integrator::{step_jacobians, step_map, step_map_recorded, step_map_replay, IntegratorConfig, StepRecord};
use crate::model::{PatientState, ProcessNoise, MEASURED, OUTPUT_DIM};
use crate::params::{Coefficients, Variant};
use crate::sets::{constraint_sets, ConstraintSets};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub cost_tolerance: f64,
    pub penalty: f64,
    pub fd_step: f64,
    pub integrator: IntegratorConfig,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iterations: 40,
            gradient_tolerance: 1e-6,
            cost_tolerance: 1e-5,
            penalty: 1e6,
            fd_step: crate::integrator::FD_STEP,
            // one decade tighter than plain simulation
            integrator: IntegratorConfig::with_tolerances(1e-9, 1e-11),
        }
    }
}

/// Weights, discount, horizon and prior of the estimator. Matrices are diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub variant: Variant,
    pub p: Vec<f64>,
    /// Weights on the stacked noise `(w, v)`.
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub eta: f64,
    pub horizon: usize,
    pub prior: Vec<f64>,
    #[serde(default)]
    pub solver: SolverSettings,
}

impl EstimatorConfig {
    pub fn hypo() -> Self {
        Self {
            variant: Variant::Hypo,
            p: vec![1.0, 0.1, 1.0, 1.0, 1.0, 1.0],
            q: vec![10.0, 1.0, 1.0, 0.0, 1.0, 1000.0, 1000.0, 100.0],
            r: vec![500.0, 500.0, 100.0],
            eta: 0.7,
            horizon: 20,
            prior: vec![0.2, 1.5, 3.0, 1.5, 2.0, 2.0],
            solver: SolverSettings::default(),
        }
    }

    pub fn hyper() -> Self {
        Self {
            variant: Variant::Hyper,
            p: vec![100.0, 0.1, 1.0, 1.0, 1.0, 1.0, 100.0],
            q: vec![10.0, 1.0, 1.0, 10.0, 1000.0, 1000.0, 100.0],
            r: vec![250.0, 250.0, 1000.0],
            eta: 0.8,
            horizon: 20,
            prior: vec![7.0, 3.0, 7.0, 2.0, 2.0, 2.5, 1.0],
            solver: SolverSettings::default(),
        }
    }

    pub fn for_variant(variant: Variant) -> Self {
        match variant {
            Variant::Hypo => Self::hypo(),
            Variant::Hyper => Self::hyper(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn prior_state(&self) -> Result<PatientState> {
        PatientState::new(self.variant, &self.prior)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.variant.state_dim();
        let m = self.variant.noise_dim() + OUTPUT_DIM;
        for (what, v, len) in [("P", &self.p, n), ("Q", &self.q, m), ("R", &self.r, OUTPUT_DIM), ("prior", &self.prior, n)] {
            if v.len() != len {
                return Err(Error::InvalidArgument(format!("{what} has length {}, expected {len}", v.len())));
            }
        }
        if self.p.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::InvalidArgument("P must be positive definite".into()));
        }
        if self.q.iter().chain(&self.r).any(|d| !(*d >= 0.0)) {
            return Err(Error::InvalidArgument("Q and R must be positive semidefinite".into()));
        }
        if !(0.0..1.0).contains(&self.eta) {
            return Err(Error::InvalidArgument(format!("eta must lie in [0, 1), got {}", self.eta)));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        let s = &self.solver;
        if s.max_iterations == 0 || !(s.penalty >= 0.0) || !(s.fd_step > 0.0) {
            return Err(Error::InvalidArgument("invalid solver settings".into()));
        }
        s.integrator.validate(n)
    }
}

/// Data of one estimation window `[k - M_k, k]`.
#[derive(Debug, Clone)]
pub struct MheWindow<'a> {
    pub k: usize,
    pub start: usize,
    pub input: &'a InputSignal,
    /// Measurements `(j, y_j)` with `start <= j <= k`, sorted by `j`.
    pub measurements: Vec<(usize, [f64; OUTPUT_DIM])>,
    pub prior: PatientState,
}

impl MheWindow<'_> {
    pub fn len(&self) -> usize {
        self.k - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.k == self.start
    }
}

/// Decision vector of a window: initial state, free process-noise
/// components per step and measurement noise per measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub x0: PatientState,
    pub w: Vec<ProcessNoise>,
    pub v: Vec<[f64; OUTPUT_DIM]>,
}

impl Decision {
    pub fn zero_noise(window: &MheWindow<'_>, x0: PatientState) -> Self {
        let variant = x0.variant();
        Self {
            x0,
            w: vec![ProcessNoise::zero(variant); window.len()],
            v: vec![[0.0; OUTPUT_DIM]; window.measurements.len()],
        }
    }
}

#[derive(Debug, Clone)]
pub struct MheSolution {
    pub decision: Decision,
    /// Rolled-out states `x_{j|k}`, `j = start..=k`.
    pub states: Vec<PatientState>,
    pub estimate: PatientState,
    pub cost: f64,
    pub penalized_cost: f64,
    pub max_violation: f64,
    pub converged: bool,
    pub iterations: usize,
    pub warm_start_cost: f64,
}

/// Least-squares formulation of one window.
pub struct Problem<'a> {
    cfg: &'a EstimatorConfig,
    window: &'a MheWindow<'a>,
    c: Coefficients,
    sets: ConstraintSets,
    /// Free process-noise components (those with a nondegenerate interval).
    w_free: Vec<usize>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

/// Rollout of a decision with its recorded internal steps.
pub struct Rollout {
    pub states: Vec<PatientState>,
    records: Vec<StepRecord>,
}

struct Residuals {
    r: Vec<f64>,
    /// Number of leading entries that make up the unpenalized cost.
    n_cost: usize,
}

impl<'a> Problem<'a> {
    pub fn new(cfg: &'a EstimatorConfig, window: &'a MheWindow<'a>, c: Coefficients) -> Result<Self> {
        cfg.validate()?;
        window.prior.ensure_variant(cfg.variant)?;
        let sets = constraint_sets(cfg.variant);
        let w_free: Vec<usize> = (0..cfg.variant.noise_dim())
            .filter(|&i| {
                let (l, u) = sets.w.interval(i);
                l < u
            })
            .collect();
        // the initial state is kept inside X directly; the penalty covers the
        // propagated states
        let mut lower: Vec<f64> = sets.x.lower().iter().map(|l| l.max(0.0)).collect();
        let mut upper = sets.x.upper().to_vec();
        for _ in 0..window.len() {
            for &i in &w_free {
                let (l, u) = sets.w.interval(i);
                lower.push(l);
                upper.push(u);
            }
        }
        for _ in &window.measurements {
            for i in 0..OUTPUT_DIM {
                let (l, u) = sets.v.interval(i);
                lower.push(l);
                upper.push(u);
            }
        }
        Ok(Self { cfg, window, c, sets, w_free, lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    fn n(&self) -> usize {
        self.cfg.variant.state_dim()
    }

    pub fn pack(&self, d: &Decision) -> Vec<f64> {
        let mut z = d.x0.as_slice().to_vec();
        for w in &d.w {
            z.extend(self.w_free.iter().map(|&i| w.as_slice()[i]));
        }
        for v in &d.v {
            z.extend_from_slice(v);
        }
        z
    }

    pub fn unpack(&self, z: &[f64]) -> Result<Decision> {
        let variant = self.cfg.variant;
        let n = self.n();
        let nf = self.w_free.len();
        let x0 = PatientState::new(variant, &z[..n])?;
        let mut w = Vec::with_capacity(self.window.len());
        for j in 0..self.window.len() {
            let mut pw = ProcessNoise::zero(variant);
            for (a, &i) in self.w_free.iter().enumerate() {
                pw.as_mut_slice()[i] = z[n + j * nf + a];
            }
            for i in 0..variant.noise_dim() {
                if !self.w_free.contains(&i) {
                    pw.as_mut_slice()[i] = self.sets.w.interval(i).0;
                }
            }
            w.push(pw);
        }
        let off = n + self.window.len() * nf;
        let v = (0..self.window.measurements.len())
            .map(|m| [z[off + 3 * m], z[off + 3 * m + 1], z[off + 3 * m + 2]])
            .collect();
        Ok(Decision { x0, w, v })
    }

    pub fn project(&self, z: &mut [f64]) {
        for (v, (l, u)) in z.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.clamp(*l, *u);
        }
    }

    pub fn rollout(&self, d: &Decision) -> Result<Rollout> {
        let mut states = vec![d.x0];
        let mut records = Vec::with_capacity(self.window.len());
        for (j, w) in d.w.iter().enumerate() {
            let u = self.window.input.window(self.window.start + j, STEP_SECONDS);
            let x = states.last().expect("nonempty");
            let (next, rec) = step_map_recorded(x, &u, w, &self.c, &self.cfg.solver.integrator, true)?;
            states.push(next);
            records.push(rec);
        }
        Ok(Rollout { states, records })
    }

    /// Rollout that reuses the internal steps of a previous rollout.
    pub fn replay(&self, d: &Decision, reference: &Rollout) -> Result<Vec<PatientState>> {
        let mut states = vec![d.x0];
        for (j, w) in d.w.iter().enumerate() {
            let u = self.window.input.window(self.window.start + j, STEP_SECONDS);
            let x = states.last().expect("nonempty");
            states.push(step_map_replay(x, &u, w, &self.c, &reference.records[j])?);
        }
        Ok(states)
    }

    fn weight(&self, j: usize) -> f64 {
        self.cfg.eta.powi((self.window.k - j) as i32)
    }

    fn residuals(&self, d: &Decision, states: &[PatientState]) -> Residuals {
        let cfg = self.cfg;
        let n = self.n();
        let nw = cfg.variant.noise_dim();
        let start = self.window.start;
        let mut r = Vec::new();
        let prior_w = 2.0 * cfg.eta.powi(self.window.len() as i32);
        for i in 0..n {
            r.push((prior_w * cfg.p[i]).sqrt() * (d.x0.as_slice()[i] - self.window.prior.as_slice()[i]));
        }
        for (j, w) in d.w.iter().enumerate() {
            let s = 2.0 * self.weight(start + j);
            for &i in &self.w_free {
                r.push((s * cfg.q[i]).sqrt() * w.as_slice()[i]);
            }
        }
        for (m, &(j, y)) in self.window.measurements.iter().enumerate() {
            let s = 2.0 * self.weight(j);
            for i in 0..OUTPUT_DIM {
                r.push((s * cfg.q[nw + i]).sqrt() * d.v[m][i]);
            }
            let s = self.weight(j);
            let x = states[j - start].as_slice();
            for i in 0..OUTPUT_DIM {
                r.push((s * cfg.r[i]).sqrt() * (x[MEASURED[i]] + d.v[m][i] - y[i]));
            }
        }
        let n_cost = r.len();
        let rho = cfg.solver.penalty.sqrt();
        for x in states {
            for i in 0..n {
                r.push(rho * self.sets.x.violation(i, x.as_slice()[i]));
            }
        }
        for (m, &(j, _)) in self.window.measurements.iter().enumerate() {
            let x = states[j - start].as_slice();
            for i in 0..OUTPUT_DIM {
                r.push(rho * self.sets.y.violation(i, x[MEASURED[i]] + d.v[m][i]));
            }
        }
        Residuals { r, n_cost }
    }

    /// Unpenalized and penalized cost of a decision with its rollout.
    pub fn costs(&self, d: &Decision, states: &[PatientState]) -> (f64, f64) {
        let res = self.residuals(d, states);
        let cost: f64 = res.r[..res.n_cost].iter().map(|v| v * v).sum();
        let pen: f64 = res.r[res.n_cost..].iter().map(|v| v * v).sum();
        (cost, cost + pen)
    }

    /// Penalized cost evaluated along a replay of `reference`; smooth in `z`.
    pub fn replay_cost(&self, z: &[f64], reference: &Rollout) -> Result<f64> {
        let d = self.unpack(z)?;
        let states = self.replay(&d, reference)?;
        Ok(self.costs(&d, &states).1)
    }

    /// Residual vector and its Jacobian with respect to the packed decision.
    fn linearize(&self, d: &Decision, roll: &Rollout) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let cfg = self.cfg;
        let n = self.n();
        let nf = self.w_free.len();
        let nz = self.dim();
        let start = self.window.start;
        let res = self.residuals(d, &roll.states);
        let mut jac = DMatrix::<f64>::zeros(res.r.len(), nz);

        // sensitivities of x_j with respect to z, n x nz each
        let mut sens = Vec::with_capacity(roll.states.len());
        let mut s0 = DMatrix::<f64>::zeros(n, nz);
        for i in 0..n {
            s0[(i, i)] = 1.0;
        }
        sens.push(s0);
        for (j, w) in d.w.iter().enumerate() {
            let u = self.window.input.window(start + j, STEP_SECONDS);
            let (ax, aw) = step_jacobians(&roll.states[j], &u, w, &self.c, &roll.records[j], &roll.states[j + 1], &self.w_free)?;
            let m = cfg.variant.noise_dim();
            let a = DMatrix::from_row_slice(n, n, &ax);
            let mut next = &a * &sens[j];
            for (col, &i) in self.w_free.iter().enumerate() {
                for row in 0..n {
                    next[(row, n + j * nf + col)] += aw[row * m + i];
                }
            }
            sens.push(next);
        }

        let mut row = 0;
        let prior_w = 2.0 * cfg.eta.powi(self.window.len() as i32);
        for i in 0..n {
            jac[(row, i)] = (prior_w * cfg.p[i]).sqrt();
            row += 1;
        }
        for j in 0..d.w.len() {
            let s = 2.0 * self.weight(start + j);
            for (col, &i) in self.w_free.iter().enumerate() {
                jac[(row, n + j * nf + col)] = (s * cfg.q[i]).sqrt();
                row += 1;
            }
        }
        let nw = cfg.variant.noise_dim();
        let v_off = n + d.w.len() * nf;
        for (m, &(j, _)) in self.window.measurements.iter().enumerate() {
            let s = 2.0 * self.weight(j);
            for i in 0..OUTPUT_DIM {
                jac[(row, v_off + 3 * m + i)] = (s * cfg.q[nw + i]).sqrt();
                row += 1;
            }
            let s = self.weight(j).sqrt();
            for i in 0..OUTPUT_DIM {
                let sr = s * cfg.r[i].sqrt();
                for col in 0..nz {
                    jac[(row, col)] = sr * sens[j - start][(MEASURED[i], col)];
                }
                jac[(row, v_off + 3 * m + i)] += sr;
                row += 1;
            }
        }
        let rho = cfg.solver.penalty.sqrt();
        for (j, x) in roll.states.iter().enumerate() {
            for i in 0..n {
                if self.sets.x.violation(i, x.as_slice()[i]) != 0.0 {
                    for col in 0..nz {
                        jac[(row, col)] = rho * sens[j][(i, col)];
                    }
                }
                row += 1;
            }
        }
        for (m, &(j, _)) in self.window.measurements.iter().enumerate() {
            let x = roll.states[j - start].as_slice();
            for i in 0..OUTPUT_DIM {
                if self.sets.y.violation(i, x[MEASURED[i]] + d.v[m][i]) != 0.0 {
                    for col in 0..nz {
                        jac[(row, col)] = rho * sens[j - start][(MEASURED[i], col)];
                    }
                    jac[(row, v_off + 3 * m + i)] += rho;
                }
                row += 1;
            }
        }
        debug_assert_eq!(row, res.r.len());
        Ok((DVector::from_vec(res.r), jac))
    }

    /// Gradient of the penalized cost at a decision, as used by the solver.
    pub fn gradient(&self, z: &[f64]) -> Result<(Vec<f64>, Rollout)> {
        let d = self.unpack(z)?;
        let roll = self.rollout(&d)?;
        let (r, jac) = self.linearize(&d, &roll)?;
        let g = jac.transpose() * r * 2.0;
        Ok((g.as_slice().to_vec(), roll))
    }

    fn max_violation(&self, d: &Decision, states: &[PatientState]) -> f64 {
        let mut v = states.iter().map(|x| self.sets.x.max_violation(x.as_slice())).fold(0.0, f64::max);
        for (m, &(j, _)) in self.window.measurements.iter().enumerate() {
            let x = states[j - self.window.start].as_slice();
            let y: Vec<f64> = (0..OUTPUT_DIM).map(|i| x[MEASURED[i]] + d.v[m][i]).collect();
            v = v.max(self.sets.y.max_violation(&y));
        }
        v
    }

    fn evaluate(&self, z: &[f64]) -> Option<(Decision, Rollout, f64)> {
        let d = self.unpack(z).ok()?;
        let roll = self.rollout(&d).ok()?;
        let cost = self.costs(&d, &roll.states).1;
        cost.is_finite().then_some((d, roll, cost))
    }

    /// Projected Levenberg-Marquardt from the better of the given starting points.
    pub fn solve(&self, starts: &[Decision]) -> Result<MheSolution> {
        let settings = &self.cfg.solver;
        let mut best: Option<(Vec<f64>, Decision, Rollout, f64)> = None;
        let mut warm_start_cost = f64::INFINITY;
        for s in starts {
            let mut z = self.pack(s);
            self.project(&mut z);
            if let Some((d, roll, cost)) = self.evaluate(&z) {
                warm_start_cost = warm_start_cost.min(cost);
                if best.as_ref().map_or(true, |b| cost < b.3) {
                    best = Some((z, d, roll, cost));
                }
            }
        }
        let (mut z, mut d, mut roll, mut cost) =
            best.ok_or_else(|| Error::InvalidArgument("no starting point admits a rollout".into()))?;

        let nz = self.dim();
        let mut lambda = 1e-3;
        let mut converged = false;
        let mut iterations = 0;
        while iterations < settings.max_iterations {
            iterations += 1;
            let (r, jac) = self.linearize(&d, &roll)?;
            let g = jac.transpose() * &r;
            let jtj = jac.transpose() * &jac;

            // projected gradient of the cost |r|^2
            let pg = (0..nz)
                .map(|i| {
                    let moved = (z[i] - 2.0 * g[i]).clamp(self.lower[i], self.upper[i]);
                    (z[i] - moved).abs()
                })
                .fold(0.0, f64::max);
            if pg < settings.gradient_tolerance * (1.0 + cost) {
                converged = true;
                break;
            }

            // variables held at a bound by the gradient stay fixed
            let free: Vec<usize> = (0..nz)
                .filter(|&i| {
                    let at_lower = z[i] <= self.lower[i] && g[i] > 0.0;
                    let at_upper = z[i] >= self.upper[i] && g[i] < 0.0;
                    !(at_lower || at_upper)
                })
                .collect();
            let nf = free.len();
            let mut accepted = false;
            while lambda < 1e16 {
                let mut a = DMatrix::<f64>::zeros(nf, nf);
                let mut b = DVector::<f64>::zeros(nf);
                for (p, &i) in free.iter().enumerate() {
                    b[p] = -g[i];
                    for (q, &j) in free.iter().enumerate() {
                        a[(p, q)] = jtj[(i, j)];
                    }
                    a[(p, p)] += lambda * jtj[(i, i)].max(1e-12);
                }
                let step = match a.cholesky() {
                    Some(ch) => ch.solve(&b),
                    None => {
                        lambda *= 4.0;
                        continue;
                    }
                };
                let mut zn = z.clone();
                for (p, &i) in free.iter().enumerate() {
                    zn[i] += step[p];
                }
                self.project(&mut zn);
                match self.evaluate(&zn) {
                    Some((dn, rn, cn)) if cn < cost => {
                        let mut predicted = 0.0;
                        for (p, &i) in free.iter().enumerate() {
                            predicted += -g[i] * step[p] + lambda * jtj[(i, i)].max(1e-12) * step[p] * step[p];
                        }
                        let ratio = (cost - cn) / predicted;
                        let decrease = (cost - cn) / cost.max(f64::MIN_POSITIVE);
                        z = zn;
                        d = dn;
                        roll = rn;
                        cost = cn;
                        lambda = (lambda / if ratio > 0.75 { 10.0 } else { 3.0 }).max(1e-12);
                        accepted = true;
                        if decrease < settings.cost_tolerance {
                            converged = true;
                        }
                        break;
                    }
                    _ => lambda *= 4.0,
                }
            }
            if !accepted {
                // no descent possible at machine precision
                converged = true;
                break;
            }
            if converged {
                break;
            }
        }
        let (plain, penalized) = self.costs(&d, &roll.states);
        Ok(MheSolution {
            estimate: *roll.states.last().expect("nonempty"),
            max_violation: self.max_violation(&d, &roll.states),
            states: roll.states,
            decision: d,
            cost: plain,
            penalized_cost: penalized,
            converged,
            iterations,
            warm_start_cost,
        })
    }
}

/// Unpenalized window cost of a decision.
pub fn cost(window: &MheWindow<'_>, decision: &Decision, cfg: &EstimatorConfig, c: &Coefficients) -> Result<f64> {
    let problem = Problem::new(cfg, window, *c)?;
    let roll = problem.rollout(decision)?;
    Ok(problem.costs(decision, &roll.states).0)
}

/// Solves one window starting from the zero-noise prior rollout and any extra candidates.
pub fn solve_window(
    window: &MheWindow<'_>,
    cfg: &EstimatorConfig,
    c: &Coefficients,
    extra_starts: &[Decision],
) -> Result<MheSolution> {
    let problem = Problem::new(cfg, window, *c)?;
    let mut starts = vec![Decision::zero_noise(window, window.prior)];
    starts.extend_from_slice(extra_starts);
    problem.solve(&starts)
}

/// Outcome of one step of an estimation stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub solved: bool,
    pub converged: bool,
    pub cost: f64,
    pub max_violation: f64,
    pub iterations: usize,
    pub state: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct StreamResult {
    pub estimates: Vec<PatientState>,
    pub log: Vec<StepLog>,
}

impl StreamResult {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let variant = self.estimates.first().map_or(Variant::Hypo, |x| x.variant());
        let mut header: Vec<String> =
            ["step", "solved_flag", "converged_flag", "cost", "max_violation"].iter().map(|s| s.to_string()).collect();
        header.extend(crate::model::state_names(variant).iter().map(|s| s.to_string()));
        wtr.write_record(&header)?;
        for l in &self.log {
            let mut row = vec![
                l.step.to_string(),
                (l.solved as u8).to_string(),
                (l.converged as u8).to_string(),
                format!("{:.17e}", l.cost),
                format!("{:.17e}", l.max_violation),
            ];
            row.extend(l.state.iter().map(|v| format!("{v:.17e}")));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

struct Previous {
    start: usize,
    decision: Decision,
    states: Vec<PatientState>,
    measured: Vec<usize>,
}

/// Shifts the previous window solution onto a new window.
fn shifted_start(prev: &Previous, window: &MheWindow<'_>, estimates: &[PatientState]) -> Decision {
    let variant = prev.decision.x0.variant();
    let offset = window.start.checked_sub(prev.start);
    let x0 = match offset {
        Some(o) if o < prev.states.len() => prev.states[o],
        _ => estimates[window.start],
    };
    let w = (window.start..window.k)
        .map(|j| match j.checked_sub(prev.start) {
            Some(o) if o < prev.decision.w.len() => prev.decision.w[o],
            _ => ProcessNoise::zero(variant),
        })
        .collect();
    let v = window
        .measurements
        .iter()
        .map(|(j, _)| match prev.measured.iter().position(|m| m == j) {
            Some(p) => prev.decision.v[p],
            None => [0.0; OUTPUT_DIM],
        })
        .collect();
    Decision { x0, w, v }
}

/// Runs the estimator over `n_steps` steps. `measurements[k]` is `Some(y_k)`
/// at sampled instants; `input` is the input as reported to the estimator.
pub fn estimate_stream(
    measurements: &[Option<[f64; OUTPUT_DIM]>],
    input: &InputSignal,
    cfg: &EstimatorConfig,
    c: &Coefficients,
) -> Result<StreamResult> {
    cfg.validate()?;
    let variant = cfg.variant;
    let chi = cfg.prior_state()?;
    let mut estimates: Vec<PatientState> = Vec::with_capacity(measurements.len());
    let mut log = Vec::with_capacity(measurements.len());
    let mut previous: Option<Previous> = None;
    let zero = ProcessNoise::zero(variant);

    for (k, y) in measurements.iter().enumerate() {
        let open_loop = |estimates: &[PatientState]| -> Result<PatientState> {
            if k == 0 {
                Ok(chi)
            } else {
                step_map(&estimates[k - 1], &input.window(k - 1, STEP_SECONDS), &zero, c, &cfg.solver.integrator)
            }
        };
        let mut entry = StepLog {
            step: k,
            solved: false,
            converged: false,
            cost: f64::NAN,
            max_violation: f64::NAN,
            iterations: 0,
            state: Vec::new(),
        };
        let estimate = if y.is_some() {
            let start = k.saturating_sub(cfg.horizon);
            let window = MheWindow {
                k,
                start,
                input,
                measurements: (start..=k).filter_map(|j| measurements[j].map(|y| (j, y))).collect(),
                // the prior of the window is the filtered estimate at its start
                prior: if start == 0 { chi } else { estimates[start] },
            };
            let extra: Vec<Decision> = previous.iter().map(|p| shifted_start(p, &window, &estimates)).collect();
            match solve_window(&window, cfg, c, &extra) {
                Ok(sol) => {
                    entry.solved = true;
                    entry.converged = sol.converged;
                    entry.cost = sol.cost;
                    entry.max_violation = sol.max_violation;
                    entry.iterations = sol.iterations;
                    previous = Some(Previous {
                        start,
                        measured: window.measurements.iter().map(|m| m.0).collect(),
                        decision: sol.decision,
                        states: sol.states,
                    });
                    sol.estimate
                }
                Err(_) => open_loop(&estimates)?,
            }
        } else {
            open_loop(&estimates)?
        };
        entry.state = estimate.as_slice().to_vec();
        estimates.push(estimate);
        log.push(entry);
    }
    Ok(StreamResult { estimates, log })
}
