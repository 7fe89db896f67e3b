//! Adaptive Rosenbrock integration of the loop dynamics and the 8-hour step map.
//!
//! The solver is the stiffly accurate, L-stable four-stage-plus-two Rodas4
//! scheme with its embedded third-order error estimate. Dose onsets and the
//! sampling grid split the integration into smooth segments.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::ad::Dual;
use crate::dosing::{InputFn, STEP_SECONDS};
use crate::error::{Error, Result};
use crate::model::{rhs_generic, rhs_into, InputRates, PatientState, ProcessNoise, MAX_NOISE_DIM, MAX_STATE_DIM};
use crate::params::{Coefficients, Variant};

type Vector = [f64; MAX_STATE_DIM];
type Matrix = [[f64; MAX_STATE_DIM]; MAX_STATE_DIM];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum JacobianMode {
    #[default]
    FiniteDifference,
    Analytic,
}

/// Absolute tolerance, either shared or per state component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AbsTol {
    Scalar(f64),
    PerComponent(Vec<f64>),
}

impl AbsTol {
    pub fn get(&self, i: usize) -> f64 {
        match self {
            AbsTol::Scalar(a) => *a,
            AbsTol::PerComponent(v) => v[i],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub rtol: f64,
    pub atol: AbsTol,
    pub max_steps: usize,
    pub jacobian: JacobianMode,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: AbsTol::Scalar(1e-10),
            max_steps: 1_000_000,
            jacobian: JacobianMode::FiniteDifference,
        }
    }
}

impl IntegratorConfig {
    pub fn with_tolerances(rtol: f64, atol: f64) -> Self {
        Self {
            rtol,
            atol: AbsTol::Scalar(atol),
            ..Self::default()
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.rtol > 0.0) {
            return bad(format!("rtol must be positive, got {}", self.rtol));
        }
        match &self.atol {
            AbsTol::Scalar(a) if !(*a > 0.0) => return bad(format!("atol must be positive, got {a}")),
            AbsTol::PerComponent(v) if v.len() != dim => {
                return Err(Error::DimensionMismatch {
                    what: "absolute tolerance",
                    expected: dim,
                    found: v.len(),
                })
            }
            AbsTol::PerComponent(v) if v.iter().any(|a| !(*a > 0.0)) => {
                return bad("atol components must be positive".into())
            }
            _ => {}
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1".into());
        }
        Ok(())
    }
}

/// Process noise as a function of time.
pub trait NoiseFn: Sync {
    fn values(&self, t: f64) -> ProcessNoise;
    /// Times in `(t0, t1)` where the noise is not smooth.
    fn breakpoints(&self, _t0: f64, _t1: f64) -> Vec<f64> {
        Vec::new()
    }
}

impl NoiseFn for ProcessNoise {
    fn values(&self, _t: f64) -> ProcessNoise {
        *self
    }
}

/// States on the sampling grid `t0 + k T_d`, plus the end point if it is off the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub step_index: Vec<usize>,
    pub states: Vec<PatientState>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> &PatientState {
        self.states.last().expect("trajectory holds the initial state")
    }

    pub fn variant(&self) -> Variant {
        self.last().variant()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["t_seconds".to_string(), "step_index".to_string()];
        header.extend(crate::model::state_names(self.variant()).iter().map(|s| s.to_string()));
        wtr.write_record(&header)?;
        for ((t, k), x) in self.times.iter().zip(&self.step_index).zip(&self.states) {
            let mut row = vec![format!("{t:.17e}"), k.to_string()];
            row.extend(x.as_slice().iter().map(|v| format!("{v:.17e}")));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Accepted internal steps of one integration together with their
/// iteration matrices, for replay.
#[derive(Debug, Clone, Default)]
pub struct StepRecord {
    steps: Vec<(f64, f64, Frozen)>,
}

impl StepRecord {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    /// Accepted `(t, h)` pairs.
    pub fn step_sizes(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.steps.iter().map(|s| (s.0, s.1))
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Increment (s) of the one-sided difference in time.
const TIME_DIFFERENCE_STEP: f64 = 1.0;

// Rodas4 coefficients in the W-transformed form.
const GAMMA: f64 = 0.25;
const C2: f64 = 0.386;
const C3: f64 = 0.21;
const C4: f64 = 0.63;
const D1: f64 = 0.25;
const D2: f64 = -0.1043;
const D3: f64 = 0.1035;
const D4: f64 = -0.362_000_000_000_002_3e-1;
const A21: f64 = 1.544;
const A31: f64 = 0.946_678_528_081_582_6;
const A32: f64 = 0.255_701_169_898_328_4;
const A41: f64 = 3.314_825_187_068_521;
const A42: f64 = 2.896_124_015_972_201;
const A43: f64 = 0.998_641_913_997_781_7;
const A51: f64 = 1.221_224_509_226_641;
const A52: f64 = 6.019_134_481_288_629;
const A53: f64 = 12.537_083_329_320_87;
const A54: f64 = -0.687_886_036_105_895_0;
const CC21: f64 = -5.6688;
const CC31: f64 = -2.430_093_356_833_875;
const CC32: f64 = -0.206_359_915_709_191_5;
const CC41: f64 = -0.107_352_905_815_137_5;
const CC42: f64 = -9.594_562_251_023_355;
const CC43: f64 = -20.470_286_148_096_16;
const CC51: f64 = 7.496_443_313_967_647;
const CC52: f64 = -10.246_804_314_643_52;
const CC53: f64 = -33.999_903_528_199_05;
const CC54: f64 = 11.708_908_932_061_60;
const CC61: f64 = 8.083_246_795_921_522;
const CC62: f64 = -7.981_132_988_064_893;
const CC63: f64 = -31.521_594_328_743_71;
const CC64: f64 = 16.319_305_431_231_36;
const CC65: f64 = -6.058_818_238_834_054;

struct System<'a, U: ?Sized, W: ?Sized> {
    variant: Variant,
    n: usize,
    c: &'a Coefficients,
    u: &'a U,
    w: &'a W,
    jacobian: JacobianMode,
}

impl<U: InputFn + ?Sized, W: NoiseFn + ?Sized> System<'_, U, W> {
    fn f(&self, t: f64, y: &Vector, out: &mut Vector) {
        self.f_at(t, &self.u.rates(t), y, out);
    }

    fn f_at(&self, t: f64, u: &InputRates, y: &Vector, out: &mut Vector) {
        let w = self.w.values(t);
        rhs_into(self.variant, &y[..self.n], u, w.as_slice(), self.c, &mut out[..self.n]);
    }

    fn jac(&self, t: f64, y: &Vector, f0: &Vector, jac: &mut Matrix) {
        let n = self.n;
        match self.jacobian {
            JacobianMode::FiniteDifference => {
                let mut yp = *y;
                let mut fp = [0.0; MAX_STATE_DIM];
                for j in 0..n {
                    let delta = 1e-7 * y[j].abs().max(1e-5);
                    yp[j] = y[j] + delta;
                    let delta = yp[j] - y[j];
                    self.f(t, &yp, &mut fp);
                    for i in 0..n {
                        jac[i][j] = (fp[i] - f0[i]) / delta;
                    }
                    yp[j] = y[j];
                }
            }
            JacobianMode::Analytic => {
                let u = self.u.rates(t);
                let w = self.w.values(t);
                state_jacobian(self.variant, &y[..n], &u, w.as_slice(), self.c, jac);
            }
        }
    }
}

/// Exact `df/dx` by forward-mode differentiation.
pub fn state_jacobian(variant: Variant, x: &[f64], u: &InputRates, w: &[f64], c: &Coefficients, jac: &mut Matrix) {
    let n = variant.state_dim();
    let wd: Vec<Dual> = w.iter().map(|&v| Dual::from(v)).collect();
    let mut xd = [Dual::from(0.0); MAX_STATE_DIM];
    let mut out = [Dual::from(0.0); MAX_STATE_DIM];
    for j in 0..n {
        for i in 0..n {
            xd[i] = Dual::new(x[i], if i == j { 1.0 } else { 0.0 });
        }
        rhs_generic(variant, &xd[..n], u, &wd, c, &mut out[..n]);
        for i in 0..n {
            jac[i][j] = out[i].d;
        }
    }
}

/// Exact `df/dw` by forward-mode differentiation.
pub fn noise_jacobian(
    variant: Variant,
    x: &[f64],
    u: &InputRates,
    w: &[f64],
    c: &Coefficients,
) -> [[f64; MAX_NOISE_DIM]; MAX_STATE_DIM] {
    let n = variant.state_dim();
    let m = variant.noise_dim();
    let xd: Vec<Dual> = x.iter().map(|&v| Dual::from(v)).collect();
    let mut wd = [Dual::from(0.0); MAX_NOISE_DIM];
    let mut out = [Dual::from(0.0); MAX_STATE_DIM];
    let mut jac = [[0.0; MAX_NOISE_DIM]; MAX_STATE_DIM];
    for j in 0..m {
        for i in 0..m {
            wd[i] = Dual::new(w[i], if i == j { 1.0 } else { 0.0 });
        }
        rhs_generic(variant, &xd, u, &wd[..m], c, &mut out[..n]);
        for i in 0..n {
            jac[i][j] = out[i].d;
        }
    }
    jac
}

/// LU factorization with partial pivoting of the leading `n x n` block.
#[derive(Debug, Clone)]
struct Lu {
    n: usize,
    a: Matrix,
    piv: [usize; MAX_STATE_DIM],
}

impl Lu {
    fn new(mut a: Matrix, n: usize) -> Option<Self> {
        let mut piv = [0; MAX_STATE_DIM];
        for k in 0..n {
            let p = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs()))?;
            if a[p][k] == 0.0 || !a[p][k].is_finite() {
                return None;
            }
            piv[k] = p;
            a.swap(k, p);
            for i in k + 1..n {
                let l = a[i][k] / a[k][k];
                a[i][k] = l;
                for j in k + 1..n {
                    a[i][j] -= l * a[k][j];
                }
            }
        }
        Some(Self { n, a, piv })
    }

    fn solve(&self, b: &mut Vector) {
        let n = self.n;
        for k in 0..n {
            b.swap(k, self.piv[k]);
        }
        for k in 0..n {
            for i in k + 1..n {
                b[i] -= self.a[i][k] * b[k];
            }
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for j in i + 1..n {
                s -= self.a[i][j] * b[j];
            }
            b[i] = s / self.a[i][i];
        }
    }
}

struct StepResult {
    y: Vector,
    err: Vector,
    inputs: [InputRates; 4],
}

/// Iteration matrix factorization and time derivative of one step.
#[derive(Debug, Clone)]
struct Frozen {
    lu: Lu,
    ft: Vector,
    u0: InputRates,
    /// Input rates at `t + c_i h` for the stages after the first.
    inputs: Option<[InputRates; 4]>,
}

fn prepare<U: InputFn + ?Sized, W: NoiseFn + ?Sized>(
    sys: &System<'_, U, W>,
    t: f64,
    y: &Vector,
    h: f64,
    t_end: f64,
) -> Option<(Frozen, Vector)> {
    let n = sys.n;
    let mut f0 = [0.0; MAX_STATE_DIM];
    let u0 = sys.u.rates(t);
    sys.f_at(t, &u0, y, &mut f0);

    // second-order one-sided time derivative that stays inside the segment;
    // inputs vary over minutes, so one second balances truncation against
    // cancellation in the large opposing flux terms
    let dt = TIME_DIFFERENCE_STEP.min(0.25 * (t_end - t).max(f64::MIN_POSITIVE));
    let mut f1 = [0.0; MAX_STATE_DIM];
    let mut ft = [0.0; MAX_STATE_DIM];
    sys.f(t + dt, y, &mut f1);
    sys.f(t + 2.0 * dt, y, &mut ft);
    for i in 0..n {
        ft[i] = (4.0 * f1[i] - 3.0 * f0[i] - ft[i]) / (2.0 * dt);
    }

    let mut jac = [[0.0; MAX_STATE_DIM]; MAX_STATE_DIM];
    sys.jac(t, y, &f0, &mut jac);
    let mut w = [[0.0; MAX_STATE_DIM]; MAX_STATE_DIM];
    let diag = 1.0 / (GAMMA * h);
    for i in 0..n {
        for j in 0..n {
            w[i][j] = -jac[i][j];
        }
        w[i][i] += diag;
    }
    Some((Frozen { lu: Lu::new(w, n)?, ft, u0, inputs: None }, f0))
}

/// Stages of one Rodas4 step with a given factorization.
fn stages<U: InputFn + ?Sized, W: NoiseFn + ?Sized>(
    sys: &System<'_, U, W>,
    t: f64,
    y: &Vector,
    h: f64,
    frozen: &Frozen,
    f0: Option<&Vector>,
) -> StepResult {
    let n = sys.n;
    let lu = &frozen.lu;
    let ft = &frozen.ft;
    let inputs = frozen.inputs.unwrap_or_else(|| {
        [sys.u.rates(t + C2 * h), sys.u.rates(t + C3 * h), sys.u.rates(t + C4 * h), sys.u.rates(t + h)]
    });
    let mut k1 = [0.0; MAX_STATE_DIM];
    match f0 {
        Some(f) => k1 = *f,
        None => sys.f_at(t, &frozen.u0, y, &mut k1),
    }
    for i in 0..n {
        k1[i] += h * D1 * ft[i];
    }
    lu.solve(&mut k1);

    let mut ys = [0.0; MAX_STATE_DIM];
    let mut fs = [0.0; MAX_STATE_DIM];

    for i in 0..n {
        ys[i] = y[i] + A21 * k1[i];
    }
    sys.f_at(t + C2 * h, &inputs[0], &ys, &mut fs);
    let mut k2 = [0.0; MAX_STATE_DIM];
    for i in 0..n {
        k2[i] = fs[i] + h * D2 * ft[i] + CC21 * k1[i] / h;
    }
    lu.solve(&mut k2);

    for i in 0..n {
        ys[i] = y[i] + A31 * k1[i] + A32 * k2[i];
    }
    sys.f_at(t + C3 * h, &inputs[1], &ys, &mut fs);
    let mut k3 = [0.0; MAX_STATE_DIM];
    for i in 0..n {
        k3[i] = fs[i] + h * D3 * ft[i] + (CC31 * k1[i] + CC32 * k2[i]) / h;
    }
    lu.solve(&mut k3);

    for i in 0..n {
        ys[i] = y[i] + A41 * k1[i] + A42 * k2[i] + A43 * k3[i];
    }
    sys.f_at(t + C4 * h, &inputs[2], &ys, &mut fs);
    let mut k4 = [0.0; MAX_STATE_DIM];
    for i in 0..n {
        k4[i] = fs[i] + h * D4 * ft[i] + (CC41 * k1[i] + CC42 * k2[i] + CC43 * k3[i]) / h;
    }
    lu.solve(&mut k4);

    for i in 0..n {
        ys[i] = y[i] + A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i];
    }
    sys.f_at(t + h, &inputs[3], &ys, &mut fs);
    let mut k5 = [0.0; MAX_STATE_DIM];
    for i in 0..n {
        k5[i] = fs[i] + (CC51 * k1[i] + CC52 * k2[i] + CC53 * k3[i] + CC54 * k4[i]) / h;
    }
    lu.solve(&mut k5);

    for i in 0..n {
        ys[i] += k5[i];
    }
    sys.f_at(t + h, &inputs[3], &ys, &mut fs);
    let mut k6 = [0.0; MAX_STATE_DIM];
    for i in 0..n {
        k6[i] = fs[i] + (CC61 * k1[i] + CC62 * k2[i] + CC63 * k3[i] + CC64 * k4[i] + CC65 * k5[i]) / h;
    }
    lu.solve(&mut k6);

    let mut ynew = [0.0; MAX_STATE_DIM];
    for i in 0..n {
        ynew[i] = ys[i] + k6[i];
    }
    StepResult { y: ynew, err: k6, inputs }
}

/// One Rodas4 step from `(t, y)` with size `h`; `None` if the iteration matrix is singular.
fn rodas_step<U: InputFn + ?Sized, W: NoiseFn + ?Sized>(
    sys: &System<'_, U, W>,
    t: f64,
    y: &Vector,
    h: f64,
    t_end: f64,
) -> Option<(StepResult, Frozen)> {
    let (frozen, f0) = prepare(sys, t, y, h, t_end)?;
    Some((stages(sys, t, y, h, &frozen, Some(&f0)), frozen))
}

fn error_norm(cfg: &IntegratorConfig, n: usize, y: &Vector, ynew: &Vector, err: &Vector) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        let scale = cfg.atol.get(i) + cfg.rtol * y[i].abs().max(ynew[i].abs());
        s += (err[i] / scale).powi(2);
    }
    (s / n as f64).sqrt()
}

/// Adaptive integration over one smooth segment `[t0, t1]`.
#[allow(clippy::too_many_arguments)]
fn solve_segment<U: InputFn + ?Sized, W: NoiseFn + ?Sized>(
    sys: &System<'_, U, W>,
    cfg: &IntegratorConfig,
    t0: f64,
    t1: f64,
    y: &mut Vector,
    h: &mut f64,
    steps_taken: &mut usize,
    mut record: Option<&mut StepRecord>,
) -> Result<()> {
    let n = sys.n;
    let mut t = t0;
    let mut rejected_last = false;
    while t < t1 {
        if *steps_taken >= cfg.max_steps {
            return Err(Error::TooManySteps { t, max_steps: cfg.max_steps });
        }
        *steps_taken += 1;
        let last = *h >= t1 - t;
        let hs = if last { t1 - t } else { *h };
        if hs < 1e-12 * t.abs().max(1.0) {
            return Err(Error::StepSizeUnderflow { t, h: hs });
        }
        let step = rodas_step(sys, t, y, hs, t1);
        let (err, accepted) = match &step {
            Some((s, _)) if s.y[..n].iter().all(|v| v.is_finite()) => {
                let e = error_norm(cfg, n, y, &s.y, &s.err);
                (e, e <= 1.0)
            }
            _ => (f64::INFINITY, false),
        };
        if accepted {
            let (s, mut frozen) = step.expect("accepted step");
            if let Some(r) = record.as_deref_mut() {
                frozen.inputs = Some(s.inputs);
                r.steps.push((t, hs, frozen));
            }
            *y = s.y;
            t = if last { t1 } else { t + hs };
            let mut factor = if err == 0.0 { 6.0 } else { (0.9 * err.powf(-0.25)).clamp(0.2, 6.0) };
            if rejected_last {
                factor = factor.min(1.0);
            }
            // a truncated final step says little about the next step size
            if !last || hs >= *h {
                *h = hs * factor;
            }
            rejected_last = false;
        } else {
            if !err.is_finite() && hs < 1e-6 * t.abs().max(1.0) {
                return Err(Error::NonFiniteState { t });
            }
            let factor = if err.is_finite() { (0.9 * err.powf(-0.25)).clamp(0.2, 1.0) } else { 0.1 };
            *h = hs * factor;
            rejected_last = true;
        }
    }
    Ok(())
}

fn segment_points<U: InputFn + ?Sized, W: NoiseFn + ?Sized>(u: &U, w: &W, t0: f64, t1: f64, grid: &[f64]) -> Vec<f64> {
    let mut pts: Vec<f64> = u.breakpoints(t0, t1);
    pts.extend(w.breakpoints(t0, t1));
    pts.extend(grid.iter().copied().filter(|&t| t > t0 && t < t1));
    pts.push(t1);
    pts.retain(|&t| t > t0 && t <= t1);
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    pts
}

fn check_start(x0: &PatientState, u: Variant, cfg: &IntegratorConfig) -> Result<()> {
    x0.ensure_variant(u)?;
    cfg.validate(x0.dim())?;
    if !x0.as_slice().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteState { t: 0.0 });
    }
    Ok(())
}

fn initial_step(t0: f64, t1: f64) -> f64 {
    (t1 - t0).min(1.0)
}

/// Integrates from `x0` over `[t0, t1]` and reports states every `STEP_SECONDS`
/// after `t0` plus the final state.
pub fn integrate<U: InputFn + ?Sized, W: NoiseFn + ?Sized>(
    x0: &PatientState,
    t0: f64,
    t1: f64,
    u: &U,
    w: &W,
    c: &Coefficients,
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    integrate_on_grid(x0, t0, t1, u, w, c, cfg, STEP_SECONDS)
}

/// As [`integrate`] with a custom reporting period.
#[allow(clippy::too_many_arguments)]
pub fn integrate_on_grid<U: InputFn + ?Sized, W: NoiseFn + ?Sized>(
    x0: &PatientState,
    t0: f64,
    t1: f64,
    u: &U,
    w: &W,
    c: &Coefficients,
    cfg: &IntegratorConfig,
    period: f64,
) -> Result<Trajectory> {
    if !(t1 > t0) {
        return Err(Error::InvalidArgument(format!("empty time span [{t0}, {t1}]")));
    }
    if !(period > 0.0) {
        return Err(Error::InvalidArgument(format!("reporting period must be positive, got {period}")));
    }
    let variant = x0.variant();
    check_start(x0, u.variant(), cfg)?;
    if w.values(t0).variant() != variant {
        return Err(Error::VariantMismatch { expected: variant, found: w.values(t0).variant() });
    }
    let sys = System { variant, n: variant.state_dim(), c, u, w, jacobian: cfg.jacobian };

    let n_grid = ((t1 - t0) / period + 1e-9).floor() as usize;
    let grid: Vec<f64> = (1..=n_grid).map(|k| t0 + k as f64 * period).collect();
    let mut traj = Trajectory {
        times: vec![t0],
        step_index: vec![0],
        states: vec![*x0],
    };
    let mut y = [0.0; MAX_STATE_DIM];
    y[..sys.n].copy_from_slice(x0.as_slice());
    let mut h = initial_step(t0, t1);
    let mut steps = 0;
    let mut t = t0;
    let mut next_grid = 0;
    for tb in segment_points(u, w, t0, t1, &grid) {
        solve_segment(&sys, cfg, t, tb, &mut y, &mut h, &mut steps, None)?;
        t = tb;
        let on_grid = next_grid < grid.len() && grid[next_grid] == tb;
        if on_grid || tb == t1 {
            if on_grid {
                next_grid += 1;
            }
            traj.times.push(tb);
            traj.step_index.push(if on_grid { next_grid } else { n_grid });
            traj.states.push(PatientState::new(variant, &y[..sys.n])?);
        }
    }
    Ok(traj)
}

/// Final state of an integration over `[t0, t1]` without intermediate reporting.
pub fn flow<U: InputFn + ?Sized, W: NoiseFn + ?Sized>(
    x0: &PatientState,
    t0: f64,
    t1: f64,
    u: &U,
    w: &W,
    c: &Coefficients,
    cfg: &IntegratorConfig,
) -> Result<PatientState> {
    Ok(*integrate_on_grid(x0, t0, t1, u, w, c, cfg, t1 - t0 + 1.0)?.last())
}

/// The discrete-time map `F(x, u_k, w)`: one `STEP_SECONDS` integration
/// with constant process noise. `u` is evaluated in local time `[0, T_d]`.
pub fn step_map<U: InputFn + ?Sized>(
    x: &PatientState,
    u: &U,
    w: &ProcessNoise,
    c: &Coefficients,
    cfg: &IntegratorConfig,
) -> Result<PatientState> {
    Ok(step_map_recorded(x, u, w, c, cfg, false)?.0)
}

/// [`step_map`] that also returns the accepted internal steps when `record` is set.
pub fn step_map_recorded<U: InputFn + ?Sized>(
    x: &PatientState,
    u: &U,
    w: &ProcessNoise,
    c: &Coefficients,
    cfg: &IntegratorConfig,
    record: bool,
) -> Result<(PatientState, StepRecord)> {
    let variant = x.variant();
    check_start(x, u.variant(), cfg)?;
    if w.variant() != variant {
        return Err(Error::VariantMismatch { expected: variant, found: w.variant() });
    }
    let sys = System { variant, n: variant.state_dim(), c, u, w, jacobian: cfg.jacobian };
    let mut y = [0.0; MAX_STATE_DIM];
    y[..sys.n].copy_from_slice(x.as_slice());
    let mut h = initial_step(0.0, STEP_SECONDS);
    let mut steps = 0;
    let mut t = 0.0;
    let mut rec = StepRecord::default();
    for tb in segment_points(u, w, 0.0, STEP_SECONDS, &[]) {
        solve_segment(&sys, cfg, t, tb, &mut y, &mut h, &mut steps, if record { Some(&mut rec) } else { None })?;
        t = tb;
    }
    Ok((PatientState::new(variant, &y[..sys.n])?, rec))
}

/// Re-runs a recorded step sequence from a different state or noise,
/// reusing the recorded step sizes, iteration matrices and time
/// derivatives. The result is a smooth function of `(x, w)` that agrees
/// with the recorded run at the recorded arguments, which makes it suitable
/// for finite-difference derivatives.
pub fn step_map_replay<U: InputFn + ?Sized>(
    x: &PatientState,
    u: &U,
    w: &ProcessNoise,
    c: &Coefficients,
    record: &StepRecord,
) -> Result<PatientState> {
    let variant = x.variant();
    let sys = System { variant, n: variant.state_dim(), c, u, w, jacobian: JacobianMode::Analytic };
    let mut y = [0.0; MAX_STATE_DIM];
    y[..sys.n].copy_from_slice(x.as_slice());
    for (t, h, frozen) in &record.steps {
        let s = stages(&sys, *t, &y, *h, frozen, None);
        if !s.y[..sys.n].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteState { t: t + h });
        }
        y = s.y;
    }
    PatientState::new(variant, &y[..sys.n])
}

/// Step map together with its derivatives with respect to the state and
/// the process noise.
#[derive(Debug, Clone)]
pub struct LinearizedStep {
    pub next: PatientState,
    /// `dF/dx`, row-major `n x n`.
    pub dx: Vec<f64>,
    /// `dF/dw`, row-major `n x m`.
    pub dw: Vec<f64>,
}

/// Relative forward-difference step used for the step-map derivatives.
pub const FD_STEP: f64 = 1e-6;

/// Derivatives of the replayed step map at the recorded point by forward
/// differences. Only the noise columns listed in `w_columns` are computed;
/// the others are left at zero.
pub fn step_jacobians<U: InputFn + ?Sized>(
    x: &PatientState,
    u: &U,
    w: &ProcessNoise,
    c: &Coefficients,
    record: &StepRecord,
    next: &PatientState,
    w_columns: &[usize],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let variant = x.variant();
    let n = variant.state_dim();
    let m = variant.noise_dim();
    let mut dx = vec![0.0; n * n];
    let mut dw = vec![0.0; n * m];
    let base = next.as_slice();
    for j in 0..n {
        let mut xp = *x;
        let v = &mut xp.as_mut_slice()[j];
        let target = *v + FD_STEP * v.abs().max(1e-2);
        *v = target;
        let delta = target - x.as_slice()[j];
        let fp = step_map_replay(&xp, u, w, c, record)?;
        for i in 0..n {
            dx[i * n + j] = (fp.as_slice()[i] - base[i]) / delta;
        }
    }
    for &j in w_columns {
        let mut wp = *w;
        let v = &mut wp.as_mut_slice()[j];
        let target = *v + FD_STEP;
        *v = target;
        let delta = target - w.as_slice()[j];
        let fp = step_map_replay(x, u, &wp, c, record)?;
        for i in 0..n {
            dw[i * m + j] = (fp.as_slice()[i] - base[i]) / delta;
        }
    }
    Ok((dx, dw))
}

pub fn linearize_step<U: InputFn + ?Sized>(
    x: &PatientState,
    u: &U,
    w: &ProcessNoise,
    c: &Coefficients,
    cfg: &IntegratorConfig,
) -> Result<LinearizedStep> {
    let (next, rec) = step_map_recorded(x, u, w, c, cfg, true)?;
    let all: Vec<usize> = (0..x.variant().noise_dim()).collect();
    let (dx, dw) = step_jacobians(x, u, w, c, &rec, &next, &all)?;
    Ok(LinearizedStep { next, dx, dw })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dosing::{InputSignal, SECONDS_PER_DAY};
    use crate::params::ModelParameters;

    fn healthy() -> (ModelParameters, Coefficients) {
        let p = ModelParameters::healthy();
        let c = p.coefficients();
        (p, c)
    }

    #[test]
    fn lu_solves_small_system() {
        let mut a = [[0.0; MAX_STATE_DIM]; MAX_STATE_DIM];
        a[0][0] = 0.0;
        a[0][1] = 2.0;
        a[1][0] = 3.0;
        a[1][1] = 1.0;
        let lu = Lu::new(a, 2).unwrap();
        let mut b = [0.0; MAX_STATE_DIM];
        b[0] = 4.0;
        b[1] = 5.0;
        lu.solve(&mut b);
        approx::assert_relative_eq!(b[0], 1.0, max_relative = 1e-14);
        approx::assert_relative_eq!(b[1], 2.0, max_relative = 1e-14);
    }

    #[test]
    fn lu_with_late_pivoting() {
        let rows = [[1.0, 2.0, 3.0], [2.0, 4.0, 7.0], [0.5, 9.0, 1.0]];
        let mut a = [[0.0; MAX_STATE_DIM]; MAX_STATE_DIM];
        for i in 0..3 {
            a[i][..3].copy_from_slice(&rows[i]);
        }
        let lu = Lu::new(a, 3).unwrap();
        let x = [1.0, -2.0, 0.5];
        let mut b = [0.0; MAX_STATE_DIM];
        for i in 0..3 {
            b[i] = (0..3).map(|j| rows[i][j] * x[j]).sum();
        }
        lu.solve(&mut b);
        for i in 0..3 {
            approx::assert_relative_eq!(b[i], x[i], max_relative = 1e-13);
        }
    }

    #[test]
    fn fixed_step_convergence_order() {
        let (p, c) = healthy();
        let u = InputSignal::zero(Variant::Hypo, &p);
        let w = ProcessNoise::zero(Variant::Hypo);
        let mut x = PatientState::healthy_steady_state();
        x.as_mut_slice()[1] = 1.5;
        let sys = System { variant: Variant::Hypo, n: 6, c: &c, u: &u, w: &w, jacobian: JacobianMode::Analytic };
        let mut y0 = [0.0; MAX_STATE_DIM];
        y0[..6].copy_from_slice(x.as_slice());
        let run = |h: f64| {
            let mut y = y0;
            let mut t = 0.0;
            while t < 3600.0 - 1e-9 {
                y = rodas_step(&sys, t, &y, h, 3600.0).unwrap().0.y;
                t += h;
            }
            y[1]
        };
        let a = run(900.0);
        let b = run(450.0);
        let r = run(225.0);
        let order = ((a - b) / (b - r)).abs().log2();
        assert!(order > 3.3, "observed order {order}");
    }

    #[test]
    fn fixed_steps_track_dosed_window() {
        let p = ModelParameters::for_variant(Variant::Hypo);
        let c = p.coefficients();
        let schedule = crate::dosing::DoseSchedule::new(crate::dosing::Medication::Lt4, vec![100.0; 3]).unwrap();
        let u = InputSignal::from_schedule(Variant::Hypo, &schedule, &p).unwrap();
        let w = ProcessNoise::zero(Variant::Hypo);
        let x = PatientState::new(Variant::Hypo, &[0.49, 0.18, 0.92, 0.18, 5.14, 5.48]).unwrap();
        let x = step_map(&x, &u.window(0, STEP_SECONDS), &w, &c, &IntegratorConfig::default()).unwrap();
        let win = u.window(1, STEP_SECONDS);
        let sys = System { variant: Variant::Hypo, n: 6, c: &c, u: &win, w: &w, jacobian: JacobianMode::Analytic };
        let mut y0 = [0.0; MAX_STATE_DIM];
        y0[..6].copy_from_slice(x.as_slice());
        let run = |h: f64| {
            let mut y = y0;
            for k in 0..(3600.0 / h).round() as usize {
                y = rodas_step(&sys, k as f64 * h, &y, h, 3600.0).unwrap().0.y;
            }
            y
        };
        let coarse = run(400.0);
        let fine = run(5.0);
        for i in 0..6 {
            assert!((coarse[i] - fine[i]).abs() < 1e-9, "component {i}: {} vs {}", coarse[i], fine[i]);
        }
    }

    #[test]
    fn analytic_and_fd_jacobians_agree() {
        let (_, c) = healthy();
        let x = PatientState::healthy_steady_state();
        let u = InputRates::zero(Variant::Hypo);
        let w = [0.05, -0.02, 0.1, 0.0, 0.0];
        let mut ja = [[0.0; MAX_STATE_DIM]; MAX_STATE_DIM];
        state_jacobian(Variant::Hypo, x.as_slice(), &u, &w, &c, &mut ja);
        let mut f0 = [0.0; 6];
        rhs_into(Variant::Hypo, x.as_slice(), &u, &w, &c, &mut f0);
        for j in 0..6 {
            let mut xp = *x.as_slice().first_chunk::<6>().unwrap();
            let d = 1e-7 * xp[j];
            xp[j] += d;
            let mut fp = [0.0; 6];
            rhs_into(Variant::Hypo, &xp, &u, &w, &c, &mut fp);
            for i in 0..6 {
                let fd = (fp[i] - f0[i]) / d;
                assert!((fd - ja[i][j]).abs() <= 1e-5 * ja[i][j].abs().max(1e-3), "({i},{j}) {fd} vs {}", ja[i][j]);
            }
        }
    }

    #[test]
    fn step_map_keeps_healthy_steady_state() {
        let (p, c) = healthy();
        let u = InputSignal::zero(Variant::Hypo, &p);
        let cfg = IntegratorConfig::default();
        // relax the fast compartments onto their manifold first
        let x0 = flow(&PatientState::healthy_steady_state(), 0.0, 30.0 * SECONDS_PER_DAY, &u, &ProcessNoise::zero(Variant::Hypo), &c, &cfg).unwrap();
        let x1 = step_map(&x0, &u.window(0, STEP_SECONDS), &ProcessNoise::zero(Variant::Hypo), &c, &cfg).unwrap();
        for (a, b) in x0.as_slice().iter().zip(x1.as_slice()) {
            assert!((a - b).abs() <= 1e-4 * a.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn trajectory_reports_grid_and_endpoint() {
        let (p, c) = healthy();
        let u = InputSignal::zero(Variant::Hypo, &p);
        let traj = integrate(
            &PatientState::healthy_steady_state(),
            0.0,
            2.5 * STEP_SECONDS,
            &u,
            &ProcessNoise::zero(Variant::Hypo),
            &c,
            &IntegratorConfig::default(),
        )
        .unwrap();
        assert_eq!(traj.times, vec![0.0, STEP_SECONDS, 2.0 * STEP_SECONDS, 2.5 * STEP_SECONDS]);
        assert_eq!(traj.step_index, vec![0, 1, 2, 2]);
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t_seconds,step_index,t4_th,t4,t3p,t3c,tsh,tsh_c\n"));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(IntegratorConfig::with_tolerances(0.0, 1e-10).validate(6).is_err());
        let mut cfg = IntegratorConfig::default();
        cfg.atol = AbsTol::PerComponent(vec![1e-10; 5]);
        assert!(cfg.validate(6).is_err());
        cfg.atol = AbsTol::PerComponent(vec![1e-10; 6]);
        assert!(cfg.validate(6).is_ok());
        cfg.max_steps = 0;
        assert!(cfg.validate(6).is_err());
    }

    #[test]
    fn too_many_steps_reported_with_time() {
        let (p, c) = healthy();
        let u = InputSignal::zero(Variant::Hypo, &p);
        let cfg = IntegratorConfig { max_steps: 3, ..IntegratorConfig::default() };
        let err = step_map(&PatientState::healthy_steady_state(), &u.window(0, STEP_SECONDS), &ProcessNoise::zero(Variant::Hypo), &c, &cfg).unwrap_err();
        assert!(matches!(err, Error::TooManySteps { max_steps: 3, .. }));
    }

    #[test]
    fn replay_reproduces_nominal_step() {
        let (p, c) = healthy();
        let u = InputSignal::zero(Variant::Hypo, &p);
        let w = ProcessNoise::new(Variant::Hypo, &[0.1, 0.1, 0.2, 0.0, 0.0]).unwrap();
        let cfg = IntegratorConfig::default();
        let x = PatientState::healthy_steady_state();
        let win = u.window(0, STEP_SECONDS);
        let (next, rec) = step_map_recorded(&x, &win, &w, &c, &cfg, true).unwrap();
        assert!(!rec.is_empty());
        let again = step_map_replay(&x, &win, &w, &c, &rec).unwrap();
        assert_eq!(next, again);
    }
}
