//! Virtual patients: disturbances, dose titration, forgotten doses, the
//! ground-truth run and the estimation runs across sampling schemes.
//!
//! Dosing decisions are taken at the instants of `K^d_1` from step 102
//! (day 34) on and consume the noisy measurement at that instant. The truth
//! is therefore shared by all estimator schemes of a run.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dosing::{DoseSchedule, InputFn, InputSignal, Medication, SECONDS_PER_DAY, STEP_SECONDS};
use crate::error::{Error, Result};
use crate::integrator::{flow, IntegratorConfig, NoiseFn, Trajectory};
use crate::mhe::{estimate_stream, EstimatorConfig, StreamResult};
use crate::model::{free_t4, output, PatientState, ProcessNoise, OUTPUT_DIM};
use crate::params::{Coefficients, ModelParameters, Variant};
use crate::sampling::{realize, Scheme};
use crate::sets::measurement_noise_set;

pub const STEPS_PER_DAY: usize = (SECONDS_PER_DAY / STEP_SECONDS) as usize;

/// First dosing decision (day 34).
pub const FIRST_DECISION_STEP: usize = 102;

pub const HYPO_INITIAL_STATE: [f64; 6] = [0.49, 0.18, 0.92, 0.18, 5.14, 5.48];
pub const HYPER_INITIAL_STATE: [f64; 7] = [12.45, 4.68, 10.57, 4.28, 0.86, 0.92, 0.0];

fn default_duration() -> usize {
    120
}

fn default_true() -> bool {
    true
}

/// Description of one virtual patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientSpec {
    pub variant: Variant,
    pub g_t_co: f64,
    /// Constant parameter uncertainty on G_D1 and G_T3.
    pub w_gd1: f64,
    pub w_gt3: f64,
    /// Amplitude of the circadian TRH disturbance.
    pub trh_amplitude: f64,
    pub forgotten_days: Vec<usize>,
    pub initial_state: Vec<f64>,
    #[serde(default = "default_duration")]
    pub duration_days: usize,
    /// Seed of the measurement-noise realization.
    #[serde(default)]
    pub seed: u64,
    /// Draw measurement noise from `V`; off gives exact outputs.
    #[serde(default = "default_true")]
    pub measurement_noise: bool,
}

impl PatientSpec {
    pub fn hypo() -> Self {
        Self {
            variant: Variant::Hypo,
            g_t_co: 0.1,
            w_gd1: 0.1,
            w_gt3: 0.1,
            trh_amplitude: 0.3,
            forgotten_days: (39..=43).chain(81..=85).collect(),
            initial_state: HYPO_INITIAL_STATE.to_vec(),
            duration_days: default_duration(),
            seed: 0,
            measurement_noise: true,
        }
    }

    pub fn hyper() -> Self {
        Self {
            variant: Variant::Hyper,
            g_t_co: 7.0,
            initial_state: HYPER_INITIAL_STATE.to_vec(),
            ..Self::hypo()
        }
    }

    pub fn for_variant(variant: Variant) -> Self {
        match variant {
            Variant::Hypo => Self::hypo(),
            Variant::Hyper => Self::hyper(),
        }
    }

    /// Patient without disturbances, misreports or measurement noise.
    pub fn undisturbed(variant: Variant) -> Self {
        Self {
            w_gd1: 0.0,
            w_gt3: 0.0,
            trh_amplitude: 0.0,
            forgotten_days: Vec::new(),
            measurement_noise: false,
            ..Self::for_variant(variant)
        }
    }

    pub fn n_steps(&self) -> usize {
        STEPS_PER_DAY * self.duration_days
    }

    pub fn validate(&self) -> Result<()> {
        if self.duration_days == 0 {
            return Err(Error::InvalidArgument("duration must be at least one day".into()));
        }
        let x = PatientState::new(self.variant, &self.initial_state)?;
        if !x.is_nonnegative() {
            return Err(Error::InvalidArgument("initial state must be nonnegative".into()));
        }
        if !(self.g_t_co > 0.0) {
            return Err(Error::InvalidParameter {
                name: "g_t_co".into(),
                reason: "must be positive".into(),
            });
        }
        Ok(())
    }

    pub fn medication(&self) -> Medication {
        match self.variant {
            Variant::Hypo => Medication::Lt4,
            Variant::Hyper => Medication::Mmi,
        }
    }

    /// Circadian TRH disturbance, `t` in seconds.
    pub fn w_trh(&self, t: f64) -> f64 {
        self.trh_amplitude * (PI * (t / 43_200.0 - 5.0 / 12.0)).cos()
    }
}

/// Scenario file: the patient plus optional parameter overrides, estimator
/// and integrator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub patient: PatientSpec,
    #[serde(default)]
    pub parameters: BTreeMap<String, f64>,
    #[serde(default)]
    pub estimator: Option<EstimatorConfig>,
    #[serde(default)]
    pub integrator: IntegratorConfig,
}

impl ScenarioConfig {
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            patient: PatientSpec::for_variant(variant),
            parameters: BTreeMap::new(),
            estimator: None,
            integrator: IntegratorConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.patient.validate()?;
        self.model_parameters()?;
        let est = self.estimator_config();
        est.validate()?;
        if est.variant != self.patient.variant {
            return Err(Error::VariantMismatch { expected: self.patient.variant, found: est.variant });
        }
        self.integrator.validate(self.patient.variant.state_dim())
    }

    pub fn model_parameters(&self) -> Result<ModelParameters> {
        let mut p = ModelParameters::for_variant(self.patient.variant);
        p.g_t_co = self.patient.g_t_co;
        p.with_overrides(&self.parameters)
    }

    pub fn estimator_config(&self) -> EstimatorConfig {
        self.estimator.clone().unwrap_or_else(|| EstimatorConfig::for_variant(self.patient.variant))
    }
}

/// `w_dose(t) = 1 - U_true(t) / U(t)` for `U(t) > 0`, else 0.
pub fn misreport_noise(reported: f64, actual: f64) -> f64 {
    if reported > 0.0 {
        1.0 - actual / reported
    } else {
        0.0
    }
}

/// Process noise acting on the true patient: constant parameter
/// uncertainty, circadian TRH and the misreport of forgotten doses.
pub struct TruthNoise<'a> {
    pub spec: &'a PatientSpec,
    pub reported: &'a InputSignal,
    pub actual: &'a InputSignal,
}

impl NoiseFn for TruthNoise<'_> {
    fn values(&self, t: f64) -> ProcessNoise {
        let mut w = ProcessNoise::zero(self.spec.variant);
        let s = w.as_mut_slice();
        s[0] = self.spec.w_gd1;
        s[1] = self.spec.w_gt3;
        s[2] = self.spec.w_trh(t);
        w.set_dose(misreport_noise(self.reported.dose_rate(t), self.actual.dose_rate(t)));
        w
    }

    fn breakpoints(&self, t0: f64, t1: f64) -> Vec<f64> {
        self.actual.breakpoints(t0, t1)
    }
}

/// Titration state shared by both protocols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolState {
    pub dose: f64,
    pub decisions: usize,
}

/// Hypothyroid titration on measured TSH (mIU/l): start with 136 ug/day
/// above the band, then adjust by 18.75 ug/day until inside 0.5-4.
pub fn hypo_protocol(tsh: f64, state: &ProtocolState) -> f64 {
    const STEP: f64 = 18.75;
    let dose = if state.decisions == 0 {
        if tsh > 4.0 {
            136.0
        } else {
            0.0
        }
    } else if tsh > 4.0 {
        state.dose + STEP
    } else if tsh < 0.5 {
        state.dose - STEP
    } else {
        state.dose
    };
    dose.clamp(0.0, Medication::Lt4.max_daily_dose())
}

/// Free T4 in pmol/l from total T4 in 1e-7 mol/l.
pub fn ft4_pmol(t4: f64, c: &Coefficients) -> f64 {
    free_t4(t4, c) * 1e12
}

/// Hyperthyroid MMI dose (mg/day) from the FT4 band of the measured T4.
pub fn hyper_protocol(t4: f64, c: &Coefficients) -> f64 {
    let ft4 = ft4_pmol(t4, c);
    if ft4 > 54.0 {
        35.0
    } else if ft4 >= 41.0 {
        15.0
    } else if ft4 >= 27.0 {
        7.5
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DosingDecision {
    pub step: usize,
    /// First day the new dose is taken.
    pub day: usize,
    /// Measured TSH (hypo) or FT4 in pmol/l (hyper).
    pub measured: f64,
    pub dose: f64,
}

/// Ground truth of one run.
#[derive(Debug, Clone)]
pub struct Truth {
    pub trajectory: Trajectory,
    /// Measurements `y_k = h(x_k) + v_k` at every step.
    pub measurements: Vec<[f64; OUTPUT_DIM]>,
    pub reported: DoseSchedule,
    pub actual: DoseSchedule,
    pub decisions: Vec<DosingDecision>,
}

impl Truth {
    pub fn states(&self) -> &[PatientState] {
        &self.trajectory.states
    }

    pub fn decision_steps(&self) -> Vec<usize> {
        self.decisions.iter().map(|d| d.step).collect()
    }

    pub fn write_measurements_csv<W: Write>(&self, writer: W) -> Result<()> {
        let decided = self.decision_steps();
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["step_index", "t4", "t3p", "tsh", "used_for_dosing"])?;
        for (k, y) in self.measurements.iter().enumerate() {
            let mut row = vec![k.to_string()];
            row.extend(y.iter().map(|v| format!("{v:.17e}")));
            row.push((decided.contains(&k) as u8).to_string());
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_dosing_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["day_index", "reported_dose", "taken_dose", "medication"])?;
        for day in 0..self.reported.doses().len() {
            wtr.write_record([
                day.to_string(),
                format!("{:.17e}", self.reported.dose(day)),
                format!("{:.17e}", self.actual.dose(day)),
                self.reported.medication().name().to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Steps at which the dose is decided.
pub fn decision_steps(n_steps: usize) -> Result<Vec<usize>> {
    Ok(realize(Scheme::D, 1, n_steps)?
        .instants()
        .iter()
        .copied()
        .filter(|&k| k >= FIRST_DECISION_STEP)
        .collect())
}

/// One realization of measurement noise, uniform on `V`, per step.
pub fn measurement_noise(seed: u64, n: usize) -> Vec<[f64; OUTPUT_DIM]> {
    let set = measurement_noise_set();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut v = [0.0; OUTPUT_DIM];
            for (i, slot) in v.iter_mut().enumerate() {
                let (l, u) = set.interval(i);
                *slot = rng.gen_range(l..=u);
            }
            v
        })
        .collect()
}

/// Simulates the true patient over `spec.n_steps()` steps with protocol dosing.
pub fn simulate_truth(cfg: &ScenarioConfig) -> Result<Truth> {
    cfg.validate()?;
    let spec = &cfg.patient;
    let p = cfg.model_parameters()?;
    let c = p.coefficients();
    let variant = spec.variant;
    let medication = spec.medication();
    let n_steps = spec.n_steps();
    let days = spec.duration_days + 1;

    let noise = if spec.measurement_noise {
        measurement_noise(spec.seed, n_steps + 1)
    } else {
        vec![[0.0; OUTPUT_DIM]; n_steps + 1]
    };
    let decisions_at = decision_steps(n_steps)?;

    let mut doses = vec![0.0; days];
    let build = |doses: &[f64]| -> Result<(DoseSchedule, DoseSchedule, InputSignal, InputSignal)> {
        let reported = DoseSchedule::new(medication, doses.to_vec())?;
        let actual = reported.with_skipped_days(&spec.forgotten_days);
        let u = InputSignal::from_schedule(variant, &reported, &p)?;
        let u_true = InputSignal::from_schedule(variant, &actual, &p)?;
        Ok((reported, actual, u, u_true))
    };
    let (mut reported, mut actual, mut u, mut u_true) = build(&doses)?;

    let mut x = PatientState::new(variant, &spec.initial_state)?;
    let mut trajectory = Trajectory {
        times: vec![0.0],
        step_index: vec![0],
        states: vec![x],
    };
    let mut measurements = Vec::with_capacity(n_steps + 1);
    let mut protocol = ProtocolState { dose: 0.0, decisions: 0 };
    let mut decisions = Vec::new();

    for k in 0..=n_steps {
        let y = output(&x, &noise[k]).as_array();
        measurements.push(y);
        if decisions_at.contains(&k) {
            let (measured, dose) = match variant {
                Variant::Hypo => (y[2], hypo_protocol(y[2], &protocol)),
                Variant::Hyper => (ft4_pmol(y[0], &c), hyper_protocol(y[0], &c)),
            };
            protocol.dose = dose;
            protocol.decisions += 1;
            let day = k.div_ceil(STEPS_PER_DAY);
            decisions.push(DosingDecision { step: k, day, measured, dose });
            for slot in doses.iter_mut().skip(day) {
                *slot = dose;
            }
            (reported, actual, u, u_true) = build(&doses)?;
        }
        if k == n_steps {
            break;
        }
        let w = TruthNoise { spec, reported: &u, actual: &u_true };
        let t0 = k as f64 * STEP_SECONDS;
        let t1 = t0 + STEP_SECONDS;
        x = flow(&x, t0, t1, &u, &w, &c, &cfg.integrator)?;
        trajectory.times.push(t1);
        trajectory.step_index.push(k + 1);
        trajectory.states.push(x);
    }
    Ok(Truth { trajectory, measurements, reported, actual, decisions })
}

/// `SAE(k)` series and RMSE of estimates against the truth.
pub fn metrics(truth: &[PatientState], estimates: &[PatientState]) -> Result<(Vec<f64>, f64)> {
    if truth.len() != estimates.len() {
        return Err(Error::LengthMismatch(truth.len(), estimates.len()));
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("no steps to evaluate".into()));
    }
    let mut sae = Vec::with_capacity(truth.len());
    let mut acc = 0.0;
    let mut sq = 0.0;
    for (x, e) in truth.iter().zip(estimates) {
        let diff = x.as_slice().iter().zip(e.as_slice()).map(|(a, b)| b - a);
        let (l1, l2): (f64, f64) = diff.fold((0.0, 0.0), |(l1, l2), d| (l1 + d.abs(), l2 + d * d));
        acc += l1;
        sq += l2;
        sae.push(acc);
    }
    Ok((sae, (sq / truth.len() as f64).sqrt()))
}

#[derive(Debug, Clone)]
pub struct SchemeRun {
    pub scheme: Scheme,
    pub stream: StreamResult,
    pub sae: Vec<f64>,
    pub rmse: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub variant: Variant,
    pub truth: Truth,
    pub runs: Vec<SchemeRun>,
}

/// Per-scheme summary written to the metrics JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeMetrics {
    pub rmse: f64,
    pub final_sae: f64,
    pub solved_windows: usize,
    pub unconverged_windows: usize,
    pub sae_csv: String,
}

impl RunResult {
    pub fn rmse(&self, scheme: Scheme) -> Option<f64> {
        self.runs.iter().find(|r| r.scheme == scheme).map(|r| r.rmse)
    }

    /// Writes truth, measurement, dosing, estimate and SAE files plus
    /// `metrics.json`, all prefixed with the variant name.
    pub fn write_outputs(&self, dir: &Path) -> Result<BTreeMap<Scheme, SchemeMetrics>> {
        std::fs::create_dir_all(dir)?;
        let v = self.variant.as_str();
        let file = |name: String| -> Result<BufWriter<File>> { Ok(BufWriter::new(File::create(dir.join(name))?)) };
        self.truth.trajectory.write_csv(file(format!("{v}_truth.csv"))?)?;
        self.truth.write_measurements_csv(file(format!("{v}_measurements.csv"))?)?;
        self.truth.write_dosing_csv(file(format!("{v}_dosing.csv"))?)?;
        let mut table = BTreeMap::new();
        for run in &self.runs {
            let s = run.scheme.as_str();
            run.stream.write_csv(file(format!("{v}_estimates_{s}.csv"))?)?;
            let sae_name = format!("{v}_sae_{s}.csv");
            let mut wtr = csv::Writer::from_writer(file(sae_name.clone())?);
            wtr.write_record(["step_index", "sae"])?;
            for (k, e) in run.sae.iter().enumerate() {
                wtr.write_record([k.to_string(), format!("{e:.17e}")])?;
            }
            wtr.flush()?;
            table.insert(
                run.scheme,
                SchemeMetrics {
                    rmse: run.rmse,
                    final_sae: run.sae.last().copied().unwrap_or(0.0),
                    solved_windows: run.stream.log.iter().filter(|l| l.solved).count(),
                    unconverged_windows: run.stream.log.iter().filter(|l| l.solved && !l.converged).count(),
                    sae_csv: sae_name,
                },
            );
        }
        let json = serde_json::to_string_pretty(&table)?;
        std::fs::write(dir.join(format!("{v}_metrics.json")), json)?;
        Ok(table)
    }
}

/// Measurements as seen by the estimator of one scheme.
pub fn sampled_measurements(truth: &Truth, scheme: Scheme) -> Result<Vec<Option<[f64; OUTPUT_DIM]>>> {
    let n = truth.measurements.len();
    let set = realize(scheme, 1, n - 1)?;
    Ok(truth
        .measurements
        .iter()
        .enumerate()
        .map(|(k, y)| set.contains(k).then_some(*y))
        .collect())
}

/// Runs the estimator on an existing truth for each scheme, concurrently.
pub fn estimate_schemes(cfg: &ScenarioConfig, truth: &Truth, schemes: &[Scheme]) -> Result<Vec<SchemeRun>> {
    let p = cfg.model_parameters()?;
    let c = p.coefficients();
    let est = cfg.estimator_config();
    let reported = InputSignal::from_schedule(cfg.patient.variant, &truth.reported, &p)?;
    schemes
        .par_iter()
        .map(|&scheme| {
            let y = sampled_measurements(truth, scheme)?;
            let stream = estimate_stream(&y, &reported, &est, &c)?;
            let (sae, rmse) = metrics(truth.states(), &stream.estimates)?;
            Ok(SchemeRun { scheme, stream, sae, rmse })
        })
        .collect()
}

/// Truth simulation followed by one estimation run per scheme.
pub fn run_virtual_patient(cfg: &ScenarioConfig, schemes: &[Scheme]) -> Result<RunResult> {
    let truth = simulate_truth(cfg)?;
    let runs = estimate_schemes(cfg, &truth, schemes)?;
    Ok(RunResult { variant: cfg.patient.variant, truth, runs })
}

/// Mean of a state component over each whole day of a trajectory.
pub fn daily_means(states: &[PatientState], component: usize) -> Vec<f64> {
    states
        .chunks_exact(STEPS_PER_DAY)
        .map(|c| c.iter().map(|x| x.as_slice()[component]).sum::<f64>() / STEPS_PER_DAY as f64)
        .collect()
}
