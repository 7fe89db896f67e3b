//! Daily dose schedules and their closed-form absorption signals.
//!
//! Doses are taken once per day at `t_i = 86400 * i` seconds. Each dose
//! contributes a double-exponential pulse gated by the Heaviside step, so
//! signals can be evaluated exactly at any time the integrator asks for.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::InputRates;
use crate::params::{ModelParameters, Variant, MOLAR_MASS_MMI, MOLAR_MASS_T3, MOLAR_MASS_T4};

pub const SECONDS_PER_DAY: f64 = 86_400.0;

/// Discretization period `T_d` of the sampled models (8 h).
pub const STEP_SECONDS: f64 = 28_800.0;

/// Pulses older than this are skipped during evaluation. For every
/// admissible dose the skipped tail is below `amplitude * exp(-a * 30 d)`,
/// which for the default rates is under 1e-30 of the pulse peak.
pub const PULSE_HORIZON_SECONDS: f64 = 30.0 * SECONDS_PER_DAY;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Medication {
    #[serde(rename = "L-T3", alias = "lt3")]
    Lt3,
    #[serde(rename = "L-T4", alias = "lt4")]
    Lt4,
    #[serde(rename = "MMI", alias = "mmi")]
    Mmi,
}

impl Medication {
    /// Largest admissible daily dose (µg for L-T3/L-T4, mg for MMI).
    pub fn max_daily_dose(self) -> f64 {
        match self {
            Medication::Lt3 => 30.0,
            Medication::Lt4 => 400.0,
            Medication::Mmi => 35.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Medication::Lt3 => "L-T3",
            Medication::Lt4 => "L-T4",
            Medication::Mmi => "MMI",
        }
    }

    /// Converts a dose in its customary unit to mol.
    pub fn to_mol(self, amount: f64) -> f64 {
        match self {
            Medication::Lt3 => amount * 1e-6 / MOLAR_MASS_T3,
            Medication::Lt4 => amount * 1e-6 / MOLAR_MASS_T4,
            Medication::Mmi => amount * 1e-3 / MOLAR_MASS_MMI,
        }
    }
}

impl std::str::FromStr for Medication {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "L-T3" | "lt3" | "LT3" => Ok(Medication::Lt3),
            "L-T4" | "lt4" | "LT4" => Ok(Medication::Lt4),
            "MMI" | "mmi" => Ok(Medication::Mmi),
            other => Err(Error::InvalidArgument(format!("unknown medication `{other}`"))),
        }
    }
}

/// One dose amount per day index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseSchedule {
    medication: Medication,
    doses: Vec<f64>,
}

impl DoseSchedule {
    pub fn new(medication: Medication, doses: Vec<f64>) -> Result<Self> {
        let max = medication.max_daily_dose();
        for (day, &amount) in doses.iter().enumerate() {
            if !(0.0..=max).contains(&amount) {
                return Err(Error::DoseOutOfRange {
                    medication: medication.name(),
                    day,
                    amount,
                    max,
                });
            }
        }
        Ok(Self { medication, doses })
    }

    pub fn empty(medication: Medication) -> Self {
        Self {
            medication,
            doses: Vec::new(),
        }
    }

    pub fn medication(&self) -> Medication {
        self.medication
    }

    pub fn doses(&self) -> &[f64] {
        &self.doses
    }

    pub fn dose(&self, day: usize) -> f64 {
        self.doses.get(day).copied().unwrap_or(0.0)
    }

    /// Same schedule with the listed days set to zero.
    pub fn with_skipped_days(&self, days: &[usize]) -> Self {
        let mut doses = self.doses.clone();
        for &d in days {
            if let Some(slot) = doses.get_mut(d) {
                *slot = 0.0;
            }
        }
        Self {
            medication: self.medication,
            doses,
        }
    }
}

/// `amplitude * (exp(-slow * dt) - exp(-fast * dt))` for `dt = t - onset >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pulse {
    pub onset: f64,
    pub amplitude: f64,
    pub slow: f64,
    pub fast: f64,
}

impl Pulse {
    pub fn eval(&self, t: f64) -> f64 {
        let dt = t - self.onset;
        if dt < 0.0 {
            return 0.0;
        }
        self.amplitude * ((-self.slow * dt).exp() - (-self.fast * dt).exp())
    }
}

/// Sum of dose pulses, sorted by onset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsorptionSignal {
    medication: Medication,
    pulses: Vec<Pulse>,
}

impl AbsorptionSignal {
    pub fn zero(medication: Medication) -> Self {
        Self {
            medication,
            pulses: Vec::new(),
        }
    }

    pub fn from_pulses(medication: Medication, mut pulses: Vec<Pulse>) -> Self {
        pulses.sort_by(|a, b| a.onset.total_cmp(&b.onset));
        Self { medication, pulses }
    }

    pub fn medication(&self) -> Medication {
        self.medication
    }

    pub fn pulses(&self) -> &[Pulse] {
        &self.pulses
    }

    pub fn eval(&self, t: f64) -> f64 {
        let end = self.pulses.partition_point(|p| p.onset <= t);
        let start = self.pulses[..end].partition_point(|p| p.onset < t - PULSE_HORIZON_SECONDS);
        // summing newest-first keeps the dominant terms together
        self.pulses[start..end].iter().rev().map(|p| p.eval(t)).sum()
    }

    /// Dose onsets inside the open interval `(t0, t1)`.
    pub fn onsets_between(&self, t0: f64, t1: f64) -> impl Iterator<Item = f64> + '_ {
        self.pulses
            .iter()
            .map(|p| p.onset)
            .filter(move |&s| s > t0 && s < t1)
    }
}

/// L-T3 or L-T4 absorption rate (mol/s) produced by a dose schedule.
pub fn lt_signal(schedule: &DoseSchedule, p: &ModelParameters) -> Result<AbsorptionSignal> {
    let (absorption, loss, transfer) = match schedule.medication() {
        Medication::Lt3 => (p.k_13, p.k_23, p.k_33),
        Medication::Lt4 => (p.k_14, p.k_24, p.k_34),
        Medication::Mmi => {
            return Err(Error::InvalidArgument(
                "lt_signal needs an L-T3 or L-T4 schedule".into(),
            ))
        }
    };
    let slow = loss + transfer;
    let gain = transfer * absorption / (absorption - slow);
    Ok(pulses_from(schedule, gain, slow, absorption))
}

/// Plasma MMI concentration (mol/l) produced by a dose schedule.
pub fn mmi_plasma(schedule: &DoseSchedule, p: &ModelParameters) -> Result<AbsorptionSignal> {
    if schedule.medication() != Medication::Mmi {
        return Err(Error::InvalidArgument("mmi_plasma needs an MMI schedule".into()));
    }
    let k_a = p.k_a / 3600.0;
    let k_e = p.k_e / 3600.0;
    let gain = p.f_b * k_a / (p.v * (k_a - k_e));
    Ok(pulses_from(schedule, gain, k_e, k_a))
}

fn pulses_from(schedule: &DoseSchedule, gain: f64, slow: f64, fast: f64) -> AbsorptionSignal {
    let med = schedule.medication();
    let pulses = schedule
        .doses()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m > 0.0)
        .map(|(day, &m)| Pulse {
            onset: day as f64 * SECONDS_PER_DAY,
            amplitude: gain * med.to_mol(m),
            slow,
            fast,
        })
        .collect();
    AbsorptionSignal::from_pulses(med, pulses)
}

/// Saturable uptake of plasma MMI into the thyroid (mol/l/s).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmiUptake {
    plasma: AbsorptionSignal,
    max_rate: f64,
    half_saturation: f64,
}

impl MmiUptake {
    pub fn plasma(&self) -> &AbsorptionSignal {
        &self.plasma
    }

    pub fn rate_at_concentration(&self, plasma: f64) -> f64 {
        self.max_rate * plasma / (self.half_saturation + plasma)
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.rate_at_concentration(self.plasma.eval(t))
    }

    pub fn max_rate(&self) -> f64 {
        self.max_rate
    }
}

pub fn mmi_absorption(plasma: AbsorptionSignal, p: &ModelParameters) -> MmiUptake {
    MmiUptake {
        plasma,
        max_rate: p.alpha_m_th * p.g_m_th,
        half_saturation: p.k_m_th,
    }
}

/// Something that yields input rates at absolute times (seconds).
pub trait InputFn: Sync {
    fn variant(&self) -> Variant;
    fn rates(&self, t: f64) -> InputRates;
    /// Times in `(t0, t1)` where the input is not smooth.
    fn breakpoints(&self, t0: f64, t1: f64) -> Vec<f64>;
}

/// Medication input of a patient over the whole treatment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InputSignal {
    Hypo {
        lt3: AbsorptionSignal,
        lt4: AbsorptionSignal,
    },
    Hyper {
        uptake: MmiUptake,
    },
}

impl InputSignal {
    pub fn zero(variant: Variant, p: &ModelParameters) -> Self {
        match variant {
            Variant::Hypo => InputSignal::Hypo {
                lt3: AbsorptionSignal::zero(Medication::Lt3),
                lt4: AbsorptionSignal::zero(Medication::Lt4),
            },
            Variant::Hyper => InputSignal::Hyper {
                uptake: mmi_absorption(AbsorptionSignal::zero(Medication::Mmi), p),
            },
        }
    }

    /// L-T4-only treatment of the hypothyroid patient.
    pub fn levothyroxine(schedule: &DoseSchedule, p: &ModelParameters) -> Result<Self> {
        Self::hypo(&DoseSchedule::empty(Medication::Lt3), schedule, p)
    }

    pub fn hypo(lt3: &DoseSchedule, lt4: &DoseSchedule, p: &ModelParameters) -> Result<Self> {
        if lt3.medication() != Medication::Lt3 || lt4.medication() != Medication::Lt4 {
            return Err(Error::InvalidArgument("expected L-T3 and L-T4 schedules".into()));
        }
        Ok(InputSignal::Hypo {
            lt3: lt_signal(lt3, p)?,
            lt4: lt_signal(lt4, p)?,
        })
    }

    pub fn methimazole(schedule: &DoseSchedule, p: &ModelParameters) -> Result<Self> {
        Ok(InputSignal::Hyper {
            uptake: mmi_absorption(mmi_plasma(schedule, p)?, p),
        })
    }

    /// Input of the given variant built from its primary medication schedule.
    pub fn from_schedule(variant: Variant, schedule: &DoseSchedule, p: &ModelParameters) -> Result<Self> {
        match variant {
            Variant::Hypo => Self::levothyroxine(schedule, p),
            Variant::Hyper => Self::methimazole(schedule, p),
        }
    }

    /// Rate of the medication that misreporting acts on (u_LT4 or u_MMI).
    pub fn dose_rate(&self, t: f64) -> f64 {
        match self {
            InputSignal::Hypo { lt4, .. } => lt4.eval(t),
            InputSignal::Hyper { uptake } => uptake.eval(t),
        }
    }

    /// Restriction to `[k T_d, (k+1) T_d]` in local time.
    pub fn window(&self, k: usize, step: f64) -> InputWindow<'_> {
        InputWindow {
            signal: self,
            start: k as f64 * step,
            length: step,
        }
    }
}

impl InputFn for InputSignal {
    fn variant(&self) -> Variant {
        match self {
            InputSignal::Hypo { .. } => Variant::Hypo,
            InputSignal::Hyper { .. } => Variant::Hyper,
        }
    }

    fn rates(&self, t: f64) -> InputRates {
        match self {
            InputSignal::Hypo { lt3, lt4 } => InputRates::Hypo {
                lt3: lt3.eval(t),
                lt4: lt4.eval(t),
            },
            InputSignal::Hyper { uptake } => InputRates::Hyper { mmi: uptake.eval(t) },
        }
    }

    fn breakpoints(&self, t0: f64, t1: f64) -> Vec<f64> {
        let mut out: Vec<f64> = match self {
            InputSignal::Hypo { lt3, lt4 } => lt3
                .onsets_between(t0, t1)
                .chain(lt4.onsets_between(t0, t1))
                .collect(),
            InputSignal::Hyper { uptake } => uptake.plasma().onsets_between(t0, t1).collect(),
        };
        out.sort_by(f64::total_cmp);
        out.dedup();
        out
    }
}

/// Input over one discretization step, in local time `tau in [0, length]`.
#[derive(Debug, Clone, Copy)]
pub struct InputWindow<'a> {
    signal: &'a InputSignal,
    start: f64,
    length: f64,
}

impl InputWindow<'_> {
    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn signal(&self) -> &InputSignal {
        self.signal
    }
}

impl InputFn for InputWindow<'_> {
    fn variant(&self) -> Variant {
        self.signal.variant()
    }

    fn rates(&self, tau: f64) -> InputRates {
        self.signal.rates(self.start + tau)
    }

    fn breakpoints(&self, t0: f64, t1: f64) -> Vec<f64> {
        self.signal
            .breakpoints(self.start + t0, self.start + t1)
            .into_iter()
            .map(|t| t - self.start)
            .collect()
    }
}

#[derive(Debug, Deserialize)]
struct ScheduleRow {
    day_index: usize,
    dose_amount: f64,
    medication: String,
}

/// Reads `day_index,dose_amount,medication` rows. Days not listed get no dose.
pub fn read_schedules_csv<R: Read>(reader: R) -> Result<Vec<DoseSchedule>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut by_med: Vec<(Medication, Vec<f64>)> = Vec::new();
    for row in rdr.deserialize() {
        let row: ScheduleRow = row?;
        let med: Medication = row.medication.parse()?;
        let entry = match by_med.iter_mut().find(|(m, _)| *m == med) {
            Some(e) => e,
            None => {
                by_med.push((med, Vec::new()));
                by_med.last_mut().unwrap()
            }
        };
        if entry.1.len() <= row.day_index {
            entry.1.resize(row.day_index + 1, 0.0);
        }
        entry.1[row.day_index] = row.dose_amount;
    }
    by_med
        .into_iter()
        .map(|(m, doses)| DoseSchedule::new(m, doses))
        .collect()
}

pub fn read_schedules_csv_path(path: &Path) -> Result<Vec<DoseSchedule>> {
    read_schedules_csv(std::fs::File::open(path)?)
}

pub fn write_schedule_csv<W: std::io::Write>(schedules: &[DoseSchedule], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["day_index", "dose_amount", "medication"])?;
    for s in schedules {
        for (day, dose) in s.doses().iter().enumerate() {
            wtr.write_record([day.to_string(), format!("{dose:.17e}"), s.medication().name().to_string()])?;
        }
    }
    wtr.flush()?;
    Ok(())
}
