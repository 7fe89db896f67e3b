//! State, noise and input types plus the continuous-time dynamics.
//!
//! Concentrations are carried in scaled units throughout:
//! T4,th in 1e-12 mol/l, T4 in 1e-7 mol/l, T3p in 1e-9 mol/l, T3c in
//! 1e-8 mol/l, TSH and TSHc in mIU/l and MMI,th in 1e-5 mol/l.

use serde::{Deserialize, Serialize};

use crate::ad::Real;
use crate::error::{Error, Result};
use crate::params::{Coefficients, Variant};

pub const MAX_STATE_DIM: usize = 7;
pub const MAX_NOISE_DIM: usize = 5;
pub const OUTPUT_DIM: usize = 3;

/// Indices of the measured components (T4, T3p, TSH) in the state vector.
pub const MEASURED: [usize; OUTPUT_DIM] = [1, 2, 4];

pub const HYPO_STATE_NAMES: [&str; 6] = ["t4_th", "t4", "t3p", "t3c", "tsh", "tsh_c"];
pub const HYPER_STATE_NAMES: [&str; 7] = ["t4_th", "t4", "t3p", "t3c", "tsh", "tsh_c", "mmi_th"];

pub fn state_names(variant: Variant) -> &'static [&'static str] {
    match variant {
        Variant::Hypo => &HYPO_STATE_NAMES,
        Variant::Hyper => &HYPER_STATE_NAMES,
    }
}

/// Healthy steady state with `g_t_co = 1`.
pub const HEALTHY_STEADY_STATE: [f64; 6] = [3.10, 1.17, 2.71, 1.12, 1.87, 1.99];

/// Hormone concentrations of one patient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatientState {
    variant: Variant,
    values: [f64; MAX_STATE_DIM],
}

impl PatientState {
    pub fn new(variant: Variant, values: &[f64]) -> Result<Self> {
        if values.len() != variant.state_dim() {
            return Err(Error::DimensionMismatch {
                what: "state",
                expected: variant.state_dim(),
                found: values.len(),
            });
        }
        let mut v = [0.0; MAX_STATE_DIM];
        v[..values.len()].copy_from_slice(values);
        Ok(Self { variant, values: v })
    }

    pub fn zeros(variant: Variant) -> Self {
        Self {
            variant,
            values: [0.0; MAX_STATE_DIM],
        }
    }

    pub fn healthy_steady_state() -> Self {
        Self::new(Variant::Hypo, &HEALTHY_STEADY_STATE).unwrap()
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn dim(&self) -> usize {
        self.variant.state_dim()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values[..self.dim()]
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        let n = self.dim();
        &mut self.values[..n]
    }

    pub fn t4_th(&self) -> f64 {
        self.values[0]
    }
    pub fn t4(&self) -> f64 {
        self.values[1]
    }
    pub fn t3p(&self) -> f64 {
        self.values[2]
    }
    pub fn t3c(&self) -> f64 {
        self.values[3]
    }
    pub fn tsh(&self) -> f64 {
        self.values[4]
    }
    pub fn tsh_c(&self) -> f64 {
        self.values[5]
    }
    /// Zero for the hypothyroid model.
    pub fn mmi_th(&self) -> f64 {
        self.values[6]
    }

    pub fn is_nonnegative(&self) -> bool {
        self.as_slice().iter().all(|&v| v >= 0.0)
    }

    /// Copy with negative components set to zero, for reporting.
    pub fn clamped(&self) -> Self {
        let mut out = *self;
        out.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        out
    }

    pub fn ensure_variant(&self, variant: Variant) -> Result<()> {
        if self.variant != variant {
            return Err(Error::VariantMismatch {
                expected: variant,
                found: self.variant,
            });
        }
        Ok(())
    }
}

/// Process noise `w`.
///
/// Hypo order: (w_GD1, w_GT3, w_TRH, w_LT3, w_LT4).
/// Hyper order: (w_GD1, w_GT3, w_TRH, w_MMI).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcessNoise {
    variant: Variant,
    values: [f64; MAX_NOISE_DIM],
}

impl ProcessNoise {
    pub fn new(variant: Variant, values: &[f64]) -> Result<Self> {
        if values.len() != variant.noise_dim() {
            return Err(Error::DimensionMismatch {
                what: "process noise",
                expected: variant.noise_dim(),
                found: values.len(),
            });
        }
        let mut v = [0.0; MAX_NOISE_DIM];
        v[..values.len()].copy_from_slice(values);
        Ok(Self { variant, values: v })
    }

    pub fn zero(variant: Variant) -> Self {
        Self {
            variant,
            values: [0.0; MAX_NOISE_DIM],
        }
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values[..self.variant.noise_dim()]
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        let n = self.variant.noise_dim();
        &mut self.values[..n]
    }

    pub fn gd1(&self) -> f64 {
        self.values[0]
    }
    pub fn gt3(&self) -> f64 {
        self.values[1]
    }
    pub fn trh(&self) -> f64 {
        self.values[2]
    }

    /// Misreport factor on the dose input: w_LT4 (hypo) or w_MMI (hyper).
    pub fn dose(&self) -> f64 {
        match self.variant {
            Variant::Hypo => self.values[4],
            Variant::Hyper => self.values[3],
        }
    }

    pub fn set_dose(&mut self, value: f64) {
        match self.variant {
            Variant::Hypo => self.values[4] = value,
            Variant::Hyper => self.values[3] = value,
        }
    }
}

/// Measurement noise `v = (v_T4, v_T3p, v_TSH)`.
pub type MeasurementNoise = [f64; OUTPUT_DIM];

/// Measured (T4, T3p, TSH).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub t4: f64,
    pub t3p: f64,
    pub tsh: f64,
}

impl Measurement {
    pub fn as_array(&self) -> [f64; OUTPUT_DIM] {
        [self.t4, self.t3p, self.tsh]
    }

    pub fn from_array(a: [f64; OUTPUT_DIM]) -> Self {
        Self {
            t4: a[0],
            t3p: a[1],
            tsh: a[2],
        }
    }
}

/// Instantaneous absorption rates of the medication.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InputRates {
    /// L-T3 and L-T4 absorption (mol/s into the respective compartments).
    Hypo { lt3: f64, lt4: f64 },
    /// Methimazole uptake from plasma into the thyroid (mol/l/s).
    Hyper { mmi: f64 },
}

impl InputRates {
    pub fn zero(variant: Variant) -> Self {
        match variant {
            Variant::Hypo => InputRates::Hypo { lt3: 0.0, lt4: 0.0 },
            Variant::Hyper => InputRates::Hyper { mmi: 0.0 },
        }
    }

    pub fn variant(&self) -> Variant {
        match self {
            InputRates::Hypo { .. } => Variant::Hypo,
            InputRates::Hyper { .. } => Variant::Hyper,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        match *self {
            InputRates::Hypo { lt3, lt4 } => InputRates::Hypo {
                lt3: lt3 * factor,
                lt4: lt4 * factor,
            },
            InputRates::Hyper { mmi } => InputRates::Hyper { mmi: mmi * factor },
        }
    }

    fn check(&self) -> Result<()> {
        let (name, rate) = match *self {
            InputRates::Hypo { lt3, .. } if lt3 < 0.0 => ("u_LT3", lt3),
            InputRates::Hypo { lt4, .. } => ("u_LT4", lt4),
            InputRates::Hyper { mmi } => ("u_MMI", mmi),
        };
        if rate < 0.0 {
            return Err(Error::NegativeInput { input: name, rate });
        }
        Ok(())
    }
}

/// Algebraic hormone quantities derived from the state (mol/l).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivedQuantities {
    pub ft4: f64,
    pub ft3: f64,
    pub t3n: f64,
    /// Thyroid peroxidase activity; present for the hyperthyroid model only.
    pub tpo_a: Option<f64>,
}

/// Free T4 (mol/l) from total T4 in 1e-7 mol/l.
pub fn free_t4(t4: f64, c: &Coefficients) -> f64 {
    1e-7 * t4 / (1.0 + c.k_41 * c.tbg + c.k_42 * c.tbpa)
}

/// Thyroid peroxidase activity as a function of thyroid MMI (1e-5 mol/l).
pub fn tpo_activity(mmi_th: f64, c: &Coefficients) -> f64 {
    // the fractional power is undefined below zero, so the argument is
    // floored there; the state itself is left untouched
    tpo_activity_generic(mmi_th, c)
}

pub fn derived_quantities(x: &PatientState, c: &Coefficients) -> DerivedQuantities {
    DerivedQuantities {
        ft4: free_t4(x.t4(), c),
        ft3: 1e-9 * x.t3p() / (1.0 + c.k_30 * c.tbg),
        t3n: 1e-8 * x.t3c() / (1.0 + c.k_31 * c.ibs),
        tpo_a: match x.variant() {
            Variant::Hypo => None,
            Variant::Hyper => Some(tpo_activity(x.mmi_th(), c)),
        },
    }
}

/// TPO activity of a state; errors on the hypothyroid model, which has none.
pub fn tpo_a(x: &PatientState, c: &Coefficients) -> Result<f64> {
    x.ensure_variant(Variant::Hyper)?;
    Ok(tpo_activity(x.mmi_th(), c))
}

/// Right-hand side of the loop dynamics with consistency checks.
pub fn rhs(
    x: &PatientState,
    u: &InputRates,
    w: &ProcessNoise,
    c: &Coefficients,
) -> Result<PatientState> {
    let variant = x.variant();
    if u.variant() != variant {
        return Err(Error::VariantMismatch {
            expected: variant,
            found: u.variant(),
        });
    }
    if w.variant() != variant {
        return Err(Error::VariantMismatch {
            expected: variant,
            found: w.variant(),
        });
    }
    u.check()?;
    let mut dx = PatientState::zeros(variant);
    rhs_into(variant, x.as_slice(), u, w.as_slice(), c, dx.as_mut_slice());
    Ok(dx)
}

/// Unchecked right-hand side on raw slices; `x`, `w` and `out` must have
/// the dimensions of `variant` and `u` must belong to the same variant.
pub fn rhs_into(
    variant: Variant,
    x: &[f64],
    u: &InputRates,
    w: &[f64],
    c: &Coefficients,
    out: &mut [f64],
) {
    rhs_generic(variant, x, u, w, c, out)
}

/// Right-hand side over any [`Real`] scalar; the dual-number instance
/// yields exact directional derivatives.
pub fn rhs_generic<T: Real>(
    variant: Variant,
    x: &[T],
    u: &InputRates,
    w: &[T],
    c: &Coefficients,
    out: &mut [T],
) {
    let (t4_th, t4, t3p, t3c, tsh, tsh_c) = (x[0], x[1], x[2], x[3], x[4], x[5]);

    let g_d1 = (w[0] + 1.0) * c.g_d1;
    let g_t3 = (w[1] + 1.0) * c.g_t3;
    let trh = (w[2] + 1.0) * c.trh;

    let ft4 = t4 * (1e-7 / (1.0 + c.k_41 * c.tbg + c.k_42 * c.tbpa));
    let t3n = t3c * (1e-8 / (1.0 + c.k_31 * c.ibs));

    // thyroidal deiodination substrate
    let s = t4_th * tsh / (tsh + c.k_dio);
    let mct8 = t4_th * c.g_mct8 / (t4_th + 1e12 * c.k_mct8);
    let d1_th = g_d1 * s / (s + 1e12 * c.k_m1);
    let d2_th = s * c.g_d2 / (s + 1e12 * c.k_m2);
    let tsh_drive = tsh / (tsh + c.d_t);

    let zero = T::from(0.0);
    let (production, t3_secretion, lt3, lt4) = match (variant, *u) {
        (Variant::Hypo, InputRates::Hypo { lt3, lt4 }) => (
            T::from(c.g_t_nom * c.g_t_co),
            g_t3,
            (-w[3] + 1.0) * lt3,
            (-w[4] + 1.0) * lt4,
        ),
        (Variant::Hyper, InputRates::Hyper { .. }) => {
            let activity = tpo_activity_generic(x[6], c) * c.g_t_co;
            (activity * c.g_t_nom, g_t3 * activity, zero, zero)
        }
        _ => unreachable!("input variant checked by caller"),
    };

    out[0] = (production * tsh_drive - mct8 - d1_th - d2_th) * (1e12 * c.alpha_th) - t4_th * c.beta_th;
    out[1] = (mct8 + lt4) * (1e7 * c.alpha_t) - t4 * c.beta_t;
    out[2] = (d1_th
        + ft4 * c.g_d2 / (ft4 + c.k_m2)
        + d2_th
        + g_d1 * ft4 / (ft4 + c.k_m1)
        + t3_secretion * tsh_drive
        + lt3)
        * (1e9 * c.alpha_31)
        - t3p * c.beta_31;
    out[3] = ft4 * (1e8 * c.alpha_32 * c.g_d2) / (ft4 + c.k_m2) - t3c * c.beta_32;

    let trh_drive = trh * c.g_h / (trh + c.d_h);
    let ultrashort = tsh_c * c.s_s / (tsh_c + c.d_s) + 1.0;
    let t3_brake = t3n * (c.l_s * c.g_r) / (t3n + c.d_r) + 1.0;
    let secretion = trh_drive / (ultrashort * t3_brake);
    out[4] = secretion * c.alpha_s - tsh * c.beta_s;
    out[5] = secretion * c.alpha_s2 - tsh_c * c.beta_s2;

    if let (Variant::Hyper, InputRates::Hyper { mmi }) = (variant, *u) {
        out[6] = (-w[3] + 1.0) * (1e5 * mmi) - x[6] * c.beta_m_th;
    }
}

fn tpo_activity_generic<T: Real>(mmi_th: T, c: &Coefficients) -> T {
    let conc = (mmi_th * 1e-5).max(0.0);
    let arg = (-conc.powf(1.0 / c.c_2) + c.c_3) * (-c.c_1);
    T::from(c.c_0) / (arg.exp() + 1.0)
}

/// Measurement map `h(x, v)`.
pub fn output(x: &PatientState, v: &MeasurementNoise) -> Measurement {
    Measurement {
        t4: x.t4() + v[0],
        t3p: x.t3p() + v[1],
        tsh: x.tsh() + v[2],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ModelParameters;

    fn healthy() -> Coefficients {
        ModelParameters::healthy().coefficients()
    }

    #[test]
    fn tpo_at_zero_mmi() {
        let c = ModelParameters::for_variant(Variant::Hyper).coefficients();
        let x = PatientState::new(Variant::Hyper, &[12.45, 4.68, 10.57, 4.28, 0.86, 0.92, 0.0]).unwrap();
        let expected = c.c_0 / (1.0 + (-c.c_1 * c.c_3).exp());
        assert_eq!(tpo_a(&x, &c).unwrap(), expected);
        assert!(expected <= c.c_0 && expected > 0.95 * c.c_0);
    }

    #[test]
    fn tpo_rejects_hypo_state() {
        let x = PatientState::healthy_steady_state();
        assert!(matches!(tpo_a(&x, &healthy()), Err(Error::VariantMismatch { .. })));
        assert!(derived_quantities(&x, &healthy()).tpo_a.is_none());
    }

    #[test]
    fn free_t4_of_zero_is_zero() {
        let mut x = PatientState::healthy_steady_state();
        x.as_mut_slice()[1] = 0.0;
        assert_eq!(derived_quantities(&x, &healthy()).ft4, 0.0);
    }

    #[test]
    fn free_t4_at_healthy_state() {
        // 1e-7 * 1.17 / (1 + 2e10 * 300e-9 + 2e8 * 4.5e-6) = 1.17e-7 / 6901
        let x = PatientState::healthy_steady_state();
        let ft4 = derived_quantities(&x, &healthy()).ft4;
        approx::assert_relative_eq!(ft4, 1.695406462831474e-11, max_relative = 1e-12);
    }

    #[test]
    fn output_of_steady_states() {
        let y = output(&PatientState::healthy_steady_state(), &[0.0; 3]);
        assert_eq!(y.as_array(), [1.17, 2.71, 1.87]);
        let hyper = PatientState::new(Variant::Hyper, &[12.45, 4.68, 10.57, 4.28, 0.86, 0.92, 0.0]).unwrap();
        assert_eq!(output(&hyper, &[0.0; 3]).as_array(), [4.68, 10.57, 0.86]);
        let y = output(&hyper, &[0.1, -0.2, 0.05]);
        approx::assert_relative_eq!(y.tsh, 0.91, max_relative = 1e-15);
    }

    #[test]
    fn healthy_steady_state_residual_is_small() {
        let x = PatientState::healthy_steady_state();
        let dx = rhs(&x, &InputRates::zero(Variant::Hypo), &ProcessNoise::zero(Variant::Hypo), &healthy()).unwrap();
        // the fast thyroid and pituitary compartments relax within seconds,
        // so the rounded printed state sits slightly off their manifold
        let slow = [dx.t4(), dx.t3p(), dx.t3c(), dx.tsh()];
        assert!(slow.iter().all(|d| d.abs() < 1e-5), "{dx:?}");
    }

    #[test]
    fn rejects_mismatched_variants_and_negative_inputs() {
        let x = PatientState::healthy_steady_state();
        let c = healthy();
        let w = ProcessNoise::zero(Variant::Hypo);
        assert!(rhs(&x, &InputRates::Hyper { mmi: 0.0 }, &w, &c).is_err());
        assert!(rhs(&x, &InputRates::zero(Variant::Hypo), &ProcessNoise::zero(Variant::Hyper), &c).is_err());
        let neg = InputRates::Hypo { lt3: 0.0, lt4: -1e-12 };
        assert!(matches!(rhs(&x, &neg, &w, &c), Err(Error::NegativeInput { .. })));
        assert!(PatientState::new(Variant::Hyper, &HEALTHY_STEADY_STATE).is_err());
    }

    #[test]
    fn lt4_input_enters_only_t4() {
        let x = PatientState::healthy_steady_state();
        let c = healthy();
        let w = ProcessNoise::zero(Variant::Hypo);
        let base = rhs(&x, &InputRates::Hypo { lt3: 0.0, lt4: 1e-12 }, &w, &c).unwrap();
        let double = rhs(&x, &InputRates::Hypo { lt3: 0.0, lt4: 2e-12 }, &w, &c).unwrap();
        let zero = rhs(&x, &InputRates::zero(Variant::Hypo), &w, &c).unwrap();
        for i in 0..6 {
            if i == 1 {
                let d1 = base.as_slice()[i] - zero.as_slice()[i];
                let d2 = double.as_slice()[i] - zero.as_slice()[i];
                approx::assert_relative_eq!(d2, 2.0 * d1, max_relative = 1e-9);
                assert!(d1 > 0.0);
            } else {
                assert_eq!(base.as_slice()[i], zero.as_slice()[i]);
            }
        }
    }
}
