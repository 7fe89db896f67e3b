//! Model parameters of the pituitary-thyroid loop.
//!
//! Values are stored in the units of the published parameter table (for
//! example `tbg` in nmol/l, `g_t_nom` in pmol/s). The right-hand side works
//! with [`Coefficients`], which holds the same numbers converted once to
//! mol, l, s and mIU.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which patient model a state, parameter set or signal belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Hypothyroid patient treated with L-T3 / L-T4 (6 states).
    Hypo,
    /// Hyperthyroid patient treated with methimazole (7 states).
    Hyper,
}

impl Variant {
    pub fn state_dim(self) -> usize {
        match self {
            Variant::Hypo => 6,
            Variant::Hyper => 7,
        }
    }

    /// Dimension of the process noise `w`.
    pub fn noise_dim(self) -> usize {
        match self {
            Variant::Hypo => 5,
            Variant::Hyper => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Hypo => "hypo",
            Variant::Hyper => "hyper",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hypo" => Ok(Variant::Hypo),
            "hyper" => Ok(Variant::Hyper),
            other => Err(Error::InvalidArgument(format!("unknown variant `{other}`"))),
        }
    }
}

/// Molar mass of levothyroxine (g/mol).
pub const MOLAR_MASS_T4: f64 = 776.87;
/// Molar mass of liothyronine (g/mol).
pub const MOLAR_MASS_T3: f64 = 650.97;
/// Molar mass of methimazole (g/mol).
pub const MOLAR_MASS_MMI: f64 = 114.17;

/// All constants of the loop model.
///
/// Units follow the parameter table; see the field docs. The six L-T
/// pharmacokinetic rates are not part of that table and default to
/// placeholder values (see [`ModelParameters::LT_PLACEHOLDER_NOTE`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParameters {
    /// nmol/l
    pub tbg: f64,
    /// µmol/l
    pub tbpa: f64,
    /// µmol/l
    pub ibs: f64,
    /// nmol/s
    pub trh: f64,
    /// mIU/s
    pub g_h: f64,
    /// nmol/s
    pub d_h: f64,
    /// 1/l
    pub alpha_s: f64,
    /// 1/s
    pub beta_s: f64,
    /// l/µmol
    pub l_s: f64,
    /// pmol/s
    pub g_t_nom: f64,
    /// mIU/l
    pub d_t: f64,
    /// 1/l
    pub alpha_t: f64,
    /// 1/s
    pub beta_t: f64,
    /// nmol/l
    pub k_m1: f64,
    /// 1/l
    pub alpha_31: f64,
    /// 1/s
    pub beta_31: f64,
    /// fmol/s
    pub g_d2: f64,
    /// nmol/l
    pub k_m2: f64,
    /// 1/l
    pub alpha_32: f64,
    /// 1/s
    pub beta_32: f64,
    /// 1/l
    pub alpha_s2: f64,
    /// 1/s
    pub beta_s2: f64,
    /// pmol/l
    pub d_r: f64,
    /// mol/s
    pub g_r: f64,
    /// l/mIU
    pub s_s: f64,
    /// mIU/l
    pub d_s: f64,
    /// l/mol
    pub k_30: f64,
    /// l/mol
    pub k_31: f64,
    /// l/mol
    pub k_41: f64,
    /// l/mol
    pub k_42: f64,
    /// 1/l
    pub alpha_th: f64,
    /// 1/s
    pub beta_th: f64,
    /// mIU/l
    pub k_dio: f64,
    /// mol/l
    pub k_mct8: f64,
    /// mol/s
    pub g_d1: f64,
    /// mol/s
    pub g_t3: f64,
    /// mol/s
    pub g_mct8: f64,
    pub c_0: f64,
    pub c_1: f64,
    pub c_2: f64,
    pub c_3: f64,
    /// mol/s
    pub g_m_th: f64,
    /// mol/l
    pub k_m_th: f64,
    /// 1/l
    pub alpha_m_th: f64,
    /// 1/s
    pub beta_m_th: f64,
    pub f_b: f64,
    /// 1/h
    pub k_a: f64,
    /// 1/h
    pub k_e: f64,
    /// Distribution volume of methimazole (l).
    pub v: f64,
    /// Scaling of the thyroid hormone production rate.
    pub g_t_co: f64,
    /// L-T3 gut absorption rate (1/s).
    pub k_13: f64,
    /// L-T3 loss rate from the intermediate compartment (1/s).
    pub k_23: f64,
    /// L-T3 transfer rate into plasma (1/s).
    pub k_33: f64,
    /// L-T4 gut absorption rate (1/s).
    pub k_14: f64,
    /// L-T4 loss rate from the intermediate compartment (1/s).
    pub k_24: f64,
    /// L-T4 transfer rate into plasma (1/s).
    pub k_34: f64,
}

impl ModelParameters {
    pub const LT_PLACEHOLDER_NOTE: &'static str =
        "k_13..k_34 are placeholder values; override them from a parameter file when calibrated rates are available";

    /// Parameters of the given patient model: `g_t_co` is 0.1 for the
    /// hypothyroid and 7 for the hyperthyroid patient.
    pub fn for_variant(variant: Variant) -> Self {
        let mut p = Self::healthy();
        p.g_t_co = match variant {
            Variant::Hypo => 0.1,
            Variant::Hyper => 7.0,
        };
        p
    }

    /// Parameter set of a healthy individual (`g_t_co = 1`).
    pub fn healthy() -> Self {
        Self {
            tbg: 300.0,
            tbpa: 4.5,
            ibs: 8.0,
            trh: 6.9,
            // printed as 817; see the crate README for the recalibrated
            // secretion gain that reproduces the reported steady states
            g_h: 469.0,
            d_h: 47.0,
            alpha_s: 0.4,
            beta_s: 2.3e-4,
            l_s: 1.68,
            g_t_nom: 3.4,
            d_t: 2.75,
            alpha_t: 0.1,
            beta_t: 1.1e-6,
            k_m1: 500.0,
            alpha_31: 2.6e-2,
            beta_31: 8e-6,
            g_d2: 4.3,
            k_m2: 1.0,
            alpha_32: 1.3e5,
            beta_32: 8.3e-4,
            alpha_s2: 2.6e5,
            beta_s2: 140.0,
            d_r: 100.0,
            g_r: 1.0,
            s_s: 100.0,
            d_s: 50.0,
            k_30: 2e9,
            k_31: 2e9,
            k_41: 2e10,
            k_42: 2e8,
            alpha_th: 250.0,
            beta_th: 4.4e-6,
            k_dio: 1.0,
            k_mct8: 4.7e-6,
            g_d1: 1.98e-8,
            g_t3: 2.07e-13,
            g_mct8: 1.94e-6,
            c_0: 0.97,
            c_1: 1.47e4,
            c_2: 1.36,
            c_3: 3.23e-4,
            g_m_th: 1.92e-12,
            k_m_th: 7.28e-7,
            alpha_m_th: 250.0,
            beta_m_th: 6.42e-6,
            f_b: 0.93,
            k_a: 1.02,
            k_e: 0.106,
            v: 281.0,
            g_t_co: 1.0,
            k_13: 2.4e-4,
            k_23: 1.6e-5,
            k_33: 4.8e-5,
            k_14: 1.2e-4,
            k_24: 2.4e-5,
            k_34: 3.6e-5,
        }
    }

    fn named_values(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("tbg", self.tbg),
            ("tbpa", self.tbpa),
            ("ibs", self.ibs),
            ("trh", self.trh),
            ("g_h", self.g_h),
            ("d_h", self.d_h),
            ("alpha_s", self.alpha_s),
            ("beta_s", self.beta_s),
            ("l_s", self.l_s),
            ("g_t_nom", self.g_t_nom),
            ("d_t", self.d_t),
            ("alpha_t", self.alpha_t),
            ("beta_t", self.beta_t),
            ("k_m1", self.k_m1),
            ("alpha_31", self.alpha_31),
            ("beta_31", self.beta_31),
            ("g_d2", self.g_d2),
            ("k_m2", self.k_m2),
            ("alpha_32", self.alpha_32),
            ("beta_32", self.beta_32),
            ("alpha_s2", self.alpha_s2),
            ("beta_s2", self.beta_s2),
            ("d_r", self.d_r),
            ("g_r", self.g_r),
            ("s_s", self.s_s),
            ("d_s", self.d_s),
            ("k_30", self.k_30),
            ("k_31", self.k_31),
            ("k_41", self.k_41),
            ("k_42", self.k_42),
            ("alpha_th", self.alpha_th),
            ("beta_th", self.beta_th),
            ("k_dio", self.k_dio),
            ("k_mct8", self.k_mct8),
            ("g_d1", self.g_d1),
            ("g_t3", self.g_t3),
            ("g_mct8", self.g_mct8),
            ("c_0", self.c_0),
            ("c_1", self.c_1),
            ("c_2", self.c_2),
            ("c_3", self.c_3),
            ("g_m_th", self.g_m_th),
            ("k_m_th", self.k_m_th),
            ("alpha_m_th", self.alpha_m_th),
            ("beta_m_th", self.beta_m_th),
            ("f_b", self.f_b),
            ("k_a", self.k_a),
            ("k_e", self.k_e),
            ("v", self.v),
            ("g_t_co", self.g_t_co),
            ("k_13", self.k_13),
            ("k_23", self.k_23),
            ("k_33", self.k_33),
            ("k_14", self.k_14),
            ("k_24", self.k_24),
            ("k_34", self.k_34),
        ]
    }

    /// Every constant must be finite and strictly positive.
    pub fn validate(&self) -> Result<()> {
        for (name, value) in self.named_values() {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::InvalidParameter {
                    name: name.to_string(),
                    reason: format!("must be finite and > 0, got {value}"),
                });
            }
        }
        if (self.k_13 - (self.k_23 + self.k_33)).abs() < 1e-15 {
            return Err(Error::InvalidParameter {
                name: "k_13".into(),
                reason: "k_13 must differ from k_23 + k_33".into(),
            });
        }
        if (self.k_14 - (self.k_24 + self.k_34)).abs() < 1e-15 {
            return Err(Error::InvalidParameter {
                name: "k_14".into(),
                reason: "k_14 must differ from k_24 + k_34".into(),
            });
        }
        if (self.k_a - self.k_e).abs() < 1e-15 {
            return Err(Error::InvalidParameter {
                name: "k_a".into(),
                reason: "k_a must differ from k_e".into(),
            });
        }
        Ok(())
    }

    /// Applies `{"name": value, ...}` overrides. Unknown names are errors.
    pub fn with_overrides(mut self, overrides: &BTreeMap<String, f64>) -> Result<Self> {
        for (name, &value) in overrides {
            let slot = self
                .slot_mut(name)
                .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            *slot = value;
        }
        self.validate()?;
        Ok(self)
    }

    /// Parses a JSON object of overrides and applies it on top of `self`.
    pub fn with_json_overrides(self, json: &str) -> Result<Self> {
        let overrides: BTreeMap<String, f64> = serde_json::from_str(json)?;
        self.with_overrides(&overrides)
    }

    fn slot_mut(&mut self, name: &str) -> Option<&mut f64> {
        Some(match name {
            "tbg" => &mut self.tbg,
            "tbpa" => &mut self.tbpa,
            "ibs" => &mut self.ibs,
            "trh" => &mut self.trh,
            "g_h" => &mut self.g_h,
            "d_h" => &mut self.d_h,
            "alpha_s" => &mut self.alpha_s,
            "beta_s" => &mut self.beta_s,
            "l_s" => &mut self.l_s,
            "g_t_nom" => &mut self.g_t_nom,
            "d_t" => &mut self.d_t,
            "alpha_t" => &mut self.alpha_t,
            "beta_t" => &mut self.beta_t,
            "k_m1" => &mut self.k_m1,
            "alpha_31" => &mut self.alpha_31,
            "beta_31" => &mut self.beta_31,
            "g_d2" => &mut self.g_d2,
            "k_m2" => &mut self.k_m2,
            "alpha_32" => &mut self.alpha_32,
            "beta_32" => &mut self.beta_32,
            "alpha_s2" => &mut self.alpha_s2,
            "beta_s2" => &mut self.beta_s2,
            "d_r" => &mut self.d_r,
            "g_r" => &mut self.g_r,
            "s_s" => &mut self.s_s,
            "d_s" => &mut self.d_s,
            "k_30" => &mut self.k_30,
            "k_31" => &mut self.k_31,
            "k_41" => &mut self.k_41,
            "k_42" => &mut self.k_42,
            "alpha_th" => &mut self.alpha_th,
            "beta_th" => &mut self.beta_th,
            "k_dio" => &mut self.k_dio,
            "k_mct8" => &mut self.k_mct8,
            "g_d1" => &mut self.g_d1,
            "g_t3" => &mut self.g_t3,
            "g_mct8" => &mut self.g_mct8,
            "c_0" => &mut self.c_0,
            "c_1" => &mut self.c_1,
            "c_2" => &mut self.c_2,
            "c_3" => &mut self.c_3,
            "g_m_th" => &mut self.g_m_th,
            "k_m_th" => &mut self.k_m_th,
            "alpha_m_th" => &mut self.alpha_m_th,
            "beta_m_th" => &mut self.beta_m_th,
            "f_b" => &mut self.f_b,
            "k_a" => &mut self.k_a,
            "k_e" => &mut self.k_e,
            "v" => &mut self.v,
            "g_t_co" => &mut self.g_t_co,
            "k_13" => &mut self.k_13,
            "k_23" => &mut self.k_23,
            "k_33" => &mut self.k_33,
            "k_14" => &mut self.k_14,
            "k_24" => &mut self.k_24,
            "k_34" => &mut self.k_34,
            _ => return None,
        })
    }

    /// Converts to the mol / l / s / mIU system used by the dynamics.
    pub fn coefficients(&self) -> Coefficients {
        Coefficients {
            tbg: self.tbg * 1e-9,
            tbpa: self.tbpa * 1e-6,
            ibs: self.ibs * 1e-6,
            trh: self.trh,
            g_h: self.g_h,
            d_h: self.d_h,
            alpha_s: self.alpha_s,
            beta_s: self.beta_s,
            l_s: self.l_s * 1e6,
            g_t_nom: self.g_t_nom * 1e-12,
            d_t: self.d_t,
            alpha_t: self.alpha_t,
            beta_t: self.beta_t,
            k_m1: self.k_m1 * 1e-9,
            alpha_31: self.alpha_31,
            beta_31: self.beta_31,
            g_d2: self.g_d2 * 1e-15,
            k_m2: self.k_m2 * 1e-9,
            alpha_32: self.alpha_32,
            beta_32: self.beta_32,
            alpha_s2: self.alpha_s2,
            beta_s2: self.beta_s2,
            d_r: self.d_r * 1e-12,
            g_r: self.g_r,
            s_s: self.s_s,
            d_s: self.d_s,
            k_30: self.k_30,
            k_31: self.k_31,
            k_41: self.k_41,
            k_42: self.k_42,
            alpha_th: self.alpha_th,
            beta_th: self.beta_th,
            k_dio: self.k_dio,
            k_mct8: self.k_mct8,
            g_d1: self.g_d1,
            g_t3: self.g_t3,
            g_mct8: self.g_mct8,
            c_0: self.c_0,
            c_1: self.c_1,
            c_2: self.c_2,
            c_3: self.c_3,
            g_m_th: self.g_m_th,
            k_m_th: self.k_m_th,
            alpha_m_th: self.alpha_m_th,
            beta_m_th: self.beta_m_th,
            g_t_co: self.g_t_co,
        }
    }
}

/// Parameters in coherent units (mol, l, s, mIU), ready for the right-hand side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub tbg: f64,
    pub tbpa: f64,
    pub ibs: f64,
    pub trh: f64,
    pub g_h: f64,
    pub d_h: f64,
    pub alpha_s: f64,
    pub beta_s: f64,
    pub l_s: f64,
    pub g_t_nom: f64,
    pub d_t: f64,
    pub alpha_t: f64,
    pub beta_t: f64,
    pub k_m1: f64,
    pub alpha_31: f64,
    pub beta_31: f64,
    pub g_d2: f64,
    pub k_m2: f64,
    pub alpha_32: f64,
    pub beta_32: f64,
    pub alpha_s2: f64,
    pub beta_s2: f64,
    pub d_r: f64,
    pub g_r: f64,
    pub s_s: f64,
    pub d_s: f64,
    pub k_30: f64,
    pub k_31: f64,
    pub k_41: f64,
    pub k_42: f64,
    pub alpha_th: f64,
    pub beta_th: f64,
    pub k_dio: f64,
    pub k_mct8: f64,
    pub g_d1: f64,
    pub g_t3: f64,
    pub g_mct8: f64,
    pub c_0: f64,
    pub c_1: f64,
    pub c_2: f64,
    pub c_3: f64,
    pub g_m_th: f64,
    pub k_m_th: f64,
    pub alpha_m_th: f64,
    pub beta_m_th: f64,
    pub g_t_co: f64,
}
