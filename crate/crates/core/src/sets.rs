//! Box-shaped constraint sets for states, noise, measurement noise and outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{output, PatientState, MEASURED, OUTPUT_DIM};
use crate::params::Variant;

/// Product of closed intervals. Upper bounds may be `+inf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::LengthMismatch(lower.len(), upper.len()));
        }
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if l.is_nan() || u.is_nan() || l > u {
                return Err(Error::InvalidArgument(format!(
                    "interval {i} is empty: [{l}, {u}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn from_intervals(intervals: &[(f64, f64)]) -> Result<Self> {
        Self::new(
            intervals.iter().map(|iv| iv.0).collect(),
            intervals.iter().map(|iv| iv.1).collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn interval(&self, i: usize) -> (f64, f64) {
        (self.lower[i], self.upper[i])
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *v >= *l && *v <= *u)
    }

    /// Componentwise projection onto the box.
    pub fn project(&self, x: &mut [f64]) {
        for (v, (l, u)) in x.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.clamp(*l, *u);
        }
    }

    /// Signed distance outside the box per component (0 inside).
    pub fn violation(&self, i: usize, v: f64) -> f64 {
        if v < self.lower[i] {
            v - self.lower[i]
        } else if v > self.upper[i] {
            v - self.upper[i]
        } else {
            0.0
        }
    }

    pub fn max_violation(&self, x: &[f64]) -> f64 {
        x.iter()
            .enumerate()
            .map(|(i, v)| self.violation(i, *v).abs())
            .fold(0.0, f64::max)
    }

    /// Minkowski sum of two boxes of equal dimension.
    pub fn minkowski_sum(&self, other: &BoxSet) -> Result<BoxSet> {
        if self.dim() != other.dim() {
            return Err(Error::LengthMismatch(self.dim(), other.dim()));
        }
        BoxSet::new(
            self.lower.iter().zip(&other.lower).map(|(a, b)| a + b).collect(),
            self.upper.iter().zip(&other.upper).map(|(a, b)| a + b).collect(),
        )
    }

    /// Coordinate projection onto the listed indices.
    pub fn select(&self, indices: &[usize]) -> BoxSet {
        BoxSet {
            lower: indices.iter().map(|&i| self.lower[i]).collect(),
            upper: indices.iter().map(|&i| self.upper[i]).collect(),
        }
    }

    /// Cartesian product `self x other`.
    pub fn product(&self, other: &BoxSet) -> BoxSet {
        let mut lower = self.lower.clone();
        lower.extend_from_slice(&other.lower);
        let mut upper = self.upper.clone();
        upper.extend_from_slice(&other.upper);
        BoxSet { lower, upper }
    }
}

/// State, process-noise, measurement-noise and output sets of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSets {
    pub x: BoxSet,
    pub w: BoxSet,
    pub v: BoxSet,
    pub y: BoxSet,
}

impl ConstraintSets {
    /// `W x V`, the set of stacked noise vectors `omega = (w, v)`.
    pub fn omega(&self) -> BoxSet {
        self.w.product(&self.v)
    }
}

/// Measurement-noise bounds: +-10 % of the healthy steady-state output.
pub fn measurement_noise_set() -> BoxSet {
    let y = output(&PatientState::healthy_steady_state(), &[0.0; OUTPUT_DIM]).as_array();
    BoxSet::new(y.iter().map(|v| -0.1 * v).collect(), y.iter().map(|v| 0.1 * v).collect())
        .expect("nonempty")
}

pub fn constraint_sets(variant: Variant) -> ConstraintSets {
    let x = match variant {
        Variant::Hypo => BoxSet::from_intervals(&[
            (0.2, 0.6),
            (0.1, 1.4),
            (0.8, 3.1),
            (0.1, 1.3),
            (1.4, 6.0),
            (1.5, 6.3),
        ]),
        Variant::Hyper => BoxSet::from_intervals(&[
            (0.2, 17.0),
            (0.4, 5.0),
            (1.2, 11.0),
            (0.4, 4.5),
            (0.6, 3.5),
            (0.7, 3.5),
            (0.0, 5.0),
        ]),
    }
    .expect("static intervals");
    let w = match variant {
        Variant::Hypo => BoxSet::from_intervals(&[
            (-0.1, 0.1),
            (-0.1, 0.1),
            (-0.3, 0.3),
            (0.0, 0.0),
            (0.0, 1.0),
        ]),
        Variant::Hyper => {
            BoxSet::from_intervals(&[(-0.1, 0.1), (-0.1, 0.1), (-0.3, 0.3), (0.0, 1.0)])
        }
    }
    .expect("static intervals");
    let v = measurement_noise_set();
    let y = x.select(&MEASURED).minkowski_sum(&v).expect("3-dimensional");
    ConstraintSets { x, w, v, y }
}
