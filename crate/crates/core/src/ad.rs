//! Forward-mode dual numbers, used for exact Jacobians of the right-hand side.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar type the dynamics can be evaluated with.
pub trait Real:
    Copy
    + From<f64>
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn value(self) -> f64;
    fn exp(self) -> Self;
    /// `self^e`, with the derivative taken as zero at `self <= 0`.
    fn powf(self, e: f64) -> Self;
    fn max(self, floor: f64) -> Self;
}

impl Real for f64 {
    fn value(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn powf(self, e: f64) -> Self {
        f64::powf(self, e)
    }
    fn max(self, floor: f64) -> Self {
        f64::max(self, floor)
    }
}

/// `v + d * eps` with `eps^2 = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Dual {
    pub fn new(v: f64, d: f64) -> Self {
        Self { v, d }
    }

    pub fn variable(v: f64) -> Self {
        Self { v, d: 1.0 }
    }
}

impl From<f64> for Dual {
    fn from(v: f64) -> Self {
        Self { v, d: 0.0 }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.v + o.v, self.d + o.d)
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.v - o.v, self.d - o.d)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.v * o.v, self.d * o.v + self.v * o.d)
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let q = self.v / o.v;
        Dual::new(q, (self.d - q * o.d) / o.v)
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.v, -self.d)
    }
}

impl Add<f64> for Dual {
    type Output = Dual;
    fn add(self, o: f64) -> Dual {
        Dual::new(self.v + o, self.d)
    }
}

impl Sub<f64> for Dual {
    type Output = Dual;
    fn sub(self, o: f64) -> Dual {
        Dual::new(self.v - o, self.d)
    }
}

impl Mul<f64> for Dual {
    type Output = Dual;
    fn mul(self, o: f64) -> Dual {
        Dual::new(self.v * o, self.d * o)
    }
}

impl Div<f64> for Dual {
    type Output = Dual;
    fn div(self, o: f64) -> Dual {
        Dual::new(self.v / o, self.d / o)
    }
}

impl Real for Dual {
    fn value(self) -> f64 {
        self.v
    }

    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual::new(e, e * self.d)
    }

    fn powf(self, e: f64) -> Self {
        let p = self.v.powf(e);
        let d = if self.v > 0.0 { e * p / self.v * self.d } else { 0.0 };
        Dual::new(p, d)
    }

    fn max(self, floor: f64) -> Self {
        if self.v >= floor {
            self
        } else {
            Dual::from(floor)
        }
    }
}
