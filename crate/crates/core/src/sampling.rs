//! Sampling-interval sequences and the sampling sets they generate.
//!
//! Intervals are counted in discretization steps of 8 hours. Indices start
//! at 1.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sampling scheme: every step (a), roughly weekly (b), biweekly (c) or monthly (d).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    A,
    B,
    C,
    D,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::A, Scheme::B, Scheme::C, Scheme::D];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::A => "a",
            Scheme::B => "b",
            Scheme::C => "c",
            Scheme::D => "d",
        }
    }

    /// Upper bound on the intervals of the scheme.
    pub fn max_interval(self) -> usize {
        match self {
            Scheme::A => 1,
            Scheme::B => 30,
            Scheme::C => 57,
            Scheme::D => 114,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Scheme::A),
            "b" => Ok(Scheme::B),
            "c" => Ok(Scheme::C),
            "d" => Ok(Scheme::D),
            other => Err(Error::InvalidArgument(format!("unknown sampling scheme `{other}`"))),
        }
    }
}

fn check_index(j: usize) -> Result<()> {
    if j < 1 {
        return Err(Error::InvalidArgument("sequence indices start at 1".into()));
    }
    Ok(())
}

/// Periodic base sequence 8, 7, 8, 9, 10, 9, 8, 7, ...
pub fn delta0(j: usize) -> Result<usize> {
    check_index(j)?;
    let r = (j as i64 - 2).rem_euclid(6);
    Ok((10 - (r - 3).abs()) as usize)
}

/// Interval `delta_i` of the given scheme.
pub fn delta(scheme: Scheme, i: usize) -> Result<usize> {
    check_index(i)?;
    if i == 1 {
        return Ok(0);
    }
    Ok(match scheme {
        Scheme::A => 1,
        Scheme::B => 3 * delta0(i)?,
        Scheme::C => delta(Scheme::B, 2 * (i - 1))? + delta(Scheme::B, 2 * i - 1)?,
        Scheme::D => delta(Scheme::C, 2 * (i - 1))? + delta(Scheme::C, 2 * i - 1)?,
    })
}

/// Finite realization of the sampling set `K_i` up to a horizon.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingSet {
    pub scheme: Scheme,
    pub start: usize,
    pub horizon: usize,
    instants: Vec<usize>,
}

impl SamplingSet {
    pub fn instants(&self) -> &[usize] {
        &self.instants
    }

    pub fn contains(&self, k: usize) -> bool {
        self.instants.binary_search(&k).is_ok()
    }

    /// Membership mask over steps `0..=horizon`.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.horizon + 1];
        for &k in &self.instants {
            m[k] = true;
        }
        m
    }

    pub fn len(&self) -> usize {
        self.instants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instants.is_empty()
    }

    /// One-column CSV of step indices.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["step_index"])?;
        for k in &self.instants {
            wtr.write_record([k.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Partial sums `sum_{k=i}^{j+i-1} delta_k` for `j >= 1` that do not exceed `horizon`.
pub fn realize(scheme: Scheme, start: usize, horizon: usize) -> Result<SamplingSet> {
    check_index(start)?;
    let mut instants = Vec::new();
    let mut sum = 0;
    let mut k = start;
    loop {
        sum += delta(scheme, k)?;
        if sum > horizon {
            break;
        }
        if instants.last() != Some(&sum) {
            instants.push(sum);
        }
        k += 1;
    }
    Ok(SamplingSet {
        scheme,
        start,
        horizon,
        instants,
    })
}
