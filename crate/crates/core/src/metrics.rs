//! Memory saving, extra overhead and cost-benefit ratios between two runs.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::ids::JobId;
use crate::simulator::SimulationTrace;

/// Cost-benefit ratio; infinite when the schedule adds no time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cbr {
    Finite(f64),
    Infinite,
}

impl Cbr {
    pub fn value(self) -> f64 {
        match self {
            Cbr::Finite(v) => v,
            Cbr::Infinite => f64::INFINITY,
        }
    }
}

impl fmt::Display for Cbr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cbr::Finite(v) => write!(f, "{v:.6}"),
            Cbr::Infinite => f.write_str("infinite"),
        }
    }
}

impl Serialize for Cbr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Cbr::Finite(v) => s.serialize_f64(*v),
            Cbr::Infinite => s.serialize_str("infinite"),
        }
    }
}

impl<'de> Deserialize<'de> for Cbr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Cbr::Finite(v)),
            Raw::Text(t) if t == "infinite" => Ok(Cbr::Infinite),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("bad cbr {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub msr: f64,
    pub eor: f64,
    pub cbr: Cbr,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("traces cover different jobs: {vanilla:?} vs {experimental:?}")]
    MismatchedJobs {
        vanilla: Vec<JobId>,
        experimental: Vec<JobId>,
    },
    #[error("vanilla run has zero peak or zero time")]
    EmptyBaseline,
}

/// Ratios from raw peaks and time costs.
pub fn metrics_from(vmp: f64, emp: f64, vtc: f64, etc: f64) -> MetricsReport {
    let msr = (vmp - emp) / vmp;
    let eor = (etc - vtc) / vtc;
    MetricsReport {
        msr,
        eor,
        cbr: cbr(msr, eor),
    }
}

pub fn cbr(msr: f64, eor: f64) -> Cbr {
    if eor == 0.0 {
        Cbr::Infinite
    } else {
        Cbr::Finite(msr / eor)
    }
}

pub fn compute_metrics(vanilla: &SimulationTrace, experimental: &SimulationTrace) -> Result<MetricsReport, MetricsError> {
    let a: BTreeSet<JobId> = vanilla.iteration_times.keys().copied().collect();
    let b: BTreeSet<JobId> = experimental.iteration_times.keys().copied().collect();
    if a != b {
        return Err(MetricsError::MismatchedJobs {
            vanilla: a.into_iter().collect(),
            experimental: b.into_iter().collect(),
        });
    }
    let vtc = vanilla.time_cost();
    if vanilla.peak == 0 || vtc == 0.0 {
        return Err(MetricsError::EmptyBaseline);
    }
    Ok(metrics_from(
        vanilla.peak as f64,
        experimental.peak as f64,
        vtc,
        experimental.time_cost(),
    ))
}
