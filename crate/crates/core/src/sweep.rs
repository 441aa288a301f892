//! Parameter sweeps. Runs are independent and execute on a rayon pool when the
//! `parallel` feature is on; rows always come back in input order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::compute_stats;
use crate::config::{RunSetup, TrafficConfig};
use crate::engine::RunTrace;
use crate::error::{Error, Result};
use crate::simkernel::SimTime;

/// Upper bound on sweep worker threads.
pub const THREADS_ENV: &str = "COLA_SIM_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Deadline cap in microseconds.
    DeadlineCap,
    /// Expected traffic agents near the ego.
    Density,
    Seed,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deadline_cap" => Ok(SweepAxis::DeadlineCap),
            "density" => Ok(SweepAxis::Density),
            "seed" => Ok(SweepAxis::Seed),
            _ => Err(Error::Usage(format!(
                "invalid axis `{s}` (expected deadline_cap, density or seed)"
            ))),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::DeadlineCap => "deadline_cap",
            SweepAxis::Density => "density",
            SweepAxis::Seed => "seed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub mean_us: Option<u64>,
    pub p99_us: Option<u64>,
    pub worst_us: Option<u64>,
    pub violations: u64,
}

impl SweepRow {
    pub fn from_trace(value: f64, t: &RunTrace) -> SweepRow {
        let stats = compute_stats(&t.frame_latencies()).ok();
        SweepRow {
            value,
            mean_us: stats.map(|s| s.mean.as_micros()),
            p99_us: stats.map(|s| s.p99.as_micros()),
            worst_us: stats.map(|s| s.max.as_micros()),
            violations: t.violation_count(),
        }
    }
}

fn as_whole(axis: SweepAxis, v: f64) -> Result<u64> {
    if v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v < 9.007_199_254_740_992e15 {
        Ok(v as u64)
    } else {
        Err(Error::Usage(format!("{axis} values must be non-negative integers, got {v}")))
    }
}

/// The setup with `axis` set to `value`.
pub fn apply_axis(setup: &RunSetup, axis: SweepAxis, value: f64) -> Result<RunSetup> {
    let mut s = setup.clone();
    match axis {
        SweepAxis::DeadlineCap => {
            let cap = as_whole(axis, value)?;
            if cap == 0 {
                return Err(Error::Usage("deadline_cap values must be > 0".into()));
            }
            s.engine.mitigation.deadline_cap_us = SimTime::from_micros(cap);
        }
        SweepAxis::Density => {
            if !(value.is_finite() && value >= 0.0) {
                return Err(Error::Usage(format!("density values must be >= 0, got {value}")));
            }
            let road = s.traffic.and_then(|t| t.road);
            s.traffic = Some(TrafficConfig { density: value, road });
        }
        SweepAxis::Seed => s.seed = Some(as_whole(axis, value)?),
    }
    Ok(s)
}

/// Thread count from [`THREADS_ENV`], if set to a positive integer.
pub fn thread_limit() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

pub fn map_sequential<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    items.iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_parallel<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    match thread_limit() {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
            Err(_) => items.par_iter().map(&f).collect(),
        },
        None => items.par_iter().map(&f).collect(),
    }
}

/// Parallel when the `parallel` feature is on, otherwise sequential.
pub fn map_runs<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        map_parallel(items, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_sequential(items, f)
    }
}

fn check_values(values: &[f64]) -> Result<()> {
    if values.len() < 2 {
        return Err(Error::Usage(">= 2 values required".into()));
    }
    Ok(())
}

/// One run per value, returned in the order of `values`.
pub fn sweep_traces(setup: &RunSetup, axis: SweepAxis, values: &[f64]) -> Result<Vec<RunTrace>> {
    check_values(values)?;
    let setups = values
        .iter()
        .map(|&v| apply_axis(setup, axis, v))
        .collect::<Result<Vec<_>>>()?;
    map_runs(&setups, RunSetup::run).into_iter().collect()
}

pub fn sweep(setup: &RunSetup, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepRow>> {
    let traces = sweep_traces(setup, axis, values)?;
    Ok(values.iter().zip(&traces).map(|(&v, t)| SweepRow::from_trace(v, t)).collect())
}

pub const SWEEP_HEADER: &str = "value,mean_us,p99_us,worst_us,violations";

/// CSV table; runs without completed frames leave the latency cells empty.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let cell = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.value,
            cell(r.mean_us),
            cell(r.p99_us),
            cell(r.worst_us),
            r.violations
        ));
    }
    s
}

/// Parses a table written by [`sweep_csv`].
pub fn parse_sweep_csv(text: &str, origin: &std::path::Path) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(SWEEP_HEADER) {
        return Err(Error::parse(origin, "missing sweep header"));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let bad = || Error::parse(origin, format!("line {}: malformed row `{l}`", i + 2));
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let opt = |s: &str| -> Result<Option<u64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| bad())
                }
            };
            Ok(SweepRow {
                value: f[0].parse().map_err(|_| bad())?,
                mean_us: opt(f[1])?,
                p99_us: opt(f[2])?,
                worst_us: opt(f[3])?,
                violations: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
