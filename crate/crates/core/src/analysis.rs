//! Statistics and reports over run traces.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{ReactionOutcome, RunTrace};
use crate::error::{Error, Result};
use crate::simkernel::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: u64,
    /// Floor of the arithmetic mean.
    pub mean: SimTime,
    pub min: SimTime,
    pub p50: SimTime,
    pub p95: SimTime,
    pub p99: SimTime,
    pub max: SimTime,
}

/// Nearest-rank percentile of sorted data: the `ceil(pct/100 * n)`-th value.
fn nearest_rank(sorted: &[u64], pct: u64) -> u64 {
    let n = sorted.len() as u64;
    let rank = (pct * n).div_ceil(100).max(1);
    sorted[(rank - 1) as usize]
}

pub fn compute_stats(samples: &[SimTime]) -> Result<LatencyStats> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    let mut v: Vec<u64> = samples.iter().map(|s| s.as_micros()).collect();
    v.sort_unstable();
    let sum: u128 = v.iter().map(|&x| x as u128).sum();
    let n = v.len() as u64;
    Ok(LatencyStats {
        count: n,
        mean: SimTime::from_micros((sum / n as u128) as u64),
        min: SimTime::from_micros(v[0]),
        p50: SimTime::from_micros(nearest_rank(&v, 50)),
        p95: SimTime::from_micros(nearest_rank(&v, 95)),
        p99: SimTime::from_micros(nearest_rank(&v, 99)),
        max: SimTime::from_micros(v[v.len() - 1]),
    })
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their average.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties. Zero when either
/// side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Mismatch(format!("{} x values but {} y values", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(Error::TooFewPoints { need: 3, got: xs.len() });
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Spearman rho between density and mean end-to-end latency.
pub fn density_correlation(runs: &[(f64, LatencyStats)]) -> Result<f64> {
    let xs: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let ys: Vec<f64> = runs.iter().map(|r| r.1.mean.as_micros() as f64).collect();
    spearman(&xs, &ys)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyReport {
    /// Safety ticks whose worst status was a violation.
    pub violations: u64,
    /// Distinct agents the ego collided with.
    pub collisions: u64,
    /// Hazards with no responsive decision before the end of the run.
    pub no_reaction: u64,
    pub min_gap_m: Option<f64>,
}

pub fn safety_report(trace: &RunTrace) -> SafetyReport {
    SafetyReport {
        violations: trace.violation_count(),
        collisions: trace.summary.collisions.len() as u64,
        no_reaction: trace.reactions.iter().filter(|r| r.reaction.is_none()).count() as u64,
        min_gap_m: trace.summary.min_gap_m,
    }
}

/// Component-wise view of the reaction records of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReactionSummary {
    pub reaction: LatencyStats,
    pub t_sensor: LatencyStats,
    pub t_module: LatencyStats,
    pub t_bubble: LatencyStats,
}

pub fn reaction_summary(trace: &RunTrace) -> Option<ReactionSummary> {
    let recs: Vec<_> = trace.reaction_records().collect();
    let stats = |f: &dyn Fn(&&crate::engine::ReactionRecord) -> SimTime| {
        compute_stats(&recs.iter().map(f).collect::<Vec<_>>()).ok()
    };
    Some(ReactionSummary {
        reaction: stats(&|r| r.reaction_time())?,
        t_sensor: stats(&|r| r.t_sensor)?,
        t_module: stats(&|r| r.t_module)?,
        t_bubble: stats(&|r| r.t_bubble)?,
    })
}

pub const REPORT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format: u32,
    pub scenario: String,
    pub scenario_hash: String,
    pub seed: u64,
    pub label: String,
    pub frames: Option<LatencyStats>,
    /// Latency of objects within the criticality radius.
    pub in_radius_objects: Option<LatencyStats>,
    pub reaction_summary: Option<ReactionSummary>,
    pub reactions: Vec<ReactionOutcome>,
    pub safety: SafetyReport,
    pub busy_fraction: f64,
    pub budget_violations: u64,
    pub fastpath_jobs: u64,
    pub proactive_saved_us: SimTime,
    pub dropped_messages: u64,
}

pub fn run_report(trace: &RunTrace) -> RunReport {
    let in_radius: Vec<SimTime> = trace.objects.iter().filter(|o| o.in_radius).map(|o| o.latency).collect();
    RunReport {
        format: REPORT_FORMAT,
        scenario: trace.header.scenario.clone(),
        scenario_hash: trace.header.scenario_hash.clone(),
        seed: trace.header.seed,
        label: trace.header.label.clone(),
        frames: compute_stats(&trace.frame_latencies()).ok(),
        in_radius_objects: compute_stats(&in_radius).ok(),
        reaction_summary: reaction_summary(trace),
        reactions: trace.reactions.clone(),
        safety: safety_report(trace),
        busy_fraction: trace.summary.busy_fraction(),
        budget_violations: trace.summary.budget_violations(),
        fastpath_jobs: trace.summary.fastpath_jobs,
        proactive_saved_us: trace.summary.proactive_saved_us,
        dropped_messages: trace.summary.dropped_messages,
    }
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunReport> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDelta {
    pub node: String,
    pub baseline_mean_us: u64,
    pub treatment_mean_us: u64,
    pub delta_us: i64,
}

/// Treatment minus baseline. Latency deltas use only frames both runs completed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub scenario: String,
    pub scenario_hash: String,
    pub seed: u64,
    pub baseline_label: String,
    pub treatment_label: String,
    pub frames_compared: u64,
    pub mean_delta_us: i64,
    pub p99_delta_us: i64,
    pub worst_delta_us: i64,
    pub violations_delta: i64,
    pub collisions_delta: i64,
    pub no_reaction_delta: i64,
    pub per_node: Vec<NodeDelta>,
}

fn delta(b: u64, t: u64) -> i64 {
    t as i64 - b as i64
}

pub fn compare_runs(baseline: &RunTrace, treatment: &RunTrace) -> Result<Comparison> {
    let (hb, ht) = (&baseline.header, &treatment.header);
    if hb.scenario_hash != ht.scenario_hash {
        return Err(Error::Mismatch(format!(
            "scenario hash {} vs {}",
            hb.scenario_hash, ht.scenario_hash
        )));
    }
    if hb.seed != ht.seed {
        return Err(Error::Mismatch(format!("seed {} vs {}", hb.seed, ht.seed)));
    }
    let index = |t: &RunTrace| -> BTreeMap<(String, u64), SimTime> {
        t.frames.iter().map(|f| ((f.sensor.clone(), f.frame), f.e2e)).collect()
    };
    let (fb, ft) = (index(baseline), index(treatment));
    let common: BTreeSet<(String, u64)> = fb.keys().filter(|k| ft.contains_key(*k)).cloned().collect();
    let pick = |m: &BTreeMap<(String, u64), SimTime>| -> Vec<SimTime> { common.iter().map(|k| m[k]).collect() };
    let (sb, st) = (compute_stats(&pick(&fb)).ok(), compute_stats(&pick(&ft)).ok());
    let stat_delta = |f: fn(&LatencyStats) -> SimTime| match (&sb, &st) {
        (Some(b), Some(t)) => delta(f(b).as_micros(), f(t).as_micros()),
        _ => 0,
    };

    let node_means = |t: &RunTrace| -> BTreeMap<String, u64> {
        let mut acc: BTreeMap<String, (u128, u64)> = BTreeMap::new();
        for s in &t.spans {
            if s.kind == crate::engine::JobKind::Precompute || !common.contains(&(s.sensor.clone(), s.frame)) {
                continue;
            }
            let e = acc.entry(s.node.clone()).or_default();
            e.0 += (s.end - s.start).as_micros() as u128;
            e.1 += 1;
        }
        acc.into_iter().map(|(k, (sum, n))| (k, (sum / n as u128) as u64)).collect()
    };
    let (nb, nt) = (node_means(baseline), node_means(treatment));
    let names: BTreeSet<&String> = nb.keys().chain(nt.keys()).collect();
    let per_node = names
        .into_iter()
        .map(|n| {
            let b = nb.get(n).copied().unwrap_or(0);
            let t = nt.get(n).copied().unwrap_or(0);
            NodeDelta {
                node: n.clone(),
                baseline_mean_us: b,
                treatment_mean_us: t,
                delta_us: delta(b, t),
            }
        })
        .collect();

    let (rb, rt) = (safety_report(baseline), safety_report(treatment));
    Ok(Comparison {
        scenario: hb.scenario.clone(),
        scenario_hash: hb.scenario_hash.clone(),
        seed: hb.seed,
        baseline_label: hb.label.clone(),
        treatment_label: ht.label.clone(),
        frames_compared: common.len() as u64,
        mean_delta_us: stat_delta(|s| s.mean),
        p99_delta_us: stat_delta(|s| s.p99),
        worst_delta_us: stat_delta(|s| s.max),
        violations_delta: delta(rb.violations, rt.violations),
        collisions_delta: delta(rb.collisions, rt.collisions),
        no_reaction_delta: delta(rb.no_reaction, rt.no_reaction),
        per_node,
    })
}

impl Comparison {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("comparison serializes");
        s.push('\n');
        s
    }
}

/// Empirical CDF: one row per distinct value with the fraction of samples at
/// or below it.
pub fn cdf_rows(samples: &[SimTime]) -> Result<Vec<(u64, f64)>> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    let mut v: Vec<u64> = samples.iter().map(|s| s.as_micros()).collect();
    v.sort_unstable();
    let n = v.len() as f64;
    let mut rows: Vec<(u64, f64)> = Vec::new();
    for (i, &x) in v.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match rows.last_mut() {
            Some(last) if last.0 == x => last.1 = frac,
            _ => rows.push((x, frac)),
        }
    }
    Ok(rows)
}

pub const CDF_HEADER: &str = "latency_us,cumulative_fraction";

pub fn write_cdf<W: Write>(samples: &[SimTime], mut w: W) -> Result<()> {
    let rows = cdf_rows(samples)?;
    let io = |e| Error::io(Path::new("<cdf>"), e);
    writeln!(w, "{CDF_HEADER}").map_err(io)?;
    for (x, f) in rows {
        writeln!(w, "{x},{f:.6}").map_err(io)?;
    }
    Ok(())
}

pub fn export_cdf(samples: &[SimTime], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_cdf(samples, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Parses a CDF file written by [`export_cdf`].
pub fn read_cdf(text: &str, origin: &Path) -> Result<Vec<(u64, f64)>> {
    let mut lines = text.lines();
    if lines.next() != Some(CDF_HEADER) {
        return Err(Error::parse(origin, "missing CDF header"));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let bad = || Error::parse(origin, format!("line {}: malformed row `{l}`", i + 2));
            let (x, f) = l.split_once(',').ok_or_else(bad)?;
            Ok((x.parse().map_err(|_| bad())?, f.parse().map_err(|_| bad())?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn us(v: &[u64]) -> Vec<SimTime> {
        v.iter().map(|&x| SimTime::from_micros(x)).collect()
    }

    /// Smallest value with at least pct% of the samples at or below it.
    fn oracle_percentile(v: &[u64], pct: u64) -> u64 {
        let mut s = v.to_vec();
        s.sort();
        let n = s.len() as u64;
        *s.iter()
            .find(|&&x| 100 * s.iter().filter(|&&y| y <= x).count() as u64 >= pct * n)
            .unwrap()
    }

    #[test]
    fn nearest_rank_examples() {
        let s = compute_stats(&us(&(1..=100).collect::<Vec<_>>())).unwrap();
        assert_eq!((s.p99.as_micros(), s.max.as_micros()), (99, 100));
        let s = compute_stats(&us(&[7, 7, 7])).unwrap();
        assert!(s.mean == s.p50 && s.p50 == s.p99 && s.p99 == s.max);
        assert_eq!(compute_stats(&us(&[4, 1, 3, 2])).unwrap().p50.as_micros(), 2);
        assert!(matches!(compute_stats(&[]), Err(Error::EmptySamples)));
    }

    #[test]
    fn spearman_examples() {
        let xs = [0.0, 2.0, 4.0, 6.0];
        assert_eq!(spearman(&xs, &[1.0, 5.0, 9.0, 20.0]).unwrap(), 1.0);
        assert_eq!(spearman(&xs, &[20.0, 9.0, 5.0, 1.0]).unwrap(), -1.0);
        let rho = spearman(&[1.0, 2.0, 3.0], &[10.0, 30.0, 20.0]).unwrap();
        assert!((rho - 0.5).abs() < 1e-12);
        assert!(matches!(spearman(&[1.0, 2.0], &[1.0, 2.0]), Err(Error::TooFewPoints { need: 3, got: 2 })));
    }

    #[test]
    fn spearman_ties_use_average_ranks() {
        assert_eq!(ranks(&[5.0, 1.0, 5.0, 3.0]), [3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn cdf_examples() {
        let mut out = Vec::new();
        write_cdf(&us(&[30, 10, 20]), &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "latency_us,cumulative_fraction\n10,0.333333\n20,0.666667\n30,1.000000\n"
        );
        assert_eq!(cdf_rows(&us(&[5])).unwrap(), [(5, 1.0)]);
        assert_eq!(cdf_rows(&us(&[1, 2, 2, 3])).unwrap(), [(1, 0.25), (2, 0.75), (3, 1.0)]);
    }

    proptest! {
        #[test]
        fn stats_match_oracle(v in prop::collection::vec(0u64..1_000_000, 1..200)) {
            let s = compute_stats(&us(&v)).unwrap();
            prop_assert_eq!(s.p50.as_micros(), oracle_percentile(&v, 50));
            prop_assert_eq!(s.p95.as_micros(), oracle_percentile(&v, 95));
            prop_assert_eq!(s.p99.as_micros(), oracle_percentile(&v, 99));
            prop_assert_eq!(s.max.as_micros(), *v.iter().max().unwrap());
            prop_assert_eq!(s.mean.as_micros(), v.iter().sum::<u64>() / v.len() as u64);
            prop_assert!(s.min <= s.mean && s.mean <= s.max);
            prop_assert!(s.p50 <= s.p95 && s.p95 <= s.p99 && s.p99 <= s.max);
        }

        #[test]
        fn cdf_is_monotone(v in prop::collection::vec(0u64..500, 1..100)) {
            let rows = cdf_rows(&us(&v)).unwrap();
            for w in rows.windows(2) {
                prop_assert!(w[0].0 < w[1].0 && w[0].1 <= w[1].1);
            }
            prop_assert_eq!(rows.last().unwrap().1, 1.0);
        }

        #[test]
        fn spearman_is_bounded(v in prop::collection::vec((0.0f64..10.0, 0.0f64..10.0), 3..30)) {
            let (xs, ys): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let rho = spearman(&xs, &ys).unwrap();
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&rho));
        }
    }
}
