//! Timing sweeps over (n, B): exact versus low-rank attention.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{
    exact_attention_blocked, feature_dim, lowrank_attention_with, required_degree, AptiInstance, FeatureMap, DEFAULT_BLOCK,
    DEFAULT_MAX_FEATURE_DIM, DEFAULT_ORACLE_CUTOFF,
};
use crate::error::{Error, Result};
use crate::seq::SeqMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum DRule {
    Fixed { d: usize },
    /// `d = max(1, round(c·ln n))`.
    CLogN { c: f64 },
}

impl DRule {
    pub fn dim(&self, n: usize) -> usize {
        match *self {
            DRule::Fixed { d } => d,
            DRule::CLogN { c } => ((c * (n as f64).ln()).round() as usize).max(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub n_list: Vec<usize>,
    pub b_list: Vec<f64>,
    pub d_rule: DRule,
    pub delta_f: f64,
    pub seeds: Vec<u64>,
    pub reps: usize,
    pub oracle_cutoff: usize,
    pub max_feature_dim: u128,
    pub run_exact: bool,
    pub run_lowrank: bool,
    pub block: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n_list: vec![256, 512, 1024, 2048],
            b_list: vec![0.5],
            d_rule: DRule::Fixed { d: 8 },
            delta_f: 1e-3,
            seeds: vec![0],
            reps: 5,
            oracle_cutoff: DEFAULT_ORACLE_CUTOFF,
            max_feature_dim: DEFAULT_MAX_FEATURE_DIM,
            run_exact: true,
            run_lowrank: true,
            block: DEFAULT_BLOCK,
        }
    }
}

impl BenchConfig {
    /// The B sweep at fixed n used for the phase diagram.
    pub fn phase_preset() -> Self {
        BenchConfig { n_list: vec![2048], b_list: vec![0.25, 0.5, 1.0, 1.5, 2.0, 3.0], ..Default::default() }
    }

    fn validate(&self) -> Result<()> {
        if self.n_list.is_empty() || self.b_list.is_empty() || self.seeds.is_empty() {
            return Err(Error::Domain("n_list, b_list and seeds must be nonempty".into()));
        }
        if self.reps == 0 || !(self.delta_f > 0.0) || self.b_list.iter().any(|b| !(*b >= 0.0)) {
            return Err(Error::Domain("need reps ≥ 1, δ_F > 0 and B ≥ 0".into()));
        }
        if !self.run_exact && !self.run_lowrank {
            return Err(Error::Domain("nothing to run: both methods disabled".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Exact,
    LowRank,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Exact => "exact",
            Method::LowRank => "lowrank",
        }
    }
}

/// One benchmark cell. Field order is the CSV column order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRecord {
    pub n: usize,
    pub d: usize,
    #[serde(rename = "B")]
    pub b: f64,
    pub method: Method,
    pub g: Option<usize>,
    pub m: Option<u64>,
    pub wall_time_s: Option<f64>,
    pub max_err: Option<f64>,
    pub certified: bool,
    pub seed: u64,
}

pub const CSV_HEADER: [&str; 9] = ["n", "d", "B", "method", "g", "m", "wall_time_s", "max_err", "certified"];

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Runs `f` `reps` times and returns the last output with the median time.
fn timed<T>(reps: usize, mut f: impl FnMut() -> Result<T>) -> Result<(T, f64)> {
    let mut times = Vec::with_capacity(reps);
    let mut last = None;
    for _ in 0..reps {
        let start = Instant::now();
        let out = f()?;
        times.push(start.elapsed().as_secs_f64());
        last = Some(out);
    }
    Ok((last.expect("reps ≥ 1"), median(times)))
}

fn bench_cell(cfg: &BenchConfig, n: usize, b: f64, seed: u64, out: &mut Vec<BenchRecord>) -> Result<()> {
    let d = cfg.d_rule.dim(n);
    let inst = AptiInstance::random(n, d, b, cfg.delta_f, seed)?;
    let record = |method, g, m, wall_time_s, max_err, certified| BenchRecord {
        n,
        d,
        b,
        method,
        g,
        m,
        wall_time_s,
        max_err,
        certified,
        seed,
    };
    let oracle_wanted = cfg.run_lowrank && n <= cfg.oracle_cutoff;
    let mut oracle: Option<SeqMatrix> = None;
    if cfg.run_exact {
        let (z, t) = timed(cfg.reps, || exact_attention_blocked(&inst.q, &inst.k, &inst.v, cfg.block))?;
        out.push(record(Method::Exact, None, None, Some(t), None, true));
        oracle = Some(z);
    } else if oracle_wanted {
        oracle = Some(exact_attention_blocked(&inst.q, &inst.k, &inst.v, cfg.block)?);
    }
    if cfg.run_lowrank {
        let g = required_degree(inst.inner_product_bound(), cfg.delta_f / 4.0)?;
        let m = feature_dim(d, g);
        let m_field = Some(u64::try_from(m).unwrap_or(u64::MAX));
        if m > cfg.max_feature_dim {
            out.push(record(Method::LowRank, Some(g), m_field, None, None, false));
            return Ok(());
        }
        let map = FeatureMap::new(d, g, cfg.max_feature_dim)?;
        match timed(cfg.reps, || lowrank_attention_with(&map, &inst.q, &inst.k, &inst.v)) {
            Ok((z, t)) => {
                let err = oracle.as_ref().filter(|_| n <= cfg.oracle_cutoff).map(|o| z.max_abs_diff(o));
                let certified = err.is_some_and(|e| e <= cfg.delta_f);
                out.push(record(Method::LowRank, Some(g), m_field, Some(t), err, certified));
            }
            Err(Error::DegreeTooSmall { .. }) => {
                out.push(record(Method::LowRank, Some(g), m_field, None, None, false));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

/// Every (n, B, seed) cell, sequentially so timings do not interfere.
/// Records come out sorted by (n, B, seed, method).
pub fn phase_bench(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &n in &cfg.n_list {
        for &b in &cfg.b_list {
            for &seed in &cfg.seeds {
                bench_cell(cfg, n, b, seed, &mut out)?;
            }
        }
    }
    out.sort_by(|x, y| x.n.cmp(&y.n).then(x.b.total_cmp(&y.b)).then(x.seed.cmp(&y.seed)).then(x.method.cmp(&y.method)));
    Ok(out)
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(String::new, T::to_string)
}

pub fn write_csv<W: Write>(records: &[BenchRecord], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::Domain(format!("csv: {e}"));
    wr.write_record(CSV_HEADER).map_err(io)?;
    for r in records {
        wr.write_record([
            r.n.to_string(),
            r.d.to_string(),
            r.b.to_string(),
            r.method.as_str().to_string(),
            opt(&r.g),
            opt(&r.m),
            opt(&r.wall_time_s),
            opt(&r.max_err),
            r.certified.to_string(),
        ])
        .map_err(io)?;
    }
    wr.flush().map_err(|e| Error::Domain(format!("csv: {e}")))?;
    Ok(())
}

pub fn write_jsonl<W: Write>(records: &[BenchRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::Domain(format!("jsonl: {e}")))?;
    }
    Ok(())
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points.iter().filter(|(x, y)| *x > 0.0 && *y > 0.0).map(|(x, y)| (x.ln(), y.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn mean_time(records: &[BenchRecord], n: usize, b: f64, method: Method) -> Option<f64> {
    let ts: Vec<f64> = records
        .iter()
        .filter(|r| r.n == n && r.b == b && r.method == method)
        .filter_map(|r| r.wall_time_s)
        .collect();
    (!ts.is_empty()).then(|| ts.iter().sum::<f64>() / ts.len() as f64)
}

/// Wall-time scaling exponent over n for one method at one B.
pub fn scaling_slope(records: &[BenchRecord], method: Method, b: f64) -> Option<f64> {
    let mut ns: Vec<usize> = records.iter().filter(|r| r.method == method && r.b == b).map(|r| r.n).collect();
    ns.sort_unstable();
    ns.dedup();
    let pts: Vec<(f64, f64)> = ns.iter().filter_map(|&n| mean_time(records, n, b, method).map(|t| (n as f64, t))).collect();
    loglog_slope(&pts)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhaseRow {
    #[serde(rename = "B")]
    pub b: f64,
    pub g: Option<usize>,
    pub m: Option<u64>,
    pub exact_time_s: Option<f64>,
    pub lowrank_time_s: Option<f64>,
    pub lowrank_feasible: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhaseSummary {
    pub n: usize,
    pub sqrt_log_n: f64,
    pub rows: Vec<PhaseRow>,
    pub m_nondecreasing: bool,
    /// Smallest B whose measured low-rank time exceeds the exact time.
    pub crossover_b: Option<f64>,
    /// Smallest B whose low-rank cell exceeds the feature budget.
    pub first_infeasible_b: Option<f64>,
}

pub fn phase_summary(records: &[BenchRecord], n: usize) -> PhaseSummary {
    let mut bs: Vec<f64> = records.iter().filter(|r| r.n == n).map(|r| r.b).collect();
    bs.sort_by(f64::total_cmp);
    bs.dedup();
    let rows: Vec<PhaseRow> = bs
        .iter()
        .map(|&b| {
            let low = records.iter().find(|r| r.n == n && r.b == b && r.method == Method::LowRank);
            PhaseRow {
                b,
                g: low.and_then(|r| r.g),
                m: low.and_then(|r| r.m),
                exact_time_s: mean_time(records, n, b, Method::Exact),
                lowrank_time_s: mean_time(records, n, b, Method::LowRank),
                lowrank_feasible: low.is_some_and(|r| r.wall_time_s.is_some()),
            }
        })
        .collect();
    let ms: Vec<u64> = rows.iter().filter_map(|r| r.m).collect();
    let crossover_b = rows
        .iter()
        .find(|r| matches!((r.lowrank_time_s, r.exact_time_s), (Some(l), Some(e)) if l > e))
        .map(|r| r.b);
    PhaseSummary {
        n,
        sqrt_log_n: (n as f64).ln().sqrt(),
        m_nondecreasing: ms.windows(2).all(|w| w[0] <= w[1]),
        crossover_b,
        first_infeasible_b: rows.iter().find(|r| r.m.is_some() && !r.lowrank_feasible).map(|r| r.b),
        rows,
    }
}
