//! Softmax, the Boltzmann operator `Boltz(z) = zᵀ softmax(z)` and its
//! partition/entropy decomposition.
//!
//! Everything runs through max-subtracted log-sum-exp. Differences of Boltz
//! values are computed by [`boltz_difference`], which cancels shared entries
//! symbolically and keeps the remainder in log space; the separation bounds
//! tested here are routinely smaller than one ulp of the Boltz values.

use serde::Serialize;

use crate::error::{Error, Result};

/// Bounds below this are reported as sub-precision instead of pass/fail.
pub const SUB_PRECISION_FLOOR: f64 = 1e-300;

/// A nonempty vector of finite logits.
#[derive(Clone, Debug, PartialEq)]
pub struct RealVec(Vec<f64>);

impl RealVec {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Domain("empty vector".into()));
        }
        if let Some(i) = entries.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("entry {i} is not finite")));
        }
        Ok(RealVec(entries))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<&[f64]> for RealVec {
    type Error = Error;
    fn try_from(v: &[f64]) -> Result<Self> {
        RealVec::new(v.to_vec())
    }
}

/// Softmax probabilities. Entries sum to one; an entry can underflow to zero
/// when its logit trails the maximum by more than ~745.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftDist(Vec<f64>);

impl SoftDist {
    pub fn probs(&self) -> &[f64] {
        &self.0
    }
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn probs(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn softmax(z: &RealVec) -> SoftDist {
    SoftDist(probs(&z.0))
}

fn boltz_raw(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let p = probs(z);
    // Accumulate offsets from the max so the dominant term carries no rounding.
    m + z.iter().zip(&p).map(|(v, pi)| (v - m) * pi).sum::<f64>()
}

pub fn boltz(z: &RealVec) -> f64 {
    boltz_raw(&z.0)
}

/// `(ln 𝒵(z), 𝒮(softmax z))`.
pub fn partition_entropy(z: &RealVec) -> (f64, f64) {
    let lz = log_sum_exp(&z.0);
    let p = probs(&z.0);
    // ln p_i = z_i - ln 𝒵 never underflows, so 0·ln 0 terms vanish cleanly.
    let s = -z.0.iter().zip(&p).map(|(v, pi)| pi * (v - lz)).sum::<f64>();
    (lz, s.max(0.0))
}

/// Analytic gradient `p_i (1 + ln p_i + 𝒮)`.
pub fn boltz_grad(z: &RealVec) -> RealVec {
    let (lz, s) = partition_entropy(z);
    let p = probs(&z.0);
    RealVec(z.0.iter().zip(&p).map(|(v, pi)| pi * (1.0 + (v - lz) + s)).collect())
}

/// `∂²Boltz/∂z_i² = p_i[(1 − 2p_i)(z_i − ln𝒵 + 𝒮 + 1) + 1]`.
pub fn boltz_second_deriv(z: &RealVec, i: usize) -> Result<f64> {
    if i >= z.len() {
        return Err(Error::Domain(format!("index {i} out of range for length {}", z.len())));
    }
    let (lz, s) = partition_entropy(z);
    let p = probs(&z.0);
    let pi = p[i];
    Ok(pi * ((1.0 - 2.0 * pi) * (z.0[i] - lz + s + 1.0) + 1.0))
}

/// A signed real stored as `sign · exp(ln_abs)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogAbs {
    pub sign: i8,
    pub ln_abs: f64,
}

impl LogAbs {
    pub const ZERO: LogAbs = LogAbs { sign: 0, ln_abs: f64::NEG_INFINITY };

    pub fn value(&self) -> f64 {
        self.sign as f64 * self.ln_abs.exp()
    }
}

fn signed_lse(terms: &[(f64, f64)]) -> LogAbs {
    let m = terms.iter().map(|t| t.1).fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return LogAbs::ZERO;
    }
    let s: f64 = terms.iter().map(|(sg, l)| sg * (l - m).exp()).sum();
    if s == 0.0 {
        return LogAbs::ZERO;
    }
    LogAbs { sign: s.signum() as i8, ln_abs: m + s.abs().ln() }
}

fn sorted_desc(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// `Boltz(a) − Boltz(b)` without catastrophic cancellation.
///
/// Entries shared by both multisets are factored out; with `C` the shared
/// part and `A`, `B` the leftovers, the numerator is
/// `𝒵_C[Σ_A (x−μ_C)eˣ − Σ_B (y−μ_C)eʸ] + Σ_{x∈A,y∈B}(x−y)e^{x+y}`
/// over `𝒵_{C∪A}·𝒵_{C∪B}`, evaluated term by term in log space.
pub fn boltz_difference(a: &RealVec, b: &RealVec) -> LogAbs {
    let (sa, sb) = (sorted_desc(&a.0), sorted_desc(&b.0));
    let (mut common, mut only_a, mut only_b) = (Vec::new(), Vec::new(), Vec::new());
    let (mut i, mut j) = (0, 0);
    while i < sa.len() || j < sb.len() {
        if j == sb.len() || (i < sa.len() && sa[i] > sb[j]) {
            only_a.push(sa[i]);
            i += 1;
        } else if i == sa.len() || sb[j] > sa[i] {
            only_b.push(sb[j]);
            j += 1;
        } else {
            common.push(sa[i]);
            i += 1;
            j += 1;
        }
    }
    if only_a.is_empty() && only_b.is_empty() {
        return LogAbs::ZERO;
    }

    let mut terms = Vec::with_capacity(only_a.len() * only_b.len() + only_a.len() + only_b.len());
    if !common.is_empty() {
        let ln_zc = log_sum_exp(&common);
        let mu = boltz_raw(&common);
        for &x in &only_a {
            if x != mu {
                terms.push(((x - mu).signum(), ln_zc + (x - mu).abs().ln() + x));
            }
        }
        for &y in &only_b {
            if y != mu {
                terms.push((-(y - mu).signum(), ln_zc + (y - mu).abs().ln() + y));
            }
        }
    }
    for &x in &only_a {
        for &y in &only_b {
            if x != y {
                terms.push(((x - y).signum(), (x - y).abs().ln() + x + y));
            }
        }
    }
    let num = signed_lse(&terms);
    if num.sign == 0 {
        return LogAbs::ZERO;
    }
    let with_a: Vec<f64> = common.iter().chain(&only_a).copied().collect();
    let with_b: Vec<f64> = common.iter().chain(&only_b).copied().collect();
    LogAbs { sign: num.sign, ln_abs: num.ln_abs - log_sum_exp(&with_a) - log_sum_exp(&with_b) }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    /// The bound underflows below [`SUB_PRECISION_FLOOR`]; vacuously satisfied.
    SubPrecision,
}

#[derive(Clone, Debug, Serialize)]
pub struct SeparationReport {
    pub pass: bool,
    pub status: CheckStatus,
    pub n: usize,
    pub gamma: f64,
    pub pairs: usize,
    pub max_abs_boltz: f64,
    /// Smallest |Boltz(z⁽ⁱ⁾) − Boltz(z⁽ʲ⁾)| (may underflow to 0; see `min_log_gap`).
    pub min_gap: f64,
    pub min_log_gap: f64,
    /// `ln²(n)·e^(−2γ)` (may underflow to 0; see `log_bound`).
    pub bound: f64,
    pub log_bound: f64,
    pub worst_pair: Option<(usize, usize)>,
}

/// Evaluates both sides of the distance-preservation claim without checking
/// its preconditions.
pub fn measure_boltz_separation(vectors: &[RealVec], gamma: f64) -> SeparationReport {
    let n = vectors.first().map_or(0, |v| v.len());
    let log_bound = 2.0 * (n as f64).ln().ln() - 2.0 * gamma;
    let bound = log_bound.exp();
    let max_abs_boltz = vectors.iter().map(|v| boltz(v).abs()).fold(0.0, f64::max);
    let mut min_log_gap = f64::INFINITY;
    let mut worst_pair = None;
    let mut pairs = 0;
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            pairs += 1;
            let g = boltz_difference(&vectors[i], &vectors[j]).ln_abs;
            if g < min_log_gap {
                min_log_gap = g;
                worst_pair = Some((i, j));
            }
        }
    }
    let gaps_ok = pairs == 0 || min_log_gap > log_bound;
    let status = if bound < SUB_PRECISION_FLOOR {
        CheckStatus::SubPrecision
    } else if gaps_ok && max_abs_boltz <= gamma {
        CheckStatus::Pass
    } else {
        CheckStatus::Fail
    };
    SeparationReport {
        pass: status != CheckStatus::Fail && max_abs_boltz <= gamma,
        status,
        n,
        gamma,
        pairs,
        max_abs_boltz,
        min_gap: min_log_gap.exp(),
        min_log_gap,
        bound,
        log_bound,
        worst_pair,
    }
}

/// Validates the distance-preservation preconditions, naming the first one
/// that fails: common length n ≥ 2, no repeated entry within a vector,
/// `|z| < γ`, distinct entries across all vectors more than δ apart,
/// `δ ≥ 4 ln n`, and no two vectors with the same multiset of entries.
pub fn validate_separation_inputs(vectors: &[RealVec], gamma: f64, delta: f64) -> Result<()> {
    let n = vectors.first().map(|v| v.len()).ok_or_else(|| Error::Precondition("no vectors".into()))?;
    if n < 2 {
        return Err(Error::Precondition(format!("vector length {n} < 2")));
    }
    if let Some(i) = vectors.iter().position(|v| v.len() != n) {
        return Err(Error::Precondition(format!("vector {i} has length {} ≠ {n}", vectors[i].len())));
    }
    let need = 4.0 * (n as f64).ln();
    if delta < need {
        return Err(Error::Precondition(format!("δ = {delta} < 4 ln n = {need}")));
    }
    for (i, v) in vectors.iter().enumerate() {
        let s = sorted_desc(&v.0);
        if s.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Precondition(format!("vector {i} has a duplicate entry")));
        }
        if let Some(x) = v.0.iter().find(|x| x.abs() >= gamma) {
            return Err(Error::Precondition(format!("vector {i} has entry {x} with |z| ≥ γ = {gamma}")));
        }
    }
    let mut all: Vec<f64> = vectors.iter().flat_map(|v| v.0.iter().copied()).collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    if let Some(w) = all.windows(2).find(|w| w[1] - w[0] <= delta) {
        return Err(Error::Precondition(format!(
            "entries {} and {} are distinct but not δ-separated (δ = {delta})",
            w[0], w[1]
        )));
    }
    let keys: Vec<Vec<f64>> = vectors.iter().map(|v| sorted_desc(&v.0)).collect();
    for i in 0..keys.len() {
        for j in i + 1..keys.len() {
            if keys[i] == keys[j] {
                return Err(Error::Precondition(format!(
                    "vectors {i} and {j} have identical sorted entries (no differing entry)"
                )));
            }
        }
    }
    Ok(())
}

pub fn check_boltz_separation(vectors: &[RealVec], gamma: f64, delta: f64) -> Result<SeparationReport> {
    validate_separation_inputs(vectors, gamma, delta)?;
    Ok(measure_boltz_separation(vectors, gamma))
}

pub mod lemmas;

#[cfg(test)]
mod tests {
    use super::*;

    fn rv(v: &[f64]) -> RealVec {
        RealVec::new(v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&rv(&[0.0, 0.0])).probs(), &[0.5, 0.5]);
        let p = softmax(&rv(&[0.0, 3f64.ln()]));
        assert!((p.probs()[0] - 0.25).abs() < 1e-15 && (p.probs()[1] - 0.75).abs() < 1e-15);
        for c in [-700.0, 0.0, 3.5, 900.0] {
            for q in softmax(&rv(&[c; 4])).probs() {
                assert!((q - 0.25).abs() < 1e-15);
            }
        }
        assert!(RealVec::new(vec![]).is_err());
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = softmax(&rv(&[1e6, 1e6 - 1.0, -1e6]));
        let s: f64 = p.probs().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(p.probs().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn boltz_examples() {
        assert_eq!(boltz(&rv(&[0.0, 0.0])), 0.0);
        assert_eq!(boltz(&rv(&[-2.5; 5])), -2.5);
        assert!((boltz(&rv(&[0.0, 3f64.ln()])) - 0.75 * 3f64.ln()).abs() < 1e-15);
        assert!((0.75 * 3f64.ln() - 0.8240).abs() < 1e-4);
    }

    #[test]
    fn partition_entropy_examples() {
        let (lz, s) = partition_entropy(&rv(&[0.0, 0.0]));
        assert!((lz - 2f64.ln()).abs() < 1e-15 && (s - 2f64.ln()).abs() < 1e-15);
        assert_eq!(partition_entropy(&rv(&[0.0])), (0.0, 0.0));
        let (lz, s) = partition_entropy(&rv(&[0.0, 3f64.ln()]));
        assert!((lz - 4f64.ln()).abs() < 1e-15);
        let expect = -(0.25 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
        assert!((s - expect).abs() < 1e-15);
        assert!((lz - 1.3863).abs() < 1e-4 && (s - 0.5623).abs() < 1e-4);
    }

    #[test]
    fn gradient_examples() {
        let g = boltz_grad(&rv(&[0.0, 0.0]));
        assert!(g.as_slice().iter().all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn second_derivative_examples() {
        assert!(boltz_second_deriv(&rv(&[10.0, 0.0]), 1).unwrap() < 0.0);
        assert!(boltz_second_deriv(&rv(&[10.0, 0.0]), 2).is_err());
        // Uniform input simplifies to p_i(2 − 2p_i).
        for n in 1..6 {
            let z = rv(&vec![1.25; n]);
            let p = 1.0 / n as f64;
            for i in 0..n {
                let v = boltz_second_deriv(&z, i).unwrap();
                assert!((v - p * (2.0 - 2.0 * p)).abs() < 1e-14);
            }
        }
    }

    // High-precision values (60 significant digits) of Boltz(a) − Boltz(b).
    #[test]
    fn difference_matches_high_precision_oracle() {
        let cases: &[(&[f64], &[f64], f64)] = &[
            (&[12.0, 6.0, 0.0, -6.0], &[12.0, 6.0, 0.0, -7.0], -1.6712767101760705e-07),
            (&[0.0, 3.0], &[1.0, -1.0], 2.096128224511535),
            (&[40.0, 20.0, 0.0], &[40.0, 20.0, -30.0], -1.699341696862451e-16),
            (&[90.0, 75.0, 60.0, 45.0], &[90.0, 75.0, 60.0, 44.0], -8.037246339108634e-19),
            (&[5.0, 1.0, -3.0], &[5.0, 1.0], -2.6108706054710925e-03),
        ];
        for (a, b, want) in cases {
            let got = boltz_difference(&rv(a), &rv(b)).value();
            assert!(((got - want) / want).abs() < 1e-12, "{a:?} {b:?}: {got:e} vs {want:e}");
        }
    }

    #[test]
    fn difference_is_antisymmetric_and_zero_on_permutations() {
        let a = rv(&[3.0, -1.0, 7.5]);
        let b = rv(&[7.5, 3.0, -1.0]);
        assert_eq!(boltz_difference(&a, &b), LogAbs::ZERO);
        let c = rv(&[2.0, -1.0, 7.0]);
        let x = boltz_difference(&a, &c);
        let y = boltz_difference(&c, &a);
        assert_eq!(x.sign, -y.sign);
        assert_eq!(x.ln_abs, y.ln_abs);
        let direct = boltz(&a) - boltz(&c);
        assert!((x.value() - direct).abs() < 1e-13);
    }

    #[test]
    fn separation_example_gap_exceeds_bound() {
        let a = rv(&[12.0, 6.0, 0.0, -6.0]);
        let b = rv(&[12.0, 6.0, 0.0, -7.0]);
        // Entries 12 and 6 are exactly δ = 6 apart and −6, −7 are 1 apart, so
        // the strict δ-separation precondition rejects this pair ...
        assert!(matches!(check_boltz_separation(&[a.clone(), b.clone()], 12.001, 6.0), Err(Error::Precondition(_))));
        // ... although the claimed gap still holds numerically.
        let r = measure_boltz_separation(&[a, b], 12.001);
        assert_eq!(r.status, CheckStatus::Pass);
        assert!(r.min_gap > 4f64.ln().powi(2) * (-24.002f64).exp());
    }

    #[test]
    fn degenerate_pair_is_flagged() {
        let a = rv(&[20.0, 0.0]);
        let b = rv(&[0.0, 20.0]);
        let e = check_boltz_separation(&[a, b], 30.0, 10.0).unwrap_err();
        assert!(e.to_string().contains("no differing entry"));
    }

    #[test]
    fn valid_pair_passes() {
        let a = rv(&[20.0, 0.0, -20.0, 10.0]);
        let b = rv(&[20.0, 0.0, -20.0, -10.0]);
        let r = check_boltz_separation(&[a, b], 25.0, 4.0 * 4f64.ln()).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn sub_precision_bounds_are_reported() {
        let a = rv(&[400.0, 0.0]);
        let b = rv(&[400.0, -10.0]);
        let r = measure_boltz_separation(&[a, b], 401.0);
        assert_eq!(r.status, CheckStatus::SubPrecision);
        assert!(r.pass);
    }
}
