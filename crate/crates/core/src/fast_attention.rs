//! Exact and Taylor-feature low-rank attention for bounded-entry instances.

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::seq::SeqMatrix;

pub mod bench;

pub const DEFAULT_BLOCK: usize = 256;
pub const DEFAULT_ORACLE_CUTOFF: usize = 8192;
pub const DEFAULT_MAX_FEATURE_DIM: u128 = 200_000;

fn check_qkv(q: &SeqMatrix, k: &SeqMatrix, v: &SeqMatrix) -> Result<()> {
    if q.d() != k.d() || q.len() != k.len() || v.len() != k.len() {
        return Err(Error::Shape(format!(
            "Q is {}×{}, K is {}×{}, V is {}×{}",
            q.d(),
            q.len(),
            k.d(),
            k.len(),
            v.d(),
            v.len()
        )));
    }
    Ok(())
}

/// `V·Softmax(KᵀQ)` with a column-wise softmax, `block` query columns at a time.
pub fn exact_attention_blocked(q: &SeqMatrix, k: &SeqMatrix, v: &SeqMatrix, block: usize) -> Result<SeqMatrix> {
    check_qkv(q, k, v)?;
    let n = q.len();
    let block = block.max(1);
    let kt = k.matrix().transpose();
    let mut out = DMatrix::zeros(v.d(), n);
    let mut start = 0;
    while start < n {
        let width = block.min(n - start);
        let mut scores = &kt * q.matrix().columns(start, width);
        for mut col in scores.column_iter_mut() {
            let m = col.max();
            let mut total = 0.0;
            for x in col.iter_mut() {
                *x = (*x - m).exp();
                total += *x;
            }
            col /= total;
        }
        out.columns_mut(start, width).copy_from(&(v.matrix() * scores));
        start += width;
    }
    SeqMatrix::from_matrix(out)
}

pub fn exact_attention(q: &SeqMatrix, k: &SeqMatrix, v: &SeqMatrix) -> Result<SeqMatrix> {
    exact_attention_blocked(q, k, v, DEFAULT_BLOCK)
}

/// `C(d + g, g)`, saturating at `u128::MAX`.
pub fn feature_dim(d: usize, g: usize) -> u128 {
    let (d, g) = (d as u128, g as u128);
    let small = d.min(g);
    let mut acc: u128 = 1;
    for i in 1..=small {
        // acc·(d+g−small+i)/i stays integral at every step.
        acc = match acc.checked_mul(d + g - small + i) {
            Some(x) => x / i,
            None => return u128::MAX,
        };
    }
    acc
}

/// Degree-g Taylor features `x^β/√β!` over multi-indices `|β| ≤ g`, in
/// graded lexicographic order.
///
/// Feature `i > 0` is `feature[parent[i]]·x[var[i]]·scale[i]`.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    d: usize,
    degree: usize,
    parent: Vec<u32>,
    var: Vec<u32>,
    scale: Vec<f64>,
}

impl FeatureMap {
    /// Fails if the feature dimension exceeds `max_dim`.
    pub fn new(d: usize, degree: usize, max_dim: u128) -> Result<Self> {
        if d == 0 {
            return Err(Error::Domain("feature map needs d ≥ 1".into()));
        }
        let m = feature_dim(d, degree);
        if m > max_dim || m > u32::MAX as u128 {
            return Err(Error::SearchSpace(format!("feature dimension {m} for d = {d}, g = {degree} exceeds {max_dim}")));
        }
        let m = m as usize;
        let mut parent = Vec::with_capacity(m);
        let mut var = Vec::with_capacity(m);
        let mut scale = Vec::with_capacity(m);
        // Per feature: smallest variable index in the monomial and its exponent.
        let mut first = Vec::with_capacity(m);
        let mut first_exp = Vec::with_capacity(m);
        parent.push(0);
        var.push(0);
        scale.push(1.0);
        first.push(0u32);
        first_exp.push(0u32);
        let mut prev = 0..1usize;
        for k in 1..=degree {
            let begin = parent.len();
            for j in 0..d as u32 {
                for t in prev.clone() {
                    if k > 1 && first[t] < j {
                        continue;
                    }
                    let e = if k > 1 && first[t] == j { first_exp[t] + 1 } else { 1 };
                    parent.push(t as u32);
                    var.push(j);
                    scale.push(1.0 / (e as f64).sqrt());
                    first.push(j);
                    first_exp.push(e);
                }
            }
            prev = begin..parent.len();
        }
        debug_assert_eq!(parent.len(), m);
        Ok(FeatureMap { d, degree, parent, var, scale })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn dim(&self) -> usize {
        self.parent.len()
    }

    /// Writes φ(x) into `out` (length `dim()`).
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
        for i in 1..out.len() {
            out[i] = out[self.parent[i] as usize] * x[self.var[i] as usize] * self.scale[i];
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(x, &mut out);
        out
    }

    /// `φ(q)·φ(k)` with compensated summation, using caller buffers of length `dim()`.
    pub fn kernel_with(&self, q: &[f64], k: &[f64], buf_q: &mut [f64], buf_k: &mut [f64]) -> f64 {
        self.eval_into(q, buf_q);
        self.eval_into(k, buf_k);
        let (mut sum, mut comp) = (0.0_f64, 0.0_f64);
        for (a, b) in buf_q.iter().zip(buf_k.iter()) {
            let x = a * b;
            let t = sum + x;
            comp += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
            sum = t;
        }
        sum + comp
    }

    /// Exponent vectors in feature order.
    pub fn multi_indices(&self) -> Vec<Vec<u32>> {
        let mut out: Vec<Vec<u32>> = vec![vec![0; self.d]];
        for i in 1..self.dim() {
            let mut b = out[self.parent[i] as usize].clone();
            b[self.var[i] as usize] += 1;
            out.push(b);
        }
        out
    }
}

pub fn taylor_feature_map(x: &[f64], g: usize) -> Result<Vec<f64>> {
    Ok(FeatureMap::new(x.len(), g, u128::MAX)?.eval(x))
}

/// Smallest g with `R^{g+1}/(g+1)! ≤ rel_tol·e^{−R}`.
pub fn required_degree(r: f64, rel_tol: f64) -> Result<usize> {
    if !(r >= 0.0 && r.is_finite()) || !(rel_tol > 0.0 && rel_tol < 1.0) {
        return Err(Error::Domain(format!("need finite R ≥ 0 and rel_tol in (0, 1), got R = {r}, rel_tol = {rel_tol}")));
    }
    if r == 0.0 {
        return Ok(0);
    }
    let target = rel_tol.ln() - r;
    let ln_r = r.ln();
    // ln(R^{g+1}/(g+1)!) built up one factor at a time.
    let mut term = ln_r;
    let mut g = 0usize;
    while term > target {
        g += 1;
        term += ln_r - ((g + 1) as f64).ln();
        if g > 1_000_000 {
            return Err(Error::Domain(format!("degree search did not converge for R = {r}")));
        }
    }
    Ok(g)
}

/// Low-rank attention with a prebuilt feature map.
///
/// Keys are streamed into `S = Σ_k φ(k)v_kᵀ` and `z = Σ_k φ(k)`; output
/// column j is `Sᵀφ(q_j)/(zᵀφ(q_j))`.
pub fn lowrank_attention_with(map: &FeatureMap, q: &SeqMatrix, k: &SeqMatrix, v: &SeqMatrix) -> Result<SeqMatrix> {
    check_qkv(q, k, v)?;
    if map.d() != q.d() {
        return Err(Error::Shape(format!("feature map for d = {}, tokens have d = {}", map.d(), q.d())));
    }
    let (m, dv, n) = (map.dim(), v.d(), q.len());
    let mut s = vec![0.0; m * dv];
    let mut z = vec![0.0; m];
    let mut phi = vec![0.0; m];
    let mut vals = vec![0.0; dv];
    for c in 0..n {
        map.eval_into(k.col(c).as_slice(), &mut phi);
        vals.copy_from_slice(v.col(c).as_slice());
        for (f, &p) in phi.iter().enumerate() {
            z[f] += p;
            let row = &mut s[f * dv..(f + 1) * dv];
            for (acc, val) in row.iter_mut().zip(&vals) {
                *acc += p * val;
            }
        }
    }
    let mut out = DMatrix::zeros(dv, n);
    let mut num = vec![0.0; dv];
    for c in 0..n {
        map.eval_into(q.col(c).as_slice(), &mut phi);
        num.iter_mut().for_each(|x| *x = 0.0);
        let mut den = 0.0;
        for (f, &p) in phi.iter().enumerate() {
            den += p * z[f];
            for (acc, sv) in num.iter_mut().zip(&s[f * dv..(f + 1) * dv]) {
                *acc += p * sv;
            }
        }
        if !(den > 0.0) {
            return Err(Error::DegreeTooSmall { column: c, degree: map.degree() });
        }
        for (r, x) in num.iter().enumerate() {
            out[(r, c)] = x / den;
        }
    }
    SeqMatrix::from_matrix(out)
}

pub fn lowrank_attention(q: &SeqMatrix, k: &SeqMatrix, v: &SeqMatrix, g: usize) -> Result<SeqMatrix> {
    let map = FeatureMap::new(q.d(), g, u128::MAX)?;
    lowrank_attention_with(&map, q, k, v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AptiInstance {
    pub q: SeqMatrix,
    pub k: SeqMatrix,
    pub v: SeqMatrix,
    pub b: f64,
    pub delta_f: f64,
}

impl AptiInstance {
    pub fn new(q: SeqMatrix, k: SeqMatrix, v: SeqMatrix, b: f64, delta_f: f64) -> Result<Self> {
        check_qkv(&q, &k, &v)?;
        if !(b >= 0.0) || !(delta_f > 0.0) {
            return Err(Error::Domain(format!("need B ≥ 0 and δ_F > 0, got B = {b}, δ_F = {delta_f}")));
        }
        for (name, m) in [("Q", &q), ("K", &k), ("V", &v)] {
            if m.max_abs() > b {
                return Err(Error::Domain(format!("{name} has an entry of magnitude {} > B = {b}", m.max_abs())));
            }
        }
        Ok(AptiInstance { q, k, v, b, delta_f })
    }

    /// Entries i.i.d. uniform in `[−B, B]`; V has `d` rows.
    pub fn random(n: usize, d: usize, b: f64, delta_f: f64, seed: u64) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::Domain("need n ≥ 1 and d ≥ 1".into()));
        }
        let mut r = rng::stream(seed, &format!("apti/{n}/{d}/{b}"));
        let mut draw = || {
            let m = DMatrix::from_fn(d, n, |_, _| if b > 0.0 { r.gen_range(-b..=b) } else { 0.0 });
            SeqMatrix::from_matrix(m)
        };
        let (q, k, v) = (draw()?, draw()?, draw()?);
        AptiInstance::new(q, k, v, b, delta_f)
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn d(&self) -> usize {
        self.q.d()
    }

    /// `d·B²`, the bound on every `|q·k|`.
    pub fn inner_product_bound(&self) -> f64 {
        self.d() as f64 * self.b * self.b
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub oracle_cutoff: usize,
    pub max_feature_dim: u128,
    pub max_escalations: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { oracle_cutoff: DEFAULT_ORACLE_CUTOFF, max_feature_dim: DEFAULT_MAX_FEATURE_DIM, max_escalations: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AptiCertificate {
    pub n: usize,
    pub d: usize,
    pub b: f64,
    pub delta_f: f64,
    pub initial_degree: usize,
    pub degree: usize,
    pub feature_dim: u128,
    pub escalations: usize,
    pub oracle_run: bool,
    pub max_err: Option<f64>,
    pub certified: bool,
    pub feature_dim_exceeds_n: bool,
}

/// Degree from `required_degree(d·B², δ_F/4)`, certified against the exact
/// oracle when `n ≤ oracle_cutoff`; on failure the degree doubles, at most
/// `max_escalations` times.
pub fn solve_apti(inst: &AptiInstance, opts: &SolveOptions) -> Result<(SeqMatrix, AptiCertificate)> {
    let initial = required_degree(inst.inner_product_bound(), inst.delta_f / 4.0)?;
    let oracle = if inst.n() <= opts.oracle_cutoff { Some(exact_attention(&inst.q, &inst.k, &inst.v)?) } else { None };
    let mut g = initial;
    let mut escalations = 0;
    loop {
        let map = FeatureMap::new(inst.d(), g, opts.max_feature_dim)?;
        let approx = lowrank_attention_with(&map, &inst.q, &inst.k, &inst.v);
        let (out, err) = match (approx, &oracle) {
            (Ok(out), Some(exact)) => {
                let err = out.max_abs_diff(exact);
                (Some(out), Some(err))
            }
            (Ok(out), None) => (Some(out), None),
            (Err(Error::DegreeTooSmall { .. }), Some(_)) => (None, Some(f64::INFINITY)),
            (Err(e), _) => return Err(e),
        };
        let certified = err.is_some_and(|e| e <= inst.delta_f);
        if certified || oracle.is_none() {
            let m = map.dim() as u128;
            let cert = AptiCertificate {
                n: inst.n(),
                d: inst.d(),
                b: inst.b,
                delta_f: inst.delta_f,
                initial_degree: initial,
                degree: g,
                feature_dim: m,
                escalations,
                oracle_run: oracle.is_some(),
                max_err: err,
                certified,
                feature_dim_exceeds_n: m > inst.n() as u128,
            };
            return Ok((out.expect("low-rank output present"), cert));
        }
        if escalations == opts.max_escalations {
            return Err(Error::Certification { max_err: err.unwrap_or(f64::NAN), tol: inst.delta_f, degree: g });
        }
        escalations += 1;
        g = (2 * g).max(1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(d: usize, n: usize, data: &[f64]) -> SeqMatrix {
        SeqMatrix::from_row_major(d, n, data).unwrap()
    }

    fn naive_exact(q: &SeqMatrix, k: &SeqMatrix, v: &SeqMatrix) -> DMatrix<f64> {
        let n = q.len();
        let mut out = DMatrix::zeros(v.d(), n);
        for j in 0..n {
            let logits: Vec<f64> = (0..n).map(|i| (0..q.d()).map(|r| k.matrix()[(r, i)] * q.matrix()[(r, j)]).sum()).collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for i in 0..n {
                let w = (logits[i] - m).exp() / total;
                for r in 0..v.d() {
                    out[(r, j)] += w * v.matrix()[(r, i)];
                }
            }
        }
        out
    }

    #[test]
    fn exact_single_column_and_zero_keys() {
        let v = seq(2, 1, &[3.0, -1.0]);
        let q = seq(1, 1, &[2.0]);
        assert_eq!(exact_attention(&q, &q, &v).unwrap(), v);
        let v = seq(1, 3, &[1.0, 2.0, 6.0]);
        let q = seq(1, 3, &[1.0, -2.0, 0.5]);
        let k = SeqMatrix::zeros(1, 3);
        let out = exact_attention(&q, &k, &v).unwrap();
        assert!(out.row_major().iter().all(|x| (x - 3.0).abs() < 1e-15));
    }

    #[test]
    fn exact_matches_naive_and_stays_in_envelope() {
        for t in 0..50 {
            let mut r = rng::case_stream(1, "exact", t);
            let (d, n, dv) = (r.gen_range(1..5), r.gen_range(1..40), r.gen_range(1..4));
            let mut m = |rows, cols| {
                SeqMatrix::from_matrix(DMatrix::from_fn(rows, cols, |_, _| r.gen_range(-2.0..2.0))).unwrap()
            };
            let (q, k, v) = (m(d, n), m(d, n), m(dv, n));
            for block in [1, 7, 256] {
                let out = exact_attention_blocked(&q, &k, &v, block).unwrap();
                assert!((out.matrix() - naive_exact(&q, &k, &v)).amax() <= 1e-12);
                for row in 0..dv {
                    let lo = v.matrix().row(row).min();
                    let hi = v.matrix().row(row).max();
                    assert!(out.matrix().row(row).iter().all(|x| *x >= lo - 1e-12 && *x <= hi + 1e-12));
                }
            }
        }
    }

    #[test]
    fn feature_dims() {
        assert_eq!(feature_dim(8, 11), 75582);
        assert_eq!(feature_dim(2, 2), 6);
        assert_eq!(feature_dim(5, 0), 1);
        for d in 1..7 {
            for g in 0..7 {
                assert_eq!(FeatureMap::new(d, g, u128::MAX).unwrap().dim() as u128, feature_dim(d, g));
            }
        }
        assert!(matches!(FeatureMap::new(8, 30, 200_000), Err(Error::SearchSpace(_))));
    }

    #[test]
    fn feature_map_examples() {
        assert_eq!(taylor_feature_map(&[0.3, 0.7], 0).unwrap(), vec![1.0]);
        assert_eq!(taylor_feature_map(&[0.3, 0.7], 1).unwrap(), vec![1.0, 0.3, 0.7]);
        let phi = taylor_feature_map(&[1.5], 2).unwrap();
        assert_eq!(phi[..2], [1.0, 1.5]);
        assert!((phi[2] - 2.25 / 2f64.sqrt()).abs() < 1e-15);
        let map = FeatureMap::new(2, 2, u128::MAX).unwrap();
        assert_eq!(map.multi_indices(), vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![2, 0], vec![1, 1], vec![0, 2]]);
        let mut r = rng::stream(2, "scalar-taylor");
        for _ in 0..100 {
            let (q, k): (f64, f64) = (r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0));
            let a = taylor_feature_map(&[q], 2).unwrap();
            let b = taylor_feature_map(&[k], 2).unwrap();
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            assert!((dot - (1.0 + q * k + (q * k).powi(2) / 2.0)).abs() < 1e-14);
        }
    }

    fn multinomial_oracle(beta: &[u32]) -> f64 {
        beta.iter().map(|&b| (1..=b).map(f64::from).product::<f64>()).product()
    }

    #[test]
    fn features_match_closed_form() {
        let map = FeatureMap::new(3, 4, u128::MAX).unwrap();
        let x = [0.7, -1.3, 0.4];
        let phi = map.eval(&x);
        for (beta, value) in map.multi_indices().iter().zip(&phi) {
            let mono: f64 = beta.iter().zip(&x).map(|(&b, xi)| xi.powi(b as i32)).product();
            assert!((value - mono / multinomial_oracle(beta).sqrt()).abs() < 1e-14);
        }
        let mut sorted = map.multi_indices();
        let degrees: Vec<u32> = sorted.iter().map(|b| b.iter().sum()).collect();
        assert!(degrees.windows(2).all(|w| w[0] <= w[1]));
        sorted.dedup();
        assert_eq!(sorted.len(), map.dim());
    }

    #[test]
    fn kernel_identity_on_random_pairs() {
        let mut cases: Vec<(usize, usize, u64)> = Vec::new();
        let mut r = rng::stream(3, "kernel-identity");
        for t in 0..10_000u64 {
            cases.push((r.gen_range(1..=16), r.gen_range(0..=10), t));
        }
        cases.sort();
        let mut current: Option<FeatureMap> = None;
        let (mut bq, mut bk) = (Vec::new(), Vec::new());
        for (d, g, t) in cases {
            if current.as_ref().map_or(true, |m| m.d() != d || m.degree() != g) {
                let map = FeatureMap::new(d, g, u128::MAX).unwrap();
                bq = vec![0.0; map.dim()];
                bk = vec![0.0; map.dim()];
                current = Some(map);
            }
            let map = current.as_ref().unwrap();
            let mut pr = rng::case_stream(3, "kernel-pair", t);
            let scale = 1.5 / (d as f64).sqrt();
            let q: Vec<f64> = (0..d).map(|_| pr.gen_range(-scale..scale)).collect();
            let k: Vec<f64> = (0..d).map(|_| pr.gen_range(-scale..scale)).collect();
            let dot: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
            let kernel = map.kernel_with(&q, &k, &mut bq, &mut bk);
            let mut taylor = 0.0;
            let mut term = 1.0;
            for i in 0..=g {
                taylor += term;
                term *= dot / (i + 1) as f64;
            }
            let tol = 1e-12 * dot.abs().powi(g as i32).max(1.0);
            assert!((kernel - taylor).abs() <= tol, "d = {d}, g = {g}: {kernel} vs {taylor}");
        }
    }

    #[test]
    fn degree_rule() {
        assert_eq!(required_degree(0.0, 1e-6).unwrap(), 0);
        // 1/10! ≈ 2.76e-7 ≤ 1e-6·e⁻¹ ≈ 3.68e-7 while 1/9! ≈ 2.76e-6 is not.
        assert_eq!(required_degree(1.0, 1e-6).unwrap(), 9);
        assert_eq!(required_degree(2.0, 2.5e-4).unwrap(), 11);
        assert!(required_degree(-1.0, 0.1).is_err());
        assert!(required_degree(1.0, 1.0).is_err());
        let mut last = 0;
        for i in 0..200 {
            let g = required_degree(i as f64 * 0.25, 1e-3).unwrap();
            assert!(g >= last);
            last = g;
        }
        let mut last = 0;
        for e in 1..15 {
            let g = required_degree(3.0, 10f64.powi(-e)).unwrap();
            assert!(g >= last);
            last = g;
        }
    }

    #[test]
    fn degree_rule_matches_direct_evaluation() {
        for &(r, tol) in &[(1.0, 1e-6), (2.0, 2.5e-4), (0.5, 1e-3), (4.0, 1e-8)] {
            let g = required_degree(r, tol).unwrap();
            let rem = |g: usize| r.powi(g as i32 + 1) / (1..=g + 1).map(|i| i as f64).product::<f64>();
            let target = tol * (-r as f64).exp();
            assert!(rem(g) <= target);
            if g > 0 {
                assert!(rem(g - 1) > target);
            }
        }
    }

    #[test]
    fn lowrank_trivial_cases() {
        let q = seq(2, 3, &[0.3, -0.2, 0.5, 0.1, 0.4, -0.6]);
        let v = seq(1, 3, &[1.0, 2.0, 6.0]);
        let k0 = SeqMatrix::zeros(2, 3);
        for g in 0..4 {
            let out = lowrank_attention(&q, &k0, &v, g).unwrap();
            assert!(out.row_major().iter().all(|x| (x - 3.0).abs() < 1e-14));
        }
        let out = lowrank_attention(&q, &q, &v, 0).unwrap();
        assert!(out.row_major().iter().all(|x| (x - 3.0).abs() < 1e-14));
    }

    #[test]
    fn lowrank_matches_exact_at_high_degree() {
        let inst = AptiInstance::random(64, 3, 0.7, 1e-3, 5).unwrap();
        let g = required_degree(inst.inner_product_bound(), 1e-9).unwrap();
        let approx = lowrank_attention(&inst.q, &inst.k, &inst.v, g).unwrap();
        let exact = exact_attention(&inst.q, &inst.k, &inst.v).unwrap();
        assert!(approx.max_abs_diff(&exact) <= 1e-6);
    }

    #[test]
    fn nonpositive_normalizer_is_reported() {
        // g = 1 on q·k = −4 gives 1 + q·k < 0 for the only key.
        let q = seq(1, 1, &[2.0]);
        let k = seq(1, 1, &[-2.0]);
        let v = seq(1, 1, &[1.0]);
        assert!(matches!(lowrank_attention(&q, &k, &v, 1), Err(Error::DegreeTooSmall { column: 0, degree: 1 })));
    }

    #[test]
    fn error_decreases_with_degree() {
        for seed in 0..10 {
            let inst = AptiInstance::random(48, 4, 0.6, 1e-3, seed).unwrap();
            let g1 = required_degree(inst.inner_product_bound(), 1e-3).unwrap();
            let exact = exact_attention(&inst.q, &inst.k, &inst.v).unwrap();
            let mut last = f64::INFINITY;
            for g in g1..g1 + 5 {
                let err = lowrank_attention(&inst.q, &inst.k, &inst.v, g).unwrap().max_abs_diff(&exact);
                assert!(err <= last + 1e-12, "seed {seed}, g {g}: {err} > {last}");
                last = err;
            }
        }
    }

    #[test]
    fn normalizers_positive_at_quarter_tolerance() {
        let mut checked = 0;
        let mut seed = 0;
        while checked < 1000 {
            seed += 1;
            let mut r = rng::case_stream(6, "normalizer", seed);
            let (n, d, b) = (r.gen_range(2..24), r.gen_range(1..9), r.gen_range(0.05..1.0));
            let inst = AptiInstance::random(n, d, b, 1e-3, seed).unwrap();
            let g = required_degree(inst.inner_product_bound(), 0.25).unwrap();
            if feature_dim(d, g) > DEFAULT_MAX_FEATURE_DIM {
                continue;
            }
            lowrank_attention(&inst.q, &inst.k, &inst.v, g).unwrap();
            checked += 1;
        }
    }

    #[test]
    fn solve_certifies_desk_instance() {
        let inst = AptiInstance::random(256, 8, 0.5, 1e-3, 0).unwrap();
        let (_, cert) = solve_apti(&inst, &SolveOptions::default()).unwrap();
        assert!(cert.certified);
        assert_eq!(cert.degree, 11);
        assert_eq!(cert.feature_dim, 75582);
        assert!(cert.feature_dim_exceeds_n);
        assert!(cert.max_err.unwrap() <= 1e-3);
    }

    #[test]
    fn solve_zero_values() {
        let mut inst = AptiInstance::random(32, 2, 0.5, 1e-3, 1).unwrap();
        inst.v = SeqMatrix::zeros(2, 32);
        let (out, cert) = solve_apti(&inst, &SolveOptions::default()).unwrap();
        assert_eq!(out.max_abs(), 0.0);
        assert_eq!(cert.max_err, Some(0.0));
        assert!(cert.certified);
    }

    #[test]
    fn solve_without_oracle_is_uncertified() {
        let inst = AptiInstance::random(16, 2, 0.5, 1e-3, 2).unwrap();
        let opts = SolveOptions { oracle_cutoff: 8, ..Default::default() };
        let (_, cert) = solve_apti(&inst, &opts).unwrap();
        assert!(!cert.oracle_run && !cert.certified && cert.max_err.is_none());
    }

    #[test]
    fn instance_validation() {
        let q = seq(1, 2, &[0.1, 0.9]);
        assert!(AptiInstance::new(q.clone(), q.clone(), q.clone(), 0.5, 1e-3).is_err());
        assert!(AptiInstance::new(q.clone(), q.clone(), q, 1.0, 1e-3).is_ok());
    }
}
