//! Randomized property suites for the Boltzmann-operator lemmas.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::*;
use crate::rng::{case_stream, Rng};

pub const FD_STEP_FIRST: f64 = 1e-6;
pub const FD_STEP_SECOND: f64 = 1e-4;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub seed: u64,
    /// Cases for each of the identity, gradient and second-derivative checks.
    pub vectors: usize,
    pub max_len: usize,
    pub entry_bound: f64,
    /// Cases for each of the ordering/gap lemmas.
    pub instances: usize,
    /// Suites for the distance-preservation check.
    pub separation_suites: usize,
    pub separation_lengths: Vec<usize>,
    pub separation_max_vectors: usize,
    /// Target |z| bound for generated suites; raised per length when the
    /// δ-spacing cannot fit (δ = 4 ln n forces a span of (n−1)·δ).
    pub separation_gamma: f64,
    /// γ passed to the checker; defaults to the generating γ.
    pub check_gamma: Option<f64>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            seed: 0,
            vectors: 1000,
            max_len: 32,
            entry_bound: 20.0,
            instances: 500,
            separation_suites: 200,
            separation_lengths: vec![4, 8, 16],
            separation_max_vectors: 6,
            separation_gamma: 15.0,
            check_gamma: None,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, PartialEq)]
pub struct LemmaTally {
    pub lemma: String,
    pub cases: usize,
    pub passed: usize,
    pub failed: usize,
    pub sub_precision: usize,
    pub first_failure: Option<String>,
}

impl LemmaTally {
    fn new(name: &str) -> Self {
        LemmaTally { lemma: name.to_string(), ..Default::default() }
    }

    fn record(&mut self, ok: bool, detail: impl FnOnce() -> String) {
        self.cases += 1;
        if ok {
            self.passed += 1;
        } else {
            self.failed += 1;
            if self.first_failure.is_none() {
                self.first_failure = Some(detail());
            }
        }
    }

    pub fn ok(&self) -> bool {
        self.failed == 0
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SeparationSuiteSummary {
    pub n: usize,
    pub gamma: f64,
    pub suites: usize,
    pub min_log_margin: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub pass: bool,
    pub tallies: Vec<LemmaTally>,
    pub separation: Vec<SeparationSuiteSummary>,
    pub precondition_violations: Vec<String>,
}

/// `|a − b| / max(1, |a|, |b|)`: relative for large values, absolute near zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

fn rv(v: Vec<f64>) -> RealVec {
    RealVec(v)
}

fn random_vec(rng: &mut Rng, max_len: usize, bound: f64) -> RealVec {
    let n = rng.gen_range(1..=max_len);
    rv((0..n).map(|_| rng.gen_range(-bound..=bound)).collect())
}

pub fn identity_error(z: &RealVec) -> f64 {
    let (lz, s) = partition_entropy(z);
    (boltz(z) - (lz - s)).abs()
}

/// Worst entrywise [`rel_err`] between the analytic gradient and central differences.
pub fn gradient_fd_error(z: &RealVec) -> f64 {
    let g = boltz_grad(z);
    let mut worst: f64 = 0.0;
    for i in 0..z.len() {
        let mut up = z.0.clone();
        let mut dn = z.0.clone();
        up[i] += FD_STEP_FIRST;
        dn[i] -= FD_STEP_FIRST;
        let fd = (boltz_raw(&up) - boltz_raw(&dn)) / (2.0 * FD_STEP_FIRST);
        worst = worst.max(rel_err(g.0[i], fd));
    }
    worst
}

pub fn second_fd_error(z: &RealVec, i: usize) -> f64 {
    let h = FD_STEP_SECOND;
    let mut up = z.0.clone();
    let mut dn = z.0.clone();
    up[i] += h;
    dn[i] -= h;
    let fd = (boltz_raw(&up) - 2.0 * boltz_raw(&z.0) + boltz_raw(&dn)) / (h * h);
    rel_err(boltz_second_deriv(z, i).expect("index in range"), fd)
}

/// Decreasing vector whose consecutive gaps all exceed `delta`.
fn separated_desc(rng: &mut Rng, n: usize, delta: f64, top: f64) -> Vec<f64> {
    let mut v = vec![top];
    for _ in 1..n {
        let last = *v.last().unwrap();
        v.push(last - delta - rng.gen_range(1e-3..2.0));
    }
    v
}

/// Lower bound against `(z₁, z₁−δ, …, z₁−δ)`; returns whether the claim held.
pub fn lower_bound_holds(z: &RealVec, delta: f64) -> bool {
    let mut lo = vec![z.0[0] - delta; z.len()];
    lo[0] = z.0[0];
    boltz_difference(z, &rv(lo)).sign > 0
}

/// One-entry difference bound, in log space. `a` and `b` share their first n−1 entries.
/// The statement leaves δ unnamed; its proof uses δ = max_{i<n} a_i − a_n.
pub fn one_entry_bound_log(a: &RealVec, b: &RealVec) -> f64 {
    let n = a.len();
    let (an, bn) = (a.0[n - 1], b.0[n - 1]);
    let head_max = a.0[..n - 1].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let gap = head_max - an;
    let factor = gap + an - bn - (n as f64).ln() - 1.0;
    (an - bn).ln() + factor.ln() + bn - log_sum_exp(&b.0)
}

/// Matching-top-k bound `ln²(n)·e^{−(a₁ − b_{k+1})}` in log space.
pub fn top_k_bound_log(a: &RealVec, b: &RealVec, k: usize) -> f64 {
    2.0 * (a.len() as f64).ln().ln() - (a.0[0] - b.0[k])
}

/// Two decreasing vectors sharing their top `k` entries with `a_{k+1} > b_{k+1}`,
/// drawn from a common pool of δ-separated values.
pub fn top_k_instance(rng: &mut Rng) -> (RealVec, RealVec, usize) {
    let n = rng.gen_range(2..=6usize);
    let delta = 4.0 * (n as f64).ln() + rng.gen_range(1e-3..1.0);
    let top = rng.gen_range(-5.0..5.0);
    let pool = separated_desc(rng, 2 * n, delta, top);
    let k = rng.gen_range(0..n);
    loop {
        let rest = &pool[k..];
        let pick = |rng: &mut Rng| {
            let mut idx: Vec<usize> = (0..rest.len()).collect();
            idx.shuffle(rng);
            let mut chosen: Vec<f64> = idx[..n - k].iter().map(|&i| rest[i]).collect();
            chosen.sort_by(|x, y| y.total_cmp(x));
            chosen
        };
        let (mut ta, mut tb) = (pick(rng), pick(rng));
        if ta[0] == tb[0] {
            continue;
        }
        if ta[0] < tb[0] {
            std::mem::swap(&mut ta, &mut tb);
        }
        let a: Vec<f64> = pool[..k].iter().chain(&ta).copied().collect();
        let b: Vec<f64> = pool[..k].iter().chain(&tb).copied().collect();
        return (rv(a), rv(b), k);
    }
}

/// One distance-preservation suite: up to `max_vectors` distinct n-subsets of a
/// δ-separated pool of n+2 values, δ = 4 ln n. Returns the vectors, the γ used
/// for generation and δ.
pub fn separation_suite(rng: &mut Rng, n: usize, max_vectors: usize, gamma_cap: f64) -> (Vec<RealVec>, f64, f64) {
    let delta = 4.0 * (n as f64).ln();
    let pool_len = n + 2;
    let gaps: Vec<f64> = (1..pool_len).map(|_| delta + rng.gen_range(1e-3..0.1)).collect();
    let span: f64 = gaps.iter().sum();
    let gamma = gamma_cap.max(span / 2.0 + 0.5);
    let lo = -gamma + 0.25;
    let hi = (gamma - 0.25 - span).max(lo);
    let mut x = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    let mut pool = vec![x];
    for g in &gaps {
        x += g;
        pool.push(x);
    }
    let count = rng.gen_range(2..=max_vectors);
    let mut seen: Vec<Vec<usize>> = Vec::new();
    while seen.len() < count {
        let mut idx: Vec<usize> = (0..pool_len).collect();
        idx.shuffle(rng);
        let mut key = idx[..n].to_vec();
        key.sort_unstable();
        if !seen.contains(&key) {
            seen.push(key);
        }
    }
    let vectors = seen
        .into_iter()
        .map(|key| {
            let mut v: Vec<f64> = key.iter().map(|&i| pool[i]).collect();
            v.shuffle(rng);
            rv(v)
        })
        .collect();
    (vectors, gamma, delta)
}

pub fn run_suite(cfg: &SuiteConfig) -> SuiteReport {
    let seed = cfg.seed;
    let mut identity = LemmaTally::new("partition_entropy_identity");
    let mut gradient = LemmaTally::new("gradient_finite_difference");
    let mut decrease = LemmaTally::new("monotone_decrease");
    let mut second = LemmaTally::new("second_derivative_finite_difference");
    let mut concave = LemmaTally::new("concavity");
    for c in 0..cfg.vectors as u64 {
        let mut rng = case_stream(seed, "boltz/vectors", c);
        let z = random_vec(&mut rng, cfg.max_len, cfg.entry_bound);
        let e = identity_error(&z);
        identity.record(e <= 1e-10, || format!("case {c}: identity error {e:e}"));

        let mut zg = z.clone();
        if zg.len() == 1 {
            zg.0.push(rng.gen_range(-cfg.entry_bound..=cfg.entry_bound));
        }
        let e = gradient_fd_error(&zg);
        gradient.record(e <= 1e-5, || format!("case {c}: gradient rel error {e:e}"));

        let i = rng.gen_range(0..zg.len());
        let e = second_fd_error(&zg, i);
        second.record(e <= 1e-3, || format!("case {c}: second derivative rel error {e:e}"));

        let n = zg.len() as f64;
        let max = zg.0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let g = boltz_grad(&zg);
        let dec: Vec<usize> = (0..zg.len()).filter(|&i| max - zg.0[i] > n.ln() + 1.0).collect();
        if !dec.is_empty() {
            let bad = dec.iter().find(|&&i| g.0[i] >= 0.0);
            decrease.record(bad.is_none(), || format!("case {c}: entry {} has gradient ≥ 0", bad.unwrap()));
        }
        let conc: Vec<usize> = (0..zg.len()).filter(|&i| max - zg.0[i] > n.ln() + 3.0).collect();
        if !conc.is_empty() {
            let bad = conc.iter().find(|&&i| boltz_second_deriv(&zg, i).unwrap() >= 0.0);
            concave.record(bad.is_none(), || format!("case {c}: entry {} not concave", bad.unwrap()));
        }
    }

    let mut lower = LemmaTally::new("separated_lower_bound");
    let mut extend = LemmaTally::new("extension_decreases");
    let mut one = LemmaTally::new("one_entry_difference");
    let mut topk = LemmaTally::new("matching_top_k");
    for c in 0..cfg.instances as u64 {
        let mut rng = case_stream(seed, "boltz/instances", c);

        let n = rng.gen_range(2..=8usize);
        let delta = (n as f64).ln() + 1.0 + rng.gen_range(1e-3..3.0);
        let top = rng.gen_range(-10.0..10.0);
        let z = rv(separated_desc(&mut rng, n, delta, top));
        lower.record(lower_bound_holds(&z, delta), || format!("case {c}: {:?} δ={delta}", z.0));

        let m = n + rng.gen_range(1..=3usize);
        let mut longer = z.0.clone();
        while longer.len() < m {
            let last = *longer.last().unwrap();
            longer.push(last - delta - rng.gen_range(1e-3..2.0));
        }
        let zl = rv(longer);
        let ok = boltz_difference(&z, &zl).sign > 0;
        extend.record(ok, || format!("case {c}: {:?} vs {:?}", z.0, zl.0));

        let n = rng.gen_range(2..=8usize);
        let (spacing, top) = (rng.gen_range(0.5..3.0), rng.gen_range(-5.0..5.0));
        let head = separated_desc(&mut rng, n - 1, spacing, top);
        let head_max = head[0];
        let an = head_max - (n as f64).ln() - 3.0 - rng.gen_range(1e-3..6.0);
        let bn = an - rng.gen_range(1e-3..4.0);
        let mut a = head.clone();
        a.push(an);
        let mut b = head;
        b.push(bn);
        let (a, b) = (rv(a), rv(b));
        let diff = boltz_difference(&b, &a);
        let bound = one_entry_bound_log(&a, &b);
        one.record(diff.sign > 0 && diff.ln_abs > bound, || {
            format!("case {c}: ln gap {} vs ln bound {bound}", diff.ln_abs)
        });

        let (a, b, k) = top_k_instance(&mut rng);
        let diff = boltz_difference(&a, &b);
        let bound = top_k_bound_log(&a, &b, k);
        topk.record(diff.sign != 0 && diff.ln_abs > bound, || {
            format!("case {c}: k={k} ln gap {} vs ln bound {bound}", diff.ln_abs)
        });
    }

    let mut sep = LemmaTally::new("distance_preservation");
    let mut summaries: Vec<SeparationSuiteSummary> = cfg
        .separation_lengths
        .iter()
        .map(|&n| SeparationSuiteSummary { n, gamma: 0.0, suites: 0, min_log_margin: f64::INFINITY })
        .collect();
    let mut violations = Vec::new();
    if !cfg.separation_lengths.is_empty() {
        for c in 0..cfg.separation_suites as u64 {
            let slot = c as usize % cfg.separation_lengths.len();
            let n = cfg.separation_lengths[slot];
            let mut rng = case_stream(seed, "boltz/separation", c);
            let (vectors, gamma, delta) =
                separation_suite(&mut rng, n, cfg.separation_max_vectors, cfg.separation_gamma);
            let check_gamma = cfg.check_gamma.unwrap_or(gamma);
            match check_boltz_separation(&vectors, check_gamma, delta) {
                Ok(r) => {
                    match r.status {
                        CheckStatus::SubPrecision => {
                            sep.cases += 1;
                            sep.sub_precision += 1;
                        }
                        _ => sep.record(r.pass, || {
                            format!("suite {c}: ln gap {} vs ln bound {}", r.min_log_gap, r.log_bound)
                        }),
                    }
                    let s = &mut summaries[slot];
                    s.suites += 1;
                    s.gamma = s.gamma.max(check_gamma);
                    s.min_log_margin = s.min_log_margin.min(r.min_log_gap - r.log_bound);
                }
                Err(e) => violations.push(format!("suite {c}: {e}")),
            }
        }
    }

    let tallies = vec![identity, gradient, decrease, second, concave, lower, extend, one, topk, sep];
    let pass = violations.is_empty() && tallies.iter().all(LemmaTally::ok);
    SuiteReport { pass, tallies, separation: summaries, precondition_violations: violations }
}
