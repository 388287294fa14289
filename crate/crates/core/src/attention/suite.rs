//! Seeded random suites for the contextual-mapping construction.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{build_contextual_head, context_ids, ContextualParams, ScaleProfile};
use crate::boltzmann::CheckStatus;
use crate::error::Result;
use crate::rng;
use crate::separation::{self, sphere_draw};
use crate::seq::{bits_key, SeqMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContextualSuiteConfig {
    pub seed: u64,
    pub suites: usize,
    pub max_vocab: usize,
    pub max_d: usize,
    pub max_len: usize,
    pub max_seqs: usize,
    pub eps: f64,
    pub profile: ScaleProfile,
}

impl Default for ContextualSuiteConfig {
    fn default() -> Self {
        ContextualSuiteConfig {
            seed: 0,
            suites: 50,
            max_vocab: 6,
            max_d: 4,
            max_len: 4,
            max_seqs: 6,
            eps: 0.5,
            profile: ScaleProfile::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ContextualCase {
    pub index: u64,
    pub d: usize,
    pub s: usize,
    pub rho: usize,
    pub seqs: Vec<SeqMatrix>,
    pub params: ContextualParams,
}

/// Token norms are drawn from [1, 2] and tokens kept at least `1.2·ε` apart,
/// so γ_min = 0.95, γ_max = 2.05 and ε-separation hold with margin.
pub fn generate_case(cfg: &ContextualSuiteConfig, index: u64) -> Result<ContextualCase> {
    let mut r = rng::case_stream(cfg.seed, "contextual-suite", index);
    let d = r.gen_range(1..=cfg.max_d.max(1));
    let want = r.gen_range(2..=cfg.max_vocab.max(2));
    let mut pool: Vec<DVector<f64>> = Vec::new();
    for _ in 0..200 {
        if pool.len() == want {
            break;
        }
        let v = sphere_draw(&mut r, d) * r.gen_range(1.0..2.0);
        if pool.iter().all(|p| (p - &v).norm() > 1.2 * cfg.eps) {
            pool.push(v);
        }
    }
    let len = r.gen_range(1..=cfg.max_len.min(pool.len()).max(1));
    let count = r.gen_range(1..=cfg.max_seqs.max(1));
    let seqs: Vec<SeqMatrix> = (0..count)
        .map(|_| {
            let cols: Vec<DVector<f64>> = pool.choose_multiple(&mut r, len).cloned().collect();
            SeqMatrix::from_columns(&cols)
        })
        .collect::<Result<_>>()?;
    let vocab_size = separation::extract_vocab(&seqs).len();
    let s = r.gen_range(1..=4);
    let rho = r.gen_range(1..=d.min(s));
    let params = ContextualParams::new(cfg.eps, 0.95, 2.05, vocab_size, len, cfg.profile)?;
    Ok(ContextualCase { index, d, s, rho, seqs, params })
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseOutcome {
    pub index: u64,
    pub pass: bool,
    pub vocab_size: usize,
    pub d: usize,
    pub seq_len: usize,
    pub sequences: usize,
    pub rho: usize,
    pub max_logit: f64,
    pub id_gap_bound: f64,
    pub max_psi: f64,
    pub psi_ok: bool,
    pub verify_pass: bool,
    pub gap_status: CheckStatus,
    pub max_id_norm: f64,
    /// Smallest ID distance over distinct tokens; must exceed ε/2.
    pub min_distinct_token_gap: f64,
    /// Smallest ID distance over equal tokens with different vocabularies.
    pub min_same_token_gap: Option<f64>,
}

pub fn run_case(case: &ContextualCase, seed: u64) -> Result<CaseOutcome> {
    let vocab = separation::extract_vocab(&case.seqs);
    let ch = build_contextual_head(&vocab, &case.params, case.s, case.rho, seed)?;
    let out = context_ids(&case.seqs, &ch)?;
    let cert = &ch.certificate;
    let report = separation::verify_contextual(&out.ids, &case.seqs, cert.id_norm_bound, cert.id_gap_bound)?;

    let keys: Vec<Vec<Vec<u64>>> =
        case.seqs.iter().map(|s| s.columns().map(|c| bits_key(c.iter())).collect()).collect();
    let mut distinct = f64::INFINITY;
    let mut same: Option<f64> = None;
    for i in 0..case.seqs.len() {
        for j in i..case.seqs.len() {
            for k in 0..case.params.seq_len {
                for l in 0..case.params.seq_len {
                    if (i, k) >= (j, l) {
                        continue;
                    }
                    let gap = (out.ids[i].col(k) - out.ids[j].col(l)).norm();
                    if keys[i][k] != keys[j][l] {
                        distinct = distinct.min(gap);
                    } else if vocab.sequence_vocab(i) != vocab.sequence_vocab(j) {
                        same = Some(same.map_or(gap, |g| g.min(gap)));
                    }
                }
            }
        }
    }
    let same_ok = same.map_or(true, |g| g > 0.0 && g > cert.id_gap_bound);
    let pass = report.pass && out.psi_ok && distinct > case.params.eps / 2.0 && same_ok;
    Ok(CaseOutcome {
        index: case.index,
        pass,
        vocab_size: case.params.vocab_size,
        d: case.d,
        seq_len: case.params.seq_len,
        sequences: case.seqs.len(),
        rho: case.rho,
        max_logit: cert.max_logit,
        id_gap_bound: cert.id_gap_bound,
        max_psi: out.max_psi,
        psi_ok: out.psi_ok,
        verify_pass: report.pass,
        gap_status: report.gaps,
        max_id_norm: report.max_norm,
        min_distinct_token_gap: distinct,
        min_same_token_gap: same,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ContextualSuiteReport {
    pub pass: bool,
    pub suites: usize,
    pub passed: usize,
    pub cases: Vec<CaseOutcome>,
}

pub fn run_contextual_suite(cfg: &ContextualSuiteConfig) -> Result<ContextualSuiteReport> {
    let cases = (0..cfg.suites as u64)
        .map(|i| {
            let case = generate_case(cfg, i)?;
            run_case(&case, cfg.seed.wrapping_add(i))
        })
        .collect::<Result<Vec<_>>>()?;
    let passed = cases.iter().filter(|c| c.pass).count();
    Ok(ContextualSuiteReport { pass: passed == cases.len(), suites: cases.len(), passed, cases })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_cases_satisfy_hypotheses() {
        let cfg = ContextualSuiteConfig::default();
        for i in 0..20 {
            let case = generate_case(&cfg, i).unwrap();
            for s in &case.seqs {
                let keys: Vec<_> = s.columns().map(|c| bits_key(c.iter())).collect();
                let mut sorted = keys.clone();
                sorted.sort();
                sorted.dedup();
                assert_eq!(sorted.len(), keys.len());
            }
            assert!(case.params.vocab_size <= 6 && case.d <= 4 && case.params.seq_len <= 4 && case.seqs.len() <= 6);
        }
    }

    #[test]
    fn small_suite_passes() {
        let cfg = ContextualSuiteConfig { suites: 10, ..Default::default() };
        let report = run_contextual_suite(&cfg).unwrap();
        for c in &report.cases {
            assert!(c.pass, "{c:?}");
        }
    }
}
