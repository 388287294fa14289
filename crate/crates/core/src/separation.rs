//! Tokenwise separateness, vocabularies, separating directions and the
//! contextual-mapping check.

use std::collections::{BTreeSet, HashMap};

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::boltzmann::{CheckStatus, SUB_PRECISION_FLOOR};
use crate::error::{Error, Result};
use crate::rng;
use crate::seq::{bits_key, SeqMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SepKind {
    /// Norms in (γ_min, γ_max) and distinct tokens more than δ apart.
    Full,
    /// Norms below γ_max and distinct tokens more than δ apart.
    GammaDelta,
    /// Distinct tokens more than δ apart.
    DeltaOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationCert {
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub delta: f64,
    pub kind: SepKind,
}

impl SeparationCert {
    pub fn new(gamma_min: f64, gamma_max: f64, delta: f64, kind: SepKind) -> Result<Self> {
        if !(gamma_min >= 0.0 && gamma_max > gamma_min && delta > 0.0) {
            return Err(Error::Domain(format!(
                "need 0 ≤ γ_min < γ_max and δ > 0, got ({gamma_min}, {gamma_max}, {delta})"
            )));
        }
        Ok(SeparationCert { gamma_min, gamma_max, delta, kind })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    NormTooSmall { seq: usize, token: usize, norm: f64 },
    NormTooLarge { seq: usize, token: usize, norm: f64 },
    TooClose { a: (usize, usize), b: (usize, usize), distance: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TokenwiseVerdict {
    pub separated: bool,
    pub first_violation: Option<Violation>,
}

fn check_shapes(seqs: &[SeqMatrix]) -> Result<()> {
    if let Some(first) = seqs.first() {
        for (i, s) in seqs.iter().enumerate() {
            if s.d() != first.d() || s.len() != first.len() {
                return Err(Error::Shape(format!(
                    "sequence {i} is {}×{}, expected {}×{}",
                    s.d(),
                    s.len(),
                    first.d(),
                    first.len()
                )));
            }
        }
    }
    Ok(())
}

/// Deduplicated tokens in first-appearance order, with per-sequence membership.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<DVector<f64>>,
    /// First (sequence, column) where each token appears.
    first_seen: Vec<(usize, usize)>,
    membership: Vec<BTreeSet<usize>>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<DVector<f64>>) -> Result<Self> {
        let d = tokens.first().map(|t| t.len()).ok_or_else(|| Error::Domain("empty vocabulary".into()))?;
        if tokens.iter().any(|t| t.len() != d) {
            return Err(Error::Shape("vocabulary tokens of different dimensions".into()));
        }
        let seq = SeqMatrix::from_columns(&tokens)?;
        Ok(extract_vocab(&[seq]))
    }

    pub fn tokens(&self) -> &[DVector<f64>] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn d(&self) -> usize {
        self.tokens.first().map_or(0, |t| t.len())
    }

    /// Token indices used by sequence `i`.
    pub fn sequence_vocab(&self, i: usize) -> &BTreeSet<usize> {
        &self.membership[i]
    }

    pub fn num_sequences(&self) -> usize {
        self.membership.len()
    }
}

pub fn extract_vocab(seqs: &[SeqMatrix]) -> Vocab {
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut tokens = Vec::new();
    let mut first_seen = Vec::new();
    let mut membership = Vec::with_capacity(seqs.len());
    for (i, s) in seqs.iter().enumerate() {
        let mut mine = BTreeSet::new();
        for (k, col) in s.columns().enumerate() {
            let id = *index.entry(bits_key(col.iter())).or_insert_with(|| {
                tokens.push(col.into_owned());
                first_seen.push((i, k));
                tokens.len() - 1
            });
            mine.insert(id);
        }
        membership.push(mine);
    }
    Vocab { tokens, first_seen, membership }
}

/// Tokenwise (γ_min, γ_max, δ)-separateness over all columns of all sequences.
///
/// Norms are checked per distinct token; the pairwise condition is a sweep
/// over distinct tokens sorted by their first coordinate, which prunes pairs
/// whose first coordinates already differ by more than δ.
pub fn check_tokenwise(seqs: &[SeqMatrix], cert: &SeparationCert) -> Result<TokenwiseVerdict> {
    check_shapes(seqs)?;
    let vocab = extract_vocab(seqs);
    for (t, tok) in vocab.tokens.iter().enumerate() {
        let norm = tok.norm();
        let (seq, token) = vocab.first_seen[t];
        let low = cert.kind == SepKind::Full && norm <= cert.gamma_min;
        let high = cert.kind != SepKind::DeltaOnly && norm >= cert.gamma_max;
        if low || high {
            let v = if low {
                Violation::NormTooSmall { seq, token, norm }
            } else {
                Violation::NormTooLarge { seq, token, norm }
            };
            return Ok(TokenwiseVerdict { separated: false, first_violation: Some(v) });
        }
    }
    let mut order: Vec<usize> = (0..vocab.len()).collect();
    order.sort_by(|&a, &b| vocab.tokens[a][0].total_cmp(&vocab.tokens[b][0]));
    let mut worst: Option<(usize, usize, f64)> = None;
    for (pos, &a) in order.iter().enumerate() {
        for &b in &order[pos + 1..] {
            if vocab.tokens[b][0] - vocab.tokens[a][0] > cert.delta {
                break;
            }
            let dist = (&vocab.tokens[a] - &vocab.tokens[b]).norm();
            if dist <= cert.delta {
                let key = (a.min(b), a.max(b), dist);
                if worst.map_or(true, |w| (key.0, key.1) < (w.0, w.1)) {
                    worst = Some(key);
                }
            }
        }
    }
    Ok(match worst {
        None => TokenwiseVerdict { separated: true, first_violation: None },
        Some((a, b, distance)) => TokenwiseVerdict {
            separated: false,
            first_violation: Some(Violation::TooClose {
                a: vocab.first_seen[a],
                b: vocab.first_seen[b],
                distance,
            }),
        },
    })
}

/// `(1/|𝒳|²)·√(8/(πd))`, the guaranteed projection ratio for a set of `count` points.
pub fn separating_ratio(count: usize, d: usize) -> f64 {
    (8.0 / (std::f64::consts::PI * d as f64)).sqrt() / (count * count) as f64
}

fn distinct_points(points: &[DVector<f64>]) -> Vec<&DVector<f64>> {
    let mut seen = std::collections::HashSet::new();
    points.iter().filter(|p| seen.insert(bits_key(p.iter()))).collect()
}

/// Whether `u` keeps every pairwise distance of `points` within
/// `[ratio·‖x−x′‖, ‖x−x′‖]` after projection.
pub fn separates(points: &[DVector<f64>], u: &DVector<f64>) -> bool {
    let pts = distinct_points(points);
    let ratio = separating_ratio(pts.len(), u.len());
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let diff = pts[i] - pts[j];
            let proj = u.dot(&diff).abs();
            let norm = diff.norm();
            if proj < ratio * norm || proj > norm {
                return false;
            }
        }
    }
    true
}

/// One uniform draw from the unit sphere in ℝᵈ.
pub fn sphere_draw(rng: &mut rng::Rng, d: usize) -> DVector<f64> {
    loop {
        let g = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
        let n: f64 = g.norm();
        if n > 0.0 {
            return g / n;
        }
    }
}

/// Samples unit vectors until one preserves all pairwise distances of
/// `points` up to the factor `(1/|𝒳|²)√(8/(πd))`.
///
/// `max_tries` defaults to `10·|𝒳|²`.
pub fn find_separating_unit_vector(
    points: &[DVector<f64>],
    seed: u64,
    max_tries: Option<usize>,
) -> Result<DVector<f64>> {
    let d = points.first().map(|p| p.len()).ok_or_else(|| Error::Domain("empty point set".into()))?;
    if d == 0 || points.iter().any(|p| p.len() != d) {
        return Err(Error::Shape("points must share a positive dimension".into()));
    }
    let count = distinct_points(points).len();
    let tries = max_tries.unwrap_or(10 * count * count).max(1);
    let mut rng = rng::stream(seed, "separating-unit-vector");
    for _ in 0..tries {
        let u = sphere_draw(&mut rng, d);
        if separates(points, &u) {
            return Ok(u);
        }
    }
    Err(Error::SearchFailure { attempts: tries })
}

#[derive(Clone, Debug, Serialize)]
pub struct ContextualReport {
    pub pass: bool,
    pub norms_ok: bool,
    pub gaps: CheckStatus,
    pub gamma: f64,
    pub delta: f64,
    pub max_norm: f64,
    /// Smallest distance over the pairs condition (2) constrains.
    pub min_gap: f64,
    pub min_gap_pair: Option<((usize, usize), (usize, usize))>,
    pub constrained_pairs: usize,
    /// Constrained pairs whose IDs coincide exactly.
    pub collisions: usize,
}

/// Contextual-mapping check: `‖q(Z⁽ⁱ⁾)_k‖ < γ` everywhere, and IDs more than δ apart whenever
/// the tokens differ or the sequences' vocabularies differ.
///
/// A δ below the sub-precision floor makes condition (2) vacuous; the report
/// then carries `SubPrecision` and still counts exact collisions.
pub fn verify_contextual(ids: &[SeqMatrix], seqs: &[SeqMatrix], gamma: f64, delta: f64) -> Result<ContextualReport> {
    if ids.len() != seqs.len() {
        return Err(Error::Shape(format!("{} id matrices for {} sequences", ids.len(), seqs.len())));
    }
    check_shapes(seqs)?;
    for (i, (q, z)) in ids.iter().zip(seqs).enumerate() {
        if q.d() != z.d() || q.len() != z.len() {
            return Err(Error::Shape(format!("ids[{i}] does not match seqs[{i}]")));
        }
    }
    let vocab = extract_vocab(seqs);
    let token_keys: Vec<Vec<Vec<u64>>> =
        seqs.iter().map(|s| s.columns().map(|c| bits_key(c.iter())).collect()).collect();
    let flat: Vec<(usize, usize)> =
        seqs.iter().enumerate().flat_map(|(i, s)| (0..s.len()).map(move |k| (i, k))).collect();

    let max_norm = flat.iter().map(|&(i, k)| ids[i].col(k).norm()).fold(0.0, f64::max);
    let norms_ok = max_norm < gamma;

    let mut min_gap = f64::INFINITY;
    let mut min_gap_pair = None;
    let mut constrained = 0;
    let mut collisions = 0;
    for (x, &(i, k)) in flat.iter().enumerate() {
        for &(j, l) in &flat[x + 1..] {
            let differs = vocab.sequence_vocab(i) != vocab.sequence_vocab(j) || token_keys[i][k] != token_keys[j][l];
            if !differs {
                continue;
            }
            constrained += 1;
            let gap = (ids[i].col(k) - ids[j].col(l)).norm();
            if gap == 0.0 {
                collisions += 1;
            }
            if gap < min_gap {
                min_gap = gap;
                min_gap_pair = Some(((i, k), (j, l)));
            }
        }
    }
    let gaps = if delta < SUB_PRECISION_FLOOR {
        CheckStatus::SubPrecision
    } else if min_gap > delta {
        CheckStatus::Pass
    } else {
        CheckStatus::Fail
    };
    Ok(ContextualReport {
        pass: norms_ok && gaps != CheckStatus::Fail,
        norms_ok,
        gaps,
        gamma,
        delta,
        max_norm,
        min_gap,
        min_gap_pair,
        constrained_pairs: constrained,
        collisions,
    })
}
