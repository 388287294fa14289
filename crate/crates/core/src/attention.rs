//! Single-head softmax attention, the residual self-attention layer, the
//! any-rank contextual-mapping head and the prompt/input decomposition.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::separation::{self, SepKind, SeparationCert, Vocab};
use crate::seq::{bits_key, dense_serde, SeqMatrix};

pub mod suite;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionHead {
    #[serde(with = "dense_serde")]
    pub w_o: DMatrix<f64>,
    #[serde(with = "dense_serde")]
    pub w_v: DMatrix<f64>,
    #[serde(with = "dense_serde")]
    pub w_k: DMatrix<f64>,
    #[serde(with = "dense_serde")]
    pub w_q: DMatrix<f64>,
    pub rank_rho: usize,
}

impl AttentionHead {
    pub fn new(w_o: DMatrix<f64>, w_v: DMatrix<f64>, w_k: DMatrix<f64>, w_q: DMatrix<f64>, rank_rho: usize) -> Result<Self> {
        let (d, s) = (w_o.nrows(), w_o.ncols());
        if d == 0 || s == 0 {
            return Err(Error::Shape("W_O must be nonempty".into()));
        }
        for (name, m) in [("W_V", &w_v), ("W_K", &w_k), ("W_Q", &w_q)] {
            if m.nrows() != s || m.ncols() != d {
                return Err(Error::Shape(format!("{name} is {}×{}, expected {s}×{d}", m.nrows(), m.ncols())));
            }
        }
        if rank_rho == 0 || rank_rho > d.min(s) {
            return Err(Error::Domain(format!("ρ = {rank_rho} outside 1..={}", d.min(s))));
        }
        Ok(AttentionHead { w_o, w_v, w_k, w_q, rank_rho })
    }

    pub fn d(&self) -> usize {
        self.w_o.nrows()
    }

    pub fn s(&self) -> usize {
        self.w_o.ncols()
    }

    /// Numerical ranks of (W_K, W_Q, W_V).
    pub fn ranks(&self) -> [usize; 3] {
        [numerical_rank(&self.w_k), numerical_rank(&self.w_q), numerical_rank(&self.w_v)]
    }

    fn check_input(&self, d: usize) -> Result<()> {
        if d != self.d() {
            return Err(Error::Shape(format!("token dimension {d}, head expects {}", self.d())));
        }
        Ok(())
    }
}

/// Number of singular values above `1e-9·σ_max`.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let top = sv.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&v| v > 1e-9 * top).count()
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

/// `(W_V Z)·softmax((W_K Z)ᵀ(W_Q x))`.
pub fn attn_token(x: &DVector<f64>, z: &SeqMatrix, head: &AttentionHead) -> Result<DVector<f64>> {
    head.check_input(x.len())?;
    head.check_input(z.d())?;
    let mut w: Vec<f64> = ((&head.w_k * z.matrix()).transpose() * (&head.w_q * x)).iter().copied().collect();
    softmax_in_place(&mut w);
    Ok(&head.w_v * (z.matrix() * DVector::from_vec(w)))
}

/// Residual single-head layer: column k becomes `Z_k + W_O·attn_token(Z_k, Z)`.
pub fn self_attn_layer(z: &SeqMatrix, head: &AttentionHead) -> Result<SeqMatrix> {
    head.check_input(z.d())?;
    let zm = z.matrix();
    let keys = &head.w_k * zm;
    let values = &head.w_v * zm;
    let scores = keys.transpose() * (&head.w_q * zm);
    let mut out = zm.clone();
    let mut w = vec![0.0; z.len()];
    for c in 0..z.len() {
        w.copy_from_slice(scores.column(c).as_slice());
        softmax_in_place(&mut w);
        let mixed = &values * DVector::from_column_slice(&w);
        let update = &head.w_o * mixed;
        let mut col = out.column_mut(c);
        col += update;
    }
    SeqMatrix::from_matrix(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScaleProfile {
    /// The key-query product constant exactly as in the construction.
    PaperFaithful,
    /// Constant multiplied by a fixed factor in (0, 1].
    Desk { scale_factor: f64 },
    /// Factor chosen so the largest possible logit `c·T·γ_max²` is at most `max_logit`.
    DeskLogitBudget { max_logit: f64 },
}

impl Default for ScaleProfile {
    fn default() -> Self {
        ScaleProfile::DeskLogitBudget { max_logit: 8.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextualParams {
    pub eps: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub delta_sep: f64,
    pub profile: ScaleProfile,
}

impl ContextualParams {
    /// Defaults δ_sep to `4 ln L`, with `L` floored at 2 so a single-token
    /// context still gets a nonzero key-query product.
    pub fn new(eps: f64, gamma_min: f64, gamma_max: f64, vocab_size: usize, seq_len: usize, profile: ScaleProfile) -> Result<Self> {
        let p = ContextualParams {
            eps,
            gamma_min,
            gamma_max,
            vocab_size,
            seq_len,
            delta_sep: 4.0 * (seq_len.max(2) as f64).ln(),
            profile,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.gamma_min > 0.0 && self.gamma_max > self.gamma_min) {
            return Err(Error::Domain(format!(
                "need ε > 0 and γ_max > γ_min > 0, got ε = {}, γ = ({}, {})",
                self.eps, self.gamma_min, self.gamma_max
            )));
        }
        if self.vocab_size == 0 || self.seq_len == 0 || !(self.delta_sep > 0.0) {
            return Err(Error::Domain("need |𝒱| ≥ 1, L ≥ 1 and δ_sep > 0".into()));
        }
        match self.profile {
            ScaleProfile::Desk { scale_factor } if !(scale_factor > 0.0 && scale_factor <= 1.0) => {
                Err(Error::Domain(format!("desk scale factor {scale_factor} outside (0, 1]")))
            }
            ScaleProfile::DeskLogitBudget { max_logit } if !(max_logit > 0.0) => {
                Err(Error::Domain(format!("logit budget {max_logit} must be positive")))
            }
            _ => Ok(()),
        }
    }

    pub fn kappa(&self) -> f64 {
        self.gamma_max / self.gamma_min
    }

    /// `(|𝒱|+1)⁴·d·δ_sep/(ε·γ_min)`.
    pub fn key_query_product(&self, d: usize) -> f64 {
        ((self.vocab_size + 1) as f64).powi(4) * d as f64 * self.delta_sep / (self.eps * self.gamma_min)
    }

    pub fn scale_factor(&self, d: usize) -> f64 {
        match self.profile {
            ScaleProfile::PaperFaithful => 1.0,
            ScaleProfile::Desk { scale_factor } => scale_factor,
            ScaleProfile::DeskLogitBudget { max_logit } => {
                (max_logit / (self.key_query_product(d) * self.gamma_max * self.gamma_max)).min(1.0)
            }
        }
    }
}

/// `ln(ε·ln²(L)·e^{−2γ}/(4γ))` for logit bound `γ`; `None` when `L = 1`
/// makes the bound exactly zero.
fn log_id_gap_bound(eps: f64, seq_len: usize, gamma: f64) -> Option<f64> {
    (seq_len > 1).then(|| eps.ln() + 2.0 * (seq_len as f64).ln().ln() - 2.0 * gamma - 4f64.ln() - gamma.ln())
}

/// Every constant the construction used, plus the gap bounds it implies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextualCertificate {
    pub params: ContextualParams,
    pub d: usize,
    pub s: usize,
    pub rho: usize,
    pub seed: u64,
    pub scale_factor: f64,
    /// `|p₁ᵀp₁′|` before scaling.
    pub key_query_product: f64,
    /// `|p₁ᵀp₁′|` actually used.
    pub key_query_product_used: f64,
    /// `c·T·γ_max²`, a bound on every logit.
    pub max_logit: f64,
    /// `c·δ_sep`, the key-query separation the head must exceed.
    pub key_query_gap_target: f64,
    #[serde(with = "crate::seq::inf_as_null")]
    pub key_query_gap_measured: f64,
    pub secondary_scale: f64,
    /// `‖W_O p″_i‖` for every i.
    pub output_norm: f64,
    /// `γ_max + ε/4`, the ID norm bound.
    pub id_norm_bound: f64,
    /// `ε·ln²(L)·e^{−2γ}/(4γ)` at the logit bound actually used.
    pub id_gap_bound: f64,
    pub log_id_gap_bound: Option<f64>,
    /// Same bound with the unscaled key-query product.
    pub log_id_gap_bound_unscaled: Option<f64>,
    /// `−5ε⁻¹|𝒱|⁴dκγ_max ln L`, the simplified closed form.
    pub log_id_gap_bound_simplified: f64,
    pub separating_vector: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextualHead {
    pub head: AttentionHead,
    pub certificate: ContextualCertificate,
    pub vocab: Vec<Vec<f64>>,
}

impl ContextualHead {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let h: ContextualHead = serde_json::from_str(s)?;
        AttentionHead::new(h.head.w_o.clone(), h.head.w_v.clone(), h.head.w_k.clone(), h.head.w_q.clone(), h.head.rank_rho)?;
        Ok(h)
    }
}

fn uniform_vec(rng: &mut rng::Rng, n: usize, eta: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| if eta > 0.0 { rng.gen_range(-eta..=eta) } else { 0.0 })
}

/// Orthonormalizes `vs` in order; `None` if they are numerically dependent.
fn gram_schmidt(vs: &[DVector<f64>]) -> Option<Vec<DVector<f64>>> {
    let mut out: Vec<DVector<f64>> = Vec::with_capacity(vs.len());
    for v in vs {
        let mut w = v.clone();
        for _ in 0..2 {
            for o in &out {
                w -= o * o.dot(&w);
            }
        }
        let n = w.norm();
        if n < 1e-8 * v.norm().max(f64::MIN_POSITIVE) {
            return None;
        }
        out.push(w / n);
    }
    Some(out)
}

fn min_key_query_gap(head: &AttentionHead, tokens: &[DVector<f64>]) -> f64 {
    let keys: Vec<DVector<f64>> = tokens.iter().map(|v| &head.w_k * v).collect();
    let queries: Vec<DVector<f64>> = tokens.iter().map(|v| &head.w_q * v).collect();
    let mut gap = f64::INFINITY;
    for q in &queries {
        for a in 0..keys.len() {
            for b in a + 1..keys.len() {
                gap = gap.min((keys[a].dot(q) - keys[b].dot(q)).abs());
            }
        }
    }
    gap
}

/// Builds a rank-ρ head that is a contextual mapping on sequences over `vocab`.
///
/// The key-query product is dominated by `p₁q₁ᵀ` with `q₁` separating
/// `𝒱 ∪ {0}`; the other components are of size `1e-6·√T` and only lift the
/// rank. `W_O = t·Σ o_i p″_iᵀ` with orthonormal `p″_i`, so `‖W_O p″_i‖ = t`.
pub fn build_contextual_head(vocab: &Vocab, params: &ContextualParams, s: usize, rho: usize, seed: u64) -> Result<ContextualHead> {
    params.validate()?;
    let d = vocab.d();
    if vocab.len() != params.vocab_size {
        return Err(Error::Precondition(format!("|𝒱| = {} but params say {}", vocab.len(), params.vocab_size)));
    }
    if s == 0 || rho == 0 || rho > d.min(s) {
        return Err(Error::Domain(format!("need s ≥ 1 and 1 ≤ ρ ≤ min(d, s), got s = {s}, ρ = {rho}, d = {d}")));
    }
    let cert = SeparationCert::new(params.gamma_min, params.gamma_max, params.eps, SepKind::Full)?;
    let vocab_seq = SeqMatrix::from_columns(vocab.tokens())?;
    let verdict = separation::check_tokenwise(std::slice::from_ref(&vocab_seq), &cert)?;
    if let Some(v) = verdict.first_violation {
        return Err(Error::Precondition(format!("vocabulary is not (γ_min, γ_max, ε)-separated: {v:?}")));
    }

    let mut points = vocab.tokens().to_vec();
    points.push(DVector::zeros(d));
    let q1 = separation::find_separating_unit_vector(&points, seed, None)?;

    let t_unscaled = params.key_query_product(d);
    let scale = params.scale_factor(d);
    let t_used = scale * t_unscaled;
    let eta = 1e-6 * t_used.sqrt();
    let out_norm = params.eps / (4.0 * rho as f64 * params.gamma_max);
    let target = scale * params.delta_sep;

    let mut rng = rng::stream(seed, "contextual-head");
    const ATTEMPTS: usize = 32;
    for _ in 0..ATTEMPTS {
        let e = separation::sphere_draw(&mut rng, s);
        let p1 = &e * t_used.sqrt();
        let mut w_k = &p1 * q1.transpose();
        let mut w_q = w_k.clone();
        for _ in 1..rho {
            w_k += uniform_vec(&mut rng, s, eta) * separation::sphere_draw(&mut rng, d).transpose();
            w_q += uniform_vec(&mut rng, s, eta) * separation::sphere_draw(&mut rng, d).transpose();
        }
        let p_values = DMatrix::from_fn(s, rho, |_, _| StandardNormal.sample(&mut rng)).qr().q();
        let mut q_values = vec![q1.clone()];
        q_values.extend((1..rho).map(|_| separation::sphere_draw(&mut rng, d)));
        let Some(outs) = gram_schmidt(&q_values) else { continue };
        let mut w_v = DMatrix::zeros(s, d);
        let mut w_o = DMatrix::zeros(d, s);
        for i in 0..rho {
            let p = p_values.column(i);
            w_v += p * q_values[i].transpose();
            w_o += &outs[i] * p.transpose() * out_norm;
        }
        let head = AttentionHead::new(w_o, w_v, w_k, w_q, rho)?;
        if head.ranks() != [rho; 3] {
            continue;
        }
        let measured = if vocab.len() > 1 { min_key_query_gap(&head, vocab.tokens()) } else { f64::INFINITY };
        if measured <= target {
            return Err(Error::Verification(format!(
                "key-query gap {measured} does not exceed the target {target}"
            )));
        }
        let gamma = t_used * params.gamma_max * params.gamma_max;
        let log_bound = log_id_gap_bound(params.eps, params.seq_len, gamma);
        let certificate = ContextualCertificate {
            params: params.clone(),
            d,
            s,
            rho,
            seed,
            scale_factor: scale,
            key_query_product: t_unscaled,
            key_query_product_used: t_used,
            max_logit: gamma,
            key_query_gap_target: target,
            key_query_gap_measured: measured,
            secondary_scale: eta,
            output_norm: out_norm,
            id_norm_bound: params.gamma_max + params.eps / 4.0,
            id_gap_bound: log_bound.map_or(0.0, f64::exp),
            log_id_gap_bound: log_bound,
            log_id_gap_bound_unscaled: log_id_gap_bound(
                params.eps,
                params.seq_len,
                t_unscaled * params.gamma_max * params.gamma_max,
            ),
            log_id_gap_bound_simplified: -5.0 / params.eps
                * (params.vocab_size as f64).powi(4)
                * d as f64
                * params.kappa()
                * params.gamma_max
                * (params.seq_len as f64).ln(),
            separating_vector: q1.iter().copied().collect(),
        };
        let vocab = vocab.tokens().iter().map(|t| t.iter().copied().collect()).collect();
        return Ok(ContextualHead { head, certificate, vocab });
    }
    Err(Error::SearchFailure { attempts: ATTEMPTS })
}

#[derive(Clone, Debug, Serialize)]
pub struct ContextIds {
    pub ids: Vec<SeqMatrix>,
    /// `‖Ψ‖` per sequence and token, where Ψ is the attention update.
    pub psi_norms: Vec<Vec<f64>>,
    pub max_psi: f64,
    pub psi_bound: f64,
    pub psi_ok: bool,
}

/// Context IDs `q(Z) = self_attn_layer(Z)` after validating the hypotheses
/// the head was built for: tokens from its vocabulary, tokenwise separated,
/// no token repeated within a sequence, length L.
pub fn context_ids(seqs: &[SeqMatrix], chead: &ContextualHead) -> Result<ContextIds> {
    let params = &chead.certificate.params;
    let known: std::collections::HashSet<Vec<u64>> = chead.vocab.iter().map(|t| bits_key(t.iter())).collect();
    for (i, z) in seqs.iter().enumerate() {
        chead.head.check_input(z.d())?;
        if z.len() != params.seq_len {
            return Err(Error::Precondition(format!("sequence {i} has length {}, head built for L = {}", z.len(), params.seq_len)));
        }
        let keys: Vec<Vec<u64>> = z.columns().map(|c| bits_key(c.iter())).collect();
        for (k, key) in keys.iter().enumerate() {
            if !known.contains(key) {
                return Err(Error::Precondition(format!("token {k} of sequence {i} is outside the head's vocabulary")));
            }
            if keys[..k].contains(key) {
                return Err(Error::Precondition(format!("sequence {i} repeats token {k}")));
            }
        }
    }
    let cert = SeparationCert::new(params.gamma_min, params.gamma_max, params.eps, SepKind::Full)?;
    if let Some(v) = separation::check_tokenwise(seqs, &cert)?.first_violation {
        return Err(Error::Precondition(format!("sequences are not tokenwise separated: {v:?}")));
    }

    let mut ids = Vec::with_capacity(seqs.len());
    let mut psi_norms = Vec::with_capacity(seqs.len());
    let mut max_psi = 0.0_f64;
    for z in seqs {
        let q = self_attn_layer(z, &chead.head)?;
        let norms: Vec<f64> = (0..z.len()).map(|k| (q.col(k) - z.col(k)).norm()).collect();
        max_psi = norms.iter().copied().fold(max_psi, f64::max);
        psi_norms.push(norms);
        ids.push(q);
    }
    let psi_bound = params.eps / 4.0;
    let psi_ok = max_psi < psi_bound;
    if !psi_ok && params.profile == ScaleProfile::PaperFaithful {
        return Err(Error::Verification(format!("‖Ψ‖ = {max_psi} is not below ε/4 = {psi_bound}")));
    }
    Ok(ContextIds { ids, psi_norms, max_psi, psi_bound, psi_ok })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Decomposition {
    pub lambda: f64,
    pub att_p: DVector<f64>,
    pub att_x: DVector<f64>,
}

impl Decomposition {
    pub fn combined(&self) -> DVector<f64> {
        &self.att_p * self.lambda + &self.att_x * (1.0 - self.lambda)
    }
}

/// Splits `W_O·attn_token(x, [P, X])` into `λ·attP + (1−λ)·attX`, with λ the
/// prompt block's share of the softmax mass.
pub fn prompt_decomposition(x: &DVector<f64>, p: &SeqMatrix, xs: &SeqMatrix, head: &AttentionHead) -> Result<Decomposition> {
    head.check_input(x.len())?;
    head.check_input(p.d())?;
    head.check_input(xs.d())?;
    let query = &head.w_q * x;
    let lp = (&head.w_k * p.matrix()).transpose() * &query;
    let lx = (&head.w_k * xs.matrix()).transpose() * &query;
    let m = lp.iter().chain(lx.iter()).copied().fold(f64::NEG_INFINITY, f64::max);
    let mass_p: f64 = lp.iter().map(|l| (l - m).exp()).sum();
    let mass_x: f64 = lx.iter().map(|l| (l - m).exp()).sum();
    Ok(Decomposition {
        lambda: mass_p / (mass_p + mass_x),
        att_p: &head.w_o * attn_token(x, p, head)?,
        att_x: &head.w_o * attn_token(x, xs, head)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_head(r: &mut rng::Rng, d: usize, s: usize, range: f64) -> AttentionHead {
        let mut m = |a, b| DMatrix::from_fn(a, b, |_, _| r.gen_range(-range..=range));
        AttentionHead::new(m(d, s), m(s, d), m(s, d), m(s, d), 1).unwrap()
    }

    fn random_seq(r: &mut rng::Rng, d: usize, l: usize, range: f64) -> SeqMatrix {
        SeqMatrix::from_matrix(DMatrix::from_fn(d, l, |_, _| r.gen_range(-range..=range))).unwrap()
    }

    fn naive_attn(x: &DVector<f64>, z: &SeqMatrix, h: &AttentionHead) -> DVector<f64> {
        let (d, s, l) = (h.d(), h.s(), z.len());
        let mut logits = vec![0.0; l];
        for (c, logit) in logits.iter_mut().enumerate() {
            for a in 0..s {
                let mut kz = 0.0;
                let mut qx = 0.0;
                for b in 0..d {
                    kz += h.w_k[(a, b)] * z.matrix()[(b, c)];
                    qx += h.w_q[(a, b)] * x[b];
                }
                *logit += kz * qx;
            }
        }
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logits.iter().map(|v| (v - m).exp()).sum();
        let mut out = DVector::zeros(s);
        for c in 0..l {
            let w = (logits[c] - m).exp() / total;
            for a in 0..s {
                let mut v = 0.0;
                for b in 0..d {
                    v += h.w_v[(a, b)] * z.matrix()[(b, c)];
                }
                out[a] += w * v;
            }
        }
        out
    }

    #[test]
    fn single_column_ignores_weights() {
        let mut r = rng::stream(1, "attn-test");
        let h = random_head(&mut r, 3, 2, 2.0);
        let z = random_seq(&mut r, 3, 1, 1.0);
        let x = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let out = attn_token(&x, &z, &h).unwrap();
        assert!((out - &h.w_v * z.column_vec(0)).amax() < 1e-14);
        let y = self_attn_layer(&z, &h).unwrap();
        let expect = z.matrix() + &h.w_o * &h.w_v * z.matrix();
        assert!((y.matrix() - expect).amax() < 1e-13);
    }

    #[test]
    fn zero_keys_average_values() {
        let mut r = rng::stream(2, "attn-test");
        let mut h = random_head(&mut r, 2, 3, 1.0);
        h.w_k.fill(0.0);
        let z = random_seq(&mut r, 2, 4, 1.0);
        let out = attn_token(&z.column_vec(0), &z, &h).unwrap();
        let mean = (&h.w_v * z.matrix()).column_mean();
        assert!((out - mean).amax() < 1e-14);
    }

    #[test]
    fn zero_output_is_identity() {
        let mut r = rng::stream(3, "attn-test");
        let mut h = random_head(&mut r, 2, 2, 1.0);
        h.w_o.fill(0.0);
        let z = random_seq(&mut r, 2, 5, 3.0);
        assert_eq!(self_attn_layer(&z, &h).unwrap(), z);
    }

    #[test]
    fn matches_naive_loops() {
        for t in 0..200 {
            let mut r = rng::case_stream(4, "attn-naive", t);
            let (d, s, l) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..7));
            let h = random_head(&mut r, d, s, 1.5);
            let z = random_seq(&mut r, d, l, 2.0);
            let x = DVector::from_fn(d, |_, _| r.gen_range(-2.0..2.0));
            let fast = attn_token(&x, &z, &h).unwrap();
            assert!((fast - naive_attn(&x, &z, &h)).amax() <= 1e-12);
            let layer = self_attn_layer(&z, &h).unwrap();
            for k in 0..l {
                let expect = z.column_vec(k) + &h.w_o * naive_attn(&z.column_vec(k), &z, &h);
                assert!((layer.column_vec(k) - expect).amax() <= 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let mut r = rng::stream(5, "attn-test");
        let h = random_head(&mut r, 2, 2, 1.0);
        let z = random_seq(&mut r, 3, 2, 1.0);
        assert!(matches!(self_attn_layer(&z, &h), Err(Error::Shape(_))));
        assert!(AttentionHead::new(DMatrix::zeros(2, 3), DMatrix::zeros(2, 2), DMatrix::zeros(3, 2), DMatrix::zeros(3, 2), 1).is_err());
    }

    proptest! {
        #[test]
        fn layer_is_permutation_equivariant(seed in 0u64..1000, l in 2usize..6) {
            let mut r = rng::stream(seed, "perm");
            let h = random_head(&mut r, 3, 2, 1.0);
            let z = random_seq(&mut r, 3, l, 2.0);
            let mut perm: Vec<usize> = (0..l).collect();
            perm.rotate_left(1);
            perm.swap(0, l - 1);
            let cols: Vec<DVector<f64>> = perm.iter().map(|&k| z.column_vec(k)).collect();
            let zp = SeqMatrix::from_columns(&cols).unwrap();
            let y = self_attn_layer(&z, &h).unwrap();
            let yp = self_attn_layer(&zp, &h).unwrap();
            for (pos, &k) in perm.iter().enumerate() {
                prop_assert!((yp.column_vec(pos) - y.column_vec(k)).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn decomposition_of_duplicate_blocks() {
        let mut r = rng::stream(6, "decomp");
        let h = random_head(&mut r, 2, 3, 1.0);
        let p = random_seq(&mut r, 2, 3, 1.0);
        let x = DVector::from_vec(vec![0.5, -0.25]);
        let dec = prompt_decomposition(&x, &p, &p, &h).unwrap();
        assert!((dec.lambda - 0.5).abs() < 1e-15);
        assert_eq!(dec.att_p, dec.att_x);
    }

    #[test]
    fn decomposition_of_single_columns_is_logistic() {
        let mut r = rng::stream(7, "decomp");
        let h = random_head(&mut r, 2, 2, 1.0);
        let p = random_seq(&mut r, 2, 1, 2.0);
        let xs = random_seq(&mut r, 2, 1, 2.0);
        let x = DVector::from_vec(vec![1.0, -2.0]);
        let q = &h.w_q * &x;
        let diff = (&h.w_k * p.column_vec(0)).dot(&q) - (&h.w_k * xs.column_vec(0)).dot(&q);
        let dec = prompt_decomposition(&x, &p, &xs, &h).unwrap();
        assert!((dec.lambda - 1.0 / (1.0 + (-diff).exp())).abs() < 1e-15);
    }

    #[test]
    fn decomposition_reconstructs_full_attention() {
        for t in 0..300 {
            let mut r = rng::case_stream(8, "decomp", t);
            let (d, s) = (r.gen_range(1..5), r.gen_range(1..5));
            let h = random_head(&mut r, d, s, 3.0);
            let (lp, lx) = (r.gen_range(1..5), r.gen_range(1..5));
            let p = random_seq(&mut r, d, lp, 3.0);
            let xs = random_seq(&mut r, d, lx, 3.0);
            let x = DVector::from_fn(d, |_, _| r.gen_range(-3.0..3.0));
            let dec = prompt_decomposition(&x, &p, &xs, &h).unwrap();
            let full = &h.w_o * attn_token(&x, &p.hcat(&xs).unwrap(), &h).unwrap();
            let err = (dec.combined() - &full).amax() / full.amax().max(1e-300);
            assert!(err <= 1e-10, "case {t}: {err}");
            // Saturates to exactly 0 or 1 once the block masses differ by e^±745.
            assert!((0.0..=1.0).contains(&dec.lambda));
        }
    }

    fn two_token_vocab() -> (Vocab, Vec<SeqMatrix>) {
        let seqs = vec![
            SeqMatrix::from_row_major(2, 2, &[1.0, 0.0, 0.0, 1.0]).unwrap(),
            SeqMatrix::from_row_major(2, 2, &[0.0, 1.0, 1.0, 0.0]).unwrap(),
        ];
        (separation::extract_vocab(&seqs), seqs)
    }

    #[test]
    fn small_desk_head_is_contextual() {
        let (vocab, seqs) = two_token_vocab();
        let params = ContextualParams::new(1.0, 0.5, 1.5, 2, 2, ScaleProfile::Desk { scale_factor: 1e-4 }).unwrap();
        let ch = build_contextual_head(&vocab, &params, 2, 1, 0).unwrap();
        let out = context_ids(&seqs, &ch).unwrap();
        assert!(out.psi_ok);
        let report = separation::verify_contextual(&out.ids, &seqs, ch.certificate.id_norm_bound, params.eps / 2.0).unwrap();
        assert!(report.pass, "{report:?}");
        assert!(ch.certificate.key_query_gap_measured > ch.certificate.key_query_gap_target);
    }

    #[test]
    fn key_query_gap_exhaustive() {
        let pts = [[1.0, 0.2, 0.0], [0.0, 1.1, 0.3], [-0.9, 0.0, 0.5], [0.1, -1.2, -0.2]];
        let cols: Vec<DVector<f64>> = pts.iter().map(|p| DVector::from_row_slice(p)).collect();
        let vocab = Vocab::from_tokens(cols.clone()).unwrap();
        for profile in [ScaleProfile::PaperFaithful, ScaleProfile::Desk { scale_factor: 1e-4 }, ScaleProfile::default()] {
            let params = ContextualParams::new(0.5, 0.9, 1.4, 4, 3, profile).unwrap();
            let ch = build_contextual_head(&vocab, &params, 3, 2, 9).unwrap();
            let target = params.scale_factor(3) * params.delta_sep;
            for c in &cols {
                let q = &ch.head.w_q * c;
                for a in &cols {
                    for b in &cols {
                        if a != b {
                            let gap = ((&ch.head.w_k * a).dot(&q) - (&ch.head.w_k * b).dot(&q)).abs();
                            assert!(gap > target, "{profile:?}: {gap} ≤ {target}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn full_rank_construction() {
        let cols: Vec<DVector<f64>> =
            [[1.0, 0.0, 0.1], [0.0, 1.0, -0.2], [0.2, 0.3, 1.0]].iter().map(|p| DVector::from_row_slice(p)).collect();
        let vocab = Vocab::from_tokens(cols).unwrap();
        let params = ContextualParams::new(0.5, 0.8, 1.2, 3, 3, ScaleProfile::default()).unwrap();
        for (s, rho) in [(3, 3), (5, 3), (2, 2), (4, 1)] {
            let ch = build_contextual_head(&vocab, &params, s, rho, 4).unwrap();
            assert_eq!(ch.head.ranks(), [rho; 3]);
            assert_eq!(numerical_rank(&ch.head.w_o), rho);
        }
    }

    #[test]
    fn output_matrix_norms() {
        let cols: Vec<DVector<f64>> = [[1.0, 0.0], [0.0, 1.0]].iter().map(|p| DVector::from_row_slice(p)).collect();
        let vocab = Vocab::from_tokens(cols).unwrap();
        let params = ContextualParams::new(0.5, 0.8, 1.2, 2, 2, ScaleProfile::default()).unwrap();
        let ch = build_contextual_head(&vocab, &params, 3, 2, 1).unwrap();
        // Both factor sets are orthonormal, so every nonzero singular value is t.
        let sv = ch.head.w_o.clone().svd(false, false).singular_values;
        let t = ch.certificate.output_norm;
        assert!(sv.iter().filter(|v| **v > 1e-12).all(|v| (v - t).abs() < 1e-14));
        assert!((t - 0.5 / (4.0 * 2.0 * 1.2)).abs() < 1e-16);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (vocab, seqs) = two_token_vocab();
        let params = ContextualParams::new(1.0, 0.5, 1.5, 2, 2, ScaleProfile::default()).unwrap();
        assert!(build_contextual_head(&vocab, &params, 2, 3, 0).is_err());
        let tight = ContextualParams { eps: 2.0, ..params.clone() };
        assert!(matches!(build_contextual_head(&vocab, &tight, 2, 1, 0), Err(Error::Precondition(_))));
        let ch = build_contextual_head(&vocab, &params, 2, 1, 0).unwrap();
        let dup = SeqMatrix::from_row_major(2, 2, &[1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(context_ids(&[dup], &ch), Err(Error::Precondition(_))));
        let short = seqs[0].head(1).unwrap();
        assert!(context_ids(&[short], &ch).is_err());
    }

    #[test]
    fn head_json_round_trip() {
        let (vocab, _) = two_token_vocab();
        let params = ContextualParams::new(1.0, 0.5, 1.5, 2, 2, ScaleProfile::default()).unwrap();
        let ch = build_contextual_head(&vocab, &params, 2, 1, 3).unwrap();
        let back = ContextualHead::from_json(&ch.to_json().unwrap()).unwrap();
        assert_eq!(back, ch);
    }

    #[test]
    fn construction_is_deterministic() {
        let (vocab, _) = two_token_vocab();
        let params = ContextualParams::new(1.0, 0.5, 1.5, 2, 2, ScaleProfile::default()).unwrap();
        let a = build_contextual_head(&vocab, &params, 3, 2, 11).unwrap();
        let b = build_contextual_head(&vocab, &params, 3, 2, 11).unwrap();
        assert_eq!(a, b);
    }
}
