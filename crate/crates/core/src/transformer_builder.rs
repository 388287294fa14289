//! Explicit one-attention-layer transformers that reproduce a quantized
//! sequence function: positional encoding, a quantizer, a contextual
//! self-attention head, and an output stage keyed on context IDs.
//!
//! Family A uses many narrow layers with three-piece activations; family B
//! uses one wide ReLU layer on each side of the attention.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionHead, ContextualCertificate, ContextualHead, ContextualParams, ScaleProfile};
use crate::error::{Error, Result};
use crate::grid::{Convention, Grid};
use crate::separation::{self, Vocab};
use crate::seq::{bits_key, dense_serde, SeqMatrix};
use crate::surrogate_prompt::QuantizedSeqFn;

/// A piecewise-linear scalar function with at most three pieces, one of them
/// constant. Piece `i` covers `[breakpoints[i-1], breakpoints[i])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinear {
    breakpoints: Vec<f64>,
    /// `(slope, intercept)` per piece.
    pieces: Vec<(f64, f64)>,
}

impl PiecewiseLinear {
    pub fn new(breakpoints: Vec<f64>, pieces: Vec<(f64, f64)>) -> Result<Self> {
        if pieces.len() != breakpoints.len() + 1 || pieces.len() > 3 {
            return Err(Error::Domain(format!(
                "{} breakpoints and {} pieces; need pieces = breakpoints + 1 ≤ 3",
                breakpoints.len(),
                pieces.len()
            )));
        }
        if breakpoints.windows(2).any(|w| !(w[0] < w[1])) || breakpoints.iter().any(|b| !b.is_finite()) {
            return Err(Error::Domain("breakpoints must be finite and strictly increasing".into()));
        }
        if !pieces.iter().any(|p| p.0 == 0.0) {
            return Err(Error::Domain("at least one piece must be constant".into()));
        }
        if pieces.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
            return Err(Error::Domain("non-finite piece coefficients".into()));
        }
        Ok(PiecewiseLinear { breakpoints, pieces })
    }

    /// `−t` on `[0, width)`, zero elsewhere.
    pub fn floor_cell(width: f64) -> Result<Self> {
        Self::new(vec![0.0, width], vec![(0.0, 0.0), (-1.0, 0.0), (0.0, 0.0)])
    }

    /// One on `[−w, w)`, zero elsewhere.
    pub fn gate(w: f64) -> Result<Self> {
        Self::new(vec![-w, w], vec![(0.0, 0.0), (0.0, 1.0), (0.0, 0.0)])
    }

    pub fn eval(&self, t: f64) -> f64 {
        let i = self.breakpoints.iter().take_while(|&&b| b <= t).count();
        let (slope, intercept) = self.pieces[i];
        if slope == 0.0 {
            intercept
        } else {
            slope * t + intercept
        }
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn pieces(&self) -> &[(f64, f64)] {
        &self.pieces
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Plw(PiecewiseLinear),
}

impl Activation {
    fn apply(&self, t: f64) -> f64 {
        match self {
            Activation::Relu => t.max(0.0),
            Activation::Plw(p) => p.eval(t),
        }
    }
}

/// `z ↦ [z +] W2·act(W1·z + b1) + b2`, applied to every token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FFNLayer {
    #[serde(with = "dense_serde")]
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    #[serde(with = "dense_serde")]
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub activation: Activation,
    pub residual: bool,
}

fn neumaier(terms: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0_f64, 0.0_f64);
    for x in terms {
        let t = sum + x;
        comp += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + comp
}

impl FFNLayer {
    pub fn new(
        w1: DMatrix<f64>,
        b1: DVector<f64>,
        w2: DMatrix<f64>,
        b2: DVector<f64>,
        activation: Activation,
        residual: bool,
    ) -> Result<Self> {
        let (r, d) = w1.shape();
        if r == 0 || d == 0 || b1.len() != r || w2.shape() != (d, r) || b2.len() != d {
            return Err(Error::Shape(format!(
                "W1 {:?}, b1 {}, W2 {:?}, b2 {} do not form a d→r→d layer",
                w1.shape(),
                b1.len(),
                w2.shape(),
                b2.len()
            )));
        }
        Ok(FFNLayer { w1, b1, w2, b2, activation, residual })
    }

    pub fn d(&self) -> usize {
        self.w1.ncols()
    }

    /// Hidden neurons `r`.
    pub fn width(&self) -> usize {
        self.w1.nrows()
    }

    /// ReLU neurons needed; a three-piece activation counts as four.
    pub fn relu_equivalent_width(&self) -> usize {
        match self.activation {
            Activation::Relu => self.width(),
            Activation::Plw(_) => 4 * self.width(),
        }
    }

    pub fn apply_token(&self, z: &[f64]) -> Vec<f64> {
        let (r, d) = self.w1.shape();
        let hidden: Vec<f64> = (0..r)
            .map(|k| {
                let mut acc = 0.0;
                for j in 0..d {
                    let w = self.w1[(k, j)];
                    if w != 0.0 {
                        acc += w * z[j];
                    }
                }
                self.activation.apply(acc + self.b1[k])
            })
            .collect();
        (0..d)
            .map(|i| {
                let out = neumaier((0..r).filter(|&k| hidden[k] != 0.0).map(|k| self.w2[(i, k)] * hidden[k])) + self.b2[i];
                if self.residual {
                    z[i] + out
                } else {
                    out
                }
            })
            .collect()
    }

    pub fn apply(&self, z: &SeqMatrix) -> Result<SeqMatrix> {
        if z.d() != self.d() {
            return Err(Error::Shape(format!("layer expects d = {}, got {}", self.d(), z.d())));
        }
        let m = z.matrix();
        let mut out = DMatrix::zeros(m.nrows(), m.ncols());
        for c in 0..m.ncols() {
            let col = self.apply_token(m.column(c).as_slice());
            out.column_mut(c).copy_from_slice(&col);
        }
        SeqMatrix::from_matrix(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    A,
    B,
    None,
}

impl Family {
    /// Quantization convention the family's first stage implements.
    pub fn convention(self) -> Option<Convention> {
        match self {
            Family::A => Some(Convention::Floor),
            Family::B => Some(Convention::Step),
            Family::None => None,
        }
    }
}

/// Construction constants recorded with an assembled net.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub delta: Option<f64>,
    pub prompt_len: usize,
    pub input_len: usize,
    pub quant_layers: usize,
    pub table_entries: usize,
    pub gate_width: Option<f64>,
    pub theta: Option<f64>,
    pub bump_k: Option<f64>,
    pub head: Option<ContextualCertificate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerNet {
    pub family: Family,
    pub pos_enc: Option<SeqMatrix>,
    pub pre_ffn: Vec<FFNLayer>,
    pub attn: AttentionHead,
    pub post_ffn: Vec<FFNLayer>,
    pub provenance: Provenance,
}

impl TransformerNet {
    pub fn d(&self) -> usize {
        self.attn.d()
    }

    pub fn depth(&self) -> usize {
        self.pre_ffn.len() + self.post_ffn.len()
    }

    /// Widest layer in ReLU-equivalent neurons.
    pub fn width(&self) -> usize {
        self.pre_ffn.iter().chain(&self.post_ffn).map(FFNLayer::relu_equivalent_width).max().unwrap_or(0)
    }

    pub fn neurons(&self) -> usize {
        self.pre_ffn.iter().chain(&self.post_ffn).map(FFNLayer::width).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let net: TransformerNet = serde_json::from_str(s)?;
        let a = &net.attn;
        AttentionHead::new(a.w_o.clone(), a.w_v.clone(), a.w_k.clone(), a.w_q.clone(), a.rank_rho)?;
        for layer in net.pre_ffn.iter().chain(&net.post_ffn) {
            FFNLayer::new(
                layer.w1.clone(),
                layer.b1.clone(),
                layer.w2.clone(),
                layer.b2.clone(),
                layer.activation.clone(),
                layer.residual,
            )?;
            if layer.d() != a.d() {
                return Err(Error::Shape("layer and head dimensions differ".into()));
            }
        }
        Ok(net)
    }

    fn check_input(&self, zp: &SeqMatrix) -> Result<()> {
        if zp.d() != self.d() {
            return Err(Error::Shape(format!("net expects d = {}, got {}", self.d(), zp.d())));
        }
        if let Some(e) = &self.pos_enc {
            if e.len() != zp.len() {
                return Err(Error::Shape(format!("net expects {} tokens, got {}", e.len(), zp.len())));
            }
        }
        Ok(())
    }

    /// Output of the attention layer, before the output FFNs.
    pub fn context_ids(&self, zp: &SeqMatrix) -> Result<SeqMatrix> {
        self.check_input(zp)?;
        let mut x = match &self.pos_enc {
            Some(e) => SeqMatrix::from_matrix(zp.matrix() + e.matrix())?,
            None => zp.clone(),
        };
        for layer in &self.pre_ffn {
            x = layer.apply(&x)?;
        }
        attention::self_attn_layer(&x, &self.attn)
    }
}

/// Positional encoding, FFNs tokenwise, residual attention, FFNs tokenwise.
/// Returns every column; callers slice off the prompt.
pub fn forward(net: &TransformerNet, zp: &SeqMatrix) -> Result<SeqMatrix> {
    let mut x = net.context_ids(zp)?;
    for layer in &net.post_ffn {
        x = layer.apply(&x)?;
    }
    Ok(x)
}

/// Independent inputs evaluated in parallel; output order follows input order.
pub fn forward_batch(net: &TransformerNet, inputs: &[SeqMatrix]) -> Result<Vec<SeqMatrix>> {
    inputs.par_iter().map(|z| forward(net, z)).collect()
}

/// Every row is `0, 1, …, L_total − 1`.
pub fn positional_encoding(d: usize, l_total: usize) -> Result<SeqMatrix> {
    if d == 0 || l_total == 0 {
        return Err(Error::Domain("positional encoding needs d, L ≥ 1".into()));
    }
    SeqMatrix::from_matrix(DMatrix::from_fn(d, l_total, |_, j| j as f64))
}

/// Grid levels after the positional shift, `fl(j + kδ)`, in increasing order.
fn shifted_levels(grid: &Grid, l_total: usize) -> Vec<f64> {
    let n = grid.levels();
    (0..l_total).flat_map(|j| (0..n).map(move |k| j as f64 + grid.level(k))).collect()
}

fn unit_row(d: usize, i: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(1, d, |_, j| if j == i { scale } else { 0.0 })
}

/// `d·L_total/δ` residual layers, one per coordinate and shifted level ℓ,
/// each adding `−(z_i − ℓ)` when `z_i ∈ [ℓ, next level)`. Applied in order
/// they floor every entry of `Z + E` onto its level; on-grid input is a fixed
/// point and all arithmetic is exact.
pub fn build_quant_stack(d: usize, l_total: usize, delta: f64) -> Result<Vec<FFNLayer>> {
    let grid = Grid::new(delta, d, l_total)?;
    let levels = shifted_levels(&grid, l_total);
    let mut layers = Vec::with_capacity(d * levels.len());
    for (t, &lvl) in levels.iter().enumerate() {
        let width = levels.get(t + 1).map_or(delta, |next| next - lvl);
        let act = Activation::Plw(PiecewiseLinear::floor_cell(width)?);
        for i in 0..d {
            layers.push(FFNLayer::new(
                unit_row(d, i, 1.0),
                DVector::from_element(1, -lvl),
                unit_row(d, i, 1.0).transpose(),
                DVector::zeros(d),
                act.clone(),
                true,
            )?);
        }
    }
    Ok(layers)
}

/// Start points of the ramps in the step layer: every shifted level except the
/// top one of each column, plus for non-final columns a ramp ending exactly at
/// the next column's first level.
fn step_ramps(grid: &Grid, l_total: usize, theta: f64) -> Vec<f64> {
    let n = grid.levels();
    let mut ramps = Vec::with_capacity(l_total * n);
    for j in 0..l_total {
        ramps.extend((0..n - 1).map(|k| j as f64 + grid.level(k)));
        if j + 1 < l_total {
            ramps.push((j + 1) as f64 - theta);
        }
    }
    ramps
}

/// One wide non-residual ReLU layer computing, per entry,
/// `δ·Σ_r [ReLU((z − r)/θ) − ReLU((z − r)/θ − 1)]` over the ramp starts `r`.
///
/// On `Z + E` this maps column `j`'s cell `(kδ, kδ+δ]` to `j + (k+1)δ` and the
/// top cell to `j + 1 − δ`, except within `θ` after a ramp start. Grid
/// levels are fixed points. Uses `2d(L_total/δ − 1)` neurons.
pub fn build_step_ffn(d: usize, l_total: usize, delta: f64, theta: f64) -> Result<FFNLayer> {
    let grid = Grid::new(delta, d, l_total)?;
    if !(theta > 0.0 && theta < delta) {
        return Err(Error::Domain(format!("θ = {theta} must lie in (0, δ)")));
    }
    let ramps = step_ramps(&grid, l_total, theta);
    let w = 1.0 / theta;
    let r = 2 * d * ramps.len();
    let mut w1 = DMatrix::zeros(r, d);
    let mut b1 = DVector::zeros(r);
    let mut w2 = DMatrix::zeros(d, r);
    let mut k = 0;
    for i in 0..d {
        for &start in &ramps {
            // b = −fl(w·start) so a token sitting exactly on `start` gives 0
            let shift = -(w * start);
            w1[(k, i)] = w;
            b1[k] = shift;
            w2[(i, k)] = delta;
            w1[(k + 1, i)] = w;
            b1[k + 1] = shift - 1.0;
            w2[(i, k + 1)] = -delta;
            k += 2;
        }
    }
    FFNLayer::new(w1, b1, w2, DVector::zeros(d), Activation::Relu, false)
}

/// A context ID token and the token it must be mapped to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdEntry {
    pub id: Vec<f64>,
    pub target: Vec<f64>,
}

/// Drops exact duplicates; the same ID with two targets is a collision.
fn dedup_table(table: &[IdEntry]) -> Result<Vec<IdEntry>> {
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut out: Vec<IdEntry> = Vec::new();
    for e in table {
        if e.id.len() != e.target.len() || e.id.is_empty() {
            return Err(Error::Shape("table entry dimensions differ".into()));
        }
        if let Some(&i) = seen.get(&bits_key(e.id.iter())) {
            if bits_key(out[i].target.iter()) != bits_key(e.target.iter()) {
                return Err(Error::GateCollision(format!(
                    "context ID {:?} is assigned targets {:?} and {:?}",
                    e.id, out[i].target, e.target
                )));
            }
            continue;
        }
        seen.insert(bits_key(e.id.iter()), out.len());
        out.push(e.clone());
    }
    if out.iter().any(|e| e.id.len() != out[0].id.len()) {
        return Err(Error::Shape("table entries of different dimensions".into()));
    }
    Ok(out)
}

/// Output stage of family A together with the projection it gates on.
#[derive(Clone, Debug)]
pub struct OutputStack {
    pub layers: Vec<FFNLayer>,
    pub gate_width: f64,
    pub direction: Vec<f64>,
    /// Smallest projected distance from an ID to any other ID or target.
    pub min_gap: f64,
}

/// One residual gate layer per table entry, adding `target − id` when the
/// token's projection on a separating direction is within `gate_width` of
/// the entry's. Gate width defaults to a quarter of the smallest projected
/// distance from an ID to any other ID or any other entry's target, so a
/// token already moved to its target is never caught by a later gate.
pub fn build_output_stack_a(table: &[IdEntry], gate_width: Option<f64>, seed: u64) -> Result<OutputStack> {
    let table = dedup_table(table)?;
    if table.is_empty() {
        return Ok(OutputStack { layers: Vec::new(), gate_width: gate_width.unwrap_or(0.0), direction: Vec::new(), min_gap: f64::INFINITY });
    }
    let d = table[0].id.len();
    let mut points: Vec<DVector<f64>> = table.iter().map(|e| DVector::from_column_slice(&e.id)).collect();
    points.extend(table.iter().map(|e| DVector::from_column_slice(&e.target)));
    let u = separation::find_separating_unit_vector(&points, seed, None)?;
    let proj = |v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    let ids: Vec<f64> = table.iter().map(|e| proj(&e.id)).collect();
    let targets: Vec<f64> = table.iter().map(|e| proj(&e.target)).collect();

    let mut min_gap = f64::INFINITY;
    for (a, e) in table.iter().enumerate() {
        // a gate that adds zero cannot disturb anything
        if bits_key(e.id.iter()) == bits_key(e.target.iter()) {
            continue;
        }
        for b in (0..table.len()).filter(|&b| b != a) {
            min_gap = min_gap.min((ids[a] - ids[b]).abs()).min((ids[a] - targets[b]).abs());
        }
    }
    let w = gate_width.unwrap_or(if min_gap.is_finite() { min_gap / 4.0 } else { 1.0 });
    if !(w > 0.0) || !(min_gap > 2.0 * w) {
        return Err(Error::GateCollision(format!(
            "projected context IDs are {min_gap:e} apart, not more than 2·{w:e}"
        )));
    }
    let gate = Activation::Plw(PiecewiseLinear::gate(w)?);
    let w1 = DMatrix::from_fn(1, d, |_, j| u[j]);
    let layers = table
        .iter()
        .zip(&ids)
        .map(|(e, &p)| {
            let shift = DMatrix::from_fn(d, 1, |i, _| e.target[i] - e.id[i]);
            FFNLayer::new(w1.clone(), DVector::from_element(1, -p), shift, DVector::zeros(d), gate.clone(), true)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OutputStack { layers, gate_width: w, direction: u.iter().copied().collect(), min_gap })
}

/// Smallest coordinatewise distance between distinct IDs.
fn min_coordinate_gap(table: &[IdEntry]) -> f64 {
    let mut gap = f64::INFINITY;
    for a in 0..table.len() {
        for b in a + 1..table.len() {
            for (x, y) in table[a].id.iter().zip(&table[b].id) {
                gap = gap.min((x - y).abs());
            }
        }
    }
    gap
}

/// `ReLU(x − 1) − 2ReLU(x) + ReLU(x + 1)`: a unit tent on `(−1, 1)`.
pub fn tent(x: f64) -> f64 {
    (x - 1.0).max(0.0) - 2.0 * x.max(0.0) + (x + 1.0).max(0.0)
}

/// One non-residual ReLU layer with `3d` neurons per entry realizing
/// `Σ_e (target_e/d)·Σ_i tent(K(z_i − id_{e,i}))`. Distinct IDs must differ
/// by more than `1/K` in every coordinate so the tents never overlap; `K`
/// defaults to twice that threshold.
pub fn build_bump_ffn_b(table: &[IdEntry], k: Option<f64>) -> Result<(FFNLayer, f64)> {
    let table = dedup_table(table)?;
    if table.is_empty() {
        return Err(Error::Domain("bump layer needs at least one table entry".into()));
    }
    let d = table[0].id.len();
    let gap = min_coordinate_gap(&table);
    let required = 1.0 / gap;
    let k = match k {
        Some(k) => k,
        None if gap.is_finite() => 2.0 / gap,
        None => 1.0,
    };
    if !(k > 0.0 && k.is_finite()) || !(k > required) {
        return Err(Error::BumpOverlap { k, required });
    }
    let r = 3 * d * table.len();
    let mut w1 = DMatrix::zeros(r, d);
    let mut b1 = DVector::zeros(r);
    let mut w2 = DMatrix::zeros(d, r);
    let mut n = 0;
    for e in &table {
        for i in 0..d {
            let centre = -(k * e.id[i]);
            for (off, coef) in [(-1.0, 1.0), (0.0, -2.0), (1.0, 1.0)] {
                w1[(n, i)] = k;
                b1[n] = centre + off;
                for (row, t) in e.target.iter().enumerate() {
                    w2[(row, n)] = coef * t / d as f64;
                }
                n += 1;
            }
        }
    }
    Ok((FFNLayer::new(w1, b1, w2, DVector::zeros(d), Activation::Relu, false)?, k))
}

/// Settings shared by both assemblies.
#[derive(Clone, Debug)]
pub struct AssembleOptions {
    pub profile: ScaleProfile,
    pub seed: u64,
    /// Grid inputs tabulated in addition to `h`'s own domain.
    pub extra_inputs: Vec<SeqMatrix>,
    /// Cap on the number of tabulated grid inputs.
    pub max_inputs: u128,
    /// Cap on the attention vocabulary `L_total·(1/δ)^d`.
    pub max_vocab: usize,
}

impl Default for AssembleOptions {
    fn default() -> Self {
        AssembleOptions {
            profile: ScaleProfile::default(),
            seed: 0,
            extra_inputs: Vec::new(),
            max_inputs: 1 << 16,
            max_vocab: 4096,
        }
    }
}

/// Contextual head over every shifted grid token except the zero token,
/// with `ε = δ/2`, `γ_min = δ/2`, `γ_max = √d·L_total`.
pub fn build_grid_head(grid: &Grid, opts: &AssembleOptions) -> Result<ContextualHead> {
    let n = grid.levels();
    let per_col = (n as u128).checked_pow(grid.d as u32).unwrap_or(u128::MAX);
    if per_col.saturating_mul(grid.len as u128) > opts.max_vocab as u128 {
        return Err(Error::SearchSpace(format!(
            "attention vocabulary L·(1/δ)^d = {}·{n}^{} exceeds {}",
            grid.len, grid.d, opts.max_vocab
        )));
    }
    let token_grid = Grid::new(grid.delta, grid.d, 1)?;
    let mut tokens = Vec::new();
    for j in 0..grid.len {
        for idx in 0..per_col {
            let base = token_grid.point_at(idx)?;
            let t = base.column_vec(0).map(|v| v + j as f64);
            if t.iter().any(|&v| v != 0.0) {
                tokens.push(t);
            }
        }
    }
    let vocab = Vocab::from_tokens(tokens)?;
    let params = ContextualParams::new(
        grid.delta / 2.0,
        grid.delta / 2.0,
        (grid.d as f64).sqrt() * grid.len as f64,
        vocab.len(),
        grid.len,
        opts.profile,
    )?;
    attention::build_contextual_head(&vocab, &params, 1, 1, opts.seed)
}

fn check_family_input(h: &QuantizedSeqFn, l_p: usize, family: Family) -> Result<Grid> {
    let grid = *h.grid();
    if l_p >= grid.len {
        return Err(Error::Domain(format!("prompt length {l_p} leaves no input columns of {}", grid.len)));
    }
    if Some(h.convention()) != family.convention() {
        return Err(Error::Precondition(format!(
            "family {family:?} quantizes with {:?}, but h uses {:?}",
            family.convention(),
            h.convention()
        )));
    }
    Ok(grid)
}

/// Grid inputs to tabulate: `h`'s domain plus the quantized extras.
fn table_inputs(h: &QuantizedSeqFn, opts: &AssembleOptions) -> Result<Vec<SeqMatrix>> {
    let mut inputs = h.domain(opts.max_inputs)?;
    let mut seen: std::collections::HashSet<Vec<u64>> = inputs.iter().map(|z| bits_key(z.matrix().iter())).collect();
    for z in &opts.extra_inputs {
        let q = crate::grid::grid_quantize(z, h.grid(), h.convention())?;
        if seen.insert(bits_key(q.matrix().iter())) {
            inputs.push(q);
        }
    }
    if inputs.len() as u128 > opts.max_inputs {
        return Err(Error::SearchSpace(format!("{} grid inputs exceed the cap {}", inputs.len(), opts.max_inputs)));
    }
    Ok(inputs)
}

/// Context IDs of the last `L` columns of every input, paired with `h`'s output.
fn id_table(net: &TransformerNet, h: &QuantizedSeqFn, inputs: &[SeqMatrix], l_p: usize) -> Result<Vec<IdEntry>> {
    let rows: Vec<Vec<IdEntry>> = inputs
        .par_iter()
        .map(|m| {
            let ids = net.context_ids(m)?;
            let target = h.eval(m)?;
            Ok((l_p..m.len())
                .map(|c| IdEntry { id: ids.col(c).iter().copied().collect(), target: target.col(c).iter().copied().collect() })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().flatten().collect())
}

/// Family A: positional encoding, floor quantizer stack, contextual head,
/// one gate layer per (context ID, position) entry. Reproduces
/// `h([P, Z])_{:, L_p:}` on every tabulated grid input up to rounding, and
/// off-grid inputs as their floor images.
pub fn assemble_tau_a(h: &QuantizedSeqFn, l_p: usize, opts: &AssembleOptions) -> Result<TransformerNet> {
    let grid = check_family_input(h, l_p, Family::A)?;
    let chead = build_grid_head(&grid, opts)?;
    let pre_ffn = build_quant_stack(grid.d, grid.len, grid.delta)?;
    let quant_layers = pre_ffn.len();
    let mut net = TransformerNet {
        family: Family::A,
        pos_enc: Some(positional_encoding(grid.d, grid.len)?),
        pre_ffn,
        attn: chead.head,
        post_ffn: Vec::new(),
        provenance: Provenance {
            seed: opts.seed,
            delta: Some(grid.delta),
            prompt_len: l_p,
            input_len: grid.len - l_p,
            quant_layers,
            head: Some(chead.certificate),
            ..Default::default()
        },
    };
    let inputs = table_inputs(h, opts)?;
    let table = id_table(&net, h, &inputs, l_p)?;
    let stack = build_output_stack_a(&table, None, opts.seed)?;
    net.provenance.table_entries = stack.layers.len();
    net.provenance.gate_width = Some(stack.gate_width);
    net.post_ffn = stack.layers;
    Ok(net)
}

/// Family B: positional encoding, one step-function layer of ramp width θ,
/// contextual head, one bump layer. Grid inputs land on the table IDs
/// up to rounding, so outputs match `h` far inside the `ε/2` tolerance.
pub fn assemble_tau_b(h: &QuantizedSeqFn, l_p: usize, theta: f64, k: Option<f64>, opts: &AssembleOptions) -> Result<TransformerNet> {
    let grid = check_family_input(h, l_p, Family::B)?;
    let chead = build_grid_head(&grid, opts)?;
    let step = build_step_ffn(grid.d, grid.len, grid.delta, theta)?;
    let mut net = TransformerNet {
        family: Family::B,
        pos_enc: Some(positional_encoding(grid.d, grid.len)?),
        pre_ffn: vec![step],
        attn: chead.head,
        post_ffn: Vec::new(),
        provenance: Provenance {
            seed: opts.seed,
            delta: Some(grid.delta),
            prompt_len: l_p,
            input_len: grid.len - l_p,
            quant_layers: 1,
            theta: Some(theta),
            head: Some(chead.certificate),
            ..Default::default()
        },
    };
    let inputs = table_inputs(h, opts)?;
    let table = id_table(&net, h, &inputs, l_p)?;
    let entries = dedup_table(&table)?.len();
    let (bump, k) = build_bump_ffn_b(&table, k)?;
    net.provenance.table_entries = entries;
    net.provenance.bump_k = Some(k);
    net.post_ffn = vec![bump];
    Ok(net)
}
