//! Quantized targets, the prompt-indexed surrogate, prompt-length bounds,
//! exhaustive prompt search and dataset memorization.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::ScaleProfile;
use crate::error::{Error, Result};
use crate::grid::{grid_quantize, Convention, Grid};
use crate::seq::{bits_key, SeqMatrix};
use crate::transformer_builder::{self as tb, AssembleOptions, Family, TransformerNet};

/// Grid sizes up to this are tabulated eagerly by [`quantize_fn`].
pub const DENSE_LIMIT: u128 = 1_000_000;
/// Largest prompt grid [`grid_search_prompt`] will enumerate.
pub const SEARCH_LIMIT: u128 = 10_000_000;

pub type Rule = Arc<dyn Fn(&SeqMatrix) -> Result<SeqMatrix> + Send + Sync>;

#[derive(Clone)]
pub enum Repr {
    /// Output level indices of every grid point, row-major, in index order.
    Dense(Vec<u32>),
    /// Listed cells; every other cell maps to the zero matrix.
    Sparse(BTreeMap<Vec<u32>, SeqMatrix>),
    /// Evaluated on demand; the output is snapped onto the grid.
    Rule(Rule),
    /// `[P⁽ⁱ⁾, Z] ↦ [0, f̄⁽ⁱ⁾(Z)]`; prompts outside the table give zero.
    Surrogate { prompt_len: usize, table: PromptTable, targets: Vec<QuantizedSeqFn> },
}

/// A grid-to-grid sequence function. Inputs are snapped onto the grid with
/// `convention` before lookup.
#[derive(Clone)]
pub struct QuantizedSeqFn {
    grid: Grid,
    convention: Convention,
    repr: Repr,
}

impl fmt::Debug for QuantizedSeqFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.repr {
            Repr::Dense(_) => "dense".to_string(),
            Repr::Sparse(m) => format!("sparse({})", m.len()),
            Repr::Rule(_) => "rule".to_string(),
            Repr::Surrogate { prompt_len, targets, .. } => format!("surrogate(L_p = {prompt_len}, {} targets)", targets.len()),
        };
        f.debug_struct("QuantizedSeqFn")
            .field("grid", &self.grid)
            .field("convention", &self.convention)
            .field("repr", &kind)
            .finish()
    }
}

fn check_on_grid(grid: &Grid, z: &SeqMatrix) -> Result<Vec<u32>> {
    grid.digits(z)
        .ok_or_else(|| Error::Domain(format!("output {:?} is not a {}×{} grid point", z.row_major(), grid.d, grid.len)))
}

impl QuantizedSeqFn {
    pub fn dense(grid: Grid, convention: Convention, outputs: &[SeqMatrix]) -> Result<Self> {
        if Some(outputs.len() as u128) != grid.cardinality() {
            return Err(Error::Shape(format!("dense table needs one output per grid point, got {}", outputs.len())));
        }
        let mut digits = Vec::with_capacity(outputs.len() * grid.entries());
        for z in outputs {
            digits.extend(check_on_grid(&grid, z)?);
        }
        Ok(QuantizedSeqFn { grid, convention, repr: Repr::Dense(digits) })
    }

    /// Keys are input cells; values must be grid points.
    pub fn sparse(grid: Grid, convention: Convention, entries: BTreeMap<Vec<u32>, SeqMatrix>) -> Result<Self> {
        for (cell, out) in &entries {
            grid.point(cell)?;
            check_on_grid(&grid, out)?;
        }
        Ok(QuantizedSeqFn { grid, convention, repr: Repr::Sparse(entries) })
    }

    pub fn from_rule(grid: Grid, convention: Convention, rule: Rule) -> Self {
        QuantizedSeqFn { grid, convention, repr: Repr::Rule(rule) }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn convention(&self) -> Convention {
        self.convention
    }

    pub fn repr(&self) -> &Repr {
        &self.repr
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.repr, Repr::Dense(_))
    }

    /// Value on the grid cell containing `z`.
    pub fn eval(&self, z: &SeqMatrix) -> Result<SeqMatrix> {
        let q = grid_quantize(z, &self.grid, self.convention)?;
        match &self.repr {
            Repr::Dense(digits) => {
                let cell = self.grid.digits(&q).expect("quantized input is on the grid");
                let i = self.grid.index(&cell).expect("dense grids have an index") as usize;
                let m = self.grid.entries();
                self.grid.point(&digits[i * m..(i + 1) * m])
            }
            Repr::Sparse(map) => {
                let cell = self.grid.digits(&q).expect("quantized input is on the grid");
                Ok(map.get(&cell).cloned().unwrap_or_else(|| SeqMatrix::zeros(self.grid.d, self.grid.len)))
            }
            Repr::Rule(rule) => {
                let out = rule(&q)?;
                grid_quantize(&out, &self.grid, self.convention)
            }
            Repr::Surrogate { prompt_len, table, targets } => {
                let zeros = SeqMatrix::zeros(self.grid.d, *prompt_len);
                let tail = q.tail(*prompt_len)?;
                let out = match table.id_of(&q.head(*prompt_len)?) {
                    Some(i) => targets[i].eval(&tail)?,
                    None => SeqMatrix::zeros(self.grid.d, tail.len()),
                };
                zeros.hcat(&out)
            }
        }
    }

    /// Grid inputs worth tabulating. A surrogate tabulates its table prompts
    /// times the targets' domains; otherwise every grid point when there are
    /// at most `limit`, else the listed cells of a sparse function.
    pub fn domain(&self, limit: u128) -> Result<Vec<SeqMatrix>> {
        match &self.repr {
            Repr::Surrogate { table, targets, .. } => {
                let mut out = Vec::new();
                for (p, t) in table.prompts().iter().zip(targets) {
                    for z in t.domain(limit)? {
                        out.push(p.hcat(&z)?);
                        if out.len() as u128 > limit {
                            return Err(Error::SearchSpace(format!("surrogate domain exceeds {limit} inputs")));
                        }
                    }
                }
                Ok(out)
            }
            Repr::Sparse(map) if self.grid.cardinality().map_or(true, |c| c > limit) => {
                map.keys().map(|cell| self.grid.point(cell)).collect()
            }
            _ => self.grid.points(limit),
        }
    }
}

/// `f̄(Z̄) = grid_quantize(f(Z̄))`, tabulated when the grid has at most
/// [`DENSE_LIMIT`] points and evaluated lazily otherwise.
pub fn quantize_fn<F>(f: F, grid: &Grid, convention: Convention) -> Result<QuantizedSeqFn>
where
    F: Fn(&SeqMatrix) -> SeqMatrix + Send + Sync + 'static,
{
    let snap = {
        let grid = *grid;
        move |z: &SeqMatrix| -> Result<SeqMatrix> {
            let out = f(z);
            if out.d() != grid.d || out.len() != grid.len {
                return Err(Error::Shape("target function changed the sequence shape".into()));
            }
            grid_quantize(&out, &grid, convention)
        }
    };
    match grid.cardinality() {
        Some(c) if c <= DENSE_LIMIT => {
            let outputs = (0..c).map(|i| snap(&grid.point_at(i)?)).collect::<Result<Vec<_>>>()?;
            QuantizedSeqFn::dense(*grid, convention, &outputs)
        }
        _ => Ok(QuantizedSeqFn::from_rule(*grid, convention, Arc::new(snap))),
    }
}

/// Distinct on-grid prompts; prompt `i` indexes target `i`.
#[derive(Clone, Debug)]
pub struct PromptTable {
    grid: Grid,
    prompts: Vec<SeqMatrix>,
    index: HashMap<Vec<u32>, usize>,
}

impl PromptTable {
    /// Prompt `i` is the grid point with lexicographic index `i`.
    pub fn first_n(grid: Grid, count: usize) -> Result<Self> {
        if grid.cardinality().is_some_and(|c| c < count as u128) {
            return Err(Error::Precondition(format!(
                "(1/δ)^{{dL_p}} = {} prompts cannot index {count} targets",
                grid.cardinality().unwrap_or(0)
            )));
        }
        let prompts = (0..count as u128).map(|i| grid.point_at(i)).collect::<Result<Vec<_>>>()?;
        let index = prompts.iter().enumerate().map(|(i, p)| (grid.digits(p).expect("grid point"), i)).collect();
        Ok(PromptTable { grid, prompts, index })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn prompts(&self) -> &[SeqMatrix] {
        &self.prompts
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    /// Target id of an on-grid prompt.
    pub fn id_of(&self, prompt: &SeqMatrix) -> Option<usize> {
        self.grid.digits(prompt).and_then(|k| self.index.get(&k).copied())
    }
}

pub fn select_prompt(table: &PromptTable, target_id: usize) -> Result<SeqMatrix> {
    table
        .prompts
        .get(target_id)
        .cloned()
        .ok_or_else(|| Error::Domain(format!("no prompt for target {target_id}; table has {}", table.len())))
}

/// `h` over `L_p + L` columns with `h([P⁽ⁱ⁾, Z])_{:, L_p:} = f̄⁽ⁱ⁾(Z)` and a zero
/// prefix. Prompts in the same cell as a table prompt behave like it.
pub fn build_surrogate(targets: Vec<QuantizedSeqFn>, prompt_len: usize) -> Result<(QuantizedSeqFn, PromptTable)> {
    let first = targets.first().ok_or_else(|| Error::Domain("no targets".into()))?;
    let (grid, convention) = (*first.grid(), first.convention());
    if targets.iter().any(|t| *t.grid() != grid || t.convention() != convention) {
        return Err(Error::Precondition("targets must share a grid and convention".into()));
    }
    if prompt_len == 0 {
        return Err(Error::Domain("prompt length must be at least 1".into()));
    }
    let table = PromptTable::first_n(grid.with_len(prompt_len)?, targets.len())?;
    let h = QuantizedSeqFn {
        grid: grid.with_len(prompt_len + grid.len)?,
        convention,
        repr: Repr::Surrogate { prompt_len, table: table.clone(), targets },
    };
    Ok((h, table))
}

fn check_length_params(d: usize, l: usize, eps: f64, c: f64, alpha: f64) -> Result<()> {
    if d == 0 || l == 0 || !(eps > 0.0) || !(c > 0.0) || !(alpha >= 1.0) {
        return Err(Error::Domain(format!(
            "need d, L ≥ 1, ε, C > 0 and α ≥ 1; got d = {d}, L = {l}, ε = {eps}, C = {c}, α = {alpha}"
        )));
    }
    Ok(())
}

/// `ln λ` with `λ = (2C(dL)^{1/α}/ε)^{dL}`.
pub fn log_lambda(d: usize, l: usize, eps: f64, c: f64, alpha: f64) -> Result<f64> {
    check_length_params(d, l, eps, c, alpha)?;
    let dl = (d * l) as f64;
    Ok(dl * ((2.0 * c / eps).ln() + dl.ln() / alpha))
}

/// Ceiling that ignores relative rounding noise below 1e-9.
fn ceil_tolerant(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r
    } else {
        x.ceil()
    }
}

/// `⌈L·λ⌉`; errors when it does not fit in `u128`.
pub fn min_prompt_length(d: usize, l: usize, eps: f64, c: f64, alpha: f64) -> Result<u128> {
    let log_lp = log_lambda(d, l, eps, c, alpha)? + (l as f64).ln();
    if log_lp > 127.0 * std::f64::consts::LN_2 {
        return Err(Error::SearchSpace(format!("minimum prompt length e^{log_lp:.1} overflows")));
    }
    let dl = (d * l) as i32;
    let base = 2.0 * c * ((d * l) as f64).powf(1.0 / alpha) / eps;
    Ok(ceil_tolerant(l as f64 * base.powi(dl)).max(0.0) as u128)
}

/// `L·(1/δ)^{dL}`, the prompt length the surrogate construction needs at `δ`.
pub fn grid_prompt_length(d: usize, l: usize, delta: f64) -> Result<u128> {
    let grid = Grid::new(delta, d, l)?;
    grid.cardinality()
        .and_then(|c| c.checked_mul(l as u128))
        .ok_or_else(|| Error::SearchSpace("L·(1/δ)^{dL} overflows".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Sup,
    Mean,
}

/// Input/output pairs of `d×L` matrices in `[0,1]^{d×L}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub d: usize,
    pub l: usize,
    pub pairs: Vec<(SeqMatrix, SeqMatrix)>,
}

#[derive(Serialize, Deserialize)]
struct PairRepr {
    #[serde(rename = "X")]
    x: Vec<f64>,
    #[serde(rename = "Y")]
    y: Vec<f64>,
    d: usize,
    #[serde(rename = "L")]
    l: usize,
}

impl Dataset {
    /// Rejects mixed shapes, entries outside [0, 1] and an `X` listed with two
    /// different `Y`.
    pub fn new(pairs: Vec<(SeqMatrix, SeqMatrix)>) -> Result<Self> {
        let (x0, _) = pairs.first().ok_or_else(|| Error::Domain("empty dataset".into()))?;
        let (d, l) = (x0.d(), x0.len());
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
        for (i, (x, y)) in pairs.iter().enumerate() {
            if x.d() != d || x.len() != l || y.d() != d || y.len() != l {
                return Err(Error::Shape(format!("pair {i} is not {d}×{l}")));
            }
            if x.matrix().iter().chain(y.matrix().iter()).any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Domain(format!("pair {i} has entries outside [0, 1]")));
            }
            match seen.get(&bits_key(x.matrix().iter())) {
                Some(&j) if pairs[j].1 != *y => {
                    return Err(Error::Inconsistent(format!("pairs {j} and {i} share X but differ in Y")));
                }
                Some(_) => {}
                None => {
                    seen.insert(bits_key(x.matrix().iter()), i);
                }
            }
        }
        Ok(Dataset { d, l, pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// JSON array of `{X, Y, d, L}` with row-major `X`, `Y`.
    pub fn from_json(s: &str) -> Result<Self> {
        let reprs: Vec<PairRepr> = serde_json::from_str(s)?;
        let pairs = reprs
            .iter()
            .map(|r| Ok((SeqMatrix::from_row_major(r.d, r.l, &r.x)?, SeqMatrix::from_row_major(r.d, r.l, &r.y)?)))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(pairs)
    }

    pub fn to_json(&self) -> Result<String> {
        let reprs: Vec<PairRepr> = self
            .pairs
            .iter()
            .map(|(x, y)| PairRepr { x: x.row_major(), y: y.row_major(), d: self.d, l: self.l })
            .collect();
        Ok(serde_json::to_string_pretty(&reprs)?)
    }
}

/// Per-pair `‖τ([P, X])_{:, L_p:} − Y‖_α`.
pub fn prompt_errors(net: &TransformerNet, prompt: &SeqMatrix, data: &Dataset, alpha: f64) -> Result<Vec<f64>> {
    data.pairs
        .iter()
        .map(|(x, y)| {
            let out = tb::forward(net, &prompt.hcat(x)?)?.tail(prompt.len())?;
            Ok(crate::seq::alpha_norm(out.matrix().iter().zip(y.matrix().iter()).map(|(a, b)| a - b), alpha))
        })
        .collect()
}

fn aggregate(errors: &[f64], loss: Loss) -> f64 {
    let v = match loss {
        Loss::Sup => errors.iter().copied().fold(0.0, f64::max),
        Loss::Mean => errors.iter().sum::<f64>() / errors.len() as f64,
    };
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PromptSearch {
    pub prompt: SeqMatrix,
    pub loss: f64,
    pub index: u128,
    pub evaluated: u128,
}

/// Evaluates every on-grid `d×L_p` prompt and returns the smallest loss,
/// ties going to the lexicographically first prompt.
pub fn grid_search_prompt(
    net: &TransformerNet,
    data: &Dataset,
    delta: f64,
    prompt_len: usize,
    loss: Loss,
    alpha: f64,
) -> Result<PromptSearch> {
    let grid = Grid::new(delta, data.d, prompt_len)?;
    let count = match grid.cardinality() {
        Some(c) if c <= SEARCH_LIMIT => c,
        _ => {
            return Err(Error::SearchSpace(format!(
                "(1/δ)^{{dL_p}} = e^{:.1} prompts exceeds {SEARCH_LIMIT}",
                grid.log_cardinality()
            )))
        }
    };
    if data.is_empty() {
        return Err(Error::Domain("empty dataset".into()));
    }
    let (best_loss, best) = (0..count as u64)
        .into_par_iter()
        .map(|i| -> Result<(f64, u128)> {
            let p = grid.point_at(i as u128)?;
            Ok((aggregate(&prompt_errors(net, &p, data, alpha)?, loss), i as u128))
        })
        .try_reduce(
            || (f64::INFINITY, u128::MAX),
            |a, b| Ok(if b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)).is_lt() { b } else { a }),
        )?;
    Ok(PromptSearch { prompt: grid.point_at(best)?, loss: best_loss, index: best, evaluated: count })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorizeConfig {
    pub eps: f64,
    pub lipschitz: f64,
    pub alpha: f64,
    pub family: Family,
    pub seed: u64,
    pub profile: ScaleProfile,
    /// Ramp width for family B; chosen from the data when absent.
    pub theta: Option<f64>,
    /// Bump sharpness for family B; twice the overlap threshold when absent.
    pub bump_k: Option<f64>,
}

impl MemorizeConfig {
    pub fn new(eps: f64, lipschitz: f64, alpha: f64, family: Family) -> Self {
        MemorizeConfig { eps, lipschitz, alpha, family, seed: 0, profile: ScaleProfile::default(), theta: None, bump_k: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemorizeReport {
    pub family: Family,
    pub eps: f64,
    pub lipschitz: f64,
    pub alpha: f64,
    pub d: usize,
    pub l: usize,
    pub pairs: usize,
    pub delta: f64,
    /// `ln λ`, `λ = (2C(dL)^{1/α}/ε)^{dL}`.
    pub log_lambda: f64,
    /// `⌈L·λ⌉`.
    pub prompt_len_lambda: u128,
    /// `L·(1/δ)^{dL}` at the chosen δ.
    pub prompt_len_grid: u128,
    pub prompt_len: usize,
    pub prompt_index: usize,
    pub depth: usize,
    pub width: usize,
    pub neurons: usize,
    pub pre_layers: usize,
    pub post_layers: usize,
    pub table_entries: usize,
    pub theta: Option<f64>,
    pub bump_k: Option<f64>,
    pub gate_width: Option<f64>,
    pub errors: Vec<f64>,
    pub max_error: f64,
    pub pass: bool,
}

pub struct Memorized {
    pub net: TransformerNet,
    pub prompt: SeqMatrix,
    pub report: MemorizeReport,
}

/// Round-to-nearest level, top value folded onto `1 − δ`.
fn nearest_level(grid: &Grid, z: &SeqMatrix) -> Result<SeqMatrix> {
    let n = grid.levels();
    let digits: Vec<u32> = z.row_major().iter().map(|v| ((v / grid.delta).round().max(0.0) as usize).min(n - 1) as u32).collect();
    grid.point(&digits)
}

/// Largest ramp width that keeps every off-level entry of `X` out of the
/// step layer's ramps.
fn data_theta(grid: &Grid, data: &Dataset) -> f64 {
    let n = grid.levels();
    let mut theta = grid.delta / 4.0;
    for (x, _) in &data.pairs {
        for &v in x.matrix().iter() {
            let k = (0..n).rev().find(|&k| grid.level(k) <= v).unwrap_or(0);
            if grid.level(k) == v {
                continue;
            }
            let room = if k + 1 < n { v - grid.level(k) } else { 1.0 - v };
            if room > 0.0 {
                theta = theta.min(room / 2.0);
            }
        }
    }
    theta
}

/// Builds a net and a prompt with `‖τ([P, X⁽ⁱ⁾])_{:, L_p:} − Y⁽ⁱ⁾‖_α ≤ ε` for every
/// pair and reports the construction sizes. The report's `pass` says whether
/// the bound was met; see [`memorize`] for the checked version.
pub fn memorize_unchecked(data: &Dataset, cfg: &MemorizeConfig) -> Result<Memorized> {
    check_length_params(data.d, data.l, cfg.eps, cfg.lipschitz, cfg.alpha)?;
    let conv = cfg
        .family
        .convention()
        .ok_or_else(|| Error::Domain("memorization needs family A or B".into()))?;
    let (d, l) = (data.d, data.l);
    let dl = (d * l) as f64;
    // the quantization error of Y alone is δ(dL)^{1/α}, so C below 1 is treated as 1
    let delta_max = cfg.eps / (2.0 * cfg.lipschitz.max(1.0) * dl.powf(1.0 / cfg.alpha));
    let n = (ceil_tolerant(1.0 / delta_max) as usize).max(2);
    let grid = Grid::new(1.0 / n as f64, d, l)?;

    let mut cells: BTreeMap<Vec<u32>, SeqMatrix> = BTreeMap::new();
    for (i, (x, y)) in data.pairs.iter().enumerate() {
        let cell = grid.cell(x, conv)?;
        let value = cells.entry(cell).or_insert(nearest_level(&grid, y)?);
        let gap = y.matrix().iter().zip(value.matrix().iter()).map(|(a, b)| a - b);
        let gap = crate::seq::alpha_norm(gap, cfg.alpha);
        if gap > cfg.eps / 2.0 {
            return Err(Error::Realizability(format!(
                "pair {i} is {gap} from the value of its grid cell, more than ε/2 = {}",
                cfg.eps / 2.0
            )));
        }
    }

    let lp_lambda = min_prompt_length(d, l, cfg.eps, cfg.lipschitz, cfg.alpha)?;
    let lp_grid = grid_prompt_length(d, l, grid.delta)?;
    let prompt_len = lp_lambda.max(lp_grid);
    if prompt_len > 4096 {
        return Err(Error::SearchSpace(format!("prompt length {prompt_len} is too large to construct")));
    }
    let prompt_len = prompt_len as usize;

    let target = QuantizedSeqFn::sparse(grid, conv, cells)?;
    let (h, table) = build_surrogate(vec![target], prompt_len)?;
    let prompt = select_prompt(&table, 0)?;
    let opts = AssembleOptions {
        profile: cfg.profile,
        seed: cfg.seed,
        extra_inputs: data.pairs.iter().map(|(x, _)| prompt.hcat(x)).collect::<Result<_>>()?,
        ..Default::default()
    };
    let net = match cfg.family {
        Family::A => tb::assemble_tau_a(&h, prompt_len, &opts)?,
        _ => {
            let theta = cfg.theta.unwrap_or_else(|| data_theta(&grid, data));
            tb::assemble_tau_b(&h, prompt_len, theta, cfg.bump_k, &opts)?
        }
    };
    let errors = prompt_errors(&net, &prompt, data, cfg.alpha)?;
    let max_error = errors.iter().copied().fold(0.0, f64::max);
    let report = MemorizeReport {
        family: cfg.family,
        eps: cfg.eps,
        lipschitz: cfg.lipschitz,
        alpha: cfg.alpha,
        d,
        l,
        pairs: data.len(),
        delta: grid.delta,
        log_lambda: log_lambda(d, l, cfg.eps, cfg.lipschitz, cfg.alpha)?,
        prompt_len_lambda: lp_lambda,
        prompt_len_grid: lp_grid,
        prompt_len,
        prompt_index: 0,
        depth: net.depth(),
        width: net.width(),
        neurons: net.neurons(),
        pre_layers: net.pre_ffn.len(),
        post_layers: net.post_ffn.len(),
        table_entries: net.provenance.table_entries,
        theta: net.provenance.theta,
        bump_k: net.provenance.bump_k,
        gate_width: net.provenance.gate_width,
        pass: max_error <= cfg.eps,
        errors,
        max_error,
    };
    Ok(Memorized { net, prompt, report })
}

/// [`memorize_unchecked`], failing with a verification error when some pair
/// misses the ε bound.
pub fn memorize(data: &Dataset, cfg: &MemorizeConfig) -> Result<Memorized> {
    let m = memorize_unchecked(data, cfg)?;
    if !m.report.pass {
        return Err(Error::Verification(format!("max error {} exceeds ε = {}", m.report.max_error, cfg.eps)));
    }
    Ok(m)
}
