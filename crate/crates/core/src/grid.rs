//! Uniform grids `{0, δ, …, 1−δ}^{d×L}` and snapping onto them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seq::SeqMatrix;

/// Which half-open cell a value belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    /// `[kδ, kδ+δ) ↦ kδ`.
    Floor,
    /// `(kδ, kδ+δ] ↦ kδ+δ`, with the top cell folded onto `1−δ`.
    Step,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub delta: f64,
    pub d: usize,
    pub len: usize,
}

/// Slack for values that leave [0, 1] by rounding only.
const RANGE_SLACK: f64 = 1e-12;

impl Grid {
    pub fn new(delta: f64, d: usize, len: usize) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Domain(format!("δ = {delta} outside (0, 1)")));
        }
        let inv = 1.0 / delta;
        if (inv - inv.round()).abs() > 1e-9 * inv {
            return Err(Error::Domain(format!("1/δ = {inv} is not an integer")));
        }
        if inv.round() > u32::MAX as f64 {
            return Err(Error::Domain(format!("1/δ = {inv} is too large")));
        }
        if d == 0 || len == 0 {
            return Err(Error::Domain("grid needs d ≥ 1 and L ≥ 1".into()));
        }
        Ok(Grid { delta, d, len })
    }

    /// `1/δ`.
    pub fn levels(&self) -> usize {
        (1.0 / self.delta).round() as usize
    }

    pub fn level(&self, k: usize) -> f64 {
        k as f64 * self.delta
    }

    pub fn with_len(&self, len: usize) -> Result<Grid> {
        Grid::new(self.delta, self.d, len)
    }

    pub fn entries(&self) -> usize {
        self.d * self.len
    }

    /// `(1/δ)^{dL}`, or `None` past `u128`.
    pub fn cardinality(&self) -> Option<u128> {
        let n = self.levels() as u128;
        let mut c: u128 = 1;
        for _ in 0..self.entries() {
            c = c.checked_mul(n)?;
        }
        Some(c)
    }

    /// `dL·ln(1/δ)`.
    pub fn log_cardinality(&self) -> f64 {
        self.entries() as f64 * (self.levels() as f64).ln()
    }

    /// Level index of `v` under `conv`; exact comparisons against [`Grid::level`].
    pub fn digit(&self, v: f64, conv: Convention) -> Result<u32> {
        if !(v >= -RANGE_SLACK && v <= 1.0 + RANGE_SLACK) {
            return Err(Error::Domain(format!("entry {v} outside [0, 1]")));
        }
        let n = self.levels();
        let mut k = ((v / self.delta).floor().max(0.0) as usize).min(n);
        while k > 0 && self.level(k) > v {
            k -= 1;
        }
        while k < n && self.level(k + 1) <= v {
            k += 1;
        }
        // now level(k) ≤ v < level(k+1), up to the clamps
        let k = match conv {
            Convention::Floor => k,
            Convention::Step if v > self.level(k) => k + 1,
            Convention::Step => k,
        };
        Ok(k.min(n - 1) as u32)
    }

    fn check_shape(&self, z: &SeqMatrix) -> Result<()> {
        if z.d() != self.d || z.len() != self.len {
            return Err(Error::Shape(format!(
                "expected a {}×{} matrix, got {}×{}",
                self.d,
                self.len,
                z.d(),
                z.len()
            )));
        }
        Ok(())
    }

    /// Row-major level indices of the cell containing `z`.
    pub fn cell(&self, z: &SeqMatrix, conv: Convention) -> Result<Vec<u32>> {
        self.check_shape(z)?;
        z.row_major().into_iter().map(|v| self.digit(v, conv)).collect()
    }

    /// Row-major level indices of an on-grid `z`, or `None` if some entry is off-grid.
    pub fn digits(&self, z: &SeqMatrix) -> Option<Vec<u32>> {
        self.check_shape(z).ok()?;
        let n = self.levels();
        z.row_major()
            .into_iter()
            .map(|v| {
                let k = (v / self.delta).round();
                (k >= 0.0 && (k as usize) < n && self.level(k as usize) == v).then_some(k as u32)
            })
            .collect()
    }

    pub fn is_on_grid(&self, z: &SeqMatrix) -> bool {
        self.digits(z).is_some()
    }

    pub fn point(&self, digits: &[u32]) -> Result<SeqMatrix> {
        let n = self.levels();
        if digits.len() != self.entries() || digits.iter().any(|&k| k as usize >= n) {
            return Err(Error::Domain("digits do not name a grid point".into()));
        }
        let data: Vec<f64> = digits.iter().map(|&k| self.level(k as usize)).collect();
        SeqMatrix::from_row_major(self.d, self.len, &data)
    }

    /// Position in lexicographic (row-major, most significant first) order.
    pub fn index(&self, digits: &[u32]) -> Option<u128> {
        let n = self.levels() as u128;
        digits.iter().try_fold(0u128, |acc, &k| acc.checked_mul(n)?.checked_add(k as u128))
    }

    pub fn digits_of_index(&self, mut index: u128) -> Result<Vec<u32>> {
        if self.cardinality().is_some_and(|c| index >= c) {
            return Err(Error::Domain(format!("index {index} beyond the grid")));
        }
        let n = self.levels() as u128;
        let mut out = vec![0u32; self.entries()];
        for slot in out.iter_mut().rev() {
            *slot = (index % n) as u32;
            index /= n;
        }
        Ok(out)
    }

    pub fn point_at(&self, index: u128) -> Result<SeqMatrix> {
        self.point(&self.digits_of_index(index)?)
    }

    /// Every grid point in index order; errors past `limit` points.
    pub fn points(&self, limit: u128) -> Result<Vec<SeqMatrix>> {
        match self.cardinality() {
            Some(c) if c <= limit => (0..c).map(|i| self.point_at(i)).collect(),
            _ => Err(Error::SearchSpace(format!(
                "grid has (1/δ)^{{dL}} = e^{:.1} points, limit {limit}",
                self.log_cardinality()
            ))),
        }
    }
}

/// Snaps every entry of `z` onto the grid; idempotent.
pub fn grid_quantize(z: &SeqMatrix, grid: &Grid, conv: Convention) -> Result<SeqMatrix> {
    let cell = grid.cell(z, conv)?;
    grid.point(&cell)
}
