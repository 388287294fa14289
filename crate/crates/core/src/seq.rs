use nalgebra::{DMatrix, DVector, DVectorView};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// A d×L real matrix whose columns are tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqMatrix(DMatrix<f64>);

impl SeqMatrix {
    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() == 0 || m.ncols() == 0 {
            return Err(Error::Domain("sequence matrix must have d ≥ 1 and L ≥ 1".into()));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("sequence matrix has non-finite entries".into()));
        }
        Ok(SeqMatrix(m))
    }

    pub fn from_row_major(d: usize, l: usize, data: &[f64]) -> Result<Self> {
        if data.len() != d * l {
            return Err(Error::Shape(format!("expected {} entries for {d}×{l}, got {}", d * l, data.len())));
        }
        Self::from_matrix(DMatrix::from_row_slice(d, l, data))
    }

    pub fn from_columns(cols: &[DVector<f64>]) -> Result<Self> {
        if cols.is_empty() {
            return Err(Error::Domain("no columns".into()));
        }
        let d = cols[0].len();
        if cols.iter().any(|c| c.len() != d) {
            return Err(Error::Shape("columns of different lengths".into()));
        }
        Self::from_matrix(DMatrix::from_columns(cols))
    }

    pub fn zeros(d: usize, l: usize) -> Self {
        assert!(d > 0 && l > 0, "empty sequence matrix");
        SeqMatrix(DMatrix::zeros(d, l))
    }

    pub fn d(&self) -> usize {
        self.0.nrows()
    }

    pub fn len(&self) -> usize {
        self.0.ncols()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn col(&self, k: usize) -> DVectorView<'_, f64> {
        self.0.column(k)
    }

    pub fn column_vec(&self, k: usize) -> DVector<f64> {
        self.0.column(k).into_owned()
    }

    pub fn columns(&self) -> impl Iterator<Item = DVectorView<'_, f64>> {
        (0..self.len()).map(move |k| self.0.column(k))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn row_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.d() * self.len());
        for i in 0..self.d() {
            for j in 0..self.len() {
                out.push(self.0[(i, j)]);
            }
        }
        out
    }

    /// `[self, other]` along the token axis.
    pub fn hcat(&self, other: &SeqMatrix) -> Result<SeqMatrix> {
        if self.d() != other.d() {
            return Err(Error::Shape(format!("cannot concatenate d = {} with d = {}", self.d(), other.d())));
        }
        let mut m = DMatrix::zeros(self.d(), self.len() + other.len());
        m.columns_mut(0, self.len()).copy_from(&self.0);
        m.columns_mut(self.len(), other.len()).copy_from(&other.0);
        Ok(SeqMatrix(m))
    }

    /// Columns `start..` as a new matrix.
    pub fn tail(&self, start: usize) -> Result<SeqMatrix> {
        if start >= self.len() {
            return Err(Error::Shape(format!("tail from column {start} of {}", self.len())));
        }
        Ok(SeqMatrix(self.0.columns(start, self.len() - start).into_owned()))
    }

    pub fn head(&self, count: usize) -> Result<SeqMatrix> {
        if count == 0 || count > self.len() {
            return Err(Error::Shape(format!("head of {count} columns from {}", self.len())));
        }
        Ok(SeqMatrix(self.0.columns(0, count).into_owned()))
    }

    /// Entrywise α-norm of the flattened matrix (α = ∞ allowed).
    pub fn alpha_norm(&self, alpha: f64) -> f64 {
        alpha_norm(self.0.iter().copied(), alpha)
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &SeqMatrix) -> f64 {
        self.0.iter().zip(other.0.iter()).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

pub fn alpha_norm(values: impl Iterator<Item = f64>, alpha: f64) -> f64 {
    if alpha.is_infinite() {
        values.fold(0.0_f64, |m, v| m.max(v.abs()))
    } else if alpha == 1.0 {
        values.map(f64::abs).sum()
    } else {
        values.map(|v| v.abs().powf(alpha)).sum::<f64>().powf(1.0 / alpha)
    }
}

/// Exact bit key of a vector, with -0.0 folded into 0.0.
pub fn bits_key<'a>(values: impl Iterator<Item = &'a f64>) -> Vec<u64> {
    values.map(|v| if *v == 0.0 { 0 } else { v.to_bits() }).collect()
}

#[derive(Serialize, Deserialize)]
struct SeqRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Serialize for SeqMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        SeqRepr { rows: self.d(), cols: self.len(), data: self.row_major() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for SeqMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = SeqRepr::deserialize(d)?;
        SeqMatrix::from_row_major(r.rows, r.cols, &r.data).map_err(serde::de::Error::custom)
    }
}

/// `+∞` written as JSON `null` and read back, for minima over empty sets.
pub mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() { Some(*v) } else { None }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Row-major serde helper for plain weight matrices.
pub mod dense_serde {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Repr {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Repr { rows: m.nrows(), cols: m.ncols(), data }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let r = Repr::deserialize(d)?;
        if r.data.len() != r.rows * r.cols {
            return Err(serde::de::Error::custom("matrix data length does not match dims"));
        }
        Ok(DMatrix::from_row_slice(r.rows, r.cols, &r.data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_major_round_trip() {
        let m = SeqMatrix::from_row_major(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.col(1)[1], 5.0);
        assert_eq!(m.row_major(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let json = serde_json::to_string(&m).unwrap();
        let back: SeqMatrix = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(SeqMatrix::from_row_major(1, 2, &[0.0, f64::NAN]).is_err());
        assert!(SeqMatrix::from_row_major(1, 2, &[0.0]).is_err());
    }

    #[test]
    fn concat_and_slices() {
        let a = SeqMatrix::from_row_major(1, 2, &[1.0, 2.0]).unwrap();
        let b = SeqMatrix::from_row_major(1, 1, &[3.0]).unwrap();
        let c = a.hcat(&b).unwrap();
        assert_eq!(c.row_major(), vec![1.0, 2.0, 3.0]);
        assert_eq!(c.tail(2).unwrap(), b);
        assert_eq!(c.head(2).unwrap(), a);
    }

    #[test]
    fn norms() {
        let a = SeqMatrix::from_row_major(1, 2, &[3.0, -4.0]).unwrap();
        assert_eq!(a.alpha_norm(1.0), 7.0);
        assert!((a.alpha_norm(2.0) - 5.0).abs() < 1e-15);
        assert_eq!(a.alpha_norm(f64::INFINITY), 4.0);
    }

    #[test]
    fn infinite_minimum_survives_json() {
        #[derive(Serialize, Deserialize, PartialEq, Debug)]
        struct Gap {
            #[serde(with = "inf_as_null")]
            g: f64,
        }
        assert_eq!(serde_json::to_string(&Gap { g: f64::INFINITY }).unwrap(), r#"{"g":null}"#);
        assert_eq!(serde_json::from_str::<Gap>(r#"{"g":null}"#).unwrap().g, f64::INFINITY);
        assert_eq!(serde_json::from_str::<Gap>(r#"{"g":0.5}"#).unwrap(), Gap { g: 0.5 });
    }
}
