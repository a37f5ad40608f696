//! The observedness mask and the masked data carrier.

use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::scalar::Real;

/// Boolean matrix, `true` = observed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    observed: Vec<bool>,
}

impl Mask {
    pub fn all_observed(rows: usize, cols: usize) -> Self {
        Self { rows, cols, observed: vec![true; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, observed: Vec<bool>) -> Result<Self> {
        if observed.len() != rows * cols {
            return Err(Error::Dimension(format!("mask of {} cells for {rows}x{cols}", observed.len())));
        }
        Ok(Self { rows, cols, observed })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.observed[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, observed: bool) {
        self.observed[i * self.cols + j] = observed;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[bool] {
        &self.observed[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [bool] {
        let c = self.cols;
        &mut self.observed[i * c..(i + 1) * c]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.observed
    }

    pub fn missing_count(&self) -> usize {
        self.observed.iter().filter(|&&o| !o).count()
    }

    pub fn missing_fraction(&self) -> f64 {
        if self.observed.is_empty() {
            0.0
        } else {
            self.missing_count() as f64 / self.observed.len() as f64
        }
    }

    /// Cell-wise AND of two masks.
    pub fn and(&self, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension("mask shapes differ".into()));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            observed: self.observed.iter().zip(&other.observed).map(|(&a, &b)| a && b).collect(),
        })
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut observed = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            observed.extend_from_slice(self.row(i));
        }
        Self { rows: idx.len(), cols: self.cols, observed }
    }

    /// Index of the first row with no observed entry.
    pub fn first_empty_row(&self) -> Option<usize> {
        (0..self.rows).find(|&i| !self.row(i).iter().any(|&o| o))
    }
}

/// Numeric table plus observedness mask. Missing cells always hold zero.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedMatrix<T> {
    values: Matrix<T>,
    mask: Mask,
}

impl<T: Real> MaskedMatrix<T> {
    /// Pairs values with a mask, zeroing the missing cells.
    pub fn new(mut values: Matrix<T>, mask: Mask) -> Result<Self> {
        if values.shape() != mask.shape() {
            return Err(Error::Dimension(format!(
                "values {}x{} vs mask {}x{}",
                values.rows(),
                values.cols(),
                mask.rows(),
                mask.cols()
            )));
        }
        for (x, &o) in values.as_mut_slice().iter_mut().zip(mask.as_slice()) {
            if !o {
                *x = T::zero();
            }
        }
        Ok(Self { values, mask })
    }

    pub fn complete(values: Matrix<T>) -> Self {
        let mask = Mask::all_observed(values.rows(), values.cols());
        Self { values, mask }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    /// Values with missing cells set to zero.
    #[inline]
    pub fn values(&self) -> &Matrix<T> {
        &self.values
    }

    #[inline]
    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn into_parts(self) -> (Matrix<T>, Mask) {
        (self.values, self.mask)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Option<T> {
        self.mask.is_observed(i, j).then(|| self.values.get(i, j))
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self { values: self.values.select_rows(idx), mask: self.mask.select_rows(idx) }
    }

    pub fn vstack(parts: &[&Self]) -> Result<Self> {
        let vals: Vec<&Matrix<T>> = parts.iter().map(|p| &p.values).collect();
        let values = Matrix::vstack(&vals)?;
        let mut observed = Vec::with_capacity(values.as_slice().len());
        for p in parts {
            observed.extend_from_slice(p.mask.as_slice());
        }
        let mask = Mask::from_vec(values.rows(), values.cols(), observed)?;
        Ok(Self { values, mask })
    }

    /// Errors naming the first row without any observed entry.
    pub fn require_observed_rows(&self) -> Result<()> {
        match self.mask.first_empty_row() {
            Some(r) => Err(Error::Data(format!("row {r} has no observed entries"))),
            None => Ok(()),
        }
    }

    pub fn convert<U: Real>(&self) -> MaskedMatrix<U> {
        let vals = self.values.as_slice().iter().map(|x| U::lit(x.as_f64())).collect();
        MaskedMatrix {
            values: Matrix::from_vec(self.rows(), self.cols(), vals).expect("same shape"),
            mask: self.mask.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_cells_are_zeroed() {
        let v = Matrix::from_rows(&[vec![1.0f64, 2.0], vec![3.0, 4.0]]).unwrap();
        let m = Mask::from_vec(2, 2, vec![true, false, false, true]).unwrap();
        let mm = MaskedMatrix::new(v, m).unwrap();
        assert_eq!(mm.values().as_slice(), &[1.0, 0.0, 0.0, 4.0]);
        assert_eq!(mm.get(0, 1), None);
        assert_eq!(mm.get(1, 1), Some(4.0));
    }

    #[test]
    fn empty_row_is_reported() {
        let v = Matrix::<f64>::zeros(3, 2);
        let m = Mask::from_vec(3, 2, vec![true, true, false, false, true, false]).unwrap();
        let mm = MaskedMatrix::new(v, m).unwrap();
        match mm.require_observed_rows() {
            Err(Error::Data(msg)) => assert!(msg.contains("row 1")),
            other => panic!("{other:?}"),
        }
    }
}
