use super::matrix::Matrix;
use crate::error::{Error, Result};
use crate::scalar::Real;
use std::sync::Arc;

/// A named `rows x cols` block inside a flat parameter buffer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl Segment {
    #[inline]
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered list of segments tiling a flat buffer.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Layout {
    segments: Vec<Segment>,
    len: usize,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a segment after the current end.
    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> &mut Self {
        let seg = Segment { name: name.into(), rows, cols, offset: self.len };
        self.len += seg.len();
        self.segments.push(seg);
        self
    }

    pub fn from_shapes<S: Into<String>>(shapes: impl IntoIterator<Item = (S, usize, usize)>) -> Self {
        let mut l = Self::new();
        for (name, r, c) in shapes {
            l.push(name, r, c);
        }
        l
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// Segment whose range contains flat index `i`.
    pub fn locate(&self, i: usize) -> Option<&Segment> {
        self.segments.iter().find(|s| s.range().contains(&i))
    }
}

/// Flat parameter vector with a shared layout; the unit of federated exchange.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector<T> {
    values: Vec<T>,
    layout: Arc<Layout>,
}

impl<T: Real> ParamVector<T> {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        Self { values: vec![T::zero(); layout.len()], layout }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<T>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Dimension(format!(
                "{} values for a layout of length {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self { values, layout })
    }

    /// Rebuilds a vector from one matrix per segment, in layout order.
    pub fn from_segments(layout: Arc<Layout>, mats: &[Matrix<T>]) -> Result<Self> {
        if mats.len() != layout.segments().len() {
            return Err(Error::Dimension(format!(
                "{} matrices for {} segments",
                mats.len(),
                layout.segments().len()
            )));
        }
        let mut values = Vec::with_capacity(layout.len());
        for (seg, m) in layout.segments().iter().zip(mats) {
            if m.shape() != (seg.rows, seg.cols) {
                return Err(Error::Dimension(format!(
                    "segment '{}' is {}x{}, got {}x{}",
                    seg.name,
                    seg.rows,
                    seg.cols,
                    m.rows(),
                    m.cols()
                )));
            }
            values.extend_from_slice(m.as_slice());
        }
        Ok(Self { values, layout })
    }

    /// One matrix per segment.
    pub fn to_segments(&self) -> Vec<Matrix<T>> {
        self.layout
            .segments()
            .iter()
            .map(|s| Matrix::from_vec(s.rows, s.cols, self.values[s.range()].to_vec()).expect("segment tiles"))
            .collect()
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn segment(&self, name: &str) -> Option<&[T]> {
        self.layout.segment(name).map(|s| &self.values[s.range()])
    }

    pub fn segment_matrix(&self, name: &str) -> Option<Matrix<T>> {
        let s = self.layout.segment(name)?;
        Some(Matrix::from_vec(s.rows, s.cols, self.values[s.range()].to_vec()).expect("segment tiles"))
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    fn check_layout(&self, other: &Self) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Dimension("parameter layouts differ".into()))
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_layout(other)?;
        Ok(Self {
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| a + b).collect(),
            layout: self.layout.clone(),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_layout(other)?;
        Ok(Self {
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| a - b).collect(),
            layout: self.layout.clone(),
        })
    }

    pub fn scale(&self, c: T) -> Self {
        Self { values: self.values.iter().map(|&a| a * c).collect(), layout: self.layout.clone() }
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: T, other: &Self) -> Result<()> {
        self.check_layout(other)?;
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn norm(&self) -> T {
        self.values.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn sum(&self) -> T {
        self.values.iter().copied().sum()
    }

    /// First segment holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.values
            .iter()
            .position(|x| !x.is_finite())
            .and_then(|i| self.layout.locate(i))
            .map(|s| s.name.as_str())
    }
}
