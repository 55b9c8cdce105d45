//! Dense rank-4 float32 array, NCHW layout.

use crate::{Error, Result};

/// Dense `(batch, channel, height, width)` array of `f32`, row-major.
///
/// Vectors live as `[n, k, 1, 1]`, scalars as `[1, 1, 1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Array4 {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Array4 {
    pub fn zeros(shape: [usize; 4]) -> Self {
        let len = shape.iter().product();
        Array4 { shape, data: vec![0.0; len] }
    }

    pub fn filled(shape: [usize; 4], v: f32) -> Self {
        let len = shape.iter().product();
        Array4 { shape, data: vec![v; len] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "buffer of {} values cannot fill shape {:?}",
                data.len(),
                shape
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dim in {shape:?}")));
        }
        Ok(Array4 { shape, data })
    }

    pub fn scalar(v: f32) -> Self {
        Array4 { shape: [1, 1, 1, 1], data: vec![v] }
    }

    /// A single `(row, col)` vector as `[1, 2, 1, 1]`.
    pub fn vec2(row: f32, col: f32) -> Self {
        Array4 { shape: [1, 2, 1, 1], data: vec![row, col] }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.shape[0]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.shape[3]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.idx(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f32) {
        let i = self.idx(n, c, h, w);
        self.data[i] = v;
    }

    /// One full channel plane `[h*w]` of batch item `n`.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    /// Extract the value of a `[1,1,1,1]` array.
    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    pub fn assert_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite values in {what}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_row_major_nchw() {
        let mut a = Array4::zeros([2, 3, 4, 5]);
        a.set(1, 2, 3, 4, 7.0);
        assert_eq!(a.data()[1 * 3 * 4 * 5 + 2 * 4 * 5 + 3 * 5 + 4], 7.0);
        assert_eq!(a.at(1, 2, 3, 4), 7.0);
    }

    #[test]
    fn from_vec_rejects_bad_len() {
        assert!(Array4::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
        assert!(Array4::from_vec([1, 0, 2, 2], vec![]).is_err());
    }
}
