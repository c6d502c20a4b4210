//! Flat view over a model's entire parameter set.
//!
//! The weight vector `w`, the perturbation, gradients and momentum buffers
//! are all length-P [`ParamVector`]s, so norm, dot and axpy operations work
//! uniformly regardless of the layer structure behind them.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    data: Vec<f64>,
}

impl ParamVector {
    pub fn from_vec(data: Vec<f64>) -> Self {
        ParamVector { data }
    }

    pub fn zeros(len: usize) -> Self {
        ParamVector { data: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_len(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn scaled(&self, factor: f64) -> ParamVector {
        ParamVector {
            data: self.data.iter().map(|x| x * factor).collect(),
        }
    }

    pub fn negated(&self) -> ParamVector {
        self.scaled(-1.0)
    }

    /// `self += factor * other`.
    pub fn axpy(&mut self, factor: f64, other: &ParamVector) -> Result<()> {
        self.check_len(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    /// Elementwise `self = scale * self + other`, the momentum recurrence.
    pub fn scale_then_add(&mut self, scale: f64, other: &ParamVector) -> Result<()> {
        self.check_len(other, "scale_then_add")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = scale * *a + b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> Result<f64> {
        self.check_len(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn bitwise_eq(&self, other: &ParamVector) -> bool {
        self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    fn check_len(&self, other: &ParamVector, op: &'static str) -> Result<()> {
        if self.data.len() != other.data.len() {
            return Err(Error::shape(
                op,
                format!("length {} vs {}", self.data.len(), other.data.len()),
            ));
        }
        Ok(())
    }
}
