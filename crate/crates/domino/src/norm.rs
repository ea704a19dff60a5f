//! Running mean/std statistics for input and target standardization.

use crate::ad::Tensor;
use crate::error::{dim_err, Error, Result};

/// Smallest standard deviation used when dividing, so constant dimensions
/// (and the very first sample) do not blow up.
pub const STD_FLOOR: f64 = 1e-3;

/// Welford accumulator, one lane per dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningStats {
    pub fn new(dim: usize) -> Self {
        Self { count: 0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn update(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return dim_err(format!("stats of width {} fed a row of {}", self.dim(), x.len()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("running statistics input".into()));
        }
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
        Ok(())
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Population variance; zero before two samples.
    pub fn variance(&self) -> Vec<f64> {
        if self.count < 2 {
            return vec![0.0; self.dim()];
        }
        self.m2.iter().map(|s| (s / self.count as f64).max(0.0)).collect()
    }

    /// Frozen copy of the current statistics. Before any update this is the
    /// identity transform.
    pub fn snapshot(&self) -> Standardizer {
        if self.count == 0 {
            return Standardizer::identity(self.dim());
        }
        let std = self.variance().iter().map(|v| v.sqrt().max(STD_FLOOR)).collect();
        Standardizer { mean: self.mean.clone(), std }
    }
}

/// An affine `(x - mean) / std` map with fixed parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn apply_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.extend(x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s));
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m).collect()
    }

    pub fn to_records(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}mean"), Tensor::row(self.mean.clone())),
            (format!("{prefix}std"), Tensor::row(self.std.clone())),
        ]
    }

    pub fn from_records(prefix: &str, records: &[(String, Tensor)], dim: usize) -> Result<Self> {
        let mean = crate::ad::checkpoint::find(records, &format!("{prefix}mean"))?.data().to_vec();
        let std = crate::ad::checkpoint::find(records, &format!("{prefix}std"))?.data().to_vec();
        if mean.len() != dim || std.len() != dim {
            return Err(Error::Format(format!("{prefix} statistics have width {}, expected {dim}", mean.len())));
        }
        Ok(Self { mean, std })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_before_updates() {
        let s = RunningStats::new(2).snapshot();
        assert_eq!(s.apply(&[3.0, -4.0]), vec![3.0, -4.0]);
    }

    #[test]
    fn matches_two_pass_statistics() {
        let xs = [[1.0, 10.0], [2.0, 10.0], [4.0, 10.0], [9.0, 10.0]];
        let mut s = RunningStats::new(2);
        for x in &xs {
            s.update(x).unwrap();
        }
        let mean0 = xs.iter().map(|x| x[0]).sum::<f64>() / 4.0;
        let var0 = xs.iter().map(|x| (x[0] - mean0).powi(2)).sum::<f64>() / 4.0;
        assert!((s.mean()[0] - mean0).abs() < 1e-12);
        assert!((s.variance()[0] - var0).abs() < 1e-12);
        let z = s.snapshot();
        assert_eq!(z.std[1], STD_FLOOR);
        let back = z.invert(&z.apply(&[5.0, 3.0]));
        assert!((back[0] - 5.0).abs() < 1e-12 && (back[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_rows() {
        let mut s = RunningStats::new(2);
        assert!(s.update(&[1.0]).is_err());
        assert!(s.update(&[1.0, f64::NAN]).is_err());
        assert_eq!(s.count(), 0);
    }
}
