//! Dense symmetric positive-definite solves via Cholesky.
//!
//! Matrices are square, row-major `Vec<f64>` of length `n * n`.

use serde::{Deserialize, Serialize};

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cholesky {
    pub n: usize,
    /// Row-major, upper triangle is zero.
    pub lower: Vec<f64>,
}

impl Cholesky {
    /// Factors `a + shift * I`. Returns `None` if a pivot is not positive.
    pub fn factor(a: &[f64], n: usize, shift: f64) -> Option<Self> {
        assert_eq!(a.len(), n * n);
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut sum = a[i * n + j];
                if i == j {
                    sum += shift;
                }
                let (ri, rj) = (&l[i * n..i * n + j], &l[j * n..j * n + j]);
                sum -= ri.iter().zip(rj).map(|(x, y)| x * y).sum::<f64>();
                if i == j {
                    if !(sum > 0.0) || !sum.is_finite() {
                        return None;
                    }
                    l[i * n + i] = sum.sqrt();
                } else {
                    l[i * n + j] = sum / l[j * n + j];
                }
            }
        }
        Some(Self { n, lower: l })
    }

    /// Tries `shift` then escalates by 10x jitter from `jitter_min` up to
    /// `jitter_max`. Returns the factor and the jitter actually added.
    pub fn factor_with_jitter(
        a: &[f64],
        n: usize,
        shift: f64,
        jitter_min: f64,
        jitter_max: f64,
    ) -> Result<(Self, f64), f64> {
        let mut jitter = jitter_min;
        loop {
            if let Some(c) = Self::factor(a, n, shift + jitter) {
                return Ok((c, jitter));
            }
            if jitter >= jitter_max {
                return Err(jitter);
            }
            jitter = (jitter * 10.0).min(jitter_max);
        }
    }

    /// Solves `L z = b`.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut z = b.to_vec();
        for i in 0..n {
            let row = &self.lower[i * n..i * n + i];
            let s: f64 = row.iter().zip(&z[..i]).map(|(l, z)| l * z).sum();
            z[i] = (z[i] - s) / self.lower[i * n + i];
        }
        z
    }

    /// Solves `Lᵀ x = z`.
    pub fn solve_upper(&self, z: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = z.to_vec();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n {
                s -= self.lower[k * n + i] * x[k];
            }
            x[i] = s / self.lower[i * n + i];
        }
        x
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.solve_upper(&self.solve_lower(b))
    }

    /// `log det A = 2 Σ log L_ii`.
    pub fn log_det(&self) -> f64 {
        (0..self.n).map(|i| self.lower[i * self.n + i].ln()).sum::<f64>() * 2.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
