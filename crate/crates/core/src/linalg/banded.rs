//! Direct solvers for banded matrices.
//!
//! Structured-mesh operators with lexicographic node numbering have half
//! bandwidth `n + 2`, so a banded factorization costs `O(N b^2)` and every
//! solve `O(N b)`.

use nalgebra::DVector;

use super::sparse::CsrMatrix;
use crate::error::{numerical, Result};

/// Cholesky factor `A = L Lᵀ` of a symmetric positive definite band matrix.
#[derive(Clone, Debug)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    // row i holds L[i, i-bw..=i] at offsets 0..=bw
    l: Vec<f64>,
}

impl BandedCholesky {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        let n = a.nrows();
        assert_eq!(n, a.ncols());
        let bw = a.bandwidth();
        let w = bw + 1;
        let mut l = vec![0.0; n * w];
        let at = |i: usize, j: usize| i * w + (j + bw - i);
        for (r, c, v) in a.triplets() {
            if c <= r {
                l[at(r, c)] = v;
            }
        }
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                let klo = lo.max(j.saturating_sub(bw));
                let mut s = l[at(i, j)];
                for k in klo..j {
                    s -= l[at(i, k)] * l[at(j, k)];
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(numerical(format!(
                            "banded Cholesky: non-positive pivot {s:e} at row {i}"
                        )));
                    }
                    l[at(i, i)] = s.sqrt();
                } else {
                    l[at(i, j)] = s / l[at(j, j)];
                }
            }
        }
        Ok(Self { n, bw, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.l[i * (self.bw + 1) + (j + self.bw - i)]
    }

    /// Solves `L y = b`.
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut y = b.clone();
        for i in 0..self.n {
            let mut s = y[i];
            for k in i.saturating_sub(self.bw)..i {
                s -= self.at(i, k) * y[k];
            }
            y[i] = s / self.at(i, i);
        }
        y
    }

    /// Solves `Lᵀ x = y`.
    pub fn solve_upper(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut x = y.clone();
        for i in (0..self.n).rev() {
            let mut s = x[i];
            for k in (i + 1)..(i + self.bw + 1).min(self.n) {
                s -= self.at(k, i) * x[k];
            }
            x[i] = s / self.at(i, i);
        }
        x
    }

    /// `L x` for the lower factor.
    pub fn mul_lower(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.n,
            (0..self.n).map(|i| {
                (i.saturating_sub(self.bw)..=i)
                    .map(|k| self.at(i, k) * x[k])
                    .sum::<f64>()
            }),
        )
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.solve_upper(&self.solve_lower(b))
    }
}

/// LU factorization with partial pivoting of a general band matrix.
///
/// Storage follows the LAPACK `gbtrf` column layout: the upper band grows by
/// `kl` to absorb fill from row interchanges.
#[derive(Clone, Debug)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku2: usize,
    ld: usize,
    ab: Vec<f64>,
    piv: Vec<usize>,
}

impl BandedLu {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        let n = a.nrows();
        assert_eq!(n, a.ncols());
        let (mut kl, mut ku) = (0usize, 0usize);
        for (r, c, _) in a.triplets() {
            if r > c {
                kl = kl.max(r - c);
            } else {
                ku = ku.max(c - r);
            }
        }
        let ku2 = ku + kl;
        let ld = ku2 + kl + 1;
        let mut lu = Self {
            n,
            kl,
            ku2,
            ld,
            ab: vec![0.0; n * ld],
            piv: vec![0; n],
        };
        for (r, c, v) in a.triplets() {
            let k = lu.idx(r, c);
            lu.ab[k] += v;
        }
        let scale = lu.ab.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for k in 0..n {
            let last = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = lu.ab[lu.idx(k, k)].abs();
            for i in (k + 1)..=last {
                let v = lu.ab[lu.idx(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if !(best > scale * 1e-14) {
                return Err(numerical(format!(
                    "banded LU: matrix is numerically singular at column {k}"
                )));
            }
            lu.piv[k] = p;
            let jmax = (k + ku2).min(n - 1);
            if p != k {
                for j in k..=jmax {
                    let (a1, a2) = (lu.idx(k, j), lu.idx(p, j));
                    lu.ab.swap(a1, a2);
                }
            }
            let pivot = lu.ab[lu.idx(k, k)];
            for i in (k + 1)..=last {
                let ik = lu.idx(i, k);
                let factor = lu.ab[ik] / pivot;
                lu.ab[ik] = factor;
                if factor != 0.0 {
                    for j in (k + 1)..=jmax {
                        let kj = lu.ab[lu.idx(k, j)];
                        let ij = lu.idx(i, j);
                        lu.ab[ij] -= factor * kj;
                    }
                }
            }
        }
        Ok(lu)
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i + self.ku2 >= j && i <= j + self.kl);
        j * self.ld + (i + self.ku2 - j)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        let mut x = b.clone();
        for k in 0..n {
            let p = self.piv[k];
            if p != k {
                x.swap_rows(k, p);
            }
            let xk = x[k];
            if xk != 0.0 {
                for i in (k + 1)..=(k + self.kl).min(n - 1) {
                    x[i] -= self.ab[self.idx(i, k)] * xk;
                }
            }
        }
        for k in (0..n).rev() {
            let mut s = x[k];
            for j in (k + 1)..=(k + self.ku2).min(n - 1) {
                s -= self.ab[self.idx(k, j)] * x[j];
            }
            x[k] = s / self.ab[self.idx(k, k)];
        }
        x
    }

    /// Solves `Aᵀ x = b` with the same factorization.
    pub fn solve_transpose(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        let mut x = b.clone();
        for k in 0..n {
            let mut s = x[k];
            for i in k.saturating_sub(self.ku2)..k {
                s -= self.ab[self.idx(i, k)] * x[i];
            }
            x[k] = s / self.ab[self.idx(k, k)];
        }
        for k in (0..n).rev() {
            let mut s = x[k];
            for i in (k + 1)..=(k + self.kl).min(n - 1) {
                s -= self.ab[self.idx(i, k)] * x[i];
            }
            x[k] = s;
            let p = self.piv[k];
            if p != k {
                x.swap_rows(k, p);
            }
        }
        x
    }
}
