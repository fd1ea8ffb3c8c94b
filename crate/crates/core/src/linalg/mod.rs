pub mod banded;
pub mod cg;
pub mod sparse;

pub use banded::{BandedCholesky, BandedLu};
pub use sparse::{CsrMatrix, TripletBuilder};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

/// Symmetrizes a nearly symmetric dense matrix.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Trace of `a * b` without forming the product.
pub fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.ncols(), b.nrows());
    assert_eq!(a.nrows(), b.ncols());
    let mut t = 0.0;
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            t += a[(i, k)] * b[(k, i)];
        }
    }
    t
}

/// Pairwise summation; order-independent to within rounding of the tree.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n if n <= 8 => values.iter().sum(),
        n => pairwise_sum(&values[..n / 2]) + pairwise_sum(&values[n / 2..]),
    }
}

pub fn column_vector(m: &DMatrix<f64>, j: usize) -> DVector<f64> {
    m.column(j).into_owned()
}

/// Builds a matrix whose columns are `f(v_j)` for the columns `v_j` of `m`,
/// evaluated in parallel.
pub fn map_columns<F>(m: &DMatrix<f64>, f: F) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64> + Sync,
{
    let cols: Vec<DVector<f64>> = (0..m.ncols())
        .into_par_iter()
        .map(|j| f(&column_vector(m, j)))
        .collect();
    from_columns(&cols, m.nrows())
}

/// Stacks column vectors; `nrows` is used when the list is empty.
pub fn from_columns(cols: &[DVector<f64>], nrows: usize) -> DMatrix<f64> {
    let rows = cols.first().map_or(nrows, |c| c.len());
    let mut out = DMatrix::zeros(rows, cols.len());
    for (j, c) in cols.iter().enumerate() {
        out.set_column(j, c);
    }
    out
}

/// `aᵀ M b` for a sparse symmetric weight `M`.
pub fn weighted_gram(mass: &CsrMatrix, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut mb = DMatrix::zeros(b.nrows(), b.ncols());
    for j in 0..b.ncols() {
        mb.set_column(j, &mass.mul_vec(&column_vector(b, j)));
    }
    a.transpose() * mb
}

/// Symmetric eigendecomposition sorted by decreasing eigenvalue.
pub fn sorted_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = symmetrize(a).symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = DVector::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(a.nrows(), order.len());
    for (k, &i) in order.iter().enumerate() {
        vectors.set_column(k, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}
