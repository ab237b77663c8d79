//! Naive dense-matrix reference implementations.
//!
//! Everything here assembles the full `L x L` Leroux precision and runs
//! dense factorizations on every call — no caching, no sparsity, no
//! eigenvalue shortcut. These routines exist for two reasons:
//!
//! * validation: the sparse evaluations in [`crate::car`] are checked
//!   against them (the two code paths share no intermediate results);
//! * benchmarking: the acceptance suite measures how much the sparse
//!   path gains over a straightforward dense implementation at realistic
//!   problem sizes.
//!
//! They are also the factorization backend for
//! [`crate::car::sample_car_field`], where a one-off dense Cholesky is the
//! right tool.

use crate::car::{CarParams, StField};
use crate::error::{Error, Result};
use crate::graph::AreaGraph;
use nalgebra::{Cholesky, DMatrix, DVector};

/// Assemble the dense Leroux precision `Q = alpha * (D - W) + (1 - alpha) * I`.
pub fn dense_precision(graph: &AreaGraph, alpha: f64) -> DMatrix<f64> {
    let n = graph.n_areas();
    let mut q = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        q[(i, i)] = alpha * graph.degree(i) as f64 + (1.0 - alpha);
    }
    for &(a, b) in graph.edges() {
        q[(a as usize, b as usize)] = -alpha;
        q[(b as usize, a as usize)] = -alpha;
    }
    q
}

fn cholesky(graph: &AreaGraph, alpha: f64) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    Cholesky::new(dense_precision(graph, alpha)).ok_or_else(|| {
        Error::NumericDomain(format!(
            "Leroux precision is not positive definite at alpha = {alpha}"
        ))
    })
}

fn log_det_from_cholesky(chol: &Cholesky<f64, nalgebra::Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// `ln|Q|` by dense Cholesky factorization.
pub fn log_det_q_dense(graph: &AreaGraph, alpha: f64) -> Result<f64> {
    Ok(log_det_from_cholesky(&cholesky(graph, alpha)?))
}

/// Log-density of `N(0, sigma^2 Q^{-1})` evaluated the long way round:
/// explicitly invert the precision, then evaluate the multivariate normal
/// in covariance form with its own factorization. Shares nothing with the
/// sparse path beyond the graph itself.
pub fn leroux_logpdf_dense(graph: &AreaGraph, x: &[f64], alpha: f64, sigma: f64) -> Result<f64> {
    let n = graph.n_areas();
    if x.len() != n {
        return Err(Error::DimensionMismatch {
            context: "leroux_logpdf_dense",
            expected: n,
            got: x.len(),
        });
    }
    let q = dense_precision(graph, alpha);
    let cov = q
        .try_inverse()
        .ok_or_else(|| Error::NumericDomain("Leroux precision is singular".into()))?
        * (sigma * sigma);
    let chol = Cholesky::new(cov)
        .ok_or_else(|| Error::NumericDomain("covariance is not positive definite".into()))?;
    let log_det_cov = log_det_from_cholesky(&chol);
    let xv = DVector::from_column_slice(x);
    let solved = chol.solve(&xv);
    let maha = xv.dot(&solved);
    Ok(-0.5 * (n as f64) * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det_cov - 0.5 * maha)
}

/// CAR-AR log-density with a dense factorization redone on every call:
/// the first time slice is `N(0, sigma^2 Q^{-1})` and each subsequent slice
/// is `N(rho * previous, sigma^2 Q^{-1})`. This is the "what you would
/// write without the sparse identities" baseline.
pub fn car_ar_logpdf_dense(graph: &AreaGraph, field: &StField, params: &CarParams) -> Result<f64> {
    let n = graph.n_areas();
    if field.n_areas() != n {
        return Err(Error::DimensionMismatch {
            context: "car_ar_logpdf_dense",
            expected: n,
            got: field.n_areas(),
        });
    }
    params.validate()?;
    let t_len = field.n_times();
    let chol = cholesky(graph, params.alpha)?;
    let log_det_q = log_det_from_cholesky(&chol);
    let q = dense_precision(graph, params.alpha);
    let sig2 = params.sigma * params.sigma;
    let norm_per_slice = -0.5 * (n as f64) * (2.0 * std::f64::consts::PI).ln()
        - (n as f64) * params.sigma.ln()
        + 0.5 * log_det_q;
    let mut total = 0.0;
    let mut innov = DVector::<f64>::zeros(n);
    for t in 0..t_len {
        let cur = field.slice(t);
        if t == 0 {
            for i in 0..n {
                innov[i] = cur[i];
            }
        } else {
            let prev = field.slice(t - 1);
            for i in 0..n {
                innov[i] = cur[i] - params.rho * prev[i];
            }
        }
        let quad = innov.dot(&(&q * &innov));
        total += norm_per_slice - 0.5 * quad / sig2;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn dense_precision_row_sums() {
        // Rows of Q sum to alpha * 0 + (1 - alpha) because (D - W) 1 = 0.
        let g = AreaGraph::lattice(3, 3).unwrap();
        let q = dense_precision(&g, 0.7);
        for i in 0..9 {
            let s: f64 = (0..9).map(|j| q[(i, j)]).sum();
            assert_abs_diff_eq!(s, 0.3, epsilon = 1e-12);
        }
    }

    #[test]
    fn log_det_zero_alpha_is_zero() {
        let g = AreaGraph::lattice(2, 3).unwrap();
        assert_abs_diff_eq!(log_det_q_dense(&g, 0.0).unwrap(), 0.0, epsilon = 1e-12);
    }
}
