//! Leroux CAR spatial prior and its space-time CAR-AR extension.
//!
//! The spatial precision at mixing parameter `alpha` is
//!
//! ```text
//! Q(alpha) = alpha * (D - W) + (1 - alpha) * I
//! ```
//!
//! where `W` is the adjacency matrix and `D` the diagonal degree matrix;
//! `alpha = 0` is an exchangeable N(0, sigma^2 I) field and `alpha -> 1`
//! approaches the intrinsic CAR. A zero-mean field with covariance
//! `sigma^2 Q^{-1}` has log-density requiring only
//!
//! * the quadratic form `x' Q x`, which decomposes over graph edges as
//!   `alpha * sum_{i~j} (x_i - x_j)^2 + (1 - alpha) * sum_i x_i^2`
//!   (each undirected pair counted once), and
//! * `ln|Q| = sum_i ln(1 - alpha * lambda_a_i)` where `lambda_a_i` are the
//!   eigenvalues of `M = W + I - D`, precomputed once per graph.
//!
//! So after one `O(L^3)` eigendecomposition at startup, every density
//! evaluation is `O(L + E)` — no factorizations inside the sampler.
//!
//! Space-time fields stack `T` slices with an AR(1) innovation structure:
//! slice 1 is `N(0, sigma^2 Q^{-1})` and slice `t` is
//! `N(rho * slice_{t-1}, sigma^2 Q^{-1})`. [`car_ar_logpdf`] evaluates the
//! joint density; [`noncentered`] maps i.i.d.-slice innovations to the
//! correlated field (the parameterization the sampler actually explores).

use crate::error::{Error, Result};
use crate::graph::{AreaGraph, EigenSpectrum};

const LN_2PI: f64 = 1.8378770664093453; // ln(2 * pi)

/// Parameters of one CAR-AR random field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarParams {
    /// Spatial mixing parameter, in `[0, 1)`.
    pub alpha: f64,
    /// Temporal autoregression coefficient, in `[0, 1)`.
    pub rho: f64,
    /// Innovation scale, positive.
    pub sigma: f64,
}

impl CarParams {
    pub fn new(alpha: f64, rho: f64, sigma: f64) -> Result<Self> {
        let p = CarParams { alpha, rho, sigma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::NumericDomain(format!(
                "CAR alpha must lie in [0, 1), got {}",
                self.alpha
            )));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::NumericDomain(format!(
                "CAR rho must lie in [0, 1), got {}",
                self.rho
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::NumericDomain(format!(
                "CAR sigma must be positive and finite, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// An `L x T` space-time field stored time-major: slice `t` (all areas at
/// one time) is contiguous, which is the access pattern of every CAR
/// operation.
#[derive(Debug, Clone, PartialEq)]
pub struct StField {
    n_areas: usize,
    n_times: usize,
    data: Vec<f64>,
}

impl StField {
    pub fn new(n_areas: usize, n_times: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_areas * n_times {
            return Err(Error::DimensionMismatch {
                context: "StField::new",
                expected: n_areas * n_times,
                got: data.len(),
            });
        }
        Ok(StField {
            n_areas,
            n_times,
            data,
        })
    }

    pub fn zeros(n_areas: usize, n_times: usize) -> Self {
        StField {
            n_areas,
            n_times,
            data: vec![0.0; n_areas * n_times],
        }
    }

    pub fn n_areas(&self) -> usize {
        self.n_areas
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn get(&self, area: usize, t: usize) -> f64 {
        self.data[t * self.n_areas + area]
    }

    pub fn set(&mut self, area: usize, t: usize, value: f64) {
        self.data[t * self.n_areas + area] = value;
    }

    /// All areas at time `t`.
    pub fn slice(&self, t: usize) -> &[f64] {
        &self.data[t * self.n_areas..(t + 1) * self.n_areas]
    }

    pub fn slice_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.n_areas..(t + 1) * self.n_areas]
    }

    /// Flat time-major data (`value(area, t) = data[t * n_areas + area]`).
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        });
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::NumericDomain(format!(
            "CAR alpha must lie in [0, 1), got {alpha}"
        )));
    }
    Ok(())
}

/// `x' Q(alpha) x` via the edge decomposition; `O(L + E)`, no matrix.
pub fn quad_form(graph: &AreaGraph, x: &[f64], alpha: f64) -> Result<f64> {
    check_len("quad_form", graph.n_areas(), x.len())?;
    check_alpha(alpha)?;
    let mut edge_quad = 0.0;
    for &(a, b) in graph.edges() {
        let d = x[a as usize] - x[b as usize];
        edge_quad += d * d;
    }
    let sum_sq: f64 = x.iter().map(|v| v * v).sum();
    Ok(alpha * edge_quad + (1.0 - alpha) * sum_sq)
}

/// `ln|Q(alpha)|` from the precomputed spectrum of `M = W + I - D`:
/// `sum_i ln(1 - alpha * lambda_i)`. Errors if any factor is non-positive
/// (cannot happen for `alpha` in `[0, 1)` in exact arithmetic, but guards
/// against rounding at the boundary).
pub fn log_det_q(spectrum: &EigenSpectrum, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let mut acc = 0.0;
    for &lambda in spectrum.eigenvalues() {
        let factor = 1.0 - alpha * lambda;
        if factor <= 0.0 {
            return Err(Error::NumericDomain(format!(
                "non-positive determinant factor 1 - alpha * lambda = {factor} \
                 (alpha = {alpha}, lambda = {lambda})"
            )));
        }
        acc += factor.ln();
    }
    Ok(acc)
}

/// Log-density of `x ~ N(0, sigma^2 Q(alpha)^{-1})`.
pub fn leroux_logpdf(
    graph: &AreaGraph,
    spectrum: &EigenSpectrum,
    x: &[f64],
    alpha: f64,
    sigma: f64,
) -> Result<f64> {
    let n = graph.n_areas();
    check_len("leroux_logpdf", n, x.len())?;
    check_len("leroux_logpdf spectrum", n, spectrum.len())?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::NumericDomain(format!(
            "sigma must be positive and finite, got {sigma}"
        )));
    }
    let quad = quad_form(graph, x, alpha)?;
    let ld = log_det_q(spectrum, alpha)?;
    let nf = n as f64;
    Ok(-0.5 * nf * LN_2PI - nf * sigma.ln() + 0.5 * ld - 0.5 * quad / (sigma * sigma))
}

/// Joint log-density of the space-time field under the CAR-AR model:
/// slice 1 ~ `N(0, sigma^2 Q^{-1})`, slice t ~ `N(rho * slice_{t-1},
/// sigma^2 Q^{-1})`. One `O(L + E)` pass per slice plus one spectrum sum.
pub fn car_ar_logpdf(
    graph: &AreaGraph,
    spectrum: &EigenSpectrum,
    field: &StField,
    params: &CarParams,
) -> Result<f64> {
    let n = graph.n_areas();
    check_len("car_ar_logpdf", n, field.n_areas())?;
    check_len("car_ar_logpdf spectrum", n, spectrum.len())?;
    params.validate()?;
    let t_len = field.n_times();
    if t_len == 0 {
        return Err(Error::DimensionMismatch {
            context: "car_ar_logpdf n_times",
            expected: 1,
            got: 0,
        });
    }
    let ld = log_det_q(spectrum, params.alpha)?;
    let nf = n as f64;
    let per_slice = -0.5 * nf * LN_2PI - nf * params.sigma.ln() + 0.5 * ld;
    let inv_2sig2 = 0.5 / (params.sigma * params.sigma);

    let mut total = 0.0;
    let mut innov = vec![0.0; n];
    for t in 0..t_len {
        let cur = field.slice(t);
        if t == 0 {
            innov.copy_from_slice(cur);
        } else {
            let prev = field.slice(t - 1);
            for i in 0..n {
                innov[i] = cur[i] - params.rho * prev[i];
            }
        }
        let quad = quad_form(graph, &innov, params.alpha)?;
        total += per_slice - quad * inv_2sig2;
    }
    Ok(total)
}

/// Map non-centered innovations to the centered field:
/// `field_1 = sigma * z_1`, `field_t = rho * field_{t-1} + sigma * z_t`.
pub fn noncentered(innov: &StField, params: &CarParams) -> StField {
    let n = innov.n_areas();
    let t_len = innov.n_times();
    let mut out = StField::zeros(n, t_len);
    for t in 0..t_len {
        for i in 0..n {
            let carried = if t == 0 {
                0.0
            } else {
                params.rho * out.get(i, t - 1)
            };
            out.set(i, t, carried + params.sigma * innov.get(i, t));
        }
    }
    out
}

/// Inverse of [`noncentered`]: recover the innovations from the field.
pub fn noncentered_inverse(field: &StField, params: &CarParams) -> Result<StField> {
    if !(params.sigma > 0.0 && params.sigma.is_finite()) {
        return Err(Error::NumericDomain(format!(
            "sigma must be positive and finite, got {}",
            params.sigma
        )));
    }
    let n = field.n_areas();
    let t_len = field.n_times();
    let mut out = StField::zeros(n, t_len);
    for t in 0..t_len {
        for i in 0..n {
            let carried = if t == 0 {
                0.0
            } else {
                params.rho * field.get(i, t - 1)
            };
            out.set(i, t, (field.get(i, t) - carried) / params.sigma);
        }
    }
    Ok(out)
}

/// Conditional mean of node `i` given the rest of the field under
/// `N(0, sigma^2 Q^{-1})`: `alpha * sum_{j~i} x_j / (alpha * N_i + 1 - alpha)`.
/// Useful as an interpretability check of the precision's row structure.
pub fn conditional_mean(graph: &AreaGraph, x: &[f64], alpha: f64, i: usize) -> Result<f64> {
    check_len("conditional_mean", graph.n_areas(), x.len())?;
    check_alpha(alpha)?;
    if i >= graph.n_areas() {
        return Err(Error::DimensionMismatch {
            context: "conditional_mean node index",
            expected: graph.n_areas(),
            got: i,
        });
    }
    let mut nbr_sum = 0.0;
    for &(a, b) in graph.edges() {
        if a as usize == i {
            nbr_sum += x[b as usize];
        } else if b as usize == i {
            nbr_sum += x[a as usize];
        }
    }
    let deg = graph.degree(i) as f64;
    Ok(alpha * nbr_sum / (alpha * deg + 1.0 - alpha))
}

/// Draw a CAR-AR field by dense Cholesky factorization of `Q` (done once)
/// followed by one triangular solve per time slice. Exact sampling; meant
/// for simulation studies, not for inner loops.
pub fn sample_car_field<R: rand::Rng>(
    graph: &AreaGraph,
    params: &CarParams,
    n_times: usize,
    rng: &mut R,
) -> Result<StField> {
    use rand_distr::{Distribution, StandardNormal};
    params.validate()?;
    if n_times == 0 {
        return Err(Error::DimensionMismatch {
            context: "sample_car_field n_times",
            expected: 1,
            got: 0,
        });
    }
    let n = graph.n_areas();
    let q = crate::dense::dense_precision(graph, params.alpha);
    let chol = nalgebra::Cholesky::new(q).ok_or_else(|| {
        Error::NumericDomain(format!(
            "Leroux precision is not positive definite at alpha = {}",
            params.alpha
        ))
    })?;
    // If Q = L L', then L^{-T} z has covariance Q^{-1} for z ~ N(0, I).
    let lt = chol.l().transpose();
    let mut out = StField::zeros(n, n_times);
    let mut z = nalgebra::DVector::<f64>::zeros(n);
    for t in 0..n_times {
        for i in 0..n {
            z[i] = StandardNormal.sample(rng);
        }
        let u = lt
            .solve_upper_triangular(&z)
            .ok_or_else(|| Error::NumericDomain("singular Cholesky factor".into()))?;
        for i in 0..n {
            let carried = if t == 0 {
                0.0
            } else {
                params.rho * out.get(i, t - 1)
            };
            out.set(i, t, carried + params.sigma * u[i]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn random_graph(n: usize, edge_prob: f64, seed: u64) -> AreaGraph {
        let mut rng = crate::rng::substream(seed, &[0xCA]);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random::<f64>() < edge_prob {
                    edges.push((i, j));
                }
            }
        }
        AreaGraph::new(n, &edges).unwrap()
    }

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = crate::rng::substream(seed, &[0xCB]);
        (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect()
    }

    fn random_field(n: usize, t: usize, seed: u64) -> StField {
        StField::new(n, t, random_vec(n * t, seed)).unwrap()
    }

    /// Test oracle for the joint CAR-AR density: assemble the full
    /// `LT x LT` precision of the stacked field,
    /// `P = (B'B kron Q) / sigma^2` with `B = I - rho * subdiagonal`,
    /// and evaluate the multivariate normal in precision form with a dense
    /// Cholesky. Independent of both the sparse path and the per-slice
    /// dense reference.
    fn car_ar_logpdf_block_oracle(graph: &AreaGraph, field: &StField, p: &CarParams) -> f64 {
        let n = graph.n_areas();
        let t_len = field.n_times();
        let dim = n * t_len;
        let q = dense::dense_precision(graph, p.alpha);
        // A = B'B: tridiagonal with 1 + rho^2 on the diagonal except the
        // last entry (1), and -rho off-diagonal.
        let mut a = nalgebra::DMatrix::<f64>::zeros(t_len, t_len);
        for t in 0..t_len {
            a[(t, t)] = if t + 1 < t_len {
                1.0 + p.rho * p.rho
            } else {
                1.0
            };
            if t + 1 < t_len {
                a[(t, t + 1)] = -p.rho;
                a[(t + 1, t)] = -p.rho;
            }
        }
        let mut prec = nalgebra::DMatrix::<f64>::zeros(dim, dim);
        for t1 in 0..t_len {
            for t2 in 0..t_len {
                if a[(t1, t2)] == 0.0 {
                    continue;
                }
                for i in 0..n {
                    for j in 0..n {
                        prec[(t1 * n + i, t2 * n + j)] =
                            a[(t1, t2)] * q[(i, j)] / (p.sigma * p.sigma);
                    }
                }
            }
        }
        let chol = nalgebra::Cholesky::new(prec.clone()).unwrap();
        let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let x = nalgebra::DVector::from_column_slice(field.data());
        let quad = x.dot(&(&prec * &x));
        -0.5 * dim as f64 * LN_2PI + 0.5 * log_det - 0.5 * quad
    }

    #[test]
    fn quad_form_two_node_hand_value() {
        // Single edge, x = (1, -1), alpha = 0.5:
        // 0.5 * (1 - (-1))^2 + 0.5 * (1 + 1) = 2 + 1 = 3.
        let g = AreaGraph::new(2, &[(0, 1)]).unwrap();
        let q = quad_form(&g, &[1.0, -1.0], 0.5).unwrap();
        assert_abs_diff_eq!(q, 3.0, epsilon = 1e-15);
    }

    #[test]
    fn quad_form_alpha_zero_is_sum_of_squares() {
        let g = AreaGraph::lattice(2, 3).unwrap();
        let x = random_vec(6, 1);
        let expect: f64 = x.iter().map(|v| v * v).sum();
        assert_abs_diff_eq!(quad_form(&g, &x, 0.0).unwrap(), expect, epsilon = 1e-14);
    }

    #[test]
    fn quad_form_matches_dense_matrix() {
        for seed in 0..6u64 {
            let n = 3 + (seed as usize * 7) % 20;
            let g = random_graph(n, 0.3, 10 + seed);
            let x = random_vec(n, 20 + seed);
            let alpha = [0.0, 0.17, 0.5, 0.93][seed as usize % 4];
            let q = dense::dense_precision(&g, alpha);
            let xv = nalgebra::DVector::from_column_slice(&x);
            let expect = xv.dot(&(&q * &xv));
            assert_abs_diff_eq!(
                quad_form(&g, &x, alpha).unwrap(),
                expect,
                epsilon = 1e-10 * (1.0 + expect.abs())
            );
        }
    }

    #[test]
    fn quad_form_is_positive_definite() {
        // x' Q x >= (1 - alpha) * |x|^2 > 0 for nonzero x.
        let g = random_graph(12, 0.3, 5);
        for seed in 0..5u64 {
            let x = random_vec(12, 40 + seed);
            let alpha = 0.95;
            let q = quad_form(&g, &x, alpha).unwrap();
            let floor = (1.0 - alpha) * x.iter().map(|v| v * v).sum::<f64>();
            assert!(q >= floor - 1e-12, "q = {q}, floor = {floor}");
        }
    }

    #[test]
    fn log_det_alpha_zero_is_zero() {
        let g = AreaGraph::lattice(3, 3).unwrap();
        let s = g.eigen_spectrum();
        assert_abs_diff_eq!(log_det_q(&s, 0.0).unwrap(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn log_det_matches_dense_cholesky() {
        for seed in 0..5u64 {
            let n = 4 + (seed as usize * 5) % 25;
            let g = random_graph(n, 0.25, 60 + seed);
            let s = g.eigen_spectrum();
            for alpha in [0.1, 0.5, 0.9, 0.99] {
                let sparse = log_det_q(&s, alpha).unwrap();
                let dense_ld = dense::log_det_q_dense(&g, alpha).unwrap();
                assert_abs_diff_eq!(sparse, dense_ld, epsilon = 1e-9 * (1.0 + dense_ld.abs()));
            }
        }
    }

    #[test]
    fn log_det_derivative_matches_finite_difference() {
        // d/dalpha ln|Q| = -sum_i lambda_i / (1 - alpha * lambda_i).
        let g = random_graph(14, 0.3, 77);
        let s = g.eigen_spectrum();
        let alpha = 0.63;
        let analytic: f64 = s
            .eigenvalues()
            .iter()
            .map(|&l| -l / (1.0 - alpha * l))
            .sum();
        let h = 1e-6;
        let fd =
            (log_det_q(&s, alpha + h).unwrap() - log_det_q(&s, alpha - h).unwrap()) / (2.0 * h);
        assert_abs_diff_eq!(analytic, fd, epsilon = 1e-5 * (1.0 + analytic.abs()));
    }

    #[test]
    fn log_det_rejects_boundary() {
        let g = AreaGraph::lattice(2, 2).unwrap();
        let s = g.eigen_spectrum();
        assert!(log_det_q(&s, 1.0).is_err());
        assert!(log_det_q(&s, -0.1).is_err());
    }

    #[test]
    fn leroux_matches_dense_covariance_route() {
        for seed in 0..6u64 {
            let n = 3 + (seed as usize * 9) % 30;
            let g = random_graph(n, 0.3, 90 + seed);
            let s = g.eigen_spectrum();
            let x = random_vec(n, 120 + seed);
            let alpha = [0.05, 0.3, 0.6, 0.85, 0.95, 0.99][seed as usize % 6];
            let sigma = 0.4 + 0.3 * seed as f64;
            let sparse = leroux_logpdf(&g, &s, &x, alpha, sigma).unwrap();
            let dense_lp = dense::leroux_logpdf_dense(&g, &x, alpha, sigma).unwrap();
            assert_abs_diff_eq!(sparse, dense_lp, epsilon = 1e-8 * (1.0 + dense_lp.abs()));
        }
    }

    #[test]
    fn leroux_sigma_scaling_identity() {
        // lpdf(x; sigma) = lpdf(x / sigma; 1) - L * ln(sigma).
        let g = random_graph(8, 0.4, 33);
        let s = g.eigen_spectrum();
        let x = random_vec(8, 34);
        let sigma = 1.7;
        let scaled: Vec<f64> = x.iter().map(|v| v / sigma).collect();
        let lhs = leroux_logpdf(&g, &s, &x, 0.55, sigma).unwrap();
        let rhs =
            leroux_logpdf(&g, &s, &scaled, 0.55, 1.0).unwrap() - 8.0 * sigma.ln();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
    }

    #[test]
    fn leroux_at_zero_is_normalizer() {
        let g = AreaGraph::lattice(2, 2).unwrap();
        let s = g.eigen_spectrum();
        let sigma = 0.8;
        let lp = leroux_logpdf(&g, &s, &[0.0; 4], 0.4, sigma).unwrap();
        let expect = -2.0 * LN_2PI - 4.0 * sigma.ln() + 0.5 * log_det_q(&s, 0.4).unwrap();
        assert_abs_diff_eq!(lp, expect, epsilon = 1e-12);
    }

    #[test]
    fn leroux_rejects_bad_arguments() {
        let g = AreaGraph::lattice(2, 2).unwrap();
        let s = g.eigen_spectrum();
        assert!(leroux_logpdf(&g, &s, &[0.0; 3], 0.4, 1.0).is_err());
        assert!(leroux_logpdf(&g, &s, &[0.0; 4], 1.0, 1.0).is_err());
        assert!(leroux_logpdf(&g, &s, &[0.0; 4], 0.4, 0.0).is_err());
        assert!(leroux_logpdf(&g, &s, &[0.0; 4], 0.4, f64::NAN).is_err());
    }

    #[test]
    fn car_ar_single_slice_reduces_to_leroux() {
        let g = random_graph(7, 0.4, 55);
        let s = g.eigen_spectrum();
        let x = random_vec(7, 56);
        let field = StField::new(7, 1, x.clone()).unwrap();
        let p = CarParams::new(0.6, 0.9, 1.3).unwrap();
        let joint = car_ar_logpdf(&g, &s, &field, &p).unwrap();
        let single = leroux_logpdf(&g, &s, &x, 0.6, 1.3).unwrap();
        assert_abs_diff_eq!(joint, single, epsilon = 1e-12);
    }

    #[test]
    fn car_ar_rho_zero_is_independent_slices() {
        let g = random_graph(6, 0.4, 65);
        let s = g.eigen_spectrum();
        let field = random_field(6, 4, 66);
        let p = CarParams::new(0.45, 0.0, 0.9).unwrap();
        let joint = car_ar_logpdf(&g, &s, &field, &p).unwrap();
        let mut sum = 0.0;
        for t in 0..4 {
            sum += leroux_logpdf(&g, &s, field.slice(t), 0.45, 0.9).unwrap();
        }
        assert_abs_diff_eq!(joint, sum, epsilon = 1e-11);
    }

    #[test]
    fn car_ar_matches_block_precision_oracle() {
        for (seed, (n, t)) in [(5usize, 3usize), (7, 4), (4, 6)].iter().enumerate() {
            let g = random_graph(*n, 0.45, 200 + seed as u64);
            let s = g.eigen_spectrum();
            let field = random_field(*n, *t, 210 + seed as u64);
            let p = CarParams::new(0.7, 0.55, 0.8).unwrap();
            let sparse = car_ar_logpdf(&g, &s, &field, &p).unwrap();
            let oracle = car_ar_logpdf_block_oracle(&g, &field, &p);
            assert_abs_diff_eq!(sparse, oracle, epsilon = 1e-8 * (1.0 + oracle.abs()));
        }
    }

    #[test]
    fn car_ar_matches_per_slice_dense_reference() {
        let g = random_graph(9, 0.35, 300);
        let s = g.eigen_spectrum();
        let field = random_field(9, 5, 301);
        let p = CarParams::new(0.82, 0.4, 1.1).unwrap();
        let sparse = car_ar_logpdf(&g, &s, &field, &p).unwrap();
        let dense_lp = dense::car_ar_logpdf_dense(&g, &field, &p).unwrap();
        assert_abs_diff_eq!(sparse, dense_lp, epsilon = 1e-9 * (1.0 + dense_lp.abs()));
    }

    #[test]
    fn noncentered_round_trip() {
        let p = CarParams::new(0.3, 0.77, 0.45).unwrap();
        let innov = random_field(8, 5, 400);
        let field = noncentered(&innov, &p);
        let back = noncentered_inverse(&field, &p).unwrap();
        for (a, b) in innov.data().iter().zip(back.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn noncentered_change_of_variables_identity() {
        // If field = noncentered(z) then the centered density of the field
        // plus the log-Jacobian L * T * ln(sigma) equals the density of the
        // innovations as independent unit-scale Leroux slices.
        let g = random_graph(5, 0.5, 500);
        let s = g.eigen_spectrum();
        let p = CarParams::new(0.66, 0.8, 0.7).unwrap();
        let innov = random_field(5, 3, 501);
        let field = noncentered(&innov, &p);
        let centered = car_ar_logpdf(&g, &s, &field, &p).unwrap();
        let mut unit = 0.0;
        for t in 0..3 {
            unit += leroux_logpdf(&g, &s, innov.slice(t), p.alpha, 1.0).unwrap();
        }
        let lt = 15.0;
        assert_abs_diff_eq!(centered + lt * p.sigma.ln(), unit, epsilon = 1e-8);
    }

    #[test]
    fn conditional_mean_matches_precision_row() {
        let g = random_graph(10, 0.35, 600);
        let x = random_vec(10, 601);
        let alpha = 0.72;
        let q = dense::dense_precision(&g, alpha);
        for i in 0..10 {
            let mut expect = 0.0;
            for j in 0..10 {
                if j != i {
                    expect -= q[(i, j)] * x[j];
                }
            }
            expect /= q[(i, i)];
            let got = conditional_mean(&g, &x, alpha, i).unwrap();
            assert_abs_diff_eq!(got, expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn conditional_mean_isolated_node_is_zero() {
        let g = AreaGraph::new(3, &[(0, 1)]).unwrap();
        let got = conditional_mean(&g, &[5.0, -2.0, 9.0], 0.8, 2).unwrap();
        assert_abs_diff_eq!(got, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn sample_car_field_moments() {
        // Empirical covariance of slice 1 should approach sigma^2 Q^{-1};
        // the lag-1 cross-covariance picks up the factor rho.
        let g = AreaGraph::new(4, &[(0, 1), (1, 2), (2, 3)]).unwrap();
        let p = CarParams::new(0.6, 0.7, 1.3).unwrap();
        let mut rng = crate::rng::substream(7, &[crate::rng::tag::FIELD]);
        let n_draws = 50_000;
        let mut sum1 = vec![0.0; 4];
        let mut cov11 = vec![0.0; 16];
        let mut cov12 = vec![0.0; 16];
        for _ in 0..n_draws {
            let f = sample_car_field(&g, &p, 2, &mut rng).unwrap();
            let s1 = f.slice(0).to_vec();
            let s2 = f.slice(1).to_vec();
            for i in 0..4 {
                sum1[i] += s1[i];
                for j in 0..4 {
                    cov11[i * 4 + j] += s1[i] * s1[j];
                    cov12[i * 4 + j] += s1[i] * s2[j];
                }
            }
        }
        let q = dense::dense_precision(&g, p.alpha);
        let qinv = q.try_inverse().unwrap();
        let s2 = p.sigma * p.sigma;
        for i in 0..4 {
            assert_abs_diff_eq!(sum1[i] / n_draws as f64, 0.0, epsilon = 0.05);
            for j in 0..4 {
                let emp11 = cov11[i * 4 + j] / n_draws as f64;
                let emp12 = cov12[i * 4 + j] / n_draws as f64;
                assert_abs_diff_eq!(emp11, s2 * qinv[(i, j)], epsilon = 0.05);
                // cov(x1, x2) = rho * cov(x1, x1)
                assert_abs_diff_eq!(emp12, p.rho * s2 * qinv[(i, j)], epsilon = 0.05);
            }
        }
    }

    #[test]
    fn sample_car_field_deterministic() {
        let g = AreaGraph::lattice(2, 3).unwrap();
        let p = CarParams::new(0.5, 0.5, 1.0).unwrap();
        let mut r1 = crate::rng::substream(9, &[1]);
        let mut r2 = crate::rng::substream(9, &[1]);
        let f1 = sample_car_field(&g, &p, 3, &mut r1).unwrap();
        let f2 = sample_car_field(&g, &p, 3, &mut r2).unwrap();
        assert_eq!(f1, f2);
    }
}
