//! Unconstrained parameterization.
//!
//! The sampler works on a flat vector `z` in `R^dim`; this module owns the
//! bijection between `z` and the constrained [`ParameterSet`], the
//! log-Jacobian of that bijection, and naming/ordering of the constrained
//! representation written to draw files and summaries.
//!
//! Block layout of `z` (blocks absent when the variant disables them):
//!
//! ```text
//! [ beta | eta | weights (tau-1, stick-breaking) |
//!   growth alpha,rho,sigma (logit,logit,log) | baseline alpha,rho,sigma |
//!   growth innovations (L*T, identity) | baseline innovations (L*T) ]
//! ```
//!
//! Random-effect innovations enter non-centered: the sampled values are the
//! i.i.d.-slice innovations `z*`, and the centered field is rebuilt as
//! `phi_1 = sigma * z*_1`, `phi_t = rho * phi_{t-1} + sigma * z*_t`. At
//! `z = 0` the transform gives `beta = eta = 0`, uniform weights,
//! `alpha = rho = 1/2`, `sigma = 1`, zero fields.

use super::{ModelConfig, ParameterSet};
use crate::car::{CarParams, StField};
use crate::error::{Error, Result};

/// Numerically stable `1 / (1 + exp(-x))`.
#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `ln(1 + exp(x))` without overflow.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln d/dx sigmoid(x) = ln(sigmoid(x) * (1 - sigmoid(x)))`, computed in a
/// form that stays finite for large `|x|`.
#[inline]
pub(crate) fn logit_log_jacobian(x: f64) -> f64 {
    -softplus(x) - softplus(-x)
}

/// Stick-breaking map from `y` in `R^{K-1}` onto the interior of the
/// K-simplex, with intermediate quantities saved for the gradient pass.
/// Returns the log-Jacobian. `sb` and `stick` must have length `K - 1`.
pub(crate) fn stick_break(y: &[f64], weights: &mut [f64], sb: &mut [f64], stick: &mut [f64]) -> f64 {
    let k_total = weights.len();
    debug_assert_eq!(y.len() + 1, k_total);
    let mut remaining = 1.0;
    let mut log_jac = 0.0;
    for k in 0..k_total - 1 {
        let s = sigmoid(y[k] - ((k_total - 1 - k) as f64).ln());
        sb[k] = s;
        stick[k] = remaining;
        weights[k] = remaining * s;
        log_jac += remaining.ln() + s.ln() + (1.0 - s).ln();
        remaining *= 1.0 - s;
    }
    weights[k_total - 1] = remaining;
    log_jac
}

/// Inverse of [`stick_break`].
pub(crate) fn stick_break_inverse(weights: &[f64]) -> Result<Vec<f64>> {
    let k_total = weights.len();
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-8 || weights.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::NumericDomain(format!(
            "weights must be strictly positive and sum to 1, got {weights:?}"
        )));
    }
    let mut y = Vec::with_capacity(k_total - 1);
    let mut remaining = 1.0;
    for k in 0..k_total - 1 {
        let s = weights[k] / remaining;
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::NumericDomain(format!(
                "weights are not an interior simplex point: {weights:?}"
            )));
        }
        y.push(logit(s) + ((k_total - 1 - k) as f64).ln());
        remaining -= weights[k];
    }
    Ok(y)
}

/// Reverse-mode pass through [`stick_break`]: converts a gradient w.r.t.
/// the `K` weights into a gradient w.r.t. the `K - 1` unconstrained
/// coordinates, optionally adding the log-Jacobian's own gradient.
pub(crate) fn stick_break_grad(
    g_weights: &[f64],
    sb: &[f64],
    stick: &[f64],
    g_y: &mut [f64],
    include_jacobian: bool,
) {
    let k_total = g_weights.len();
    let mut bar_stick = g_weights[k_total - 1];
    for k in (0..k_total - 1).rev() {
        let mut g_sb = g_weights[k] * stick[k] - bar_stick * stick[k];
        let mut g_stick = g_weights[k] * sb[k] + bar_stick * (1.0 - sb[k]);
        if include_jacobian {
            g_sb += 1.0 / sb[k] - 1.0 / (1.0 - sb[k]);
            g_stick += 1.0 / stick[k];
        }
        g_y[k] = g_sb * sb[k] * (1.0 - sb[k]);
        bar_stick = g_stick;
    }
}

/// Offsets and sizes of the parameter blocks for one model shape, plus the
/// constrained-space naming used by draw files and summaries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    n_areas: usize,
    n_times: usize,
    n_beta: usize,
    n_eta: usize,
    tau: usize,
    has_growth: bool,
    has_baseline: bool,
    // Unconstrained offsets.
    beta_off: usize,
    eta_off: usize,
    w_off: usize,
    growth_par_off: usize,
    baseline_par_off: usize,
    growth_innov_off: usize,
    baseline_innov_off: usize,
    dim: usize,
}

impl Layout {
    pub fn new(
        config: &ModelConfig,
        n_areas: usize,
        n_times: usize,
        n_growth_cols: usize,
        n_baseline_cols: usize,
    ) -> Layout {
        let has_cov = config.variant.has_covariates();
        let n_beta = if has_cov { n_growth_cols } else { 0 };
        let n_eta = if has_cov { n_baseline_cols } else { 0 };
        let tau = config.tau;
        let has_growth = config.variant.has_growth_field();
        let has_baseline = config.variant.has_baseline_field();
        let field = n_areas * n_times;

        let beta_off = 0;
        let eta_off = beta_off + n_beta;
        let w_off = eta_off + n_eta;
        let growth_par_off = w_off + (tau - 1);
        let baseline_par_off = growth_par_off + if has_growth { 3 } else { 0 };
        let growth_innov_off = baseline_par_off + if has_baseline { 3 } else { 0 };
        let baseline_innov_off = growth_innov_off + if has_growth { field } else { 0 };
        let dim = baseline_innov_off + if has_baseline { field } else { 0 };

        Layout {
            n_areas,
            n_times,
            n_beta,
            n_eta,
            tau,
            has_growth,
            has_baseline,
            beta_off,
            eta_off,
            w_off,
            growth_par_off,
            baseline_par_off,
            growth_innov_off,
            baseline_innov_off,
            dim,
        }
    }

    /// Unconstrained dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_beta(&self) -> usize {
        self.n_beta
    }

    pub fn n_eta(&self) -> usize {
        self.n_eta
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn has_growth(&self) -> bool {
        self.has_growth
    }

    pub fn has_baseline(&self) -> bool {
        self.has_baseline
    }

    pub fn n_areas(&self) -> usize {
        self.n_areas
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub(crate) fn beta_range(&self) -> std::ops::Range<usize> {
        self.beta_off..self.beta_off + self.n_beta
    }

    pub(crate) fn eta_range(&self) -> std::ops::Range<usize> {
        self.eta_off..self.eta_off + self.n_eta
    }

    pub(crate) fn w_range(&self) -> std::ops::Range<usize> {
        self.w_off..self.w_off + (self.tau - 1)
    }

    /// Unconstrained (alpha, rho, sigma) indices of a field's parameters.
    pub(crate) fn growth_par(&self) -> usize {
        self.growth_par_off
    }

    pub(crate) fn baseline_par(&self) -> usize {
        self.baseline_par_off
    }

    pub(crate) fn growth_innov_range(&self) -> std::ops::Range<usize> {
        let n = if self.has_growth {
            self.n_areas * self.n_times
        } else {
            0
        };
        self.growth_innov_off..self.growth_innov_off + n
    }

    pub(crate) fn baseline_innov_range(&self) -> std::ops::Range<usize> {
        let n = if self.has_baseline {
            self.n_areas * self.n_times
        } else {
            0
        };
        self.baseline_innov_off..self.baseline_innov_off + n
    }

    /// Number of scalar (non-field) entries at the head of the constrained
    /// representation: beta, eta, weights, and the CAR parameters.
    pub fn n_scalar(&self) -> usize {
        self.n_beta
            + self.n_eta
            + self.tau
            + if self.has_growth { 3 } else { 0 }
            + if self.has_baseline { 3 } else { 0 }
    }

    /// Length of the constrained representation (scalars plus fields).
    pub fn constrained_dim(&self) -> usize {
        let field = self.n_areas * self.n_times;
        self.n_scalar()
            + if self.has_growth { field } else { 0 }
            + if self.has_baseline { field } else { 0 }
    }

    /// Names of the constrained entries, in representation order.
    pub fn constrained_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.constrained_dim());
        for j in 0..self.n_beta {
            names.push(format!("beta[{j}]"));
        }
        for j in 0..self.n_eta {
            names.push(format!("eta[{j}]"));
        }
        for i in 1..=self.tau {
            names.push(format!("w[{i}]"));
        }
        if self.has_growth {
            names.push("alpha_growth".into());
            names.push("rho_growth".into());
            names.push("sigma_growth".into());
        }
        if self.has_baseline {
            names.push("alpha_baseline".into());
            names.push("rho_baseline".into());
            names.push("sigma_baseline".into());
        }
        if self.has_growth {
            for t in 0..self.n_times {
                for a in 0..self.n_areas {
                    names.push(format!("growth_innov[{a},{t}]"));
                }
            }
        }
        if self.has_baseline {
            for t in 0..self.n_times {
                for a in 0..self.n_areas {
                    names.push(format!("baseline_innov[{a},{t}]"));
                }
            }
        }
        names
    }

    fn check_dim(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "Layout z",
                expected: self.dim,
                got: z.len(),
            });
        }
        Ok(())
    }

    fn car_from_unconstrained(&self, z: &[f64], off: usize) -> Result<CarParams> {
        let alpha = sigmoid(z[off]);
        let rho = sigmoid(z[off + 1]);
        let sigma = z[off + 2].exp();
        CarParams::new(alpha, rho, sigma)
    }

    /// Map unconstrained `z` to constrained parameters; returns the
    /// parameters and the log-Jacobian of the map. Errors if a transformed
    /// value leaves its domain (saturated logit, overflowed exp).
    pub fn transform(&self, z: &[f64]) -> Result<(ParameterSet, f64)> {
        self.check_dim(z)?;
        let mut log_jac = 0.0;

        let beta = z[self.beta_range()].to_vec();
        let eta = z[self.eta_range()].to_vec();

        let mut weights = vec![0.0; self.tau];
        if self.tau >= 2 {
            let mut sb = vec![0.0; self.tau - 1];
            let mut stick = vec![0.0; self.tau - 1];
            log_jac += stick_break(&z[self.w_range()], &mut weights, &mut sb, &mut stick);
            if !log_jac.is_finite() {
                return Err(Error::NumericDomain(
                    "stick-breaking transform saturated".into(),
                ));
            }
        } else {
            weights[0] = 1.0;
        }

        let mut growth_car = None;
        let mut baseline_car = None;
        if self.has_growth {
            let off = self.growth_par();
            growth_car = Some(self.car_from_unconstrained(z, off)?);
            log_jac += logit_log_jacobian(z[off]) + logit_log_jacobian(z[off + 1]) + z[off + 2];
        }
        if self.has_baseline {
            let off = self.baseline_par();
            baseline_car = Some(self.car_from_unconstrained(z, off)?);
            log_jac += logit_log_jacobian(z[off]) + logit_log_jacobian(z[off + 1]) + z[off + 2];
        }

        let growth_innov = if self.has_growth {
            Some(StField::new(
                self.n_areas,
                self.n_times,
                z[self.growth_innov_range()].to_vec(),
            )?)
        } else {
            None
        };
        let baseline_innov = if self.has_baseline {
            Some(StField::new(
                self.n_areas,
                self.n_times,
                z[self.baseline_innov_range()].to_vec(),
            )?)
        } else {
            None
        };

        Ok((
            ParameterSet {
                beta,
                eta,
                weights,
                growth_car,
                baseline_car,
                growth_innov,
                baseline_innov,
            },
            log_jac,
        ))
    }

    /// Inverse of [`transform`](Self::transform) (drops the Jacobian).
    pub fn untransform(&self, p: &ParameterSet) -> Result<Vec<f64>> {
        let mut z = vec![0.0; self.dim];
        if p.beta.len() != self.n_beta {
            return Err(Error::DimensionMismatch {
                context: "untransform beta",
                expected: self.n_beta,
                got: p.beta.len(),
            });
        }
        if p.eta.len() != self.n_eta {
            return Err(Error::DimensionMismatch {
                context: "untransform eta",
                expected: self.n_eta,
                got: p.eta.len(),
            });
        }
        if p.weights.len() != self.tau {
            return Err(Error::DimensionMismatch {
                context: "untransform weights",
                expected: self.tau,
                got: p.weights.len(),
            });
        }
        z[self.beta_range()].copy_from_slice(&p.beta);
        z[self.eta_range()].copy_from_slice(&p.eta);
        if self.tau >= 2 {
            let y = stick_break_inverse(&p.weights)?;
            z[self.w_range()].copy_from_slice(&y);
        }
        let mut put_car = |off: usize, car: &CarParams| -> Result<()> {
            car.validate()?;
            z[off] = logit(car.alpha);
            z[off + 1] = logit(car.rho);
            z[off + 2] = car.sigma.ln();
            Ok(())
        };
        if self.has_growth {
            let car = p.growth_car.as_ref().ok_or_else(|| {
                Error::Validation("missing growth CAR parameters".into())
            })?;
            put_car(self.growth_par(), car)?;
        }
        if self.has_baseline {
            let car = p.baseline_car.as_ref().ok_or_else(|| {
                Error::Validation("missing baseline CAR parameters".into())
            })?;
            put_car(self.baseline_par(), car)?;
        }
        if self.has_growth {
            let f = p.growth_innov.as_ref().ok_or_else(|| {
                Error::Validation("missing growth innovations".into())
            })?;
            let r = self.growth_innov_range();
            if f.data().len() != r.len() {
                return Err(Error::DimensionMismatch {
                    context: "untransform growth innovations",
                    expected: r.len(),
                    got: f.data().len(),
                });
            }
            z[r].copy_from_slice(f.data());
        }
        if self.has_baseline {
            let f = p.baseline_innov.as_ref().ok_or_else(|| {
                Error::Validation("missing baseline innovations".into())
            })?;
            let r = self.baseline_innov_range();
            if f.data().len() != r.len() {
                return Err(Error::DimensionMismatch {
                    context: "untransform baseline innovations",
                    expected: r.len(),
                    got: f.data().len(),
                });
            }
            z[r].copy_from_slice(f.data());
        }
        Ok(z)
    }

    /// Flatten one unconstrained draw into the constrained representation
    /// (the row format of draw files), ordered like
    /// [`constrained_names`](Self::constrained_names).
    pub fn constrain_row(&self, z: &[f64]) -> Result<Vec<f64>> {
        let (p, _) = self.transform(z)?;
        let mut row = Vec::with_capacity(self.constrained_dim());
        row.extend_from_slice(&p.beta);
        row.extend_from_slice(&p.eta);
        row.extend_from_slice(&p.weights);
        for car in [&p.growth_car, &p.baseline_car].into_iter().flatten() {
            row.push(car.alpha);
            row.push(car.rho);
            row.push(car.sigma);
        }
        for f in [&p.growth_innov, &p.baseline_innov].into_iter().flatten() {
            row.extend_from_slice(f.data());
        }
        Ok(row)
    }

    /// Rebuild a [`ParameterSet`] from a constrained row.
    pub fn params_from_constrained(&self, row: &[f64]) -> Result<ParameterSet> {
        if row.len() != self.constrained_dim() {
            return Err(Error::DimensionMismatch {
                context: "params_from_constrained",
                expected: self.constrained_dim(),
                got: row.len(),
            });
        }
        let mut pos = 0;
        let mut take = |n: usize| {
            let s = &row[pos..pos + n];
            pos += n;
            s
        };
        let beta = take(self.n_beta).to_vec();
        let eta = take(self.n_eta).to_vec();
        let weights = take(self.tau).to_vec();
        let growth_car = if self.has_growth {
            let s = take(3);
            Some(CarParams::new(s[0], s[1], s[2])?)
        } else {
            None
        };
        let baseline_car = if self.has_baseline {
            let s = take(3);
            Some(CarParams::new(s[0], s[1], s[2])?)
        } else {
            None
        };
        let field = self.n_areas * self.n_times;
        let growth_innov = if self.has_growth {
            Some(StField::new(self.n_areas, self.n_times, take(field).to_vec())?)
        } else {
            None
        };
        let baseline_innov = if self.has_baseline {
            Some(StField::new(self.n_areas, self.n_times, take(field).to_vec())?)
        } else {
            None
        };
        Ok(ParameterSet {
            beta,
            eta,
            weights,
            growth_car,
            baseline_car,
            growth_innov,
            baseline_innov,
        })
    }
}
