//! Joint log-posterior density on the unconstrained scale, with an exact
//! analytic gradient.
//!
//! [`Posterior::logp_grad`] evaluates, for a flat unconstrained vector `z`
//! (see [`Layout`](super::Layout)):
//!
//! * the Poisson log-likelihood over in-sample cells,
//! * the CAR-AR prior on each active random-effect field, evaluated on the
//!   non-centered innovations (per time slice, a zero-mean CAR density with
//!   unit scale — the autoregression and scale enter through the
//!   reconstruction of the centered field),
//! * a soft sum-to-zero constraint on each centered field,
//! * the fixed-effect, lag-weight, and scale priors,
//! * the log-Jacobians of the constraining transforms.
//!
//! Everything is accumulated in one pass with reverse-mode bookkeeping done
//! by hand; there is no autodiff and no per-call allocation. A non-finite
//! density (overflowed intensity, zero intensity under a positive count,
//! saturated transform) yields `-inf` with a zeroed gradient so the sampler
//! treats the point as a rejection rather than panicking.

use super::transform::{logit_log_jacobian, sigmoid, stick_break, stick_break_grad};
use super::ModelData;

const LN_2PI: f64 = 1.8378770664093453;

/// Reusable evaluator for one model/data bundle.
///
/// Holds scratch buffers sized to the model; evaluation methods take
/// `&mut self` but are deterministic functions of `z`.
pub struct Posterior<'a> {
    data: &'a ModelData,
    // Centered fields and their likelihood gradients (L*T or empty).
    phi_growth: Vec<f64>,
    phi_baseline: Vec<f64>,
    g_phi_growth: Vec<f64>,
    g_phi_baseline: Vec<f64>,
    // Regression-block accumulators.
    g_beta: Vec<f64>,
    g_eta: Vec<f64>,
    // Lag-weight work space.
    weights: Vec<f64>,
    sb: Vec<f64>,
    stick: Vec<f64>,
    g_weights: Vec<f64>,
    g_stick_y: Vec<f64>,
    // Per-area scratch.
    dwx: Vec<f64>,
    bar: Vec<f64>,
    // Gradient sink for plain density evaluations.
    scratch_grad: Vec<f64>,
}

impl<'a> Posterior<'a> {
    pub fn new(data: &'a ModelData) -> Self {
        let layout = data.layout();
        let l = layout.n_areas();
        let field = l * layout.n_times();
        let tau = layout.tau();
        let grow = if layout.has_growth() { field } else { 0 };
        let base = if layout.has_baseline() { field } else { 0 };
        Posterior {
            data,
            phi_growth: vec![0.0; grow],
            phi_baseline: vec![0.0; base],
            g_phi_growth: vec![0.0; grow],
            g_phi_baseline: vec![0.0; base],
            g_beta: vec![0.0; layout.n_beta()],
            g_eta: vec![0.0; layout.n_eta()],
            weights: vec![0.0; tau],
            sb: vec![0.0; tau - 1],
            stick: vec![0.0; tau - 1],
            g_weights: vec![0.0; tau],
            g_stick_y: vec![0.0; tau - 1],
            dwx: vec![0.0; l],
            bar: vec![0.0; l],
            scratch_grad: vec![0.0; layout.dim()],
        }
    }

    pub fn data(&self) -> &ModelData {
        self.data
    }

    /// Unconstrained dimension.
    pub fn dim(&self) -> usize {
        self.data.layout().dim()
    }

    /// Log-density only.
    pub fn logp(&mut self, z: &[f64]) -> f64 {
        let mut g = std::mem::take(&mut self.scratch_grad);
        let lp = self.logp_grad(z, &mut g);
        self.scratch_grad = g;
        lp
    }

    /// Log-density and its gradient. `grad` must have length
    /// [`dim`](Self::dim); it is fully overwritten. Returns `-inf` with a
    /// zeroed gradient whenever the density is not finite at `z`.
    pub fn logp_grad(&mut self, z: &[f64], grad: &mut [f64]) -> f64 {
        assert_eq!(z.len(), self.dim(), "z has the wrong dimension");
        assert_eq!(grad.len(), self.dim(), "grad has the wrong dimension");
        let lp = self.eval(z, grad);
        if lp.is_finite() && grad.iter().all(|g| g.is_finite()) {
            lp
        } else {
            grad.fill(0.0);
            f64::NEG_INFINITY
        }
    }

    fn eval(&mut self, z: &[f64], grad: &mut [f64]) -> f64 {
        grad.fill(0.0);
        let data = self.data;
        let layout = data.layout();
        let config = data.config();
        let priors = &config.priors;
        let l = layout.n_areas();
        let t_len = layout.n_times();
        let tau = layout.tau();
        let n_cells = l * t_len;
        let mut lp = 0.0;

        // --- Decode scalar blocks ----------------------------------------
        let beta = &z[layout.beta_range()];
        let eta = &z[layout.eta_range()];
        let nb = beta.len();
        let ne = eta.len();

        if tau >= 2 {
            lp += stick_break(
                &z[layout.w_range()],
                &mut self.weights,
                &mut self.sb,
                &mut self.stick,
            );
            if !lp.is_finite() {
                return f64::NEG_INFINITY;
            }
        } else {
            self.weights[0] = 1.0;
        }
        // Flat Dirichlet over the simplex: log Gamma(tau).
        lp += (1..tau).map(|k| (k as f64).ln()).sum::<f64>();

        let mut growth_pars = None;
        let mut baseline_pars = None;
        for (active, off, scale, slot) in [
            (
                layout.has_growth(),
                layout.growth_par(),
                priors.sigma_growth_scale,
                &mut growth_pars,
            ),
            (
                layout.has_baseline(),
                layout.baseline_par(),
                priors.sigma_baseline_scale,
                &mut baseline_pars,
            ),
        ] {
            if !active {
                continue;
            }
            let alpha = sigmoid(z[off]);
            let rho = sigmoid(z[off + 1]);
            let sigma = z[off + 2].exp();
            if !(alpha > 0.0 && alpha < 1.0 && rho > 0.0 && rho < 1.0) {
                return f64::NEG_INFINITY;
            }
            if !(sigma > 0.0 && sigma.is_finite()) {
                return f64::NEG_INFINITY;
            }
            // Transform Jacobians; the uniform (0,1) priors add nothing.
            lp += logit_log_jacobian(z[off]) + logit_log_jacobian(z[off + 1]) + z[off + 2];
            // Half-normal prior on sigma.
            lp += 0.5 * (2.0 / std::f64::consts::PI).ln() - scale.ln()
                - sigma * sigma / (2.0 * scale * scale);
            *slot = Some((off, alpha, rho, sigma, scale));
        }

        // --- Fixed-effect priors -----------------------------------------
        for (j, &b) in beta.iter().enumerate() {
            let (m, s) = if j == 0 {
                (priors.beta0_mean, priors.beta0_scale)
            } else {
                (0.0, priors.beta_scale)
            };
            lp += -0.5 * LN_2PI - s.ln() - (b - m) * (b - m) / (2.0 * s * s);
            grad[layout.beta_range().start + j] -= (b - m) / (s * s);
        }
        for (j, &e) in eta.iter().enumerate() {
            let s = priors.eta_scale;
            lp += -0.5 * LN_2PI - s.ln() - e * e / (2.0 * s * s);
            grad[layout.eta_range().start + j] -= e / (s * s);
        }

        // --- Reconstruct centered fields -----------------------------------
        if let Some((_, _, rho, sigma, _)) = growth_pars {
            reconstruct(&z[layout.growth_innov_range()], l, rho, sigma, &mut self.phi_growth);
            self.g_phi_growth.fill(0.0);
        }
        if let Some((_, _, rho, sigma, _)) = baseline_pars {
            reconstruct(
                &z[layout.baseline_innov_range()],
                l,
                rho,
                sigma,
                &mut self.phi_baseline,
            );
            self.g_phi_baseline.fill(0.0);
        }

        // --- Poisson likelihood over in-sample cells -----------------------
        let designs = data.designs();
        let offset = data.panel().offset();
        let depletion = data.depletion_all();
        let lags = data.lags();
        let ln_fact = data.ln_fact();
        let counts = data.counts_f();
        let has_growth = growth_pars.is_some();
        let has_baseline = baseline_pars.is_some();
        self.g_weights.fill(0.0);
        self.g_beta.fill(0.0);
        self.g_eta.fill(0.0);

        for &cell_u in data.in_cells() {
            let cell = cell_u as usize;
            let area = cell % l;

            let mut xb = 0.0;
            if nb > 0 {
                let row = designs.growth_row(cell);
                for j in 0..nb {
                    xb += row[j] * beta[j];
                }
            }
            if has_growth {
                xb += self.phi_growth[cell];
            }
            let growth = xb.exp();

            let mut vb = 0.0;
            if ne > 0 {
                let row = designs.baseline_row(cell);
                for j in 0..ne {
                    vb += row[j] * eta[j];
                }
            }
            if has_baseline {
                vb += self.phi_baseline[cell];
            }
            let baseline = offset[area] * vb.exp();

            let mut wlag = 0.0;
            for i in 0..tau {
                wlag += self.weights[i] * lags[cell * tau + i];
            }
            let epidemic = wlag * growth;
            let pre = epidemic + baseline;
            let dep = depletion[cell];
            let lambda = pre * dep;
            let y = counts[cell];

            let g_pre;
            if y > 0.0 {
                if !(lambda > 0.0 && lambda.is_finite()) {
                    return f64::NEG_INFINITY;
                }
                lp += y * lambda.ln() - lambda - ln_fact[cell];
                g_pre = y / pre - dep;
            } else {
                if !lambda.is_finite() {
                    return f64::NEG_INFINITY;
                }
                lp += -lambda;
                g_pre = -dep;
            }

            let g_epi = g_pre * epidemic;
            if nb > 0 {
                let row = designs.growth_row(cell);
                for j in 0..nb {
                    self.g_beta[j] += g_epi * row[j];
                }
            }
            if has_growth {
                self.g_phi_growth[cell] += g_epi;
            }
            let g_base = g_pre * baseline;
            if ne > 0 {
                let row = designs.baseline_row(cell);
                for j in 0..ne {
                    self.g_eta[j] += g_base * row[j];
                }
            }
            if has_baseline {
                self.g_phi_baseline[cell] += g_base;
            }
            let g_growth = g_pre * growth;
            for i in 0..tau {
                self.g_weights[i] += g_growth * lags[cell * tau + i];
            }
        }

        for (j, &g) in self.g_beta.iter().enumerate() {
            grad[layout.beta_range().start + j] += g;
        }
        for (j, &g) in self.g_eta.iter().enumerate() {
            grad[layout.eta_range().start + j] += g;
        }

        // --- Lag-weight gradient through stick-breaking --------------------
        if tau >= 2 {
            stick_break_grad(
                &self.g_weights,
                &self.sb,
                &self.stick,
                &mut self.g_stick_y,
                true,
            );
            let start = layout.w_range().start;
            for (k, &g) in self.g_stick_y.iter().enumerate() {
                grad[start + k] += g;
            }
        }

        // --- Field priors, sum-to-zero, and reconstruction adjoints --------
        let eigenvalues = data.spectrum().eigenvalues();
        let graph = data.graph();
        let s2z_var = config.sum_to_zero_factor * (n_cells as f64) * (n_cells as f64);

        for (pars, phi, g_phi, innov_range) in [
            (
                growth_pars,
                &mut self.phi_growth,
                &mut self.g_phi_growth,
                layout.growth_innov_range(),
            ),
            (
                baseline_pars,
                &mut self.phi_baseline,
                &mut self.g_phi_baseline,
                layout.baseline_innov_range(),
            ),
        ] {
            let Some((off, alpha, rho, sigma, scale)) = pars else {
                continue;
            };
            let z_innov = &z[innov_range.clone()];

            // Soft sum-to-zero on the centered field.
            let total: f64 = phi.iter().sum();
            lp += -0.5 * (LN_2PI + s2z_var.ln()) - total * total / (2.0 * s2z_var);
            let g_total = -total / s2z_var;
            for g in g_phi.iter_mut() {
                *g += g_total;
            }

            // Per-slice CAR prior on the innovations (unit scale).
            let log_det: f64 = eigenvalues.iter().map(|&ev| (1.0 - alpha * ev).ln()).sum();
            let mut d_alpha = (t_len as f64 / 2.0)
                * eigenvalues
                    .iter()
                    .map(|&ev| -ev / (1.0 - alpha * ev))
                    .sum::<f64>();
            lp += (t_len as f64) * (0.5 * log_det - 0.5 * (l as f64) * LN_2PI);
            let mut eq_sum = 0.0;
            let mut ss_sum = 0.0;
            {
                let gi = &mut grad[innov_range.clone()];
                for t in 0..t_len {
                    let zs = &z_innov[t * l..(t + 1) * l];
                    for a in 0..l {
                        self.dwx[a] = graph.degrees()[a] as f64 * zs[a];
                    }
                    for &(i, j) in graph.edges() {
                        self.dwx[i as usize] -= zs[j as usize];
                        self.dwx[j as usize] -= zs[i as usize];
                    }
                    let gs = &mut gi[t * l..(t + 1) * l];
                    for a in 0..l {
                        eq_sum += zs[a] * self.dwx[a];
                        ss_sum += zs[a] * zs[a];
                        gs[a] -= alpha * self.dwx[a] + (1.0 - alpha) * zs[a];
                    }
                }
            }
            lp += -0.5 * (alpha * eq_sum + (1.0 - alpha) * ss_sum);
            d_alpha += -0.5 * (eq_sum - ss_sum);

            // Adjoint of phi_t = rho * phi_{t-1} + sigma * z_t.
            let mut d_rho = 0.0;
            let mut d_sigma = 0.0;
            {
                let gi = &mut grad[innov_range.clone()];
                for t in (0..t_len).rev() {
                    let g_slice = &g_phi[t * l..(t + 1) * l];
                    if t == t_len - 1 {
                        self.bar.copy_from_slice(g_slice);
                    } else {
                        for a in 0..l {
                            self.bar[a] = g_slice[a] + rho * self.bar[a];
                        }
                    }
                    let zs = &z_innov[t * l..(t + 1) * l];
                    let gs = &mut gi[t * l..(t + 1) * l];
                    for a in 0..l {
                        gs[a] += sigma * self.bar[a];
                        d_sigma += self.bar[a] * zs[a];
                    }
                    if t >= 1 {
                        let prev = &phi[(t - 1) * l..t * l];
                        for a in 0..l {
                            d_rho += self.bar[a] * prev[a];
                        }
                    }
                }
            }

            // Chain through the constraining transforms, including the
            // Jacobian terms' own derivatives. The half-normal prior on
            // sigma contributes on the constrained scale.
            d_sigma -= sigma / (scale * scale);
            grad[off] += alpha * (1.0 - alpha) * d_alpha + (1.0 - 2.0 * alpha);
            grad[off + 1] += rho * (1.0 - rho) * d_rho + (1.0 - 2.0 * rho);
            grad[off + 2] += sigma * d_sigma + 1.0;
        }

        lp
    }
}

/// `phi_0 = sigma z_0`; `phi_t = rho phi_{t-1} + sigma z_t`.
fn reconstruct(z_innov: &[f64], l: usize, rho: f64, sigma: f64, phi: &mut [f64]) {
    let t_len = z_innov.len() / l;
    for a in 0..l {
        phi[a] = sigma * z_innov[a];
    }
    for t in 1..t_len {
        for a in 0..l {
            phi[t * l + a] = rho * phi[(t - 1) * l + a] + sigma * z_innov[t * l + a];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::car::car_ar_logpdf;
    use crate::graph::AreaGraph;
    use crate::model::{
        CountPanel, DepletionMode, DesignMatrices, Layout, ModelConfig, ModelData, PriorConfig,
        Variant,
    };
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn config(variant: Variant, tau: usize) -> ModelConfig {
        ModelConfig {
            variant,
            tau,
            depletion: DepletionMode::Susceptible,
            immunity_window: None,
            sum_to_zero_factor: 0.001,
            priors: PriorConfig::default(),
        }
    }

    /// 2x2 lattice, 4 weeks, two covariates per block, two held-out cells.
    fn small_data(variant: Variant, tau: usize) -> ModelData {
        let graph = AreaGraph::lattice(2, 2).unwrap();
        let l = 4;
        let t_len = 4;
        let counts = vec![
            4, 0, 2, 7, //
            3, 1, 0, 5, //
            6, 2, 1, 3, //
            2, 4, 0, 1,
        ];
        let pre = vec![
            2, 1, 3, // area 0, weeks -1..-3
            0, 2, 1, //
            5, 0, 2, //
            1, 1, 0,
        ];
        let pop = vec![90.0, 140.0, 80.0, 120.0];
        let panel = CountPanel::new(l, t_len, counts, pre, pop, None).unwrap();
        let mut rng = crate::rng::substream(5150, &[0x31]);
        let n_cells = l * t_len;
        let mut growth = Vec::with_capacity(n_cells * 2);
        let mut baseline = Vec::with_capacity(n_cells * 2);
        for _ in 0..n_cells {
            growth.push(1.0);
            growth.push(rng.random::<f64>() * 2.0 - 1.0);
            baseline.push(1.0);
            baseline.push(rng.random::<f64>() * 2.0 - 1.0);
        }
        let designs = DesignMatrices::new(n_cells, 2, growth, 2, baseline).unwrap();
        let mut mask = vec![true; n_cells];
        mask[5] = false;
        mask[11] = false;
        ModelData::new(panel, designs, graph, config(variant, tau), Some(mask)).unwrap()
    }

    fn random_z(dim: usize, seed: u64) -> Vec<f64> {
        let mut rng = crate::rng::substream(seed, &[0x32]);
        (0..dim).map(|_| rng.random::<f64>() * 1.6 - 0.8).collect()
    }

    #[test]
    fn gradient_matches_finite_differences_all_variants() {
        for variant in [
            Variant::NoEffects,
            Variant::GrowthEffects,
            Variant::BaselineEffects,
            Variant::BothEffects,
            Variant::EffectsOnly,
        ] {
            for tau in [1usize, 3] {
                let data = small_data(variant, tau);
                let mut post = Posterior::new(&data);
                let dim = post.dim();
                let z = random_z(dim, 1000 + tau as u64);
                let mut grad = vec![0.0; dim];
                let lp = post.logp_grad(&z, &mut grad);
                assert!(lp.is_finite(), "variant {} lp not finite", variant.letter());
                let h = 1e-5;
                for k in 0..dim {
                    let mut zp = z.clone();
                    let mut zm = z.clone();
                    zp[k] += h;
                    zm[k] -= h;
                    let fd = (post.logp(&zp) - post.logp(&zm)) / (2.0 * h);
                    let tol = (1e-6 * grad[k].abs().max(1.0)).max(2e-6);
                    assert!(
                        (fd - grad[k]).abs() < tol,
                        "variant {} tau {tau} coord {k}: fd {fd} vs analytic {}",
                        variant.letter(),
                        grad[k]
                    );
                }
            }
        }
    }

    #[test]
    fn matches_independent_assembly_from_public_pieces() {
        // Rebuild the density from the public building blocks: likelihood
        // via ModelData, field priors via the centered CAR-AR density plus
        // the non-centering Jacobian, explicit scalar priors, transform
        // Jacobians from Layout. This pins the whole wiring.
        let data = small_data(Variant::BothEffects, 3);
        let mut post = Posterior::new(&data);
        let z = random_z(post.dim(), 77);
        let lp = post.logp(&z);

        let layout = data.layout();
        let (p, log_jac) = layout.transform(&z).unwrap();
        let mut want = log_jac;
        want += data.log_likelihood(&p).unwrap();

        let l = data.panel().n_areas() as f64;
        let t_len = data.panel().n_times() as f64;
        let n = l * t_len;
        let priors = &data.config().priors;
        for (car, field, scale) in [
            (
                p.growth_car.unwrap(),
                p.growth_field().unwrap(),
                priors.sigma_growth_scale,
            ),
            (
                p.baseline_car.unwrap(),
                p.baseline_field().unwrap(),
                priors.sigma_baseline_scale,
            ),
        ] {
            // Innovation prior by change of variables: the centered density
            // plus the log-Jacobian L*T*ln(sigma) of the reconstruction.
            want += car_ar_logpdf(data.graph(), data.spectrum(), &field, &car).unwrap()
                + n * car.sigma.ln();
            // Half-normal on sigma.
            want += 0.5 * (2.0 / std::f64::consts::PI).ln() - scale.ln()
                - car.sigma * car.sigma / (2.0 * scale * scale);
            // Soft sum-to-zero on the centered field.
            let s: f64 = field.data().iter().sum();
            let var = data.config().sum_to_zero_factor * n * n;
            want += -0.5 * (2.0 * std::f64::consts::PI * var).ln() - s * s / (2.0 * var);
        }
        for (j, &b) in p.beta.iter().enumerate() {
            let (m, s) = if j == 0 {
                (priors.beta0_mean, priors.beta0_scale)
            } else {
                (0.0, priors.beta_scale)
            };
            want += -0.5 * LN_2PI - s.ln() - (b - m) * (b - m) / (2.0 * s * s);
        }
        for &e in &p.eta {
            let s = priors.eta_scale;
            want += -0.5 * LN_2PI - s.ln() - e * e / (2.0 * s * s);
        }
        // Flat Dirichlet normalizer, tau = 3: ln Gamma(3) = ln 2.
        want += 2.0f64.ln();

        assert_abs_diff_eq!(lp, want, epsilon = 1e-9 * want.abs().max(1.0));
    }

    #[test]
    fn holdout_mask_removes_exactly_those_likelihood_terms() {
        let graph = AreaGraph::lattice(2, 2).unwrap();
        let panel = CountPanel::new(
            4,
            3,
            vec![1, 2, 3, 4, 0, 2, 5, 1, 3, 0, 2, 2],
            vec![1, 0, 2, 1, 0, 3, 1, 1],
            vec![50.0, 60.0, 70.0, 80.0],
            None,
        )
        .unwrap();
        let designs = DesignMatrices::intercept_only(12);
        let cfg = config(Variant::BothEffects, 2);
        let mut mask = vec![true; 12];
        mask[3] = false;
        mask[7] = false;
        let full = ModelData::new(
            panel.clone(),
            designs.clone(),
            graph.clone(),
            cfg.clone(),
            None,
        )
        .unwrap();
        let held = ModelData::new(panel, designs, graph, cfg, Some(mask)).unwrap();

        let mut post_full = Posterior::new(&full);
        let mut post_held = Posterior::new(&held);
        let z = random_z(post_full.dim(), 99);
        let lp_full = post_full.logp(&z);
        let lp_held = post_held.logp(&z);

        let (p, _) = full.layout().transform(&z).unwrap();
        let removed: f64 = full.pointwise_loglik(&p, &[3, 7]).unwrap().iter().sum();
        assert_abs_diff_eq!(lp_full - lp_held, removed, epsilon = 1e-10);
    }

    #[test]
    fn area_relabeling_leaves_density_invariant() {
        // Permute area labels everywhere (graph, panel, designs, mask,
        // innovations); the density must not change.
        let data = small_data(Variant::BothEffects, 2);
        let perm = [2usize, 0, 3, 1]; // new index of old area a is perm[a]
        let l = 4;
        let t_len = 4;

        let mut edges = Vec::new();
        for &(i, j) in data.graph().edges() {
            edges.push((perm[i as usize], perm[j as usize]));
        }
        let graph = AreaGraph::new(l, &edges).unwrap();

        let old_panel = data.panel();
        let mut counts = vec![0u64; l * t_len];
        let mut pre = vec![0u64; l * old_panel.pre_depth()];
        let mut pop = vec![0.0; l];
        for a in 0..l {
            pop[perm[a]] = old_panel.population()[a];
            for t in 0..t_len {
                counts[t * l + perm[a]] = old_panel.count(a, t);
            }
            for j in 0..old_panel.pre_depth() {
                pre[perm[a] * old_panel.pre_depth() + j] = old_panel.pre_count(a, j);
            }
        }
        let panel = CountPanel::new(l, t_len, counts, pre, pop, None).unwrap();

        let n_cells = l * t_len;
        let mut growth = vec![0.0; n_cells * 2];
        let mut baseline = vec![0.0; n_cells * 2];
        let mut mask = vec![true; n_cells];
        for t in 0..t_len {
            for a in 0..l {
                let old = t * l + a;
                let new = t * l + perm[a];
                for j in 0..2 {
                    growth[new * 2 + j] = data.designs().growth_row(old)[j];
                    baseline[new * 2 + j] = data.designs().baseline_row(old)[j];
                }
                mask[new] = data.mask()[old];
            }
        }
        let designs = DesignMatrices::new(n_cells, 2, growth, 2, baseline).unwrap();
        let permuted =
            ModelData::new(panel, designs, graph, data.config().clone(), Some(mask)).unwrap();

        let mut post = Posterior::new(&data);
        let mut post_perm = Posterior::new(&permuted);
        let z = random_z(post.dim(), 31);
        let mut zp = z.clone();
        let layout = data.layout();
        for range in [layout.growth_innov_range(), layout.baseline_innov_range()] {
            for t in 0..t_len {
                for a in 0..l {
                    zp[range.start + t * l + perm[a]] = z[range.start + t * l + a];
                }
            }
        }
        assert_abs_diff_eq!(post.logp(&z), post_perm.logp(&zp), epsilon = 1e-10);
    }

    #[test]
    fn effects_only_variant_ignores_covariate_values() {
        let a = small_data(Variant::EffectsOnly, 2);
        // Same panel/graph but scrambled design values.
        let graph = AreaGraph::lattice(2, 2).unwrap();
        let n_cells = 16;
        let mut rng = crate::rng::substream(4242, &[0x33]);
        let mut growth = Vec::new();
        let mut baseline = Vec::new();
        for _ in 0..n_cells {
            growth.push(1.0);
            growth.push(rng.random::<f64>() * 10.0);
            baseline.push(1.0);
            baseline.push(rng.random::<f64>() * 10.0);
        }
        let designs = DesignMatrices::new(n_cells, 2, growth, 2, baseline).unwrap();
        let mut mask = vec![true; n_cells];
        mask[5] = false;
        mask[11] = false;
        let b = ModelData::new(
            a.panel().clone(),
            designs,
            graph,
            a.config().clone(),
            Some(mask),
        )
        .unwrap();
        let mut pa = Posterior::new(&a);
        let mut pb = Posterior::new(&b);
        let z = random_z(pa.dim(), 8);
        assert_eq!(pa.logp(&z), pb.logp(&z));
    }

    #[test]
    fn saturated_transforms_yield_rejection_sentinel() {
        let data = small_data(Variant::BothEffects, 3);
        let mut post = Posterior::new(&data);
        let dim = post.dim();
        let layout = data.layout();

        let mut z = vec![0.1; dim];
        z[layout.growth_par()] = 40.0; // sigmoid rounds to exactly 1
        let mut grad = vec![1.0; dim];
        assert_eq!(post.logp_grad(&z, &mut grad), f64::NEG_INFINITY);
        assert!(grad.iter().all(|&g| g == 0.0));

        let mut z = vec![0.1; dim];
        z[layout.baseline_par() + 2] = 800.0; // exp overflows
        assert_eq!(post.logp_grad(&z, &mut grad), f64::NEG_INFINITY);

        // Huge field values overflow the intensity.
        let mut z = vec![0.1; dim];
        let r = layout.growth_innov_range();
        z[r.start] = 1e6;
        assert_eq!(post.logp_grad(&z, &mut grad), f64::NEG_INFINITY);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn positive_count_with_zero_intensity_is_rejected() {
        // Literal depletion with an empty history makes lambda = 0; a
        // positive count there must reject, a zero count must not.
        let graph = AreaGraph::new(2, &[(0, 1)]).unwrap();
        let designs = DesignMatrices::intercept_only(4);
        let cfg = ModelConfig {
            variant: Variant::NoEffects,
            tau: 1,
            depletion: DepletionMode::Literal,
            immunity_window: None,
            sum_to_zero_factor: 0.001,
            priors: PriorConfig::default(),
        };
        // Area 0 has no history at all: dep[area 0, t = 0] = 0.
        let panel_pos =
            CountPanel::new(2, 2, vec![1, 2, 0, 1], vec![0, 3], vec![50.0, 50.0], None).unwrap();
        let data =
            ModelData::new(panel_pos, designs.clone(), graph.clone(), cfg.clone(), None).unwrap();
        let mut post = Posterior::new(&data);
        let z = vec![0.0; post.dim()];
        assert_eq!(post.logp(&z), f64::NEG_INFINITY);

        let panel_zero =
            CountPanel::new(2, 2, vec![0, 2, 0, 1], vec![0, 3], vec![50.0, 50.0], None).unwrap();
        let data = ModelData::new(panel_zero, designs, graph, cfg, None).unwrap();
        let mut post = Posterior::new(&data);
        assert!(post.logp(&z).is_finite());
    }

    #[test]
    fn logp_grad_is_deterministic() {
        let data = small_data(Variant::BothEffects, 3);
        let mut post = Posterior::new(&data);
        let z = random_z(post.dim(), 3);
        let mut g1 = vec![0.0; post.dim()];
        let mut g2 = vec![0.0; post.dim()];
        let a = post.logp_grad(&z, &mut g1);
        let b = post.logp_grad(&z, &mut g2);
        assert_eq!(a, b);
        assert_eq!(g1, g2);
    }

    #[test]
    fn zero_point_density_is_finite_for_all_variants() {
        for variant in [
            Variant::NoEffects,
            Variant::GrowthEffects,
            Variant::BaselineEffects,
            Variant::BothEffects,
            Variant::EffectsOnly,
        ] {
            let data = small_data(variant, 3);
            let mut post = Posterior::new(&data);
            let z = vec![0.0; post.dim()];
            assert!(post.logp(&z).is_finite());
        }
    }

    #[test]
    fn layout_dim_matches_posterior_dim() {
        let data = small_data(Variant::BothEffects, 3);
        let layout = Layout::new(&config(Variant::BothEffects, 3), 4, 4, 2, 2);
        assert_eq!(layout, *data.layout());
        assert_eq!(Posterior::new(&data).dim(), layout.dim());
    }
}
