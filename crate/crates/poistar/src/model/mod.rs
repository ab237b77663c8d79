//! The observation model: panel data, configuration, and intensity.
//!
//! A panel records weekly counts `y[area, t]` for `t = 0..T`, together with
//! a pre-period of counts from the weeks immediately before `t = 0` (the
//! autoregression needs `tau` weeks of history at `t = 0`) and a population
//! per area. The conditional intensity of each cell is
//!
//! ```text
//! lambda[a,t] = ( sum_{i=1..tau} w_i * y[a, t-i] * growth[a,t] + base[a,t] ) * dep[a,t]
//! growth[a,t] = exp( x[a,t]' beta + phi[a,t] )      // epidemic growth factor
//! base[a,t]   = offset[a] * exp( v[a,t]' eta + psi[a,t] )  // endemic baseline
//! ```
//!
//! with `offset[a] = population[a] / 10_000` by default, simplex lag
//! weights `w`, and CAR-AR random fields `phi` (growth) and `psi`
//! (baseline) gated by the model [`Variant`]. `dep[a,t]` is a depletion
//! factor built from the count history; see [`DepletionMode`].
//!
//! [`ModelData`] bundles panel + designs + graph + configuration, validates
//! the lot once, and precomputes everything the likelihood needs (lagged
//! counts, depletion, log-factorials, the in-sample cell list). Cells are
//! indexed time-major throughout: `cell = t * n_areas + area`.

pub mod posterior;
mod transform;

pub use posterior::Posterior;
pub use transform::Layout;

use crate::car::{noncentered, CarParams, StField};
use crate::error::{Error, Result};
use crate::graph::{AreaGraph, EigenSpectrum};

/// Which random-effect fields and covariate blocks are active.
///
/// The CLI letters a-e map onto these in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// `a`: covariates only, no random effects.
    NoEffects,
    /// `b`: growth field `phi` only.
    GrowthEffects,
    /// `c`: baseline field `psi` only.
    BaselineEffects,
    /// `d`: both fields.
    BothEffects,
    /// `e`: both fields, no covariates at all (no intercepts either).
    EffectsOnly,
}

impl Variant {
    pub fn from_letter(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(Variant::NoEffects),
            "b" => Ok(Variant::GrowthEffects),
            "c" => Ok(Variant::BaselineEffects),
            "d" => Ok(Variant::BothEffects),
            "e" => Ok(Variant::EffectsOnly),
            _ => Err(Error::Config(format!(
                "unknown variant `{s}` (expected one of a, b, c, d, e)"
            ))),
        }
    }

    pub fn letter(&self) -> &'static str {
        match self {
            Variant::NoEffects => "a",
            Variant::GrowthEffects => "b",
            Variant::BaselineEffects => "c",
            Variant::BothEffects => "d",
            Variant::EffectsOnly => "e",
        }
    }

    pub fn has_growth_field(&self) -> bool {
        matches!(
            self,
            Variant::GrowthEffects | Variant::BothEffects | Variant::EffectsOnly
        )
    }

    pub fn has_baseline_field(&self) -> bool {
        matches!(
            self,
            Variant::BaselineEffects | Variant::BothEffects | Variant::EffectsOnly
        )
    }

    pub fn has_covariates(&self) -> bool {
        !matches!(self, Variant::EffectsOnly)
    }
}

/// How the depletion factor `dep[a,t]` is built from the count history.
///
/// Let `cum[a,t]` be the sum of counts in the `immunity_window` weeks
/// before `t` (all available history when the window is unset; a window of
/// zero makes `cum = 0`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepletionMode {
    /// `dep = clamp(1 - cum / population, 1e-6, 1)`: the remaining
    /// susceptible share. The default.
    Susceptible,
    /// `dep = cum / population`: the raw attack proportion. Kept for
    /// compatibility with formulations that use the cumulative share
    /// directly; note cells with an empty history get `dep = 0` and hence
    /// `lambda = 0`.
    Literal,
}

/// Floor of the susceptible share, keeping `lambda` strictly positive.
pub const SUSCEPTIBLE_FLOOR: f64 = 1e-6;

impl DepletionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "susceptible" => Ok(DepletionMode::Susceptible),
            "literal" => Ok(DepletionMode::Literal),
            _ => Err(Error::Config(format!(
                "unknown depletion mode `{s}` (expected `susceptible` or `literal`)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DepletionMode::Susceptible => "susceptible",
            DepletionMode::Literal => "literal",
        }
    }
}

/// Prior hyperparameters. All scales are standard deviations.
///
/// Growth-coefficient priors are `beta[0] ~ N(beta0_mean, beta0_scale)` for
/// the intercept and `N(0, beta_scale)` for the rest; baseline coefficients
/// are all `N(0, eta_scale)`. Field scales get half-normal priors; the CAR
/// mixing and autoregression parameters are uniform on (0, 1); lag weights
/// are flat on the simplex.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorConfig {
    pub beta0_mean: f64,
    pub beta0_scale: f64,
    pub beta_scale: f64,
    pub eta_scale: f64,
    pub sigma_growth_scale: f64,
    pub sigma_baseline_scale: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            beta0_mean: -0.5,
            beta0_scale: 1.0,
            beta_scale: 1.0,
            eta_scale: 1.0,
            sigma_growth_scale: 0.1,
            sigma_baseline_scale: 0.1,
        }
    }
}

impl PriorConfig {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta0_scale", self.beta0_scale),
            ("beta_scale", self.beta_scale),
            ("eta_scale", self.eta_scale),
            ("sigma_growth_scale", self.sigma_growth_scale),
            ("sigma_baseline_scale", self.sigma_baseline_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "prior scale {name} must be positive and finite, got {v}"
                )));
            }
        }
        if !self.beta0_mean.is_finite() {
            return Err(Error::Config("beta0_mean must be finite".into()));
        }
        Ok(())
    }
}

/// Model configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Number of autoregressive lags (`>= 1`).
    pub tau: usize,
    pub depletion: DepletionMode,
    /// Weeks of history entering the depletion sum; `None` = everything.
    pub immunity_window: Option<usize>,
    /// `c` in `Var(sum of field) = c * (L * T)^2`, the soft sum-to-zero
    /// constraint applied to each active random-effect field.
    pub sum_to_zero_factor: f64,
    pub priors: PriorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::BothEffects,
            tau: 3,
            depletion: DepletionMode::Susceptible,
            immunity_window: None,
            sum_to_zero_factor: 0.001,
            priors: PriorConfig::default(),
        }
    }
}

impl ModelConfig {
    fn validate(&self) -> Result<()> {
        if self.tau == 0 {
            return Err(Error::Config("tau must be at least 1".into()));
        }
        if !(self.sum_to_zero_factor > 0.0 && self.sum_to_zero_factor.is_finite()) {
            return Err(Error::Config(format!(
                "sum_to_zero_factor must be positive and finite, got {}",
                self.sum_to_zero_factor
            )));
        }
        self.priors.validate()
    }
}

/// Observed counts, pre-period history, and populations.
#[derive(Debug, Clone, PartialEq)]
pub struct CountPanel {
    n_areas: usize,
    n_times: usize,
    pre_depth: usize,
    /// Time-major: `counts[t * n_areas + area]`.
    counts: Vec<u64>,
    /// Area-major: `pre_counts[area * pre_depth + j]` is the count `j + 1`
    /// weeks before `t = 0` (`j = 0` is the most recent pre-period week).
    pre_counts: Vec<u64>,
    population: Vec<f64>,
    offset: Vec<f64>,
}

impl CountPanel {
    /// Build a panel. `offset = None` applies the default
    /// `population / 10_000`.
    pub fn new(
        n_areas: usize,
        n_times: usize,
        counts: Vec<u64>,
        pre_counts: Vec<u64>,
        population: Vec<f64>,
        offset: Option<Vec<f64>>,
    ) -> Result<Self> {
        if n_areas == 0 || n_times == 0 {
            return Err(Error::Validation(
                "panel must have at least one area and one week".into(),
            ));
        }
        if counts.len() != n_areas * n_times {
            return Err(Error::DimensionMismatch {
                context: "CountPanel counts",
                expected: n_areas * n_times,
                got: counts.len(),
            });
        }
        if pre_counts.len() % n_areas != 0 {
            return Err(Error::DimensionMismatch {
                context: "CountPanel pre_counts",
                expected: n_areas,
                got: pre_counts.len(),
            });
        }
        let pre_depth = pre_counts.len() / n_areas;
        if population.len() != n_areas {
            return Err(Error::DimensionMismatch {
                context: "CountPanel population",
                expected: n_areas,
                got: population.len(),
            });
        }
        for (a, &p) in population.iter().enumerate() {
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::Validation(format!(
                    "population of area index {a} must be positive and finite, got {p}"
                )));
            }
        }
        let offset = match offset {
            Some(o) => {
                if o.len() != n_areas {
                    return Err(Error::DimensionMismatch {
                        context: "CountPanel offset",
                        expected: n_areas,
                        got: o.len(),
                    });
                }
                for (a, &v) in o.iter().enumerate() {
                    if !(v > 0.0 && v.is_finite()) {
                        return Err(Error::Validation(format!(
                            "offset of area index {a} must be positive and finite, got {v}"
                        )));
                    }
                }
                o
            }
            None => population.iter().map(|p| p / 10_000.0).collect(),
        };
        Ok(CountPanel {
            n_areas,
            n_times,
            pre_depth,
            counts,
            pre_counts,
            population,
            offset,
        })
    }

    pub fn n_areas(&self) -> usize {
        self.n_areas
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn n_cells(&self) -> usize {
        self.n_areas * self.n_times
    }

    pub fn pre_depth(&self) -> usize {
        self.pre_depth
    }

    pub fn count(&self, area: usize, t: usize) -> u64 {
        self.counts[t * self.n_areas + area]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Count `j + 1` weeks before `t = 0`.
    pub fn pre_count(&self, area: usize, j: usize) -> u64 {
        self.pre_counts[area * self.pre_depth + j]
    }

    pub fn population(&self) -> &[f64] {
        &self.population
    }

    pub fn offset(&self) -> &[f64] {
        &self.offset
    }

    /// Count at signed week index: `t >= 0` reads the observation window,
    /// `t < 0` the pre-period. Out-of-range history reads as zero.
    fn count_at(&self, area: usize, t: isize) -> u64 {
        if t >= 0 {
            self.counts[t as usize * self.n_areas + area]
        } else {
            let j = (-t - 1) as usize;
            if j < self.pre_depth {
                self.pre_counts[area * self.pre_depth + j]
            } else {
                0
            }
        }
    }
}

/// Covariate designs for the growth and baseline regressions, cell-major:
/// row of cell `c` is `growth[c * n_growth .. (c + 1) * n_growth]`. The
/// first column of each design must be an all-ones intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrices {
    n_cells: usize,
    n_growth: usize,
    n_baseline: usize,
    growth: Vec<f64>,
    baseline: Vec<f64>,
}

impl DesignMatrices {
    pub fn new(
        n_cells: usize,
        n_growth: usize,
        growth: Vec<f64>,
        n_baseline: usize,
        baseline: Vec<f64>,
    ) -> Result<Self> {
        if n_growth == 0 || n_baseline == 0 {
            return Err(Error::Validation(
                "designs must have at least the intercept column".into(),
            ));
        }
        if growth.len() != n_cells * n_growth {
            return Err(Error::DimensionMismatch {
                context: "DesignMatrices growth",
                expected: n_cells * n_growth,
                got: growth.len(),
            });
        }
        if baseline.len() != n_cells * n_baseline {
            return Err(Error::DimensionMismatch {
                context: "DesignMatrices baseline",
                expected: n_cells * n_baseline,
                got: baseline.len(),
            });
        }
        for (name, width, data) in [
            ("growth", n_growth, &growth),
            ("baseline", n_baseline, &baseline),
        ] {
            for (cell, row) in data.chunks(width).enumerate() {
                if row[0] != 1.0 {
                    return Err(Error::Validation(format!(
                        "{name} design: first column must be an all-ones intercept \
                         (cell {cell} has {})",
                        row[0]
                    )));
                }
                for (j, &v) in row.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(Error::Validation(format!(
                            "{name} design: non-finite value at cell {cell}, column {j}"
                        )));
                    }
                }
            }
        }
        Ok(DesignMatrices {
            n_cells,
            n_growth,
            n_baseline,
            growth,
            baseline,
        })
    }

    /// Intercept-only designs for both regressions.
    pub fn intercept_only(n_cells: usize) -> Self {
        DesignMatrices {
            n_cells,
            n_growth: 1,
            n_baseline: 1,
            growth: vec![1.0; n_cells],
            baseline: vec![1.0; n_cells],
        }
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn n_growth(&self) -> usize {
        self.n_growth
    }

    pub fn n_baseline(&self) -> usize {
        self.n_baseline
    }

    pub fn growth_row(&self, cell: usize) -> &[f64] {
        &self.growth[cell * self.n_growth..(cell + 1) * self.n_growth]
    }

    pub fn baseline_row(&self, cell: usize) -> &[f64] {
        &self.baseline[cell * self.n_baseline..(cell + 1) * self.n_baseline]
    }
}

/// Standardize one covariate column (time-major, length `L * T`) to mean 0
/// and sample standard deviation 1, either globally or within each area.
/// Zero-variance input is an error naming the column (and area).
pub fn standardize_values(
    values: &mut [f64],
    n_areas: usize,
    n_times: usize,
    per_area: bool,
    name: &str,
) -> Result<()> {
    if values.len() != n_areas * n_times {
        return Err(Error::DimensionMismatch {
            context: "standardize_values",
            expected: n_areas * n_times,
            got: values.len(),
        });
    }
    let z_score = |xs: &mut Vec<(usize, f64)>, label: &str| -> Result<()> {
        let n = xs.len() as f64;
        let mean = xs.iter().map(|(_, v)| v).sum::<f64>() / n;
        let var = if xs.len() < 2 {
            0.0
        } else {
            xs.iter().map(|(_, v)| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        };
        if !(var > 0.0 && var.is_finite()) {
            return Err(Error::Validation(format!(
                "covariate `{label}` has zero variance and cannot be standardized"
            )));
        }
        let sd = var.sqrt();
        for (_, v) in xs.iter_mut() {
            *v = (*v - mean) / sd;
        }
        Ok(())
    };
    if per_area {
        for a in 0..n_areas {
            let mut xs: Vec<(usize, f64)> = (0..n_times)
                .map(|t| (t * n_areas + a, values[t * n_areas + a]))
                .collect();
            z_score(&mut xs, &format!("{name} (area index {a})"))?;
            for (idx, v) in xs {
                values[idx] = v;
            }
        }
    } else {
        let mut xs: Vec<(usize, f64)> = values.iter().copied().enumerate().collect();
        z_score(&mut xs, name)?;
        for (idx, v) in xs {
            values[idx] = v;
        }
    }
    Ok(())
}

/// Constrained-space parameters.
///
/// Inactive blocks are empty/`None` (variant `e` has empty `beta`/`eta`;
/// variant `a` has no fields). `weights` always has length `tau` and sums
/// to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub beta: Vec<f64>,
    pub eta: Vec<f64>,
    pub weights: Vec<f64>,
    pub growth_car: Option<CarParams>,
    pub baseline_car: Option<CarParams>,
    pub growth_innov: Option<StField>,
    pub baseline_innov: Option<StField>,
}

impl ParameterSet {
    /// The transformed (centered) growth field `phi`.
    pub fn growth_field(&self) -> Option<StField> {
        match (&self.growth_innov, &self.growth_car) {
            (Some(innov), Some(car)) => Some(noncentered(innov, car)),
            _ => None,
        }
    }

    /// The transformed (centered) baseline field `psi`.
    pub fn baseline_field(&self) -> Option<StField> {
        match (&self.baseline_innov, &self.baseline_car) {
            (Some(innov), Some(car)) => Some(noncentered(innov, car)),
            _ => None,
        }
    }
}

/// Validated data + configuration bundle with everything precomputed for
/// repeated likelihood work.
#[derive(Debug, Clone)]
pub struct ModelData {
    panel: CountPanel,
    designs: DesignMatrices,
    graph: AreaGraph,
    spectrum: EigenSpectrum,
    config: ModelConfig,
    layout: Layout,
    /// In-sample flag per cell (time-major).
    mask: Vec<bool>,
    in_cells: Vec<u32>,
    out_cells: Vec<u32>,
    /// `lags[cell * tau + (i - 1)] = y[area, t - i]` as f64.
    lags: Vec<f64>,
    depletion: Vec<f64>,
    ln_fact: Vec<f64>,
    counts_f: Vec<f64>,
}

impl ModelData {
    pub fn new(
        panel: CountPanel,
        designs: DesignMatrices,
        graph: AreaGraph,
        config: ModelConfig,
        mask: Option<Vec<bool>>,
    ) -> Result<Self> {
        config.validate()?;
        let l = panel.n_areas();
        let t_len = panel.n_times();
        let n_cells = l * t_len;
        if graph.n_areas() != l {
            return Err(Error::DimensionMismatch {
                context: "ModelData graph",
                expected: l,
                got: graph.n_areas(),
            });
        }
        if designs.n_cells() != n_cells {
            return Err(Error::DimensionMismatch {
                context: "ModelData designs",
                expected: n_cells,
                got: designs.n_cells(),
            });
        }
        if panel.pre_depth() < config.tau {
            return Err(Error::Validation(format!(
                "the autoregression needs {} pre-period weeks of history, \
                 but the panel provides {}",
                config.tau,
                panel.pre_depth()
            )));
        }
        let mask = match mask {
            Some(m) => {
                if m.len() != n_cells {
                    return Err(Error::DimensionMismatch {
                        context: "ModelData mask",
                        expected: n_cells,
                        got: m.len(),
                    });
                }
                m
            }
            None => vec![true; n_cells],
        };
        let in_cells: Vec<u32> = (0..n_cells as u32).filter(|&c| mask[c as usize]).collect();
        let out_cells: Vec<u32> = (0..n_cells as u32)
            .filter(|&c| !mask[c as usize])
            .collect();
        if in_cells.is_empty() {
            return Err(Error::Validation(
                "the in-sample mask excludes every cell".into(),
            ));
        }

        let components = graph.connected_components();
        if components > 1 {
            log::warn!(
                "area graph has {components} connected components; \
                 spatial smoothing only acts within components"
            );
        }
        let spectrum = graph.eigen_spectrum();

        // Lag table.
        let tau = config.tau;
        let mut lags = vec![0.0; n_cells * tau];
        for t in 0..t_len {
            for a in 0..l {
                let cell = t * l + a;
                for i in 1..=tau {
                    lags[cell * tau + i - 1] = panel.count_at(a, t as isize - i as isize) as f64;
                }
            }
        }

        let depletion = compute_depletion(&panel, config.depletion, config.immunity_window);

        // ln(y!) via a cumulative table up to the largest observed count.
        let max_count = panel.counts().iter().copied().max().unwrap_or(0) as usize;
        let table = ln_factorial_table(max_count);
        let mut ln_fact = vec![0.0; n_cells];
        let mut counts_f = vec![0.0; n_cells];
        for (cell, &y) in panel.counts().iter().enumerate() {
            ln_fact[cell] = table[y as usize];
            counts_f[cell] = y as f64;
        }

        let layout = Layout::new(
            &config,
            l,
            t_len,
            designs.n_growth(),
            designs.n_baseline(),
        );

        Ok(ModelData {
            panel,
            designs,
            graph,
            spectrum,
            config,
            layout,
            mask,
            in_cells,
            out_cells,
            lags,
            depletion,
            ln_fact,
            counts_f,
        })
    }

    pub fn panel(&self) -> &CountPanel {
        &self.panel
    }

    pub fn designs(&self) -> &DesignMatrices {
        &self.designs
    }

    pub fn graph(&self) -> &AreaGraph {
        &self.graph
    }

    pub fn spectrum(&self) -> &EigenSpectrum {
        &self.spectrum
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn in_cells(&self) -> &[u32] {
        &self.in_cells
    }

    pub fn out_cells(&self) -> &[u32] {
        &self.out_cells
    }

    pub fn n_cells(&self) -> usize {
        self.panel.n_cells()
    }

    pub fn depletion_factor(&self, area: usize, t: usize) -> f64 {
        self.depletion[t * self.panel.n_areas() + area]
    }

    pub(crate) fn depletion_all(&self) -> &[f64] {
        &self.depletion
    }

    pub(crate) fn lags(&self) -> &[f64] {
        &self.lags
    }

    pub(crate) fn ln_fact(&self) -> &[f64] {
        &self.ln_fact
    }

    pub(crate) fn counts_f(&self) -> &[f64] {
        &self.counts_f
    }

    fn check_params(&self, p: &ParameterSet) -> Result<()> {
        let want_beta = if self.config.variant.has_covariates() {
            self.designs.n_growth()
        } else {
            0
        };
        let want_eta = if self.config.variant.has_covariates() {
            self.designs.n_baseline()
        } else {
            0
        };
        if p.beta.len() != want_beta {
            return Err(Error::DimensionMismatch {
                context: "ParameterSet beta",
                expected: want_beta,
                got: p.beta.len(),
            });
        }
        if p.eta.len() != want_eta {
            return Err(Error::DimensionMismatch {
                context: "ParameterSet eta",
                expected: want_eta,
                got: p.eta.len(),
            });
        }
        if p.weights.len() != self.config.tau {
            return Err(Error::DimensionMismatch {
                context: "ParameterSet weights",
                expected: self.config.tau,
                got: p.weights.len(),
            });
        }
        let want_growth = self.config.variant.has_growth_field();
        if want_growth != (p.growth_car.is_some() && p.growth_innov.is_some()) {
            return Err(Error::Validation(format!(
                "variant {} {} a growth field",
                self.config.variant.letter(),
                if want_growth { "requires" } else { "forbids" }
            )));
        }
        let want_base = self.config.variant.has_baseline_field();
        if want_base != (p.baseline_car.is_some() && p.baseline_innov.is_some()) {
            return Err(Error::Validation(format!(
                "variant {} {} a baseline field",
                self.config.variant.letter(),
                if want_base { "requires" } else { "forbids" }
            )));
        }
        Ok(())
    }

    /// Intensity of one cell given transformed fields (`None` when the
    /// variant lacks the block). Returns `(lambda, epidemic_term,
    /// baseline_term)` where `lambda = (epidemic + baseline) * dep`.
    #[inline]
    fn cell_intensity(
        &self,
        cell: usize,
        beta: &[f64],
        eta: &[f64],
        weights: &[f64],
        growth_field: Option<&StField>,
        baseline_field: Option<&StField>,
    ) -> (f64, f64, f64) {
        let l = self.panel.n_areas();
        let area = cell % l;
        let tau = self.config.tau;

        let mut xb = 0.0;
        if !beta.is_empty() {
            let row = self.designs.growth_row(cell);
            for j in 0..beta.len() {
                xb += row[j] * beta[j];
            }
        }
        if let Some(f) = growth_field {
            xb += f.data()[cell];
        }
        let growth = xb.exp();

        let mut vb = 0.0;
        if !eta.is_empty() {
            let row = self.designs.baseline_row(cell);
            for j in 0..eta.len() {
                vb += row[j] * eta[j];
            }
        }
        if let Some(f) = baseline_field {
            vb += f.data()[cell];
        }
        let baseline = self.panel.offset()[area] * vb.exp();

        let mut wlag = 0.0;
        for i in 0..tau {
            wlag += weights[i] * self.lags[cell * tau + i];
        }
        let epidemic = wlag * growth;
        let lambda = (epidemic + baseline) * self.depletion[cell];
        (lambda, epidemic, baseline)
    }

    /// Poisson intensities for every cell (in-sample or not), time-major.
    pub fn rates(&self, p: &ParameterSet) -> Result<Vec<f64>> {
        self.check_params(p)?;
        let growth_field = p.growth_field();
        let baseline_field = p.baseline_field();
        let n = self.n_cells();
        let mut out = Vec::with_capacity(n);
        for cell in 0..n {
            let (lam, _, _) = self.cell_intensity(
                cell,
                &p.beta,
                &p.eta,
                &p.weights,
                growth_field.as_ref(),
                baseline_field.as_ref(),
            );
            out.push(lam);
        }
        Ok(out)
    }

    /// Intensity of a single cell.
    pub fn rate(&self, p: &ParameterSet, area: usize, t: usize) -> Result<f64> {
        self.check_params(p)?;
        let growth_field = p.growth_field();
        let baseline_field = p.baseline_field();
        let cell = t * self.panel.n_areas() + area;
        let (lam, _, _) = self.cell_intensity(
            cell,
            &p.beta,
            &p.eta,
            &p.weights,
            growth_field.as_ref(),
            baseline_field.as_ref(),
        );
        Ok(lam)
    }

    /// Share of the (undepleted) intensity attributable to the epidemic
    /// component, per cell: `epidemic / (epidemic + baseline)`. Zero where
    /// both terms vanish.
    pub fn epidemic_proportion(&self, p: &ParameterSet) -> Result<Vec<f64>> {
        self.check_params(p)?;
        let growth_field = p.growth_field();
        let baseline_field = p.baseline_field();
        let n = self.n_cells();
        let mut out = Vec::with_capacity(n);
        for cell in 0..n {
            let (_, epi, base) = self.cell_intensity(
                cell,
                &p.beta,
                &p.eta,
                &p.weights,
                growth_field.as_ref(),
                baseline_field.as_ref(),
            );
            let denom = epi + base;
            out.push(if denom > 0.0 { epi / denom } else { 0.0 });
        }
        Ok(out)
    }

    /// Poisson log-pmf of one cell at intensity `lam`.
    #[inline]
    fn cell_loglik(&self, cell: usize, lam: f64) -> f64 {
        let y = self.counts_f[cell];
        if y > 0.0 {
            if !(lam > 0.0 && lam.is_finite()) {
                return f64::NEG_INFINITY;
            }
            y * lam.ln() - lam - self.ln_fact[cell]
        } else if lam.is_finite() {
            -lam
        } else {
            f64::NEG_INFINITY
        }
    }

    /// Pointwise log-likelihood over the given cells (time-major indices).
    pub fn pointwise_loglik(&self, p: &ParameterSet, cells: &[u32]) -> Result<Vec<f64>> {
        self.check_params(p)?;
        let growth_field = p.growth_field();
        let baseline_field = p.baseline_field();
        let mut out = Vec::with_capacity(cells.len());
        for &cell in cells {
            let (lam, _, _) = self.cell_intensity(
                cell as usize,
                &p.beta,
                &p.eta,
                &p.weights,
                growth_field.as_ref(),
                baseline_field.as_ref(),
            );
            out.push(self.cell_loglik(cell as usize, lam));
        }
        Ok(out)
    }

    /// Total in-sample log-likelihood (may be `-inf`; never panics).
    pub fn log_likelihood(&self, p: &ParameterSet) -> Result<f64> {
        Ok(self.pointwise_loglik(p, &self.in_cells)?.iter().sum())
    }
}

/// Depletion factors for every cell, time-major. Exposed for tests and
/// the simulator; [`ModelData`] precomputes and caches this.
pub fn compute_depletion(
    panel: &CountPanel,
    mode: DepletionMode,
    immunity_window: Option<usize>,
) -> Vec<f64> {
    let l = panel.n_areas();
    let t_len = panel.n_times();
    let j_len = panel.pre_depth();
    let mut out = vec![0.0; l * t_len];
    for a in 0..l {
        // Extended history: pre-period (oldest first), then observations.
        let mut hist = Vec::with_capacity(j_len + t_len);
        for j in (0..j_len).rev() {
            hist.push(panel.pre_count(a, j));
        }
        for t in 0..t_len {
            hist.push(panel.count(a, t));
        }
        let mut prefix = vec![0u64; hist.len() + 1];
        for (i, &h) in hist.iter().enumerate() {
            prefix[i + 1] = prefix[i] + h;
        }
        let pop = panel.population()[a];
        for t in 0..t_len {
            // Weeks t-1 .. t-window in extended indices [j_len+t-window, j_len+t).
            let hi = j_len + t;
            let lo = match immunity_window {
                Some(w) => hi.saturating_sub(w),
                None => 0,
            };
            let cum = (prefix[hi] - prefix[lo]) as f64;
            let share = cum / pop;
            out[t * l + a] = match mode {
                DepletionMode::Susceptible => (1.0 - share).clamp(SUSCEPTIBLE_FLOOR, 1.0),
                DepletionMode::Literal => share,
            };
        }
    }
    out
}

/// Cumulative `ln(k!)` table for `k = 0..=max`.
pub(crate) fn ln_factorial_table(max: usize) -> Vec<f64> {
    let mut table = vec![0.0; max + 1];
    let mut acc = 0.0;
    for k in 1..=max {
        acc += (k as f64).ln();
        table[k] = acc;
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    pub(crate) fn tiny_panel() -> CountPanel {
        // 2 areas, 3 weeks, pre-depth 2.
        CountPanel::new(
            2,
            3,
            vec![3, 0, 5, 2, 1, 4], // t=0: (3,0); t=1: (5,2); t=2: (1,4)
            vec![2, 7, 1, 0],       // area 0: weeks -1,-2 = 2,7; area 1: 1,0
            vec![100.0, 200.0],
            None,
        )
        .unwrap()
    }

    #[test]
    fn panel_validates_dimensions_and_population() {
        assert!(CountPanel::new(2, 2, vec![1; 3], vec![], vec![1.0, 1.0], None).is_err());
        assert!(CountPanel::new(2, 2, vec![1; 4], vec![0; 3], vec![1.0, 1.0], None).is_err());
        assert!(CountPanel::new(2, 2, vec![1; 4], vec![0; 4], vec![1.0], None).is_err());
        assert!(CountPanel::new(2, 2, vec![1; 4], vec![0; 4], vec![1.0, 0.0], None).is_err());
    }

    #[test]
    fn default_offset_is_population_per_10k() {
        let p = tiny_panel();
        assert_abs_diff_eq!(p.offset()[0], 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(p.offset()[1], 0.02, epsilon = 1e-15);
    }

    #[test]
    fn count_at_spans_pre_period() {
        let p = tiny_panel();
        assert_eq!(p.count_at(0, 2), 1);
        assert_eq!(p.count_at(0, 0), 3);
        assert_eq!(p.count_at(0, -1), 2);
        assert_eq!(p.count_at(0, -2), 7);
        assert_eq!(p.count_at(0, -3), 0); // beyond recorded history
    }

    #[test]
    fn depletion_susceptible_hand_case() {
        let p = tiny_panel();
        let d = compute_depletion(&p, DepletionMode::Susceptible, None);
        // Area 0, pop 100, history (oldest..): 7, 2 | 3, 5, 1.
        // t=0: cum = 9 -> 1 - 0.09 = 0.91
        // t=1: cum = 12 -> 0.88;  t=2: cum = 17 -> 0.83
        assert_abs_diff_eq!(d[0], 0.91, epsilon = 1e-12);
        assert_abs_diff_eq!(d[2], 0.88, epsilon = 1e-12);
        assert_abs_diff_eq!(d[4], 0.83, epsilon = 1e-12);
        // Area 1, pop 200, history 0, 1 | 0, 2, 4.
        assert_abs_diff_eq!(d[1], 1.0 - 1.0 / 200.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d[5], 1.0 - 3.0 / 200.0, epsilon = 1e-12);
    }

    #[test]
    fn depletion_literal_and_window() {
        let p = tiny_panel();
        let lit = compute_depletion(&p, DepletionMode::Literal, None);
        assert_abs_diff_eq!(lit[0], 0.09, epsilon = 1e-12);
        // Window of 1: only last week's count.
        let w1 = compute_depletion(&p, DepletionMode::Susceptible, Some(1));
        assert_abs_diff_eq!(w1[0], 1.0 - 2.0 / 100.0, epsilon = 1e-12); // week -1 = 2
        assert_abs_diff_eq!(w1[2], 1.0 - 3.0 / 100.0, epsilon = 1e-12); // week 0 = 3
        // Window of 0: no depletion at all.
        let w0 = compute_depletion(&p, DepletionMode::Susceptible, Some(0));
        assert!(w0.iter().all(|&v| v == 1.0));
        let w0l = compute_depletion(&p, DepletionMode::Literal, Some(0));
        assert!(w0l.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depletion_clamps_at_floor() {
        let p = CountPanel::new(1, 2, vec![8, 1], vec![5], vec![10.0], None).unwrap();
        let d = compute_depletion(&p, DepletionMode::Susceptible, None);
        // t=1: cum = 13 > pop = 10 -> clamped to the floor.
        assert_abs_diff_eq!(d[1], SUSCEPTIBLE_FLOOR, epsilon = 1e-18);
    }

    #[test]
    fn ln_factorial_table_values() {
        let t = ln_factorial_table(5);
        assert_abs_diff_eq!(t[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(t[1], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(t[5], 120f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn standardize_global_and_per_area() {
        // 2 areas, 3 times, time-major.
        let mut v = vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0];
        standardize_values(&mut v, 2, 3, false, "x").unwrap();
        let n = v.len() as f64;
        let mean: f64 = v.iter().sum::<f64>() / n;
        let var: f64 = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-12);

        let mut v = vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0];
        standardize_values(&mut v, 2, 3, true, "x").unwrap();
        for a in 0..2 {
            let series: Vec<f64> = (0..3).map(|t| v[t * 2 + a]).collect();
            let mean: f64 = series.iter().sum::<f64>() / 3.0;
            let var: f64 = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 2.0;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn standardize_is_idempotent_on_standardized_input() {
        let raw = vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 12.0];
        let mut once = raw.clone();
        standardize_values(&mut once, 2, 4, false, "x").unwrap();
        let mut twice = once.clone();
        standardize_values(&mut twice, 2, 4, false, "x").unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn standardize_zero_variance_errors_name_column() {
        let mut v = vec![5.0; 6];
        let err = standardize_values(&mut v, 2, 3, false, "popden").unwrap_err();
        assert!(err.to_string().contains("popden"), "{err}");

        // Constant within one area only: per-area fails, global succeeds.
        let mut v = vec![1.0, 10.0, 1.0, 20.0, 1.0, 30.0];
        let err = standardize_values(&mut v, 2, 3, true, "jsa").unwrap_err();
        assert!(err.to_string().contains("jsa"), "{err}");
        assert!(err.to_string().contains("area index 0"), "{err}");
        let mut v = vec![1.0, 10.0, 1.0, 20.0, 1.0, 30.0];
        standardize_values(&mut v, 2, 3, false, "jsa").unwrap();
    }

    #[test]
    fn variant_letters_round_trip() {
        for s in ["a", "b", "c", "d", "e"] {
            assert_eq!(Variant::from_letter(s).unwrap().letter(), s);
        }
        assert!(Variant::from_letter("f").is_err());
    }

    #[test]
    fn model_data_requires_enough_history() {
        let panel = tiny_panel();
        let designs = DesignMatrices::intercept_only(6);
        let graph = AreaGraph::new(2, &[(0, 1)]).unwrap();
        let config = ModelConfig {
            tau: 3, // pre-depth is only 2
            ..ModelConfig::default()
        };
        let err = ModelData::new(panel, designs, graph, config, None).unwrap_err();
        assert!(err.to_string().contains("pre-period"), "{err}");
    }

    #[test]
    fn design_requires_intercept() {
        let bad = DesignMatrices::new(2, 1, vec![1.0, 0.5], 1, vec![1.0, 1.0]);
        assert!(bad.is_err());
    }
}
