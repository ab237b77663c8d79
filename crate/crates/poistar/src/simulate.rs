//! Synthetic panels drawn from the generative model, and the replicated
//! parameter-recovery study that fits the model back to them.
//!
//! Everything here is driven by counter-based substreams of a single study
//! seed (see [`crate::rng`]), so a spec reproduces byte-identical panels,
//! masks, and fits no matter how many replicates run or in what order.

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;

use crate::car::{self, CarParams, StField};
use crate::diagnostics::{predictive_score, quantile_sorted, summarize, PredictiveScore};
use crate::graph::AreaGraph;
use crate::model::{
    CountPanel, DesignMatrices, Layout, ModelConfig, ModelData, ParameterSet, Posterior, Variant,
    SUSCEPTIBLE_FLOOR,
};
use crate::rng::{substream, tag};
use crate::sampler::{sample, SamplerConfig};
use crate::{Error, Result};

/// Lag weights shared by every synthetic panel (most recent week first).
pub const TRUE_WEIGHTS: [f64; 3] = [0.7, 0.2, 0.1];

/// A replicate whose fit shows any scalar split R-hat above this is
/// excluded from the recovery report and counted in `n_excluded`.
pub const RHAT_GATE: f64 = 1.1;

/// Intensities beyond this are treated as a blow-up: the replicate is
/// abandoned and redrawn on a fresh substream.
const RATE_CAP: f64 = 1e12;

/// How many redraws a replicate gets before its last error is reported.
const MAX_GEN_ATTEMPTS: u64 = 10;

/// The study period is split into this many equal week blocks; blocks
/// `1..` carry the indicator columns, block `0` is the reference level.
const N_BLOCKS: usize = 6;

/// Fixed multiplicative effects on the growth rate attached to the five
/// week-block indicator columns, in column order.
pub fn fixed_indicator_effects() -> [f64; 5] {
    [
        (5.0f64 / 6.0).ln(),
        (2.0f64 / 3.0).ln(),
        (1.0f64 / 2.0).ln(),
        (5.0f64 / 2.0).ln(),
        (2.0f64 / 5.0).ln(),
    ]
}

/// Configuration of a synthetic study: the map, panel dimensions, scale of
/// the initial outbreak, holdout fraction, and replicate count. All
/// randomness is derived from `seed`.
#[derive(Debug, Clone)]
pub struct SimSpec {
    pub graph: AreaGraph,
    /// Observed weeks per replicate.
    pub n_times: usize,
    /// Autoregression order; must match the length of [`TRUE_WEIGHTS`].
    pub tau: usize,
    /// Population of every area.
    pub population: f64,
    /// Mean pre-period count, expressed per 10,000 population.
    pub init_rate_per_10k: f64,
    /// Fraction of cells withheld from fitting, in `[0, 1)`.
    pub holdout: f64,
    pub n_replicates: usize,
    pub seed: u64,
}

impl SimSpec {
    /// The desk-scale study: a 5x5 lattice observed for 30 weeks, three
    /// lags, 20% holdout, 20 replicates.
    pub fn desk_scale(seed: u64) -> Self {
        SimSpec {
            graph: AreaGraph::lattice(5, 5).expect("5x5 lattice"),
            n_times: 30,
            tau: 3,
            population: 200_000.0,
            init_rate_per_10k: 100.0,
            holdout: 0.2,
            n_replicates: 20,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_times == 0 {
            return Err(Error::Validation(
                "a synthetic panel needs at least one week".into(),
            ));
        }
        if self.tau != TRUE_WEIGHTS.len() {
            return Err(Error::Validation(format!(
                "synthetic panels fix the lag weights at {TRUE_WEIGHTS:?}, so tau must be {}, got {}",
                TRUE_WEIGHTS.len(),
                self.tau
            )));
        }
        if self.n_replicates == 0 {
            return Err(Error::Validation(
                "the study needs at least one replicate".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(Error::Validation(format!(
                "holdout fraction must lie in [0, 1), got {}",
                self.holdout
            )));
        }
        if !(self.population > 0.0 && self.population.is_finite()) {
            return Err(Error::Validation(format!(
                "population must be positive and finite, got {}",
                self.population
            )));
        }
        if !(self.init_rate_per_10k >= 0.0 && self.init_rate_per_10k.is_finite()) {
            return Err(Error::Validation(format!(
                "initial rate must be nonnegative and finite, got {}",
                self.init_rate_per_10k
            )));
        }
        Ok(())
    }

    /// Model configuration matching the generative process: both random
    /// fields, susceptible-depletion over the full history.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            variant: Variant::BothEffects,
            tau: self.tau,
            ..ModelConfig::default()
        }
    }

    fn n_cells(&self) -> usize {
        self.graph.n_areas() * self.n_times
    }
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn half_normal<R: Rng>(scale: f64, rng: &mut R) -> f64 {
    (scale * standard_normal(rng)).abs()
}

/// Draw the "true" parameters of one replicate.
///
/// The draw order is fixed — growth coefficients, baseline coefficient,
/// growth CAR parameters, baseline CAR parameters, growth field, baseline
/// field — so a given substream always yields the same values. The five
/// indicator effects and the lag weights are constants, the rest follows
/// the study's generating distributions; note the baseline field scale
/// (half-normal with scale 0.5) is deliberately wider than the fitting
/// prior's 0.1, so fits are scored under prior misspecification.
pub fn draw_true_params<R: Rng>(spec: &SimSpec, rng: &mut R) -> Result<ParameterSet> {
    spec.validate()?;

    let mut beta = Vec::with_capacity(4 + N_BLOCKS - 1);
    beta.push(-0.5 + standard_normal(rng));
    for _ in 0..3 {
        beta.push(0.1 * standard_normal(rng));
    }
    beta.extend_from_slice(&fixed_indicator_effects());
    let eta = vec![standard_normal(rng)];

    let growth_car = CarParams::new(rng.random(), rng.random(), half_normal(0.1, rng))?;
    let baseline_car = CarParams::new(rng.random(), rng.random(), half_normal(0.5, rng))?;

    let phi = car::sample_car_field(&spec.graph, &growth_car, spec.n_times, rng)?;
    let psi = car::sample_car_field(&spec.graph, &baseline_car, spec.n_times, rng)?;
    let growth_innov = car::noncentered_inverse(&phi, &growth_car)?;
    let baseline_innov = car::noncentered_inverse(&psi, &baseline_car)?;

    Ok(ParameterSet {
        beta,
        eta,
        weights: TRUE_WEIGHTS.to_vec(),
        growth_car: Some(growth_car),
        baseline_car: Some(baseline_car),
        growth_innov: Some(growth_innov),
        baseline_innov: Some(baseline_innov),
    })
}

/// Which of the equal week blocks `t` falls in (0-based).
fn week_block(t: usize, n_times: usize) -> usize {
    t * N_BLOCKS / n_times
}

/// Deterministic design matrices for a spec.
///
/// The growth design has an intercept, three iid standard-normal
/// covariates, and five indicators marking week blocks `1..` (block 0 is
/// the reference); the baseline design is intercept-only. The same spec
/// always produces the same design, independent of the replicate.
pub fn gen_design(spec: &SimSpec) -> Result<DesignMatrices> {
    spec.validate()?;
    let l = spec.graph.n_areas();
    let n_cells = spec.n_cells();
    let n_growth = 4 + N_BLOCKS - 1;
    let mut rng = substream(spec.seed, &[tag::DESIGN]);
    let mut growth = vec![0.0; n_cells * n_growth];
    for t in 0..spec.n_times {
        let block = week_block(t, spec.n_times);
        for a in 0..l {
            let cell = t * l + a;
            let row = &mut growth[cell * n_growth..(cell + 1) * n_growth];
            row[0] = 1.0;
            for slot in &mut row[1..4] {
                *slot = standard_normal(&mut rng);
            }
            if block > 0 {
                row[3 + block] = 1.0;
            }
        }
    }
    let baseline = vec![1.0; n_cells];
    DesignMatrices::new(n_cells, n_growth, growth, 1, baseline)
}

/// Simulate one panel and return the per-cell intensities that generated
/// it (time-major, like the counts). Mirrors the model's intensity
/// arithmetic exactly: weighted lag sum times the growth factor, plus the
/// offset-scaled baseline, all damped by the susceptible share of the
/// population computed from the full case history (pre-period included).
fn generate<R: Rng>(
    spec: &SimSpec,
    design: &DesignMatrices,
    params: &ParameterSet,
    rng: &mut R,
) -> Result<(CountPanel, Vec<f64>)> {
    let l = spec.graph.n_areas();
    let t_len = spec.n_times;
    let tau = spec.tau;
    if params.weights.len() != tau {
        return Err(Error::DimensionMismatch {
            context: "generate weights",
            expected: tau,
            got: params.weights.len(),
        });
    }
    if params.beta.len() != design.n_growth() {
        return Err(Error::DimensionMismatch {
            context: "generate beta",
            expected: design.n_growth(),
            got: params.beta.len(),
        });
    }
    if params.eta.len() != design.n_baseline() {
        return Err(Error::DimensionMismatch {
            context: "generate eta",
            expected: design.n_baseline(),
            got: params.eta.len(),
        });
    }
    let phi = params
        .growth_field()
        .ok_or_else(|| Error::Validation("synthetic panels need a growth field".into()))?;
    let psi = params
        .baseline_field()
        .ok_or_else(|| Error::Validation("synthetic panels need a baseline field".into()))?;

    // Pre-period history: iid Poisson counts at the initial rate.
    let pre_mean = spec.population / 10_000.0 * spec.init_rate_per_10k;
    let mut pre_counts = vec![0u64; l * tau];
    if pre_mean > 0.0 {
        let pre_dist = Poisson::new(pre_mean)
            .map_err(|e| Error::NumericDomain(format!("pre-period Poisson({pre_mean}): {e}")))?;
        for slot in &mut pre_counts {
            *slot = pre_dist.sample(rng) as u64;
        }
    }

    // Per-area history (oldest first) and cumulative-case tally, matching
    // how the fitted model reads lags and computes depletion.
    let mut history: Vec<Vec<u64>> = (0..l)
        .map(|a| (0..tau).rev().map(|j| pre_counts[a * tau + j]).collect())
        .collect();
    let mut cum: Vec<u64> = history.iter().map(|h| h.iter().sum()).collect();

    let offset = spec.population / 10_000.0;
    let mut counts = vec![0u64; l * t_len];
    let mut rates = vec![0.0; l * t_len];
    for t in 0..t_len {
        for a in 0..l {
            let cell = t * l + a;

            let mut xb = 0.0;
            let row = design.growth_row(cell);
            for j in 0..params.beta.len() {
                xb += row[j] * params.beta[j];
            }
            xb += phi.get(a, t);
            let growth = xb.exp();

            let mut vb = 0.0;
            let row = design.baseline_row(cell);
            for j in 0..params.eta.len() {
                vb += row[j] * params.eta[j];
            }
            vb += psi.get(a, t);
            let baseline = offset * vb.exp();

            let hist = &history[a];
            let mut wlag = 0.0;
            for i in 0..tau {
                wlag += params.weights[i] * hist[hist.len() - 1 - i] as f64;
            }

            let susceptible =
                (1.0 - cum[a] as f64 / spec.population).clamp(SUSCEPTIBLE_FLOOR, 1.0);
            let lambda = (wlag * growth + baseline) * susceptible;
            if !(lambda.is_finite() && lambda <= RATE_CAP) {
                return Err(Error::NumericDomain(format!(
                    "intensity blew up at area {a}, week {t}: {lambda}"
                )));
            }
            let y = if lambda > 0.0 {
                Poisson::new(lambda)
                    .map_err(|e| Error::NumericDomain(format!("Poisson({lambda}): {e}")))?
                    .sample(rng) as u64
            } else {
                0
            };
            counts[cell] = y;
            rates[cell] = lambda;
            history[a].push(y);
            cum[a] += y;
        }
    }

    let panel = CountPanel::new(
        l,
        t_len,
        counts,
        pre_counts,
        vec![spec.population; l],
        None,
    )?;
    Ok((panel, rates))
}

/// Generate one synthetic panel from explicit parameters, together with
/// the deterministic design matrices of the study configuration.
pub fn gen_panel<R: Rng>(
    spec: &SimSpec,
    params: &ParameterSet,
    rng: &mut R,
) -> Result<(CountPanel, DesignMatrices)> {
    let design = gen_design(spec)?;
    let (panel, _) = generate(spec, &design, params, rng)?;
    Ok((panel, design))
}

/// In-sample mask with `round(fraction * n_cells)` cells set to `false`
/// (held out), chosen uniformly without replacement.
pub fn random_mask<R: Rng>(n_cells: usize, fraction: f64, rng: &mut R) -> Vec<bool> {
    let k = ((fraction * n_cells as f64).round() as usize).min(n_cells);
    let mut idx: Vec<usize> = (0..n_cells).collect();
    for i in 0..k {
        let j = rng.random_range(i..n_cells);
        idx.swap(i, j);
    }
    let mut mask = vec![true; n_cells];
    for &c in &idx[..k] {
        mask[c] = false;
    }
    mask
}

/// In-sample mask for one replicate: `false` marks held-out cells, drawn
/// on the `(seed, replicate)` substream.
pub fn holdout_mask(spec: &SimSpec, replicate: usize) -> Vec<bool> {
    let mut rng = substream(spec.seed, &[tag::MASK, replicate as u64]);
    random_mask(spec.n_cells(), spec.holdout, &mut rng)
}

/// Truth and panel for one replicate, redrawing on intensity blow-ups.
fn replicate_panel(
    spec: &SimSpec,
    design: &DesignMatrices,
    rep: usize,
) -> Result<(ParameterSet, CountPanel)> {
    let mut last_err = None;
    for attempt in 0..MAX_GEN_ATTEMPTS {
        let mut prng = substream(spec.seed, &[tag::PARAMS, rep as u64, attempt]);
        let params = draw_true_params(spec, &mut prng)?;
        let mut grng = substream(spec.seed, &[tag::PANEL, rep as u64, attempt]);
        match generate(spec, design, &params, &mut grng) {
            Ok((panel, _)) => return Ok((params, panel)),
            Err(e @ Error::NumericDomain(_)) => {
                log::warn!("replicate {rep} attempt {attempt} blew up and was redrawn: {e}");
                last_err = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or_else(|| {
        Error::Validation(format!("replicate {rep} could not be generated"))
    }))
}

/// Recovery metrics for one named scalar parameter, pooled over kept
/// replicates.
#[derive(Debug, Clone)]
pub struct ParamRecovery {
    pub name: String,
    /// Root mean squared error of the posterior mean against the truth.
    pub rmse: f64,
    /// Fraction of kept replicates whose central 95% credible interval
    /// contained the truth.
    pub coverage: f64,
}

/// Pooled results of a replicated fit-to-synthetic-data study. Field and
/// predictive metrics are averaged over kept replicates; `out_*` values
/// are `NaN` when the study holds out no cells.
#[derive(Debug, Clone)]
pub struct RecoveryReport {
    pub parameters: Vec<ParamRecovery>,
    /// Credible-interval coverage pooled over every scalar and replicate.
    pub scalar_coverage: f64,
    /// rMSE of the posterior-mean growth field over all cells and replicates.
    pub growth_field_rmse: f64,
    pub growth_field_coverage: f64,
    pub baseline_field_rmse: f64,
    pub baseline_field_coverage: f64,
    /// Cell-level coverage pooled over both fields.
    pub latent_coverage: f64,
    pub in_coverage: f64,
    pub in_rel_mse: f64,
    pub in_rmse_per_10k: f64,
    pub out_coverage: f64,
    pub out_rel_mse: f64,
    pub out_rmse_per_10k: f64,
    /// Per kept replicate: the largest absolute error among the posterior
    /// mean lag weights.
    pub weight_abs_errors: Vec<f64>,
    pub n_replicates: usize,
    /// Replicates dropped by the convergence gate.
    pub n_excluded: usize,
}

/// Everything one replicate contributes to the pooled report.
struct RepOutcome {
    converged: bool,
    scalar_sq_err: Vec<f64>,
    scalar_hit: Vec<bool>,
    weight_abs_err: f64,
    /// Summed squared field errors and interval hits: `[growth, baseline]`.
    field_sq_err: [f64; 2],
    field_hits: [usize; 2],
    in_score: Option<PredictiveScore>,
    out_score: Option<PredictiveScore>,
}

impl RepOutcome {
    fn excluded() -> Self {
        RepOutcome {
            converged: false,
            scalar_sq_err: Vec::new(),
            scalar_hit: Vec::new(),
            weight_abs_err: f64::NAN,
            field_sq_err: [0.0; 2],
            field_hits: [0; 2],
            in_score: None,
            out_score: None,
        }
    }
}

/// Fit one replicate and score it against its truth.
fn run_replicate(
    spec: &SimSpec,
    design: &DesignMatrices,
    config: &ModelConfig,
    sampler_config: &SamplerConfig,
    rep: usize,
) -> Result<RepOutcome> {
    let n_cells = spec.n_cells();
    let (truth, panel) = replicate_panel(spec, design, rep)?;
    let mask = holdout_mask(spec, rep);
    let data = ModelData::new(
        panel,
        design.clone(),
        spec.graph.clone(),
        config.clone(),
        Some(mask),
    )?;
    let layout = data.layout();

    let mut cfg = sampler_config.clone();
    cfg.seed = substream(spec.seed, &[tag::REPLICATE, rep as u64]).random();
    let draws = sample(|_| Ok(Posterior::new(&data)), &cfg)?;

    // Constrained draws, per chain, in the layout's reporting order.
    let constrained: Vec<Vec<Vec<f64>>> = draws
        .map_draws(|z| layout.constrain_row(z))
        .into_iter()
        .map(|chain| chain.into_iter().collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let truth_row = layout.constrain_row(&layout.untransform(&truth)?)?;

    // Scalar summaries and the convergence gate.
    let n_scalar = layout.n_scalar();
    let mut summaries = Vec::with_capacity(n_scalar);
    let mut converged = true;
    for k in 0..n_scalar {
        let per_chain: Vec<Vec<f64>> = constrained
            .iter()
            .map(|chain| chain.iter().map(|row| row[k]).collect())
            .collect();
        let s = summarize(&per_chain, &[0.025, 0.975]);
        if !(s.rhat <= RHAT_GATE) {
            converged = false;
        }
        summaries.push(s);
    }
    if !converged {
        log::warn!("replicate {rep} failed the convergence gate and was excluded");
        return Ok(RepOutcome::excluded());
    }

    let mut scalar_sq_err = Vec::with_capacity(n_scalar);
    let mut scalar_hit = Vec::with_capacity(n_scalar);
    for k in 0..n_scalar {
        let err = summaries[k].mean - truth_row[k];
        scalar_sq_err.push(err * err);
        let lo = summaries[k].quantiles[0];
        let hi = summaries[k].quantiles[1];
        scalar_hit.push(truth_row[k] >= lo && truth_row[k] <= hi);
    }
    let w_start = design.n_growth() + design.n_baseline();
    let mut weight_abs_err = 0.0f64;
    for i in 0..spec.tau {
        weight_abs_err = weight_abs_err.max((summaries[w_start + i].mean - truth_row[w_start + i]).abs());
    }

    // One constrained-to-natural pass per draw: latent fields for the
    // coverage metrics and intensities for the predictive scores.
    let n_draws = draws.n_chains() * draws.kept_per_chain();
    let mut growth_draws: Vec<Vec<f64>> = vec![Vec::with_capacity(n_draws); n_cells];
    let mut baseline_draws: Vec<Vec<f64>> = vec![Vec::with_capacity(n_draws); n_cells];
    let mut lambda_draws: Vec<Vec<f64>> = Vec::with_capacity(n_draws);
    for chain in &constrained {
        for row in chain {
            let p = layout.params_from_constrained(row)?;
            let phi = p.growth_field().expect("fitted variant has a growth field");
            let psi = p
                .baseline_field()
                .expect("fitted variant has a baseline field");
            for c in 0..n_cells {
                growth_draws[c].push(phi.data()[c]);
                baseline_draws[c].push(psi.data()[c]);
            }
            lambda_draws.push(data.rates(&p)?);
        }
    }

    let mut field_sq_err = [0.0f64; 2];
    let mut field_hits = [0usize; 2];
    let truth_fields = [
        truth.growth_field().expect("truth has a growth field"),
        truth.baseline_field().expect("truth has a baseline field"),
    ];
    let mut tally = |per_cell: &mut [Vec<f64>], truth_field: &StField, slot: usize| {
        for (c, v) in per_cell.iter_mut().enumerate() {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let err = mean - truth_field.data()[c];
            field_sq_err[slot] += err * err;
            v.sort_by(f64::total_cmp);
            let lo = quantile_sorted(v, 0.025);
            let hi = quantile_sorted(v, 0.975);
            if truth_field.data()[c] >= lo && truth_field.data()[c] <= hi {
                field_hits[slot] += 1;
            }
        }
    };
    tally(&mut growth_draws, &truth_fields[0], 0);
    tally(&mut baseline_draws, &truth_fields[1], 1);

    let l = spec.graph.n_areas();
    let score = |cells: &[u32], which: u64| -> Result<PredictiveScore> {
        let lam: Vec<Vec<f64>> = lambda_draws
            .iter()
            .map(|row| cells.iter().map(|&c| row[c as usize]).collect())
            .collect();
        let y: Vec<u64> = cells
            .iter()
            .map(|&c| data.panel().counts()[c as usize])
            .collect();
        let pop: Vec<f64> = cells
            .iter()
            .map(|&c| data.panel().population()[c as usize % l])
            .collect();
        let seed = substream(spec.seed, &[tag::PREDICTIVE, rep as u64, which]).random();
        predictive_score(&lam, &y, &pop, seed)
    };
    let in_score = Some(score(data.in_cells(), 0)?);
    let out_score = if data.out_cells().is_empty() {
        None
    } else {
        Some(score(data.out_cells(), 1)?)
    };

    Ok(RepOutcome {
        converged: true,
        scalar_sq_err,
        scalar_hit,
        weight_abs_err,
        field_sq_err,
        field_hits,
        in_score,
        out_score,
    })
}

/// Run the full recovery study: simulate `n_replicates` panels, fit each
/// with the given sampler settings (seeded per replicate), and pool
/// recovery and predictive metrics over the replicates that pass the
/// convergence gate. Replicates run in parallel; results do not depend on
/// the schedule.
pub fn run_recovery(spec: &SimSpec, sampler_config: &SamplerConfig) -> Result<RecoveryReport> {
    spec.validate()?;
    sampler_config.validate()?;
    let design = gen_design(spec)?;
    let config = spec.model_config();
    let layout = Layout::new(
        &config,
        spec.graph.n_areas(),
        spec.n_times,
        design.n_growth(),
        design.n_baseline(),
    );
    let names = layout.constrained_names();
    let n_scalar = layout.n_scalar();
    let n_cells = spec.n_cells();

    let outcomes: Vec<RepOutcome> = (0..spec.n_replicates)
        .into_par_iter()
        .map(|rep| run_replicate(spec, &design, &config, sampler_config, rep))
        .collect::<Result<Vec<_>>>()?;

    let kept: Vec<&RepOutcome> = outcomes.iter().filter(|o| o.converged).collect();
    let n_excluded = spec.n_replicates - kept.len();
    if kept.is_empty() {
        return Err(Error::Validation(format!(
            "all {} replicates failed the convergence gate",
            spec.n_replicates
        )));
    }
    let n_kept = kept.len() as f64;

    let parameters: Vec<ParamRecovery> = (0..n_scalar)
        .map(|k| ParamRecovery {
            name: names[k].clone(),
            rmse: (kept.iter().map(|o| o.scalar_sq_err[k]).sum::<f64>() / n_kept).sqrt(),
            coverage: kept.iter().filter(|o| o.scalar_hit[k]).count() as f64 / n_kept,
        })
        .collect();
    let scalar_coverage = kept
        .iter()
        .map(|o| o.scalar_hit.iter().filter(|&&h| h).count())
        .sum::<usize>() as f64
        / (n_kept * n_scalar as f64);

    let field_cells = n_kept * n_cells as f64;
    let field_rmse = |slot: usize| {
        (kept.iter().map(|o| o.field_sq_err[slot]).sum::<f64>() / field_cells).sqrt()
    };
    let field_coverage =
        |slot: usize| kept.iter().map(|o| o.field_hits[slot]).sum::<usize>() as f64 / field_cells;
    let latent_coverage = kept
        .iter()
        .map(|o| o.field_hits[0] + o.field_hits[1])
        .sum::<usize>() as f64
        / (2.0 * field_cells);

    fn mean_of(vals: Vec<f64>) -> f64 {
        if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }
    let in_scores: Vec<&PredictiveScore> =
        kept.iter().filter_map(|o| o.in_score.as_ref()).collect();
    let out_scores: Vec<&PredictiveScore> =
        kept.iter().filter_map(|o| o.out_score.as_ref()).collect();

    Ok(RecoveryReport {
        parameters,
        scalar_coverage,
        growth_field_rmse: field_rmse(0),
        growth_field_coverage: field_coverage(0),
        baseline_field_rmse: field_rmse(1),
        baseline_field_coverage: field_coverage(1),
        latent_coverage,
        in_coverage: mean_of(in_scores.iter().map(|s| s.coverage).collect()),
        in_rel_mse: mean_of(in_scores.iter().map(|s| s.rel_mse).collect()),
        in_rmse_per_10k: mean_of(in_scores.iter().map(|s| s.rmse_per_10k).collect()),
        out_coverage: mean_of(out_scores.iter().map(|s| s.coverage).collect()),
        out_rel_mse: mean_of(out_scores.iter().map(|s| s.rel_mse).collect()),
        out_rmse_per_10k: mean_of(out_scores.iter().map(|s| s.rmse_per_10k).collect()),
        weight_abs_errors: outcomes
            .iter()
            .filter(|o| o.converged)
            .map(|o| o.weight_abs_err)
            .collect(),
        n_replicates: spec.n_replicates,
        n_excluded,
    })
}
