//! Convergence diagnostics, information criteria, and predictive scoring.
//!
//! Scalar convergence checks follow the rank-normalization approach of
//! Vehtari et al. (2021): chains are split in half, pooled draws are
//! replaced by normal scores computed from average ranks, and the classic
//! potential scale reduction factor / effective sample size machinery runs
//! on the transformed chains. This makes both statistics invariant to
//! monotone transformations and robust to heavy tails.
//!
//! Model comparison uses WAIC and PSIS-LOO computed from a pointwise
//! log-likelihood matrix. The PSIS smoothing fits a generalized Pareto
//! distribution to the importance-ratio tail by the Zhang–Stephens
//! posterior-mean method and replaces the tail weights with fitted
//! quantiles, reporting the shape estimate `k` as a reliability flag.

use crate::error::{Error, Result};
use crate::rng::{substream, tag};
use rand_distr::{Distribution, Poisson};
use statrs::distribution::{ContinuousCDF, Normal};

// --------------------------------------------------------------------------
// Small numeric helpers
// --------------------------------------------------------------------------

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance (denominator `n - 1`).
fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Log of the mean of exponentials, max-shifted for stability.
fn log_mean_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + (s / xs.len() as f64).ln()
}

/// Log of the sum of exponentials, max-shifted for stability.
fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

/// Linear-interpolation quantile (type 7) of a sorted slice.
pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn check_chains(chains: &[Vec<f64>]) {
    assert!(!chains.is_empty(), "need at least one chain");
    let n = chains[0].len();
    assert!(n > 0, "chains must be non-empty");
    assert!(
        chains.iter().all(|c| c.len() == n),
        "chains must have equal lengths"
    );
}

// --------------------------------------------------------------------------
// Rank normalization
// --------------------------------------------------------------------------

/// Split every chain in half (the middle draw of an odd-length chain is
/// dropped), doubling the number of chains.
fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let h = c.len() / 2;
        out.push(c[..h].to_vec());
        out.push(c[c.len() - h..].to_vec());
    }
    out
}

/// Replace pooled draws by normal scores of their average ranks
/// (fractional offset 3/8), preserving the chain structure.
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = chains[0].len();
    let total = chains.len() * n;
    let mut order: Vec<(usize, usize)> = (0..chains.len())
        .flat_map(|c| (0..n).map(move |i| (c, i)))
        .collect();
    order.sort_by(|a, b| chains[a.0][a.1].total_cmp(&chains[b.0][b.1]));

    let mut ranks = vec![vec![0.0; n]; chains.len()];
    let mut pos = 0;
    while pos < total {
        // Advance over a run of tied values and give each the mean rank.
        let v = chains[order[pos].0][order[pos].1];
        let mut end = pos + 1;
        while end < total && chains[order[end].0][order[end].1] == v {
            end += 1;
        }
        // 1-based ranks pos+1 ..= end averaged.
        let avg = (pos + 1 + end) as f64 / 2.0;
        for &(c, i) in &order[pos..end] {
            ranks[c][i] = avg;
        }
        pos = end;
    }

    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let s = total as f64;
    ranks
        .iter()
        .map(|row| {
            row.iter()
                .map(|r| normal.inverse_cdf((r - 0.375) / (s + 0.25)))
                .collect()
        })
        .collect()
}

// --------------------------------------------------------------------------
// R-hat and effective sample size
// --------------------------------------------------------------------------

/// Classic potential scale reduction factor on prepared chains.
fn rhat_classic(chains: &[Vec<f64>]) -> f64 {
    let n = chains[0].len() as f64;
    let chain_means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = mean(&chains.iter().map(|c| variance(c)).collect::<Vec<_>>());
    if w <= 0.0 || !w.is_finite() {
        return 1.0;
    }
    let b_over_n = variance(&chain_means);
    let var_plus = (n - 1.0) / n * w + b_over_n;
    (var_plus / w).sqrt()
}

/// Rank-normalized split R-hat. Values near 1 indicate the chains agree;
/// above ~1.01 they have not mixed. Constant input returns exactly 1.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    check_chains(chains);
    if chains[0].len() < 4 {
        return f64::NAN;
    }
    let split = split_chains(chains);
    let first = split[0].first().copied().unwrap_or(0.0);
    if split
        .iter()
        .all(|c| c.iter().all(|&x| x == first))
    {
        return 1.0;
    }
    rhat_classic(&rank_normalize(&split))
}

/// Mean autocovariance at `lag` across chains, each term normalized by the
/// chain length (not `n - lag`).
fn mean_autocovariance(chains: &[Vec<f64>], means: &[f64], lag: usize) -> f64 {
    let n = chains[0].len();
    let mut acc = 0.0;
    for (c, chain) in chains.iter().enumerate() {
        let m = means[c];
        let mut s = 0.0;
        for k in 0..n - lag {
            s += (chain[k] - m) * (chain[k + lag] - m);
        }
        acc += s / n as f64;
    }
    acc / chains.len() as f64
}

/// Effective sample size on prepared (split, rank-normalized) chains using
/// the combined autocorrelation estimate with Geyer's initial-positive and
/// initial-monotone truncation.
fn ess_geyer(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains[0].len();
    let total = (m * n) as f64;
    if n < 4 {
        return total;
    }

    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let acov0 = {
        let mut acc = 0.0;
        for (c, chain) in chains.iter().enumerate() {
            let mu = means[c];
            acc += chain.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
        }
        acc / m as f64
    };
    let mean_var = acov0 * n as f64 / (n as f64 - 1.0);
    let var_plus = mean_var * (n as f64 - 1.0) / n as f64
        + if m > 1 { variance(&means) } else { 0.0 };
    if var_plus <= 0.0 || !var_plus.is_finite() {
        return total;
    }

    let mut rho = vec![0.0; n];
    let mut rho_even = 1.0;
    rho[0] = 1.0;
    let mut rho_odd = 1.0 - (mean_var - mean_autocovariance(chains, &means, 1)) / var_plus;
    rho[1] = rho_odd;

    // Initial positive sequence: keep adding lag pairs while their sum is
    // positive.
    let mut s = 1;
    while s < n - 4 && rho_even + rho_odd > 0.0 {
        rho_even = 1.0 - (mean_var - mean_autocovariance(chains, &means, s + 1)) / var_plus;
        rho_odd = 1.0 - (mean_var - mean_autocovariance(chains, &means, s + 2)) / var_plus;
        if rho_even + rho_odd >= 0.0 {
            rho[s + 1] = rho_even;
            rho[s + 2] = rho_odd;
        }
        s += 2;
    }
    let max_s = s;
    if rho_even > 0.0 {
        rho[max_s + 1] = rho_even;
    }

    // Initial monotone sequence: enforce non-increasing pair sums.
    let mut ss = 1;
    while ss + 3 <= max_s {
        if rho[ss + 1] + rho[ss + 2] > rho[ss - 1] + rho[ss] {
            rho[ss + 1] = (rho[ss - 1] + rho[ss]) / 2.0;
            rho[ss + 2] = rho[ss + 1];
        }
        ss += 2;
    }

    let tau = -1.0 + 2.0 * rho[..max_s].iter().sum::<f64>() + rho[max_s + 1];
    let ess = total / tau;
    if !ess.is_finite() || ess < 0.0 {
        return total;
    }
    ess.min(total * total.log10())
}

/// Bulk effective sample size on rank-normalized split chains. Constant
/// input returns the total draw count.
pub fn ess_bulk(chains: &[Vec<f64>]) -> f64 {
    check_chains(chains);
    let total = (chains.len() * chains[0].len()) as f64;
    if chains[0].len() < 8 {
        return total;
    }
    let split = split_chains(chains);
    let first = split[0].first().copied().unwrap_or(0.0);
    if split
        .iter()
        .all(|c| c.iter().all(|&x| x == first))
    {
        return total;
    }
    ess_geyer(&rank_normalize(&split))
}

// --------------------------------------------------------------------------
// Posterior summaries
// --------------------------------------------------------------------------

/// Pooled summary of one scalar quantity across chains.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarSummary {
    pub mean: f64,
    pub sd: f64,
    /// One value per requested probability, in the same order.
    pub quantiles: Vec<f64>,
    pub rhat: f64,
    pub ess_bulk: f64,
}

/// Summarize one scalar across chains: pooled mean, standard deviation,
/// and interpolated quantiles at `probs`, plus split R-hat and bulk ESS.
pub fn summarize(chains: &[Vec<f64>], probs: &[f64]) -> ScalarSummary {
    check_chains(chains);
    let mut pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    let m = mean(&pooled);
    let sd = if pooled.len() > 1 {
        variance(&pooled).sqrt()
    } else {
        0.0
    };
    pooled.sort_by(f64::total_cmp);
    let quantiles = probs.iter().map(|&p| quantile_sorted(&pooled, p)).collect();
    ScalarSummary {
        mean: m,
        sd,
        quantiles,
        rhat: split_rhat(chains),
        ess_bulk: ess_bulk(chains),
    }
}

// --------------------------------------------------------------------------
// WAIC
// --------------------------------------------------------------------------

/// Widely applicable information criterion, on the deviance scale
/// (smaller is better).
#[derive(Debug, Clone, PartialEq)]
pub struct WaicResult {
    pub waic: f64,
    pub lppd: f64,
    pub p_waic: f64,
    pub se: f64,
    /// Per-point elpd contributions `lppd_i - p_i`.
    pub pointwise_elpd: Vec<f64>,
    pub pointwise_p: Vec<f64>,
}

/// Compute WAIC from a pointwise log-likelihood matrix: `log_lik[s][i]` is
/// the log-likelihood of point `i` under posterior draw `s`.
pub fn waic(log_lik: &[Vec<f64>]) -> Result<WaicResult> {
    let (n_draws, n_points) = check_loglik(log_lik)?;
    let mut pointwise_elpd = Vec::with_capacity(n_points);
    let mut pointwise_p = Vec::with_capacity(n_points);
    let mut col = vec![0.0; n_draws];
    let mut lppd = 0.0;
    let mut p_waic = 0.0;
    for i in 0..n_points {
        for (s, row) in log_lik.iter().enumerate() {
            col[s] = row[i];
        }
        let lppd_i = log_mean_exp(&col);
        let p_i = variance(&col);
        lppd += lppd_i;
        p_waic += p_i;
        pointwise_elpd.push(lppd_i - p_i);
        pointwise_p.push(p_i);
    }
    let deviances: Vec<f64> = pointwise_elpd.iter().map(|e| -2.0 * e).collect();
    let se = (n_points as f64 * variance(&deviances)).sqrt();
    Ok(WaicResult {
        waic: -2.0 * (lppd - p_waic),
        lppd,
        p_waic,
        se,
        pointwise_elpd,
        pointwise_p,
    })
}

fn check_loglik(log_lik: &[Vec<f64>]) -> Result<(usize, usize)> {
    if log_lik.len() < 2 {
        return Err(Error::Validation(
            "pointwise log-likelihood needs at least two draws".into(),
        ));
    }
    let n_points = log_lik[0].len();
    if n_points == 0 {
        return Err(Error::Validation(
            "pointwise log-likelihood has no points".into(),
        ));
    }
    if log_lik.iter().any(|row| row.len() != n_points) {
        return Err(Error::DimensionMismatch {
            context: "log-likelihood matrix rows",
            expected: n_points,
            got: log_lik.iter().map(|r| r.len()).find(|&l| l != n_points).unwrap_or(0),
        });
    }
    Ok((log_lik.len(), n_points))
}

// --------------------------------------------------------------------------
// PSIS-LOO
// --------------------------------------------------------------------------

/// Pareto-smoothed importance-sampling leave-one-out cross-validation
/// (elpd scale; larger is better).
#[derive(Debug, Clone, PartialEq)]
pub struct LooResult {
    pub elpd_loo: f64,
    pub p_loo: f64,
    /// `-2 * elpd_loo`, the deviance-scale value.
    pub looic: f64,
    pub se: f64,
    pub lppd: f64,
    pub pointwise_elpd: Vec<f64>,
    /// Generalized Pareto shape estimate per point; values above 0.7 mean
    /// the importance weights are unreliable.
    pub pareto_k: Vec<f64>,
    pub n_high_k: usize,
    /// True when there were too few draws to smooth and plain importance
    /// sampling was used instead.
    pub plain_is_fallback: bool,
}

/// Threshold above which a Pareto shape estimate is flagged.
pub const PARETO_K_THRESHOLD: f64 = 0.7;

/// Cheapest reliable tail size; below `50` draws smoothing is skipped.
const MIN_DRAWS_FOR_SMOOTHING: usize = 50;

/// Compute PSIS-LOO from a pointwise log-likelihood matrix (same layout as
/// [`waic`]).
pub fn psis_loo(log_lik: &[Vec<f64>]) -> Result<LooResult> {
    let (n_draws, n_points) = check_loglik(log_lik)?;
    let plain = n_draws < MIN_DRAWS_FOR_SMOOTHING;
    if plain {
        log::warn!(
            "only {n_draws} draws available; LOO falls back to plain importance \
             sampling without Pareto smoothing"
        );
    }

    let mut pointwise_elpd = Vec::with_capacity(n_points);
    let mut pareto_k = Vec::with_capacity(n_points);
    let mut lppd = 0.0;
    let mut ll = vec![0.0; n_draws];
    for i in 0..n_points {
        for (s, row) in log_lik.iter().enumerate() {
            ll[s] = row[i];
        }
        lppd += log_mean_exp(&ll);

        // Log importance ratios for leaving point i out.
        let mut lw: Vec<f64> = ll.iter().map(|v| -v).collect();
        let spread = {
            let lo = lw.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            hi - lo
        };
        let k = if spread < 1e-12 {
            // Constant likelihood: uniform weights, nothing to smooth.
            0.0
        } else if plain {
            f64::NAN
        } else {
            smooth_tail_in_place(&mut lw)
        };
        pareto_k.push(k);

        let num: Vec<f64> = lw.iter().zip(&ll).map(|(w, l)| w + l).collect();
        pointwise_elpd.push(log_sum_exp(&num) - log_sum_exp(&lw));
    }

    let elpd_loo: f64 = pointwise_elpd.iter().sum();
    let deviances: Vec<f64> = pointwise_elpd.iter().map(|e| -2.0 * e).collect();
    let se = if n_points > 1 {
        (n_points as f64 * variance(&deviances)).sqrt()
    } else {
        0.0
    };
    let n_high_k = pareto_k
        .iter()
        .filter(|k| k.is_finite() && **k > PARETO_K_THRESHOLD)
        .count();
    if n_high_k > 0 {
        log::warn!(
            "{n_high_k} of {n_points} points have Pareto k above \
             {PARETO_K_THRESHOLD}; their LOO contributions are unreliable"
        );
    }
    Ok(LooResult {
        elpd_loo,
        p_loo: lppd - elpd_loo,
        looic: -2.0 * elpd_loo,
        se,
        lppd,
        pointwise_elpd,
        pareto_k,
        n_high_k,
        plain_is_fallback: plain,
    })
}

/// Smooth the largest importance weights in place by fitted generalized
/// Pareto quantiles; returns the (regularized) shape estimate.
fn smooth_tail_in_place(lw: &mut [f64]) -> f64 {
    let s = lw.len();
    let tail_len = ((0.2 * s as f64).ceil() as usize).max(5);
    if tail_len >= s {
        return f64::NAN;
    }

    // Stabilize on the max and work with the weight scale.
    let max_lw = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for w in lw.iter_mut() {
        *w -= max_lw;
    }

    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| lw[a].total_cmp(&lw[b]));
    let cutoff_lw = lw[order[s - tail_len - 1]];
    let cutoff = cutoff_lw.exp();

    // Exceedances over the cutoff, ascending.
    let tail_idx = &order[s - tail_len..];
    let exceedances: Vec<f64> = tail_idx.iter().map(|&j| lw[j].exp() - cutoff).collect();
    if exceedances.last().copied().unwrap_or(0.0) <= 0.0 {
        // Ties throughout the tail; nothing to fit.
        for w in lw.iter_mut() {
            *w += max_lw;
        }
        return 0.0;
    }

    let (k, sigma) = gpd_fit(&exceedances);
    if k.is_finite() && sigma > 0.0 {
        for (z, &j) in tail_idx.iter().enumerate() {
            let p = (z as f64 + 0.5) / tail_len as f64;
            let q = gpd_quantile(p, k, sigma) + cutoff;
            // Truncate at the raw maximum weight (1.0 after shifting).
            lw[j] = q.ln().min(0.0);
        }
    }

    for w in lw.iter_mut() {
        *w += max_lw;
    }
    k
}

/// Zhang–Stephens posterior-mean fit of the generalized Pareto shape and
/// scale to positive exceedances (must be sorted ascending). The shape is
/// regularized toward 0.5 by a weak prior.
fn gpd_fit(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    let n_f = n as f64;
    let x_max = x[n - 1];
    let x_quart = x[(n_f / 4.0 + 0.5).floor() as usize - 1].max(f64::MIN_POSITIVE);
    let m = 30 + (n_f.sqrt().floor() as usize);

    let mut theta = Vec::with_capacity(m);
    let mut log_lik = Vec::with_capacity(m);
    for j in 1..=m {
        let t = 1.0 / x_max + (1.0 - (m as f64 / (j as f64 - 0.5)).sqrt()) / (3.0 * x_quart);
        let k_t = x.iter().map(|&v| (-t * v).ln_1p()).sum::<f64>() / n_f;
        let l = n_f * ((-t / k_t).ln() - k_t - 1.0);
        theta.push(t);
        log_lik.push(if l.is_finite() { l } else { f64::NEG_INFINITY });
    }
    let lse = log_sum_exp(&log_lik);
    let theta_hat: f64 = theta
        .iter()
        .zip(&log_lik)
        .map(|(t, l)| t * (l - lse).exp())
        .sum();

    let k_hat = x.iter().map(|&v| (-theta_hat * v).ln_1p()).sum::<f64>() / n_f;
    let sigma = -k_hat / theta_hat;
    // Weak prior: 10 pseudo-observations at k = 0.5.
    let k_reg = (k_hat * n_f + 5.0) / (n_f + 10.0);
    (k_reg, sigma)
}

/// Quantile of the generalized Pareto distribution with location 0.
fn gpd_quantile(p: f64, k: f64, sigma: f64) -> f64 {
    if k.abs() < 1e-8 {
        -sigma * (-p).ln_1p()
    } else {
        sigma * ((-k) * (-p).ln_1p()).exp_m1() / k
    }
}

// --------------------------------------------------------------------------
// Model comparison
// --------------------------------------------------------------------------

/// Paired difference of two pointwise criteria over the same points.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonResult {
    /// `sum(a) - sum(b)`.
    pub diff: f64,
    /// Paired standard error of the difference.
    pub se_diff: f64,
}

/// Compare two models by their pointwise contributions (e.g. elpd per
/// point). Both slices must align on the same points.
pub fn compare(pointwise_a: &[f64], pointwise_b: &[f64]) -> Result<ComparisonResult> {
    if pointwise_a.len() != pointwise_b.len() {
        return Err(Error::DimensionMismatch {
            context: "pointwise comparison",
            expected: pointwise_a.len(),
            got: pointwise_b.len(),
        });
    }
    if pointwise_a.len() < 2 {
        return Err(Error::Validation(
            "need at least two points to compare models".into(),
        ));
    }
    let diffs: Vec<f64> = pointwise_a
        .iter()
        .zip(pointwise_b)
        .map(|(a, b)| a - b)
        .collect();
    let n = diffs.len() as f64;
    Ok(ComparisonResult {
        diff: diffs.iter().sum(),
        se_diff: (n * variance(&diffs)).sqrt(),
    })
}

// --------------------------------------------------------------------------
// Predictive scoring
// --------------------------------------------------------------------------

/// Held-out (or in-sample) predictive performance for a set of cells.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveScore {
    /// Mean squared error of the posterior-mean intensity, relative to the
    /// variance of the observations.
    pub rel_mse: f64,
    /// Root mean squared error expressed as a rate per 10,000 population.
    pub rmse_per_10k: f64,
    /// Fraction of observations inside the central 95% posterior
    /// predictive interval.
    pub coverage: f64,
    pub mean_interval_width: f64,
    pub n_cells: usize,
}

/// Score posterior predictions against observed counts.
///
/// `lambda_draws[s][c]` is the intensity of cell `c` under posterior draw
/// `s`; `y` and `population` give the observed count and population of
/// each cell. Per cell, one predictive count is drawn per intensity draw
/// (on a deterministic substream of `seed`), and the central 95% interval
/// is read off the order statistics.
pub fn predictive_score(
    lambda_draws: &[Vec<f64>],
    y: &[u64],
    population: &[f64],
    seed: u64,
) -> Result<PredictiveScore> {
    if lambda_draws.is_empty() {
        return Err(Error::Validation("no posterior draws to score".into()));
    }
    let n_cells = y.len();
    if n_cells == 0 {
        return Err(Error::Validation("no cells to score".into()));
    }
    if population.len() != n_cells {
        return Err(Error::DimensionMismatch {
            context: "predictive scoring population",
            expected: n_cells,
            got: population.len(),
        });
    }
    if lambda_draws.iter().any(|row| row.len() != n_cells) {
        return Err(Error::DimensionMismatch {
            context: "predictive scoring intensity draws",
            expected: n_cells,
            got: lambda_draws
                .iter()
                .map(|r| r.len())
                .find(|&l| l != n_cells)
                .unwrap_or(0),
        });
    }
    let n_draws = lambda_draws.len();

    let mut sq_err_sum = 0.0;
    let mut sq_rate_err_sum = 0.0;
    let mut covered = 0usize;
    let mut width_sum = 0.0;
    let y_mean = y.iter().map(|&v| v as f64).sum::<f64>() / n_cells as f64;
    let mut denom = 0.0;

    let mut samples = vec![0u64; n_draws];
    for c in 0..n_cells {
        let mut rng = substream(seed, &[tag::PREDICTIVE, c as u64]);
        for (s, row) in lambda_draws.iter().enumerate() {
            let lam = row[c];
            if !(lam >= 0.0 && lam.is_finite()) {
                return Err(Error::NumericDomain(format!(
                    "non-finite or negative intensity {lam} for cell {c}"
                )));
            }
            samples[s] = if lam == 0.0 {
                0
            } else {
                let pois = Poisson::new(lam).map_err(|e| {
                    Error::NumericDomain(format!("Poisson({lam}) for cell {c}: {e}"))
                })?;
                pois.sample(&mut rng) as u64
            };
        }
        samples.sort_unstable();
        let lo = samples[order_stat_index(0.025, n_draws)];
        let hi = samples[order_stat_index(0.975, n_draws)];
        if y[c] >= lo && y[c] <= hi {
            covered += 1;
        }
        width_sum += (hi - lo) as f64;

        let pred = lambda_draws.iter().map(|row| row[c]).sum::<f64>() / n_draws as f64;
        let err = pred - y[c] as f64;
        sq_err_sum += err * err;
        sq_rate_err_sum += (err * 1e4 / population[c]).powi(2);
        let d = y[c] as f64 - y_mean;
        denom += d * d;
    }

    let rel_mse = if denom > 0.0 {
        sq_err_sum / denom
    } else if sq_err_sum == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(PredictiveScore {
        rel_mse,
        rmse_per_10k: (sq_rate_err_sum / n_cells as f64).sqrt(),
        coverage: covered as f64 / n_cells as f64,
        mean_interval_width: width_sum / n_cells as f64,
        n_cells,
    })
}

/// Index of the empirical `p`-quantile among `n` sorted samples
/// (`ceil(p n) - 1`, clamped).
fn order_stat_index(p: f64, n: usize) -> usize {
    let idx = (p * n as f64).ceil() as isize - 1;
    idx.clamp(0, n as isize - 1) as usize
}
