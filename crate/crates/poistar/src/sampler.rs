//! Self-contained No-U-Turn sampler.
//!
//! Multinomial NUTS with a diagonal metric, following the scheme used by
//! Stan (Hoffman & Gelman 2014; Betancourt 2017): trajectories are doubled
//! until a generalized U-turn criterion fails, candidate points are drawn
//! multinomially by Boltzmann weight with biased progressive sampling
//! toward new subtrees, step size is tuned by Nesterov dual averaging to a
//! target acceptance statistic, and the metric is estimated from warmup
//! draws in an expanding schedule of memoryless windows.
//!
//! The only interface a model must implement is [`Target`]: dimension plus
//! joint log-density and gradient on an unconstrained space. A target may
//! return `-inf` (with zeroed gradient) for an invalid point; such leaves
//! are treated as divergent and the trajectory stops there.
//!
//! Chains run independently (in parallel when threads are available) on
//! deterministic per-chain RNG substreams, so results are reproducible for
//! a given seed regardless of thread scheduling.

use crate::error::{Error, Result};
use crate::rng::{substream, tag};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

/// Energy error above which a leapfrog step is declared divergent.
const MAX_DELTA_H: f64 = 1000.0;

/// A differentiable unnormalized log-density.
pub trait Target {
    fn dim(&self) -> usize;
    /// Write the gradient into `grad` and return the log-density. Must
    /// return `-inf` with a zeroed gradient for invalid points rather than
    /// panicking or returning NaN.
    fn logp_grad(&mut self, z: &[f64], grad: &mut [f64]) -> f64;
}

impl Target for crate::model::Posterior<'_> {
    fn dim(&self) -> usize {
        crate::model::Posterior::dim(self)
    }

    fn logp_grad(&mut self, z: &[f64], grad: &mut [f64]) -> f64 {
        crate::model::Posterior::logp_grad(self, z, grad)
    }
}

/// Sampler settings. `iterations` is the total per chain, warmup included;
/// only post-warmup draws are kept, every `thin`-th one.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub n_chains: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub thin: usize,
    pub max_treedepth: usize,
    /// Dual-averaging target for the acceptance statistic.
    pub target_accept: f64,
    /// Fixed initial step size; `None` finds one by doubling/halving.
    pub step_size: Option<f64>,
    /// Initial positions are drawn uniformly from
    /// `(-init_jitter, init_jitter)` in each coordinate. The draw is
    /// retried — with geometrically shrinking jitter — until it lands on a
    /// point the leapfrog integrator can actually use (finite gradient,
    /// energy scale resolvable in double precision).
    pub init_jitter: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_chains: 4,
            iterations: 2000,
            warmup: 1000,
            thin: 1,
            max_treedepth: 10,
            target_accept: 0.8,
            step_size: None,
            init_jitter: 2.0,
            seed: 1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 {
            return Err(Error::Config("n_chains must be at least 1".into()));
        }
        if self.iterations <= self.warmup {
            return Err(Error::Config(format!(
                "iterations ({}) must exceed warmup ({})",
                self.iterations, self.warmup
            )));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        if self.max_treedepth == 0 || self.max_treedepth > 16 {
            return Err(Error::Config(format!(
                "max_treedepth must be in 1..=16, got {}",
                self.max_treedepth
            )));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config(format!(
                "target_accept must be in (0, 1), got {}",
                self.target_accept
            )));
        }
        if let Some(e) = self.step_size {
            if !(e > 0.0 && e.is_finite()) {
                return Err(Error::Config(format!(
                    "step_size must be positive and finite, got {e}"
                )));
            }
        }
        if !(self.init_jitter >= 0.0 && self.init_jitter.is_finite()) {
            return Err(Error::Config(format!(
                "init_jitter must be non-negative and finite, got {}",
                self.init_jitter
            )));
        }
        Ok(())
    }

    /// Number of kept draws per chain.
    pub fn kept_per_chain(&self) -> usize {
        let post = self.iterations - self.warmup;
        post.div_ceil(self.thin)
    }
}

/// Kept draws and telemetry from one chain.
#[derive(Debug, Clone)]
pub struct ChainDraws {
    /// Kept unconstrained draws, one `Vec<f64>` of length `dim` each.
    pub draws: Vec<Vec<f64>>,
    /// Log-density of each kept draw.
    pub logp: Vec<f64>,
    /// Hamiltonian at selection for each kept draw.
    pub energy: Vec<f64>,
    pub accept_stat: Vec<f64>,
    pub treedepth: Vec<usize>,
    pub n_leapfrog: Vec<usize>,
    pub divergent: Vec<bool>,
    /// Post-warmup totals over all iterations (thinned or not).
    pub n_divergent: usize,
    pub n_max_treedepth: usize,
    /// Adapted step size and inverse metric diagonal.
    pub step_size: f64,
    pub inv_mass: Vec<f64>,
}

/// Draws from all chains.
#[derive(Debug, Clone)]
pub struct Draws {
    pub dim: usize,
    pub chains: Vec<ChainDraws>,
}

impl Draws {
    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn kept_per_chain(&self) -> usize {
        self.chains.first().map_or(0, |stats| stats.draws.len())
    }

    /// One unconstrained coordinate as per-chain series.
    pub fn coordinate(&self, k: usize) -> Vec<Vec<f64>> {
        self.chains
            .iter()
            .map(|c| c.draws.iter().map(|d| d[k]).collect())
            .collect()
    }

    /// Apply `f` to every kept draw, preserving chain structure.
    pub fn map_draws<R>(&self, mut f: impl FnMut(&[f64]) -> R) -> Vec<Vec<R>> {
        self.chains
            .iter()
            .map(|c| c.draws.iter().map(|d| f(d)).collect())
            .collect()
    }

    pub fn total_divergent(&self) -> usize {
        self.chains.iter().map(|c| c.n_divergent).sum()
    }

    pub fn total_max_treedepth(&self) -> usize {
        self.chains.iter().map(|c| c.n_max_treedepth).sum()
    }
}

/// Run all chains of the sampler. The factory builds one [`Target`] per
/// chain (index passed in), letting each chain own its scratch space.
pub fn sample<T, F>(factory: F, config: &SamplerConfig) -> Result<Draws>
where
    T: Target,
    F: Fn(usize) -> Result<T> + Sync,
{
    config.validate()?;
    let chains: Vec<Result<ChainDraws>> = (0..config.n_chains)
        .into_par_iter()
        .map(|chain| {
            let mut target = factory(chain)?;
            run_chain(&mut target, config, chain)
        })
        .collect();
    let mut out = Vec::with_capacity(chains.len());
    let mut dim = 0;
    for c in chains {
        let c = c?;
        dim = c.inv_mass.len();
        out.push(c);
    }
    Ok(Draws { dim, chains: out })
}

// --------------------------------------------------------------------------
// Phase-space point
// --------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Point {
    z: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

impl Point {
    fn copy_from(&mut self, other: &Point) {
        self.z.copy_from_slice(&other.z);
        self.p.copy_from_slice(&other.p);
        self.grad.copy_from_slice(&other.grad);
        self.logp = other.logp;
    }
}

fn hamiltonian(point: &Point, inv_mass: &[f64]) -> f64 {
    let mut kinetic = 0.0;
    for (p, m) in point.p.iter().zip(inv_mass) {
        kinetic += p * p * m;
    }
    let h = -point.logp + 0.5 * kinetic;
    if h.is_nan() {
        f64::INFINITY
    } else {
        h
    }
}

/// One leapfrog step with (possibly negative) step `eps`.
fn leapfrog<T: Target>(target: &mut T, inv_mass: &[f64], eps: f64, point: &mut Point) {
    for (p, g) in point.p.iter_mut().zip(&point.grad) {
        *p += 0.5 * eps * g;
    }
    for ((z, p), m) in point.z.iter_mut().zip(&point.p).zip(inv_mass) {
        *z += eps * m * p;
    }
    point.logp = target.logp_grad(&point.z, &mut point.grad);
    for (p, g) in point.p.iter_mut().zip(&point.grad) {
        *p += 0.5 * eps * g;
    }
}

fn sample_momentum(rng: &mut ChaCha8Rng, inv_mass: &[f64], p: &mut [f64]) {
    for (pi, m) in p.iter_mut().zip(inv_mass) {
        let n: f64 = rng.sample(StandardNormal);
        *pi = n / m.sqrt();
    }
}

/// Velocity `M^{-1} p`, the "sharp" momentum of the U-turn criterion.
fn p_sharp(point: &Point, inv_mass: &[f64], out: &mut [f64]) {
    for ((o, p), m) in out.iter_mut().zip(&point.p).zip(inv_mass) {
        *o = p * m;
    }
}

/// Generalized U-turn criterion: continue while the summed momentum has
/// positive projection on the velocity at both trajectory ends.
fn criterion(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    let mut fwd = 0.0;
    let mut bck = 0.0;
    for i in 0..rho.len() {
        fwd += rho[i] * p_sharp_plus[i];
        bck += rho[i] * p_sharp_minus[i];
    }
    fwd > 0.0 && bck > 0.0
}

// --------------------------------------------------------------------------
// Tree building
// --------------------------------------------------------------------------

struct TreeCtx<'t, T> {
    target: &'t mut T,
    inv_mass: &'t [f64],
    eps: f64,
    h0: f64,
    max_delta_h: f64,
    divergent: bool,
    n_leapfrog: usize,
    sum_metro_prob: f64,
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Recursively extend the trajectory by `2^depth` leapfrog steps in the
/// direction of `ctx.eps`'s sign. Starting point is `z` (mutated to the new
/// trajectory end). Returns whether the subtree is valid; fills the
/// candidate point, boundary (sharp) momenta, and summed momentum, and
/// accumulates the multinomial log-weight.
#[allow(clippy::too_many_arguments)]
fn build_tree<T: Target>(
    ctx: &mut TreeCtx<'_, T>,
    depth: usize,
    z: &mut Point,
    z_propose: &mut Point,
    p_sharp_beg: &mut [f64],
    p_sharp_end: &mut [f64],
    rho: &mut [f64],
    p_beg: &mut [f64],
    p_end: &mut [f64],
    log_sum_weight: &mut f64,
    rng: &mut ChaCha8Rng,
) -> bool {
    if depth == 0 {
        leapfrog(ctx.target, ctx.inv_mass, ctx.eps, z);
        ctx.n_leapfrog += 1;

        let h = hamiltonian(z, ctx.inv_mass);
        if h - ctx.h0 > ctx.max_delta_h {
            ctx.divergent = true;
        }
        *log_sum_weight = log_sum_exp(*log_sum_weight, ctx.h0 - h);
        ctx.sum_metro_prob += if ctx.h0 - h > 0.0 {
            1.0
        } else {
            (ctx.h0 - h).exp()
        };

        z_propose.copy_from(z);
        p_sharp(z, ctx.inv_mass, p_sharp_beg);
        p_sharp_end.copy_from_slice(p_sharp_beg);
        for (r, p) in rho.iter_mut().zip(&z.p) {
            *r += p;
        }
        p_beg.copy_from_slice(&z.p);
        p_end.copy_from_slice(&z.p);
        return !ctx.divergent;
    }

    let dim = z.z.len();

    // Initial (inner) subtree.
    let mut log_sum_weight_init = f64::NEG_INFINITY;
    let mut p_init_end = vec![0.0; dim];
    let mut p_sharp_init_end = vec![0.0; dim];
    let mut rho_init = vec![0.0; dim];
    let valid_init = build_tree(
        ctx,
        depth - 1,
        z,
        z_propose,
        p_sharp_beg,
        &mut p_sharp_init_end,
        &mut rho_init,
        p_beg,
        &mut p_init_end,
        &mut log_sum_weight_init,
        rng,
    );
    if !valid_init {
        return false;
    }

    // Final (outer) subtree.
    let mut z_propose_final = z.clone();
    let mut log_sum_weight_final = f64::NEG_INFINITY;
    let mut p_final_beg = vec![0.0; dim];
    let mut p_sharp_final_beg = vec![0.0; dim];
    let mut rho_final = vec![0.0; dim];
    let valid_final = build_tree(
        ctx,
        depth - 1,
        z,
        &mut z_propose_final,
        &mut p_sharp_final_beg,
        p_sharp_end,
        &mut rho_final,
        &mut p_final_beg,
        p_end,
        &mut log_sum_weight_final,
        rng,
    );
    if !valid_final {
        return false;
    }

    // Multinomial selection between the two halves.
    let log_sum_weight_subtree = log_sum_exp(log_sum_weight_init, log_sum_weight_final);
    *log_sum_weight = log_sum_exp(*log_sum_weight, log_sum_weight_subtree);
    if log_sum_weight_final > log_sum_weight_subtree {
        z_propose.copy_from(&z_propose_final);
    } else {
        let accept_prob = (log_sum_weight_final - log_sum_weight_subtree).exp();
        if rng.random::<f64>() < accept_prob {
            z_propose.copy_from(&z_propose_final);
        }
    }

    for i in 0..dim {
        rho[i] += rho_init[i] + rho_final[i];
    }

    // U-turn over the merged subtree...
    let mut persist = criterion(p_sharp_beg, p_sharp_end, rho);
    // ...and across each junction of the halves.
    let mut rho_extended = vec![0.0; dim];
    for i in 0..dim {
        rho_extended[i] = rho_init[i] + p_final_beg[i];
    }
    persist = persist && criterion(p_sharp_beg, &p_sharp_final_beg, &rho_extended);
    for i in 0..dim {
        rho_extended[i] = rho_final[i] + p_init_end[i];
    }
    persist = persist && criterion(&p_sharp_init_end, p_sharp_end, &rho_extended);

    persist
}

struct TransitionInfo {
    depth: usize,
    n_leapfrog: usize,
    divergent: bool,
    accept_stat: f64,
    energy: f64,
}

/// One NUTS transition; `state` is replaced by the new draw (with its
/// log-density and gradient cached).
fn transition<T: Target>(
    target: &mut T,
    inv_mass: &[f64],
    eps: f64,
    max_depth: usize,
    state: &mut Point,
    rng: &mut ChaCha8Rng,
) -> TransitionInfo {
    let dim = state.z.len();
    sample_momentum(rng, inv_mass, &mut state.p);
    let h0 = hamiltonian(state, inv_mass);

    let mut z_fwd = state.clone();
    let mut z_bck = state.clone();
    let mut z_sample = state.clone();
    let mut z_propose = state.clone();

    let mut p_sharp_init = vec![0.0; dim];
    p_sharp(state, inv_mass, &mut p_sharp_init);

    // Momentum (raw and sharp) at the four relevant boundaries: the two
    // ends of the whole trajectory and the two ends facing the most recent
    // junction.
    let mut p_fwd_fwd = state.p.clone();
    let mut p_sharp_fwd_fwd = p_sharp_init.clone();
    let mut p_fwd_bck = state.p.clone();
    let mut p_sharp_fwd_bck = p_sharp_init.clone();
    let mut p_bck_fwd = state.p.clone();
    let mut p_sharp_bck_fwd = p_sharp_init.clone();
    let mut p_bck_bck = state.p.clone();
    let mut p_sharp_bck_bck = p_sharp_init;

    let mut rho = state.p.clone();
    let mut log_sum_weight = 0.0;
    let mut depth = 0;

    let mut ctx = TreeCtx {
        target,
        inv_mass,
        eps,
        h0,
        max_delta_h: MAX_DELTA_H,
        divergent: false,
        n_leapfrog: 0,
        sum_metro_prob: 0.0,
    };

    while depth < max_depth {
        let mut rho_fwd = vec![0.0; dim];
        let mut rho_bck = vec![0.0; dim];
        let mut log_sum_weight_subtree = f64::NEG_INFINITY;

        let valid_subtree = if rng.random::<f64>() > 0.5 {
            // Extend forward; the old tree occupies the backward side.
            rho_bck.copy_from_slice(&rho);
            p_bck_fwd.copy_from_slice(&p_fwd_fwd);
            p_sharp_bck_fwd.copy_from_slice(&p_sharp_fwd_fwd);
            ctx.eps = eps;
            build_tree(
                &mut ctx,
                depth,
                &mut z_fwd,
                &mut z_propose,
                &mut p_sharp_fwd_bck,
                &mut p_sharp_fwd_fwd,
                &mut rho_fwd,
                &mut p_fwd_bck,
                &mut p_fwd_fwd,
                &mut log_sum_weight_subtree,
                rng,
            )
        } else {
            // Extend backward; the old tree occupies the forward side.
            rho_fwd.copy_from_slice(&rho);
            p_fwd_bck.copy_from_slice(&p_bck_bck);
            p_sharp_fwd_bck.copy_from_slice(&p_sharp_bck_bck);
            ctx.eps = -eps;
            build_tree(
                &mut ctx,
                depth,
                &mut z_bck,
                &mut z_propose,
                &mut p_sharp_bck_fwd,
                &mut p_sharp_bck_bck,
                &mut rho_bck,
                &mut p_bck_fwd,
                &mut p_bck_bck,
                &mut log_sum_weight_subtree,
                rng,
            )
        };

        if !valid_subtree {
            break;
        }
        depth += 1;

        // Biased progressive sampling toward the new subtree.
        if log_sum_weight_subtree > log_sum_weight {
            z_sample.copy_from(&z_propose);
        } else {
            let accept_prob = (log_sum_weight_subtree - log_sum_weight).exp();
            if rng.random::<f64>() < accept_prob {
                z_sample.copy_from(&z_propose);
            }
        }
        log_sum_weight = log_sum_exp(log_sum_weight, log_sum_weight_subtree);

        for i in 0..dim {
            rho[i] = rho_bck[i] + rho_fwd[i];
        }

        // U-turn over the whole trajectory...
        let mut persist = criterion(&p_sharp_bck_bck, &p_sharp_fwd_fwd, &rho);
        // ...and across the junction in either orientation.
        let mut rho_extended = vec![0.0; dim];
        for i in 0..dim {
            rho_extended[i] = rho_bck[i] + p_fwd_bck[i];
        }
        persist = persist && criterion(&p_sharp_bck_bck, &p_sharp_fwd_bck, &rho_extended);
        for i in 0..dim {
            rho_extended[i] = rho_fwd[i] + p_bck_fwd[i];
        }
        persist = persist && criterion(&p_sharp_bck_fwd, &p_sharp_fwd_fwd, &rho_extended);

        if !persist {
            break;
        }
    }

    let accept_stat = if ctx.n_leapfrog > 0 {
        ctx.sum_metro_prob / ctx.n_leapfrog as f64
    } else {
        0.0
    };
    let divergent = ctx.divergent;
    let n_leapfrog = ctx.n_leapfrog;
    let energy = hamiltonian(&z_sample, inv_mass);
    state.copy_from(&z_sample);

    TransitionInfo {
        depth,
        n_leapfrog,
        divergent,
        accept_stat,
        energy,
    }
}

// --------------------------------------------------------------------------
// Adaptation
// --------------------------------------------------------------------------

/// Nesterov dual averaging of `ln(step size)`.
struct DualAveraging {
    mu: f64,
    delta: f64,
    gamma: f64,
    t0: f64,
    kappa: f64,
    counter: u64,
    s_bar: f64,
    x_bar: f64,
}

impl DualAveraging {
    fn new(target_accept: f64, eps: f64) -> Self {
        DualAveraging {
            mu: (10.0 * eps).ln(),
            delta: target_accept,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
            counter: 0,
            s_bar: 0.0,
            x_bar: 0.0,
        }
    }

    fn restart(&mut self, eps: f64) {
        self.mu = (10.0 * eps).ln();
        self.counter = 0;
        self.s_bar = 0.0;
        self.x_bar = 0.0;
    }

    fn learn(&mut self, accept_stat: f64) -> f64 {
        let stat = accept_stat.min(1.0);
        self.counter += 1;
        let count = self.counter as f64;
        let eta = 1.0 / (count + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - stat);
        let x = self.mu - self.s_bar * count.sqrt() / self.gamma;
        let x_eta = count.powf(-self.kappa);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    fn completed(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Expanding memoryless windows for metric estimation: an initial buffer
/// of fast (step-size-only) adaptation, doubling covariance windows, and a
/// terminal fast buffer.
struct WarmupSchedule {
    warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    next_window: usize,
    counter: usize,
    enabled: bool,
}

impl WarmupSchedule {
    fn new(warmup: usize) -> Self {
        let mut s = WarmupSchedule {
            warmup,
            init_buffer: 75,
            term_buffer: 50,
            window_size: 25,
            next_window: 0,
            counter: 0,
            enabled: warmup >= 20,
        };
        if !s.enabled {
            return s;
        }
        if s.init_buffer + s.window_size + s.term_buffer > warmup {
            s.init_buffer = (0.15 * warmup as f64) as usize;
            s.term_buffer = (0.10 * warmup as f64) as usize;
            s.window_size = warmup - s.init_buffer - s.term_buffer;
        }
        s.next_window = s.init_buffer + s.window_size - 1;
        s
    }

    fn in_window(&self) -> bool {
        self.enabled
            && self.counter >= self.init_buffer
            && self.counter < self.warmup - self.term_buffer
            && self.counter != self.warmup - 1
    }

    fn at_window_end(&self) -> bool {
        self.enabled && self.counter == self.next_window && self.counter != self.warmup - 1
    }

    fn compute_next_window(&mut self) {
        if self.next_window == self.warmup - self.term_buffer - 1 {
            return;
        }
        self.window_size *= 2;
        self.next_window = self.counter + self.window_size;
        if self.next_window == self.warmup - self.term_buffer - 1 {
            return;
        }
        // If the following window could not also fit, absorb it into this
        // one so the largest window comes last.
        let following = self.next_window + 2 * self.window_size;
        if following >= self.warmup - self.term_buffer {
            self.next_window = self.warmup - self.term_buffer - 1;
        }
    }
}

/// Online mean/variance accumulator (Welford).
struct RunningVariance {
    n: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningVariance {
    fn new(dim: usize) -> Self {
        RunningVariance {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn add(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for i in 0..x.len() {
            let delta = x[i] - self.mean[i];
            self.mean[i] += delta / n;
            self.m2[i] += delta * (x[i] - self.mean[i]);
        }
    }

    fn reset(&mut self) {
        self.n = 0;
        self.mean.fill(0.0);
        self.m2.fill(0.0);
    }

    /// Sample variances shrunk toward a small constant, as used for metric
    /// regularization.
    fn regularized(&self) -> Vec<f64> {
        let n = self.n as f64;
        let denom = (self.n.max(2) - 1) as f64;
        self.m2
            .iter()
            .map(|m2| (n / (n + 5.0)) * (m2 / denom) + 1e-3 * (5.0 / (n + 5.0)))
            .collect()
    }
}

/// Double/halve the step size until one leapfrog step crosses an 0.8
/// acceptance ratio, starting from `eps0`. The position is untouched.
fn find_reasonable_step_size<T: Target>(
    target: &mut T,
    inv_mass: &[f64],
    state: &Point,
    eps0: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let threshold = 0.8f64.ln();
    let mut probe_point = state.clone();
    sample_momentum(rng, inv_mass, &mut probe_point.p);
    let h0 = hamiltonian(&probe_point, inv_mass);

    let mut eps = eps0;
    let probe = |eps: f64, target: &mut T| -> f64 {
        let mut q = probe_point.clone();
        leapfrog(target, inv_mass, eps, &mut q);
        let h = hamiltonian(&q, inv_mass);
        h0 - h
    };

    let delta_h = probe(eps, target);
    let direction = if delta_h > threshold { 1 } else { -1 };
    for _ in 0..200 {
        let delta_h = probe(eps, target);
        if direction == 1 && !(delta_h > threshold) {
            return Ok(eps);
        }
        if direction == -1 && !(delta_h < threshold) {
            return Ok(eps);
        }
        eps = if direction == 1 { 2.0 * eps } else { 0.5 * eps };
        if !(1e-12..=1e7).contains(&eps) {
            return Err(Error::Init(format!(
                "no reasonable step size found (reached {eps:.3e}); \
                 the posterior may be degenerate at the initial point"
            )));
        }
    }
    Ok(eps)
}

/// Largest |log-density| at which an initial point is usable: above this,
/// the spacing between representable doubles near the Hamiltonian exceeds
/// the acceptance thresholds the step-size search and the transitions work
/// with, so energy differences turn into cancellation noise. A finite but
/// astronomically low log-density (an intensity overflowing toward the
/// data-scale cliff) is just as unusable as `-inf`.
const INIT_LOGP_MAX: f64 = 1e11;

fn init_point<T: Target>(
    target: &mut T,
    jitter: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Point> {
    let dim = target.dim();
    let attempts = if jitter == 0.0 { 1 } else { 100 };
    for attempt in 0..attempts {
        // Shrink the jitter every ten failures: wild draws are tried first,
        // but termination only needs the target to be sane near the origin.
        let scale = jitter * 0.5f64.powi(attempt / 10);
        let z: Vec<f64> = (0..dim)
            .map(|_| {
                if jitter == 0.0 {
                    0.0
                } else {
                    rng.random::<f64>() * 2.0 * scale - scale
                }
            })
            .collect();
        let mut grad = vec![0.0; dim];
        let logp = target.logp_grad(&z, &mut grad);
        if logp.is_finite()
            && logp.abs() <= INIT_LOGP_MAX
            && grad.iter().all(|g| g.is_finite())
        {
            let p = vec![0.0; dim];
            return Ok(Point { z, p, grad, logp });
        }
    }
    Err(Error::Init(format!(
        "no usable initial point (finite gradient, |log-density| <= {INIT_LOGP_MAX:.0e}) \
         found in {attempts} attempts (jitter {jitter})"
    )))
}

fn run_chain<T: Target>(target: &mut T, config: &SamplerConfig, chain: usize) -> Result<ChainDraws> {
    let dim = target.dim();
    let mut rng = substream(config.seed, &[tag::CHAIN, chain as u64]);
    let mut state = init_point(target, config.init_jitter, &mut rng)?;

    let mut inv_mass = vec![1.0; dim];
    let mut eps = match config.step_size {
        Some(e) => e,
        None => find_reasonable_step_size(target, &inv_mass, &state, 1.0, &mut rng)?,
    };
    let mut da = DualAveraging::new(config.target_accept, eps);
    let mut schedule = WarmupSchedule::new(config.warmup);
    let mut variance = RunningVariance::new(dim);

    let kept = config.kept_per_chain();
    let mut draws = Vec::with_capacity(kept);
    let mut logp = Vec::with_capacity(kept);
    let mut energy = Vec::with_capacity(kept);
    let mut accept_stat = Vec::with_capacity(kept);
    let mut treedepth = Vec::with_capacity(kept);
    let mut n_leapfrog = Vec::with_capacity(kept);
    let mut divergent = Vec::with_capacity(kept);
    let mut n_divergent = 0;
    let mut n_max_treedepth = 0;

    for i in 0..config.iterations {
        let info = transition(
            target,
            &inv_mass,
            eps,
            config.max_treedepth,
            &mut state,
            &mut rng,
        );

        if i < config.warmup {
            eps = da.learn(info.accept_stat);
            if schedule.in_window() {
                variance.add(&state.z);
            }
            if schedule.at_window_end() {
                schedule.compute_next_window();
                inv_mass = variance.regularized();
                variance.reset();
                eps = find_reasonable_step_size(target, &inv_mass, &state, eps, &mut rng)?;
                da.restart(eps);
                log::debug!(
                    "chain {chain}: metric window closed at warmup iteration {i}, \
                     step size reset to {eps:.4e}"
                );
            }
            schedule.counter += 1;
            if i + 1 == config.warmup {
                eps = da.completed();
                log::debug!("chain {chain}: adapted step size {eps:.4e}");
            }
        } else {
            if info.divergent {
                n_divergent += 1;
            }
            if info.depth >= config.max_treedepth {
                n_max_treedepth += 1;
            }
            if (i - config.warmup) % config.thin == 0 {
                draws.push(state.z.clone());
                logp.push(state.logp);
                energy.push(info.energy);
                accept_stat.push(info.accept_stat);
                treedepth.push(info.depth);
                n_leapfrog.push(info.n_leapfrog);
                divergent.push(info.divergent);
            }
        }
    }

    Ok(ChainDraws {
        draws,
        logp,
        energy,
        accept_stat,
        treedepth,
        n_leapfrog,
        divergent,
        n_divergent,
        n_max_treedepth,
        step_size: eps,
        inv_mass,
    })
}
