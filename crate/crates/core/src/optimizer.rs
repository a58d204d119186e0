//! Stochastic optimization of the ELBO: proximal SGD on the energy with an
//! entropic prox, plain SGD, and Adam on the full negative ELBO.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimator::{estimate_energy_gradient, target_gradient_batch, GradientEstimate};
use crate::family::{elbo_estimate, sample_base_batch, BaseDistribution, VariationalParams};
use crate::rng::{substream, Stream};
use crate::targets::Target;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    ProximalSgd,
    Sgd,
    Adam,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::ProximalSgd => "proximal_sgd",
            Method::Sgd => "sgd",
            Method::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "proximal_sgd" | "prox" => Some(Method::ProximalSgd),
            "sgd" => Some(Method::Sgd),
            "adam" => Some(Method::Adam),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub method: Method,
    pub stepsize: f64,
    /// Monte Carlo samples per gradient estimate.
    pub samples: usize,
    pub max_iters: usize,
    /// Record an ELBO estimate every this many iterations (`None`: never).
    pub eval_every: Option<usize>,
    pub eval_samples: usize,
    pub base: BaseDistribution,
    pub adam: AdamParams,
    /// A run is diverged once `r_t` exceeds this multiple of `max(r_0, 1)`.
    pub divergence_factor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            method: Method::ProximalSgd,
            stepsize: 1e-3,
            samples: 8,
            max_iters: 1000,
            eval_every: None,
            eval_samples: 64,
            base: BaseDistribution::StandardGaussian,
            adam: AdamParams::default(),
            divergence_factor: 1e8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.stepsize > 0.0 && self.stepsize.is_finite()) {
            return Err(Error::invalid(format!(
                "stepsize must be positive, got {}",
                self.stepsize
            )));
        }
        if self.samples == 0 {
            return Err(Error::invalid("samples per step must be at least 1"));
        }
        if self.eval_every == Some(0) {
            return Err(Error::invalid("evaluation cadence must be at least 1"));
        }
        if self.eval_every.is_some() && self.eval_samples == 0 {
            return Err(Error::invalid("ELBO evaluation needs at least one sample"));
        }
        Ok(())
    }
}

/// Per-iteration record of one optimization run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunTrace {
    /// `r_t = ||lambda_t - lambda*||^2` for `t = 0..=iterations`, when an
    /// optimum was supplied.
    pub distances: Vec<f64>,
    /// `(iteration, ELBO estimate)` at the evaluation cadence.
    pub elbo: Vec<(usize, f64)>,
    pub diverged: bool,
    pub iterations: usize,
}

impl RunTrace {
    /// CSV with header `iteration,r,elbo`; `elbo` is blank off-cadence.
    pub fn to_csv(&self) -> String {
        let rows = self.iterations + 1;
        let mut elbo = self.elbo.iter().peekable();
        let mut out = String::from("iteration,r,elbo\n");
        for t in 0..rows {
            let r = self
                .distances
                .get(t)
                .map(|v| format!("{v:?}"))
                .unwrap_or_default();
            let e = match elbo.peek() {
                Some(&&(i, v)) if i == t => {
                    elbo.next();
                    format!("{v:?}")
                }
                _ => String::new(),
            };
            out.push_str(&format!("{t},{r},{e}\n"));
        }
        out
    }
}

/// Energy gradient plus the exact gradient of `-log det C`
/// (`-1 / C_ii` on the diagonal).
pub fn full_elbo_gradient<R: Rng + ?Sized>(
    params: &VariationalParams,
    target: &dyn Target,
    base: BaseDistribution,
    samples: usize,
    rng: &mut R,
) -> Result<GradientEstimate> {
    check_domain(params)?;
    let mut g = estimate_energy_gradient(params, target, base, samples, rng)?;
    add_entropy_gradient(params, &mut g);
    Ok(g)
}

pub(crate) fn add_entropy_gradient(params: &VariationalParams, g: &mut GradientEstimate) {
    for i in 0..params.dim() {
        *g.scale.diag_mut(i) -= 1.0 / params.scale.diag(i);
    }
}

fn check_domain(params: &VariationalParams) -> Result<()> {
    for i in 0..params.dim() {
        let c = params.scale.diag(i);
        if !(c > 0.0) {
            return Err(Error::DomainViolation(format!(
                "diagonal entry {i} is {c}, must be positive"
            )));
        }
    }
    Ok(())
}

/// Optimizer state; only Adam carries moments.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            t: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Applies one update with a precomputed gradient. For proximal SGD `g`
    /// is the energy gradient; for SGD and Adam it is the full ELBO gradient.
    pub fn step(&mut self, params: &mut VariationalParams, g: &GradientEstimate) -> Result<()> {
        if g.location.len() != params.dim() || g.scale.structure() != params.structure() {
            return Err(Error::invalid(
                "gradient shape does not match the parameters",
            ));
        }
        let gamma = self.config.stepsize;
        match self.config.method {
            Method::ProximalSgd => {
                sgd_update(params, g, gamma)?;
                params.scale.prox_diagonal_in_place(gamma)?;
            }
            Method::Sgd => sgd_update(params, g, gamma)?,
            Method::Adam => {
                let p = params.dim() + params.scale.values().len();
                if self.first.len() != p {
                    self.first = vec![0.0; p];
                    self.second = vec![0.0; p];
                    self.t = 0;
                }
                self.t += 1;
                let AdamParams { beta1, beta2, eps } = self.config.adam;
                let c1 = 1.0 - beta1.powf(self.t as f64);
                let c2 = 1.0 - beta2.powf(self.t as f64);
                let d = params.dim();
                let grads = g.location.iter().chain(g.scale.values());
                let (loc, scale) = (&mut params.location, params.scale.values_mut());
                for (k, gk) in grads.enumerate() {
                    let m = &mut self.first[k];
                    let v = &mut self.second[k];
                    *m = beta1 * *m + (1.0 - beta1) * gk;
                    *v = beta2 * *v + (1.0 - beta2) * gk * gk;
                    let delta = gamma * (*m / c1) / ((*v / c2).sqrt() + eps);
                    if k < d {
                        loc[k] -= delta;
                    } else {
                        scale[k - d] -= delta;
                    }
                }
            }
        }
        Ok(())
    }

    /// Estimates the appropriate gradient and steps. The SGD variants apply
    /// the pulled-back gradient straight into `params` without materializing
    /// it; the result equals `step` with the corresponding estimate.
    pub fn iterate<R: Rng + ?Sized>(
        &mut self,
        params: &mut VariationalParams,
        target: &dyn Target,
        rng: &mut R,
    ) -> Result<()> {
        let cfg = &self.config;
        if cfg.method == Method::Adam {
            let g = full_elbo_gradient(params, target, cfg.base, cfg.samples, rng)?;
            return self.step(params, &g);
        }
        let gamma = cfg.stepsize;
        let old_diag = match cfg.method {
            Method::Sgd => {
                check_domain(params)?;
                Some(params.scale.diagonal_values())
            }
            _ => None,
        };
        let u = sample_base_batch(cfg.base, params.dim(), cfg.samples, rng);
        let z = params.reparameterize_batch(&u)?;
        let g = target_gradient_batch(target, &z)?;
        let a = -gamma / cfg.samples as f64;
        for (i, m) in params.location.iter_mut().enumerate() {
            *m += a * g.row(i).iter().sum::<f64>();
        }
        params.scale.outer_accumulate_batch(&g, &u, a)?;
        match old_diag {
            Some(c) => {
                for (i, ci) in c.iter().enumerate() {
                    *params.scale.diag_mut(i) += gamma / ci;
                }
            }
            None => params.scale.prox_diagonal_in_place(gamma)?,
        }
        Ok(())
    }
}

fn sgd_update(params: &mut VariationalParams, g: &GradientEstimate, gamma: f64) -> Result<()> {
    for (m, gm) in params.location.iter_mut().zip(&g.location) {
        *m -= gamma * gm;
    }
    params.scale.axpy(-gamma, &g.scale)
}

fn all_finite(params: &VariationalParams) -> bool {
    params
        .location
        .iter()
        .chain(params.scale.values())
        .all(|v| v.is_finite())
}

/// Runs `config.max_iters` steps from `init`, stopping early on divergence.
/// Distances are recorded after each complete (post-prox) update.
pub fn run<R: Rng + ?Sized>(
    init: &VariationalParams,
    target: &dyn Target,
    config: &OptimizerConfig,
    optimum: Option<&VariationalParams>,
    rng: &mut R,
) -> Result<RunTrace> {
    let mut opt = Optimizer::new(config.clone())?;
    let mut params = init.clone();
    let mut trace = RunTrace::default();
    let r0 = optimum.map(|o| params.distance_sq(o)).transpose()?;
    let limit = r0.map(|r| config.divergence_factor * r.max(1.0));
    if let Some(r) = r0 {
        trace.distances.push(r);
    }
    let record_elbo =
        |t: usize, p: &VariationalParams, rng: &mut R, trace: &mut RunTrace| -> bool {
            if let Some(k) = config.eval_every {
                if t.is_multiple_of(k) {
                    match elbo_estimate(p, target, config.base, config.eval_samples, rng) {
                        Ok(v) => trace.elbo.push((t, v)),
                        Err(_) => return false,
                    }
                }
            }
            true
        };
    if !record_elbo(0, &params, rng, &mut trace) {
        trace.diverged = true;
        return Ok(trace);
    }
    for t in 1..=config.max_iters {
        match opt.iterate(&mut params, target, rng) {
            Ok(()) => {}
            Err(Error::DomainViolation(_)) => {
                trace.diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
        trace.iterations = t;
        if !all_finite(&params) {
            trace.diverged = true;
            break;
        }
        if let Some(o) = optimum {
            let r = params.distance_sq(o)?;
            trace.distances.push(r);
            if limit.is_some_and(|l| r > l) {
                trace.diverged = true;
                break;
            }
        }
        if !record_elbo(t, &params, rng, &mut trace) {
            trace.diverged = true;
            break;
        }
    }
    Ok(trace)
}

/// Smallest `T` with `trace[T-1] > eps` and `trace[T] <= eps`.
pub fn first_hit_time(trace: &[f64], eps: f64) -> Result<Option<usize>> {
    if trace.is_empty() {
        return Err(Error::invalid("cannot threshold an empty trace"));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("accuracy threshold must be positive"));
    }
    Ok(trace
        .windows(2)
        .position(|w| w[0] > eps && w[1] <= eps)
        .map(|i| i + 1))
}

/// Early abandonment of replicated runs that cannot reach `eps` in budget.
///
/// From `min_iters` on, at every chunk boundary `t`, the averaged trace is
/// summarized by its means `A` over `[t/2, 3t/4)` and `B` over `[3t/4, t)`.
/// The fitted rate `rho = ln(A / B) / (t / 4)` extrapolates the hit time as
/// `t + ln(B / eps) / rho`; the run is abandoned when that exceeds
/// `safety * budget` or when `rho <= 0`. Traces whose logarithm is convex in
/// `t` (sums of decaying modes above a noise floor) are extrapolated
/// optimistically, so this only drops runs that are far from hitting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PruneRule {
    pub min_iters: usize,
    pub safety: f64,
}

impl Default for PruneRule {
    fn default() -> Self {
        Self {
            min_iters: 1024,
            safety: 2.0,
        }
    }
}

impl PruneRule {
    fn abandons(&self, trace: &[f64], eps: f64, budget: usize) -> bool {
        let t = trace.len() - 1;
        if t < self.min_iters.max(8) {
            return false;
        }
        let window_mean =
            |lo: usize, hi: usize| trace[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
        let (h, q) = (t / 2, 3 * t / 4);
        let a = window_mean(h, q);
        let b = window_mean(q, t);
        if !(b > eps) {
            return false;
        }
        let rho = (a / b).ln() / (q - h) as f64;
        if !(rho > 0.0) {
            return true;
        }
        t as f64 + (b / eps).ln() / rho > self.safety * budget as f64
    }
}

/// Replication and stopping settings for [`run_replicated`].
#[derive(Clone, Debug, PartialEq)]
pub struct HitSearch {
    pub eps: f64,
    pub reps: usize,
    pub seed: u64,
    /// Stop after this many iterations even if `config.max_iters` is larger.
    pub budget: usize,
    pub prune: Option<PruneRule>,
}

/// Result of [`run_replicated`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReplicatedOutcome {
    /// Replication-averaged `r_t`, up to where the run stopped.
    pub mean_trace: Vec<f64>,
    pub hit: Option<usize>,
    pub diverged: bool,
    /// Abandoned by the [`PruneRule`].
    pub pruned: bool,
}

const CHUNK: usize = 64;

/// Runs `search.reps` seeded replications in lockstep chunks, averages
/// their distance traces, and stops at the first hit of `eps` on the
/// averaged trace, on divergence of any replication, when pruned, or after
/// `min(config.max_iters, search.budget)` steps. Replication `k` uses stream
/// `substream(search.seed, path ++ [k])`.
pub fn run_replicated(
    init: &VariationalParams,
    target: &dyn Target,
    config: &OptimizerConfig,
    optimum: &VariationalParams,
    search: &HitSearch,
    path: &[u64],
) -> Result<ReplicatedOutcome> {
    let reps = search.reps;
    let eps = search.eps;
    if reps == 0 {
        return Err(Error::invalid("need at least one replication"));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("accuracy threshold must be positive"));
    }
    let budget = config.max_iters.min(search.budget);
    let r0 = init.distance_sq(optimum)?;
    let limit = config.divergence_factor * r0.max(1.0);
    struct Rep {
        opt: Optimizer,
        params: VariationalParams,
        rng: Stream,
        dists: Vec<f64>,
        diverged: bool,
    }
    let mut states = (0..reps)
        .map(|k| {
            let mut p = path.to_vec();
            p.push(k as u64);
            Ok(Rep {
                opt: Optimizer::new(config.clone())?,
                params: init.clone(),
                rng: substream(search.seed, &p),
                dists: Vec::new(),
                diverged: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let outcome = |mean_trace, hit, diverged, pruned| ReplicatedOutcome {
        mean_trace,
        hit,
        diverged,
        pruned,
    };
    let mut mean = vec![r0];
    let mut done = 0;
    while done < budget {
        let steps = CHUNK.min(budget - done);
        states.par_iter_mut().try_for_each(|s| -> Result<()> {
            s.dists.clear();
            for _ in 0..steps {
                if s.diverged {
                    s.dists.push(f64::INFINITY);
                    continue;
                }
                match s.opt.iterate(&mut s.params, target, &mut s.rng) {
                    Ok(()) => {}
                    Err(Error::DomainViolation(_)) => {
                        s.diverged = true;
                        s.dists.push(f64::INFINITY);
                        continue;
                    }
                    Err(e) => return Err(e),
                }
                // non-finite parameters make the distance non-finite
                let r = s.params.distance_sq(optimum)?;
                if !(r <= limit) {
                    s.diverged = true;
                    s.dists.push(f64::INFINITY);
                } else {
                    s.dists.push(r);
                }
            }
            Ok(())
        })?;
        for k in 0..steps {
            let avg = states.iter().map(|s| s.dists[k]).sum::<f64>() / reps as f64;
            let t = mean.len();
            mean.push(avg);
            if mean[t - 1] > eps && avg <= eps {
                return Ok(outcome(mean, Some(t), false, false));
            }
            if !avg.is_finite() {
                return Ok(outcome(mean, None, true, false));
            }
        }
        done += steps;
        if done < budget && search.prune.is_some_and(|p| p.abandons(&mean, eps, budget)) {
            return Ok(outcome(mean, None, false, true));
        }
    }
    Ok(outcome(mean, None, false, false))
}
