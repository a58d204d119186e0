//! Experiment drivers: stepsize sweeps, best-stepsize scaling studies,
//! variance-bound checks, the non-convexity table, and single traced runs.
//!
//! Every cell draws from `substream(seed, path)` where `path` is built from
//! the family, `n` and grid indices, so results do not depend on scheduling.

pub mod config;
mod output;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

pub use config::{
    ExperimentConfig, ExperimentKind, NonconvexSettings, RunSettings, StepsizeGrid, TargetKind,
    TargetSpec, VarianceSettings,
};
pub use output::{
    render, write_results, NONCONVEX_HEADER, SCALING_HEADER, SWEEP_HEADER, VARIANCE_HEADER,
};

use crate::diagnostics::{nonconvexity_probe, variance_report, NonconvexProbe, VarianceReport};
use crate::error::Result;
use crate::family::{Family, Init, VariationalParams};
use crate::optimizer::{
    run, run_replicated, HitSearch, OptimizerConfig, PruneRule, ReplicatedOutcome, RunTrace,
};
use crate::rng::substream;
use crate::scale::{BlockLayout, ScaleMatrix, Structure};
use crate::targets::{
    gaussian_optimum, CorrelatedConfig, CorrelatedHierarchicalGaussian, FiniteSumQuadratic,
    SyntheticIsotropicHierarchical, Target,
};

const TARGET_STREAM: u64 = 1;
const CELL_STREAM: u64 = 2;
const VARIANCE_STREAM: u64 = 3;
const RUN_STREAM: u64 = 4;

/// A target with one family's structure, starting point and optimum.
pub struct Problem {
    pub family: Family,
    pub n: usize,
    pub target: Box<dyn Target>,
    pub structure: Structure,
    pub init: VariationalParams,
    pub optimum: VariationalParams,
}

fn family_index(f: Family) -> u64 {
    Family::ALL.iter().position(|&g| g == f).unwrap_or(0) as u64
}

/// Builds the configured target with `n` local blocks.
pub fn build_target(cfg: &ExperimentConfig, n: usize) -> Result<Box<dyn Target>> {
    let spec = &cfg.target;
    let layout = BlockLayout::new(spec.d_z, spec.d_y, n)?;
    let mut rng = substream(cfg.seed, &[TARGET_STREAM, n as u64]);
    Ok(match spec.kind {
        TargetKind::Synthetic => Box::new(SyntheticIsotropicHierarchical::new(
            layout,
            spec.mean,
            spec.variance,
            spec.global_prior,
        )),
        TargetKind::Quadratic => Box::new(FiniteSumQuadratic::random_hierarchical(
            layout,
            spec.condition,
            &mut rng,
        )?),
        TargetKind::Correlated => {
            let model = CorrelatedConfig {
                d_z: spec.d_z,
                d_y: spec.d_y,
                n_blocks: n,
                ..CorrelatedConfig::default()
            };
            let t = CorrelatedHierarchicalGaussian::generate(&model, &mut rng)?;
            match &spec.data {
                Some(path) => {
                    let rows =
                        CorrelatedHierarchicalGaussian::load_observations_csv(path, spec.d_y)?;
                    Box::new(t.with_observations(rows)?)
                }
                None => Box::new(t),
            }
        }
    })
}

pub fn build_problem(cfg: &ExperimentConfig, family: Family, n: usize) -> Result<Problem> {
    let target = build_target(cfg, n)?;
    let structure = family.structure_for(target.as_ref())?;
    let optimum = match cfg.target.kind {
        TargetKind::Synthetic => {
            let t = SyntheticIsotropicHierarchical::new(
                BlockLayout::new(cfg.target.d_z, cfg.target.d_y, n)?,
                cfg.target.mean,
                cfg.target.variance,
                cfg.target.global_prior,
            );
            let (m, c) = t.optimum(structure);
            VariationalParams::new(m, c)?
        }
        _ => gaussian_optimum(target.as_ref(), structure)?,
    };
    Ok(Problem {
        family,
        n,
        init: VariationalParams::init(structure, Init::StandardGaussian),
        target,
        structure,
        optimum,
    })
}

fn problems(cfg: &ExperimentConfig) -> Result<Vec<Problem>> {
    let mut out = Vec::new();
    for &family in &cfg.families {
        for &n in &cfg.target.n {
            out.push(build_problem(cfg, family, n)?);
        }
    }
    Ok(out)
}

/// One `(family, n, stepsize)` cell of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub family: Family,
    pub n: usize,
    pub stepsize: f64,
    /// First hit time, or `tmax` when the cell never hit.
    pub t_hit: usize,
    pub hit: bool,
    pub diverged: bool,
    pub pruned: bool,
    /// Lowest `T` within its `(family, n)` group, ties to the smaller stepsize.
    pub best: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingRow {
    pub family: Family,
    pub n: usize,
    /// `None` when no stepsize hit `eps`.
    pub best_stepsize: Option<f64>,
    /// `tmax` when no stepsize hit.
    pub t_best: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarianceRow {
    pub family: Family,
    pub n: usize,
    pub point: usize,
    pub report: VarianceReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NonconvexRow {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub probe: NonconvexProbe,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TracedRun {
    pub family: Family,
    pub n: usize,
    pub trace: RunTrace,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ResultSet {
    Sweep(Vec<SweepRow>),
    Scaling(Vec<ScalingRow>),
    Variance(Vec<VarianceRow>),
    Nonconvex(Vec<NonconvexRow>),
    Run(Vec<TracedRun>),
}

pub fn execute(cfg: &ExperimentConfig) -> Result<ResultSet> {
    cfg.validate()?;
    Ok(match cfg.kind {
        ExperimentKind::Sweep => ResultSet::Sweep(sweep(cfg)?),
        ExperimentKind::Scaling => ResultSet::Scaling(scaling(cfg)?),
        ExperimentKind::Variance => ResultSet::Variance(variance(cfg)?),
        ExperimentKind::Nonconvex => ResultSet::Nonconvex(nonconvex(cfg)),
        ExperimentKind::Run => ResultSet::Run(single_runs(cfg)?),
    })
}

fn cell_config(cfg: &ExperimentConfig, stepsize: f64) -> OptimizerConfig {
    OptimizerConfig {
        method: cfg.method,
        stepsize,
        samples: cfg.samples,
        max_iters: cfg.tmax,
        base: cfg.base,
        ..OptimizerConfig::default()
    }
}

/// Replicated hit-time run for grid point `k`, capped at `budget`.
pub fn run_cell(
    cfg: &ExperimentConfig,
    p: &Problem,
    k: usize,
    stepsize: f64,
    budget: usize,
) -> Result<ReplicatedOutcome> {
    let search = HitSearch {
        eps: cfg.eps,
        reps: cfg.reps,
        seed: cfg.seed,
        budget,
        prune: cfg.prune.then(PruneRule::default),
    };
    let path = [CELL_STREAM, family_index(p.family), p.n as u64, k as u64];
    run_replicated(
        &p.init,
        p.target.as_ref(),
        &cell_config(cfg, stepsize),
        &p.optimum,
        &search,
        &path,
    )
}

fn sweep_row(
    cfg: &ExperimentConfig,
    p: &Problem,
    stepsize: f64,
    outcome: Result<ReplicatedOutcome>,
) -> SweepRow {
    let (hit, diverged, pruned) = match outcome {
        Ok(o) => (o.hit, o.diverged, o.pruned),
        Err(_) => (None, true, false),
    };
    SweepRow {
        family: p.family,
        n: p.n,
        stepsize,
        t_hit: hit.unwrap_or(cfg.tmax),
        hit: hit.is_some(),
        diverged,
        pruned,
        best: false,
    }
}

/// Every `(family, n, stepsize)` cell, sorted by family name, `n`, stepsize.
pub fn sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    let probs = problems(cfg)?;
    let grid = cfg.stepsize.values();
    let cells: Vec<(usize, usize)> = (0..probs.len())
        .flat_map(|i| (0..grid.len()).map(move |k| (i, k)))
        .collect();
    let mut rows: Vec<SweepRow> = cells
        .par_iter()
        .map(|&(i, k)| {
            let p = &probs[i];
            sweep_row(cfg, p, grid[k], run_cell(cfg, p, k, grid[k], cfg.tmax))
        })
        .collect();
    sort_rows(&mut rows);
    mark_best(&mut rows);
    Ok(rows)
}

fn sort_rows(rows: &mut [SweepRow]) {
    rows.sort_by(|a, b| {
        (a.family.name(), a.n)
            .cmp(&(b.family.name(), b.n))
            .then(a.stepsize.total_cmp(&b.stepsize))
    });
}

fn mark_best(rows: &mut [SweepRow]) {
    let mut start = 0;
    while start < rows.len() {
        let key = (rows[start].family, rows[start].n);
        let end = start
            + rows[start..]
                .iter()
                .take_while(|r| (r.family, r.n) == key)
                .count();
        // rows are in increasing stepsize, so a strict `<` keeps the smaller one on ties
        let mut best: Option<usize> = None;
        for i in start..end {
            if rows[i].hit && best.is_none_or(|b| rows[i].t_hit < rows[b].t_hit) {
                best = Some(i);
            }
        }
        if let Some(b) = best {
            rows[b].best = true;
        }
        start = end;
    }
}

/// Best `T` over the grid for a single problem.
///
/// Stepsizes are visited from largest to smallest and each run is capped
/// at the best `T` found so far, which cannot change the minimum: a later
/// (smaller) stepsize only wins by hitting at or below that `T`.
pub fn best_stepsize(cfg: &ExperimentConfig, p: &Problem) -> ScalingRow {
    let grid = cfg.stepsize.values();
    let mut best: Option<(f64, usize)> = None;
    for k in (0..grid.len()).rev() {
        let budget = best.map_or(cfg.tmax, |(_, t)| t);
        if let Ok(ReplicatedOutcome { hit: Some(t), .. }) = run_cell(cfg, p, k, grid[k], budget) {
            if best.is_none_or(|(_, bt)| t <= bt) {
                best = Some((grid[k], t));
            }
        }
    }
    ScalingRow {
        family: p.family,
        n: p.n,
        best_stepsize: best.map(|(g, _)| g),
        t_best: best.map_or(cfg.tmax, |(_, t)| t),
    }
}

pub fn scaling(cfg: &ExperimentConfig) -> Result<Vec<ScalingRow>> {
    let probs = problems(cfg)?;
    let mut rows: Vec<ScalingRow> = probs.par_iter().map(|p| best_stepsize(cfg, p)).collect();
    rows.sort_by(|a, b| (a.family.name(), a.n).cmp(&(b.family.name(), b.n)));
    Ok(rows)
}

/// Random feasible parameters near `center`: unit-normal location offsets,
/// `N(0, 0.2^2)` perturbations of stored scale entries, and diagonal entries
/// rescaled by a log-normal factor.
pub fn random_feasible<R: Rng + ?Sized>(
    center: &VariationalParams,
    rng: &mut R,
) -> Result<VariationalParams> {
    let location = center
        .location
        .iter()
        .map(|m| m + rng.sample::<f64, _>(StandardNormal))
        .collect();
    let s = center.structure();
    let mut vals: Vec<f64> = center
        .scale
        .values()
        .iter()
        .map(|c| c + 0.2 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    for i in 0..s.dim() {
        let o = s.diagonal_offset(i);
        let c = center.scale.values()[o].abs().max(1e-3);
        vals[o] = c * (0.5 * rng.sample::<f64, _>(StandardNormal)).exp();
    }
    VariationalParams::new(location, ScaleMatrix::from_values(s, vals)?)
}

pub fn variance(cfg: &ExperimentConfig) -> Result<Vec<VarianceRow>> {
    let probs = problems(cfg)?;
    let sizes = cfg.variance_sizes();
    let n_sizes = sizes.len();
    let jobs: Vec<(usize, usize, usize)> = (0..probs.len())
        .flat_map(|i| {
            (0..cfg.variance.points).flat_map(move |pt| (0..n_sizes).map(move |j| (i, pt, j)))
        })
        .collect();
    let mut rows = jobs
        .par_iter()
        .map(|&(i, pt, j)| {
            let p = &probs[i];
            let base_path = [
                VARIANCE_STREAM,
                family_index(p.family),
                p.n as u64,
                pt as u64,
            ];
            let lambda = random_feasible(&p.optimum, &mut substream(cfg.seed, &base_path))?;
            let mut est_path = base_path.to_vec();
            est_path.push(sizes[j] as u64 + 1);
            let mut rng = substream(cfg.seed, &est_path);
            let report = variance_report(
                &lambda,
                p.target.as_ref(),
                cfg.base,
                sizes[j],
                cfg.variance.outer,
                &mut rng,
            )?;
            Ok(VarianceRow {
                family: p.family,
                n: p.n,
                point: pt,
                report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| {
        (a.family.name(), a.n, a.report.samples, a.point).cmp(&(
            b.family.name(),
            b.n,
            b.report.samples,
            b.point,
        ))
    });
    Ok(rows)
}

fn axis(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    (0..count)
        .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
        .collect()
}

/// Probe values on the `count x count` `(x, y)` grid, row-major in `x`.
pub fn nonconvex(cfg: &ExperimentConfig) -> Vec<NonconvexRow> {
    let s = &cfg.nonconvex;
    let ys = axis(s.y_low, s.y_high, s.count);
    axis(s.x_low, s.x_high, s.count)
        .into_iter()
        .flat_map(|x| {
            ys.iter().map(move |&y| NonconvexRow {
                x,
                y,
                z: s.z,
                probe: nonconvexity_probe(x, y, s.z),
            })
        })
        .collect()
}

pub fn single_runs(cfg: &ExperimentConfig) -> Result<Vec<TracedRun>> {
    let probs = problems(cfg)?;
    let mut rows = probs
        .par_iter()
        .map(|p| {
            let oc = OptimizerConfig {
                eval_every: (cfg.run.eval_every > 0).then_some(cfg.run.eval_every),
                eval_samples: cfg.run.eval_samples,
                ..cell_config(cfg, cfg.run.stepsize)
            };
            let mut rng = substream(cfg.seed, &[RUN_STREAM, family_index(p.family), p.n as u64]);
            let trace = run(&p.init, p.target.as_ref(), &oc, Some(&p.optimum), &mut rng)?;
            Ok(TracedRun {
                family: p.family,
                n: p.n,
                trace,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| (a.family.name(), a.n).cmp(&(b.family.name(), b.n)));
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: ExperimentKind) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(kind);
        c.apply_text("target.n = 4\nstepsize.count = 6\nstepsize.low = 1e-3\nstepsize.high = 0.5\ntmax = 400\nreps = 2")
            .unwrap();
        c
    }

    #[test]
    fn sweep_rows_sorted_with_one_best_per_group() {
        let rows = sweep(&small(ExperimentKind::Sweep)).unwrap();
        assert_eq!(rows.len(), 18);
        let names: Vec<&str> = rows.iter().map(|r| r.family.name()).collect();
        assert_eq!(names[0], "full_rank");
        assert_eq!(names[17], "structured");
        for g in rows.chunks(6) {
            assert!(g.windows(2).all(|w| w[0].stepsize < w[1].stepsize));
            assert!(g.iter().filter(|r| r.best).count() <= 1);
            for r in g {
                assert!(r.t_hit >= 1 && r.t_hit <= 400);
                assert_eq!(r.hit, r.t_hit < 400 || (r.hit && r.t_hit == 400));
            }
        }
    }

    #[test]
    fn scaling_matches_sweep_minimum() {
        let cfg = small(ExperimentKind::Scaling);
        let rows = sweep(&cfg).unwrap();
        let best = scaling(&cfg).unwrap();
        for b in &best {
            let from_sweep = rows.iter().find(|r| r.family == b.family && r.best);
            match from_sweep {
                Some(r) => {
                    assert_eq!(b.t_best, r.t_hit);
                    assert_eq!(b.best_stepsize, Some(r.stepsize));
                }
                None => assert_eq!(b.best_stepsize, None),
            }
        }
    }

    #[test]
    fn quadratic_and_correlated_problems_build() {
        for kind in ["quadratic", "correlated"] {
            let mut c = small(ExperimentKind::Sweep);
            c.set("target.kind", kind).unwrap();
            c.set("target.d_z", "2").unwrap();
            c.set("target.d_y", "2").unwrap();
            for f in Family::ALL {
                let p = build_problem(&c, f, 3).unwrap();
                assert_eq!(p.optimum.structure(), p.structure);
                assert!(p.optimum.scale.is_feasible());
            }
        }
    }

    #[test]
    fn random_feasible_keeps_structure_and_positivity() {
        let c = small(ExperimentKind::Variance);
        let p = build_problem(&c, Family::Structured, 4).unwrap();
        let mut rng = crate::rng::stream(3);
        for _ in 0..20 {
            let l = random_feasible(&p.optimum, &mut rng).unwrap();
            assert_eq!(l.structure(), p.structure);
            assert!(l.scale.is_feasible());
        }
    }

    #[test]
    fn nonconvex_grid_shape() {
        let mut c = ExperimentConfig::new(ExperimentKind::Nonconvex);
        c.set("nonconvex.count", "3").unwrap();
        let rows = nonconvex(&c);
        assert_eq!(rows.len(), 9);
        assert_eq!((rows[0].x, rows[0].y), (-2.0, -2.0));
        assert_eq!((rows[1].x, rows[1].y), (-2.0, 0.0));
    }
}
