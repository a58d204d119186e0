//! Plain-Rust operations behind the browser page, so they can be tested natively.

use bbvi::diagnostics::nonconvexity_probe;
use bbvi::experiments::{self, build_problem, render, ExperimentConfig, ExperimentKind, ResultSet};
use bbvi::optimizer::{run, OptimizerConfig};
use bbvi::rng::substream;
use bbvi::Family;

// Browser tabs stay responsive below these.
const MAX_ITERS: usize = 20_000;
const MAX_N: usize = 50;

fn family(name: &str) -> Result<Family, String> {
    Family::parse(name).ok_or_else(|| format!("unknown family {name:?}"))
}

fn check_n(n: usize) -> Result<(), String> {
    if n == 0 || n > MAX_N {
        return Err(format!("n must be in 1..={MAX_N}"));
    }
    Ok(())
}

/// `r_t` for one proximal-SGD run on the synthetic target, `t = 0..=iters`.
pub fn trace(
    family_name: &str,
    n: usize,
    stepsize: f64,
    iters: usize,
    seed: u64,
) -> Result<Vec<f64>, String> {
    check_n(n)?;
    if iters > MAX_ITERS {
        return Err(format!("at most {MAX_ITERS} iterations"));
    }
    let cfg = ExperimentConfig::new(ExperimentKind::Run);
    let p = build_problem(&cfg, family(family_name)?, n).map_err(|e| e.to_string())?;
    let opt = OptimizerConfig {
        stepsize,
        samples: cfg.samples,
        max_iters: iters,
        ..OptimizerConfig::default()
    };
    let t = run(
        &p.init,
        p.target.as_ref(),
        &opt,
        Some(&p.optimum),
        &mut substream(seed, &[]),
    )
    .map_err(|e| e.to_string())?;
    Ok(t.distances)
}

/// `(det, min_eig)` pairs of the non-convex energy's Hessian on a
/// `count x count` grid over `[lo, hi]^2`, x-major, flattened.
pub fn det_grid(z: f64, count: usize, lo: f64, hi: f64) -> Result<Vec<f64>, String> {
    if !(2..=200).contains(&count) || lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) {
        return Err("need 2..=200 points and lo < hi".into());
    }
    let step = (hi - lo) / (count - 1) as f64;
    let mut out = Vec::with_capacity(2 * count * count);
    for i in 0..count {
        for j in 0..count {
            let p = nonconvexity_probe(lo + step * i as f64, lo + step * j as f64, z);
            out.push(p.det);
            out.push(p.min_eigenvalue);
        }
    }
    Ok(out)
}

/// Sweep CSV for all three families on a `count`-point grid over `[1e-4, 1]`.
pub fn small_sweep(
    n: usize,
    count: usize,
    tmax: usize,
    reps: usize,
    seed: u64,
) -> Result<String, String> {
    check_n(n)?;
    let mut cfg = ExperimentConfig::new(ExperimentKind::Sweep);
    cfg.target.n = vec![n];
    cfg.stepsize.count = count;
    cfg.stepsize.low = 1e-4;
    cfg.tmax = tmax.min(MAX_ITERS);
    cfg.reps = reps;
    cfg.seed = seed;
    cfg.validate().map_err(|e| e.to_string())?;
    let rows = experiments::sweep(&cfg).map_err(|e| e.to_string())?;
    Ok(render(&ResultSet::Sweep(rows)).remove(0).1)
}
