//! Finite-sum negative log-joint densities `l(z) = sum_n l_n(z)`.
//!
//! Each component only sees the coordinates listed in its index set and is
//! evaluated in that subspace. All built-in targets are Gaussian, so their
//! components are quadratic and expose exact curvature information.

mod correlated;
mod quadratic;
mod synthetic;

pub use correlated::{CorrelatedConfig, CorrelatedHierarchicalGaussian, PosteriorOracle};
pub use quadratic::{FiniteSumQuadratic, QuadraticComponent};
pub use synthetic::{GlobalPrior, SyntheticIsotropicHierarchical};

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Error, Result};
use crate::family::VariationalParams;
use crate::scale::{BlockLayout, ScaleMatrix, Structure};

/// Index sets of the coordinates each component uses.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentStructure {
    dim: usize,
    indices: Vec<Vec<usize>>,
}

impl ComponentStructure {
    pub fn new(dim: usize, indices: Vec<Vec<usize>>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid("a target needs at least one component"));
        }
        for (n, idx) in indices.iter().enumerate() {
            if idx.is_empty() {
                return Err(Error::invalid(format!("component {n} uses no coordinates")));
            }
            if idx.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::invalid(format!(
                    "component {n} index set is not sorted and duplicate-free"
                )));
            }
            if idx.last().is_some_and(|&i| i >= dim) {
                return Err(Error::invalid(format!(
                    "component {n} uses a coordinate outside [0, {dim})"
                )));
            }
        }
        Ok(Self { dim, indices })
    }

    pub fn hierarchical(layout: BlockLayout) -> Self {
        let indices = (0..layout.n_blocks())
            .map(|n| layout.component_indices(n))
            .collect();
        Self {
            dim: layout.dim(),
            indices,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self, n: usize) -> &[usize] {
        &self.indices[n]
    }

    pub fn all(&self) -> &[Vec<usize>] {
        &self.indices
    }
}

/// Smoothness and strong-convexity constants of a target.
#[derive(Clone, Debug, PartialEq)]
pub struct Smoothness {
    /// `L_n` for every component.
    pub per_component: Vec<f64>,
    /// Smoothness `L` of the full sum.
    pub total: f64,
    /// Strong convexity `mu` of the full sum.
    pub strong_convexity: f64,
}

pub trait Target: Send + Sync {
    fn dim(&self) -> usize;

    fn components(&self) -> &ComponentStructure;

    /// Value of `l_n` at `z_sub`; writes its gradient (in the component
    /// subspace) into `grad`.
    fn eval_component(&self, n: usize, z_sub: &[f64], grad: &mut [f64]) -> Result<f64>;

    /// Global/local arrangement of the coordinates, when the target has one.
    fn layout(&self) -> Option<BlockLayout> {
        None
    }

    /// Whether every component is exactly quadratic.
    fn is_quadratic(&self) -> bool {
        false
    }

    /// Closed-form constants, when the target knows them.
    fn smoothness_hint(&self) -> Option<Smoothness> {
        None
    }

    /// Closed-form component minimizers, when the target knows them.
    fn stationary_hint(&self) -> Option<Vec<Vec<f64>>> {
        None
    }
}

pub(crate) fn check_component(
    target: &dyn Target,
    n: usize,
    z_sub: &[f64],
    grad: &[f64],
) -> Result<()> {
    let comps = target.components();
    if n >= comps.len() {
        return Err(Error::invalid(format!(
            "component {n} out of range (target has {})",
            comps.len()
        )));
    }
    let k = comps.indices(n).len();
    check_len("component input", z_sub.len(), k)?;
    check_len("component gradient", grad.len(), k)
}

/// Evaluates `l_n` on the full vector's restriction; convenience for tests and tools.
pub fn eval_component(target: &dyn Target, n: usize, z_sub: &[f64]) -> Result<(f64, Vec<f64>)> {
    let mut g = vec![0.0; z_sub.len()];
    let v = target.eval_component(n, z_sub, &mut g)?;
    Ok((v, g))
}

/// Value and gradient of the full sum, scattering every component gradient.
pub fn eval_full(target: &dyn Target, z: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len("target input", z.len(), target.dim())?;
    let comps = target.components();
    let mut grad = vec![0.0; z.len()];
    let mut value = 0.0;
    let mut sub = Vec::new();
    let mut g = Vec::new();
    for n in 0..comps.len() {
        let idx = comps.indices(n);
        sub.clear();
        sub.extend(idx.iter().map(|&i| z[i]));
        g.clear();
        g.resize(idx.len(), 0.0);
        value += target.eval_component(n, &sub, &mut g)?;
        for (&i, gi) in idx.iter().zip(&g) {
            grad[i] += gi;
        }
    }
    Ok((value, grad))
}

fn require_quadratic(target: &dyn Target, what: &str) -> Result<()> {
    if target.is_quadratic() {
        Ok(())
    } else {
        Err(Error::Unsupported(format!(
            "{what} needs a quadratic target or closed-form metadata"
        )))
    }
}

/// Hessian and minimizer of a quadratic component, recovered from exact
/// gradient differences.
pub fn component_quadratic_form(
    target: &dyn Target,
    n: usize,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    require_quadratic(target, "component curvature")?;
    let k = target.components().indices(n).len();
    let origin = vec![0.0; k];
    let mut g0 = vec![0.0; k];
    target.eval_component(n, &origin, &mut g0)?;
    let mut h = DMatrix::zeros(k, k);
    let mut e = vec![0.0; k];
    let mut g = vec![0.0; k];
    for j in 0..k {
        e[j] = 1.0;
        target.eval_component(n, &e, &mut g)?;
        for i in 0..k {
            h[(i, j)] = g[i] - g0[i];
        }
        e[j] = 0.0;
    }
    let h = (&h + h.transpose()) * 0.5;
    // grad(x) = H (x - x_bar)  =>  H x_bar = -grad(0)
    let rhs = DVector::from_iterator(k, g0.iter().map(|v| -v));
    let center = h
        .clone()
        .cholesky()
        .map(|c| c.solve(&rhs))
        .or_else(|| h.clone().lu().solve(&rhs))
        .ok_or_else(|| Error::Numerical(format!("component {n} has a singular Hessian")))?;
    Ok((h, center))
}

/// Largest eigenvalue of a symmetric positive semi-definite matrix by power
/// iteration, stopping once the Rayleigh quotient moves less than `tol`
/// (relative).
pub fn power_iteration(a: &DMatrix<f64>, tol: f64) -> f64 {
    let k = a.nrows();
    if k == 0 {
        return 0.0;
    }
    // Deterministic start vector with no special alignment to a basis axis.
    let mut v = DVector::from_fn(k, |i, _| 1.0 + 0.1 * ((i * 7 + 3) % 11) as f64);
    v /= v.norm();
    let mut lambda = 0.0;
    for _ in 0..100_000 {
        let w = a * &v;
        let next = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        if (next - lambda).abs() <= tol * next.abs().max(f64::MIN_POSITIVE) {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Dense full Hessian of a quadratic target.
pub fn assembled_hessian(target: &dyn Target) -> Result<DMatrix<f64>> {
    require_quadratic(target, "assembled Hessian")?;
    let d = target.dim();
    if d > 2000 {
        return Err(Error::Unsupported(format!(
            "dense Hessian assembly limited to d <= 2000, got {d}"
        )));
    }
    let comps = target.components();
    let mut full = DMatrix::zeros(d, d);
    for n in 0..comps.len() {
        let (h, _) = component_quadratic_form(target, n)?;
        let idx = comps.indices(n);
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                full[(i, j)] += h[(a, b)];
            }
        }
    }
    Ok(full)
}

/// `L_n`, `L`, and `mu`; closed-form values win over numerical ones.
pub fn smoothness_constants(target: &dyn Target) -> Result<Smoothness> {
    if let Some(s) = target.smoothness_hint() {
        return Ok(s);
    }
    require_quadratic(target, "smoothness constants")?;
    let per_component = (0..target.components().len())
        .map(|n| component_quadratic_form(target, n).map(|(h, _)| power_iteration(&h, 1e-10)))
        .collect::<Result<Vec<_>>>()?;
    let eig = assembled_hessian(target)?.symmetric_eigen().eigenvalues;
    Ok(Smoothness {
        per_component,
        total: eig.max(),
        strong_convexity: eig.min(),
    })
}

/// Minimizers of every component, in component coordinates.
pub fn stationary_points(target: &dyn Target) -> Result<Vec<Vec<f64>>> {
    if let Some(p) = target.stationary_hint() {
        return Ok(p);
    }
    require_quadratic(target, "stationary points")?;
    (0..target.components().len())
        .map(|n| component_quadratic_form(target, n).map(|(_, c)| c.as_slice().to_vec()))
        .collect()
}

/// Mean and covariance of the Gaussian `exp(-l)` for a quadratic target.
pub fn gaussian_moments(target: &dyn Target) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let p = assembled_hessian(target)?;
    let d = target.dim();
    let (_, g0) = eval_full(target, &vec![0.0; d])?;
    let chol = p
        .cholesky()
        .ok_or_else(|| Error::Numerical("target Hessian is not positive definite".into()))?;
    let mean = chol.solve(&-DVector::from_vec(g0));
    Ok((mean, chol.inverse()))
}

/// Best member of `structure` for a quadratic target. Location-scale energy
/// under a standardized base depends on `(m, C C^T)` only, so the optimum is
/// the posterior mean with the covariance's Cholesky factor. Mean-field takes
/// `C_ii = P_ii^(-1/2)`; restricted structures require the factor to vanish
/// off the stored pattern (to `1e-10` relative).
pub fn gaussian_optimum(target: &dyn Target, structure: Structure) -> Result<VariationalParams> {
    check_len("structure dimension", structure.dim(), target.dim())?;
    let (mean, cov) = gaussian_moments(target)?;
    let scale = match structure {
        Structure::Diagonal { .. } => {
            let p = assembled_hessian(target)?;
            ScaleMatrix::diagonal((0..target.dim()).map(|i| 1.0 / p[(i, i)].sqrt()).collect())
        }
        _ => {
            let l = cov
                .cholesky()
                .ok_or_else(|| {
                    Error::Numerical("posterior covariance is not positive definite".into())
                })?
                .l();
            let projected = ScaleMatrix::project_dense(structure, &l)?;
            let residual = (&l - projected.to_dense()).abs().max();
            if residual > 1e-10 * l.abs().max() {
                return Err(Error::Unsupported(format!(
                    "posterior factor leaves the {} pattern (residual {residual:e})",
                    structure.tag()
                )));
            }
            projected
        }
    };
    VariationalParams::new(mean.as_slice().to_vec(), scale)
}

pub(crate) fn neg_log_normal_iso(x: &[f64], mean: f64, variance: f64) -> f64 {
    let k = x.len() as f64;
    let sq: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    0.5 * k * (2.0 * std::f64::consts::PI * variance).ln() + 0.5 * sq / variance
}
