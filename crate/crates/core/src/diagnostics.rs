//! Gradient-variance measurement and the matching quadratic-target bounds,
//! complexity constants, base-moment audits, and the non-convexity probe.

use nalgebra::{DMatrix, Matrix3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::estimator::estimate_energy_gradient;
use crate::family::{sample_base, BaseDistribution, VariationalParams};
use crate::rng::substream;
use crate::scale::SparsityDescriptor;
use crate::targets::{smoothness_constants, stationary_points, Target};

/// Trace of the sample covariance of `s` vectors produced by `sample(i)`,
/// with its jackknife standard error.
///
/// `sample` is called twice for every index (a mean pass, then a deviation
/// pass) and must return the same vector both times. Nothing of size
/// `s * p` is stored.
pub fn trace_variance<F>(s: usize, mut sample: F) -> Result<(f64, f64)>
where
    F: FnMut(usize) -> Result<Vec<f64>>,
{
    if s < 2 {
        return Err(Error::invalid("variance needs at least two samples"));
    }
    let mut mean: Vec<f64> = Vec::new();
    let mut m2: Vec<f64> = Vec::new();
    for i in 0..s {
        let x = sample(i)?;
        if i == 0 {
            mean = vec![0.0; x.len()];
            m2 = vec![0.0; x.len()];
        } else if x.len() != mean.len() {
            return Err(Error::invalid("samples differ in length"));
        }
        let k = (i + 1) as f64;
        for ((mu, q), v) in mean.iter_mut().zip(m2.iter_mut()).zip(&x) {
            let delta = v - *mu;
            *mu += delta / k;
            *q += delta * (v - *mu);
        }
    }
    let sf = s as f64;
    let ss: f64 = m2.iter().sum();
    let estimate = ss / (sf - 1.0);
    if s == 2 {
        return Ok((estimate, f64::INFINITY));
    }
    // leave-one-out traces are affine in D_i = ||x_i - mean||^2
    let mut dev = Vec::with_capacity(s);
    for i in 0..s {
        let x = sample(i)?;
        dev.push(
            x.iter()
                .zip(&mean)
                .map(|(v, mu)| (v - mu) * (v - mu))
                .sum::<f64>(),
        );
    }
    let dbar = dev.iter().sum::<f64>() / sf;
    let spread: f64 = dev.iter().map(|d| (d - dbar) * (d - dbar)).sum();
    let slope = sf / ((sf - 1.0) * (sf - 2.0));
    let stderr = slope * ((sf - 1.0) / sf * spread).sqrt();
    Ok((estimate, stderr))
}

/// `tr V[g_M(lambda)]` over `(m, stored C)` from `s` independent estimates.
/// Estimate `i` draws from `substream(seed, [i])` with `seed` taken from `rng`.
pub fn empirical_gradient_variance<R: Rng + ?Sized>(
    params: &VariationalParams,
    target: &dyn Target,
    base: BaseDistribution,
    samples: usize,
    outer: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let seed: u64 = rng.gen();
    trace_variance(outer, |i| {
        let mut r = substream(seed, &[i as u64]);
        estimate_energy_gradient(params, target, base, samples, &mut r).map(|g| g.to_flat())
    })
}

fn require_dim(
    params: &VariationalParams,
    target: &dyn Target,
    desc: &SparsityDescriptor,
) -> Result<()> {
    if params.dim() != target.dim() || desc.dim() != target.dim() {
        return Err(Error::invalid(
            "parameters, target and descriptor disagree on dimension",
        ));
    }
    if desc.n_components() != target.components().len() {
        return Err(Error::invalid(
            "descriptor and target disagree on the component count",
        ));
    }
    Ok(())
}

/// Per-component terms `L_n^2 (||m_n - zbar_n||^2 + ||C_n||_F^2)` of the
/// quadratic variance bound, before the `(N / M)(d* + k)` factor.
pub fn variance_bound_terms(
    params: &VariationalParams,
    target: &dyn Target,
    desc: &SparsityDescriptor,
) -> Result<Vec<f64>> {
    require_dim(params, target, desc)?;
    let smooth = smoothness_constants(target).map_err(unsupported)?;
    let centers = stationary_points(target).map_err(unsupported)?;
    let comps = target.components();
    Ok((0..comps.len())
        .map(|n| {
            let dm: f64 = comps
                .indices(n)
                .iter()
                .zip(&centers[n])
                .map(|(&i, c)| (params.location[i] - c).powi(2))
                .sum();
            let l = smooth.per_component[n];
            l * l * (dm + params.scale.frobenius_norm_sq_component(desc, n))
        })
        .collect())
}

fn unsupported(e: Error) -> Error {
    match e {
        Error::Unsupported(_) => e,
        other => Error::Unsupported(format!("target lacks quadratic metadata: {other}")),
    }
}

/// `(N / M)(d* + k) sum_n L_n^2 (||m_n - zbar_n||^2 + ||C_n||_F^2)`.
pub fn theoretical_variance_bound(
    params: &VariationalParams,
    target: &dyn Target,
    desc: &SparsityDescriptor,
    samples: usize,
    k_phi: f64,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let terms = variance_bound_terms(params, target, desc)?;
    Ok(bound_factor(desc, samples, k_phi) * terms.iter().sum::<f64>())
}

fn bound_factor(desc: &SparsityDescriptor, samples: usize, k_phi: f64) -> f64 {
    desc.n_components() as f64 / samples as f64 * (desc.effective_dimensionality() as f64 + k_phi)
}

/// Measured gradient variance next to its bound at one `lambda`.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceReport {
    pub samples: usize,
    pub d_star: usize,
    pub k_phi: f64,
    pub empirical: f64,
    pub stderr: f64,
    pub bound: f64,
    /// Per-component contributions to `bound`; they sum to it.
    pub terms: Vec<f64>,
}

impl VarianceReport {
    /// `empirical <= bound * (1 + se_slack * stderr / empirical)`.
    pub fn within_bound(&self, se_slack: f64) -> bool {
        self.empirical <= self.bound * (1.0 + se_slack * self.stderr / self.empirical)
    }

    /// `family,n,M,d_star,k_phi,empirical,stderr,bound`
    pub fn csv_row(&self, family: &str, n: usize) -> String {
        format!(
            "{family},{n},{},{},{:?},{:?},{:?},{:?}",
            self.samples, self.d_star, self.k_phi, self.empirical, self.stderr, self.bound
        )
    }
}

pub const VARIANCE_HEADER: &str = "family,n,M,d_star,k_phi,empirical,stderr,bound";

pub fn variance_report<R: Rng + ?Sized>(
    params: &VariationalParams,
    target: &dyn Target,
    base: BaseDistribution,
    samples: usize,
    outer: usize,
    rng: &mut R,
) -> Result<VarianceReport> {
    let desc = SparsityDescriptor::new(params.structure(), target.components().all())?;
    let k_phi = base.kurtosis();
    let factor = bound_factor(&desc, samples.max(1), k_phi);
    let terms: Vec<f64> = variance_bound_terms(params, target, &desc)?
        .into_iter()
        .map(|t| t * factor)
        .collect();
    let (empirical, stderr) =
        empirical_gradient_variance(params, target, base, samples, outer, rng)?;
    Ok(VarianceReport {
        samples,
        d_star: desc.effective_dimensionality(),
        k_phi,
        empirical,
        stderr,
        bound: terms.iter().sum(),
        terms,
    })
}

/// Constants of the fixed-stepsize complexity bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComplexityConstants {
    pub c_var: f64,
    pub c_bias: f64,
}

impl ComplexityConstants {
    /// `max(C_var / eps, C_bias) * log(2 Delta_0^2 / eps)`.
    pub fn predicted_iterations(&self, eps: f64, delta0: f64) -> f64 {
        (self.c_var / eps).max(self.c_bias) * (2.0 * delta0 * delta0 / eps).ln()
    }
}

/// `C_var = 4 (N/M)(d* + k) sum kappa_n^2 (||m*_n - zbar_n||^2 + ||C*_n||_F^2)`
/// and `C_bias = 2 (N/M)(d* + k) sum kappa_n^2 + kappa`.
pub fn complexity_constants(
    target: &dyn Target,
    desc: &SparsityDescriptor,
    samples: usize,
    optimum: &VariationalParams,
    k_phi: f64,
) -> Result<ComplexityConstants> {
    if samples == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let smooth = smoothness_constants(target).map_err(unsupported)?;
    let mu = smooth.strong_convexity;
    if !(mu > 0.0) {
        return Err(Error::Unsupported("target is not strongly convex".into()));
    }
    let factor = bound_factor(desc, samples, k_phi);
    // terms carry L_n^2; dividing by mu^2 turns them into kappa_n^2
    let var_sum: f64 = variance_bound_terms(optimum, target, desc)?
        .iter()
        .sum::<f64>()
        / (mu * mu);
    let kappa_sq: f64 = smooth.per_component.iter().map(|l| (l / mu).powi(2)).sum();
    Ok(ComplexityConstants {
        c_var: 4.0 * factor * var_sum,
        c_bias: 2.0 * factor * kappa_sq + smooth.total / mu,
    })
}

/// First four sample moments of a base distribution against `(0, 1, 0, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentReport {
    pub estimates: [f64; 4],
    pub stderr: [f64; 4],
    pub expected: [f64; 4],
}

impl MomentReport {
    pub fn pass(&self) -> bool {
        (0..4).all(|k| (self.estimates[k] - self.expected[k]).abs() <= 4.0 * self.stderr[k])
    }
}

pub fn base_moment_check<R: Rng + ?Sized>(
    dist: BaseDistribution,
    s: usize,
    rng: &mut R,
) -> Result<MomentReport> {
    if s < 1000 {
        return Err(Error::invalid("moment audit needs at least 1000 draws"));
    }
    let draws = sample_base(dist, s, rng);
    let mut estimates = [0.0; 4];
    let mut stderr = [0.0; 4];
    for k in 0..4 {
        let p = (k + 1) as i32;
        let vals: Vec<f64> = draws.iter().map(|u| u.powi(p)).collect();
        let (m, se) = mean_and_se(&vals);
        estimates[k] = m;
        stderr[k] = se;
    }
    Ok(MomentReport {
        estimates,
        stderr,
        expected: [0.0, 1.0, 0.0, dist.kurtosis()],
    })
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Monte Carlo `E ||A u||^2` next to `||A||_F^2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceIdentity {
    pub estimate: f64,
    pub exact: f64,
    pub stderr: f64,
}

impl TraceIdentity {
    pub fn pass(&self) -> bool {
        (self.estimate - self.exact).abs() <= 5.0 * self.stderr
    }
}

pub fn trace_identity_check<R: Rng + ?Sized>(
    a: &DMatrix<f64>,
    dist: BaseDistribution,
    s: usize,
    rng: &mut R,
) -> Result<TraceIdentity> {
    if s < 1000 {
        return Err(Error::invalid(
            "trace identity check needs at least 1000 draws",
        ));
    }
    let mut vals = Vec::with_capacity(s);
    for _ in 0..s {
        let u = nalgebra::DVector::from_vec(sample_base(dist, a.ncols(), rng));
        vals.push((a * u).norm_squared());
    }
    let (estimate, stderr) = mean_and_se(&vals);
    Ok(TraceIdentity {
        estimate,
        exact: a.norm_squared(),
        stderr,
    })
}

/// `f(x, y, z) = x^2 + z^2 + x^2 y^2`.
pub fn nonconvex_energy(x: f64, y: f64, z: f64) -> f64 {
    x * x + z * z + x * x * y * y
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NonconvexProbe {
    pub energy: f64,
    pub hessian: Matrix3<f64>,
    pub det: f64,
    pub min_eigenvalue: f64,
}

impl NonconvexProbe {
    /// `x,y,z,energy,det,min_eig`
    pub fn csv_row(&self, x: f64, y: f64, z: f64) -> String {
        format!(
            "{x:?},{y:?},{z:?},{:?},{:?},{:?}",
            self.energy, self.det, self.min_eigenvalue
        )
    }
}

pub const NONCONVEX_HEADER: &str = "x,y,z,energy,det,min_eig";

/// Analytic Hessian of [`nonconvex_energy`] and its spectrum summary.
/// `det = 8 x^2 (1 - 3 y^2)`, negative exactly when `x != 0` and `|y| > 1/sqrt 3`.
pub fn nonconvexity_probe(x: f64, y: f64, z: f64) -> NonconvexProbe {
    let hessian = Matrix3::new(
        2.0 + 2.0 * y * y,
        4.0 * x * y,
        0.0,
        4.0 * x * y,
        2.0 * x * x,
        0.0,
        0.0,
        0.0,
        2.0,
    );
    let min_eigenvalue = hessian.symmetric_eigen().eigenvalues.min();
    NonconvexProbe {
        energy: nonconvex_energy(x, y, z),
        hessian,
        det: 8.0 * x * x * (1.0 - 3.0 * y * y),
        min_eigenvalue,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::Init;
    use crate::scale::{ScaleMatrix, Structure};
    use crate::targets::{FiniteSumQuadratic, GlobalPrior, SyntheticIsotropicHierarchical};

    #[test]
    fn trace_variance_of_identical_samples_is_zero() {
        let (v, _) = trace_variance(2, |_| Ok(vec![1.0, 2.0])).unwrap();
        assert_eq!(v, 0.0);
        let (v, se) = trace_variance(5, |_| Ok(vec![3.0])).unwrap();
        assert_eq!((v, se), (0.0, 0.0));
        assert!(trace_variance(1, |_| Ok(vec![1.0])).is_err());
    }

    #[test]
    fn jackknife_matches_brute_force() {
        let xs = [
            vec![1.0, 0.5],
            vec![2.0, -1.0],
            vec![4.0, 0.0],
            vec![0.0, 3.0],
            vec![1.5, 1.5],
        ];
        let tr = |rows: &[&Vec<f64>]| -> f64 {
            let n = rows.len() as f64;
            (0..2)
                .map(|k| {
                    let m = rows.iter().map(|r| r[k]).sum::<f64>() / n;
                    rows.iter().map(|r| (r[k] - m).powi(2)).sum::<f64>() / (n - 1.0)
                })
                .sum()
        };
        let all: Vec<&Vec<f64>> = xs.iter().collect();
        let loo: Vec<f64> = (0..xs.len())
            .map(|i| {
                let rest: Vec<&Vec<f64>> = xs
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, r)| r)
                    .collect();
                tr(&rest)
            })
            .collect();
        let n = xs.len() as f64;
        let lbar = loo.iter().sum::<f64>() / n;
        let se = ((n - 1.0) / n * loo.iter().map(|l| (l - lbar).powi(2)).sum::<f64>()).sqrt();
        let (v, s) = trace_variance(xs.len(), |i| Ok(xs[i].clone())).unwrap();
        assert!((v - tr(&all)).abs() < 1e-12);
        assert!((s - se).abs() < 1e-12);
    }

    #[test]
    fn linear_target_variance_is_one_over_m() {
        // l(z) = z: grad_m = 1 exactly, grad_c = mean of u over M draws
        let t = LinearTarget(crate::targets::ComponentStructure::new(1, vec![vec![0]]).unwrap());
        let p = VariationalParams::new(vec![0.3], ScaleMatrix::diagonal(vec![1.7])).unwrap();
        let mut rng = crate::rng::stream(11);
        for m in [1usize, 4] {
            let (v, se) = empirical_gradient_variance(
                &p,
                &t,
                BaseDistribution::StandardGaussian,
                m,
                4000,
                &mut rng,
            )
            .unwrap();
            assert!((v - 1.0 / m as f64).abs() < 4.0 * se, "M={m}: {v} +- {se}");
        }
    }

    struct LinearTarget(crate::targets::ComponentStructure);

    impl Target for LinearTarget {
        fn dim(&self) -> usize {
            1
        }
        fn components(&self) -> &crate::targets::ComponentStructure {
            &self.0
        }
        fn eval_component(&self, _n: usize, z: &[f64], g: &mut [f64]) -> Result<f64> {
            g[0] = 1.0;
            Ok(z[0])
        }
    }

    #[test]
    fn bound_factor_examples() {
        let t = SyntheticIsotropicHierarchical::with_blocks(4, GlobalPrior::Once).unwrap();
        let s = crate::family::Family::Structured.structure_for(&t).unwrap();
        let desc = SparsityDescriptor::new(s, t.components().all()).unwrap();
        assert_eq!(desc.effective_dimensionality() as f64 + 3.0, 11.0);
        let full = Structure::DenseLowerTriangular { dim: t.dim() };
        let desc = SparsityDescriptor::new(full, t.components().all()).unwrap();
        assert_eq!(desc.effective_dimensionality(), t.dim());
    }

    #[test]
    fn bound_vanishes_at_centers_with_zero_scale() {
        let t = SyntheticIsotropicHierarchical::with_blocks(3, GlobalPrior::Once).unwrap();
        let s = Structure::Diagonal { dim: t.dim() };
        let p = VariationalParams::new(vec![5.0; t.dim()], ScaleMatrix::zeros(s)).unwrap();
        let desc = SparsityDescriptor::new(s, t.components().all()).unwrap();
        assert_eq!(
            theoretical_variance_bound(&p, &t, &desc, 8, 3.0).unwrap(),
            0.0
        );
    }

    #[test]
    fn bound_requires_quadratic_metadata() {
        let t = LinearTarget(crate::targets::ComponentStructure::new(1, vec![vec![0]]).unwrap());
        let p = VariationalParams::init(Structure::Diagonal { dim: 1 }, Init::StandardGaussian);
        let desc = SparsityDescriptor::new(p.structure(), t.components().all()).unwrap();
        let r = theoretical_variance_bound(&p, &t, &desc, 1, 3.0);
        assert!(matches!(r, Err(Error::Unsupported(_))));
    }

    #[test]
    fn complexity_constants_on_synthetic_target() {
        let t = SyntheticIsotropicHierarchical::with_blocks(10, GlobalPrior::Once).unwrap();
        let s = crate::family::Family::Structured.structure_for(&t).unwrap();
        let (m, c) = t.optimum(s);
        let opt = VariationalParams::new(m, c).unwrap();
        let desc = SparsityDescriptor::new(s, t.components().all()).unwrap();
        let k = complexity_constants(&t, &desc, 8, &opt, 3.0).unwrap();
        // kappa_n = kappa = 1 when every L_n equals mu
        let factor = 10.0 / 8.0 * 11.0;
        assert!((k.c_bias - (2.0 * factor * 10.0 + 1.0)).abs() < 1e-9);
        let cn: f64 = (0..10)
            .map(|n| opt.scale.frobenius_norm_sq_component(&desc, n))
            .sum();
        assert!((k.c_var - 4.0 * factor * cn).abs() < 1e-9 * k.c_var);
        let k16 = complexity_constants(&t, &desc, 16, &opt, 3.0).unwrap();
        assert!(k16.predicted_iterations(1.0, 10.0) <= k.predicted_iterations(1.0, 10.0));
    }

    #[test]
    fn moment_checks() {
        let mut rng = crate::rng::stream(5);
        let g = base_moment_check(BaseDistribution::StandardGaussian, 100_000, &mut rng).unwrap();
        assert!(g.pass(), "{g:?}");
        assert!((g.estimates[3] - 3.0).abs() < 0.1);
        let u = base_moment_check(BaseDistribution::ScaledUniform, 100_000, &mut rng).unwrap();
        assert!(u.pass(), "{u:?}");
        assert!((u.estimates[3] - 1.8).abs() < 0.05);
        assert!(base_moment_check(BaseDistribution::ScaledUniform, 10, &mut rng).is_err());
    }

    #[test]
    fn trace_identity_cases() {
        let mut rng = crate::rng::stream(6);
        let zero = trace_identity_check(
            &DMatrix::zeros(3, 3),
            BaseDistribution::StandardGaussian,
            1000,
            &mut rng,
        )
        .unwrap();
        assert_eq!((zero.estimate, zero.exact), (0.0, 0.0));
        let id = trace_identity_check(
            &DMatrix::identity(4, 4),
            BaseDistribution::ScaledUniform,
            5000,
            &mut rng,
        )
        .unwrap();
        assert_eq!(id.exact, 4.0);
        assert!(id.pass());
    }

    #[test]
    fn probe_examples() {
        let p = nonconvexity_probe(1.0, 0.0, 0.0);
        assert_eq!(p.det, 8.0);
        assert!(p.min_eigenvalue > 0.0);
        let q = nonconvexity_probe(1.0, 1.0, 1.0);
        assert_eq!(q.det, -16.0);
        assert!(q.min_eigenvalue < 0.0);
        assert!((q.hessian.determinant() - q.det).abs() < 1e-12);
        let r = nonconvexity_probe(2.0, 1.0 / 3f64.sqrt(), 0.0);
        assert!(r.det.abs() < 1e-12);
        assert_eq!(
            q.csv_row(1.0, 1.0, 1.0),
            "1.0,1.0,1.0,3.0,-16.0,".to_string() + &format!("{:?}", q.min_eigenvalue)
        );
    }

    #[test]
    fn report_row_layout() {
        let t = FiniteSumQuadratic::factorized(&[1.0, 2.0], &[0.0, 1.0]).unwrap();
        let p = VariationalParams::init(Structure::Diagonal { dim: 2 }, Init::StandardGaussian);
        let mut rng = crate::rng::stream(2);
        let r =
            variance_report(&p, &t, BaseDistribution::StandardGaussian, 4, 200, &mut rng).unwrap();
        assert_eq!(r.d_star, 1);
        assert!((r.terms.iter().sum::<f64>() - r.bound).abs() < 1e-12);
        assert!(r
            .csv_row("mean_field", 2)
            .starts_with("mean_field,2,4,1,3.0,"));
        assert!(r.within_bound(3.0));
    }
}
