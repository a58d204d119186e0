//! M-sample reparameterization gradient of the energy `f(lambda) = E l(T_lambda(u))`.

use rand::Rng;

use crate::error::{check_len, Error, Result};
use crate::family::{sample_base_batch, BaseDistribution, VariationalParams};
use crate::scale::{SampleBatch, ScaleMatrix, SparsityDescriptor};
use crate::targets::Target;

/// Gradient shaped exactly like the optimized `(m, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientEstimate {
    pub location: Vec<f64>,
    pub scale: ScaleMatrix,
}

impl GradientEstimate {
    pub fn zeros_like(params: &VariationalParams) -> Self {
        Self {
            location: vec![0.0; params.dim()],
            scale: ScaleMatrix::zeros(params.structure()),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.location.clone();
        v.extend_from_slice(self.scale.values());
        v
    }

    pub fn norm_sq(&self) -> f64 {
        self.location.iter().map(|v| v * v).sum::<f64>() + self.scale.frobenius_norm_sq()
    }
}

/// `G[:, s] = grad l(z_s)` for every column of `z`, summing scattered
/// component gradients.
pub fn target_gradient_batch(target: &dyn Target, z: &SampleBatch) -> Result<SampleBatch> {
    check_len("target dimension", target.dim(), z.dim())?;
    let comps = target.components();
    let mut g = SampleBatch::zeros(z.dim(), z.width());
    let mut sub = Vec::new();
    let mut gsub = Vec::new();
    for s in 0..z.width() {
        for n in 0..comps.len() {
            let idx = comps.indices(n);
            sub.clear();
            sub.extend(idx.iter().map(|&i| z.get(i, s)));
            gsub.clear();
            gsub.resize(idx.len(), 0.0);
            target.eval_component(n, &sub, &mut gsub)?;
            for (&i, gi) in idx.iter().zip(&gsub) {
                let cur = g.get(i, s);
                g.set(i, s, cur + gi);
            }
        }
    }
    Ok(g)
}

/// Draws `u_1..u_M` once and reuses each across all components:
/// `g_M = (1/M) sum_m sum_n grad_lambda l_n(T^n_lambda(u_m))`.
pub fn estimate_energy_gradient<R: Rng + ?Sized>(
    params: &VariationalParams,
    target: &dyn Target,
    base: BaseDistribution,
    samples: usize,
    rng: &mut R,
) -> Result<GradientEstimate> {
    if samples == 0 {
        return Err(Error::invalid(
            "gradient estimator needs at least one sample",
        ));
    }
    let u = sample_base_batch(base, params.dim(), samples, rng);
    energy_gradient_from_noise(params, target, &u)
}

/// Deterministic part of [`estimate_energy_gradient`] for a fixed noise batch.
pub fn energy_gradient_from_noise(
    params: &VariationalParams,
    target: &dyn Target,
    u: &SampleBatch,
) -> Result<GradientEstimate> {
    let z = params.reparameterize_batch(u)?;
    let g = target_gradient_batch(target, &z)?;
    let inv = 1.0 / u.width() as f64;
    let mut out = GradientEstimate::zeros_like(params);
    for (i, gm) in out.location.iter_mut().enumerate() {
        *gm = g.row(i).iter().sum::<f64>() * inv;
    }
    out.scale.outer_accumulate_batch(&g, u, inv)?;
    Ok(out)
}

/// `1 + sum_j delta_{n,j} u_j^2`.
pub fn jacobian_factor(u: &[f64], desc: &SparsityDescriptor, n: usize) -> f64 {
    1.0 + desc.columns(n).iter().map(|&j| u[j] * u[j]).sum::<f64>()
}

/// Gradient of `l_n(T^n(u))` with respect to the parameters component `n`
/// can reach: the location entries on its rows, followed by `g_i u_j` for
/// every row `i` of the component and every column `j` with
/// `delta_{n,j} = 1`. `g_sub` is `grad l_n` in component coordinates.
pub fn component_parameter_gradient(
    g_sub: &[f64],
    u: &[f64],
    desc: &SparsityDescriptor,
    n: usize,
) -> Result<Vec<f64>> {
    check_len("component gradient", g_sub.len(), desc.rows(n).len())?;
    check_len("noise", u.len(), desc.dim())?;
    let cols = desc.columns(n);
    let mut out = Vec::with_capacity(g_sub.len() * (1 + cols.len()));
    out.extend_from_slice(g_sub);
    for &gi in g_sub {
        out.extend(cols.iter().map(|&j| gi * u[j]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::Init;
    use crate::scale::{BlockLayout, Structure};
    use crate::targets::{ComponentStructure, FiniteSumQuadratic, QuadraticComponent};
    use nalgebra::DMatrix;

    #[test]
    fn jacobian_factor_examples() {
        let layout = BlockLayout::new(1, 1, 2).unwrap();
        let comps = ComponentStructure::hierarchical(layout);
        let desc =
            SparsityDescriptor::new(Structure::BorderedBlockDiagonal(layout), comps.all()).unwrap();
        assert_eq!(jacobian_factor(&[0.0; 3], &desc, 0), 1.0);
        assert_eq!(jacobian_factor(&[2.0, 3.0, 5.0], &desc, 0), 14.0);

        let full = SparsityDescriptor::new(Structure::DenseLowerTriangular { dim: 3 }, &[vec![2]])
            .unwrap();
        let u = [1.0, 2.0, (2.0f64).sqrt()];
        assert!((jacobian_factor(&u, &full, 0) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn single_sample_matches_hand_computation() {
        // l(z) = 0.5 z^2, lambda = (m, c): grad_m = c u + m, grad_c = (c u + m) u
        let target = FiniteSumQuadratic::new(
            1,
            vec![QuadraticComponent {
                indices: vec![0],
                precision: DMatrix::identity(1, 1),
                center: vec![0.0],
            }],
        )
        .unwrap();
        let p = VariationalParams::new(vec![0.5], ScaleMatrix::diagonal(vec![2.0])).unwrap();
        let u = SampleBatch::from_samples(&[vec![1.5]]).unwrap();
        let g = energy_gradient_from_noise(&p, &target, &u).unwrap();
        assert_eq!(g.location, vec![3.5]);
        assert_eq!(g.scale.values(), &[3.5 * 1.5]);
    }

    #[test]
    fn zero_samples_rejected() {
        let target = FiniteSumQuadratic::factorized(&[1.0], &[0.0]).unwrap();
        let p = VariationalParams::init(Structure::Diagonal { dim: 1 }, Init::StandardGaussian);
        let mut rng = crate::rng::stream(0);
        assert!(estimate_energy_gradient(
            &p,
            &target,
            BaseDistribution::StandardGaussian,
            0,
            &mut rng
        )
        .is_err());
    }
}
