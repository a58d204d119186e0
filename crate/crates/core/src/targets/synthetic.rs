use crate::error::Result;
use crate::scale::{BlockLayout, ScaleMatrix, Structure};
use crate::targets::{check_component, neg_log_normal_iso, ComponentStructure, Smoothness, Target};

/// How the global Gaussian term enters the finite sum.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlobalPrior {
    /// Every component carries the full global term, so the aggregate global
    /// precision is `N / variance`.
    PerComponent,
    /// The global term appears once in the sum, split evenly as a `1/N`
    /// share per component.
    Once,
}

impl GlobalPrior {
    pub fn name(&self) -> &'static str {
        match self {
            GlobalPrior::PerComponent => "per_component",
            GlobalPrior::Once => "once",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "per_component" => Some(GlobalPrior::PerComponent),
            "once" => Some(GlobalPrior::Once),
            _ => None,
        }
    }
}

/// Isotropic Gaussian with a hierarchical index structure:
/// `l_n(y_n, z) = -log N(y_n; mean 1, var I) - w log N(z; mean 1, var I)`
/// where `w` is 1 or `1/N` depending on [`GlobalPrior`].
#[derive(Clone, Debug)]
pub struct SyntheticIsotropicHierarchical {
    layout: BlockLayout,
    mean: f64,
    variance: f64,
    global: GlobalPrior,
    components: ComponentStructure,
}

impl SyntheticIsotropicHierarchical {
    pub const DEFAULT_MEAN: f64 = 5.0;
    pub const DEFAULT_VARIANCE: f64 = 0.1;

    pub fn new(layout: BlockLayout, mean: f64, variance: f64, global: GlobalPrior) -> Self {
        assert!(variance > 0.0, "variance must be positive");
        Self {
            layout,
            mean,
            variance,
            global,
            components: ComponentStructure::hierarchical(layout),
        }
    }

    /// Defaults `d_z = 5`, `d_y = 3`, mean 5, variance 0.1.
    pub fn with_blocks(n_blocks: usize, global: GlobalPrior) -> Result<Self> {
        Ok(Self::new(
            BlockLayout::new(5, 3, n_blocks)?,
            Self::DEFAULT_MEAN,
            Self::DEFAULT_VARIANCE,
            global,
        ))
    }

    pub fn block_layout(&self) -> BlockLayout {
        self.layout
    }

    pub fn global_prior(&self) -> GlobalPrior {
        self.global
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    fn global_weight(&self) -> f64 {
        match self.global {
            GlobalPrior::PerComponent => 1.0,
            GlobalPrior::Once => 1.0 / self.layout.n_blocks() as f64,
        }
    }

    /// Posterior variance of each global coordinate.
    pub fn global_posterior_variance(&self) -> f64 {
        self.variance / (self.global_weight() * self.layout.n_blocks() as f64)
    }

    /// ELBO-optimal parameters within `structure`: the exact posterior, which
    /// is diagonal and therefore representable by every structure.
    pub fn optimum(&self, structure: Structure) -> (Vec<f64>, ScaleMatrix) {
        let d = self.layout.dim();
        let mut c = ScaleMatrix::scaled_identity(structure, self.variance.sqrt());
        let global_sd = self.global_posterior_variance().sqrt();
        for i in 0..self.layout.d_z() {
            *c.diag_mut(i) = global_sd;
        }
        (vec![self.mean; d], c)
    }
}

impl Target for SyntheticIsotropicHierarchical {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn components(&self) -> &ComponentStructure {
        &self.components
    }

    fn eval_component(&self, n: usize, z_sub: &[f64], grad: &mut [f64]) -> Result<f64> {
        check_component(self, n, z_sub, grad)?;
        let dz = self.layout.d_z();
        let w = self.global_weight();
        let prec = 1.0 / self.variance;
        let (z, y) = z_sub.split_at(dz);
        let (gz, gy) = grad.split_at_mut(dz);
        for (g, v) in gz.iter_mut().zip(z) {
            *g = w * prec * (v - self.mean);
        }
        for (g, v) in gy.iter_mut().zip(y) {
            *g = prec * (v - self.mean);
        }
        Ok(neg_log_normal_iso(y, self.mean, self.variance)
            + w * neg_log_normal_iso(z, self.mean, self.variance))
    }

    fn layout(&self) -> Option<BlockLayout> {
        Some(self.layout)
    }

    fn is_quadratic(&self) -> bool {
        true
    }

    fn smoothness_hint(&self) -> Option<Smoothness> {
        let prec = 1.0 / self.variance;
        let n = self.layout.n_blocks() as f64;
        let global = self.global_weight() * n * prec;
        let (lo, hi) = if self.layout.d_z() == 0 {
            (prec, prec)
        } else {
            (prec.min(global), prec.max(global))
        };
        Some(Smoothness {
            per_component: vec![prec.max(self.global_weight() * prec); self.layout.n_blocks()],
            total: hi,
            strong_convexity: lo,
        })
    }

    fn stationary_hint(&self) -> Option<Vec<Vec<f64>>> {
        let k = self.layout.d_z() + self.layout.d_y();
        Some(vec![vec![self.mean; k]; self.layout.n_blocks()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::{eval_component, smoothness_constants, stationary_points};

    #[test]
    fn stationary_at_the_mean() {
        let t = SyntheticIsotropicHierarchical::with_blocks(4, GlobalPrior::PerComponent).unwrap();
        let (v, g) = eval_component(&t, 2, &[5.0; 8]).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
        let expected = 4.0 * (2.0 * std::f64::consts::PI * 0.1f64).ln();
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn closed_form_constants_match_numerical() {
        for global in [GlobalPrior::PerComponent, GlobalPrior::Once] {
            let t = SyntheticIsotropicHierarchical::with_blocks(6, global).unwrap();
            let hint = smoothness_constants(&t).unwrap();
            assert!(hint.per_component.iter().all(|&l| (l - 10.0).abs() < 1e-12));
            assert!((hint.strong_convexity - 10.0).abs() < 1e-12);
            let eig = crate::targets::assembled_hessian(&t)
                .unwrap()
                .symmetric_eigen()
                .eigenvalues;
            assert!((eig.min() - hint.strong_convexity).abs() < 1e-9);
            assert!((eig.max() - hint.total).abs() < 1e-9);
        }
    }

    #[test]
    fn stationary_points_are_the_mean() {
        let t = SyntheticIsotropicHierarchical::with_blocks(3, GlobalPrior::PerComponent).unwrap();
        for p in stationary_points(&t).unwrap() {
            assert_eq!(p, vec![5.0; 8]);
        }
    }

    #[test]
    fn optimum_scales() {
        let t = SyntheticIsotropicHierarchical::with_blocks(10, GlobalPrior::PerComponent).unwrap();
        let (m, c) = t.optimum(Structure::Diagonal { dim: 35 });
        assert_eq!(m, vec![5.0; 35]);
        assert!((c.diag(0) - 0.01f64.sqrt()).abs() < 1e-15);
        assert!((c.diag(5) - 0.1f64.sqrt()).abs() < 1e-15);
        let t = SyntheticIsotropicHierarchical::with_blocks(10, GlobalPrior::Once).unwrap();
        let (_, c) = t.optimum(Structure::Diagonal { dim: 35 });
        assert!((c.diag(0) - 0.1f64.sqrt()).abs() < 1e-15);
    }
}
