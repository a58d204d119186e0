use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_len, Error, Result};
use crate::scale::BlockLayout;
use crate::targets::{check_component, ComponentStructure, Smoothness, Target};

/// `l_n(x) = 0.5 (x - center)^T precision (x - center)` on the coordinates in
/// `indices`.
#[derive(Clone, Debug)]
pub struct QuadraticComponent {
    pub indices: Vec<usize>,
    pub precision: DMatrix<f64>,
    pub center: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct FiniteSumQuadratic {
    dim: usize,
    parts: Vec<QuadraticComponent>,
    components: ComponentStructure,
    layout: Option<BlockLayout>,
}

impl FiniteSumQuadratic {
    pub fn new(dim: usize, parts: Vec<QuadraticComponent>) -> Result<Self> {
        for (n, p) in parts.iter().enumerate() {
            let k = p.indices.len();
            if p.precision.nrows() != k || p.precision.ncols() != k {
                return Err(Error::invalid(format!(
                    "component {n}: precision must be {k}x{k}"
                )));
            }
            check_len("component center", p.center.len(), k)?;
            if (&p.precision - p.precision.transpose()).abs().max() > 1e-12 {
                return Err(Error::invalid(format!(
                    "component {n}: precision not symmetric"
                )));
            }
            if p.precision.clone().cholesky().is_none() {
                return Err(Error::invalid(format!(
                    "component {n}: precision not positive definite"
                )));
            }
        }
        let components =
            ComponentStructure::new(dim, parts.iter().map(|p| p.indices.clone()).collect())?;
        Ok(Self {
            dim,
            parts,
            components,
            layout: None,
        })
    }

    /// Attaches a global/local layout; component index sets must match it.
    pub fn with_layout(mut self, layout: BlockLayout) -> Result<Self> {
        if self.components != ComponentStructure::hierarchical(layout) {
            return Err(Error::invalid(
                "component index sets do not match the layout",
            ));
        }
        self.layout = Some(layout);
        Ok(self)
    }

    pub fn parts(&self) -> &[QuadraticComponent] {
        &self.parts
    }

    /// Random SPD components on a hierarchical layout, with eigenvalues of
    /// every precision in roughly `[1, cond]`.
    pub fn random_hierarchical<R: Rng>(
        layout: BlockLayout,
        cond: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let parts = (0..layout.n_blocks())
            .map(|n| {
                let indices = layout.component_indices(n);
                let k = indices.len();
                QuadraticComponent {
                    indices,
                    precision: random_spd(k, cond, rng),
                    center: (0..k)
                        .map(|_| rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                }
            })
            .collect();
        Self::new(layout.dim(), parts)?.with_layout(layout)
    }

    /// `n_components` random SPD terms, each over every coordinate.
    pub fn random_dense<R: Rng>(
        dim: usize,
        n_components: usize,
        cond: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let parts = (0..n_components)
            .map(|_| QuadraticComponent {
                indices: (0..dim).collect(),
                precision: random_spd(dim, cond, rng),
                center: (0..dim)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            })
            .collect();
        Self::new(dim, parts)
    }

    /// Fully factorized target: component `i` is `0.5 a_i (x_i - c_i)^2`.
    pub fn factorized(curvatures: &[f64], centers: &[f64]) -> Result<Self> {
        check_len("centers", centers.len(), curvatures.len())?;
        let parts = curvatures
            .iter()
            .zip(centers)
            .enumerate()
            .map(|(i, (&a, &c))| QuadraticComponent {
                indices: vec![i],
                precision: DMatrix::from_element(1, 1, a),
                center: vec![c],
            })
            .collect();
        Self::new(curvatures.len(), parts)
    }
}

fn random_spd<R: Rng>(k: usize, cond: f64, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(k, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = g.qr().q();
    let eig = DVector::from_fn(k, |i, _| {
        if k == 1 {
            cond
        } else {
            cond.powf(i as f64 / (k - 1) as f64)
        }
    });
    let m = &q * DMatrix::from_diagonal(&eig) * q.transpose();
    (&m + m.transpose()) * 0.5
}

impl Target for FiniteSumQuadratic {
    fn dim(&self) -> usize {
        self.dim
    }

    fn components(&self) -> &ComponentStructure {
        &self.components
    }

    fn eval_component(&self, n: usize, z_sub: &[f64], grad: &mut [f64]) -> Result<f64> {
        check_component(self, n, z_sub, grad)?;
        let p = &self.parts[n];
        let k = p.indices.len();
        let mut value = 0.0;
        for i in 0..k {
            let mut gi = 0.0;
            for j in 0..k {
                gi += p.precision[(i, j)] * (z_sub[j] - p.center[j]);
            }
            grad[i] = gi;
            value += 0.5 * (z_sub[i] - p.center[i]) * gi;
        }
        Ok(value)
    }

    fn layout(&self) -> Option<BlockLayout> {
        self.layout
    }

    fn is_quadratic(&self) -> bool {
        true
    }

    fn stationary_hint(&self) -> Option<Vec<Vec<f64>>> {
        Some(self.parts.iter().map(|p| p.center.clone()).collect())
    }

    fn smoothness_hint(&self) -> Option<Smoothness> {
        None
    }
}
