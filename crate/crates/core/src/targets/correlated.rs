use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_len, Error, Result};
use crate::scale::BlockLayout;
use crate::targets::{check_component, ComponentStructure, Target};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Model settings for [`CorrelatedHierarchicalGaussian`].
#[derive(Clone, Debug)]
pub struct CorrelatedConfig {
    pub d_z: usize,
    pub d_y: usize,
    pub n_blocks: usize,
    pub prior_sd: f64,
    /// Marginal sd of each local coordinate given `z`.
    pub local_sd: f64,
    /// Correlation between local coordinates given `z`.
    pub local_corr: f64,
    pub obs_sd: f64,
    /// Scale of the random global-to-local coupling matrix `A`.
    pub coupling_scale: f64,
}

impl Default for CorrelatedConfig {
    fn default() -> Self {
        Self {
            d_z: 2,
            d_y: 2,
            n_blocks: 5,
            prior_sd: 1.0,
            local_sd: 0.7,
            local_corr: 0.4,
            obs_sd: 0.5,
            coupling_scale: 0.7,
        }
    }
}

/// `z ~ N(mu0, s0^2 I)`, `y_n | z ~ N(A z + b, S_y)`, `x_n | y_n ~ N(y_n, s_x^2 I)`.
///
/// Component `n` carries the `n`-th local and observation terms plus a `1/N`
/// share of the prior, so the sum is the exact negative log joint.
#[derive(Clone, Debug)]
pub struct CorrelatedHierarchicalGaussian {
    layout: BlockLayout,
    prior_mean: DVector<f64>,
    prior_sd: f64,
    coupling: DMatrix<f64>,
    offset: DVector<f64>,
    local_cov: DMatrix<f64>,
    local_prec: DMatrix<f64>,
    local_log_det: f64,
    obs_sd: f64,
    observations: Vec<DVector<f64>>,
    components: ComponentStructure,
}

/// Exact Gaussian posterior of a [`CorrelatedHierarchicalGaussian`].
#[derive(Clone, Debug)]
pub struct PosteriorOracle {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub precision: DMatrix<f64>,
    pub log_evidence: f64,
}

impl CorrelatedHierarchicalGaussian {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        layout: BlockLayout,
        prior_mean: DVector<f64>,
        prior_sd: f64,
        coupling: DMatrix<f64>,
        offset: DVector<f64>,
        local_cov: DMatrix<f64>,
        obs_sd: f64,
        observations: Vec<DVector<f64>>,
    ) -> Result<Self> {
        let (dz, dy) = (layout.d_z(), layout.d_y());
        check_len("prior mean", prior_mean.len(), dz)?;
        check_len("offset", offset.len(), dy)?;
        check_len("observations", observations.len(), layout.n_blocks())?;
        for x in &observations {
            check_len("observation", x.len(), dy)?;
        }
        if coupling.nrows() != dy || coupling.ncols() != dz {
            return Err(Error::invalid(format!("coupling matrix must be {dy}x{dz}")));
        }
        if local_cov.nrows() != dy || local_cov.ncols() != dy {
            return Err(Error::invalid(format!(
                "local covariance must be {dy}x{dy}"
            )));
        }
        if !(prior_sd > 0.0 && obs_sd > 0.0) {
            return Err(Error::invalid("standard deviations must be positive"));
        }
        let chol = local_cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::invalid("local covariance is not positive definite"))?;
        let local_log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let local_prec = chol.inverse();
        Ok(Self {
            layout,
            prior_mean,
            prior_sd,
            coupling,
            offset,
            local_cov,
            local_prec,
            local_log_det,
            obs_sd,
            observations,
            components: ComponentStructure::hierarchical(layout),
        })
    }

    /// Draws model constants and observations from the generative process.
    pub fn generate<R: Rng>(config: &CorrelatedConfig, rng: &mut R) -> Result<Self> {
        let layout = BlockLayout::new(config.d_z, config.d_y, config.n_blocks)?;
        let (dz, dy) = (config.d_z, config.d_y);
        let mut normal = |s: f64| s * rng.sample::<f64, _>(StandardNormal);
        let coupling = DMatrix::from_fn(dy, dz, |_, _| normal(config.coupling_scale));
        let offset = DVector::from_fn(dy, |_, _| normal(0.5));
        let local_cov = DMatrix::from_fn(dy, dy, |i, j| {
            let s2 = config.local_sd * config.local_sd;
            if i == j {
                s2
            } else {
                s2 * config.local_corr
            }
        });
        let prior_mean = DVector::zeros(dz);
        let l_local = local_cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::invalid("local covariance is not positive definite"))?
            .l();
        let z = DVector::from_fn(dz, |i, _| prior_mean[i] + normal(config.prior_sd));
        let observations = (0..config.n_blocks)
            .map(|_| {
                let e = DVector::from_fn(dy, |_, _| normal(1.0));
                let y = &coupling * &z + &offset + &l_local * e;
                DVector::from_fn(dy, |i, _| y[i] + normal(config.obs_sd))
            })
            .collect();
        Self::new(
            layout,
            prior_mean,
            config.prior_sd,
            coupling,
            offset,
            local_cov,
            config.obs_sd,
            observations,
        )
    }

    /// Replaces the observations; `rows.len()` must equal the number of blocks.
    pub fn with_observations(mut self, rows: Vec<Vec<f64>>) -> Result<Self> {
        check_len("observations", rows.len(), self.layout.n_blocks())?;
        for r in &rows {
            check_len("observation", r.len(), self.layout.d_y())?;
        }
        self.observations = rows.into_iter().map(DVector::from_vec).collect();
        Ok(self)
    }

    pub fn observations(&self) -> &[DVector<f64>] {
        &self.observations
    }

    pub fn coupling(&self) -> &DMatrix<f64> {
        &self.coupling
    }

    pub fn local_cov(&self) -> &DMatrix<f64> {
        &self.local_cov
    }

    pub fn block_layout(&self) -> BlockLayout {
        self.layout
    }

    /// Dense joint-Gaussian posterior and log evidence.
    ///
    /// The negative log joint is assembled as `0.5 x^T P x - h^T x + c`, so
    /// the posterior is `N(P^-1 h, P^-1)` and
    /// `log p(x) = -c + 0.5 h^T P^-1 h + d/2 log 2pi - 0.5 log det P`.
    pub fn posterior_oracle(&self) -> Result<PosteriorOracle> {
        let d = self.layout.dim();
        if d > 2000 {
            return Err(Error::Unsupported(format!(
                "dense posterior limited to d <= 2000, got {d}"
            )));
        }
        let (dz, dy) = (self.layout.d_z(), self.layout.d_y());
        let mut p = DMatrix::<f64>::zeros(d, d);
        let mut h = DVector::<f64>::zeros(d);
        let mut c = 0.0;

        let s0 = self.prior_sd * self.prior_sd;
        for i in 0..dz {
            p[(i, i)] += 1.0 / s0;
            h[i] += self.prior_mean[i] / s0;
        }
        c += 0.5 * dz as f64 * (LN_2PI + s0.ln()) + 0.5 * self.prior_mean.norm_squared() / s0;

        let a = &self.coupling;
        let py = &self.local_prec;
        let at_py = a.transpose() * py;
        let at_py_a = &at_py * a;
        let py_b = py * &self.offset;
        let at_py_b = a.transpose() * &py_b;
        let sx = self.obs_sd * self.obs_sd;
        for (n, x) in self.observations.iter().enumerate() {
            let s = self.layout.local_start(n);
            for i in 0..dz {
                for j in 0..dz {
                    p[(i, j)] += at_py_a[(i, j)];
                }
                for j in 0..dy {
                    p[(i, s + j)] -= at_py[(i, j)];
                    p[(s + j, i)] -= at_py[(i, j)];
                }
                h[i] -= at_py_b[i];
            }
            for i in 0..dy {
                for j in 0..dy {
                    p[(s + i, s + j)] += py[(i, j)];
                }
                p[(s + i, s + i)] += 1.0 / sx;
                h[s + i] += py_b[i] + x[i] / sx;
            }
            c += 0.5 * (dy as f64 * LN_2PI + self.local_log_det)
                + 0.5 * self.offset.dot(&py_b)
                + 0.5 * dy as f64 * (LN_2PI + sx.ln())
                + 0.5 * x.norm_squared() / sx;
        }

        let chol = p.clone().cholesky().ok_or_else(|| {
            Error::Numerical("assembled posterior precision is not positive definite".into())
        })?;
        let mean = chol.solve(&h);
        let covariance = chol.inverse();
        let log_det_p = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let log_evidence = -c + 0.5 * h.dot(&mean) + 0.5 * d as f64 * LN_2PI - 0.5 * log_det_p;
        Ok(PosteriorOracle {
            mean,
            covariance,
            precision: p,
            log_evidence,
        })
    }

    /// Reads one observation per line, `d_y` comma-separated decimals each.
    pub fn load_observations_csv(path: &Path, d_y: usize) -> Result<Vec<Vec<f64>>> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let mut rows = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            let row = rec
                .iter()
                .map(|f| {
                    f.parse::<f64>().map_err(|e| Error::Csv {
                        path: path.to_path_buf(),
                        message: format!("line {}: `{f}`: {e}", line + 1),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if row.len() != d_y {
                return Err(Error::Csv {
                    path: path.to_path_buf(),
                    message: format!(
                        "line {}: expected {d_y} values, got {}",
                        line + 1,
                        row.len()
                    ),
                });
            }
            rows.push(row);
        }
        Ok(rows)
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        if let csv::ErrorKind::Io(io) = e.into_kind() {
            return Error::Io {
                path: path.to_path_buf(),
                source: io,
            };
        }
        unreachable!()
    }
    Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

impl Target for CorrelatedHierarchicalGaussian {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn components(&self) -> &ComponentStructure {
        &self.components
    }

    fn eval_component(&self, n: usize, z_sub: &[f64], grad: &mut [f64]) -> Result<f64> {
        check_component(self, n, z_sub, grad)?;
        let (dz, dy) = (self.layout.d_z(), self.layout.d_y());
        let share = 1.0 / self.layout.n_blocks() as f64;
        let (z, y) = z_sub.split_at(dz);
        let (gz, gy) = grad.split_at_mut(dz);
        let s0 = self.prior_sd * self.prior_sd;
        let sx = self.obs_sd * self.obs_sd;
        let x = &self.observations[n];

        let mut value = share
            * (0.5 * dz as f64 * (LN_2PI + s0.ln())
                + (0..dz)
                    .map(|i| (z[i] - self.prior_mean[i]).powi(2))
                    .sum::<f64>()
                    / (2.0 * s0));
        for i in 0..dz {
            gz[i] = share * (z[i] - self.prior_mean[i]) / s0;
        }

        // residual r = y - A z - b, weighted w = S_y^-1 r
        let r: Vec<f64> = (0..dy)
            .map(|i| {
                y[i] - self.offset[i] - (0..dz).map(|j| self.coupling[(i, j)] * z[j]).sum::<f64>()
            })
            .collect();
        let w: Vec<f64> = (0..dy)
            .map(|i| (0..dy).map(|j| self.local_prec[(i, j)] * r[j]).sum())
            .collect();
        value += 0.5 * (dy as f64 * LN_2PI + self.local_log_det)
            + 0.5 * r.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        for j in 0..dz {
            gz[j] -= (0..dy).map(|i| self.coupling[(i, j)] * w[i]).sum::<f64>();
        }

        value += 0.5 * dy as f64 * (LN_2PI + sx.ln());
        for i in 0..dy {
            let e = y[i] - x[i];
            value += e * e / (2.0 * sx);
            gy[i] = w[i] + e / sx;
        }
        Ok(value)
    }

    fn layout(&self) -> Option<BlockLayout> {
        Some(self.layout)
    }

    fn is_quadratic(&self) -> bool {
        true
    }
}
