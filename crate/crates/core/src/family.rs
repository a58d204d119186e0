//! Location-scale variational families `z = C u + m` with `u ~ phi`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_len, Error, Result};
use crate::scale::{BlockLayout, SampleBatch, ScaleMatrix, Structure};
use crate::targets::Target;

const SQRT_3: f64 = 1.732_050_807_568_877_2;

/// Standardized, symmetric base distribution `phi`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BaseDistribution {
    #[default]
    StandardGaussian,
    /// Uniform on `[-sqrt 3, sqrt 3]`.
    ScaledUniform,
}

impl BaseDistribution {
    /// `E u^4`.
    pub fn kurtosis(&self) -> f64 {
        match self {
            BaseDistribution::StandardGaussian => 3.0,
            BaseDistribution::ScaledUniform => 9.0 / 5.0,
        }
    }

    /// Differential entropy of one coordinate.
    pub fn entropy_per_coordinate(&self) -> f64 {
        match self {
            BaseDistribution::StandardGaussian => {
                0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln()
            }
            BaseDistribution::ScaledUniform => (2.0 * SQRT_3).ln(),
        }
    }

    #[inline]
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            BaseDistribution::StandardGaussian => rng.sample(StandardNormal),
            BaseDistribution::ScaledUniform => rng.gen_range(-SQRT_3..=SQRT_3),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BaseDistribution::StandardGaussian => "gaussian",
            BaseDistribution::ScaledUniform => "uniform",
        }
    }
}

/// `d` independent draws from `dist`.
pub fn sample_base<R: Rng + ?Sized>(dist: BaseDistribution, d: usize, rng: &mut R) -> Vec<f64> {
    (0..d).map(|_| dist.draw(rng)).collect()
}

/// `width` base vectors, drawn sample by sample, stored coordinate-major.
pub fn sample_base_batch<R: Rng + ?Sized>(
    dist: BaseDistribution,
    d: usize,
    width: usize,
    rng: &mut R,
) -> SampleBatch {
    let mut batch = SampleBatch::zeros(d, width);
    for s in 0..width {
        for i in 0..d {
            batch.set(i, s, dist.draw(rng));
        }
    }
    batch
}

/// Which scale structure a family uses on a given target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    MeanField,
    FullRank,
    Structured,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::MeanField, Family::FullRank, Family::Structured];

    pub fn name(&self) -> &'static str {
        match self {
            Family::MeanField => "mean_field",
            Family::FullRank => "full_rank",
            Family::Structured => "structured",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "mean_field" | "mean-field" | "meanfield" => Some(Family::MeanField),
            "full_rank" | "full-rank" | "fullrank" => Some(Family::FullRank),
            "structured" => Some(Family::Structured),
            _ => None,
        }
    }

    /// Scale structure on a `dim`-dimensional target; the structured family
    /// needs a block layout.
    pub fn structure(&self, dim: usize, layout: Option<BlockLayout>) -> Result<Structure> {
        match self {
            Family::MeanField => Ok(Structure::Diagonal { dim }),
            Family::FullRank => Ok(Structure::DenseLowerTriangular { dim }),
            Family::Structured => {
                let layout = layout.ok_or_else(|| {
                    Error::Unsupported("structured family needs a global/local layout".into())
                })?;
                check_len("layout dimension", layout.dim(), dim)?;
                Ok(Structure::BorderedBlockDiagonal(layout))
            }
        }
    }

    pub fn structure_for(&self, target: &dyn Target) -> Result<Structure> {
        self.structure(target.dim(), target.layout())
    }
}

/// Initial variational distribution.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum Init {
    /// `m = 0`, `C = I`.
    #[default]
    StandardGaussian,
    /// `m = 0`, `C = sd I`.
    Isotropic { sd: f64 },
}

/// `lambda = (m, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalParams {
    pub location: Vec<f64>,
    pub scale: ScaleMatrix,
}

impl VariationalParams {
    pub fn new(location: Vec<f64>, scale: ScaleMatrix) -> Result<Self> {
        check_len("location", location.len(), scale.dim())?;
        Ok(Self { location, scale })
    }

    pub fn init(structure: Structure, init: Init) -> Self {
        let d = structure.dim();
        let scale = match init {
            Init::StandardGaussian => ScaleMatrix::identity(structure),
            Init::Isotropic { sd } => ScaleMatrix::scaled_identity(structure, sd),
        };
        Self {
            location: vec![0.0; d],
            scale,
        }
    }

    pub fn dim(&self) -> usize {
        self.location.len()
    }

    pub fn structure(&self) -> Structure {
        self.scale.structure()
    }

    pub fn param_count(&self) -> usize {
        self.dim() + self.scale.values().len()
    }

    /// `T_lambda(u) = C u + m`.
    pub fn reparameterize(&self, u: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.scale.matvec(u)?;
        for (zi, mi) in z.iter_mut().zip(&self.location) {
            *zi += mi;
        }
        Ok(z)
    }

    pub fn reparameterize_batch(&self, u: &SampleBatch) -> Result<SampleBatch> {
        let mut z = self.scale.matmul_batch(u)?;
        for (i, &m) in self.location.iter().enumerate() {
            z.row_mut(i).iter_mut().for_each(|v| *v += m);
        }
        Ok(z)
    }

    /// `h(lambda) = -log det C`, the entropy without the base constant.
    pub fn negative_entropy(&self) -> Result<f64> {
        Ok(-self.scale.log_det_diag()?)
    }

    /// Full differential entropy of `q_lambda`, for absolute ELBO reporting.
    pub fn entropy(&self, base: BaseDistribution) -> Result<f64> {
        Ok(self.scale.log_det_diag()? + self.dim() as f64 * base.entropy_per_coordinate())
    }

    /// `||m - m*||^2 + ||C - C*||_F^2`. Identical structures compare stored
    /// entries; differing structures of the same dimension compare dense
    /// expansions.
    pub fn distance_sq(&self, other: &VariationalParams) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::invalid(format!(
                "cannot compare parameters of dimension {} and {}",
                self.dim(),
                other.dim()
            )));
        }
        let dm: f64 = self
            .location
            .iter()
            .zip(&other.location)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let dc = if self.structure() == other.structure() {
            self.scale.distance_sq(&other.scale)?
        } else {
            (self.scale.to_dense() - other.scale.to_dense()).norm_squared()
        };
        Ok(dm + dc)
    }

    /// Flattened `(m, C entries)` view, used for variance bookkeeping.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.location.clone();
        v.extend_from_slice(self.scale.values());
        v
    }
}

/// Free-function form of [`VariationalParams::distance_sq`].
pub fn param_distance_sq(a: &VariationalParams, b: &VariationalParams) -> Result<f64> {
    a.distance_sq(b)
}

/// Monte Carlo ELBO `-(1/M) sum_m l(T(u_m)) + H(q)` with the full entropy.
pub fn elbo_estimate<R: Rng + ?Sized>(
    params: &VariationalParams,
    target: &dyn Target,
    base: BaseDistribution,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::invalid("ELBO needs at least one sample"));
    }
    check_len("target dimension", target.dim(), params.dim())?;
    let entropy = params.entropy(base)?;
    let comps = target.components();
    let mut energy = 0.0;
    let mut sub = Vec::new();
    let mut grad = Vec::new();
    for _ in 0..samples {
        let u = sample_base(base, params.dim(), rng);
        let z = params.reparameterize(&u)?;
        for n in 0..comps.len() {
            let idx = comps.indices(n);
            sub.clear();
            sub.extend(idx.iter().map(|&i| z[i]));
            grad.resize(idx.len(), 0.0);
            energy += target.eval_component(n, &sub, &mut grad)?;
        }
    }
    Ok(-energy / samples as f64 + entropy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::scale::BlockLayout;

    #[test]
    fn reparameterize_examples() {
        let id = VariationalParams::init(Structure::Diagonal { dim: 3 }, Init::StandardGaussian);
        assert_eq!(
            id.reparameterize(&[1.0, -2.0, 0.5]).unwrap(),
            vec![1.0, -2.0, 0.5]
        );

        let p = VariationalParams::new(vec![5.0], ScaleMatrix::diagonal(vec![2.0])).unwrap();
        assert_eq!(p.reparameterize(&[1.0]).unwrap(), vec![7.0]);

        let layout = BlockLayout::new(1, 1, 2).unwrap();
        let c = ScaleMatrix::from_values(
            Structure::BorderedBlockDiagonal(layout),
            vec![2.0, 1.0, 3.0, -1.0, 4.0],
        )
        .unwrap();
        let p = VariationalParams::new(vec![1.0; 3], c).unwrap();
        assert_eq!(
            p.reparameterize(&[1.0, 1.0, 2.0]).unwrap(),
            vec![3.0, 5.0, 8.0]
        );
        assert!(p.reparameterize(&[1.0]).is_err());
    }

    #[test]
    fn entropy_examples() {
        let id = VariationalParams::init(Structure::Diagonal { dim: 2 }, Init::StandardGaussian);
        assert_eq!(id.negative_entropy().unwrap(), 0.0);
        let e = VariationalParams::new(vec![0.0], ScaleMatrix::diagonal(vec![std::f64::consts::E]))
            .unwrap();
        assert!((e.negative_entropy().unwrap() + 1.0).abs() < 1e-15);
        let h = id.entropy(BaseDistribution::StandardGaussian).unwrap();
        assert!((h - 2.837_877_066_409_345).abs() < 1e-12);
        let bad = VariationalParams::new(vec![0.0], ScaleMatrix::diagonal(vec![-1.0])).unwrap();
        assert!(matches!(
            bad.negative_entropy(),
            Err(Error::DomainViolation(_))
        ));
    }

    #[test]
    fn distance_examples() {
        let a = VariationalParams::new(vec![0.0], ScaleMatrix::diagonal(vec![1.0])).unwrap();
        let b =
            VariationalParams::new(vec![5.0], ScaleMatrix::diagonal(vec![0.1f64.sqrt()])).unwrap();
        assert_eq!(a.distance_sq(&a).unwrap(), 0.0);
        let d = a.distance_sq(&b).unwrap();
        assert!((d - (25.0 + (1.0 - 0.1f64.sqrt()).powi(2))).abs() < 1e-12);
        assert!((d - 25.467_544).abs() < 1e-6);
        assert_eq!(d, b.distance_sq(&a).unwrap());

        let dense = VariationalParams::init(
            Structure::DenseLowerTriangular { dim: 1 },
            Init::StandardGaussian,
        );
        assert!((dense.distance_sq(&b).unwrap() - d).abs() < 1e-12);
        let other = VariationalParams::init(Structure::Diagonal { dim: 2 }, Init::StandardGaussian);
        assert!(a.distance_sq(&other).is_err());
    }

    #[test]
    fn uniform_support() {
        let mut rng = stream(1);
        let u = sample_base(BaseDistribution::ScaledUniform, 10_000, &mut rng);
        assert!(u.iter().all(|x| x.abs() <= SQRT_3));
    }

    #[test]
    fn family_names_parse() {
        for f in Family::ALL {
            assert_eq!(Family::parse(f.name()), Some(f));
        }
        assert_eq!(Family::parse("bogus"), None);
        assert!(Family::Structured.structure(4, None).is_err());
    }
}
