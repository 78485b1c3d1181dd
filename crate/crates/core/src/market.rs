//! Seeded price dynamics.
//!
//! Each asset follows a geometric Brownian motion with optional
//! compound-Poisson jumps in log space, one step per epoch. Diffusion shocks
//! can be correlated through a Cholesky factor of a correlation matrix.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MarketError {
    #[error("asset {0}: volatility, jump intensity and jump std must be finite and non-negative")]
    InvalidAsset(usize),
    #[error("correlation matrix is {got}x{got}, expected {expected}x{expected}")]
    Dimension { expected: usize, got: usize },
    #[error("correlation matrix is not positive semidefinite")]
    NotPositiveDefinite,
}

/// Per-epoch dynamics of one asset's external price.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssetDynamics {
    #[serde(default)]
    pub drift: f64,
    #[serde(default)]
    pub volatility: f64,
    /// Expected jumps per epoch.
    #[serde(default)]
    pub jump_intensity: f64,
    /// Mean log-size of a jump.
    #[serde(default)]
    pub jump_mean: f64,
    #[serde(default)]
    pub jump_std: f64,
}

impl AssetDynamics {
    fn validate(&self, k: usize) -> Result<(), MarketError> {
        let ok = self.drift.is_finite()
            && self.volatility.is_finite()
            && self.volatility >= 0.0
            && self.jump_intensity.is_finite()
            && self.jump_intensity >= 0.0
            && self.jump_mean.is_finite()
            && self.jump_std.is_finite()
            && self.jump_std >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(MarketError::InvalidAsset(k))
        }
    }
}

/// Sampler of joint log-returns for a fixed asset list.
#[derive(Debug, Clone)]
pub struct ReturnModel {
    assets: Vec<AssetDynamics>,
    chol: Option<DMatrix<f64>>,
}

impl ReturnModel {
    /// `correlation` is row-major and must match the asset count; `None`
    /// means independent shocks.
    pub fn new(
        assets: Vec<AssetDynamics>,
        correlation: Option<&[Vec<f64>]>,
    ) -> Result<Self, MarketError> {
        for (k, a) in assets.iter().enumerate() {
            a.validate(k)?;
        }
        let n = assets.len();
        let chol = match correlation {
            None => None,
            Some(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(MarketError::Dimension {
                        expected: n,
                        got: rows.len(),
                    });
                }
                Some(square_root_factor(DMatrix::from_fn(n, n, |i, j| {
                    rows[i][j]
                }))?)
            }
        };
        Ok(Self { assets, chol })
    }

    pub fn len(&self) -> usize {
        self.assets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assets.is_empty()
    }

    pub fn assets(&self) -> &[AssetDynamics] {
        &self.assets
    }

    /// One epoch of log-returns, written into `out`.
    pub fn sample_step<R: Rng>(&self, rng: &mut R, out: &mut [f64]) {
        let n = self.assets.len();
        let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for i in 0..n {
            let shock = match &self.chol {
                Some(l) => (0..n).map(|j| l[(i, j)] * z[j]).sum::<f64>(),
                None => z[i],
            };
            let a = &self.assets[i];
            let mut r = a.drift - 0.5 * a.volatility * a.volatility + a.volatility * shock;
            if a.jump_intensity > 0.0 {
                let count: f64 = Poisson::new(a.jump_intensity)
                    .map(|p| p.sample(rng))
                    .unwrap_or(0.0);
                if count > 0.0 {
                    let jump = Normal::new(a.jump_mean * count, a.jump_std * count.sqrt())
                        .map(|d| d.sample(rng))
                        .unwrap_or(a.jump_mean * count);
                    r += jump;
                }
            }
            out[i] = r;
        }
    }

    /// Sum of `steps` consecutive log-returns.
    pub fn sample_horizon<R: Rng>(&self, rng: &mut R, steps: u32, out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        let mut step = vec![0.0; self.assets.len()];
        for _ in 0..steps.max(1) {
            self.sample_step(rng, &mut step);
            for (o, s) in out.iter_mut().zip(&step) {
                *o += s;
            }
        }
    }
}

/// Lower-triangular `L` with `L·Lᵀ = m`. Singular PSD matrices fall back to
/// the symmetric square root, which is not triangular but serves the same
/// purpose for sampling.
fn square_root_factor(m: DMatrix<f64>) -> Result<DMatrix<f64>, MarketError> {
    if let Some(c) = m.clone().cholesky() {
        return Ok(c.l());
    }
    let eig = m.symmetric_eigen();
    if eig.eigenvalues.iter().any(|l| *l < -1e-9) {
        return Err(MarketError::NotPositiveDefinite);
    }
    let sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * sqrt * eig.eigenvectors.transpose())
}

/// Generator seeded from `seed` on its own stream, so that independent
/// consumers of one seed never share draws.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub const PRICE_STREAM: u64 = 1;

/// External price path: `horizon + 1` rows, the first equal to `initial`.
pub fn generate_price_path(
    initial: &[f64],
    model: &ReturnModel,
    horizon: u64,
    seed: u64,
) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(seed, PRICE_STREAM);
    let mut path = Vec::with_capacity(horizon as usize + 1);
    path.push(initial.to_vec());
    let mut step = vec![0.0; initial.len()];
    for t in 0..horizon as usize {
        model.sample_step(&mut rng, &mut step);
        let next = path[t]
            .iter()
            .zip(&step)
            .map(|(p, r)| p * r.exp())
            .collect();
        path.push(next);
    }
    path
}
