//! State estimation from measured observables: linear inversion, Bayesian
//! mean estimation by Metropolis–Hastings over Ginibre matrices, and
//! bootstrap error bars.

use rand::Rng;
use rand_distr::{Binomial, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{condition_number, pseudoinverse, AffineMap, Provenance};
use crate::dynamics::MeasurementRecord;
use crate::error::{Error, Result};
use crate::fock::{param_count, DensityMatrix, ParamVector};
use crate::linalg::{c, eigh, hermitize, min_eigenvalue, CMatrix, RVector};
use crate::seed;

/// Singular-value ratio below which `M` is refused for inversion.
pub const INVERSION_RCOND: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct LinearEstimate {
    pub y: ParamVector,
    /// Hermitian, unit trace, possibly not positive.
    pub rho_ls: CMatrix,
    pub min_eigenvalue: f64,
}

/// `Y = M⁺(X − V)`; `M⁺ = M⁻¹` when `M` is square.
pub fn linear_invert(beta: &AffineMap, x: &RVector) -> Result<LinearEstimate> {
    if x.len() != beta.n_obs() {
        return Err(Error::DimensionMismatch {
            expected: beta.n_obs(),
            found: x.len(),
        });
    }
    let m_plus = pseudoinverse(beta.m()).map_err(|_| Error::IllConditioned(condition_number(beta.m())))?;
    let y = ParamVector::new(beta.dim(), m_plus * (x - beta.v()))?;
    let rho_ls = y.to_matrix();
    Ok(LinearEstimate {
        min_eigenvalue: min_eigenvalue(&rho_ls),
        y,
        rho_ls,
    })
}

/// Closest density matrix in Frobenius norm: eigenvalues projected onto the
/// probability simplex.
pub fn project_to_physical(m: &CMatrix) -> Result<DensityMatrix> {
    let (values, vectors) = eigh(&hermitize(m));
    let mut sorted: Vec<f64> = values.iter().copied().collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut shift = 0.0;
    for (i, &v) in sorted.iter().enumerate() {
        cumulative += v;
        let candidate = (cumulative - 1.0) / (i + 1) as f64;
        if v - candidate > 0.0 {
            shift = candidate;
        }
    }
    let mut scaled = vectors.clone();
    for (j, &v) in values.iter().enumerate() {
        scaled.column_mut(j).scale_mut((v - shift).max(0.0));
    }
    DensityMatrix::new(hermitize(&(scaled * vectors.adjoint())))
}

/// Eigenvalues of `rho_ls` below zero set to zero, then renormalised.
pub fn clipped_estimate(rho_ls: &CMatrix) -> Result<DensityMatrix> {
    DensityMatrix::from_clipped(rho_ls, 0.0)
}

/// Reading of the pseudo-likelihood width `1/N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `σ = 1/N`.
    #[default]
    StdDev,
    /// `σ² = 1/N`.
    Variance,
}

/// Distance used in the Gaussian pseudo-likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodKind {
    /// `‖ρ − ρ_LS‖_F`.
    #[default]
    Frobenius,
    /// `‖X − β[1; Y(ρ)]‖₂` over the measured observables.
    Observables,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McmcConfig {
    pub n_samples: usize,
    pub thinning: usize,
    /// Overrides the width derived from `N`.
    pub sigma: Option<f64>,
    pub sigma_mode: SigmaMode,
    pub likelihood: LikelihoodKind,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            n_samples: 1 << 10,
            thinning: 1 << 7,
            sigma: None,
            sigma_mode: SigmaMode::StdDev,
            likelihood: LikelihoodKind::Frobenius,
            seed: 0,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.thinning == 0 {
            return Err(Error::InvalidArgument("sample count and thinning must be positive".into()));
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::InvalidArgument("sigma must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn sigma_for(&self, n_effective: f64) -> f64 {
        self.sigma.unwrap_or(match self.sigma_mode {
            SigmaMode::StdDev => 1.0 / n_effective,
            SigmaMode::Variance => (1.0 / n_effective).sqrt(),
        })
    }
}

/// Acceptance window enforced on the post-burn-in chain.
pub const ACCEPTANCE_WINDOW: (f64, f64) = (0.05, 0.8);
const TARGET_ACCEPTANCE: (f64, f64) = (0.2, 0.4);
const ADAPT_EVERY: usize = 100;

#[derive(Debug, Clone)]
pub struct BayesEstimate {
    pub rho: DensityMatrix,
    pub acceptance_rate: f64,
    pub n_samples: usize,
    /// Root-mean-square Frobenius distance of kept samples from their mean.
    pub spread: f64,
    pub step: f64,
}

/// Data the pseudo-likelihood is centred on.
pub enum Evidence<'a> {
    Matrix(&'a CMatrix),
    Observables { beta: &'a AffineMap, x: &'a RVector },
}

fn ginibre_state_of(g: &CMatrix) -> CMatrix {
    let rho = g * g.adjoint();
    let tr = rho.trace().re;
    rho.unscale(tr)
}

/// Bayesian mean over the Hilbert–Schmidt prior with a Gaussian
/// pseudo-likelihood of width `σ`, sampled by preconditioned
/// Crank–Nicolson moves on the Ginibre matrix.
pub fn bayesian_mean(evidence: Evidence<'_>, dim: usize, n_effective: f64, cfg: &McmcConfig) -> Result<BayesEstimate> {
    cfg.validate()?;
    if !(n_effective > 0.0) {
        return Err(Error::InvalidArgument("effective sample count must be positive".into()));
    }
    let sigma = cfg.sigma_for(n_effective);
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);
    let (centre, log_likelihood): (CMatrix, Box<dyn Fn(&CMatrix) -> f64 + Sync + '_>) = match evidence {
        Evidence::Matrix(rho_ls) => {
            if rho_ls.nrows() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: rho_ls.nrows(),
                });
            }
            let centre = hermitize(rho_ls);
            let target = centre.clone();
            (centre, Box::new(move |rho: &CMatrix| -(rho - &target).norm_squared() * inv_two_var))
        }
        Evidence::Observables { beta, x } => {
            if beta.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: beta.dim(),
                });
            }
            let centre = linear_invert(beta, x)?.rho_ls;
            (
                centre,
                Box::new(move |rho: &CMatrix| match ParamVector::of_matrix(rho) {
                    Ok(y) => -(x - (beta.v() + beta.m() * y.values())).norm_squared() * inv_two_var,
                    Err(_) => f64::NEG_INFINITY,
                }),
            )
        }
    };

    let warm = project_to_physical(&centre)?;
    let floored = DensityMatrix::from_clipped(
        &crate::linalg::hermitian_function(warm.matrix(), |v| v.max(sigma.min(1.0 / dim as f64))),
        0.0,
    )?;
    let mut g = crate::linalg::psd_sqrt(floored.matrix(), 0.0).scale(dim as f64);
    let mut rho = ginibre_state_of(&g);
    let mut ll = log_likelihood(&rho);

    let mut rng = seed::rng(cfg.seed);
    let kept_steps = cfg.n_samples * cfg.thinning;
    let burn_in = kept_steps / 3;
    // a pCN move of size β shifts ρ by roughly β/D
    let mut beta_step: f64 = (sigma * dim as f64).min(0.5);
    let mut window_accepts = 0usize;
    let mut accepted = 0usize;
    let mut mean = CMatrix::zeros(dim, dim);
    let mut second = 0.0;
    let mut samples = 0usize;

    for step in 0..burn_in + kept_steps {
        let xi = CMatrix::from_fn(dim, dim, |_, _| {
            c(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)).unscale(2f64.sqrt())
        });
        let g_new = g.scale((1.0 - beta_step * beta_step).sqrt()) + xi.scale(beta_step);
        let rho_new = ginibre_state_of(&g_new);
        let ll_new = log_likelihood(&rho_new);
        let accept = ll_new >= ll || rng.random::<f64>().ln() < ll_new - ll;
        if accept {
            g = g_new;
            rho = rho_new;
            ll = ll_new;
        }
        if step < burn_in {
            window_accepts += accept as usize;
            if (step + 1) % ADAPT_EVERY == 0 {
                let rate = window_accepts as f64 / ADAPT_EVERY as f64;
                if rate < TARGET_ACCEPTANCE.0 {
                    beta_step *= 0.6;
                } else if rate > TARGET_ACCEPTANCE.1 {
                    beta_step = (beta_step * 1.5).min(1.0);
                }
                window_accepts = 0;
            }
            continue;
        }
        accepted += accept as usize;
        if (step - burn_in + 1) % cfg.thinning == 0 {
            mean += &rho;
            second += rho.norm_squared();
            samples += 1;
        }
    }
    let rate = accepted as f64 / kept_steps as f64;
    log::debug!("BME chain: acceptance {rate:.3}, pCN step {beta_step:.3e}, σ {sigma:.3e}");
    if rate < ACCEPTANCE_WINDOW.0 || rate > ACCEPTANCE_WINDOW.1 {
        return Err(Error::PoorMixing(rate));
    }
    let mean = mean.unscale(samples as f64);
    let spread = (second / samples as f64 - mean.norm_squared()).max(0.0).sqrt();
    let rho = DensityMatrix::from_clipped(&hermitize(&mean), -1e-12)?;
    Ok(BayesEstimate {
        rho,
        acceptance_rate: rate,
        n_samples: samples,
        spread,
        step: beta_step,
    })
}

/// `N = shots · (D² − 1)`.
pub fn effective_count(shots: u64, dim: usize) -> f64 {
    shots as f64 * param_count(dim) as f64
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub linear: LinearEstimate,
    pub bayes: BayesEstimate,
}

/// Linear inversion followed by the Bayesian mean with `N = shots·(D²−1)`.
pub fn reconstruct_state(beta: &AffineMap, x: &RVector, shots: u64, cfg: &McmcConfig) -> Result<Reconstruction> {
    let linear = linear_invert(beta, x)?;
    let n = effective_count(shots, beta.dim());
    let evidence = match cfg.likelihood {
        LikelihoodKind::Frobenius => Evidence::Matrix(&linear.rho_ls),
        LikelihoodKind::Observables => Evidence::Observables { beta, x },
    };
    let bayes = bayesian_mean(evidence, beta.dim(), n, cfg)?;
    Ok(Reconstruction { linear, bayes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub target_id: String,
    pub map_provenance: Provenance,
    pub fidelity: f64,
    #[serde(rename = "min_eig_LS")]
    pub min_eig_ls: f64,
    pub n_samples: usize,
    pub acceptance_rate: f64,
    pub seed: u64,
}

impl ReconstructionReport {
    pub fn new(target_id: &str, map: &AffineMap, fidelity: f64, rec: &Reconstruction, seed: u64) -> Self {
        Self {
            target_id: target_id.to_string(),
            map_provenance: map.provenance,
            fidelity,
            min_eig_ls: rec.linear.min_eigenvalue,
            n_samples: rec.bayes.n_samples,
            acceptance_rate: rec.bayes.acceptance_rate,
            seed,
        }
    }
}

/// Smallest number of resamples accepted by [`bootstrap`].
pub const MIN_RESAMPLES: usize = 100;

/// Resample the per-shot outcomes behind every record: each record's
/// excited count is redrawn from `Binomial(shots, count/shots)`. Records
/// with `shots = 0` are exact and kept as they are.
pub fn resample_records<R: Rng + ?Sized>(records: &[MeasurementRecord], rng: &mut R) -> Result<Vec<MeasurementRecord>> {
    records
        .iter()
        .map(|r| {
            if r.shots == 0 {
                return Ok(r.clone());
            }
            let p = (r.excited() as f64 / r.shots as f64).clamp(0.0, 1.0);
            let draw: u64 = rng.sample(Binomial::new(r.shots, p).map_err(|e| Error::InvalidArgument(e.to_string()))?);
            Ok(MeasurementRecord {
                x: 2.0 * draw as f64 / r.shots as f64 - 1.0,
                ..r.clone()
            })
        })
        .collect()
}

/// Mean and standard deviation of a vector of statistics over `b`
/// bootstrap resamples.
pub fn bootstrap_many<F>(records: &[MeasurementRecord], b: usize, statistic: F, seed: u64) -> Result<Vec<(f64, f64)>>
where
    F: Fn(&[MeasurementRecord]) -> Result<Vec<f64>> + Sync,
{
    if b < MIN_RESAMPLES {
        return Err(Error::InvalidArgument(format!("at least {MIN_RESAMPLES} resamples required")));
    }
    let values: Vec<Vec<f64>> = (0..b)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::rng(seed::derive(seed, &[i as u64]));
            statistic(&resample_records(records, &mut rng)?)
        })
        .collect::<Result<_>>()?;
    let width = values[0].len();
    if values.iter().any(|v| v.len() != width) {
        return Err(Error::InvalidArgument("statistic length varies between resamples".into()));
    }
    Ok((0..width)
        .map(|j| {
            let mean = values.iter().map(|v| v[j]).sum::<f64>() / b as f64;
            let var = values.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>() / (b - 1) as f64;
            (mean, var.sqrt())
        })
        .collect())
}

pub fn bootstrap<F>(records: &[MeasurementRecord], b: usize, statistic: F, seed: u64) -> Result<(f64, f64)>
where
    F: Fn(&[MeasurementRecord]) -> Result<f64> + Sync,
{
    Ok(bootstrap_many(records, b, |r| Ok(vec![statistic(r)?]), seed)?[0])
}

/// Observable vector of one state from its records, ordered by `k`.
pub fn observables_of(records: &[MeasurementRecord], state_id: &str, n_obs: usize) -> Result<RVector> {
    let mut x = RVector::from_element(n_obs, f64::NAN);
    for r in records.iter().filter(|r| r.state_id == state_id) {
        if r.k < n_obs {
            x[r.k] = r.x;
        }
    }
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument(format!("incomplete records for {state_id}")));
    }
    Ok(x)
}
