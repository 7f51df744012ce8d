//! End-to-end pipelines: map learning studies, kitten-state tests and
//! reconstructions, shared by the command-line tool and the acceptance suite.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{build_idealised_map, optimize_displacements, AffineMap, DisplacementSet, OptimizeConfig, OptimizeResult};
use crate::dynamics::{DeviceParams, MeasurementRecord, ReadoutErrorModel, SequenceConfig};
use crate::error::{Error, Result};
use crate::fock::{fidelity, param_count, DensityMatrix, ParamVector};
use crate::learn::{
    self, acquire_training_set, kitten_states, map_mse, observable_mse, observable_square_errors, ridge_fit,
    AcquisitionConfig, Apparatus, LabelledState, NuPolicy, Perturbation, TrainingEntry, TrainingSet,
};
use crate::linalg::{c, RVector};
use crate::reconstruct::{bootstrap_many, observables_of, reconstruct_state, LikelihoodKind, McmcConfig, Reconstruction};
use crate::seed;

/// Seed-derivation roles, so that every random stream is independent.
mod role {
    pub const OPTIMIZE: u64 = 1;
    pub const TRAINING: u64 = 2;
    pub const TEST: u64 = 3;
    pub const CV: u64 = 4;
    pub const BOOTSTRAP: u64 = 5;
    pub const MCMC: u64 = 6;
}

/// Everything that defines a simulated experiment apart from `D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Settings {
    pub device: DeviceParams,
    pub sequence: SequenceConfig,
    pub readout: ReadoutErrorModel,
    pub shots: u64,
    pub degrade_strength: f64,
    pub optimize: OptimizeConfig,
    pub nu: NuPolicy,
    pub mcmc: McmcConfig,
    pub bootstrap_resamples: usize,
    pub kitten_alpha: f64,
    pub chi_rel: f64,
    pub higher_order_rel: f64,
    pub seed: u64,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            device: DeviceParams::default(),
            sequence: SequenceConfig::hardware(),
            readout: ReadoutErrorModel::default(),
            shots: 1000,
            degrade_strength: learn::DEFAULT_DEGRADE_STRENGTH,
            optimize: OptimizeConfig::default(),
            nu: NuPolicy::default(),
            // observable-space pseudo-likelihood, still centred on ρ_LS
            mcmc: McmcConfig {
                likelihood: LikelihoodKind::Observables,
                ..McmcConfig::default()
            },
            bootstrap_resamples: 200,
            kitten_alpha: 1.0,
            chi_rel: 0.02,
            higher_order_rel: 0.5,
            seed: 0,
        }
    }
}

impl Settings {
    /// Perfect operations, exact expectations, perfect preparation.
    pub fn idealised() -> Self {
        Self {
            sequence: SequenceConfig::idealised(),
            readout: ReadoutErrorModel::ideal(),
            shots: 0,
            degrade_strength: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.device.validate()?;
        self.sequence.validate()?;
        self.readout.validate()?;
        self.mcmc.validate()?;
        if self.degrade_strength < 0.0 || !self.degrade_strength.is_finite() {
            return Err(Error::InvalidArgument("degrade_strength must be non-negative".into()));
        }
        if self.optimize.restarts == 0 || !(self.optimize.step > 0.0) {
            return Err(Error::InvalidArgument("optimizer needs restarts > 0 and step > 0".into()));
        }
        if let NuPolicy::Fixed(nu) = self.nu {
            if !(nu >= 0.0) {
                return Err(Error::InvalidArgument("ν must be non-negative".into()));
            }
        }
        if let NuPolicy::CrossValidated { grid, folds } = &self.nu {
            if grid.is_empty() || grid.iter().any(|v| !(*v >= 0.0)) || *folds < 2 {
                return Err(Error::InvalidArgument("ν grid must be non-empty and non-negative, folds ≥ 2".into()));
            }
        }
        if self.bootstrap_resamples < crate::reconstruct::MIN_RESAMPLES {
            return Err(Error::InvalidArgument(format!(
                "bootstrap_resamples must be at least {}",
                crate::reconstruct::MIN_RESAMPLES
            )));
        }
        Ok(())
    }

    fn shots(&self) -> Option<u64> {
        (self.shots > 0).then_some(self.shots)
    }

    fn stream(&self, role: u64, dim: usize) -> u64 {
        seed::derive(self.seed, &[role, dim as u64])
    }

    pub fn acquisition(&self, dim: usize) -> AcquisitionConfig {
        AcquisitionConfig {
            sequence: self.sequence,
            readout: self.readout,
            shots: self.shots(),
            degrade_strength: self.degrade_strength,
            seed: self.stream(role::TRAINING, dim),
        }
    }

    pub fn mcmc_for(&self, dim: usize, index: u64) -> McmcConfig {
        McmcConfig {
            seed: seed::derive(self.stream(role::MCMC, dim), &[index]),
            ..self.mcmc
        }
    }
}

/// Condition-number-optimised displacements for `D`.
pub fn displacements(dim: usize, settings: &Settings) -> Result<OptimizeResult> {
    let cfg = OptimizeConfig {
        seed: settings.stream(role::OPTIMIZE, dim),
        ..settings.optimize
    };
    optimize_displacements(dim, &cfg)
}

/// Idealised and learnt maps for one displacement set.
#[derive(Debug, Clone)]
pub struct LearntMaps {
    pub apparatus: Apparatus,
    pub idealised: AffineMap,
    pub learnt: AffineMap,
    pub training: TrainingSet,
    pub nu: f64,
}

pub fn learn_maps(set: &DisplacementSet, settings: &Settings) -> Result<LearntMaps> {
    let dim = set.dim();
    let apparatus = Apparatus::new(set, &settings.device, &settings.sequence, &settings.readout)?;
    let acquisition = settings.acquisition(dim);
    let training = learn::measure_states(
        &apparatus,
        &learn::labelled_training_states(dim)?,
        &settings.device,
        &acquisition,
    )?;
    let nu = settings.nu.choose(&training, settings.stream(role::CV, dim))?;
    let learnt = ridge_fit(&training, nu)?;
    Ok(LearntMaps {
        apparatus,
        idealised: build_idealised_map(set, None)?,
        learnt,
        training,
        nu,
    })
}

/// Training set rebuilt from resampled records, keeping the `Y` vectors.
fn with_records(ts: &TrainingSet, records: &[MeasurementRecord]) -> Result<TrainingSet> {
    let n_obs = ts.n_obs();
    let entries = ts
        .entries
        .iter()
        .map(|e| {
            Ok(TrainingEntry {
                x: observables_of(records, &e.id, n_obs)?,
                ..e.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = TrainingSet::new(ts.dim, entries)?;
    out.alphas = ts.alphas.clone();
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct MapMseRow {
    #[serde(rename = "D")]
    pub dim: usize,
    pub mse: f64,
    pub stderr: f64,
    pub nu: f64,
    pub kappa: f64,
}

/// `map_mse(β_I, β_L)` with a bootstrap error bar over the training shots
/// (ν held at the selected value).
pub fn map_mse_study(maps: &LearntMaps, settings: &Settings) -> Result<MapMseRow> {
    let mse = map_mse(&maps.idealised, &maps.learnt)?;
    let stderr = if settings.shots() > Some(0) {
        let (_, se) = bootstrap_many(
            &maps.training.records,
            settings.bootstrap_resamples,
            |recs| {
                let ts = with_records(&maps.training, recs)?;
                Ok(vec![map_mse(&maps.idealised, &ridge_fit(&ts, maps.nu)?)?])
            },
            settings.stream(role::BOOTSTRAP, maps.training.dim),
        )?[0];
        se
    } else {
        0.0
    };
    Ok(MapMseRow {
        dim: maps.training.dim,
        mse,
        stderr,
        nu: maps.nu,
        kappa: crate::design::condition_number(maps.idealised.m()),
    })
}

/// Kitten states as prepared, and their measured records.
#[derive(Debug, Clone)]
pub struct TestData {
    pub states: Vec<LabelledState>,
    pub records: Vec<MeasurementRecord>,
    pub shots: u64,
}

impl TestData {
    pub fn observables(&self, id: &str, n_obs: usize) -> Result<RVector> {
        observables_of(&self.records, id, n_obs)
    }
}

/// Prepare (degrade) and measure the four kitten states with fresh seeds.
pub fn measure_kittens(apparatus: &Apparatus, settings: &Settings) -> Result<TestData> {
    let dim = apparatus.dim();
    let cfg = AcquisitionConfig {
        seed: settings.stream(role::TEST, dim),
        ..settings.acquisition(dim)
    };
    let kittens = kitten_states(c(settings.kitten_alpha, 0.0), dim)?;
    let measured = learn::measure_states(apparatus, &kittens, &settings.device, &cfg)?;
    let states = kittens
        .iter()
        .map(|k| {
            Ok(LabelledState {
                id: k.id.clone(),
                rho: learn::degrade_state(&k.rho, &settings.device, settings.degrade_strength)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TestData {
        states,
        records: measured.records,
        shots: settings.shots,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ObservableMseRow {
    pub state: String,
    pub mse_idealised: f64,
    pub stderr_idealised: f64,
    pub mse_learnt: f64,
    pub stderr_learnt: f64,
}

impl ObservableMseRow {
    /// Margin of the learnt-map improvement in units of the combined stderr.
    pub fn separation(&self) -> f64 {
        let se = self.stderr_idealised.hypot(self.stderr_learnt);
        (self.mse_idealised - self.mse_learnt) / se
    }
}

/// Observable MSE of each test state under both maps, with bootstrap
/// error bars over the test shots.
pub fn observable_mse_study(
    test: &TestData,
    idealised: &AffineMap,
    learnt: &AffineMap,
    settings: &Settings,
) -> Result<Vec<ObservableMseRow>> {
    let n_obs = idealised.n_obs();
    let ys: Vec<ParamVector> = test
        .states
        .iter()
        .map(|s| ParamVector::of_state(&s.rho))
        .collect::<Result<_>>()?;
    let stat = |recs: &[MeasurementRecord]| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(2 * ys.len());
        for (s, y) in test.states.iter().zip(&ys) {
            let x = observables_of(recs, &s.id, n_obs)?;
            out.push(observable_mse(&x, idealised, y)?);
            out.push(observable_mse(&x, learnt, y)?);
        }
        Ok(out)
    };
    let point = stat(&test.records)?;
    let errors = if test.shots > 0 {
        bootstrap_many(
            &test.records,
            settings.bootstrap_resamples,
            stat,
            settings.stream(role::BOOTSTRAP, idealised.dim() + 1000),
        )?
        .into_iter()
        .map(|(_, se)| se)
        .collect()
    } else {
        vec![0.0; point.len()]
    };
    Ok(test
        .states
        .iter()
        .enumerate()
        .map(|(i, s)| ObservableMseRow {
            state: s.id.clone(),
            mse_idealised: point[2 * i],
            stderr_idealised: errors[2 * i],
            mse_learnt: point[2 * i + 1],
            stderr_learnt: errors[2 * i + 1],
        })
        .collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct ObservableErrorRow {
    pub state: String,
    pub k: usize,
    pub alpha_abs: f64,
    pub alpha_re: f64,
    pub alpha_im: f64,
    pub sq_err_idealised: f64,
    pub sq_err_learnt: f64,
}

/// Per-observable squared errors, sorted by `|α_k|` within each state.
pub fn observable_error_table(
    test: &TestData,
    alphas: &[Complex64],
    idealised: &AffineMap,
    learnt: &AffineMap,
) -> Result<Vec<ObservableErrorRow>> {
    let n_obs = idealised.n_obs();
    let mut order: Vec<usize> = (0..n_obs).collect();
    order.sort_by(|&a, &b| alphas[a].norm().total_cmp(&alphas[b].norm()).then(a.cmp(&b)));
    let mut rows = Vec::new();
    for s in &test.states {
        let y = ParamVector::of_state(&s.rho)?;
        let x = test.observables(&s.id, n_obs)?;
        let ei = observable_square_errors(&x, idealised, &y)?;
        let el = observable_square_errors(&x, learnt, &y)?;
        for &k in &order {
            rows.push(ObservableErrorRow {
                state: s.id.clone(),
                k,
                alpha_abs: alphas[k].norm(),
                alpha_re: alphas[k].re,
                alpha_im: alphas[k].im,
                sq_err_idealised: ei[k],
                sq_err_learnt: el[k],
            });
        }
    }
    Ok(rows)
}

/// Simulated maps: the unperturbed model followed by the four sign
/// combinations of the configured relative errors.
pub fn simulated_band(set: &DisplacementSet, settings: &Settings) -> Result<Vec<(Perturbation, AffineMap)>> {
    let mut perturbations = vec![Perturbation::NONE];
    perturbations.extend(Perturbation::sign_combinations(settings.chi_rel, settings.higher_order_rel));
    let sim_sequence = SequenceConfig {
        decoherence: true,
        ..settings.sequence
    };
    perturbations
        .into_iter()
        .map(|p| {
            let map = learn::simulated_map(
                set,
                &settings.device,
                &p,
                &sim_sequence,
                &settings.nu,
                settings.stream(role::CV, set.dim()),
            )?;
            Ok((p, map))
        })
        .collect()
}

/// Reconstruct one measured state with a given map.
pub fn reconstruct_with(
    map: &AffineMap,
    test: &TestData,
    state_index: usize,
    settings: &Settings,
) -> Result<(Reconstruction, f64)> {
    let s = &test.states[state_index];
    let x = test.observables(&s.id, map.n_obs())?;
    let shots = if test.shots > 0 { test.shots } else { 1000 };
    let cfg = settings.mcmc_for(map.dim(), state_index as u64);
    let rec = reconstruct_state(map, &x, shots, &cfg)?;
    let f = fidelity(&rec.bayes.rho, &s.rho)?;
    Ok((rec, f))
}

#[derive(Debug, Clone, Serialize)]
pub struct FidelityRow {
    pub state: String,
    pub idealised: f64,
    pub learnt: f64,
    pub simulated_min: f64,
    pub simulated_max: f64,
    /// Fidelity with the unperturbed simulated map.
    pub simulated_nominal: f64,
}

#[derive(Debug, Clone)]
pub struct KittenReconstructions {
    pub rows: Vec<FidelityRow>,
    /// Estimates with the learnt map, per state.
    pub learnt_estimates: Vec<DensityMatrix>,
    pub idealised_estimates: Vec<DensityMatrix>,
}

/// Fidelities of the kitten reconstructions with the idealised, learnt and
/// simulated maps.
pub fn reconstruct_kittens(
    test: &TestData,
    idealised: &AffineMap,
    learnt: &AffineMap,
    band: &[(Perturbation, AffineMap)],
    settings: &Settings,
) -> Result<KittenReconstructions> {
    let per_state: Vec<Result<(FidelityRow, DensityMatrix, DensityMatrix)>> = (0..test.states.len())
        .into_par_iter()
        .map(|i| {
            let (rec_i, f_i) = reconstruct_with(idealised, test, i, settings)?;
            let (rec_l, f_l) = reconstruct_with(learnt, test, i, settings)?;
            let sims = band
                .iter()
                .map(|(_, m)| Ok(reconstruct_with(m, test, i, settings)?.1))
                .collect::<Result<Vec<f64>>>()?;
            let row = FidelityRow {
                state: test.states[i].id.clone(),
                idealised: f_i,
                learnt: f_l,
                simulated_min: sims.iter().copied().fold(f64::INFINITY, f64::min),
                simulated_max: sims.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                simulated_nominal: sims.first().copied().unwrap_or(f64::NAN),
            };
            Ok((row, rec_l.bayes.rho, rec_i.bayes.rho))
        })
        .collect();
    let mut out = KittenReconstructions {
        rows: Vec::new(),
        learnt_estimates: Vec::new(),
        idealised_estimates: Vec::new(),
    };
    for r in per_state {
        let (row, l, i) = r?;
        out.rows.push(row);
        out.learnt_estimates.push(l);
        out.idealised_estimates.push(i);
    }
    Ok(out)
}

/// Bootstrap standard errors of the reconstruction fidelity, indexed
/// `[state][map]`. Each resample redraws the test shots and reruns the
/// sampler with the same seeds.
pub fn fidelity_stderr(test: &TestData, maps: &[&AffineMap], settings: &Settings) -> Result<Vec<Vec<f64>>> {
    let n_states = test.states.len();
    if test.shots == 0 {
        return Ok(vec![vec![0.0; maps.len()]; n_states]);
    }
    let dim = maps.first().map_or(0, |m| m.dim());
    let stats = bootstrap_many(
        &test.records,
        settings.bootstrap_resamples,
        |recs| {
            let resampled = TestData {
                records: recs.to_vec(),
                ..test.clone()
            };
            let mut out = Vec::with_capacity(n_states * maps.len());
            for i in 0..n_states {
                for m in maps {
                    out.push(reconstruct_with(m, &resampled, i, settings)?.1);
                }
            }
            Ok(out)
        },
        settings.stream(role::BOOTSTRAP, dim + 2000),
    )?;
    Ok(stats.chunks(maps.len()).map(|c| c.iter().map(|(_, se)| *se).collect()).collect())
}

/// Spearman rank correlation.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Ideal-limit sanity check used by tests: learning on perfect data returns
/// the idealised map.
pub fn ideal_limit_mse(set: &DisplacementSet) -> Result<f64> {
    let ts = acquire_training_set(set, &DeviceParams::default(), &AcquisitionConfig::ideal())?;
    map_mse(&build_idealised_map(set, None)?, &ridge_fit(&ts, 0.0)?)
}

/// Number of parameters per state, re-exported for table sizing.
pub fn observable_count(dim: usize) -> usize {
    param_count(dim)
}
