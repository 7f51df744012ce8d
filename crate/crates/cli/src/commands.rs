use serde::Serialize;
use serde_json::json;

use qrp_core::design::{AffineMap, DisplacementSet};
use qrp_core::experiment::{self, LearntMaps, Settings, TestData};
use qrp_core::learn::Perturbation;

use crate::config::ExperimentConfig;
use crate::output::Writer;
use crate::CliError;

pub struct Context<'a> {
    pub config: &'a ExperimentConfig,
    pub settings: Settings,
    pub writer: Writer,
}

impl Context<'_> {
    /// Configured displacement set, optimising (and saving) it if asked to.
    fn displacements(&mut self, dim: usize) -> Result<DisplacementSet, CliError> {
        if let Some(set) = self.config.load_displacements(dim)? {
            return Ok(set);
        }
        let result = experiment::displacements(dim, &self.settings)?;
        log::info!("D={dim}: κ = {:.4} (restart {})", result.kappa, result.restart);
        self.writer.json(&format!("displacements_D{dim}.json"), set_json(&result.set)?)?;
        let trajectory: Vec<TrajectoryRow> = result
            .trajectory
            .iter()
            .enumerate()
            .map(|(step, &kappa)| TrajectoryRow { step, kappa })
            .collect();
        self.writer.csv(&format!("kappa_trajectory_D{dim}.csv"), &trajectory)?;
        Ok(result.set)
    }
}

fn set_json(set: &DisplacementSet) -> Result<serde_json::Value, CliError> {
    serde_json::from_str(&set.to_json()?).map_err(|e| CliError::Io(e.to_string()))
}

fn map_json(map: &AffineMap) -> Result<serde_json::Value, CliError> {
    serde_json::from_str(&map.to_json()?).map_err(|e| CliError::Io(e.to_string()))
}

#[derive(Serialize)]
struct TrajectoryRow {
    step: usize,
    kappa: f64,
}

pub fn optimize(ctx: &mut Context) -> Result<(), CliError> {
    for dim in ctx.config.dims.list() {
        if ctx.config.displacement_path(dim).is_some() {
            return Err(CliError::Config(
                "displacements: optimize needs displacements = \"optimize\"".into(),
            ));
        }
        ctx.displacements(dim)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ScatterRow {
    row: usize,
    col: usize,
    beta_idealised: f64,
    beta_learnt: f64,
}

fn perturbation_label(p: &Perturbation) -> String {
    if *p == Perturbation::NONE {
        return "nominal".into();
    }
    let sign = |v: f64| if v >= 0.0 { '+' } else { '-' };
    format!("chi{}_ho{}", sign(p.chi_rel), sign(p.higher_order_rel))
}

fn learn_one(ctx: &mut Context, dim: usize) -> Result<(DisplacementSet, LearntMaps), CliError> {
    let set = ctx.displacements(dim)?;
    let maps = experiment::learn_maps(&set, &ctx.settings)?;
    log::info!("D={dim}: ν = {:e}", maps.nu);
    Ok((set, maps))
}

pub fn learn(ctx: &mut Context) -> Result<(), CliError> {
    let mut table = Vec::new();
    for dim in ctx.config.dims.list() {
        let (set, maps) = learn_one(ctx, dim)?;
        ctx.writer.json(&format!("beta_I_D{dim}.json"), map_json(&maps.idealised)?)?;
        ctx.writer.json(&format!("beta_L_D{dim}.json"), map_json(&maps.learnt)?)?;
        let (bi, bl) = (maps.idealised.beta(), maps.learnt.beta());
        let scatter: Vec<ScatterRow> = (0..bi.nrows())
            .flat_map(|r| (0..bi.ncols()).map(move |c| (r, c)))
            .map(|(row, col)| ScatterRow {
                row,
                col,
                beta_idealised: bi[(row, col)],
                beta_learnt: bl[(row, col)],
            })
            .collect();
        ctx.writer.csv(&format!("beta_scatter_D{dim}.csv"), &scatter)?;
        if ctx.config.simulated_band {
            for (p, map) in experiment::simulated_band(&set, &ctx.settings)? {
                ctx.writer
                    .json(&format!("beta_S_D{dim}_{}.json", perturbation_label(&p)), map_json(&map)?)?;
            }
        }
        let row = experiment::map_mse_study(&maps, &ctx.settings)?;
        log::info!("D={dim}: map_mse = {:.4e} ± {:.1e}", row.mse, row.stderr);
        table.push(row);
    }
    ctx.writer.csv("map_mse.csv", &table)?;
    Ok(())
}

#[derive(Serialize)]
struct FidelityOut {
    #[serde(rename = "D")]
    dim: usize,
    state: String,
    map: &'static str,
    fidelity: f64,
    stderr: f64,
    band_min: Option<f64>,
    band_max: Option<f64>,
}

fn matrix_json(m: &qrp_core::linalg::CMatrix) -> serde_json::Value {
    let rows = |f: fn(&num_complex::Complex64) -> f64| -> Vec<Vec<f64>> {
        (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| f(&m[(i, j)])).collect()).collect()
    };
    json!({ "re": rows(|z| z.re), "im": rows(|z| z.im) })
}

fn kitten_data(ctx: &mut Context, dim: usize) -> Result<(DisplacementSet, LearntMaps, TestData), CliError> {
    let (set, maps) = learn_one(ctx, dim)?;
    let test = experiment::measure_kittens(&maps.apparatus, &ctx.settings)?;
    Ok((set, maps, test))
}

pub fn reconstruct(ctx: &mut Context) -> Result<(), CliError> {
    let mut table = Vec::new();
    for dim in ctx.config.dims.list() {
        let (set, maps, test) = kitten_data(ctx, dim)?;
        let band = experiment::simulated_band(&set, &ctx.settings)?;
        let rec = experiment::reconstruct_kittens(&test, &maps.idealised, &maps.learnt, &band, &ctx.settings)?;
        let nominal = &band[0].1;
        let se = experiment::fidelity_stderr(&test, &[&maps.idealised, &maps.learnt, nominal], &ctx.settings)?;
        let mut dump = Vec::new();
        for (i, row) in rec.rows.iter().enumerate() {
            log::info!(
                "D={dim} {}: F_I = {:.3}, F_L = {:.3}, simulated [{:.3}, {:.3}]",
                row.state,
                row.idealised,
                row.learnt,
                row.simulated_min,
                row.simulated_max
            );
            for (k, (map, fidelity)) in [
                ("idealised", row.idealised),
                ("learnt", row.learnt),
                ("simulated", row.simulated_nominal),
            ]
            .into_iter()
            .enumerate()
            {
                let band = k == 2;
                table.push(FidelityOut {
                    dim,
                    state: row.state.clone(),
                    map,
                    fidelity,
                    stderr: se[i][k],
                    band_min: band.then_some(row.simulated_min),
                    band_max: band.then_some(row.simulated_max),
                });
            }
            dump.push(json!({
                "state": row.state,
                "target": matrix_json(test.states[i].rho.matrix()),
                "idealised": matrix_json(rec.idealised_estimates[i].matrix()),
                "learnt": matrix_json(rec.learnt_estimates[i].matrix()),
            }));
        }
        ctx.writer
            .json(&format!("density_matrices_D{dim}.json"), json!({ "D": dim, "states": dump }))?;
    }
    ctx.writer.csv("fidelity.csv", &table)?;
    Ok(())
}

#[derive(Serialize)]
struct ErrorSummary {
    #[serde(rename = "D")]
    dim: usize,
    state: String,
    mean_sq_err_idealised: f64,
    mean_sq_err_learnt: f64,
    spearman_idealised_vs_abs_alpha: f64,
}

pub fn observable_errors(ctx: &mut Context) -> Result<(), CliError> {
    let mut summary = Vec::new();
    for dim in ctx.config.dims.list() {
        let (set, maps, test) = kitten_data(ctx, dim)?;
        let rows = experiment::observable_error_table(&test, set.alphas(), &maps.idealised, &maps.learnt)?;
        ctx.writer.csv(&format!("observable_errors_D{dim}.csv"), &rows)?;
        for s in &test.states {
            let mine: Vec<_> = rows.iter().filter(|r| r.state == s.id).collect();
            let n = mine.len() as f64;
            let abs: Vec<f64> = mine.iter().map(|r| r.alpha_abs).collect();
            let ei: Vec<f64> = mine.iter().map(|r| r.sq_err_idealised).collect();
            summary.push(ErrorSummary {
                dim,
                state: s.id.clone(),
                mean_sq_err_idealised: ei.iter().sum::<f64>() / n,
                mean_sq_err_learnt: mine.iter().map(|r| r.sq_err_learnt).sum::<f64>() / n,
                spearman_idealised_vs_abs_alpha: experiment::spearman(&abs, &ei),
            });
        }
    }
    ctx.writer.csv("observable_errors_summary.csv", &summary)?;
    Ok(())
}
