//! Batch runner behind the `horizonlab` binary.
//!
//! A run resolves an [`config::ExperimentConfig`] plus flag overrides, executes
//! one task, and writes `summary.json`, task CSVs, long-format plot files and a
//! `manifest.json` with a SHA-256 hash for every output.

pub mod config;
pub mod plot;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use horizonlab::criteria::{
    agreeable_check, constrained_optimality_check, optimal_in_view_check, weak_agreeable_check,
    AsymptoticConstraint, OptimalityReport,
};
use horizonlab::limits::{estimate_v_all_cached, estimate_v_inf, estimate_v_infty_cached, ControlFamily, ValueCache};
use horizonlab::pmp::{pmp_certificate, CertificateOptions, SensitivityOptions};
use horizonlab::problem::ControlSignal;
use horizonlab::regularity::{
    homogeneity_report, lipschitz_region_classifier, region_map_csv, Cell, Chart, ClassifierOptions, Route,
};
use horizonlab::value::{solve_finite_horizon, GridSpec, ValueGrid};
use horizonlab::LabError;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use config::{ResolvedConfig, Task};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

pub const SUMMARY: &str = "summary.json";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Solver(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Solver(_) => EXIT_SOLVER,
            CliError::Validation(_) | CliError::Io(_) => EXIT_VALIDATION,
        }
    }
}

impl From<LabError> for CliError {
    fn from(e: LabError) -> Self {
        if e.is_numerical() {
            CliError::Solver(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

/// Files written by one run; each path has a single writer.
struct Outputs {
    dir: PathBuf,
    files: BTreeMap<String, PathBuf>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    fn claim(&mut self, name: &str) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        if self.files.insert(name.to_string(), path.clone()).is_some() {
            return Err(CliError::Validation(format!("output {name} written twice")));
        }
        Ok(path)
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.claim(name)?;
        fs::write(path, contents)?;
        Ok(())
    }
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn to_json<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

/// `V^H` with `H` = arc horizon + largest horizon, so every time the
/// certificate and criteria probe still has a long remaining horizon.
fn profile_field(cfg: &ResolvedConfig) -> Result<ValueGrid, CliError> {
    let taus = cfg.horizons.taus();
    let horizon = CertificateOptions::default().arc_horizon + taus[taus.len() - 1];
    Ok(solve_finite_horizon(&cfg.problem, &cfg.spec.with_horizon(horizon))?)
}

fn run_value(cfg: &ResolvedConfig, out: &mut Outputs) -> Result<Value, CliError> {
    let grid = solve_finite_horizon(&cfg.problem, &cfg.spec)?;
    let csv = out.claim("value_table.csv")?;
    let sidecar = out.claim("value_table.json")?;
    grid.export_csv(&csv, &sidecar)?;
    let b = cfg.problem.initial_state();
    Ok(json!({
        "initial_state": b,
        "value_at_initial": grid.evaluate(0.0, b),
        "horizon": grid.horizon(),
        "time_steps": grid.times().len() - 1,
        "nodes": grid.node_count(),
        "out_of_box_queries": grid.out_of_box_queries(),
    }))
}

fn run_limits(cfg: &ResolvedConfig, cache: &ValueCache, out: &mut Outputs) -> Result<Value, CliError> {
    let p = &cfg.problem;
    let b = p.initial_state();
    let all = estimate_v_all_cached(p, &cfg.spec, &cfg.horizons, 0.0, b, cfg.tol, cache)?;
    let infty = estimate_v_infty_cached(p, &cfg.spec, &cfg.horizons, 0.0, b, cfg.tol, cache)?;
    let family = ControlFamily::default_for(p, 0.0)?;
    let inf = estimate_v_inf(p, b, 0.0, &family, &cfg.horizons, cfg.tol)?;
    let mut csv = String::from("variant,tau,value\n");
    for (name, est) in [("V_all", &all), ("V_infty", &infty), ("V_inf", &inf)] {
        for (tau, v) in est.taus.iter().zip(&est.values) {
            csv.push_str(&format!("{name},{tau:.16e},{v:.16e}\n"));
        }
    }
    out.write(plot::CONVERGENCE, &csv)?;
    Ok(json!({
        "initial_state": b,
        "v_all": to_json(&all),
        "v_infty": to_json(&infty),
        "v_inf": to_json(&inf),
        "family": family.description(),
        "gap_inf_minus_all": inf.limit - all.limit,
    }))
}

fn certificate_options(cfg: &ResolvedConfig) -> CertificateOptions {
    CertificateOptions {
        optimal_tol: cfg.tol,
        sensitivity: SensitivityOptions {
            seed: cfg.seed,
            ..SensitivityOptions::default()
        },
        ..CertificateOptions::default()
    }
}

fn run_pmp(cfg: &ResolvedConfig, field: &ValueGrid, out: &mut Outputs) -> Result<Value, CliError> {
    let u = ControlSignal::constant(cfg.u_star.clone());
    let opts = certificate_options(cfg);
    let (arc, report) = pmp_certificate(&cfg.problem, field, &u, &cfg.horizons, &cfg.spec, &opts)?;
    if let Some(arc) = &arc {
        out.write(plot::COSTATE, &arc.to_csv())?;
    }
    let mut csv = String::from("T,residual\n");
    for r in &report.optimal_residuals {
        csv.push_str(&format!("{:.16e},{:.16e}\n", r.horizon, r.value));
    }
    out.write(plot::RESIDUALS, &csv)?;
    Ok(json!({
        "u_star": cfg.u_star,
        "field_horizon": field.horizon(),
        "certificate": to_json(&report),
    }))
}

fn run_criteria(cfg: &ResolvedConfig, field: &ValueGrid, cache: &ValueCache, out: &mut Outputs) -> Result<Value, CliError> {
    let p = &cfg.problem;
    let u = ControlSignal::constant(cfg.u_star.clone());
    let tau0 = cfg.horizons.taus()[0];
    let t_list = [0.25 * tau0, 0.5 * tau0];
    let family = ControlFamily::default_for(p, 0.0)?;
    let optimal_horizons: Vec<f64> = certificate_options(cfg).optimal_horizons;
    let mut report = OptimalityReport::default();
    report.push(optimal_in_view_check(field, p, &u, &optimal_horizons, cfg.tol)?);
    report.push(weak_agreeable_check(p, &u, &cfg.spec, &cfg.horizons, &t_list, cfg.tol, cache)?);
    report.push(agreeable_check(p, &u, &cfg.spec, &cfg.horizons, &t_list, cfg.tol, cache)?);
    for c in [AsymptoticConstraint::LebesgueConvergent, AsymptoticConstraint::RiemannConvergent] {
        report.push(constrained_optimality_check(p, &u, &c, &cfg.horizons, &family, cfg.tol)?);
    }
    out.write("criteria.csv", &report.to_csv())?;
    Ok(json!({ "u_star": cfg.u_star, "entries": to_json(&report.entries) }))
}

fn homogeneity(cfg: &ResolvedConfig, out: &mut Outputs) -> Result<Value, CliError> {
    let nus = [0.7, 0.85, 1.15, 1.3, 1.4];
    let ys = [vec![0.3, 0.4], vec![-0.5, 0.2]];
    let pairs: Vec<(f64, Vec<f64>)> = nus.iter().flat_map(|nu| ys.iter().map(move |y| (*nu, y.clone()))).collect();
    let rep = homogeneity_report(cfg.problem.params(), &cfg.spec, 1.0, &pairs)?;
    let mut csv = String::from("nu,y1,y2,scaled_value,derived_prediction,derived_error,alternative_value,alternative_prediction,alternative_error\n");
    for r in &rep.rows {
        csv.push_str(&format!(
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
            r.nu, r.y[0], r.y[1], r.scaled_value, r.derived_prediction, r.derived_error,
            r.alternative_value, r.alternative_prediction, r.alternative_error
        ));
    }
    out.write("homogeneity.csv", &csv)?;
    Ok(json!({
        "k": rep.k,
        "horizon": rep.horizon,
        "identity": "V^{nu T}(0, (nu y1, nu^2 y2)) = nu^(k+1) V^T(0, y)",
        "max_error": rep.max_derived_error,
        "compared_identity": "V^{T/nu}(0, (nu y1, nu^2 y2)) = nu^(k-1) V^T(0, y)",
        "compared_max_error": rep.max_alternative_error,
    }))
}

fn run_regularity(cfg: &ResolvedConfig, out: &mut Outputs) -> Result<Value, CliError> {
    let p = &cfg.problem;
    let spec = &cfg.spec;
    let coarse = solve_finite_horizon(p, spec)?;
    let fine_spec = GridSpec::uniform(&spec.lower, &spec.upper, 0.5 * cfg.grid.h, 0.5 * spec.dt, spec.horizon)?;
    let fine = solve_finite_horizon(p, &fine_spec)?;
    let mut opts = ClassifierOptions::default();
    let is_double_integrator = p.name() == "double-integrator";
    if is_double_integrator {
        let cbox = p.control_box();
        let a = cbox.hi[0].sqrt();
        opts.chart = Some(Chart::sqrt_y2(a, cbox.samples)?);
        opts.routes = vec![Route::MinTime, Route::Separation];
        opts.min_time.controls = Some(vec![cbox.lo.clone(), cbox.hi.clone()]);
    }
    let cells = Cell::tiling(&spec.lower, &spec.upper, cfg.cells);
    let verdicts = lipschitz_region_classifier(p, &coarse, &fine, &cells, &opts)?;
    out.write(plot::REGION_MAP, &region_map_csv(&verdicts))?;
    let mut by_route: BTreeMap<&str, usize> = BTreeMap::new();
    let mut by_code: BTreeMap<String, usize> = BTreeMap::new();
    for v in &verdicts {
        *by_route.entry(v.route.map(|r| r.label()).unwrap_or("none")).or_default() += 1;
        *by_code.entry(v.code().to_string()).or_default() += 1;
    }
    let mut summary = json!({
        "cells": verdicts.len(),
        "routes": by_route,
        "codes": by_code,
        "code_meaning": "2 * hypothesis_met + lipschitz_observed",
    });
    if is_double_integrator {
        summary["homogeneity"] = homogeneity(cfg, out)?;
    }
    Ok(summary)
}

fn write_plots(out: &mut Outputs) -> Result<usize, CliError> {
    let plots = plot::emit_plot_data(&out.dir)?;
    for (name, contents) in &plots {
        out.write(name, contents)?;
    }
    Ok(plots.len())
}

/// Runs the configured task; `inputs` are recorded in the manifest.
pub fn run(cfg: &ResolvedConfig, inputs: &[PathBuf]) -> Result<PathBuf, CliError> {
    let mut out = Outputs::new(&cfg.out)?;
    let cache = ValueCache::new();
    let mut input_paths: Vec<PathBuf> = inputs.to_vec();
    let results = match cfg.task {
        Task::Value => run_value(cfg, &mut out)?,
        Task::Limits => run_limits(cfg, &cache, &mut out)?,
        Task::Pmp => {
            let field = profile_field(cfg)?;
            run_pmp(cfg, &field, &mut out)?
        }
        Task::Criteria => {
            let field = profile_field(cfg)?;
            run_criteria(cfg, &field, &cache, &mut out)?
        }
        Task::Regularity => run_regularity(cfg, &mut out)?,
        Task::ExampleSuite => {
            let field = profile_field(cfg)?;
            json!({
                "limits": run_limits(cfg, &cache, &mut out)?,
                "pmp": run_pmp(cfg, &field, &mut out)?,
                "criteria": run_criteria(cfg, &field, &cache, &mut out)?,
            })
        }
        Task::PlotData => {
            for name in [plot::CONVERGENCE, plot::COSTATE, plot::RESIDUALS, plot::REGION_MAP] {
                let path = out.dir.join(name);
                if path.exists() {
                    input_paths.push(path);
                }
            }
            if input_paths.len() == inputs.len() {
                return Err(CliError::Validation(format!("no report files found in {}", out.dir.display())));
            }
            json!({})
        }
    };
    let plots = write_plots(&mut out)?;
    let summary = json!({
        "tool": "horizonlab",
        "version": env!("CARGO_PKG_VERSION"),
        "task": cfg.task,
        "seed": cfg.seed,
        "config": to_json(&cfg.echo()),
        "plot_files": plots,
        "results": results,
    });
    out.write(SUMMARY, &(serde_json::to_string_pretty(&summary).map_err(|e| CliError::Validation(e.to_string()))? + "\n"))?;

    let mut outputs = Vec::new();
    for (name, path) in &out.files {
        outputs.push(json!({
            "file": name,
            "sha256": sha256_file(path)?,
            "bytes": fs::metadata(path)?.len(),
        }));
    }
    let mut input_list = Vec::new();
    for path in &input_paths {
        input_list.push(json!({ "path": path.display().to_string(), "sha256": sha256_file(path)? }));
    }
    let manifest = json!({
        "tool": "horizonlab",
        "version": env!("CARGO_PKG_VERSION"),
        "task": cfg.task,
        "seed": cfg.seed,
        "config": to_json(&cfg.echo()),
        "inputs": input_list,
        "outputs": outputs,
    });
    let manifest_path = out.dir.join(MANIFEST);
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Validation(e.to_string()))? + "\n")?;
    Ok(out.dir)
}
