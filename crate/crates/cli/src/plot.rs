//! Long-format `series,x,y` files derived from the task reports.
//!
//! Numbers are copied verbatim from the source reports, so the plot files are
//! byte-identical whenever the reports are.

use std::fs;
use std::path::Path;

use crate::CliError;

pub const CONVERGENCE: &str = "convergence.csv";
pub const COSTATE: &str = "costate_arc.csv";
pub const RESIDUALS: &str = "optimal_residuals.csv";
pub const REGION_MAP: &str = "region_map.csv";

pub const PLOT_VALUE: &str = "plot_value_vs_horizon.csv";
pub const PLOT_COSTATE: &str = "plot_costate.csv";
pub const PLOT_RESIDUAL: &str = "plot_residual_vs_T.csv";
pub const PLOT_REGION: &str = "plot_region_map.csv";

const HEADER: &str = "series,x,y\n";

type Converter = fn(&str) -> Result<String, CliError>;

fn rows(text: &str) -> impl Iterator<Item = Vec<&str>> {
    text.lines().skip(1).filter(|l| !l.trim().is_empty()).map(|l| l.split(',').collect())
}

fn bad(file: &str, msg: &str) -> CliError {
    CliError::Validation(format!("{file}: {msg}"))
}

/// `variant,tau,value` rows become `variant,tau,value`.
fn value_vs_horizon(text: &str) -> Result<String, CliError> {
    let mut out = String::from(HEADER);
    for r in rows(text) {
        if r.len() != 3 {
            return Err(bad(CONVERGENCE, "expected variant,tau,value"));
        }
        out.push_str(&format!("{},{},{}\n", r[0], r[1], r[2]));
    }
    Ok(out)
}

/// `t,psi0,psi1,...` rows become one `psi_k` series per component.
fn costate(text: &str) -> Result<String, CliError> {
    let width = text.lines().next().map(|h| h.split(',').count()).unwrap_or(0);
    if width < 2 {
        return Err(bad(COSTATE, "expected t,psi0,..."));
    }
    let mut out = String::from(HEADER);
    for k in 1..width {
        for r in rows(text) {
            if r.len() != width {
                return Err(bad(COSTATE, "ragged row"));
            }
            out.push_str(&format!("psi_{},{},{}\n", k - 1, r[0], r[k]));
        }
    }
    Ok(out)
}

fn residuals(text: &str) -> Result<String, CliError> {
    let mut out = String::from(HEADER);
    for r in rows(text) {
        if r.len() != 2 {
            return Err(bad(RESIDUALS, "expected T,residual"));
        }
        out.push_str(&format!("optimal_in_view,{},{}\n", r[0], r[1]));
    }
    Ok(out)
}

/// One row per cell: `x` is the first center coordinate, `y` the verdict code
/// `2 * hypothesis_met + lipschitz_observed`. Further coordinates go into the
/// series name.
fn region(text: &str) -> Result<String, CliError> {
    let header: Vec<&str> = text.lines().next().unwrap_or("").split(',').collect();
    let dim = header.iter().take_while(|h| h.starts_with('x')).count();
    if dim == 0 || header.len() != dim + 4 {
        return Err(bad(REGION_MAP, "unexpected header"));
    }
    let mut out = String::from(HEADER);
    for r in rows(text) {
        if r.len() != dim + 4 {
            return Err(bad(REGION_MAP, "ragged row"));
        }
        let flag = |s: &str| match s {
            "0" => Ok(0u8),
            "1" => Ok(1u8),
            _ => Err(bad(REGION_MAP, "flags must be 0 or 1")),
        };
        let code = 2 * flag(r[dim + 1])? + flag(r[dim + 2])?;
        let mut series = String::from("region");
        for (k, c) in r.iter().enumerate().take(dim).skip(1) {
            series.push_str(&format!("@x{k}={c}"));
        }
        out.push_str(&format!("{series},{},{code}\n", r[0]));
    }
    Ok(out)
}

/// Plot files for every report present in `dir`, as `(file name, contents)`.
pub fn emit_plot_data(dir: &Path) -> Result<Vec<(&'static str, String)>, CliError> {
    let sources: [(&str, &'static str, Converter); 4] = [
        (CONVERGENCE, PLOT_VALUE, value_vs_horizon),
        (COSTATE, PLOT_COSTATE, costate),
        (RESIDUALS, PLOT_RESIDUAL, residuals),
        (REGION_MAP, PLOT_REGION, region),
    ];
    let mut out = Vec::new();
    for (src, dst, convert) in sources {
        let path = dir.join(src);
        if path.exists() {
            let text = fs::read_to_string(&path)?;
            out.push((dst, convert(&text)?));
        }
    }
    Ok(out)
}
