//! Econometrics on individual effects: least squares with CR2 cluster-robust
//! variance, quantile regression with xy-pair bootstrap errors, and
//! stratified re-estimation.

mod design;
mod ols;
mod qreg;

pub use design::{build_design, DesignMatrix, DesignSpec, FactorTerm};
pub use ols::{hc2_vcov, ols_classical, ols_cr2, CoefTable, DfRule, EstimatorTag};
pub use qreg::{
    intercept_only_objective, micro_jitter, objective as qreg_objective, pinball_loss, qreg_fit, xy_pair_bootstrap,
    QregFit,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{CohortTable, ColumnKind};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Estimator {
    Ols {
        #[serde(default)]
        df_rule: DfRule,
    },
    Qreg {
        tau: f64,
        replicates: usize,
        seed: u64,
    },
}

impl Estimator {
    pub fn fit(&self, design: &DesignMatrix, y: &[f64]) -> Result<CoefTable> {
        match *self {
            Estimator::Ols { df_rule } => ols_cr2(design, y, df_rule),
            Estimator::Qreg { tau, replicates, seed } => xy_pair_bootstrap(design, y, tau, replicates, seed),
        }
    }
}

/// Fits `estimator` separately within each stratum, in level order. The
/// strata are the requested `levels`, or every level present in the data.
/// `y` is aligned with the table rows. Strata with fewer than `min_size`
/// rows, or no more rows than regressors, are rejected by name.
pub fn stratified_fit(
    table: &CohortTable,
    y: &[f64],
    stratum: &str,
    levels: Option<&[String]>,
    spec: &DesignSpec,
    estimator: &Estimator,
    min_size: usize,
) -> Result<Vec<(String, CoefTable)>> {
    let j = table.schema().require(stratum)?;
    let col = table.schema().column(j);
    if col.kind == ColumnKind::Continuous {
        return invalid(format!("stratum column `{stratum}` must be categorical"));
    }
    if y.len() != table.n_rows() {
        return invalid("outcome length does not match the table");
    }
    let spec = spec.without(stratum);
    let wanted: Vec<usize> = match levels {
        Some(names) => names
            .iter()
            .map(|n| {
                col.category_index(n)
                    .ok_or_else(|| Error::InvalidArgument(format!("`{n}` is not a level of `{stratum}`")))
            })
            .collect::<Result<_>>()?,
        None => (0..col.levels().unwrap_or(2))
            .filter(|&l| (0..table.n_rows()).any(|i| !table.is_missing(i, j) && table.value(i, j) as usize == l))
            .collect(),
    };
    let subsets: Vec<(String, Vec<usize>)> = wanted
        .into_iter()
        .map(|l| {
            let rows = (0..table.n_rows())
                .filter(|&i| !table.is_missing(i, j) && table.value(i, j) as usize == l)
                .collect();
            (col.format_cell(l as f64), rows)
        })
        .collect();
    for (label, rows) in &subsets {
        if rows.is_empty() || rows.len() < min_size {
            return Err(Error::StratumTooSmall(format!(
                "stratum `{label}` of `{stratum}` has {} rows (minimum {min_size})",
                rows.len()
            )));
        }
    }
    subsets
        .into_par_iter()
        .map(|(label, rows)| {
            let sub = table.select_rows(&rows);
            let ys: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
            let design = build_design(&sub, &spec)?;
            if design.n() <= design.k() {
                return Err(Error::StratumTooSmall(format!(
                    "stratum `{label}` has {} rows for {} regressors",
                    design.n(),
                    design.k()
                )));
            }
            Ok((label, estimator.fit(&design, &ys)?))
        })
        .collect()
}
