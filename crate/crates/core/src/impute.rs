//! Multiple imputation by chained equations with predictive mean matching,
//! plus the fraction-of-missing-information diagnostic.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{CohortTable, ColumnKind, ColumnRole, Provenance};
use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::rng::{self, Rng};
use crate::stats;

const RIDGE_LAMBDA: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PmmSettings {
    pub m: usize,
    pub iterations: usize,
    pub donor_k: usize,
    pub seed: u64,
    /// Draw regression parameters from their approximate posterior before
    /// matching (proper imputation). Without it, missing and observed rows
    /// are matched on the same point-estimate predictions.
    #[serde(default = "yes")]
    pub parameter_draw: bool,
}

fn yes() -> bool {
    true
}

impl Default for PmmSettings {
    fn default() -> Self {
        Self {
            m: 5,
            iterations: 10,
            donor_k: 5,
            seed: 0,
            parameter_draw: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputationSet {
    pub completed: Vec<CohortTable>,
    pub m: usize,
    pub iterations: usize,
    pub donor_k: usize,
    /// Columns that had missing cells, in visit order.
    pub imputed_columns: Vec<String>,
    /// Mean of the imputed cells per imputation, sweep and imputed column.
    pub chain_means: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FmiDiagnostic {
    pub within_var: f64,
    pub between_var: f64,
    pub total_var: f64,
    pub fmi: f64,
}

/// Pools per-imputation `(point, variance)` pairs.
pub fn pool_fmi(estimates: &[(f64, f64)]) -> Result<FmiDiagnostic> {
    let m = estimates.len();
    if m < 2 {
        return invalid(format!("FMI needs at least 2 imputations, got {m}"));
    }
    if estimates.iter().any(|&(_, v)| v < 0.0 || v.is_nan()) {
        return invalid("variances must be nonnegative");
    }
    let points: Vec<f64> = estimates.iter().map(|e| e.0).collect();
    let within = estimates.iter().map(|e| e.1).sum::<f64>() / m as f64;
    let between = stats::sample_variance(&points);
    let inflated = (1.0 + 1.0 / m as f64) * between;
    let total = within + inflated;
    let fmi = if total > 0.0 { inflated / total } else { 0.0 };
    Ok(FmiDiagnostic {
        within_var: within,
        between_var: between,
        total_var: total,
        fmi,
    })
}

/// FMI of the column mean for every imputed column, with the average.
pub fn column_mean_fmi(set: &ImputationSet) -> Result<(Vec<(String, FmiDiagnostic)>, f64)> {
    let mut out = Vec::new();
    for name in &set.imputed_columns {
        let estimates: Vec<(f64, f64)> = set
            .completed
            .iter()
            .map(|t| {
                let col = t.column_by_name(name)?;
                Ok((stats::mean(col), stats::sample_variance(col) / col.len() as f64))
            })
            .collect::<Result<_>>()?;
        out.push((name.clone(), pool_fmi(&estimates)?));
    }
    let avg = if out.is_empty() {
        0.0
    } else {
        out.iter().map(|(_, d)| d.fmi).sum::<f64>() / out.len() as f64
    };
    Ok((out, avg))
}

/// Chained-equations imputation with predictive mean matching.
pub fn impute_pmm(table: &CohortTable, settings: &PmmSettings) -> Result<ImputationSet> {
    if settings.m < 2 {
        return invalid(format!("m must be at least 2, got {}", settings.m));
    }
    if settings.donor_k == 0 || settings.iterations == 0 {
        return invalid("donor_k and iterations must be positive");
    }
    let schema = table.schema();
    let mut targets: Vec<usize> = (0..table.n_cols()).filter(|&j| table.missing_count(j) > 0).collect();
    for &j in &targets {
        let observed = table.n_rows() - table.missing_count(j);
        let name = schema.column(j).name.clone();
        if observed == 0 {
            return Err(Error::FullyMissing { column: name });
        }
        if observed < settings.donor_k {
            return Err(Error::DonorPoolTooSmall {
                column: name,
                observed,
                donor_k: settings.donor_k,
            });
        }
    }
    targets.sort_by_key(|&j| (table.missing_count(j), j));
    let imputed_columns = targets.iter().map(|&j| schema.column(j).name.clone()).collect();

    if targets.is_empty() {
        return Ok(ImputationSet {
            completed: vec![table.clone(); settings.m],
            m: settings.m,
            iterations: settings.iterations,
            donor_k: settings.donor_k,
            imputed_columns,
            chain_means: vec![Vec::new(); settings.m],
        });
    }

    let runs: Vec<(CohortTable, Vec<Vec<f64>>)> = (0..settings.m)
        .into_par_iter()
        .map(|i| run_chain(table, &targets, settings, &mut rng::substream(settings.seed, i as u64)))
        .collect::<Result<_>>()?;
    let (completed, chain_means) = runs.into_iter().unzip();
    Ok(ImputationSet {
        completed,
        m: settings.m,
        iterations: settings.iterations,
        donor_k: settings.donor_k,
        imputed_columns,
        chain_means,
    })
}

fn run_chain(
    source: &CohortTable,
    targets: &[usize],
    settings: &PmmSettings,
    rng: &mut Rng,
) -> Result<(CohortTable, Vec<Vec<f64>>)> {
    let mut data = source.clone();
    let n = data.n_rows();
    let missing: Vec<Vec<usize>> = targets
        .iter()
        .map(|&j| (0..n).filter(|&i| source.is_missing(i, j)).collect())
        .collect();
    let observed: Vec<Vec<usize>> = targets
        .iter()
        .map(|&j| (0..n).filter(|&i| !source.is_missing(i, j)).collect())
        .collect();
    // start from random observed draws
    for (t, &j) in targets.iter().enumerate() {
        for &i in &missing[t] {
            let donor = observed[t][rng.random_range(0..observed[t].len())];
            data.set(i, j, source.value(donor, j));
        }
    }
    let mut trace = Vec::with_capacity(settings.iterations);
    for _ in 0..settings.iterations {
        let mut sweep = Vec::with_capacity(targets.len());
        for (t, &j) in targets.iter().enumerate() {
            let x = predictor_matrix(&data, j);
            let spec = data.schema().column(j).clone();
            let fills = match spec.kind {
                ColumnKind::Continuous => pmm_continuous(&x, data.column(j), &observed[t], &missing[t], settings, rng)?,
                _ => draw_categorical(
                    &x,
                    data.column(j),
                    spec.levels().unwrap_or(2),
                    &observed[t],
                    &missing[t],
                    rng,
                )?,
            };
            for (&i, v) in missing[t].iter().zip(&fills) {
                data.set(i, j, *v);
            }
            sweep.push(stats::mean(&fills));
        }
        trace.push(sweep);
    }
    data.set_provenance(Provenance::Imputed);
    Ok((data, trace))
}

/// Intercept plus every non-outcome column other than `target`:
/// continuous columns standardized, binary as 0/1, categorical one-hot with
/// the first level dropped.
fn predictor_matrix(data: &CohortTable, target: usize) -> DMatrix<f64> {
    let n = data.n_rows();
    let mut cols: Vec<Vec<f64>> = vec![vec![1.0; n]];
    for (j, spec) in data.schema().columns.iter().enumerate() {
        if j == target || spec.role == ColumnRole::Outcome {
            continue;
        }
        let v = data.column(j);
        match spec.kind {
            ColumnKind::Continuous => {
                let m = stats::mean(v);
                let sd = stats::sample_sd(v);
                if sd > 0.0 {
                    cols.push(v.iter().map(|x| (x - m) / sd).collect());
                }
            }
            ColumnKind::Binary => cols.push(v.to_vec()),
            ColumnKind::Categorical => {
                for level in 1..spec.categories.len() {
                    cols.push(v.iter().map(|&x| f64::from(x as usize == level)).collect());
                }
            }
        }
    }
    linalg::from_columns(&cols, n)
}

fn rows_of(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)])
}

fn pmm_continuous(
    x: &DMatrix<f64>,
    y: &[f64],
    observed: &[usize],
    missing: &[usize],
    settings: &PmmSettings,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let xo = rows_of(x, observed);
    let yo = DVector::from_iterator(observed.len(), observed.iter().map(|&i| y[i]));
    let mut xtx = xo.tr_mul(&xo);
    for d in 0..xtx.nrows() {
        xtx[(d, d)] += RIDGE_LAMBDA;
    }
    let chol = xtx
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("imputation model normal equations".into()))?;
    let beta = chol.solve(&xo.tr_mul(&yo));
    let yhat_obs = &xo * &beta;
    let beta_mis = if settings.parameter_draw {
        let resid = &yo - &yhat_obs;
        let dof = (observed.len() as f64 - x.ncols() as f64).max(1.0);
        let chi: f64 = ChiSquared::new(dof).expect("positive dof").sample(rng);
        let sigma = (resid.norm_squared() / chi.max(1e-12)).sqrt();
        let cov_chol = chol.inverse().cholesky().map(|c| c.l());
        match cov_chol {
            Some(l) => {
                let z = DVector::from_fn(beta.len(), |_, _| StandardNormal.sample(rng));
                &beta + l * z * sigma
            }
            None => beta.clone(),
        }
    } else {
        beta.clone()
    };
    let xm = rows_of(x, missing);
    let yhat_mis = &xm * &beta_mis;

    let mut pool: Vec<(f64, usize)> = yhat_obs.iter().copied().zip(observed.iter().copied()).collect();
    pool.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let k = settings.donor_k.min(pool.len());
    Ok(yhat_mis
        .iter()
        .map(|&q| {
            let donors = nearest(&pool, q, k);
            y[donors[rng.random_range(0..donors.len())]]
        })
        .collect())
}

/// The `k` pool entries whose predictions are closest to `q`.
fn nearest(pool: &[(f64, usize)], q: f64, k: usize) -> Vec<usize> {
    let pos = pool.partition_point(|p| p.0 < q);
    let (mut lo, mut hi) = (pos, pos);
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let take_left = match (lo > 0, hi < pool.len()) {
            (true, true) => q - pool[lo - 1].0 <= pool[hi].0 - q,
            (true, false) => true,
            (false, true) => false,
            (false, false) => break,
        };
        if take_left {
            lo -= 1;
            out.push(pool[lo].1);
        } else {
            out.push(pool[hi].1);
            hi += 1;
        }
    }
    out
}

fn draw_categorical(
    x: &DMatrix<f64>,
    y: &[f64],
    levels: usize,
    observed: &[usize],
    missing: &[usize],
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let xo = rows_of(x, observed);
    let present: Vec<usize> = (0..levels)
        .filter(|&l| observed.iter().any(|&i| y[i] as usize == l))
        .collect();
    let xm = rows_of(x, missing);
    let mut scores = DMatrix::<f64>::zeros(missing.len(), present.len());
    for (c, &level) in present.iter().enumerate() {
        let target = DVector::from_iterator(
            observed.len(),
            observed.iter().map(|&i| f64::from(y[i] as usize == level)),
        );
        let beta = linalg::ridge(&xo, &target, RIDGE_LAMBDA)
            .ok_or_else(|| Error::Singular("imputation class-score model".into()))?;
        scores.set_column(c, &(&xm * beta));
    }
    Ok((0..missing.len())
        .map(|r| {
            let w: Vec<f64> = (0..present.len()).map(|c| scores[(r, c)].max(1e-6)).collect();
            let total: f64 = w.iter().sum();
            let mut u = rng.random::<f64>() * total;
            for (c, wc) in w.iter().enumerate() {
                if u < *wc {
                    return present[c] as f64;
                }
                u -= wc;
            }
            present[present.len() - 1] as f64
        })
        .collect())
}
