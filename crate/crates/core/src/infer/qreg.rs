use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rayon::prelude::*;

use super::design::DesignMatrix;
use super::ols::{to_rows, CoefTable, EstimatorTag};
use crate::error::{invalid, Error, Result};
use crate::rng::{self, Rng};
use crate::stats;

/// Check loss `u (tau - 1{u < 0})`.
pub fn pinball_loss(u: f64, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    Ok(rho(u, tau))
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        invalid(format!("quantile level {tau} outside (0, 1)"))
    }
}

#[inline]
fn rho(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        u * (tau - 1.0)
    } else {
        u * tau
    }
}

/// Adds independent `Uniform(-eps, eps)` noise to every element.
pub fn micro_jitter(y: &[f64], eps: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return invalid(format!("jitter half-width must be nonnegative, got {eps}"));
    }
    if eps == 0.0 {
        return Ok(y.to_vec());
    }
    Ok(y.iter().map(|v| v + rng.random_range(-eps..eps)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct QregFit {
    pub beta: Vec<f64>,
    pub objective: f64,
    /// Simplex pivots taken after the smoothed warm start.
    pub pivots: usize,
}

pub fn objective(x: &DMatrix<f64>, y: &[f64], beta: &[f64], tau: f64) -> f64 {
    let b = DVector::from_column_slice(beta);
    let fitted = x * b;
    y.iter().zip(fitted.iter()).map(|(yi, fi)| rho(yi - fi, tau)).sum()
}

const IRLS_SWEEPS: usize = 60;

/// Minimizes the check loss. A reweighted least-squares pass on a smoothed
/// loss supplies a warm start; exact simplex pivots along the edges of the
/// polyhedral objective then finish at an optimal vertex.
pub fn qreg_fit(x: &DMatrix<f64>, y: &[f64], tau: f64) -> Result<QregFit> {
    check_tau(tau)?;
    let (n, k) = (x.nrows(), x.ncols());
    if y.len() != n {
        return invalid(format!("outcome has {} values for {n} design rows", y.len()));
    }
    if n <= k {
        return invalid(format!("need more rows ({n}) than regressors ({k})"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return invalid("outcome contains non-finite values");
    }
    let warm = irls(x, y, tau)?;
    let resid: Vec<f64> = {
        let f = x * DVector::from_column_slice(&warm);
        y.iter().zip(f.iter()).map(|(a, b)| a - b).collect()
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| resid[a].abs().total_cmp(&resid[b].abs()).then(a.cmp(&b)));
    let basis =
        initial_basis(x, &order).ok_or_else(|| Error::Singular("design has no invertible row subset".into()))?;
    simplex(x, y, tau, basis)
}

fn irls(x: &DMatrix<f64>, y: &[f64], tau: f64) -> Result<Vec<f64>> {
    let (n, k) = (x.nrows(), x.ncols());
    let yv = DVector::from_column_slice(y);
    let scale = {
        let med = stats::median(y);
        let mad = stats::median(&y.iter().map(|v| (v - med).abs()).collect::<Vec<_>>());
        if mad > 0.0 {
            mad
        } else {
            1.0
        }
    };
    let mut beta = crate::linalg::ridge(x, &yv, 1e-10 * (n as f64))
        .ok_or_else(|| Error::Singular("least-squares start of the quantile fit".into()))?;
    let mut delta = 1e-2 * scale;
    for _ in 0..IRLS_SWEEPS {
        let r = &yv - x * &beta;
        let w: Vec<f64> = r
            .iter()
            .map(|&ri| {
                let a = ri.abs().max(delta);
                if ri >= 0.0 {
                    tau / a
                } else {
                    (1.0 - tau) / a
                }
            })
            .collect();
        let mut xtwx = DMatrix::<f64>::zeros(k, k);
        let mut xtwy = DVector::<f64>::zeros(k);
        for i in 0..n {
            let xi = x.row(i);
            for a in 0..k {
                let wa = w[i] * xi[a];
                xtwy[a] += wa * y[i];
                for b in a..k {
                    xtwx[(a, b)] += wa * xi[b];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                xtwx[(a, b)] = xtwx[(b, a)];
            }
        }
        match xtwx.cholesky() {
            Some(c) => beta = c.solve(&xtwy),
            None => break,
        }
        delta = (delta * 0.7).max(1e-6 * scale);
    }
    Ok(beta.iter().copied().collect())
}

/// Greedy row selection in the given order until `k` independent rows.
fn initial_basis(x: &DMatrix<f64>, order: &[usize]) -> Option<Vec<usize>> {
    let k = x.ncols();
    let mut basis = Vec::with_capacity(k);
    let mut q: Vec<DVector<f64>> = Vec::with_capacity(k);
    for &i in order {
        let row = x.row(i).transpose();
        let scale = row.norm();
        let mut v = row;
        for b in &q {
            let p = b.dot(&v);
            v -= b * p;
        }
        let norm = v.norm();
        if scale > 0.0 && norm > 1e-9 * scale {
            q.push(v / norm);
            basis.push(i);
            if basis.len() == k {
                return Some(basis);
            }
        }
    }
    None
}

fn simplex(x: &DMatrix<f64>, y: &[f64], tau: f64, mut basis: Vec<usize>) -> Result<QregFit> {
    let (n, k) = (x.nrows(), x.ncols());
    let max_pivots = 50 * n + 100;
    let yscale = y.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
    let tol = 1e-12 * yscale * (n as f64);
    let mut pivots = 0;
    let mut in_basis = vec![false; n];
    for &b in &basis {
        in_basis[b] = true;
    }
    loop {
        let xb = DMatrix::from_fn(k, k, |i, j| x[(basis[i], j)]);
        let lu = xb.lu();
        let inv = lu
            .try_inverse()
            .ok_or_else(|| Error::Singular("simplex basis became singular".into()))?;
        let yb = DVector::from_iterator(k, basis.iter().map(|&i| y[i]));
        let beta = &inv * yb;
        let fitted = x * &beta;
        let mut r: Vec<f64> = y.iter().zip(fitted.iter()).map(|(a, b)| a - b).collect();
        for &b in &basis {
            r[b] = 0.0;
        }
        let zero_tol = 1e-12 * yscale;

        // gradient of the smooth part: sum over nonbasic rows of psi(r_i) x_i
        let mut psi_x = DVector::<f64>::zeros(k);
        let mut degenerate = Vec::new();
        for i in 0..n {
            if in_basis[i] {
                continue;
            }
            if r[i].abs() <= zero_tol {
                degenerate.push(i);
                continue;
            }
            let psi = if r[i] > 0.0 { tau } else { tau - 1.0 };
            for a in 0..k {
                psi_x[a] += psi * x[(i, a)];
            }
        }

        // edge p with sign s: d beta = -s inv e_p, residual rates g_i = -x_i . d beta
        let mut best: Option<(f64, usize, DVector<f64>)> = None;
        for p in 0..k {
            let col = inv.column(p).into_owned();
            for s in [1.0, -1.0] {
                let dbeta = &col * (-s);
                // smooth part: d/ds sum rho(r_i + s g_i) = sum psi_i g_i
                let mut d = -psi_x.dot(&dbeta);
                d += if s > 0.0 { tau } else { 1.0 - tau };
                for &i in &degenerate {
                    let g = -(x.row(i) * &dbeta)[(0, 0)];
                    d += if g > 0.0 { tau * g } else { (tau - 1.0) * g };
                }
                if d < -tol && best.as_ref().is_none_or(|b| d < b.0) {
                    best = Some((d, p, dbeta));
                }
            }
        }
        let Some((slope0, p, dbeta)) = best else {
            let beta: Vec<f64> = beta.iter().copied().collect();
            let objective = objective(x, y, &beta, tau);
            return Ok(QregFit {
                beta,
                objective,
                pivots,
            });
        };
        if pivots >= max_pivots {
            let beta: Vec<f64> = beta.iter().copied().collect();
            let objective = objective(x, y, &beta, tau);
            return Err(Error::NoConvergence {
                iterations: pivots,
                objective,
            });
        }

        // line search along the edge: breakpoints where a nonbasic residual hits zero
        let g = x * &dbeta;
        let mut breaks: Vec<(f64, usize, f64)> = (0..n)
            .filter(|&i| !in_basis[i] && r[i].abs() > zero_tol)
            .filter_map(|i| {
                let gi = -g[i];
                if gi == 0.0 {
                    return None;
                }
                let t = -r[i] / gi;
                (t >= 0.0).then_some((t, i, gi.abs()))
            })
            .collect();
        breaks.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut slope = slope0;
        let mut entering = None;
        for &(_, i, gabs) in &breaks {
            slope += gabs;
            if slope >= -tol {
                entering = Some(i);
                break;
            }
        }
        let Some(enter) = entering else {
            return Err(Error::NoConvergence {
                iterations: pivots,
                objective: f64::NEG_INFINITY,
            });
        };
        in_basis[basis[p]] = false;
        in_basis[enter] = true;
        basis[p] = enter;
        pivots += 1;
    }
}

/// Loss of the best constant fit (an order statistic at level `tau`).
pub fn intercept_only_objective(y: &[f64], tau: f64) -> f64 {
    let s = stats::sorted(y);
    let idx = ((s.len() as f64 * tau).ceil() as usize).clamp(1, s.len()) - 1;
    s.iter().map(|v| rho(v - s[idx], tau)).sum()
}

/// Quantile regression with xy-pair bootstrap standard errors and normal
/// p-values. Aborts when more than 5% of replicate fits fail.
pub fn xy_pair_bootstrap(
    design: &DesignMatrix,
    y: &[f64],
    tau: f64,
    replicates: usize,
    seed: u64,
) -> Result<CoefTable> {
    if replicates < 2 {
        return invalid(format!("bootstrap needs at least 2 replicates, got {replicates}"));
    }
    if replicates < 100 {
        log::warn!("only {replicates} bootstrap replicates");
    }
    let fit = qreg_fit(&design.x, y, tau)?;
    let (n, k) = (design.n(), design.k());
    let reps: Vec<Option<Vec<f64>>> = (0..replicates)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::substream(seed, b as u64);
            let rows: Vec<usize> = (0..n).map(|_| r.random_range(0..n)).collect();
            let xb = DMatrix::from_fn(n, k, |i, j| design.x[(rows[i], j)]);
            let yb: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
            qreg_fit(&xb, &yb, tau).ok().map(|f| f.beta)
        })
        .collect();
    let ok: Vec<Vec<f64>> = reps.iter().flatten().cloned().collect();
    let failed = replicates - ok.len();
    if failed * 20 > replicates {
        return Err(Error::ReplicateFailures {
            failed,
            total: replicates,
        });
    }
    if failed > 0 {
        log::warn!("{failed} of {replicates} bootstrap fits failed and were skipped");
    }
    let means: Vec<f64> = (0..k)
        .map(|j| stats::mean(&ok.iter().map(|b| b[j]).collect::<Vec<_>>()))
        .collect();
    let denom = (ok.len().max(2) - 1) as f64;
    let vcov = DMatrix::from_fn(k, k, |a, c| {
        ok.iter().map(|b| (b[a] - means[a]) * (b[c] - means[c])).sum::<f64>() / denom
    });
    let base = intercept_only_objective(y, tau);
    let r2 = if base > 0.0 {
        1.0 - fit.objective / base
    } else {
        f64::NAN
    };
    let mut table = CoefTable {
        names: design.names.clone(),
        estimate: fit.beta.clone(),
        se: (0..k).map(|j| vcov[(j, j)].max(0.0).sqrt()).collect(),
        t: Vec::new(),
        p: Vec::new(),
        df: vec![f64::INFINITY; k],
        vcov: to_rows(&vcov),
        estimator: EstimatorTag::QregXyboot,
        tau: Some(tau),
        n,
        clusters: design.n_clusters(),
        r2,
        warnings: if failed > 0 {
            vec![format!("{failed} of {replicates} bootstrap fits failed")]
        } else {
            Vec::new()
        },
    };
    table.fill_tests(true);
    Ok(table)
}
