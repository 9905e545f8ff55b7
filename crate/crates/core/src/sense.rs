//! Omitted-variable sensitivity (robustness values, bias-adjusted estimates,
//! benchmark bounds, contours) and the shadow-wage sweep of net burden.
//!
//! Adjustments follow the partial-R² parameterization: a confounder `Z`
//! explaining `r2_dz` of the residual variance of the regressor of interest
//! and `r2_yz` of the residual variance of the outcome shifts the estimate by
//! `se * sqrt(df) * sqrt(r2_yz * r2_dz / (1 - r2_dz))`, always toward zero.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::causal::{bca_bootstrap, compose_net_burden, AteResult};
use crate::cohort::EconomicParams;
use crate::error::{invalid, Error, Result};
use crate::infer::{ols_classical, DesignMatrix};
use crate::stats;

pub const DEFAULT_MULTIPLIERS: [f64; 5] = [0.50, 0.75, 1.00, 1.25, 1.50];
const R2_CAP: f64 = 0.999_999;

/// Minimal equal-strength partial R² that nullifies the estimate, or with
/// `alpha` that makes it lose significance at that level.
pub fn robustness_value(t: f64, df: f64, q: f64, alpha: Option<f64>) -> Result<f64> {
    if !(df > 0.0) {
        return invalid(format!("degrees of freedom must be positive, got {df}"));
    }
    let mut f = q * t.abs() / df.sqrt();
    if let Some(a) = alpha {
        if !(a > 0.0 && a < 1.0) {
            return invalid(format!("alpha {a} outside (0, 1)"));
        }
        if df <= 1.0 {
            return invalid("significance-based robustness value needs df > 1");
        }
        let crit = stats::t_critical(a, df - 1.0).abs() / (df - 1.0).sqrt();
        f = (f - crit).max(0.0);
    }
    let f2 = f * f;
    Ok(0.5 * ((f2 * f2 + 4.0 * f2).sqrt() - f2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adjusted {
    pub estimate: f64,
    pub se: f64,
    pub t: f64,
}

pub fn adjusted_estimate(estimate: f64, se: f64, df: f64, r2_yz: f64, r2_dz: f64) -> Result<Adjusted> {
    for (name, v) in [("r2_yz", r2_yz), ("r2_dz", r2_dz)] {
        if !(0.0..1.0).contains(&v) {
            return invalid(format!("{name} = {v} outside [0, 1)"));
        }
    }
    if !(df > 1.0) {
        return invalid(format!("adjustment needs df > 1, got {df}"));
    }
    let bias = se * df.sqrt() * (r2_yz * r2_dz / (1.0 - r2_dz)).sqrt();
    let adj = estimate - estimate.signum() * bias;
    let adj_se = se * ((1.0 - r2_yz) / (1.0 - r2_dz)).sqrt() * (df / (df - 1.0)).sqrt();
    Ok(Adjusted {
        estimate: adj,
        se: adj_se,
        t: adj / adj_se,
    })
}

/// Partial R² of the benchmark covariate with the regressor of interest
/// (given the other regressors) and with the outcome (given everything
/// else), each from a refit with and without the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkPartials {
    pub r2_dz: f64,
    pub r2_yz: f64,
}

fn rss(design: &DesignMatrix, y: &[f64]) -> Result<f64> {
    let t = ols_classical(design, y)?;
    let b = nalgebra::DVector::from_vec(t.estimate);
    let fitted = &design.x * b;
    Ok(y.iter().zip(fitted.iter()).map(|(a, f)| (a - f).powi(2)).sum())
}

pub fn benchmark_partials(
    design: &DesignMatrix,
    y: &[f64],
    coefficient: &str,
    benchmark: &str,
) -> Result<BenchmarkPartials> {
    let jd = design
        .column_index(coefficient)
        .ok_or_else(|| Error::InvalidArgument(format!("`{coefficient}` not in design")))?;
    let jb = design
        .column_index(benchmark)
        .ok_or_else(|| Error::InvalidArgument(format!("benchmark `{benchmark}` not in design")))?;
    if jd == jb {
        return invalid("benchmark must differ from the coefficient of interest");
    }
    let partial = |full: &DesignMatrix, target: &[f64]| -> Result<f64> {
        let jb = full.column_index(benchmark).expect("present");
        let reduced = full.drop_column(jb);
        let without = rss(&reduced, target)?;
        let with = rss(full, target)?;
        Ok(if without > 0.0 {
            ((without - with) / without).clamp(0.0, 1.0)
        } else {
            0.0
        })
    };
    let d: Vec<f64> = design.x.column(jd).iter().copied().collect();
    let others = design.drop_column(jd);
    Ok(BenchmarkPartials {
        r2_dz: partial(&others, &d)?,
        r2_yz: partial(design, y)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub multiplier: f64,
    pub r2_dz: f64,
    pub r2_yz: f64,
    pub estimate: f64,
    pub se: f64,
    pub t: f64,
    pub capped: bool,
}

pub fn benchmark_bounds(
    estimate: f64,
    se: f64,
    df: f64,
    partials: BenchmarkPartials,
    multipliers: &[f64],
) -> Result<Vec<Bound>> {
    multipliers
        .iter()
        .map(|&k| {
            if !(k >= 0.0) {
                return invalid(format!("benchmark multiplier {k} must be nonnegative"));
            }
            let raw = (k * partials.r2_dz, k * partials.r2_yz);
            let capped = raw.0 >= 1.0 || raw.1 >= 1.0;
            if capped {
                log::warn!("benchmark multiplier {k} pushes partial R2 to 1; capped");
            }
            let (r2_dz, r2_yz) = (raw.0.min(R2_CAP), raw.1.min(R2_CAP));
            let a = adjusted_estimate(estimate, se, df, r2_yz, r2_dz)?;
            Ok(Bound {
                multiplier: k,
                r2_dz,
                r2_yz,
                estimate: a.estimate,
                se: a.se,
                t: a.t,
                capped,
            })
        })
        .collect()
}

/// Adjusted t and estimate over a regular grid `i / grid_points`,
/// `i = 0..grid_points`, on both axes. Rows index `r2_dz`, columns `r2_yz`.
/// The origin cell carries the unadjusted values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contour {
    pub r2_dz: Vec<f64>,
    pub r2_yz: Vec<f64>,
    pub t: Vec<Vec<f64>>,
    pub estimate: Vec<Vec<f64>>,
}

pub fn contour_grid(estimate: f64, se: f64, df: f64, grid_points: usize) -> Result<Contour> {
    if grid_points < 2 {
        return invalid(format!("grid_points must be at least 2, got {grid_points}"));
    }
    let axis: Vec<f64> = (0..grid_points).map(|i| i as f64 / grid_points as f64).collect();
    let cells: Vec<Vec<Adjusted>> = axis
        .par_iter()
        .enumerate()
        .map(|(i, &dz)| {
            axis.iter()
                .enumerate()
                .map(|(j, &yz)| {
                    if i == 0 && j == 0 {
                        Ok(Adjusted {
                            estimate,
                            se,
                            t: estimate / se,
                        })
                    } else {
                        adjusted_estimate(estimate, se, df, yz, dz)
                    }
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(Contour {
        r2_dz: axis.clone(),
        r2_yz: axis,
        t: cells.iter().map(|r| r.iter().map(|c| c.t).collect()).collect(),
        estimate: cells.iter().map(|r| r.iter().map(|c| c.estimate).collect()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub coefficient: String,
    pub benchmark: String,
    pub estimate: f64,
    pub se: f64,
    pub t: f64,
    pub df: f64,
    pub alpha: f64,
    pub rv_point: f64,
    pub rv_alpha: f64,
    pub partials: BenchmarkPartials,
    pub bounds: Vec<Bound>,
    pub contour: Contour,
}

/// Full sensitivity analysis of one coefficient of a classical OLS fit.
pub fn sensitivity_report(
    design: &DesignMatrix,
    y: &[f64],
    coefficient: &str,
    benchmark: &str,
    multipliers: &[f64],
    grid_points: usize,
    alpha: f64,
) -> Result<SensitivityReport> {
    let fit = ols_classical(design, y)?;
    let j = fit
        .index_of(coefficient)
        .ok_or_else(|| Error::InvalidArgument(format!("`{coefficient}` not in design")))?;
    let (est, se, df) = (fit.estimate[j], fit.se[j], fit.df[j]);
    let t = est / se;
    let partials = benchmark_partials(design, y, coefficient, benchmark)?;
    Ok(SensitivityReport {
        coefficient: coefficient.to_string(),
        benchmark: benchmark.to_string(),
        estimate: est,
        se,
        t,
        df,
        alpha,
        rv_point: robustness_value(t, df, 1.0, None)?,
        rv_alpha: robustness_value(t, df, 1.0, Some(alpha))?,
        partials,
        bounds: benchmark_bounds(est, se, df, partials, multipliers)?,
        contour: contour_grid(est, se, df, grid_points)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WageSweep {
    pub multipliers: Vec<f64>,
    pub nate: Vec<AteResult>,
    /// `(1/N) sum dH_i * W_c / PPP_c`, the exact slope of NATE in `m`.
    pub slope: f64,
}

/// NATE(m) for each wage multiplier, each with a BCa interval drawn from the
/// same bootstrap seed.
#[allow(clippy::too_many_arguments)]
pub fn wage_sweep(
    ite_oop: &[f64],
    ite_hours: &[f64],
    clusters: &[String],
    params: &EconomicParams,
    multipliers: &[f64],
    replicates: usize,
    alpha: f64,
    seed: u64,
) -> Result<WageSweep> {
    if multipliers.is_empty() {
        return invalid("wage sweep needs at least one multiplier");
    }
    let hours_value = compose_net_burden(&vec![0.0; ite_oop.len()], ite_hours, clusters, params, 1.0)?;
    let nate = multipliers
        .par_iter()
        .map(|&m| {
            let net = compose_net_burden(ite_oop, ite_hours, clusters, params, m)?;
            bca_bootstrap(&net, replicates, alpha, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WageSweep {
        multipliers: multipliers.to_vec(),
        nate,
        slope: stats::mean(&hours_value),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::ClusterEconomics;
    use crate::infer::DesignMatrix;
    use crate::rng;
    use nalgebra::{DMatrix, DVector};
    use rand::Rng as _;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn rv_closed_forms() {
        assert_eq!(robustness_value(0.0, 100.0, 1.0, None).unwrap(), 0.0);
        let rv = robustness_value(10.0, 100.0, 1.0, None).unwrap();
        assert!((rv - (5f64.sqrt() - 1.0) / 2.0).abs() < 1e-12);
        assert!(robustness_value(1.0, 0.0, 1.0, None).is_err());
        let ra = robustness_value(4.0, 200.0, 1.0, Some(0.05)).unwrap();
        assert!(ra > 0.0 && ra < robustness_value(4.0, 200.0, 1.0, None).unwrap());
        assert_eq!(robustness_value(1.0, 200.0, 1.0, Some(0.05)).unwrap(), 0.0);
    }

    #[test]
    fn adjusted_reductions_and_inverse() {
        let a = adjusted_estimate(3.0, 1.0, 50.0, 0.0, 0.3).unwrap();
        assert_eq!(a.estimate, 3.0);
        let b = adjusted_estimate(3.0, 1.0, 50.0, 0.3, 0.0).unwrap();
        assert_eq!(b.estimate, 3.0);
        let c = adjusted_estimate(3.0, 1.0, 50.0, 0.0, 0.0).unwrap();
        assert!((c.se - (50.0f64 / 49.0).sqrt()).abs() < 1e-15);
        assert!(adjusted_estimate(3.0, 1.0, 50.0, 1.0, 0.0).is_err());

        for (est, se, df) in [(3.0, 1.0, 50.0), (-12.5, 4.0, 300.0), (0.2, 0.01, 9.0)] {
            let rv = robustness_value(est / se, df, 1.0, None).unwrap();
            let z = adjusted_estimate(est, se, df, rv, rv).unwrap();
            assert!(z.estimate.abs() < 1e-9 * est.abs().max(1.0), "{est}");
        }
    }

    /// Builds `Z = alpha d + beta e + gamma w` from orthonormal pieces: the
    /// treatment residualized on the other regressors, the outcome residual
    /// and a fresh direction orthogonal to both and to the design.
    pub(crate) fn constructed_confounder(
        x: &DMatrix<f64>,
        y: &[f64],
        jd: usize,
        r2_dz: f64,
        r2_yz: f64,
        sign: f64,
        seed: u64,
    ) -> Vec<f64> {
        let n = x.nrows();
        let proj_out = |basis: &DMatrix<f64>, v: &DVector<f64>| -> DVector<f64> {
            let q = basis.clone().qr().q();
            v - &q * (q.tr_mul(v))
        };
        let others = x.clone().remove_column(jd);
        let d = proj_out(&others, &x.column(jd).into_owned()).normalize();
        let e = proj_out(x, &DVector::from_column_slice(y)).normalize();
        let mut r = rng::stream(seed);
        let raw = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut r));
        let mut full = x.clone().insert_column(x.ncols(), 0.0);
        full.set_column(x.ncols(), &e);
        let w = proj_out(&full, &raw).normalize();
        let alpha = (r2_dz / (1.0 - r2_dz)).sqrt() * sign;
        let beta = r2_yz.sqrt();
        let gamma = (1.0 - r2_yz).sqrt();
        (&d * alpha + &e * beta + &w * gamma).iter().copied().collect()
    }

    #[test]
    fn constructed_confounder_refit_matches() {
        let mut r = rng::stream(31);
        for case in 0..5u64 {
            let n = 80;
            let x = DMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { r.random::<f64>() });
            let y: Vec<f64> = (0..n)
                .map(|i| 2.0 + 1.5 * x[(i, 1)] - x[(i, 2)] + 0.5 * Distribution::<f64>::sample(&StandardNormal, &mut r))
                .collect::<Vec<f64>>();
            let names = vec!["(Intercept)".into(), "d".into(), "x".into()];
            let design = DesignMatrix::from_parts(names, x.clone(), &vec![0; n]).unwrap();
            let fit = ols_classical(&design, &y).unwrap();
            let (est, se, df) = (fit.estimate[1], fit.se[1], fit.df[1]);
            let (r2_dz, r2_yz) = (0.05 + 0.04 * case as f64, 0.1 + 0.05 * case as f64);
            let expected = adjusted_estimate(est, se, df, r2_yz, r2_dz).unwrap();
            let refit = [1.0, -1.0]
                .iter()
                .map(|&s| {
                    let z = constructed_confounder(&x, &y, 1, r2_dz, r2_yz, s, case);
                    ols_classical(&design.with_column("z", &z), &y).unwrap()
                })
                .min_by(|a, b| a.estimate[1].abs().total_cmp(&b.estimate[1].abs()))
                .unwrap();
            assert!((refit.estimate[1] - expected.estimate).abs() < 1e-6);
            assert!((refit.se[1] - expected.se).abs() < 1e-6);
        }
    }

    #[test]
    fn bounds_and_contour() {
        let p = BenchmarkPartials {
            r2_dz: 0.02,
            r2_yz: 0.05,
        };
        let b = benchmark_bounds(4.0, 1.0, 100.0, p, &[0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(b[0].estimate, 4.0);
        assert!(b.windows(2).all(|w| w[1].t <= w[0].t));
        let big = benchmark_bounds(4.0, 1.0, 100.0, BenchmarkPartials { r2_dz: 0.6, r2_yz: 0.1 }, &[2.0]).unwrap();
        assert!(big[0].capped);

        let c = contour_grid(4.0, 1.0, 100.0, 20).unwrap();
        assert_eq!(c.t[0][0], 4.0);
        for i in 0..20 {
            for j in 0..20 {
                if i + 1 < 20 {
                    assert!(c.estimate[i + 1][j] <= c.estimate[i][j]);
                }
                if j + 1 < 20 {
                    assert!(c.estimate[i][j + 1] <= c.estimate[i][j]);
                }
            }
        }
        // the equal-strength diagonal changes sign between the cells that
        // bracket the robustness value
        let rv = robustness_value(4.0, 100.0, 1.0, None).unwrap();
        let lo = (rv * 20.0).floor() as usize;
        assert!(c.estimate[lo][lo] >= 0.0 && c.estimate[lo + 1][lo + 1] <= 0.0);
        assert!(contour_grid(4.0, 1.0, 100.0, 1).is_err());
    }

    #[test]
    fn t_scale_invariance() {
        let mut r = rng::stream(5);
        let n = 60;
        let x = DMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { r.random::<f64>() });
        let y: Vec<f64> = (0..n)
            .map(|i| x[(i, 1)] * 3.0 + x[(i, 2)] + r.random::<f64>())
            .collect();
        let names = vec!["(Intercept)".into(), "d".into(), "adl".into()];
        let d = DesignMatrix::from_parts(names, x, &vec![0; n]).unwrap();
        let a = sensitivity_report(&d, &y, "d", "adl", &[1.0, 2.0, 3.0], 5, 0.05).unwrap();
        let scaled: Vec<f64> = y.iter().map(|v| v * 7.0).collect();
        let b = sensitivity_report(&d, &scaled, "d", "adl", &[1.0, 2.0, 3.0], 5, 0.05).unwrap();
        for (u, v) in a.bounds.iter().zip(&b.bounds) {
            assert!((u.t - v.t).abs() < 1e-9);
            assert!((u.estimate * 7.0 - v.estimate).abs() < 1e-9);
        }
        assert!(a.rv_alpha <= a.rv_point && a.rv_point <= 1.0);
    }

    fn econ() -> EconomicParams {
        let mut m = std::collections::BTreeMap::new();
        m.insert("A".to_string(), ClusterEconomics { wage: 20.0, ppp: 1.0 });
        m.insert("B".to_string(), ClusterEconomics { wage: 15.0, ppp: 0.8 });
        EconomicParams::new(m, 5840.0).unwrap()
    }

    #[test]
    fn sweep_identities() {
        let single = compose_net_burden(&[-500.0], &[-100.0], &["A".to_string()], &econ(), 0.5).unwrap();
        assert_eq!(single, vec![-1500.0]);

        let mut r = rng::stream(3);
        let n = 200;
        let oop: Vec<f64> = (0..n).map(|_| r.random_range(-800.0..200.0)).collect();
        let hours: Vec<f64> = (0..n).map(|_| r.random_range(-300.0..50.0)).collect();
        let cl: Vec<String> = (0..n).map(|i| if i % 3 == 0 { "A" } else { "B" }.to_string()).collect();
        let s = wage_sweep(&oop, &hours, &cl, &econ(), &DEFAULT_MULTIPLIERS, 200, 0.05, 9).unwrap();
        assert_eq!(s.nate.len(), 5);
        let net = compose_net_burden(&oop, &hours, &cl, &econ(), 1.0).unwrap();
        let ate = bca_bootstrap(&net, 200, 0.05, 9).unwrap();
        assert!((s.nate[2].point - ate.point).abs() <= 1e-9 * ate.point.abs());
        let pts: Vec<f64> = s.nate.iter().map(|a| a.point).collect();
        let slope = (pts[4] - pts[0]) / 1.0;
        assert!((slope - s.slope).abs() <= 1e-9 * s.slope.abs());
        for (m, p) in DEFAULT_MULTIPLIERS.iter().zip(&pts) {
            assert!((pts[0] + (m - 0.5) * s.slope - p).abs() <= 1e-9 * p.abs());
        }
        assert!(s.slope < 0.0 && pts.windows(2).all(|w| w[1] < w[0]));
        assert!(wage_sweep(&oop[..3], &hours, &cl, &econ(), &[1.0], 200, 0.05, 1).is_err());
    }
}
