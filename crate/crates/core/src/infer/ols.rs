use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::design::DesignMatrix;
use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorTag {
    OlsCr2,
    OlsClassical,
    QregXyboot,
}

/// Degrees-of-freedom rule for cluster-robust t tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DfRule {
    /// Per-coefficient Satterthwaite approximation (Bell and McCaffrey).
    #[default]
    Satterthwaite,
    /// Number of clusters minus one for every coefficient.
    ClustersMinusOne,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefTable {
    pub names: Vec<String>,
    #[serde(with = "crate::serde_float::vec")]
    pub estimate: Vec<f64>,
    #[serde(with = "crate::serde_float::vec")]
    pub se: Vec<f64>,
    #[serde(with = "crate::serde_float::vec")]
    pub t: Vec<f64>,
    #[serde(with = "crate::serde_float::vec")]
    pub p: Vec<f64>,
    #[serde(with = "crate::serde_float::vec")]
    pub df: Vec<f64>,
    /// Row-major `k x k`.
    #[serde(with = "crate::serde_float::mat")]
    pub vcov: Vec<Vec<f64>>,
    pub estimator: EstimatorTag,
    pub tau: Option<f64>,
    pub n: usize,
    pub clusters: usize,
    #[serde(with = "crate::serde_float")]
    pub r2: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl CoefTable {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn vcov_matrix(&self) -> DMatrix<f64> {
        let k = self.names.len();
        DMatrix::from_fn(k, k, |i, j| self.vcov[i][j])
    }

    pub(crate) fn fill_tests(&mut self, normal: bool) {
        self.t = self
            .estimate
            .iter()
            .zip(&self.se)
            .map(|(b, s)| if *s > 0.0 { b / s } else { f64::NAN })
            .collect();
        self.p = self
            .t
            .iter()
            .zip(&self.df)
            .map(|(t, df)| {
                if normal {
                    stats::normal_two_sided_p(*t)
                } else {
                    stats::t_two_sided_p(*t, *df)
                }
            })
            .collect();
    }
}

pub(crate) fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

struct LsFit {
    beta: DVector<f64>,
    resid: DVector<f64>,
    bread: DMatrix<f64>,
    r2: f64,
}

fn least_squares(design: &DesignMatrix, y: &[f64]) -> Result<LsFit> {
    let (n, k) = (design.n(), design.k());
    if y.len() != n {
        return invalid(format!("outcome has {} values for {n} design rows", y.len()));
    }
    if n <= k {
        return invalid(format!("need more rows ({n}) than regressors ({k})"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return invalid("outcome contains non-finite values");
    }
    let x = &design.x;
    let yv = DVector::from_column_slice(y);
    let bread = linalg::inv_spd(&x.tr_mul(x))
        .ok_or_else(|| Error::Singular("normal equations of the least-squares fit".into()))?;
    let beta = &bread * x.tr_mul(&yv);
    let resid = &yv - x * &beta;
    let ybar = stats::mean(y);
    let sst: f64 = y.iter().map(|v| (v - ybar).powi(2)).sum();
    let ssr = resid.norm_squared();
    let r2 = if sst > 0.0 {
        1.0 - ssr / sst
    } else if ssr == 0.0 {
        1.0
    } else {
        f64::NAN
    };
    Ok(LsFit { beta, resid, bread, r2 })
}

/// Classical OLS with homoskedastic variance `s^2 (X'X)^-1`, `s^2 = RSS/(n-k)`.
pub fn ols_classical(design: &DesignMatrix, y: &[f64]) -> Result<CoefTable> {
    let fit = least_squares(design, y)?;
    let dof = (design.n() - design.k()) as f64;
    let s2 = fit.resid.norm_squared() / dof;
    let vcov = &fit.bread * s2;
    let mut table = CoefTable {
        names: design.names.clone(),
        estimate: fit.beta.iter().copied().collect(),
        se: (0..design.k()).map(|j| vcov[(j, j)].max(0.0).sqrt()).collect(),
        t: Vec::new(),
        p: Vec::new(),
        df: vec![dof; design.k()],
        vcov: to_rows(&vcov),
        estimator: EstimatorTag::OlsClassical,
        tau: None,
        n: design.n(),
        clusters: design.n_clusters(),
        r2: fit.r2,
        warnings: Vec::new(),
    };
    table.fill_tests(false);
    Ok(table)
}

/// OLS with the CR2 cluster-robust variance. Residuals of each cluster are
/// scaled by `(I - H_gg)^{-1/2}` before forming the meat. A single cluster
/// falls back to singleton clusters (HC2) with a warning.
pub fn ols_cr2(design: &DesignMatrix, y: &[f64], df_rule: DfRule) -> Result<CoefTable> {
    let fit = least_squares(design, y)?;
    let (n, k) = (design.n(), design.k());
    let mut warnings = Vec::new();
    let ids: Vec<usize> = if design.n_clusters() < 2 {
        let msg = "fewer than two clusters; using heteroskedasticity-robust (HC2) standard errors";
        log::warn!("{msg}");
        warnings.push(msg.to_string());
        (0..n).collect()
    } else {
        design.cluster_ids.clone()
    };
    let groups = group_rows(&ids);
    let x = &design.x;
    let m = &fit.bread;

    let mut meat = DMatrix::<f64>::zeros(k, k);
    let mut adjust: Vec<DMatrix<f64>> = Vec::with_capacity(groups.len());
    for rows in &groups {
        let xg = select(x, rows);
        let hgg = &xg * m * xg.transpose();
        let a = linalg::sym_inv_sqrt(&(DMatrix::identity(rows.len(), rows.len()) - hgg), 1e-12);
        let eg = DVector::from_iterator(rows.len(), rows.iter().map(|&i| fit.resid[i]));
        let s = xg.tr_mul(&(&a * eg));
        meat += &s * s.transpose();
        adjust.push(a);
    }
    let vcov = m * meat * m;
    let vcov = (&vcov + vcov.transpose()) * 0.5;

    let g = groups.len();
    let df: Vec<f64> = match df_rule {
        DfRule::ClustersMinusOne => vec![(g - 1).max(1) as f64; k],
        DfRule::Satterthwaite => (0..k).map(|j| satterthwaite_df(x, m, &groups, &adjust, j)).collect(),
    };
    let mut table = CoefTable {
        names: design.names.clone(),
        estimate: fit.beta.iter().copied().collect(),
        se: (0..k).map(|j| vcov[(j, j)].max(0.0).sqrt()).collect(),
        t: Vec::new(),
        p: Vec::new(),
        df,
        vcov: to_rows(&vcov),
        estimator: EstimatorTag::OlsCr2,
        tau: None,
        n,
        clusters: design.n_clusters(),
        r2: fit.r2,
        warnings,
    };
    table.fill_tests(false);
    Ok(table)
}

fn group_rows(ids: &[usize]) -> Vec<Vec<usize>> {
    let g = ids.iter().copied().max().map_or(0, |m| m + 1);
    let mut groups = vec![Vec::new(); g];
    for (i, &c) in ids.iter().enumerate() {
        groups[c].push(i);
    }
    groups.retain(|r| !r.is_empty());
    groups
}

fn select(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)])
}

/// Bell-McCaffrey degrees of freedom for coefficient `j` under a working
/// homoskedastic model: with `w_g = (I - H)_{.,g} A_g X_g M e_j` stacked as
/// columns of `W`, `df = tr(W'W)^2 / tr((W'W)^2)`.
fn satterthwaite_df(
    x: &DMatrix<f64>,
    m: &DMatrix<f64>,
    groups: &[Vec<usize>],
    adjust: &[DMatrix<f64>],
    j: usize,
) -> f64 {
    let n = x.nrows();
    let mc = m.column(j).into_owned();
    let ws: Vec<DVector<f64>> = groups
        .iter()
        .zip(adjust)
        .map(|(rows, a)| {
            let xg = select(x, rows);
            let v = a * (&xg * &mc);
            // (I - H) restricted to the cluster's columns, applied to v
            let proj = x * (m * xg.tr_mul(&v));
            let mut w = -proj;
            for (r, &i) in rows.iter().enumerate() {
                w[i] += v[r];
            }
            debug_assert_eq!(w.len(), n);
            w
        })
        .collect();
    let g = ws.len();
    let gram = DMatrix::from_fn(g, g, |a, b| ws[a].dot(&ws[b]));
    let tr = gram.trace();
    let tr2 = (&gram * &gram).trace();
    if tr2 > 0.0 {
        tr * tr / tr2
    } else {
        (g - 1).max(1) as f64
    }
}

/// HC2 variance computed directly from leverages.
pub fn hc2_vcov(design: &DesignMatrix, y: &[f64]) -> Result<DMatrix<f64>> {
    let fit = least_squares(design, y)?;
    let x = &design.x;
    let k = design.k();
    let mut meat = DMatrix::<f64>::zeros(k, k);
    for i in 0..design.n() {
        let xi = x.row(i).transpose();
        let h = (xi.transpose() * &fit.bread * &xi)[(0, 0)];
        let scale = if 1.0 - h > 1e-12 {
            fit.resid[i].powi(2) / (1.0 - h)
        } else {
            0.0
        };
        meat += &xi * xi.transpose() * scale;
    }
    Ok(&fit.bread * meat * &fit.bread)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn design(x: &[[f64; 2]], clusters: &[usize]) -> DesignMatrix {
        let m = DMatrix::from_fn(x.len(), 2, |i, j| x[i][j]);
        DesignMatrix::from_parts(vec!["(Intercept)".into(), "x".into()], m, clusters).unwrap()
    }

    #[test]
    fn singleton_clusters_equal_hc2() {
        let mut r = rng::stream(4);
        let n = 40;
        let rows: Vec<[f64; 2]> = (0..n).map(|_| [1.0, r.random_range(-2.0..2.0)]).collect();
        let y: Vec<f64> = rows
            .iter()
            .map(|x| 1.0 + 2.0 * x[1] + r.random_range(-1.0..1.0) * (1.0 + x[1].abs()))
            .collect();
        let d = design(&rows, &(0..n).collect::<Vec<_>>());
        let cr2 = ols_cr2(&d, &y, DfRule::Satterthwaite).unwrap();
        let hc2 = hc2_vcov(&d, &y).unwrap();
        assert!((cr2.vcov_matrix() - hc2).abs().max() < 1e-10);
    }

    #[test]
    fn perfect_fit_has_zero_se() {
        let rows: Vec<[f64; 2]> = (0..8).map(|i| [1.0, i as f64]).collect();
        let y: Vec<f64> = (0..8).map(|i| 3.0 - 0.5 * i as f64).collect();
        let t = ols_cr2(&design(&rows, &[0, 0, 1, 1, 2, 2, 3, 3]), &y, DfRule::Satterthwaite).unwrap();
        assert!((t.estimate[0] - 3.0).abs() < 1e-12 && (t.estimate[1] + 0.5).abs() < 1e-12);
        assert!(t.se.iter().all(|&s| s < 1e-7));
    }

    #[test]
    fn single_cluster_falls_back() {
        let rows: Vec<[f64; 2]> = (0..6).map(|i| [1.0, i as f64]).collect();
        let y = [1.0, 3.0, 2.0, 5.0, 4.0, 7.0];
        let d = design(&rows, &[0; 6]);
        let t = ols_cr2(&d, &y, DfRule::Satterthwaite).unwrap();
        assert_eq!(t.warnings.len(), 1);
        assert!((t.vcov_matrix() - hc2_vcov(&d, &y).unwrap()).abs().max() < 1e-10);
    }

    /// 2x2 inverse square root in closed form:
    /// `sqrt(B) = (B + sqrt(det) I) / sqrt(tr + 2 sqrt(det))`.
    fn inv_sqrt_2x2(b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
        let det = b[0][0] * b[1][1] - b[0][1] * b[1][0];
        let s = det.sqrt();
        let t = (b[0][0] + b[1][1] + 2.0 * s).sqrt();
        let r = [[(b[0][0] + s) / t, b[0][1] / t], [b[1][0] / t, (b[1][1] + s) / t]];
        let rd = r[0][0] * r[1][1] - r[0][1] * r[1][0];
        [[r[1][1] / rd, -r[0][1] / rd], [-r[1][0] / rd, r[0][0] / rd]]
    }

    #[test]
    fn three_cluster_matches_explicit_arithmetic() {
        let xs = [0.0, 1.0, 3.0, 4.0, 6.0, 8.0];
        let y = [1.0, 2.5, 2.0, 6.0, 5.5, 9.0];
        let rows: Vec<[f64; 2]> = xs.iter().map(|&x| [1.0, x]).collect();
        let t = ols_cr2(&design(&rows, &[0, 0, 1, 1, 2, 2]), &y, DfRule::Satterthwaite).unwrap();

        // oracle with plain arrays
        let (mut sxx, mut sx, mut sxy, mut sy) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..6 {
            sx += xs[i];
            sxx += xs[i] * xs[i];
            sy += y[i];
            sxy += xs[i] * y[i];
        }
        let det = 6.0 * sxx - sx * sx;
        let m = [[sxx / det, -sx / det], [-sx / det, 6.0 / det]];
        let b = [m[0][0] * sy + m[0][1] * sxy, m[1][0] * sy + m[1][1] * sxy];
        let e: Vec<f64> = (0..6).map(|i| y[i] - b[0] - b[1] * xs[i]).collect();
        let mut meat = [[0.0; 2]; 2];
        for g in 0..3 {
            let idx = [2 * g, 2 * g + 1];
            let xr = |i: usize| [1.0, xs[i]];
            let h = |a: usize, c: usize| {
                let (p, q) = (xr(a), xr(c));
                let mut s = 0.0;
                for u in 0..2 {
                    for v in 0..2 {
                        s += p[u] * m[u][v] * q[v];
                    }
                }
                s
            };
            let ih = [
                [1.0 - h(idx[0], idx[0]), -h(idx[0], idx[1])],
                [-h(idx[1], idx[0]), 1.0 - h(idx[1], idx[1])],
            ];
            let a = inv_sqrt_2x2(ih);
            let u = [
                a[0][0] * e[idx[0]] + a[0][1] * e[idx[1]],
                a[1][0] * e[idx[0]] + a[1][1] * e[idx[1]],
            ];
            let s = [u[0] + u[1], xs[idx[0]] * u[0] + xs[idx[1]] * u[1]];
            for p in 0..2 {
                for q in 0..2 {
                    meat[p][q] += s[p] * s[q];
                }
            }
        }
        for p in 0..2 {
            for q in 0..2 {
                let mut v = 0.0;
                for u in 0..2 {
                    for w in 0..2 {
                        v += m[p][u] * meat[u][w] * m[w][q];
                    }
                }
                assert!((t.vcov[p][q] - v).abs() < 1e-8, "vcov[{p}][{q}]");
            }
        }
    }

    #[test]
    fn estimates_invariant_to_relabeling_and_order() {
        let mut r = rng::stream(9);
        let n = 30;
        let rows: Vec<[f64; 2]> = (0..n).map(|_| [1.0, r.random::<f64>()]).collect();
        let y: Vec<f64> = rows.iter().map(|x| x[1] * 3.0 + r.random::<f64>()).collect();
        let cl: Vec<usize> = (0..n).map(|i| i % 5).collect();
        let a = ols_cr2(&design(&rows, &cl), &y, DfRule::Satterthwaite).unwrap();
        let relabeled: Vec<usize> = cl.iter().map(|c| 4 - c).collect();
        let b = ols_cr2(&design(&rows, &relabeled), &y, DfRule::Satterthwaite).unwrap();
        let perm: Vec<usize> = (0..n).rev().collect();
        let rows_p: Vec<[f64; 2]> = perm.iter().map(|&i| rows[i]).collect();
        let y_p: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let cl_p: Vec<usize> = perm.iter().map(|&i| cl[i]).collect();
        let c = ols_cr2(&design(&rows_p, &cl_p), &y_p, DfRule::Satterthwaite).unwrap();
        for j in 0..2 {
            assert!((a.estimate[j] - b.estimate[j]).abs() < 1e-12);
            assert!((a.estimate[j] - c.estimate[j]).abs() < 1e-10);
            assert!((a.se[j] - b.se[j]).abs() < 1e-12);
        }
        assert!(a.df.iter().all(|&d| d > 0.0 && d <= 5.0));
        assert!(a.p.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn rejects_short_or_singular_designs() {
        let rows = [[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]];
        assert!(ols_cr2(&design(&rows, &[0, 1, 2]), &[1.0, 2.0, 3.0], DfRule::default()).is_err());
        let rows = [[1.0, 0.0], [1.0, 1.0]];
        assert!(ols_cr2(&design(&rows, &[0, 1]), &[1.0, 2.0], DfRule::default()).is_err());
    }
}
