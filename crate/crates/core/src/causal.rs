//! Two-learner counterfactual estimation.
//!
//! One forest per arm is fitted on the synthetic twins; both are then
//! evaluated on every empirical row (G-computation) to give individual
//! effects, which are winsorized and summarized with a BCa bootstrap.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{CohortTable, ColumnKind, ColumnRole, EconomicParams};
use crate::error::{invalid, Error, Result};
use crate::forest::{fit_forest, Forest, ForestConfig};
use crate::rng;
use crate::stats::{self, normal_cdf, normal_quantile, quantile_sorted};

/// Default number of bootstrap replicates.
pub const DEFAULT_REPLICATES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EncodedColumn {
    name: String,
    kind: ColumnKind,
    categories: Vec<String>,
}

/// Maps cohort columns to numeric forest features: continuous and binary
/// cells pass through, categorical cells expand to one indicator per level.
/// Treatment and outcome columns are never features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEncoder {
    columns: Vec<EncodedColumn>,
}

impl FeatureEncoder {
    pub fn from_table(table: &CohortTable) -> Self {
        let columns = table
            .schema()
            .columns
            .iter()
            .filter(|c| {
                matches!(
                    c.role,
                    ColumnRole::Covariate | ColumnRole::Cluster | ColumnRole::Stratum
                )
            })
            .map(|c| EncodedColumn {
                name: c.name.clone(),
                kind: c.kind,
                categories: c.categories.clone(),
            })
            .collect();
        Self { columns }
    }

    /// Names of the encoded features, in order.
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for c in &self.columns {
            if c.kind == ColumnKind::Categorical {
                names.extend(c.categories.iter().map(|l| format!("{}={}", c.name, l)));
            } else {
                names.push(c.name.clone());
            }
        }
        names
    }

    pub fn encode(&self, table: &CohortTable) -> Result<Vec<Vec<f64>>> {
        let schema = table.schema();
        let mut out = Vec::new();
        for c in &self.columns {
            let j = schema.index_of(&c.name).ok_or_else(|| Error::UnknownColumn {
                column: c.name.clone(),
                row: None,
            })?;
            let spec = schema.column(j);
            if spec.kind != c.kind || spec.categories != c.categories {
                return Err(Error::Schema(format!(
                    "column `{}` does not match the fitted feature layout",
                    c.name
                )));
            }
            if table.missing_count(j) > 0 {
                return invalid(format!("column `{}` has missing cells", c.name));
            }
            let col = table.column(j);
            if c.kind == ColumnKind::Categorical {
                for level in 0..c.categories.len() {
                    out.push(col.iter().map(|&v| f64::from(v as usize == level)).collect());
                }
            } else {
                out.push(col.to_vec());
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseSurfacePair {
    pub mu1: Forest,
    pub mu0: Forest,
    pub features: FeatureEncoder,
}

impl ResponseSurfacePair {
    pub fn feature_order(&self) -> Vec<String> {
        self.features.feature_names()
    }
}

/// Fits the treated-arm and control-arm response surfaces on `twins`.
///
/// Both forests use the same seed so that relabeling the arms swaps the
/// surfaces exactly.
pub fn fit_tlearner(twins: &CohortTable, outcome: &str, cfg: &ForestConfig) -> Result<ResponseSurfacePair> {
    let schema = twins.schema();
    let y_idx = schema.require(outcome)?;
    if twins.missing_count(y_idx) > 0 {
        return invalid(format!("outcome `{outcome}` has missing cells"));
    }
    let features = FeatureEncoder::from_table(twins);
    let x = features.encode(twins)?;
    let y = twins.column(y_idx);
    let treat = twins.treatment();
    let arm = |level: f64| -> Result<Forest> {
        let rows: Vec<usize> = (0..twins.n_rows()).filter(|&i| treat[i] == level).collect();
        if rows.len() < cfg.min_leaf.max(1) {
            return invalid(format!(
                "treatment arm {level} has {} rows, fewer than min_leaf {}",
                rows.len(),
                cfg.min_leaf
            ));
        }
        let xa: Vec<Vec<f64>> = x.iter().map(|c| rows.iter().map(|&i| c[i]).collect()).collect();
        let ya: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
        fit_forest(&xa, &ya, cfg)
    };
    Ok(ResponseSurfacePair {
        mu1: arm(1.0)?,
        mu0: arm(0.0)?,
        features,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IteVector {
    pub outcome_name: String,
    pub deltas: Vec<f64>,
    /// Predicted potential outcomes under treatment and control.
    pub y1_hat: Vec<f64>,
    pub y0_hat: Vec<f64>,
    pub winsor_bounds: Option<(f64, f64)>,
}

impl IteVector {
    pub fn from_deltas(outcome_name: &str, deltas: Vec<f64>) -> Self {
        Self {
            outcome_name: outcome_name.to_string(),
            y1_hat: Vec::new(),
            y0_hat: Vec::new(),
            deltas,
            winsor_bounds: None,
        }
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    /// Winsorizes the deltas in place and records the bounds.
    pub fn winsorize(&mut self, low_q: f64, high_q: f64) -> Result<()> {
        let (w, bounds) = winsorize_with_bounds(&self.deltas, low_q, high_q)?;
        self.deltas = w;
        self.winsor_bounds = Some(bounds);
        Ok(())
    }
}

/// Individual effects `mu1(x_i) - mu0(x_i)` for every empirical row.
pub fn gcompute_ite(pair: &ResponseSurfacePair, empirical: &CohortTable, outcome_name: &str) -> Result<IteVector> {
    if empirical.n_rows() == 0 {
        return Ok(IteVector::from_deltas(outcome_name, Vec::new()));
    }
    let x = pair.features.encode(empirical)?;
    let y1 = pair.mu1.predict(&x);
    let y0 = pair.mu0.predict(&x);
    let deltas = y1.iter().zip(&y0).map(|(a, b)| a - b).collect();
    Ok(IteVector {
        outcome_name: outcome_name.to_string(),
        deltas,
        y1_hat: y1,
        y0_hat: y0,
        winsor_bounds: None,
    })
}

/// Clamps values to the `low_q` and `high_q` sample quantiles (linear
/// interpolation between order statistics).
pub fn winsorize(v: &[f64], low_q: f64, high_q: f64) -> Result<Vec<f64>> {
    winsorize_with_bounds(v, low_q, high_q).map(|(w, _)| w)
}

pub fn winsorize_with_bounds(v: &[f64], low_q: f64, high_q: f64) -> Result<(Vec<f64>, (f64, f64))> {
    if v.is_empty() {
        return invalid("cannot winsorize an empty vector");
    }
    if !(0.0 <= low_q && low_q < high_q && high_q <= 1.0) {
        return invalid(format!("winsorization levels ({low_q}, {high_q}) invalid"));
    }
    let s = stats::sorted(v);
    let lo = quantile_sorted(&s, low_q);
    let hi = quantile_sorted(&s, high_q);
    Ok((v.iter().map(|x| x.clamp(lo, hi)).collect(), (lo, hi)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteResult {
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub alpha: f64,
    pub replicates: usize,
    #[serde(with = "crate::serde_float")]
    pub z0: f64,
    #[serde(with = "crate::serde_float")]
    pub a: f64,
    /// Standard deviation of the bootstrap replicates.
    pub se: f64,
    /// All replicates identical; the interval collapsed to the point.
    pub degenerate: bool,
}

/// Percentile bootstrap interval read from the replicate distribution.
pub fn percentile_interval(replicates: &[f64], alpha: f64) -> (f64, f64) {
    let s = stats::sorted(replicates);
    (quantile_sorted(&s, alpha / 2.0), quantile_sorted(&s, 1.0 - alpha / 2.0))
}

/// Jackknife acceleration for the mean statistic.
pub fn jackknife_acceleration(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let total: f64 = v.iter().sum();
    let loo: Vec<f64> = v.iter().map(|x| (total - x) / (n - 1.0)).collect();
    let m = stats::mean(&loo);
    let (mut s2, mut s3) = (0.0, 0.0);
    for t in &loo {
        let d = m - t;
        s2 += d * d;
        s3 += d * d * d;
    }
    if s2 == 0.0 {
        return 0.0;
    }
    let a = s3 / (6.0 * s2.powf(1.5));
    if a.abs() < 1e-12 {
        0.0
    } else {
        a
    }
}

/// Bias correction from the fraction of replicates strictly below `point`.
pub fn bias_correction(replicates: &[f64], point: f64) -> f64 {
    let b = replicates.len();
    let below = replicates.iter().filter(|&&r| r < point).count();
    if 2 * below == b {
        return 0.0;
    }
    let frac = (below as f64 / b as f64).clamp(0.5 / b as f64, 1.0 - 0.5 / b as f64);
    normal_quantile(frac)
}

/// BCa-adjusted lower/upper percentile levels.
pub fn bca_levels(z0: f64, a: f64, alpha: f64) -> (f64, f64) {
    if z0 == 0.0 && a == 0.0 {
        return (alpha / 2.0, 1.0 - alpha / 2.0);
    }
    let adj = |z: f64| {
        let w = z0 + z;
        normal_cdf(z0 + w / (1.0 - a * w))
    };
    (
        adj(normal_quantile(alpha / 2.0)),
        adj(normal_quantile(1.0 - alpha / 2.0)),
    )
}

/// BCa interval for the mean of `data` given its bootstrap replicates.
pub fn bca_from_replicates(data: &[f64], replicates: &[f64], alpha: f64) -> AteResult {
    let point = stats::mean(data);
    let s = stats::sorted(replicates);
    let b = s.len();
    let rep_mean = stats::mean(&s);
    let se = (s.iter().map(|r| (r - rep_mean).powi(2)).sum::<f64>() / (b.max(2) - 1) as f64).sqrt();
    if s[0] == s[b - 1] {
        return AteResult {
            point,
            ci_low: point,
            ci_high: point,
            alpha,
            replicates: b,
            z0: 0.0,
            a: 0.0,
            se: 0.0,
            degenerate: true,
        };
    }
    let z0 = bias_correction(&s, point);
    let a = jackknife_acceleration(data);
    let (lo, hi) = bca_levels(z0, a, alpha);
    AteResult {
        point,
        ci_low: quantile_sorted(&s, lo),
        ci_high: quantile_sorted(&s, hi),
        alpha,
        replicates: b,
        z0,
        a,
        se,
        degenerate: false,
    }
}

/// Bootstrap replicates of the mean; replicate `b` uses substream `b`.
pub fn bootstrap_means(v: &[f64], replicates: usize, seed: u64) -> Vec<f64> {
    let n = v.len();
    (0..replicates)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::substream(seed, b as u64);
            (0..n).map(|_| v[r.random_range(0..n)]).sum::<f64>() / n as f64
        })
        .collect()
}

/// BCa bootstrap interval of the mean.
pub fn bca_bootstrap(v: &[f64], replicates: usize, alpha: f64, seed: u64) -> Result<AteResult> {
    if v.len() < 3 {
        return invalid(format!("BCa bootstrap needs at least 3 values, got {}", v.len()));
    }
    if replicates < 100 {
        return invalid(format!("at least 100 replicates required, got {replicates}"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return invalid(format!("alpha {alpha} outside (0, 1)"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return invalid("non-finite value in bootstrap input");
    }
    let reps = bootstrap_means(v, replicates, seed);
    let result = bca_from_replicates(v, &reps, alpha);
    if result.degenerate {
        log::warn!("all bootstrap replicates identical; interval collapsed to the point estimate");
    }
    Ok(result)
}

/// Per-row net-burden effect `d_oop + d_hours * wage * multiplier / ppp`,
/// with out-of-pocket effects already in purchasing-power units.
pub fn compose_net_burden(
    ite_oop: &[f64],
    ite_hours: &[f64],
    clusters: &[String],
    params: &EconomicParams,
    multiplier: f64,
) -> Result<Vec<f64>> {
    if ite_oop.len() != ite_hours.len() || ite_oop.len() != clusters.len() {
        return invalid(format!(
            "length mismatch: {} oop effects, {} hours effects, {} cluster labels",
            ite_oop.len(),
            ite_hours.len(),
            clusters.len()
        ));
    }
    ite_oop
        .iter()
        .zip(ite_hours)
        .zip(clusters)
        .map(|((o, h), c)| {
            let e = params.get(c)?;
            Ok(o + h * (e.wage * multiplier) / e.ppp)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{ColumnSpec, Provenance, Schema};

    #[test]
    fn winsorize_examples() {
        let v = vec![3.0; 10];
        assert_eq!(winsorize(&v, 0.01, 0.99).unwrap(), v);

        // oracle: h = 99 q; q=0.1 -> 10 + 0.9, q=0.9 -> 90 + 0.1
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let (w, (lo, hi)) = winsorize_with_bounds(&v, 0.10, 0.90).unwrap();
        assert!((lo - 10.9).abs() < 1e-12 && (hi - 90.1).abs() < 1e-12);
        assert_eq!(w[0], lo);
        assert_eq!(w[99], hi);
        assert_eq!(w[50], 51.0);
        let again: Vec<f64> = w.iter().map(|x| x.clamp(lo, hi)).collect();
        assert_eq!(again, w);

        assert!(winsorize(&[], 0.01, 0.99).is_err());
        assert!(winsorize(&v, 0.5, 0.5).is_err());
    }

    #[test]
    fn bca_constant_vector_degenerates() {
        let r = bca_bootstrap(&[7.0; 20], 200, 0.05, 1).unwrap();
        assert!(r.degenerate);
        assert_eq!((r.ci_low, r.point, r.ci_high), (7.0, 7.0, 7.0));
    }

    #[test]
    fn bca_reduces_to_percentile_when_unadjusted() {
        // symmetric data: jackknife skewness vanishes; replicates placed so
        // exactly half lie below the point
        let data = [-3.0, -1.0, 0.0, 1.0, 3.0];
        assert_eq!(jackknife_acceleration(&data), 0.0);
        let reps: Vec<f64> = (0..200).map(|i| -1.0 + (i as f64 + 0.5) / 100.0).collect();
        let r = bca_from_replicates(&data, &reps, 0.05);
        assert_eq!(r.z0, 0.0);
        let (lo, hi) = percentile_interval(&reps, 0.05);
        assert_eq!((r.ci_low, r.ci_high), (lo, hi));
    }

    #[test]
    fn bca_rejects_bad_arguments() {
        assert!(bca_bootstrap(&[1.0, 2.0], 1000, 0.05, 0).is_err());
        assert!(bca_bootstrap(&[1.0, 2.0, 3.0], 99, 0.05, 0).is_err());
    }

    #[test]
    fn bca_is_seed_deterministic_and_brackets_point() {
        let v: Vec<f64> = (0..200).map(|i| ((i * 37) % 101) as f64).collect();
        let a = bca_bootstrap(&v, 1000, 0.05, 4).unwrap();
        let b = bca_bootstrap(&v, 1000, 0.05, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.ci_low <= a.point && a.point <= a.ci_high);
    }

    #[test]
    fn skewed_data_shifts_interval_right() {
        let v: Vec<f64> = (1..=60).map(|i| (i as f64 / 10.0).exp()).collect();
        let r = bca_bootstrap(&v, 2000, 0.05, 3).unwrap();
        assert!(r.a > 0.0);
        assert!(r.ci_high - r.point > r.point - r.ci_low);
    }

    fn arm_table(y1_shift: f64, swap: bool) -> CohortTable {
        let schema = Schema::new(vec![
            ColumnSpec::binary("d", ColumnRole::Treatment),
            ColumnSpec::categorical("g", ColumnRole::Cluster, &["a", "b"]),
            ColumnSpec::continuous("x", ColumnRole::Covariate),
            ColumnSpec::continuous("y", ColumnRole::Outcome),
        ])
        .unwrap();
        let n = 400;
        let mut cols = vec![Vec::new(); 4];
        for i in 0..n {
            let d = (i % 2) as f64;
            let x = (i / 2) as f64 / 200.0;
            let noise = ((i * 7919) % 13) as f64 / 13.0;
            cols[0].push(if swap { 1.0 - d } else { d });
            cols[1].push((i % 4 / 2) as f64);
            cols[2].push(x);
            cols[3].push(2.0 * x + noise + d * y1_shift);
        }
        CohortTable::new(schema, cols, Provenance::Synthetic).unwrap()
    }

    #[test]
    fn constant_shift_recovered() {
        let t = arm_table(5.0, false);
        let cfg = ForestConfig {
            n_trees: 30,
            ..ForestConfig::default()
        };
        let pair = fit_tlearner(&t, "y", &cfg).unwrap();
        let ite = gcompute_ite(&pair, &t, "y").unwrap();
        let ate = stats::mean(&ite.deltas);
        assert!((ate - 5.0).abs() < 0.5, "ate {ate}");
    }

    #[test]
    fn arm_relabeling_negates_deltas() {
        let cfg = ForestConfig {
            n_trees: 10,
            seed: 3,
            ..ForestConfig::default()
        };
        let a = arm_table(1.0, false);
        let b = arm_table(1.0, true);
        let da = gcompute_ite(&fit_tlearner(&a, "y", &cfg).unwrap(), &a, "y").unwrap();
        let db = gcompute_ite(&fit_tlearner(&b, "y", &cfg).unwrap(), &a, "y").unwrap();
        for (x, y) in da.deltas.iter().zip(&db.deltas) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn tlearner_errors() {
        let t = arm_table(1.0, false);
        assert!(fit_tlearner(&t, "missing", &ForestConfig::default()).is_err());
        let treated: Vec<usize> = (0..t.n_rows()).filter(|i| i % 2 == 1).collect();
        let one_arm = t.select_rows(&treated);
        assert!(fit_tlearner(&one_arm, "y", &ForestConfig::default()).is_err());
    }

    #[test]
    fn gcompute_edge_cases() {
        let t = arm_table(0.0, false);
        let cfg = ForestConfig {
            n_trees: 5,
            ..ForestConfig::default()
        };
        let pair = fit_tlearner(&t, "y", &cfg).unwrap();
        let same = ResponseSurfacePair {
            mu1: pair.mu0.clone(),
            mu0: pair.mu0.clone(),
            features: pair.features.clone(),
        };
        assert!(gcompute_ite(&same, &t, "y").unwrap().deltas.iter().all(|&d| d == 0.0));
        let empty = t.select_rows(&[]);
        assert!(gcompute_ite(&pair, &empty, "y").unwrap().is_empty());

        let schema = Schema::new(vec![
            ColumnSpec::binary("d", ColumnRole::Treatment),
            ColumnSpec::categorical("g", ColumnRole::Cluster, &["a", "b"]),
            ColumnSpec::continuous("z", ColumnRole::Covariate),
        ])
        .unwrap();
        let other = CohortTable::new(schema, vec![vec![0.0], vec![0.0], vec![1.0]], Provenance::Empirical).unwrap();
        assert!(gcompute_ite(&pair, &other, "y").is_err());
    }

    #[test]
    fn constant_surfaces_give_constant_deltas() {
        let schema = Schema::new(vec![
            ColumnSpec::binary("d", ColumnRole::Treatment),
            ColumnSpec::categorical("g", ColumnRole::Cluster, &["a", "b"]),
            ColumnSpec::continuous("y", ColumnRole::Outcome),
        ])
        .unwrap();
        let t = CohortTable::new(
            schema,
            vec![
                vec![1.0, 1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0, 1.0],
                vec![5.0, 5.0, 3.0, 3.0],
            ],
            Provenance::Synthetic,
        )
        .unwrap();
        let cfg = ForestConfig {
            min_leaf: 1,
            n_trees: 3,
            ..ForestConfig::default()
        };
        // cluster-only features with constant within-arm outcomes
        let pair = fit_tlearner(&t, "y", &cfg).unwrap();
        let ite = gcompute_ite(&pair, &t, "y").unwrap();
        assert!(ite.deltas.iter().all(|&d| d == 2.0));
    }

    #[test]
    fn net_burden_composition() {
        let p = EconomicParams::from_json(r#"{"AT": {"wage": 20, "ppp": 1.0}}"#).unwrap();
        let v = compose_net_burden(&[-500.0], &[-100.0], &["AT".to_string()], &p, 0.5).unwrap();
        assert_eq!(v, vec![-1500.0]);
        assert!(compose_net_burden(&[1.0], &[], &["AT".to_string()], &p, 1.0).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn winsorization_is_monotone(mut v in proptest::collection::vec(-1e4f64..1e4, 2..60), bump in 0.0f64..100.0, idx in 0usize..60) {
                let i = idx % v.len();
                let (w, bounds) = winsorize_with_bounds(&v, 0.01, 0.99).unwrap();
                for x in &w {
                    prop_assert!(*x >= bounds.0 && *x <= bounds.1);
                }
                // pointwise monotone under fixed bounds
                let clamp = |x: f64| x.clamp(bounds.0, bounds.1);
                let before = clamp(v[i]);
                v[i] += bump;
                prop_assert!(clamp(v[i]) >= before);
            }
        }
    }
}
