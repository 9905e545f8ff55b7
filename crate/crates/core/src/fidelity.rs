//! Fidelity and privacy audit of a synthetic cohort against the real one.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{CohortTable, ColumnKind, ColumnSpec};
use crate::error::{invalid, Result};
use crate::forest::{fit_forest, ForestConfig};
use crate::rng;
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub ks_avg: f64,
    pub marginal_mape: f64,
    pub corr_frob_score: f64,
    /// Raw `||C_real - C_synth||_F`.
    pub corr_frob_diff: f64,
    pub dcr: f64,
    pub dcr_p5: f64,
    pub adv_acc: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded_columns: Vec<String>,
}

fn check_pair(real: &CohortTable, synth: &CohortTable) -> Result<()> {
    if real.schema() != synth.schema() {
        return invalid("real and synthetic tables must share a schema");
    }
    if real.n_rows() == 0 || synth.n_rows() == 0 {
        return invalid("both tables must be nonempty");
    }
    Ok(())
}

fn observed(t: &CohortTable, j: usize) -> Vec<f64> {
    (0..t.n_rows())
        .filter(|&i| !t.is_missing(i, j))
        .map(|i| t.value(i, j))
        .collect()
}

/// Two-sample Kolmogorov-Smirnov distance.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    let (a, b) = (stats::sorted(a), stats::sorted(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Mean over continuous columns of `1 - D`.
pub fn ks_average(real: &CohortTable, synth: &CohortTable) -> Result<f64> {
    check_pair(real, synth)?;
    let cols: Vec<usize> = continuous_columns(real);
    if cols.is_empty() {
        return invalid("no continuous columns to compare");
    }
    let total: f64 = cols
        .iter()
        .map(|&j| 1.0 - ks_distance(&observed(real, j), &observed(synth, j)))
        .sum();
    Ok(total / cols.len() as f64)
}

fn continuous_columns(t: &CohortTable) -> Vec<usize> {
    (0..t.n_cols())
        .filter(|&j| t.schema().column(j).kind == ColumnKind::Continuous)
        .collect()
}

fn mape(real: &[f64], synth: &[f64]) -> Option<f64> {
    let terms: Vec<f64> = real
        .iter()
        .zip(synth)
        .filter(|(r, _)| **r > 0.0)
        .map(|(r, s)| (s - r).abs() / r)
        .collect();
    (!terms.is_empty()).then(|| stats::mean(&terms))
}

fn shares(counts: &[usize], n: usize) -> Vec<f64> {
    counts.iter().map(|&c| c as f64 / n as f64).collect()
}

/// Per-column MAPE of bin masses, averaged over columns. Continuous columns
/// use bins cut at the real sample's quantiles; discrete columns compare
/// category frequencies. Columns with a single distinct real value are
/// skipped.
pub fn marginal_mape(real: &CohortTable, synth: &CohortTable, bins: usize) -> Result<f64> {
    check_pair(real, synth)?;
    if bins < 2 {
        return invalid(format!("bins must be at least 2, got {bins}"));
    }
    let mut per_column = Vec::new();
    for j in 0..real.n_cols() {
        let spec = real.schema().column(j);
        let (r, s) = (observed(real, j), observed(synth, j));
        if r.is_empty() || s.is_empty() {
            continue;
        }
        let (rm, sm) = match spec.levels() {
            Some(k) if spec.kind != ColumnKind::Continuous => {
                let count = |v: &[f64]| {
                    let mut c = vec![0usize; k];
                    for &x in v {
                        c[(x as usize).min(k - 1)] += 1;
                    }
                    c
                };
                (shares(&count(&r), r.len()), shares(&count(&s), s.len()))
            }
            _ => {
                let sorted = stats::sorted(&r);
                let mut edges: Vec<f64> = (0..=bins)
                    .map(|b| stats::quantile_sorted(&sorted, b as f64 / bins as f64))
                    .collect();
                edges.dedup();
                if edges.len() < 2 {
                    log::warn!("column `{}` has a single distinct value; skipped in MAPE", spec.name);
                    continue;
                }
                let m = edges.len() - 1;
                let inner = &edges[1..m];
                let count = |v: &[f64]| {
                    let mut c = vec![0usize; m];
                    for &x in v {
                        c[inner.partition_point(|e| *e <= x)] += 1;
                    }
                    c
                };
                (shares(&count(&r), r.len()), shares(&count(&s), s.len()))
            }
        };
        if let Some(v) = mape(&rm, &sm) {
            per_column.push(v);
        }
    }
    if per_column.is_empty() {
        return invalid("no comparable columns for MAPE");
    }
    Ok(stats::mean(&per_column))
}

/// Encoded numeric view: transformed continuous columns, binary as 0/1 and
/// categorical columns one-hot without the first level.
fn encode(t: &CohortTable) -> Result<Vec<(String, Vec<f64>)>> {
    let mut out = Vec::new();
    for (j, spec) in t.schema().columns.iter().enumerate() {
        let v = t.column(j);
        match spec.kind {
            ColumnKind::Continuous => {
                let col = v.iter().map(|&x| spec.transform.forward(x)).collect::<Result<_>>()?;
                out.push((spec.name.clone(), col));
            }
            ColumnKind::Binary => out.push((spec.name.clone(), v.to_vec())),
            ColumnKind::Categorical => {
                for (l, label) in spec.categories.iter().enumerate().skip(1) {
                    out.push((
                        format!("{}={}", spec.name, label),
                        v.iter().map(|&x| f64::from(x as usize == l)).collect(),
                    ));
                }
            }
        }
    }
    Ok(out)
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (stats::mean(a), stats::mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

fn corr_matrix(cols: &[&Vec<f64>]) -> Vec<Vec<f64>> {
    let k = cols.len();
    (0..k)
        .map(|i| {
            (0..k)
                .map(|j| if i == j { 1.0 } else { correlation(cols[i], cols[j]) })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrobeniusResult {
    pub score: f64,
    pub diff: f64,
    pub excluded: Vec<String>,
}

/// `1 - ||C_real - C_synth||_F / ||C_real||_F`, clamped to `[0, 1]`.
/// Encoded columns constant in either table are excluded.
pub fn corr_frobenius_score(real: &CohortTable, synth: &CohortTable) -> Result<FrobeniusResult> {
    check_pair(real, synth)?;
    if real.has_missing() || synth.has_missing() {
        return invalid("correlation audit needs complete tables");
    }
    let (r, s) = (encode(real)?, encode(synth)?);
    let mut excluded = Vec::new();
    let mut keep = Vec::new();
    for (i, ((name, rv), (_, sv))) in r.iter().zip(&s).enumerate() {
        if stats::sample_sd(rv) > 0.0 && stats::sample_sd(sv) > 0.0 {
            keep.push(i);
        } else {
            excluded.push(name.clone());
        }
    }
    if !excluded.is_empty() {
        log::warn!("constant columns excluded from the correlation audit: {excluded:?}");
    }
    if keep.len() < 2 {
        return invalid("need at least two non-constant encoded columns");
    }
    let cr = corr_matrix(&keep.iter().map(|&i| &r[i].1).collect::<Vec<_>>());
    let cs = corr_matrix(&keep.iter().map(|&i| &s[i].1).collect::<Vec<_>>());
    let (mut diff, mut norm) = (0.0, 0.0);
    for i in 0..keep.len() {
        for j in 0..keep.len() {
            diff += (cr[i][j] - cs[i][j]).powi(2);
            norm += cr[i][j].powi(2);
        }
    }
    let diff = diff.sqrt();
    Ok(FrobeniusResult {
        score: (1.0 - diff / norm.sqrt()).clamp(0.0, 1.0),
        diff,
        excluded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DcrResult {
    pub median: f64,
    pub p5: f64,
}

/// Gower-style distance from each synthetic row to its nearest real row:
/// continuous differences scaled by the real column's sd, categorical
/// mismatches counted as 1, averaged over columns.
pub fn distance_to_closest_record(real: &CohortTable, synth: &CohortTable) -> Result<DcrResult> {
    check_pair(real, synth)?;
    let specs: &[ColumnSpec] = &real.schema().columns;
    let scale: Vec<f64> = (0..real.n_cols())
        .map(|j| {
            let sd = stats::sample_sd(&observed(real, j));
            if sd.is_finite() && sd > 0.0 {
                1.0 / sd
            } else {
                1.0
            }
        })
        .collect();
    let k = real.n_cols() as f64;
    let minima: Vec<f64> = (0..synth.n_rows())
        .into_par_iter()
        .map(|s| {
            let mut best = f64::INFINITY;
            for r in 0..real.n_rows() {
                let mut d = 0.0;
                for (j, spec) in specs.iter().enumerate() {
                    let (a, b) = (synth.value(s, j), real.value(r, j));
                    d += match (a.is_nan(), b.is_nan()) {
                        (true, true) => 0.0,
                        (true, false) | (false, true) => 1.0,
                        _ if spec.kind == ColumnKind::Continuous => (a - b).abs() * scale[j],
                        _ => f64::from(a != b),
                    };
                    if d >= best * k {
                        break;
                    }
                }
                best = best.min(d / k);
            }
            best
        })
        .collect();
    let sorted = stats::sorted(&minima);
    Ok(DcrResult {
        median: stats::quantile_sorted(&sorted, 0.5),
        p5: stats::quantile_sorted(&sorted, 0.05),
    })
}

fn adversary_config(seed: u64) -> ForestConfig {
    ForestConfig {
        n_trees: 50,
        max_depth: 10,
        min_leaf: 5,
        seed,
        ..ForestConfig::default()
    }
}

/// Holdout accuracy of a forest telling real (0) from synthetic (1) rows,
/// trained on a 70% split. Rows are put in canonical order before the
/// seeded split, so the result does not depend on input row order.
pub fn adversarial_accuracy(real: &CohortTable, synth: &CohortTable, seed: u64) -> Result<f64> {
    check_pair(real, synth)?;
    if real.n_rows() < 50 || synth.n_rows() < 50 {
        return invalid("adversarial accuracy needs at least 50 rows in each table");
    }
    let (er, es) = (encode_raw(real), encode_raw(synth));
    let mut rows: Vec<(Vec<f64>, f64)> = (0..real.n_rows())
        .map(|i| (er.iter().map(|c| c[i]).collect(), 0.0))
        .chain((0..synth.n_rows()).map(|i| (es.iter().map(|c| c[i]).collect(), 1.0)))
        .collect();
    rows.sort_by(|a, b| {
        a.0.iter()
            .zip(&b.0)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.total_cmp(&b.1))
    });
    // Identical feature vectors go to the same side of the split, otherwise a
    // record copied into the synthetic table leaks its twin's label.
    let mut groups: Vec<Vec<(Vec<f64>, f64)>> = Vec::new();
    for row in rows {
        match groups.last_mut() {
            Some(g) if same_features(&g[0].0, &row.0) => g.push(row),
            _ => groups.push(vec![row]),
        }
    }
    let mut r = rng::stream(rng::derive_seed_str(seed, "adversary-split"));
    groups.shuffle(&mut r);
    let total: usize = groups.iter().map(Vec::len).sum();
    let target = (total as f64 * 0.7).round() as usize;
    let mut train = Vec::with_capacity(target);
    let mut test = Vec::with_capacity(total - target);
    for g in groups {
        if train.len() < target {
            train.extend(g);
        } else {
            test.extend(g);
        }
    }
    if test.is_empty() {
        return invalid("adversary holdout is empty; the tables hold too few distinct records");
    }
    let p = train[0].0.len();
    let x: Vec<Vec<f64>> = (0..p).map(|j| train.iter().map(|r| r.0[j]).collect()).collect();
    let y: Vec<f64> = train.iter().map(|r| r.1).collect();
    let forest = fit_forest(
        &x,
        &y,
        &adversary_config(rng::derive_seed_str(seed, "adversary-forest")),
    )?;
    let correct = test
        .iter()
        .filter(|(row, label)| f64::from(forest.predict_row(row) > 0.5) == *label)
        .count();
    Ok(correct as f64 / test.len() as f64)
}

fn same_features(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x.total_cmp(y).is_eq())
}

/// Numeric features for the adversary; missing cells become a sentinel.
fn encode_raw(t: &CohortTable) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for (j, spec) in t.schema().columns.iter().enumerate() {
        let v = t.column(j);
        match spec.kind {
            ColumnKind::Categorical => {
                for l in 0..spec.categories.len() {
                    out.push(v.iter().map(|&x| f64::from(!x.is_nan() && x as usize == l)).collect());
                }
            }
            _ => out.push(v.iter().map(|&x| if x.is_nan() { -1e300 } else { x }).collect()),
        }
    }
    out
}

/// All five audit metrics.
pub fn audit(real: &CohortTable, synth: &CohortTable, bins: usize, seed: u64) -> Result<FidelityReport> {
    let frob = corr_frobenius_score(real, synth)?;
    let dcr = distance_to_closest_record(real, synth)?;
    Ok(FidelityReport {
        ks_avg: ks_average(real, synth)?,
        marginal_mape: marginal_mape(real, synth, bins)?,
        corr_frob_score: frob.score,
        corr_frob_diff: frob.diff,
        dcr: dcr.median,
        dcr_p5: dcr.p5,
        adv_acc: adversarial_accuracy(real, synth, seed)?,
        excluded_columns: frob.excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{ColumnRole, Provenance, Schema};
    use crate::simdgp::{generate, DgpConfig};

    fn one_column(v: Vec<f64>) -> CohortTable {
        let n = v.len();
        let schema = Schema::new(vec![
            ColumnSpec::binary("d", ColumnRole::Treatment),
            ColumnSpec::categorical("g", ColumnRole::Cluster, &["a", "b"]),
            ColumnSpec::continuous("x", ColumnRole::Covariate),
        ])
        .unwrap();
        CohortTable::new(schema, vec![vec![0.0; n], vec![0.0; n], v], Provenance::Empirical).unwrap()
    }

    #[test]
    fn ks_examples() {
        let real = one_column(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(ks_average(&real, &real).unwrap(), 1.0);
        // oracle: ECDFs differ by 1/4 on [4, 10)
        let synth = one_column(vec![1.0, 2.0, 3.0, 10.0]);
        assert!((ks_average(&real, &synth).unwrap() - 0.75).abs() < 1e-15);
        let far = one_column(vec![11.0, 12.0, 13.0]);
        assert_eq!(ks_average(&real, &far).unwrap(), 0.0);
    }

    #[test]
    fn mape_examples() {
        let real = one_column((0..100).map(f64::from).collect());
        assert_eq!(marginal_mape(&real, &real, 10).unwrap(), 0.0);

        // real quantile edges at 0, 9.9, ..., 99: ten bins of ten values.
        // Synthetic masses 11% and 9% alternate.
        let mut s = Vec::new();
        for b in 0..10 {
            let count = if b % 2 == 0 { 11 } else { 9 };
            for i in 0..count {
                s.push(b as f64 * 10.0 + i as f64 * 0.5);
            }
        }
        let synth = one_column(s);
        // discrete columns are constant in both: their category masses match
        assert!((marginal_mape(&real, &synth, 10).unwrap() - (0.10 + 0.0 + 0.0) / 3.0).abs() < 1e-12);
        assert!(marginal_mape(&real, &real, 1).is_err());
    }

    fn two_columns(a: Vec<f64>, b: Vec<f64>) -> CohortTable {
        let n = a.len();
        let schema = Schema::new(vec![
            ColumnSpec::binary("d", ColumnRole::Treatment),
            ColumnSpec::categorical("g", ColumnRole::Cluster, &["a", "b"]),
            ColumnSpec::continuous("x", ColumnRole::Covariate),
            ColumnSpec::continuous("y", ColumnRole::Covariate),
        ])
        .unwrap();
        CohortTable::new(schema, vec![vec![0.0; n], vec![0.0; n], a, b], Provenance::Empirical).unwrap()
    }

    #[test]
    fn frobenius_examples() {
        // x and y with correlation exactly 0.8 / 0.0 on four points
        let u = [1.0, -1.0, 1.0, -1.0];
        let v = [1.0, 1.0, -1.0, -1.0];
        let real_y: Vec<f64> = (0..4).map(|i| 0.8 * u[i] + 0.6 * v[i]).collect();
        let real = two_columns(u.to_vec(), real_y);
        let synth = two_columns(u.to_vec(), v.to_vec());
        let f = corr_frobenius_score(&real, &synth).unwrap();
        assert_eq!(f.excluded, vec!["d", "g=b"]);
        let expected = 1.0 - (0.8 * 2f64.sqrt()) / (2.0 + 1.28f64).sqrt();
        assert!((f.score - expected).abs() < 1e-12);
        assert!((f.score - 0.3752).abs() < 5e-4);
        assert_eq!(corr_frobenius_score(&real, &real).unwrap().score, 1.0);
        let indep = two_columns(u.to_vec(), v.to_vec());
        assert_eq!(corr_frobenius_score(&indep, &indep).unwrap().score, 1.0);
    }

    #[test]
    fn dcr_examples() {
        let real = two_columns(vec![0.0, 2.0], vec![0.0, 2.0]);
        assert_eq!(distance_to_closest_record(&real, &real).unwrap().median, 0.0);

        let real = two_columns(vec![0.0], vec![0.0]);
        let synth = two_columns(vec![1.0], vec![0.0]);
        // four columns: two discrete matches, one unit continuous difference
        let d = distance_to_closest_record(&real, &synth).unwrap().median;
        assert!((d - 0.25).abs() < 1e-15);
        assert_eq!(stats::median(&[0.0, 0.2, 0.9]), 0.2);
    }

    #[test]
    fn dcr_two_continuous_columns() {
        let schema = Schema::new(vec![
            ColumnSpec::continuous("x", ColumnRole::Covariate),
            ColumnSpec::continuous("y", ColumnRole::Covariate),
            ColumnSpec::binary("d", ColumnRole::Treatment),
            ColumnSpec::categorical("g", ColumnRole::Cluster, &["a", "b"]),
        ])
        .unwrap();
        let t = |x: f64| {
            CohortTable::new(
                schema.clone(),
                vec![vec![x], vec![0.0], vec![0.0], vec![0.0]],
                Provenance::Empirical,
            )
            .unwrap()
        };
        let (real, synth) = (t(0.0), t(1.0));
        // averaged over the two continuous columns only, the spec value is
        // 1.0 / 2; the discrete columns add two zero terms
        let d = distance_to_closest_record(&real, &synth).unwrap().median;
        assert!((d * 4.0 / 2.0 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn affine_and_order_invariance() {
        let sim = generate(&DgpConfig {
            n: 300,
            ..DgpConfig::default()
        })
        .unwrap();
        let real = sim.table.clone();
        let other = generate(&DgpConfig {
            n: 300,
            seed: 1,
            ..DgpConfig::default()
        })
        .unwrap()
        .table;
        let rev: Vec<usize> = (0..300).rev().collect();
        let a = audit(&real, &other, 20, 4).unwrap();
        let b = audit(&real.select_rows(&rev), &other.select_rows(&rev), 20, 4).unwrap();
        assert!((a.ks_avg - b.ks_avg).abs() < 1e-12);
        assert!((a.marginal_mape - b.marginal_mape).abs() < 1e-12);
        assert!((a.corr_frob_score - b.corr_frob_score).abs() < 1e-12);
        assert!((a.dcr - b.dcr).abs() < 1e-12);
        assert_eq!(a.adv_acc, b.adv_acc);
        assert_eq!(a.adv_acc, adversarial_accuracy(&real, &other, 4).unwrap());
        for v in [a.ks_avg, a.corr_frob_score, a.adv_acc] {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn adversary_extremes() {
        let sim = generate(&DgpConfig {
            n: 1000,
            ..DgpConfig::default()
        })
        .unwrap();
        let real = sim.table;
        let mut r = rng::stream(77);
        let mut perm: Vec<usize> = (0..real.n_rows()).collect();
        perm.shuffle(&mut r);
        let shuffled = real.select_rows(&perm);
        for seed in 0..10 {
            let acc = adversarial_accuracy(&real, &shuffled, seed).unwrap();
            assert!((0.45..=0.58).contains(&acc), "seed {seed}: {acc}");
        }
        let mut shifted = real.clone();
        for j in continuous_columns(&real) {
            let sd = stats::sample_sd(real.column(j));
            for i in 0..real.n_rows() {
                let v = real.value(i, j);
                shifted.set(i, j, v + 10.0 * sd);
            }
        }
        assert!(adversarial_accuracy(&real, &shifted, 0).unwrap() >= 0.95);
    }
}
