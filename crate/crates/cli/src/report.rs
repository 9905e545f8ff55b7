//! Descriptive tables and figures assembled from the artifacts already in
//! the output directory. Every SVG has a CSV sidecar holding exactly the
//! numbers drawn.

use std::fmt::Write as _;

use twinshield::causal;
use twinshield::cohort::{self, CohortTable, ColumnKind, ColumnRole, EconomicParams, Manifest};
use twinshield::infer::CoefTable;
use twinshield::sense::SensitivityReport;
use twinshield::stats;
use twinshield::WageSweep;

use crate::artifacts::{num, ArtifactSet};
use crate::config::PipelineConfig;
use crate::error::{CliError, StageContext};
use crate::pipeline::{
    AteReport, Effects, OutcomeTable, QuantileTable, StratumTable, ATE, CATE, CATE_STRATA, COHORT, COHORT_MANIFEST,
    ECONOMICS, EFFECTS, IMPUTED, QTE, SENSITIVITY, WAGE_SWEEP,
};
use crate::svg::{self, Figure, PALETTE};

const S: &str = "report";
const INTERCEPT: &str = "(Intercept)";
const KDE_POINTS: usize = 256;

pub fn write_report(art: &mut ArtifactSet, cfg: &PipelineConfig) -> Result<(), CliError> {
    let known = [COHORT, EFFECTS, ATE, CATE, CATE_STRATA, QTE, SENSITIVITY, WAGE_SWEEP];
    if !known.iter().any(|a| art.exists(a)) {
        log::warn!("report: no artifacts in {}, nothing to write", art.dir().display());
        return Ok(());
    }
    let st = &cfg.stages;
    let mut required = vec![COHORT, COHORT_MANIFEST];
    if st.estimate {
        required.extend([EFFECTS, ATE, ECONOMICS]);
    }
    if st.cate {
        required.push(CATE);
        if cfg.cate.stratum.is_some() {
            required.push(CATE_STRATA);
        }
    }
    if st.qte {
        required.push(QTE);
    }
    if st.sense {
        required.extend([SENSITIVITY, WAGE_SWEEP]);
    }
    if let Some(missing) = required.iter().find(|a| !art.exists(a)) {
        return Err(CliError::MissingArtifact {
            stage: S,
            artifact: missing.to_string(),
        });
    }

    let manifest: Manifest = art.read_json(S, COHORT_MANIFEST)?;
    let source = if art.exists(IMPUTED) { IMPUTED } else { COHORT };
    let table = cohort::load_cohort(art.path(source), &manifest).stage(S)?;
    let (csv, txt) = table_descriptives(&table);
    art.write_csv(S, "table_descriptives.csv", &DESCRIPTIVES_HEADER, &csv)?;
    art.write_text(S, "table_descriptives.txt", &txt)?;

    if st.estimate {
        let fx: Effects = art.read_json(S, EFFECTS)?;
        let ate: AteReport = art.read_json(S, ATE)?;
        let econ: EconomicParams = art.read_json(S, ECONOMICS)?;
        let (csv, txt) = table_potential_outcomes(&fx, &ate);
        art.write_csv(S, "table_potential_outcomes.csv", &POTENTIAL_OUTCOMES_HEADER, &csv)?;
        art.write_text(S, "table_potential_outcomes.txt", &txt)?;
        let y0 = net_outcome(&fx.oop.y0_hat, &fx.hours.y0_hat, &fx.clusters, &econ)?;
        let y1 = net_outcome(&fx.oop.y1_hat, &fx.hours.y1_hat, &fx.clusters, &econ)?;
        let y0 = causal::winsorize(&y0, ate.winsor_low, ate.winsor_high).stage(S)?;
        let y1 = causal::winsorize(&y1, ate.winsor_low, ate.winsor_high).stage(S)?;
        let (fig, rows) = kde_figure(&y0, &y1);
        emit(
            art,
            "fig_kde",
            &fig,
            &["x", "density_control", "density_treated"],
            &rows,
        )?;
    }
    if st.cate {
        let tables: Vec<OutcomeTable> = art.read_json(S, CATE)?;
        let alpha = cfg.estimate.alpha;
        if let Some(t) = tables.iter().find(|t| t.outcome == "net_burden").or(tables.first()) {
            let (fig, rows) = forest_figure(
                &format!("Effect heterogeneity: {}", t.outcome),
                &[("", &t.table)],
                alpha,
            );
            emit(
                art,
                "fig_cate",
                &fig,
                &["group", "term", "position", "estimate", "ci_low", "ci_high"],
                &rows,
            )?;
        }
        if cfg.cate.stratum.is_some() {
            let strata: Vec<StratumTable> = art.read_json(S, CATE_STRATA)?;
            let groups: Vec<(&str, &CoefTable)> = strata.iter().map(|s| (s.level.as_str(), &s.table)).collect();
            let (fig, rows) = forest_figure("Effect heterogeneity by stratum: net_burden", &groups, alpha);
            emit(
                art,
                "fig_strata",
                &fig,
                &["group", "term", "position", "estimate", "ci_low", "ci_high"],
                &rows,
            )?;
        }
    }
    if st.qte {
        let tables: Vec<QuantileTable> = art.read_json(S, QTE)?;
        let (fig, rows) = qte_figure(&tables);
        emit(art, "fig_qte", &fig, &["term", "tau", "estimate"], &rows)?;
    }
    if st.sense {
        let rep: SensitivityReport = art.read_json(S, SENSITIVITY)?;
        let (fig, rows) = contour_figure(&rep);
        emit(
            art,
            "fig_contour",
            &fig,
            &["kind", "level", "x0", "y0", "x1", "y1", "value"],
            &rows,
        )?;
        let sweep: WageSweep = art.read_json(S, WAGE_SWEEP)?;
        let (fig, rows) = wage_figure(&sweep);
        emit(
            art,
            "fig_wage_sweep",
            &fig,
            &["multiplier", "nate", "ci_low", "ci_high"],
            &rows,
        )?;
    }
    Ok(())
}

fn emit(
    art: &mut ArtifactSet,
    stem: &str,
    fig: &Figure,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<(), CliError> {
    art.write_text(S, &format!("{stem}.svg"), &fig.render())?;
    art.write_csv(S, &format!("{stem}.csv"), header, rows)
}

fn net_outcome(oop: &[f64], hours: &[f64], clusters: &[String], econ: &EconomicParams) -> Result<Vec<f64>, CliError> {
    // same conversion as the effect composition, applied to levels
    causal::compose_net_burden(oop, hours, clusters, econ, 1.0).stage(S)
}

pub const DESCRIPTIVES_HEADER: [&str; 9] = [
    "variable",
    "level",
    "statistic",
    "treated",
    "treated_spread",
    "control",
    "control_spread",
    "overall",
    "overall_spread",
];

/// Baseline characteristics by arm: mean and sd for continuous columns,
/// count and percent of observed rows for each level otherwise.
pub fn table_descriptives(t: &CohortTable) -> (Vec<Vec<String>>, String) {
    let schema = t.schema();
    let d = schema.treatment_index();
    let treat = t.column(d);
    let arms: [Vec<usize>; 3] = [
        (0..t.n_rows())
            .filter(|&i| !t.is_missing(i, d) && treat[i] == 1.0)
            .collect(),
        (0..t.n_rows())
            .filter(|&i| !t.is_missing(i, d) && treat[i] == 0.0)
            .collect(),
        (0..t.n_rows()).collect(),
    ];
    let mut csv = Vec::new();
    let mut txt = String::new();
    let _ = writeln!(
        txt,
        "{:<28} {:>22} {:>22} {:>22}",
        "",
        format!("Treated (N={})", arms[0].len()),
        format!("Control (N={})", arms[1].len()),
        format!("Overall (N={})", arms[2].len())
    );
    for j in 0..t.n_cols() {
        let spec = schema.column(j);
        if spec.role == ColumnRole::Treatment {
            continue;
        }
        match spec.kind {
            ColumnKind::Continuous => {
                let stat: Vec<(f64, f64)> = arms
                    .iter()
                    .map(|rows| {
                        let v: Vec<f64> = rows
                            .iter()
                            .filter(|&&i| !t.is_missing(i, j))
                            .map(|&i| t.value(i, j))
                            .collect();
                        (
                            stats::mean(&v),
                            if v.len() > 1 { stats::sample_sd(&v) } else { f64::NAN },
                        )
                    })
                    .collect();
                let mut row = vec![spec.name.clone(), String::new(), "mean (sd)".into()];
                for (m, s) in &stat {
                    row.extend([num(*m), num(*s)]);
                }
                csv.push(row);
                let cells: Vec<String> = stat.iter().map(|(m, s)| format!("{m:.2} ({s:.2})")).collect();
                let _ = writeln!(
                    txt,
                    "{:<28} {:>22} {:>22} {:>22}",
                    spec.name, cells[0], cells[1], cells[2]
                );
            }
            _ => {
                let _ = writeln!(txt, "{}", spec.name);
                let levels = spec.levels().unwrap_or(2);
                for l in 0..levels {
                    let label = if spec.categories.len() == levels {
                        spec.categories[l].clone()
                    } else {
                        l.to_string()
                    };
                    let stat: Vec<(f64, f64)> = arms
                        .iter()
                        .map(|rows| {
                            let observed = rows.iter().filter(|&&i| !t.is_missing(i, j)).count();
                            let n = rows
                                .iter()
                                .filter(|&&i| !t.is_missing(i, j) && t.value(i, j) as usize == l)
                                .count();
                            (n as f64, 100.0 * n as f64 / observed.max(1) as f64)
                        })
                        .collect();
                    let mut row = vec![spec.name.clone(), label.clone(), "n (%)".into()];
                    for (n, p) in &stat {
                        row.extend([num(*n), num(*p)]);
                    }
                    csv.push(row);
                    let cells: Vec<String> = stat.iter().map(|(n, p)| format!("{n:.0} ({p:.1}%)")).collect();
                    let _ = writeln!(
                        txt,
                        "  {:<26} {:>22} {:>22} {:>22}",
                        label, cells[0], cells[1], cells[2]
                    );
                }
            }
        }
        let missing: Vec<usize> = arms
            .iter()
            .map(|rows| rows.iter().filter(|&&i| t.is_missing(i, j)).count())
            .collect();
        if missing[2] > 0 {
            let mut row = vec![spec.name.clone(), "missing".into(), "n".into()];
            for m in &missing {
                row.extend([m.to_string(), String::new()]);
            }
            csv.push(row);
            let _ = writeln!(
                txt,
                "  {:<26} {:>22} {:>22} {:>22}",
                "missing", missing[0], missing[1], missing[2]
            );
        }
    }
    (csv, txt)
}

pub const POTENTIAL_OUTCOMES_HEADER: [&str; 7] = ["outcome", "group", "n", "mean_y0", "mean_y1", "mean_ite", "sd_ite"];

/// Predicted potential outcomes by observed arm, with the winsorized
/// effects and the headline intervals.
pub fn table_potential_outcomes(fx: &Effects, ate: &AteReport) -> (Vec<Vec<String>>, String) {
    let groups: [(&str, Vec<usize>); 3] = [
        ("treated", (0..fx.len()).filter(|&i| fx.treatment[i] == 1.0).collect()),
        ("control", (0..fx.len()).filter(|&i| fx.treatment[i] == 0.0).collect()),
        ("overall", (0..fx.len()).collect()),
    ];
    let mut csv = Vec::new();
    let mut txt = String::new();
    let _ = writeln!(
        txt,
        "{:<8} {:<8} {:>6} {:>12} {:>12} {:>12} {:>12}",
        "outcome", "group", "n", "mean y0", "mean y1", "mean ITE", "sd ITE"
    );
    for ite in [&fx.oop, &fx.hours] {
        for (g, rows) in &groups {
            let pick = |v: &[f64]| -> Vec<f64> { rows.iter().map(|&i| v[i]).collect() };
            let (y0, y1, d) = (pick(&ite.y0_hat), pick(&ite.y1_hat), pick(&ite.deltas));
            let vals = [
                stats::mean(&y0),
                stats::mean(&y1),
                stats::mean(&d),
                stats::sample_sd(&d),
            ];
            let mut row = vec![ite.outcome_name.clone(), g.to_string(), rows.len().to_string()];
            row.extend(vals.iter().map(|v| num(*v)));
            csv.push(row);
            let _ = writeln!(
                txt,
                "{:<8} {:<8} {:>6} {:>12.2} {:>12.2} {:>12.2} {:>12.2}",
                ite.outcome_name,
                g,
                rows.len(),
                vals[0],
                vals[1],
                vals[2],
                vals[3]
            );
        }
    }
    let _ = writeln!(txt);
    for (name, r) in [
        ("oop", &ate.oop),
        ("hours", &ate.hours),
        ("net_burden", &ate.net_burden),
    ] {
        let _ = writeln!(
            txt,
            "ATE {:<11} {:>12.2}  {:.0}% BCa [{:.2}, {:.2}]",
            name,
            r.point,
            100.0 * (1.0 - r.alpha),
            r.ci_low,
            r.ci_high
        );
    }
    (csv, txt)
}

/// Silverman's rule of thumb, `0.9 min(sd, IQR/1.34) n^(-1/5)`.
pub fn silverman_bandwidth(v: &[f64]) -> f64 {
    let s = stats::sorted(v);
    let iqr = stats::quantile_sorted(&s, 0.75) - stats::quantile_sorted(&s, 0.25);
    let sd = stats::sample_sd(v);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * (v.len() as f64).powf(-0.2);
    if h > 0.0 {
        h
    } else {
        1.0
    }
}

pub fn gaussian_kde(v: &[f64], h: f64, x: f64) -> f64 {
    let c = 1.0 / (v.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    c * v.iter().map(|xi| (-0.5 * ((x - xi) / h).powi(2)).exp()).sum::<f64>()
}

fn kde_figure(y0: &[f64], y1: &[f64]) -> (Figure, Vec<Vec<String>>) {
    let (h0, h1) = (silverman_bandwidth(y0), silverman_bandwidth(y1));
    let lo = y0.iter().chain(y1).cloned().fold(f64::INFINITY, f64::min) - 3.0 * h0.max(h1);
    let hi = y0.iter().chain(y1).cloned().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h0.max(h1);
    let xs: Vec<f64> = (0..KDE_POINTS)
        .map(|k| lo + (hi - lo) * k as f64 / (KDE_POINTS - 1) as f64)
        .collect();
    let d0: Vec<f64> = xs.iter().map(|&x| gaussian_kde(y0, h0, x)).collect();
    let d1: Vec<f64> = xs.iter().map(|&x| gaussian_kde(y1, h1, x)).collect();
    let mut f = Figure::new(
        "Predicted net burden: potential outcomes",
        "net burden (PPS)",
        "density",
    );
    f.line(
        xs.iter().cloned().zip(d0.iter().cloned()).collect(),
        PALETTE[0],
        Some("without treatment"),
    )
    .line(
        xs.iter().cloned().zip(d1.iter().cloned()).collect(),
        PALETTE[1],
        Some("with treatment"),
    );
    let rows = (0..KDE_POINTS)
        .map(|k| vec![num(xs[k]), num(d0[k]), num(d1[k])])
        .collect();
    (f, rows)
}

/// Point estimates with intervals, one row per term in table order and the
/// groups stacked top to bottom.
fn forest_figure(title: &str, groups: &[(&str, &CoefTable)], alpha: f64) -> (Figure, Vec<Vec<String>>) {
    let mut f = Figure::new(title, "effect", "");
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    let total: usize = groups
        .iter()
        .map(|(_, t)| t.names.iter().filter(|n| *n != INTERCEPT).count())
        .sum();
    let mut pos = total as f64;
    for (g, (group, t)) in groups.iter().enumerate() {
        let color = PALETTE[g % PALETTE.len()];
        let mut pts = Vec::new();
        for j in (0..t.names.len()).filter(|&j| t.names[j] != INTERCEPT) {
            let crit = stats::t_critical(alpha, t.df[j]);
            let (lo, hi) = (t.estimate[j] - crit * t.se[j], t.estimate[j] + crit * t.se[j]);
            f.interval(pos, lo, hi, color);
            pts.push((t.estimate[j], pos));
            let label = if group.is_empty() {
                t.names[j].clone()
            } else {
                format!("{group} | {}", t.names[j])
            };
            labels.push((pos, label));
            rows.push(vec![
                group.to_string(),
                t.names[j].clone(),
                num(pos),
                num(t.estimate[j]),
                num(lo),
                num(hi),
            ]);
            pos -= 1.0;
        }
        f.points(pts, color);
    }
    f.vrule(0.0).y_categories(labels);
    (f, rows)
}

fn qte_figure(tables: &[QuantileTable]) -> (Figure, Vec<Vec<String>>) {
    let mut f = Figure::new("Quantile regression of net-burden effects", "quantile", "coefficient");
    let mut rows = Vec::new();
    if let Some(first) = tables.first() {
        for (k, name) in first.table.names.iter().enumerate().filter(|(_, n)| *n != INTERCEPT) {
            let pts: Vec<(f64, f64)> = tables
                .iter()
                .filter_map(|t| t.table.index_of(name).map(|j| (t.tau, t.table.estimate[j])))
                .collect();
            rows.extend(pts.iter().map(|(tau, e)| vec![name.clone(), num(*tau), num(*e)]));
            let color = PALETTE[k % PALETTE.len()];
            f.line(pts.clone(), color, Some(name)).points(pts, color);
        }
    }
    f.hrule(0.0);
    (f, rows)
}

fn contour_figure(rep: &SensitivityReport) -> (Figure, Vec<Vec<String>>) {
    let c = &rep.contour;
    let mut f = Figure::new(
        &format!("Sensitivity of `{}` to an omitted confounder", rep.coefficient),
        "partial R2 of confounder with regressor",
        "partial R2 of confounder with outcome",
    );
    let mut rows = Vec::new();
    let scale =
        c.t.iter()
            .flatten()
            .filter(|v| v.is_finite())
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-12);
    let half = |axis: &[f64]| if axis.len() > 1 { (axis[1] - axis[0]) / 2.0 } else { 0.5 };
    let (hx, hy) = (half(&c.r2_dz), half(&c.r2_yz));
    for (i, dz) in c.r2_dz.iter().enumerate() {
        for (j, yz) in c.r2_yz.iter().enumerate() {
            let t = c.t[i][j];
            let (x0, y0, x1, y1) = (dz - hx, yz - hy, dz + hx, yz + hy);
            f.cell(x0, y0, x1, y1, svg::diverging(t / scale));
            rows.push(vec![
                "cell".into(),
                String::new(),
                num(x0),
                num(y0),
                num(x1),
                num(y1),
                num(t),
            ]);
        }
    }
    let crit = stats::t_critical(rep.alpha, rep.df - 1.0) * rep.t.signum();
    for (level, color) in [(0.0, "black"), (crit, "#555555")] {
        for (a, b) in svg::contour_segments(&c.r2_dz, &c.r2_yz, &c.t, level) {
            f.segment(a, b, color);
            rows.push(vec![
                "segment".into(),
                num(level),
                num(a.0),
                num(a.1),
                num(b.0),
                num(b.1),
                String::new(),
            ]);
        }
    }
    let pts: Vec<(f64, f64)> = rep.bounds.iter().map(|b| (b.r2_dz, b.r2_yz)).collect();
    for b in &rep.bounds {
        rows.push(vec![
            "bound".into(),
            num(b.multiplier),
            num(b.r2_dz),
            num(b.r2_yz),
            String::new(),
            String::new(),
            num(b.t),
        ]);
    }
    f.points(pts, "black");
    (f, rows)
}

fn wage_figure(s: &WageSweep) -> (Figure, Vec<Vec<String>>) {
    let m = &s.multipliers;
    let mut f = Figure::new(
        "Net burden under alternative wage valuations",
        "wage multiplier",
        "NATE (PPS)",
    );
    let pts = |sel: fn(&causal::AteResult) -> f64| -> Vec<(f64, f64)> {
        m.iter().cloned().zip(s.nate.iter().map(sel)).collect()
    };
    f.line(pts(|r| r.point), PALETTE[0], Some("NATE"))
        .points(pts(|r| r.point), PALETTE[0])
        .dashed(pts(|r| r.ci_low), PALETTE[0], Some("BCa interval"))
        .dashed(pts(|r| r.ci_high), PALETTE[0], None)
        .hrule(0.0);
    let rows = m
        .iter()
        .zip(&s.nate)
        .map(|(x, r)| vec![num(*x), num(r.point), num(r.ci_low), num(r.ci_high)])
        .collect();
    (f, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silverman_matches_hand_computation() {
        // sd = sqrt(2.5), IQR = 2 -> min is 2/1.34
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        let expected = 0.9 * (2.0f64 / 1.34).min(2.5f64.sqrt()) * 5f64.powf(-0.2);
        assert!((silverman_bandwidth(&v) - expected).abs() < 1e-12);
    }

    #[test]
    fn kde_integrates_to_one() {
        let v = [0.0, 1.0, 3.0];
        let h = 0.7;
        let dx = 0.01;
        let total: f64 = (-1000..1400).map(|k| gaussian_kde(&v, h, k as f64 * dx) * dx).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
}
