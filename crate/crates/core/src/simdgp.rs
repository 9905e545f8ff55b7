//! Simulated cohorts with known treatment effects.
//!
//! Covariates loosely follow the shape of an end-of-life survey cohort:
//! age around 78, an ADL limitation count 0 to 6, wealth quartiles, four
//! welfare regimes derived from country, and a cause of death. Treatment
//! selection depends on ADL and wealth, which also drive the baseline
//! outcome, so naive arm comparisons are confounded. The effect acts on the
//! out-of-pocket outcome; care hours are untouched by treatment and
//! zero-inflated.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cohort::{
    ClusterEconomics, CohortTable, ColumnRole, ColumnSpec, EconomicParams, Provenance, Schema, Transform,
    DEFAULT_HOURS_CAP,
};
use crate::error::{invalid, Result};
use crate::rng;

pub const REGIMES: [&str; 4] = ["Continental", "Nordic", "Southern", "Eastern"];
pub const CAUSES: [&str; 3] = ["Cancer", "OrganFailure", "Other"];
pub const WEALTH: [&str; 4] = ["Q1", "Q2", "Q3", "Q4"];
pub const PERIODS: [&str; 2] = ["pre", "during"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EffectSpec {
    Zero,
    Constant {
        c: f64,
    },
    /// `a + b * distress` with distress uniform on (0, 1).
    Linear {
        a: f64,
        b: f64,
    },
}

impl EffectSpec {
    pub fn tau(&self, distress: f64) -> f64 {
        match *self {
            EffectSpec::Zero => 0.0,
            EffectSpec::Constant { c } => c,
            EffectSpec::Linear { a, b } => a + b * distress,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpConfig {
    pub n: usize,
    pub clusters: usize,
    pub effect: EffectSpec,
    /// Selection strength of treatment on ADL and wealth; 0 means randomized.
    pub confounding: f64,
    /// Noise sd on the out-of-pocket outcome (PPS euros).
    pub outcome_noise: f64,
    /// MCAR rate applied to age, wealth, net worth and ADL.
    pub missing_rate: f64,
    /// Share of rows with exactly zero care hours.
    pub zero_inflation: f64,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            clusters: 12,
            effect: EffectSpec::Constant { c: -2000.0 },
            confounding: 1.0,
            outcome_noise: 1000.0,
            missing_rate: 0.0,
            zero_inflation: 0.3,
            seed: 0,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return invalid("n must be positive");
        }
        if self.clusters == 0 {
            return invalid("clusters must be at least 1");
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return invalid(format!("missing_rate {} outside [0, 1)", self.missing_rate));
        }
        if !(0.0..=1.0).contains(&self.zero_inflation) {
            return invalid(format!("zero_inflation {} outside [0, 1]", self.zero_inflation));
        }
        if !(self.outcome_noise >= 0.0) || !self.confounding.is_finite() {
            return invalid("outcome_noise must be nonnegative and confounding finite");
        }
        Ok(())
    }
}

/// A simulated cohort with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SimCohort {
    pub table: CohortTable,
    pub true_ites: Vec<f64>,
    /// Out-of-pocket potential outcomes without and with treatment.
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    pub economics: EconomicParams,
}

impl SimCohort {
    pub fn true_ate(&self) -> f64 {
        crate::stats::mean(&self.true_ites)
    }
}

pub fn cluster_labels(clusters: usize) -> Vec<String> {
    (1..=clusters).map(|c| format!("C{c:02}")).collect()
}

pub fn schema(clusters: usize) -> Schema {
    let labels = cluster_labels(clusters);
    let labels: Vec<&str> = labels.iter().map(String::as_str).collect();
    Schema::new(vec![
        ColumnSpec::categorical("country", ColumnRole::Cluster, &labels),
        ColumnSpec::categorical("regime", ColumnRole::Covariate, &REGIMES),
        ColumnSpec::categorical("period", ColumnRole::Stratum, &PERIODS),
        ColumnSpec::continuous("age", ColumnRole::Covariate).with_unit("years"),
        ColumnSpec::continuous("distress", ColumnRole::Covariate),
        ColumnSpec::categorical("wealth", ColumnRole::Covariate, &WEALTH),
        ColumnSpec::continuous("net_worth", ColumnRole::Covariate)
            .with_unit("PPS euros")
            .with_transform(Transform::Arcsinh),
        ColumnSpec::continuous("adl", ColumnRole::Covariate),
        ColumnSpec::categorical("cod", ColumnRole::Covariate, &CAUSES),
        ColumnSpec::binary("pc", ColumnRole::Treatment).with_categories(&["no", "yes"]),
        ColumnSpec::continuous("oop", ColumnRole::Outcome)
            .with_unit("PPS euros")
            .with_transform(Transform::Arcsinh),
        ColumnSpec::continuous("hours", ColumnRole::Outcome)
            .with_unit("hours/year")
            .with_transform(Transform::Log1p),
        ColumnSpec::continuous("net_burden", ColumnRole::Outcome)
            .with_unit("PPS euros")
            .with_transform(Transform::Arcsinh),
    ])
    .expect("simulated schema is valid")
}

/// Per-country wage and PPP deflator used by the simulator.
pub fn economics(clusters: usize) -> EconomicParams {
    let map: BTreeMap<String, ClusterEconomics> = cluster_labels(clusters)
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let e = ClusterEconomics {
                wage: 12.0 + 1.5 * (i % 7) as f64,
                ppp: 0.7 + 0.06 * (i % 6) as f64,
            };
            (label, e)
        })
        .collect();
    EconomicParams::new(map, DEFAULT_HOURS_CAP).expect("positive economics")
}

/// Analytic mean of the effect under the covariate law.
pub fn true_ate(cfg: &DgpConfig) -> f64 {
    match cfg.effect {
        EffectSpec::Zero => 0.0,
        EffectSpec::Constant { c } => c,
        EffectSpec::Linear { a, b } => a + b / 2.0,
    }
}

const REGIME_SHIFT: [f64; 4] = [0.0, -600.0, 800.0, 300.0];
const COD_SHIFT: [f64; 3] = [0.0, 900.0, 500.0];

pub fn generate(cfg: &DgpConfig) -> Result<SimCohort> {
    cfg.validate()?;
    let mut r = rng::stream(cfg.seed);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let econ = economics(cfg.clusters);
    let labels = cluster_labels(cfg.clusters);
    let schema = schema(cfg.clusters);
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.n); schema.len()];
    let (mut y0s, mut y1s, mut taus) = (Vec::new(), Vec::new(), Vec::new());

    for _ in 0..cfg.n {
        let country = r.random_range(0..cfg.clusters);
        let regime = country % 4;
        let period = usize::from(r.random::<f64>() < 0.3);
        let age = loop {
            let a = 78.0 + 9.6 * std.sample(&mut r);
            if (50.0..=105.0).contains(&a) {
                break a;
            }
        };
        let distress: f64 = r.random();
        let wealth = r.random_range(0..4usize);
        let net_worth = -20_000.0 + 60_000.0 * wealth as f64 + 40_000.0 * std.sample(&mut r);
        let adl = (0..6).filter(|_| r.random::<f64>() < 0.25 + 0.1 * distress).count() as f64;
        let cod = match r.random::<f64>() {
            u if u < 0.45 => 0,
            u if u < 0.75 => 1,
            _ => 2,
        };
        let score = cfg.confounding * (0.6 * (adl - 1.8) / 1.2 - 0.5 * (wealth as f64 - 1.5) / 1.1);
        let pc = f64::from(r.random::<f64>() < 1.0 / (1.0 + (-score).exp()));

        let baseline = 3000.0
            + 400.0 * adl
            + 900.0 * wealth as f64
            + 1500.0 * distress
            + REGIME_SHIFT[regime]
            + COD_SHIFT[cod]
            + 25.0 * (age - 78.0);
        let noise = cfg.outcome_noise * std.sample(&mut r);
        let tau = cfg.effect.tau(distress);
        let y0 = baseline + noise;
        let y1 = y0 + tau;
        let oop = if pc == 1.0 { y1 } else { y0 };

        let hours = if r.random::<f64>() < cfg.zero_inflation {
            0.0
        } else {
            let h = 400.0 + 250.0 * adl + 300.0 * distress + 0.2 * cfg.outcome_noise * std.sample(&mut r);
            h.clamp(1.0, econ.hours_cap)
        };
        let e = econ.get(&labels[country])?;
        let net = oop + hours * e.wage / e.ppp;

        let row = [
            country as f64,
            regime as f64,
            period as f64,
            age,
            distress,
            wealth as f64,
            net_worth,
            adl,
            cod as f64,
            pc,
            oop,
            hours,
            net,
        ];
        for (c, v) in cols.iter_mut().zip(row) {
            c.push(v);
        }
        y0s.push(y0);
        y1s.push(y1);
        taus.push(tau);
    }

    if cfg.missing_rate > 0.0 {
        for name in ["age", "wealth", "net_worth", "adl"] {
            let j = schema.require(name)?;
            for v in cols[j].iter_mut() {
                if r.random::<f64>() < cfg.missing_rate {
                    *v = f64::NAN;
                }
            }
        }
    }

    Ok(SimCohort {
        table: CohortTable::new(schema, cols, Provenance::Simulated)?,
        true_ites: taus,
        y0: y0s,
        y1: y1s,
        economics: econ,
    })
}
