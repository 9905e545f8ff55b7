//! Stage runner. Each stage reads its inputs from memory when an earlier
//! stage of the same process produced them, and from the output directory
//! otherwise, so `run` and a sequence of single-stage invocations write the
//! same bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use twinshield::causal::{self, AteResult, IteVector};
use twinshield::cohort::{self, CohortTable, EconomicParams, Manifest, Provenance};
use twinshield::impute::{self, FmiDiagnostic};
use twinshield::infer::{self, build_design, CoefTable, Estimator};
use twinshield::rng;
use twinshield::sense;
use twinshield::simdgp;
use twinshield::stats;
use twinshield::synth;
use twinshield::FidelityReport;

use crate::artifacts::{num, sha256_hex, ArtifactSet};
use crate::config::PipelineConfig;
use crate::error::{CliError, StageContext};
use crate::report;

pub const MISSING_CODE: &str = "NA";

pub const COHORT: &str = "cohort.csv";
pub const COHORT_MANIFEST: &str = "cohort_manifest.json";
pub const ECONOMICS: &str = "economics.json";
pub const TRUTH: &str = "truth.json";
pub const IMPUTED: &str = "imputed.csv";
pub const FMI: &str = "fmi.json";
pub const MODEL: &str = "model.tsdm";
pub const TWINS: &str = "twins.csv";
pub const LOSS: &str = "loss_trace.csv";
pub const FIDELITY: &str = "fidelity.json";
pub const ATE: &str = "ate.json";
pub const EFFECTS: &str = "effects.json";
pub const ITE: &str = "ite.csv";
pub const CATE: &str = "cate.json";
pub const CATE_STRATA: &str = "cate_strata.json";
pub const QTE: &str = "qte.json";
pub const SENSITIVITY: &str = "sensitivity.json";
pub const WAGE_SWEEP: &str = "wage_sweep.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Load,
    Impute,
    Synth,
    Audit,
    Estimate,
    Cate,
    Qte,
    Sense,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Load,
        Stage::Impute,
        Stage::Synth,
        Stage::Audit,
        Stage::Estimate,
        Stage::Cate,
        Stage::Qte,
        Stage::Sense,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Load => "load",
            Stage::Impute => "impute",
            Stage::Synth => "synth",
            Stage::Audit => "audit",
            Stage::Estimate => "estimate",
            Stage::Cate => "cate",
            Stage::Qte => "qte",
            Stage::Sense => "sense",
            Stage::Report => "report",
        }
    }

    pub fn enabled(self, cfg: &PipelineConfig) -> bool {
        let s = &cfg.stages;
        match self {
            Stage::Load => true,
            Stage::Impute => s.impute,
            Stage::Synth => s.synth,
            Stage::Audit => s.audit && s.synth,
            Stage::Estimate => s.estimate,
            Stage::Cate => s.cate,
            Stage::Qte => s.qte,
            Stage::Sense => s.sense,
            Stage::Report => s.report,
        }
    }
}

/// Ground truth of a simulated cohort, aligned with `cohort.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    /// Mean effect under the covariate law.
    pub population_ate: f64,
    /// Mean of the row-level effects actually drawn.
    pub sample_ate: f64,
    pub ites: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FmiReport {
    pub m: usize,
    pub iterations: usize,
    pub donor_k: usize,
    pub columns: Vec<ColumnFmi>,
    pub average_fmi: f64,
    /// Mean of imputed cells per imputation, sweep and column.
    pub chain_means: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnFmi {
    pub column: String,
    #[serde(flatten)]
    pub diagnostic: FmiDiagnostic,
}

/// Winsorized individual effects on the analysis sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Effects {
    pub oop: IteVector,
    pub hours: IteVector,
    /// Net burden at the reference wage.
    pub net_burden: Vec<f64>,
    pub clusters: Vec<String>,
    pub treatment: Vec<f64>,
}

impl Effects {
    pub fn get(&self, outcome: &str) -> Option<&[f64]> {
        match outcome {
            "oop" => Some(&self.oop.deltas),
            "hours" => Some(&self.hours.deltas),
            "net_burden" => Some(&self.net_burden),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.net_burden.len()
    }

    pub fn is_empty(&self) -> bool {
        self.net_burden.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteReport {
    pub n_rows: usize,
    pub n_train: usize,
    /// `twins`, `twins+empirical` or `empirical`.
    pub train_source: String,
    pub winsor_low: f64,
    pub winsor_high: f64,
    pub oop: AteResult,
    pub hours: AteResult,
    pub net_burden: AteResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeTable {
    pub outcome: String,
    pub table: CoefTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumTable {
    pub stratum: String,
    pub level: String,
    pub table: CoefTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileTable {
    pub tau: f64,
    pub table: CoefTable,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    art: ArtifactSet,
    cohort: Option<CohortTable>,
    manifest: Option<Manifest>,
    econ: Option<EconomicParams>,
    analysis: Option<CohortTable>,
    twins: Option<CohortTable>,
    effects: Option<Effects>,
}

/// SHA-256 of the configuration with the output directory removed, so the
/// same analysis written elsewhere carries the same hash.
pub fn config_hash(cfg: &PipelineConfig) -> String {
    let mut c = cfg.clone();
    c.out_dir = None;
    sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
}

fn table_csv(t: &CohortTable, stage: &'static str) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    t.write_csv(&mut buf, MISSING_CODE).stage(stage)?;
    Ok(buf)
}

/// Standard coefficient-table rows with a `1 - alpha` confidence interval.
pub fn coef_rows(prefix: &[String], t: &CoefTable, alpha: f64) -> Vec<Vec<String>> {
    (0..t.names.len())
        .map(|j| {
            let crit = stats::t_critical(alpha, t.df[j]);
            let mut r = prefix.to_vec();
            r.extend([
                t.names[j].clone(),
                num(t.estimate[j]),
                num(t.se[j]),
                num(t.t[j]),
                num(t.df[j]),
                num(t.p[j]),
                stats::stars(t.p[j]).to_string(),
                num(t.estimate[j] - crit * t.se[j]),
                num(t.estimate[j] + crit * t.se[j]),
            ]);
            r
        })
        .collect()
}

pub const COEF_HEADER: [&str; 9] = ["term", "estimate", "se", "t", "df", "p", "stars", "ci_low", "ci_high"];

fn with_prefix<'a>(prefix: &[&'a str]) -> Vec<&'a str> {
    prefix.iter().copied().chain(COEF_HEADER).collect()
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self, CliError> {
        cfg.validate()?;
        let art = ArtifactSet::open(cfg.out_dir(), config_hash(&cfg), cfg.seed())?;
        Ok(Self {
            cfg,
            art,
            cohort: None,
            manifest: None,
            econ: None,
            analysis: None,
            twins: None,
            effects: None,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn artifacts(&self) -> &ArtifactSet {
        &self.art
    }

    fn seed_for(&mut self, stage: &str) -> u64 {
        let s = rng::derive_seed_str(self.cfg.seed(), stage);
        self.art.record_seed(stage, s);
        s
    }

    /// Every enabled stage in order.
    pub fn run_all(&mut self) -> Result<(), CliError> {
        for stage in Stage::ALL {
            if stage.enabled(&self.cfg) {
                self.run_stage(stage)?;
            } else {
                log::info!("stage {} disabled", stage.name());
            }
        }
        Ok(())
    }

    pub fn run_stage(&mut self, stage: Stage) -> Result<(), CliError> {
        log::info!("stage {}", stage.name());
        match stage {
            Stage::Load => self.load()?,
            Stage::Impute => self.impute()?,
            Stage::Synth => self.synth()?,
            Stage::Audit => self.audit()?,
            Stage::Estimate => self.estimate()?,
            Stage::Cate => self.cate()?,
            Stage::Qte => self.qte()?,
            Stage::Sense => self.sense()?,
            Stage::Report => report::write_report(&mut self.art, &self.cfg)?,
        }
        self.art.flush()
    }

    fn load(&mut self) -> Result<(), CliError> {
        const S: &str = "load";
        let (table, manifest, econ) = match self.cfg.input.clone() {
            Some(input) => {
                let manifest = Manifest::from_path(&input.manifest).stage(S)?;
                let econ = EconomicParams::from_path(&input.economics).stage(S)?;
                let table = cohort::load_cohort(&input.cohort, &manifest).stage(S)?;
                self.art.record_input("cohort", &input.cohort)?;
                self.art.record_input("manifest", &input.manifest)?;
                self.art.record_input("economics", &input.economics)?;
                (table, manifest, econ)
            }
            None => {
                let mut dgp = self.cfg.simulate.clone().unwrap_or_default();
                dgp.seed = self.seed_for("simulate");
                let sim = simdgp::generate(&dgp).stage(S)?;
                let truth = Truth {
                    population_ate: simdgp::true_ate(&dgp),
                    sample_ate: sim.true_ate(),
                    ites: sim.true_ites.clone(),
                };
                self.art.write_json(S, TRUTH, &truth)?;
                let manifest = Manifest::new(sim.table.schema(), &[MISSING_CODE]);
                (sim.table, manifest, sim.economics)
            }
        };
        let rules = self.cfg.sample_rules.clone().or_else(|| manifest.sample.clone());
        let table = match rules {
            Some(r) => {
                let kept = cohort::select_analysis_sample(&table, &r).stage(S)?;
                log::info!("analysis sample keeps {} of {} rows", kept.n_rows(), table.n_rows());
                kept
            }
            None => table,
        };
        let written = Manifest {
            missing_codes: vec![MISSING_CODE.to_string()],
            sample: None,
            ..manifest
        };
        self.art.write_bytes(S, COHORT, &table_csv(&table, S)?)?;
        self.art.write_json(S, COHORT_MANIFEST, &written)?;
        self.art.write_json(S, ECONOMICS, &econ)?;
        self.cohort = Some(table);
        self.manifest = Some(written);
        self.econ = Some(econ);
        Ok(())
    }

    fn ensure_loaded(&mut self, stage: &'static str) -> Result<(), CliError> {
        if self.cohort.is_some() {
            return Ok(());
        }
        if !(self.art.exists(COHORT) && self.art.exists(COHORT_MANIFEST) && self.art.exists(ECONOMICS)) {
            log::info!("{stage}: no cohort in the output directory, loading inputs first");
            return self.load();
        }
        let manifest: Manifest = self.art.read_json(stage, COHORT_MANIFEST)?;
        let econ: EconomicParams = self.art.read_json(stage, ECONOMICS)?;
        let table = cohort::load_cohort(self.art.path(COHORT), &manifest).stage(stage)?;
        self.cohort = Some(table);
        self.manifest = Some(manifest);
        self.econ = Some(econ);
        Ok(())
    }

    fn read_table(&self, stage: &'static str, name: &str, provenance: Provenance) -> Result<CohortTable, CliError> {
        if !self.art.exists(name) {
            return Err(CliError::MissingArtifact {
                stage,
                artifact: name.to_string(),
            });
        }
        let manifest = self.manifest.as_ref().expect("loaded before reading tables");
        let mut t = cohort::load_cohort(self.art.path(name), manifest).stage(stage)?;
        t.set_provenance(provenance);
        Ok(t)
    }

    fn impute(&mut self) -> Result<(), CliError> {
        const S: &str = "impute";
        self.ensure_loaded(S)?;
        let seed = self.seed_for(S);
        let table = self.cohort.clone().expect("loaded");
        let (completed, report) = if table.has_missing() {
            let mut settings = self.cfg.impute.clone();
            settings.seed = seed;
            let set = impute::impute_pmm(&table, &settings).stage(S)?;
            let (cols, avg) = impute::column_mean_fmi(&set).stage(S)?;
            let report = FmiReport {
                m: set.m,
                iterations: set.iterations,
                donor_k: set.donor_k,
                columns: cols
                    .into_iter()
                    .map(|(column, diagnostic)| ColumnFmi { column, diagnostic })
                    .collect(),
                average_fmi: avg,
                chain_means: set.chain_means.clone(),
            };
            let first = set.completed.into_iter().next().expect("m >= 2");
            (self.recompose_net_burden(&table, first)?, report)
        } else {
            let s = &self.cfg.impute;
            let report = FmiReport {
                m: s.m,
                iterations: s.iterations,
                donor_k: s.donor_k,
                columns: Vec::new(),
                average_fmi: 0.0,
                chain_means: Vec::new(),
            };
            (table, report)
        };
        self.art.write_bytes(S, IMPUTED, &table_csv(&completed, S)?)?;
        self.art.write_json(S, FMI, &report)?;
        self.analysis = Some(completed);
        Ok(())
    }

    /// Net burden is a deterministic function of the other two outcomes, so
    /// rows where any of the three was missing get it recomputed from the
    /// completed values instead of an independent draw.
    fn recompose_net_burden(&self, original: &CohortTable, completed: CohortTable) -> Result<CohortTable, CliError> {
        const S: &str = "impute";
        let e = &self.cfg.estimate;
        let Some(net_name) = e.net_burden.as_deref() else {
            return Ok(completed);
        };
        let schema = original.schema();
        let (Some(o), Some(h), Some(nb)) = (
            schema.index_of(&e.oop),
            schema.index_of(&e.hours),
            schema.index_of(net_name),
        ) else {
            return Ok(completed);
        };
        let econ = self.econ.as_ref().expect("loaded");
        let labels = completed.cluster_labels();
        let mut cols = completed.columns().to_vec();
        for i in 0..original.n_rows() {
            if original.is_missing(i, o) || original.is_missing(i, h) || original.is_missing(i, nb) {
                let c = econ.get(&labels[i]).stage(S)?;
                cols[nb][i] = cols[o][i] + cols[h][i] * c.wage / c.ppp;
            }
        }
        CohortTable::new(schema.clone(), cols, Provenance::Imputed).stage(S)
    }

    fn ensure_analysis(&mut self, stage: &'static str) -> Result<(), CliError> {
        self.ensure_loaded(stage)?;
        if self.analysis.is_some() {
            return Ok(());
        }
        let table = if self.art.exists(IMPUTED) {
            self.read_table(stage, IMPUTED, Provenance::Imputed)?
        } else {
            let c = self.cohort.as_ref().expect("loaded");
            if c.has_missing() {
                return Err(CliError::MissingArtifact {
                    stage,
                    artifact: IMPUTED.into(),
                });
            }
            c.clone()
        };
        self.analysis = Some(table);
        Ok(())
    }

    fn synth(&mut self) -> Result<(), CliError> {
        const S: &str = "synth";
        self.ensure_analysis(S)?;
        let seed = self.seed_for(S);
        let train = self.analysis.as_ref().expect("analysis");
        let sc = &self.cfg.synth;
        let model = synth::fit_diffusion(train, &sc.diffusion, seed).stage(S)?;
        let n = sc.n_twins.unwrap_or(train.n_rows());
        let twins = if sc.balance_arms {
            synth::sample_balanced(&model, n.div_ceil(2), seed)
        } else {
            synth::sample_twins(&model, n, seed)
        }
        .stage(S)?;
        let mut bytes = Vec::new();
        synth::write_model(&model, &mut bytes).stage(S)?;
        self.art.write_bytes(S, MODEL, &bytes)?;
        self.art.write_bytes(S, TWINS, &table_csv(&twins, S)?)?;
        let trace: Vec<Vec<String>> = model
            .train_loss_trace
            .iter()
            .enumerate()
            .map(|(e, l)| vec![e.to_string(), num(*l)])
            .collect();
        self.art.write_csv(S, LOSS, &["epoch", "loss"], &trace)?;
        self.twins = Some(twins);
        Ok(())
    }

    fn ensure_twins(&mut self, stage: &'static str) -> Result<(), CliError> {
        self.ensure_loaded(stage)?;
        if self.twins.is_none() {
            self.twins = Some(self.read_table(stage, TWINS, Provenance::Synthetic)?);
        }
        Ok(())
    }

    fn audit(&mut self) -> Result<(), CliError> {
        const S: &str = "audit";
        self.ensure_analysis(S)?;
        self.ensure_twins(S)?;
        let seed = self.seed_for(S);
        let report: FidelityReport = twinshield::fidelity::audit(
            self.analysis.as_ref().expect("analysis"),
            self.twins.as_ref().expect("twins"),
            self.cfg.audit.bins,
            seed,
        )
        .stage(S)?;
        log::info!(
            "fidelity: ks {:.4}, frobenius {:.4}, dcr {:.4}, adversarial {:.4}",
            report.ks_avg,
            report.corr_frob_score,
            report.dcr,
            report.adv_acc
        );
        self.art.write_json(S, FIDELITY, &report)
    }

    fn estimate(&mut self) -> Result<(), CliError> {
        const S: &str = "estimate";
        self.ensure_analysis(S)?;
        let seed = self.seed_for(S);
        let e = self.cfg.estimate.clone();
        let analysis = self.analysis.clone().expect("analysis");
        let (train, source) = if self.cfg.stages.synth {
            self.ensure_twins(S)?;
            let twins = self.twins.as_ref().expect("twins");
            if e.pool_empirical {
                (twins.concat(&analysis).stage(S)?, "twins+empirical")
            } else {
                (twins.clone(), "twins")
            }
        } else {
            (analysis.clone(), "empirical")
        };
        let mut forest = e.forest.clone();
        forest.seed = rng::derive_seed_str(seed, "forest");
        let boot = rng::derive_seed_str(seed, "bootstrap");
        let ite = |outcome: &str| -> Result<IteVector, CliError> {
            let pair = causal::fit_tlearner(&train, outcome, &forest).stage(S)?;
            let mut v = causal::gcompute_ite(&pair, &analysis, outcome).stage(S)?;
            v.winsorize(e.winsor_low, e.winsor_high).stage(S)?;
            Ok(v)
        };
        let oop = ite(&e.oop)?;
        let hours = ite(&e.hours)?;
        let clusters = analysis.cluster_labels();
        let econ = self.econ.as_ref().expect("loaded");
        let net = causal::compose_net_burden(&oop.deltas, &hours.deltas, &clusters, econ, 1.0).stage(S)?;
        let bca = |v: &[f64]| causal::bca_bootstrap(v, e.replicates, e.alpha, boot).stage(S);
        let report = AteReport {
            n_rows: analysis.n_rows(),
            n_train: train.n_rows(),
            train_source: source.into(),
            winsor_low: e.winsor_low,
            winsor_high: e.winsor_high,
            oop: bca(&oop.deltas)?,
            hours: bca(&hours.deltas)?,
            net_burden: bca(&net)?,
        };
        log::info!(
            "ATE net burden {:.2} [{:.2}, {:.2}]",
            report.net_burden.point,
            report.net_burden.ci_low,
            report.net_burden.ci_high
        );
        let effects = Effects {
            oop,
            hours,
            net_burden: net,
            clusters,
            treatment: analysis.treatment().to_vec(),
        };
        let rows: Vec<Vec<String>> = (0..effects.len())
            .map(|i| {
                vec![
                    i.to_string(),
                    effects.clusters[i].clone(),
                    num(effects.treatment[i]),
                    num(effects.oop.deltas[i]),
                    num(effects.hours.deltas[i]),
                    num(effects.net_burden[i]),
                    num(effects.oop.y0_hat[i]),
                    num(effects.oop.y1_hat[i]),
                    num(effects.hours.y0_hat[i]),
                    num(effects.hours.y1_hat[i]),
                ]
            })
            .collect();
        self.art.write_json(S, ATE, &report)?;
        self.art.write_json(S, EFFECTS, &effects)?;
        self.art.write_csv(
            S,
            ITE,
            &[
                "row",
                "cluster",
                "treatment",
                "ite_oop",
                "ite_hours",
                "ite_net_burden",
                "oop_y0",
                "oop_y1",
                "hours_y0",
                "hours_y1",
            ],
            &rows,
        )?;
        self.effects = Some(effects);
        Ok(())
    }

    fn ensure_effects(&mut self, stage: &'static str) -> Result<(), CliError> {
        self.ensure_analysis(stage)?;
        if self.effects.is_none() {
            self.effects = Some(self.art.read_json(stage, EFFECTS)?);
        }
        let n = self.analysis.as_ref().expect("analysis").n_rows();
        let m = self.effects.as_ref().expect("effects").len();
        if n != m {
            return Err(CliError::Stage {
                stage,
                source: twinshield::Error::InvalidArgument(format!(
                    "{m} effects for {n} analysis rows; rerun estimate"
                )),
            });
        }
        Ok(())
    }

    fn effect(&self, stage: &'static str, outcome: &str) -> Result<Vec<f64>, CliError> {
        self.effects
            .as_ref()
            .expect("effects")
            .get(outcome)
            .map(<[f64]>::to_vec)
            .ok_or_else(|| CliError::Validation(format!("{stage}: unknown outcome `{outcome}`")))
    }

    fn cate(&mut self) -> Result<(), CliError> {
        const S: &str = "cate";
        self.ensure_effects(S)?;
        let c = self.cfg.cate.clone();
        let alpha = self.cfg.estimate.alpha;
        let analysis = self.analysis.as_ref().expect("analysis");
        let design = build_design(analysis, &c.design).stage(S)?;
        let mut tables = Vec::new();
        for o in &c.outcomes {
            let y = self.effect(S, o)?;
            let table = infer::ols_cr2(&design, &y, c.df_rule).stage(S)?;
            tables.push(OutcomeTable {
                outcome: o.clone(),
                table,
            });
        }
        let strata = match &c.stratum {
            Some(col) => {
                let y = self.effect(S, "net_burden")?;
                let fits = infer::stratified_fit(
                    analysis,
                    &y,
                    col,
                    None,
                    &c.design,
                    &Estimator::Ols { df_rule: c.df_rule },
                    c.min_stratum,
                )
                .stage(S)?;
                fits.into_iter()
                    .map(|(level, table)| StratumTable {
                        stratum: col.clone(),
                        level,
                        table,
                    })
                    .collect()
            }
            None => Vec::new(),
        };
        for t in &tables {
            let rows = coef_rows(&[], &t.table, alpha);
            self.art
                .write_csv(S, &format!("cate_{}.csv", t.outcome), &COEF_HEADER, &rows)?;
        }
        self.art.write_json(S, CATE, &tables)?;
        if c.stratum.is_some() {
            let rows: Vec<Vec<String>> = strata
                .iter()
                .flat_map(|s| coef_rows(std::slice::from_ref(&s.level), &s.table, alpha))
                .collect();
            self.art.write_json(S, CATE_STRATA, &strata)?;
            self.art
                .write_csv(S, "cate_strata.csv", &with_prefix(&["stratum"]), &rows)?;
        }
        Ok(())
    }

    fn qte(&mut self) -> Result<(), CliError> {
        const S: &str = "qte";
        self.ensure_effects(S)?;
        let seed = self.seed_for(S);
        let q = self.cfg.qte.clone();
        let alpha = self.cfg.estimate.alpha;
        let design = build_design(self.analysis.as_ref().expect("analysis"), &q.design).stage(S)?;
        let y = self.effect(S, &q.outcome)?;
        let y = infer::micro_jitter(&y, q.jitter, &mut rng::stream(rng::derive_seed_str(seed, "jitter"))).stage(S)?;
        let mut tables = Vec::new();
        for (k, &tau) in q.taus.iter().enumerate() {
            let table =
                infer::xy_pair_bootstrap(&design, &y, tau, q.replicates, rng::derive_seed(seed, k as u64)).stage(S)?;
            tables.push(QuantileTable { tau, table });
        }
        let rows: Vec<Vec<String>> = tables
            .iter()
            .flat_map(|t| coef_rows(&[num(t.tau)], &t.table, alpha))
            .collect();
        self.art.write_json(S, QTE, &tables)?;
        self.art.write_csv(S, "qte.csv", &with_prefix(&["tau"]), &rows)
    }

    fn sense(&mut self) -> Result<(), CliError> {
        const S: &str = "sense";
        self.ensure_effects(S)?;
        let sc = self.cfg.sense.clone();
        let est = self.cfg.estimate.clone();
        let design = build_design(self.analysis.as_ref().expect("analysis"), &sc.design).stage(S)?;
        let y = self.effect(S, &sc.outcome)?;
        let report = sense::sensitivity_report(
            &design,
            &y,
            &sc.coefficient,
            &sc.benchmark,
            &sc.multipliers,
            sc.grid_points,
            sc.alpha,
        )
        .stage(S)?;
        // same replicate draws as the headline interval
        let boot = rng::derive_seed_str(rng::derive_seed_str(self.cfg.seed(), "estimate"), "bootstrap");
        let fx = self.effects.as_ref().expect("effects");
        let sweep = sense::wage_sweep(
            &fx.oop.deltas,
            &fx.hours.deltas,
            &fx.clusters,
            self.econ.as_ref().expect("loaded"),
            &sc.wage_multipliers,
            est.replicates,
            est.alpha,
            boot,
        )
        .stage(S)?;
        let mut contour = Vec::new();
        for (i, dz) in report.contour.r2_dz.iter().enumerate() {
            for (j, yz) in report.contour.r2_yz.iter().enumerate() {
                contour.push(vec![
                    num(*dz),
                    num(*yz),
                    num(report.contour.estimate[i][j]),
                    num(report.contour.t[i][j]),
                ]);
            }
        }
        let sweep_rows: Vec<Vec<String>> = sweep
            .multipliers
            .iter()
            .zip(&sweep.nate)
            .map(|(m, r)| vec![num(*m), num(r.point), num(r.ci_low), num(r.ci_high), num(r.se)])
            .collect();
        self.art.write_json(S, SENSITIVITY, &report)?;
        self.art
            .write_csv(S, "contour.csv", &["r2_dz", "r2_yz", "estimate", "t"], &contour)?;
        self.art.write_json(S, WAGE_SWEEP, &sweep)?;
        self.art.write_csv(
            S,
            "wage_sweep.csv",
            &["multiplier", "nate", "ci_low", "ci_high", "se"],
            &sweep_rows,
        )
    }
}

/// Reads a pipeline artifact written by an earlier run.
pub fn read_artifact<T: for<'de> Deserialize<'de>>(dir: &Path, name: &str) -> Result<T, CliError> {
    let text = std::fs::read_to_string(dir.join(name)).map_err(|_| CliError::MissingArtifact {
        stage: "read",
        artifact: name.to_string(),
    })?;
    serde_json::from_str(&text).stage("read")
}
