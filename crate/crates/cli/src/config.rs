use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use twinshield::cohort::SampleRules;
use twinshield::forest::ForestConfig;
use twinshield::impute::PmmSettings;
use twinshield::infer::{DesignSpec, DfRule};
use twinshield::sense::DEFAULT_MULTIPLIERS;
use twinshield::{DgpConfig, DiffusionConfig};

use crate::error::CliError;

/// On-disk inputs for an empirical run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputPaths {
    pub cohort: PathBuf,
    /// Schema manifest (JSON).
    pub manifest: PathBuf,
    /// Per-cluster wage and PPP table (JSON).
    pub economics: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageToggles {
    pub impute: bool,
    pub synth: bool,
    pub audit: bool,
    pub estimate: bool,
    pub cate: bool,
    pub qte: bool,
    pub sense: bool,
    pub report: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self {
            impute: true,
            synth: true,
            audit: true,
            estimate: true,
            cate: true,
            qte: true,
            sense: true,
            report: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthStage {
    /// Fields left out of a config document fall back to the desk preset.
    #[serde(deserialize_with = "desk_patch")]
    pub diffusion: DiffusionConfig,
    /// Twins to draw; defaults to the cohort size.
    pub n_twins: Option<usize>,
    /// Draw equally many rows per treatment arm.
    pub balance_arms: bool,
}

fn desk_patch<'de, D: serde::Deserializer<'de>>(d: D) -> Result<DiffusionConfig, D::Error> {
    use serde::de::Error as _;
    let serde_json::Value::Object(patch) = serde_json::Value::deserialize(d)? else {
        return Err(D::Error::custom("`diffusion` must be an object"));
    };
    let mut base = serde_json::to_value(DiffusionConfig::desk()).map_err(D::Error::custom)?;
    base.as_object_mut().expect("struct serializes to an object").extend(patch);
    serde_json::from_value(base).map_err(D::Error::custom)
}

impl Default for SynthStage {
    fn default() -> Self {
        Self {
            diffusion: DiffusionConfig::desk(),
            n_twins: None,
            balance_arms: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditStage {
    pub bins: usize,
}

impl Default for AuditStage {
    fn default() -> Self {
        Self { bins: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateStage {
    pub oop: String,
    pub hours: String,
    /// Net-burden column recomposed after imputation, if present.
    pub net_burden: Option<String>,
    pub forest: ForestConfig,
    pub winsor_low: f64,
    pub winsor_high: f64,
    pub replicates: usize,
    pub alpha: f64,
    /// Fit the response surfaces on twins plus empirical rows.
    pub pool_empirical: bool,
}

impl Default for EstimateStage {
    fn default() -> Self {
        Self {
            oop: "oop".into(),
            hours: "hours".into(),
            net_burden: Some("net_burden".into()),
            forest: ForestConfig::default(),
            winsor_low: 0.01,
            winsor_high: 0.99,
            replicates: twinshield::causal::DEFAULT_REPLICATES,
            alpha: 0.05,
            pool_empirical: false,
        }
    }
}

/// Regressors for the effect-heterogeneity models on the simulated layout.
pub fn default_design() -> DesignSpec {
    DesignSpec::default()
        .factor("regime", Some("Continental"))
        .factor("cod", Some("Cancer"))
        .factor("wealth", Some("Q1"))
        .factor("period", Some("pre"))
        .covariate("age")
        .covariate("distress")
        .covariate("adl")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CateStage {
    pub design: DesignSpec,
    /// Effect vectors to model: any of `oop`, `hours`, `net_burden`.
    pub outcomes: Vec<String>,
    pub df_rule: DfRule,
    /// Categorical column for the stratified re-estimation of net burden.
    pub stratum: Option<String>,
    pub min_stratum: usize,
}

impl Default for CateStage {
    fn default() -> Self {
        Self {
            design: default_design(),
            outcomes: vec!["oop".into(), "hours".into(), "net_burden".into()],
            df_rule: DfRule::Satterthwaite,
            stratum: Some("period".into()),
            min_stratum: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QteStage {
    pub design: DesignSpec,
    pub outcome: String,
    pub taus: Vec<f64>,
    pub replicates: usize,
    /// Half-width of the uniform jitter added to the effects.
    pub jitter: f64,
}

impl Default for QteStage {
    fn default() -> Self {
        Self {
            design: default_design(),
            outcome: "net_burden".into(),
            taus: vec![0.5, 0.75, 0.9],
            replicates: 1000,
            jitter: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SenseStage {
    pub design: DesignSpec,
    pub outcome: String,
    pub coefficient: String,
    pub benchmark: String,
    pub multipliers: Vec<f64>,
    pub grid_points: usize,
    pub alpha: f64,
    pub wage_multipliers: Vec<f64>,
}

impl Default for SenseStage {
    fn default() -> Self {
        Self {
            design: default_design(),
            outcome: "net_burden".into(),
            coefficient: "cod: Other".into(),
            benchmark: "adl".into(),
            multipliers: vec![1.0, 2.0, 3.0],
            grid_points: 25,
            alpha: 0.05,
            wage_multipliers: DEFAULT_MULTIPLIERS.to_vec(),
        }
    }
}

/// The declarative pipeline document.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub input: Option<InputPaths>,
    /// Simulated cohort used when no input paths are given.
    pub simulate: Option<DgpConfig>,
    pub sample_rules: Option<SampleRules>,
    pub stages: StageToggles,
    pub impute: PmmSettings,
    pub synth: SynthStage,
    pub audit: AuditStage,
    pub estimate: EstimateStage,
    pub cate: CateStage,
    pub qte: QteStage,
    pub sense: SenseStage,
}

impl PipelineConfig {
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))
    }

    /// Checks everything that can be checked before any stage runs.
    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |m: String| Err(CliError::Validation(m));
        if self.seed.is_none() {
            return fail("a seed is required (config `seed` or --seed)".into());
        }
        if self.out_dir.is_none() {
            return fail("an output directory is required (config `out_dir` or --out)".into());
        }
        match (&self.input, &self.simulate) {
            (Some(input), _) => {
                for (what, p) in [
                    ("cohort", &input.cohort),
                    ("manifest", &input.manifest),
                    ("economics", &input.economics),
                ] {
                    if !p.is_file() {
                        return fail(format!("{what} input {} does not exist", p.display()));
                    }
                }
            }
            (None, Some(dgp)) => dgp.validate().map_err(|e| CliError::Validation(e.to_string()))?,
            (None, None) => return fail("config needs either `input` paths or a `simulate` block".into()),
        }
        self.synth
            .diffusion
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        self.estimate
            .forest
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        let e = &self.estimate;
        if !(0.0 <= e.winsor_low && e.winsor_low < e.winsor_high && e.winsor_high <= 1.0) {
            return fail(format!(
                "winsorization levels ({}, {}) invalid",
                e.winsor_low, e.winsor_high
            ));
        }
        if !(e.alpha > 0.0 && e.alpha < 1.0) {
            return fail(format!("alpha {} outside (0, 1)", e.alpha));
        }
        if e.replicates < 2 {
            return fail("estimate.replicates must be at least 2".into());
        }
        if self.qte.taus.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return fail("qte.taus must lie in (0, 1)".into());
        }
        if self.qte.replicates < 2 {
            return fail("qte.replicates must be at least 2".into());
        }
        if self.qte.jitter < 0.0 {
            return fail("qte.jitter must be nonnegative".into());
        }
        for o in self
            .cate
            .outcomes
            .iter()
            .chain([&self.qte.outcome, &self.sense.outcome])
        {
            if !["oop", "hours", "net_burden"].contains(&o.as_str()) {
                return fail(format!(
                    "unknown effect outcome `{o}` (expected oop, hours or net_burden)"
                ));
            }
        }
        if self.sense.grid_points < 2 {
            return fail("sense.grid_points must be at least 2".into());
        }
        if self.sense.wage_multipliers.is_empty() {
            return fail("sense.wage_multipliers must not be empty".into());
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("validated config has a seed")
    }

    pub fn out_dir(&self) -> &Path {
        self.out_dir
            .as_deref()
            .expect("validated config has an output directory")
    }
}
