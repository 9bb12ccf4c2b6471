//! Run configuration: a TOML document whose sections mirror the library's
//! configuration types. Command-line flags override individual fields.

use std::path::{Path, PathBuf};

use braids::data::DataSchema;
use braids::prior::TreePriorConfig;
use braids::ridge::{McmcConfig, RidgePrior};
use braids::rules::RuleConfig;
use braids::search::{PrespecifiedPartition, SearchConfig};
use braids::sim::{CalibrationDesign, ExperimentConfig, Fitter, Pipeline, SyntheticDgp};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Directory receiving every output file.
    pub output: PathBuf,
    /// Delimited data file.
    pub data: Option<PathBuf>,
    /// Stem of the draws files; `<output>/draws` when absent.
    pub draws: Option<PathBuf>,
    /// Column roles; inferred from the header when absent.
    pub schema: Option<DataSchema>,
    pub prior: RidgePrior,
    pub mcmc: McmcConfig,
    pub rules: RuleConfig,
    pub fit: FitSection,
    pub subgroups: SubgroupsSection,
    pub policy: PolicySection,
    pub calibration: CalibrationSection,
    pub simulate: SimulateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output: PathBuf::from("braids-out"),
            data: None,
            draws: None,
            schema: None,
            prior: RidgePrior::default(),
            mcmc: McmcConfig::default(),
            rules: RuleConfig::default(),
            fit: FitSection::default(),
            subgroups: SubgroupsSection::default(),
            policy: PolicySection::default(),
            calibration: CalibrationSection::default(),
            simulate: SimulateSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn draws_stem(&self) -> PathBuf {
        self.draws.clone().unwrap_or_else(|| self.output.join("draws"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    pub model: Fitter,
    /// Center the treatment at the propensity score.
    pub observational: bool,
    /// Also write the draws as a delimited text file.
    pub export_csv: bool,
}

impl Default for FitSection {
    fn default() -> Self {
        FitSection {
            model: Fitter::Ridge,
            observational: false,
            export_csv: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubgroupsSection {
    pub search: SearchConfig,
    /// Risk attitudes to search and rank at.
    pub lambdas: Vec<f64>,
    pub alpha: f64,
    pub max_thresholds: usize,
    /// 1-based group pairs whose difference is summarized.
    pub contrasts: Vec<[usize; 2]>,
    pub prespecified: Vec<PrespecifiedPartition>,
}

impl Default for SubgroupsSection {
    fn default() -> Self {
        SubgroupsSection {
            search: SearchConfig::default(),
            lambdas: vec![1.0],
            alpha: 0.05,
            max_thresholds: 64,
            contrasts: Vec::new(),
            prespecified: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyUtility {
    Welfare,
    Efficacy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub utility: PolicyUtility,
    /// Cost of treatment (welfare) or effect threshold (efficacy).
    pub delta: f64,
    /// Tolerated false-positive probability for efficacy.
    pub c: f64,
    pub max_depth: usize,
    pub max_thresholds: usize,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            utility: PolicyUtility::Welfare,
            delta: 0.0,
            c: 0.5,
            max_depth: 2,
            max_thresholds: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSection {
    pub prior: TreePriorConfig,
    /// Rows of the synthetic covariate matrix when no data file is given.
    pub n_rows: usize,
    pub p: usize,
    pub n_samples: usize,
    pub bins: usize,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        CalibrationSection {
            prior: TreePriorConfig::default(),
            n_rows: 500,
            p: 5,
            n_samples: 10_000,
            bins: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimulationKind {
    Utility,
    Coverage,
    PriorPredictive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DgpPreset {
    Linear,
    Tree,
    Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub kind: SimulationKind,
    pub preset: DgpPreset,
    pub sigma: f64,
    /// Replaces the preset when given.
    pub dgp: Option<SyntheticDgp>,
    pub methods: Vec<Fitter>,
    pub pipelines: Vec<Pipeline>,
    pub experiment: ExperimentConfig,
    pub design: CalibrationDesign,
    /// Multiplier on the modifier-scale prior used to fit in prior-predictive runs.
    pub fit_scale: f64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            kind: SimulationKind::Utility,
            preset: DgpPreset::Linear,
            sigma: 1.0 / 3.0,
            dgp: None,
            methods: vec![Fitter::Ridge, Fitter::FlatLinear, Fitter::RuleBcf],
            pipelines: Pipeline::ALL.to_vec(),
            experiment: ExperimentConfig::default(),
            design: CalibrationDesign::default(),
            fit_scale: 1.0,
        }
    }
}

impl SimulateSection {
    pub fn resolved_dgp(&self) -> SyntheticDgp {
        if let Some(d) = &self.dgp {
            return d.clone();
        }
        match self.preset {
            DgpPreset::Linear => SyntheticDgp::linear(self.sigma),
            DgpPreset::Tree => SyntheticDgp::tree(self.sigma),
            DgpPreset::Step => SyntheticDgp::step(5, self.sigma),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sed = 3").is_err());
        assert!(RunConfig::from_toml("[mcmc]\nn_draw = 10").is_err());
        assert!(RunConfig::from_toml("[subgroups.search]\ndepth = 2").is_err());
    }

    #[test]
    fn nested_sections_parse() {
        let cfg = RunConfig::from_toml(
            r#"
            seed = 9
            [mcmc]
            n_draws = 50
            [subgroups]
            lambdas = [0.0, 1.0, 2.0]
            contrasts = [[1, 2]]
            [subgroups.search]
            mode = "exact"
            [calibration.prior.depth_law]
            law = "chipman"
            alpha = 0.25
            beta = 3.0
            [simulate]
            kind = "coverage"
            pipelines = ["honest-aipw"]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.mcmc.n_draws, 50);
        assert_eq!(cfg.mcmc.n_burn, McmcConfig::default().n_burn);
        assert_eq!(cfg.subgroups.contrasts, vec![[1, 2]]);
        assert_eq!(cfg.simulate.pipelines, vec![Pipeline::HonestAipw]);
    }
}
