//! Experiment configuration: a single JSON document with `model`,
//! `sites`, `method`, `train`, and `data` sections, validated up front
//! and hashed so every artifact of a run can name the exact
//! configuration that produced it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{sha256_hex, SiteSpec};
use crate::error::{Error, Result};
use crate::lha::PsiUpdate;
use crate::model::{ModelConfig, TaskSpec};
use crate::text::IndicatorKind;

/// Federated method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Local,
    Fedavg,
    FedavgCluster,
    Fedrep,
    Fedprox,
    Surgfed,
}

impl MethodName {
    pub const ALL: [&'static str; 6] = [
        "local",
        "fedavg",
        "fedavg_cluster",
        "fedrep",
        "fedprox",
        "surgfed",
    ];
}

/// Method section: which protocol runs and which components are active.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodConfig {
    pub name: MethodName,
    pub fedprox_mu: f64,
    pub lcs_enabled: bool,
    pub lha_enabled: bool,
    /// Text conditioning in the server gate without local channel
    /// selection (component-ablation row: implies `lha_enabled` and not
    /// `lcs_enabled`).
    pub text_prompt_only: bool,
    pub indicator: IndicatorKind,
    pub psi_update: PsiUpdate,
    /// Also aggregate head layers across same-task sites under the
    /// hyper-aggregation path.
    pub include_heads_same_task: bool,
    /// Layer-name prefixes that train; empty means everything trains.
    pub trainable_groups: Vec<String>,
    /// Layer-name prefixes that receive zero updates.
    pub freeze_groups: Vec<String>,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            name: MethodName::Local,
            fedprox_mu: 0.01,
            lcs_enabled: true,
            lha_enabled: false,
            text_prompt_only: false,
            indicator: IndicatorKind::Text,
            psi_update: PsiUpdate::Adam,
            include_heads_same_task: false,
            trainable_groups: Vec::new(),
            freeze_groups: Vec::new(),
        }
    }
}

impl MethodConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name == MethodName::Surgfed && !self.lha_enabled {
            return Err(Error::Config("method surgfed requires lha_enabled".into()));
        }
        if self.lha_enabled && self.name != MethodName::Surgfed {
            return Err(Error::Config(
                "lha_enabled is only meaningful with method surgfed".into(),
            ));
        }
        if self.text_prompt_only && (!self.lha_enabled || self.lcs_enabled) {
            return Err(Error::Config(
                "text_prompt_only implies lha_enabled and not lcs_enabled".into(),
            ));
        }
        if self.fedprox_mu < 0.0 {
            return Err(Error::Config("fedprox_mu must be non-negative".into()));
        }
        Ok(())
    }

    /// Whether the server gate conditions on the indicator. With neither
    /// local channel selection nor the text-prompt row active, the
    /// hyper-aggregation runs on raw cross-attention alone.
    pub fn lha_text_gate_active(&self) -> bool {
        self.lha_enabled && (self.text_prompt_only || self.lcs_enabled)
    }
}

/// Training loop section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Communication rounds T.
    pub rounds: usize,
    /// Local epochs E per round.
    pub local_epochs: usize,
    pub local_lr: f64,
    pub gate_lr: f64,
    pub psi_lr: f64,
    pub seed: u64,
    /// Chunk count G of the server gate.
    pub gate_chunks: usize,
    /// Indicator dimension d.
    pub indicator_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rounds: 20,
            local_epochs: 3,
            local_lr: 1e-4,
            gate_lr: 1e-3,
            psi_lr: 1e-3,
            seed: 1,
            gate_chunks: 16,
            indicator_dim: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_lr < 0.0 || self.gate_lr < 0.0 || self.psi_lr < 0.0 {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if self.gate_chunks == 0 {
            return Err(Error::Config("gate_chunks must be positive".into()));
        }
        if self.indicator_dim == 0 {
            return Err(Error::Config("indicator_dim must be positive".into()));
        }
        Ok(())
    }
}

/// One site entry of the `sites` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteConfig {
    pub name: String,
    pub task: TaskSpec,
    pub samples: usize,
    /// Data seed; also keys the site's training stream, so two sites
    /// configured identically train identically.
    pub seed: u64,
    #[serde(default)]
    pub class_names: Option<Vec<String>>,
    #[serde(default)]
    pub noise_freq: Option<usize>,
    #[serde(default)]
    pub instrument_range: Option<[usize; 2]>,
    #[serde(default)]
    pub blob_range: Option<[usize; 2]>,
    #[serde(default)]
    pub palette: Option<[[f64; 3]; 3]>,
}

impl SiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("site name must be non-empty".into()));
        }
        if self.samples == 0 {
            return Err(Error::Config(format!("site {} needs samples >= 1", self.name)));
        }
        self.task.validate()
    }

    /// Generation spec for this site at the model's input size.
    pub fn site_spec(&self, size: [usize; 2]) -> Result<SiteSpec> {
        let mut spec = SiteSpec::derive(self.seed, self.task, size)?;
        if let Some(f) = self.noise_freq {
            spec.noise_freq = f;
        }
        if let Some(r) = self.instrument_range {
            spec.instrument_range = r;
        }
        if let Some(r) = self.blob_range {
            spec.blob_range = r;
        }
        if let Some(p) = self.palette {
            spec.palette = p;
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Conditioning prompt: "Dataset: {name}, Task: {task}, Label: {classes}".
    pub fn prompt(&self) -> String {
        let (task, labels) = match self.task {
            TaskSpec::Segmentation { class_count } => {
                let labels = match &self.class_names {
                    Some(names) => names.join(", "),
                    None => (1..class_count)
                        .map(|c| format!("Class {}", c))
                        .collect::<Vec<_>>()
                        .join(", "),
                };
                ("Instrument Segmentation", labels)
            }
            TaskSpec::Depth { .. } => ("Depth Estimation", "Depth Map".to_string()),
        };
        format!("Dataset: {}, Task: {}, Label: {}", self.name, task, labels)
    }
}

/// Data location section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Dataset root; each site lives in `site{k}/` below it. Relative
    /// paths resolve against the config file's directory.
    pub dir: String,
    /// Optional local-training run to compare against in the summary.
    #[serde(default)]
    pub baseline_run: Option<String>,
}

/// The full experiment document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelConfig,
    pub sites: Vec<SiteConfig>,
    #[serde(default)]
    pub method: MethodConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.clip_len != 1 {
            return Err(Error::Config(
                "the synthetic data pipeline provides single-frame clips; set clip_len = 1".into(),
            ));
        }
        if self.sites.is_empty() {
            return Err(Error::Config("at least one site is required".into()));
        }
        for site in &self.sites {
            site.validate()?;
        }
        self.method.validate()?;
        self.train.validate()?;
        if self.method.indicator == IndicatorKind::OneHot
            && self.sites.len() > self.train.indicator_dim
        {
            return Err(Error::Config(format!(
                "one-hot indicators need indicator_dim >= site count ({})",
                self.sites.len()
            )));
        }
        Ok(())
    }

    /// Model configuration with the method's component switches applied.
    pub fn effective_model(&self) -> ModelConfig {
        let mut model = self.model.clone();
        model.lcs_enabled = self.method.lcs_enabled;
        model
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid experiment config: {}", e)))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Config(format!("config file {} not found", path.display())));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Canonical JSON serialization (stable field order, compact).
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Hash of the canonical serialization.
    pub fn hash(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            model: ModelConfig {
                input: [16, 16, 3],
                encoder_widths: vec![4, 6],
                encoder_strides: vec![2, 2],
                decoder_widths: vec![6, 4],
                ..ModelConfig::default()
            },
            sites: vec![
                SiteConfig {
                    name: "SiteA".into(),
                    task: TaskSpec::Segmentation { class_count: 3 },
                    samples: 5,
                    seed: 11,
                    class_names: None,
                    noise_freq: None,
                    instrument_range: None,
                    blob_range: None,
                    palette: None,
                },
                SiteConfig {
                    name: "SiteB".into(),
                    task: TaskSpec::Depth {
                        depth_min: 1.0,
                        depth_max: 3.0,
                    },
                    samples: 5,
                    seed: 12,
                    class_names: None,
                    noise_freq: None,
                    instrument_range: None,
                    blob_range: None,
                    palette: None,
                },
            ],
            method: MethodConfig::default(),
            train: TrainConfig {
                rounds: 2,
                local_epochs: 1,
                indicator_dim: 8,
                ..TrainConfig::default()
            },
            data: DataConfig {
                dir: "data".into(),
                baseline_run: None,
            },
        }
    }

    #[test]
    fn validation_accepts_the_tiny_config() {
        tiny_config().validate().unwrap();
    }

    #[test]
    fn surgfed_requires_lha() {
        let mut cfg = tiny_config();
        cfg.method.name = MethodName::Surgfed;
        assert!(cfg.validate().is_err());
        cfg.method.lha_enabled = true;
        cfg.validate().unwrap();
    }

    #[test]
    fn text_prompt_only_constraints() {
        let mut cfg = tiny_config();
        cfg.method.name = MethodName::Surgfed;
        cfg.method.lha_enabled = true;
        cfg.method.text_prompt_only = true;
        cfg.method.lcs_enabled = true;
        assert!(cfg.validate().is_err());
        cfg.method.lcs_enabled = false;
        cfg.validate().unwrap();
        assert!(cfg.method.lha_text_gate_active());
    }

    #[test]
    fn lha_gate_rule_per_component_rows() {
        // attention-only row: no text gate
        let mut m = MethodConfig {
            name: MethodName::Surgfed,
            lha_enabled: true,
            lcs_enabled: false,
            ..MethodConfig::default()
        };
        assert!(!m.lha_text_gate_active());
        // full method: gate active
        m.lcs_enabled = true;
        assert!(m.lha_text_gate_active());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = tiny_config();
        let b = tiny_config();
        assert_eq!(a.hash(), b.hash());
        let mut c = tiny_config();
        c.train.seed = 99;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn json_roundtrip() {
        let cfg = tiny_config();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn prompts_follow_the_template() {
        let cfg = tiny_config();
        assert_eq!(
            cfg.sites[0].prompt(),
            "Dataset: SiteA, Task: Instrument Segmentation, Label: Class 1, Class 2"
        );
        assert_eq!(
            cfg.sites[1].prompt(),
            "Dataset: SiteB, Task: Depth Estimation, Label: Depth Map"
        );
    }

    #[test]
    fn unknown_method_string_is_a_config_error() {
        let text = r#"{
            "sites": [{"name":"a","task":{"kind":"segmentation","class_count":3},"samples":2,"seed":1}],
            "method": {"name": "bogus"},
            "data": {"dir": "d"}
        }"#;
        assert!(matches!(
            ExperimentConfig::from_json(text),
            Err(Error::Config(_))
        ));
    }
}
