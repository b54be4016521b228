//! Flat key-value run configuration.
//!
//! The config file is plain text, one `section.key = value` per line with
//! `#` comments. CLI flags override file entries with the same dotted keys
//! (`--train.alpha 5e-3`). Unknown keys are config errors so typos cannot
//! silently change an experiment.
//!
//! Recognized keys (defaults in parentheses):
//!
//! ```text
//! data.source (12)             data.target (3)
//! data.regre_source (750)      data.regre_target (220)
//! data.class_ratio (4.0)       data.allow_no_targets (false)
//! model.hidden (64)            model.layers (6)
//! model.dropout (0.1)          model.experts (4)
//! model.variant (hier)         model.block_variant (standard)
//! model.gate_design (hidden_concat)
//! model.hier_experts (mixed)   model.constant_gate_init (true)
//! train.pretrain_epochs (1000) train.finetune_epochs (500)
//! train.warmup_stage_epochs (500)
//! train.alpha (5e-3)           train.beta (5e-3)
//! train.batch (32)             train.lr (1e-3)
//! train.min_lr (1e-5)          train.weight_decay (1e-4)
//! train.warmup_steps (2000, the untuned rule)
//! train.patience (50)          train.val_frac (0.1)
//! train.test_frac (0.1)        train.finetune_k (50)
//! train.finetune_class_ratio (5.3)
//! train.split (kmeans)         train.two_stage (true)
//! dse.max_designs (75000)      dse.top_k (10)
//! ```

use crate::dataset::GenScale;
use crate::dse::SearchBudget;
use crate::error::{Error, Result};
use crate::model::{BlockVariant, GateDesign, HierExperts, OutputKind, Variant};
use crate::train::{SplitStrategy, TrainConfig};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::str::FromStr;

/// Raw dotted-key map merged from a file and CLI overrides.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RawConfig {
    pub entries: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("{}:{}: expected `key = value`", path.display(), lineno + 1))
            })?;
            entries.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(RawConfig { entries })
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), value.to_string());
    }
}

/// Data-generation section.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataCfg {
    pub source: usize,
    pub target: usize,
    pub scale: GenScale,
    pub allow_no_targets: bool,
}

impl Default for DataCfg {
    fn default() -> Self {
        DataCfg { source: 12, target: 3, scale: GenScale::default(), allow_no_targets: false }
    }
}

/// Model section: which structure to build and its sizes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelCfgSection {
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
    pub experts: usize,
    /// `harp`, `node_moe`, `block_moe`, `graph_moe`, or `hier`.
    pub variant: String,
    pub block_variant: BlockVariant,
    pub gate_design: GateDesign,
    pub hier_experts: HierExperts,
    pub constant_gate_init: bool,
}

impl Default for ModelCfgSection {
    fn default() -> Self {
        ModelCfgSection {
            hidden: 64,
            layers: 6,
            dropout: 0.1,
            experts: 4,
            variant: "hier".into(),
            block_variant: BlockVariant::Standard,
            gate_design: GateDesign::HiddenConcat,
            hier_experts: HierExperts::Mixed,
            constant_gate_init: true,
        }
    }
}

/// A resolved model request: either one single-level model or the
/// hierarchical model.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum ModelSpec {
    Single(crate::model::ModelCfg),
    Hier(crate::model::HierCfg),
}

impl ModelCfgSection {
    /// Resolves the section into a concrete spec for input width `f_in`.
    pub fn spec(&self, f_in: usize, outputs: OutputKind) -> Result<ModelSpec> {
        let base = crate::model::ModelCfg {
            f_in,
            hidden: self.hidden,
            encoder_layers: self.layers,
            dropout: self.dropout,
            experts: self.experts,
            variant: Variant::Harp,
            block_variant: self.block_variant,
            outputs,
        };
        let spec = match self.variant.as_str() {
            "harp" => ModelSpec::Single(crate::model::ModelCfg { variant: Variant::Harp, ..base }),
            "node_moe" => ModelSpec::Single(crate::model::ModelCfg { variant: Variant::NodeMoe, ..base }),
            "block_moe" => ModelSpec::Single(crate::model::ModelCfg { variant: Variant::BlockMoe, ..base }),
            "graph_moe" => ModelSpec::Single(crate::model::ModelCfg { variant: Variant::GraphMoe, ..base }),
            "hier" => ModelSpec::Hier(crate::model::HierCfg {
                base: crate::model::ModelCfg { variant: Variant::NodeMoe, ..base },
                gate_design: self.gate_design,
                experts_mix: self.hier_experts,
                constant_gate_init: self.constant_gate_init,
            }),
            other => return Err(Error::config(format!("unknown model.variant `{other}`"))),
        };
        Ok(spec)
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataCfg,
    pub model: ModelCfgSection,
    pub train: TrainConfig,
    pub dse: SearchBudget,
}

struct Reader<'a> {
    raw: &'a RawConfig,
    used: BTreeSet<String>,
}

impl<'a> Reader<'a> {
    fn get<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        self.used.insert(key.to_string());
        match self.raw.entries.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::config(format!("config key {key}: cannot parse `{v}`"))),
        }
    }

    fn get_bool(&mut self, key: &str, default: bool) -> Result<bool> {
        self.used.insert(key.to_string());
        match self.raw.entries.get(key).map(|s| s.as_str()) {
            None => Ok(default),
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some("false") | Some("0") | Some("no") => Ok(false),
            Some(v) => Err(Error::config(format!("config key {key}: `{v}` is not a bool"))),
        }
    }

    fn get_str(&mut self, key: &str, default: &str) -> String {
        self.used.insert(key.to_string());
        self.raw.entries.get(key).cloned().unwrap_or_else(|| default.to_string())
    }
}

/// Resolves a raw config into typed sections, rejecting unknown keys.
pub fn resolve(raw: &RawConfig, seed: u64) -> Result<RunConfig> {
    let mut r = Reader { raw, used: BTreeSet::new() };

    let data = DataCfg {
        source: r.get("data.source", 12)?,
        target: r.get("data.target", 3)?,
        scale: GenScale {
            regre_source: r.get("data.regre_source", 750)?,
            regre_target: r.get("data.regre_target", 220)?,
            class_ratio: r.get("data.class_ratio", 4.0)?,
        },
        allow_no_targets: r.get_bool("data.allow_no_targets", false)?,
    };

    let model = ModelCfgSection {
        hidden: r.get("model.hidden", 64)?,
        layers: r.get("model.layers", 6)?,
        dropout: r.get("model.dropout", 0.1)?,
        experts: r.get("model.experts", 4)?,
        variant: r.get_str("model.variant", "hier"),
        block_variant: match r.get_str("model.block_variant", "standard").as_str() {
            "standard" => BlockVariant::Standard,
            "keep_post_gnn" => BlockVariant::KeepPostGnn,
            "keep_post_gnn_dual_pool" => BlockVariant::KeepPostGnnDualPool,
            other => return Err(Error::config(format!("unknown model.block_variant `{other}`"))),
        },
        gate_design: match r.get_str("model.gate_design", "hidden_concat").as_str() {
            "hidden_concat" => GateDesign::HiddenConcat,
            "input_pooling" => GateDesign::InputPooling,
            other => return Err(Error::config(format!("unknown model.gate_design `{other}`"))),
        },
        hier_experts: match r.get_str("model.hier_experts", "mixed").as_str() {
            "mixed" => HierExperts::Mixed,
            "node" => HierExperts::Node,
            "block" => HierExperts::Block,
            "graph" => HierExperts::Graph,
            other => return Err(Error::config(format!("unknown model.hier_experts `{other}`"))),
        },
        constant_gate_init: r.get_bool("model.constant_gate_init", true)?,
    };

    let defaults = TrainConfig::default();
    let warmup_steps_raw = r.get::<i64>("train.warmup_steps", -1)?;
    let train = TrainConfig {
        pretrain_epochs: r.get("train.pretrain_epochs", defaults.pretrain_epochs)?,
        finetune_epochs: r.get("train.finetune_epochs", defaults.finetune_epochs)?,
        warmup_stage_epochs: r.get("train.warmup_stage_epochs", defaults.warmup_stage_epochs)?,
        alpha: r.get("train.alpha", defaults.alpha)?,
        beta: r.get("train.beta", defaults.beta)?,
        batch_size: r.get("train.batch", defaults.batch_size)?,
        lr: r.get("train.lr", defaults.lr)?,
        min_lr: r.get("train.min_lr", defaults.min_lr)?,
        weight_decay: r.get("train.weight_decay", defaults.weight_decay)?,
        warmup_steps: if warmup_steps_raw < 0 { None } else { Some(warmup_steps_raw as u64) },
        patience: r.get("train.patience", defaults.patience)?,
        val_frac: r.get("train.val_frac", defaults.val_frac)?,
        test_frac: r.get("train.test_frac", defaults.test_frac)?,
        finetune_k: r.get("train.finetune_k", defaults.finetune_k)?,
        finetune_class_ratio: r.get("train.finetune_class_ratio", defaults.finetune_class_ratio)?,
        split: match r.get_str("train.split", "kmeans").as_str() {
            "kmeans" => SplitStrategy::KMeans,
            "random" => SplitStrategy::Random,
            other => return Err(Error::config(format!("unknown train.split `{other}`"))),
        },
        two_stage: r.get_bool("train.two_stage", true)?,
        seed,
    };
    train.validate()?;

    let dse = SearchBudget {
        max_designs: r.get("dse.max_designs", 75_000)?,
        top_k: r.get("dse.top_k", 10)?,
    };
    dse.validate()?;

    let unknown: Vec<&String> = raw.entries.keys().filter(|k| !r.used.contains(*k)).collect();
    if !unknown.is_empty() {
        return Err(Error::config(format!("unknown config keys: {unknown:?}")));
    }

    Ok(RunConfig { data, model, train, dse })
}
