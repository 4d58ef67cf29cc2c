//! Run configuration. The canonical JSON of a [`RunConfig`] is hashed to
//! name the run directory.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{hex, DatasetSpec, Family};
use crate::model::{HeadScales, TriggerSpec};
use crate::probe::ProbeConfig;
use crate::train::TrainConfig;

/// Clean pre-training that produces the reference projector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub n: usize,
    pub epochs: usize,
    pub data_seed: u64,
    pub train_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub eval_n: usize,
    pub eval_seed: u64,
    /// Largest rank in the surgery grid.
    pub k_max: usize,
    pub k1: usize,
    pub k2: usize,
    pub topk: usize,
    pub max_pairs: usize,
    pub sampling_seed: u64,
    /// Samples whose `u0` grids are written out.
    pub spatial_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Fixed prompt identifier; the toy has a single instruction.
    pub prompt_id: u32,
    pub model_seed: u64,
    pub head: HeadScales,
    pub trigger: TriggerSpec,
    pub dataset: DatasetSpec,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub probe_seed: u64,
    pub analysis: AnalysisConfig,
}

pub const SEED_SETS: [&str; 3] = ["A", "B", "C"];

impl RunConfig {
    /// Default configuration for a family under one of the pinned seed sets.
    pub fn pinned(family: Family, seed_set: &str) -> Option<RunConfig> {
        let s = SEED_SETS.iter().position(|&n| n.eq_ignore_ascii_case(seed_set))? as u64;
        Some(RunConfig {
            prompt_id: 0,
            model_seed: 100 + s,
            head: HeadScales::default(),
            trigger: family.default_trigger(),
            dataset: DatasetSpec {
                n_clean: 2000,
                poison_rate: 0.10,
                family,
                seed: 2000 + s,
            },
            pretrain: PretrainConfig {
                n: 2000,
                epochs: 30,
                data_seed: 1000 + s,
                train_seed: 50 + s,
            },
            train: TrainConfig {
                seed: 1 + s,
                ..TrainConfig::default()
            },
            probe: ProbeConfig::default(),
            probe_seed: 7 + s,
            analysis: AnalysisConfig {
                eval_n: 200,
                eval_seed: 3000 + s,
                k_max: 3,
                k1: 2,
                k2: 2,
                topk: 5,
                max_pairs: 2000,
                sampling_seed: 5000 + s,
                spatial_samples: 8,
            },
        })
    }

    pub fn family(&self) -> Family {
        self.dataset.family
    }

    /// Switches family, resetting the trigger to the family's default.
    pub fn set_family(&mut self, family: Family) {
        self.dataset.family = family;
        self.trigger = family.default_trigger();
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.canonical_json().as_bytes());
        hex(&d)[..16].to_string()
    }

    pub fn validate(&self) -> Result<(), String> {
        let a = &self.analysis;
        if self.dataset.n_clean == 0 || self.pretrain.n == 0 {
            return Err("dataset sizes must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.dataset.poison_rate) {
            return Err(format!("poison_rate {} outside [0, 1]", self.dataset.poison_rate));
        }
        if self.train.batch_size == 0 || !(self.train.lr >= 0.0) {
            return Err("batch_size must be positive and lr non-negative".into());
        }
        if a.eval_n < 2 * self.probe.min_per_class.max(1) {
            return Err(format!("eval_n {} too small for the probe", a.eval_n));
        }
        if a.k1.max(a.k2).max(a.k_max) > crate::model::D_L {
            return Err("surgery rank exceeds layer size".into());
        }
        if a.topk == 0 || a.topk > crate::model::VOCAB {
            return Err(format!("topk {} outside 1..={}", a.topk, crate::model::VOCAB));
        }
        Ok(())
    }
}

/// Looks up a trigger by name, including the two failure-mode variants.
pub fn trigger_by_name(name: &str) -> Option<TriggerSpec> {
    Some(match name {
        "global_noise" => TriggerSpec::global_noise(),
        "local_patch" => TriggerSpec::local_patch(),
        "icon" => TriggerSpec::icon(),
        "style" => TriggerSpec::style(),
        "pixel" => TriggerSpec::pixel(),
        "faint_local_noise" => TriggerSpec::faint_local_noise(),
        _ => return None,
    })
}
