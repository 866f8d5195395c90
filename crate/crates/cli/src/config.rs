//! Run configuration: defaults, JSON config files and dotted-key overrides.

use std::path::Path;

use mosekit_core::dedup::DedupParams;
use mosekit_core::evalkit::{DEFAULT_ALPHA, DEFAULT_CLONE_THRESHOLD, DEFAULT_DISTRACTORS, DEFAULT_N_PERM};
use mosekit_core::training::{TrainMode, TrainPlan};
use mosekit_core::{EncoderConfig, OptimizerConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub repos: usize,
    pub snippets_per_repo: usize,
    pub langs: Vec<String>,
    pub triplets: usize,
    pub clone_pairs: usize,
    /// Fraction of corpus snippets that receive a planted near-copy.
    pub plant_rate: f64,
    pub max_vocab: usize,
}

/// Plan plus optimizer of one training stage. Without an explicit optimizer
/// the desk preset of the stage is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub plan: TrainPlan,
    pub optimizer: Option<OptimizerConfig>,
}

impl StageConfig {
    pub fn optimizer(&self) -> OptimizerConfig {
        match (&self.optimizer, self.plan.mode) {
            (Some(o), _) => o.clone(),
            (None, TrainMode::Pretrain) => OptimizerConfig::desk_pretrain(self.plan.steps),
            (None, _) => OptimizerConfig::desk_finetune(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub n_distractors: usize,
    pub max_len: usize,
    pub clone_threshold: f64,
    pub n_perm: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds every stochastic stage.
    pub seed: u64,
    pub gen: GenConfig,
    pub dedup: DedupParams,
    /// `vocab_size` is replaced by the size of the vocabulary in use.
    pub model: EncoderConfig,
    pub pretrain: StageConfig,
    pub retrieval: StageConfig,
    pub clone: StageConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let stage = |mode| StageConfig { plan: TrainPlan::desk(mode), optimizer: None };
        Self {
            seed: 0,
            gen: GenConfig {
                repos: 4,
                snippets_per_repo: 16,
                langs: vec!["toyA".into(), "toyB".into()],
                triplets: 128,
                clone_pairs: 128,
                plant_rate: 0.0,
                max_vocab: 4096,
            },
            dedup: DedupParams::default(),
            model: EncoderConfig::desk(0),
            pretrain: stage(TrainMode::Pretrain),
            retrieval: stage(TrainMode::FinetuneRetrieval),
            clone: stage(TrainMode::FinetuneClone),
            eval: EvalConfig {
                n_distractors: DEFAULT_DISTRACTORS,
                max_len: 128,
                clone_threshold: DEFAULT_CLONE_THRESHOLD,
                n_perm: DEFAULT_N_PERM,
                alpha: DEFAULT_ALPHA,
            },
        }
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets `key` (dot separated) to `raw`, parsed as JSON when possible and as a
/// string otherwise. Unknown keys are rejected, except inside fields that
/// are currently null.
pub fn apply_override(doc: &mut Value, key: &str, raw: &str) -> Result<(), Failure> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = doc;
    let mut fresh = false;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        if cur.is_null() {
            *cur = Value::Object(Default::default());
            fresh = true;
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Failure::usage(format!("--set {key}: `{}` is not a section", parts[..i].join("."))))?;
        if last {
            if !fresh && !obj.contains_key(*part) {
                return Err(Failure::usage(format!("--set {key}: unknown key `{part}`")));
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*part).ok_or_else(|| Failure::usage(format!("--set {key}: unknown key `{part}`")))?;
    }
    Ok(())
}

/// Defaults, then the config file, then `--set` overrides, then `--seed`.
pub fn resolve(file: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<RunConfig, Failure> {
    let mut doc = serde_json::to_value(RunConfig::default()).expect("serializable defaults");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        let patch: Value = serde_json::from_str(&text)
            .map_err(|e| Failure::usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        merge(&mut doc, patch);
    }
    for s in sets {
        let (k, v) = s.split_once('=').ok_or_else(|| Failure::usage(format!("--set expects key=value, got `{s}`")))?;
        apply_override(&mut doc, k.trim(), v.trim())?;
    }
    let mut cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Failure::usage(format!("invalid config: {e}")))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.dedup.seed = cfg.seed;
    for stage in [&mut cfg.pretrain, &mut cfg.retrieval, &mut cfg.clone] {
        stage.plan.seed = cfg.seed;
    }
    cfg.pretrain.plan.mode = TrainMode::Pretrain;
    cfg.retrieval.plan.mode = TrainMode::FinetuneRetrieval;
    cfg.clone.plan.mode = TrainMode::FinetuneClone;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let sets = vec!["pretrain.plan.steps=7".to_string(), "gen.langs=[\"toyC\",\"toyD\"]".to_string()];
        let cfg = resolve(None, &sets, Some(9)).unwrap();
        assert_eq!(cfg.pretrain.plan.steps, 7);
        assert_eq!(cfg.gen.langs, ["toyC", "toyD"]);
        assert_eq!((cfg.seed, cfg.retrieval.plan.seed, cfg.dedup.seed), (9, 9, 9));
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        assert_eq!(resolve(None, &["pretrain.plan.stepz=3".into()], None).unwrap_err().code, 1);
        assert_eq!(resolve(None, &["nonsense".into()], None).unwrap_err().code, 1);
        assert_eq!(resolve(None, &["seed=\"x\"".into()], None).unwrap_err().code, 1);
    }

    #[test]
    fn null_sections_accept_new_keys() {
        let cfg = resolve(None, &["retrieval.plan.single_exit=4".into()], None).unwrap();
        assert_eq!(cfg.retrieval.plan.single_exit, Some(4));
        let with_opt = resolve(None, &["clone.optimizer.base_lr=0.5".into()], None);
        assert!(with_opt.is_err(), "a partial optimizer section is incomplete");
    }

    #[test]
    fn config_file_merges_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"gen": {"repos": 2}, "eval": {"n_distractors": 5}}"#).unwrap();
        let cfg = resolve(Some(&p), &[], None).unwrap();
        assert_eq!((cfg.gen.repos, cfg.gen.snippets_per_repo, cfg.eval.n_distractors), (2, 16, 5));
    }
}
