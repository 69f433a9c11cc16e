//! JSON run configuration shared by the command-line tools.
//!
//! A file holds a `data` section ([`SynthConfig`]), a `train` section
//! ([`TrainConfig`]) and optional top-level `tasks`, `pairs` and
//! `embed_budget` overrides. Missing keys take their defaults and unknown
//! keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::error::{DivaError, Result};
use crate::mining::BatchSpec;
use crate::model::{EncoderConfig, TaskKind};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub data: SynthConfig,
    pub train: TrainConfig,
    /// Active tasks; replaces `train.model.tasks` when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tasks: Option<Vec<TaskKind>>,
    /// Decorrelated head pairs; replaces `train.model.pairs` when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairs: Option<Vec<(TaskKind, TaskKind)>>,
    /// Total embedding width split evenly over the active heads. When set,
    /// `train.model.embed_dim` is derived from it so that runs with
    /// different task sets compare at equal total size.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embed_budget: Option<usize>,
}

/// Per-head width under a total budget.
pub fn split_budget(budget: usize, n_heads: usize) -> Result<usize> {
    let d = budget / n_heads.max(1);
    if d == 0 {
        return Err(DivaError::config(format!("embed_budget {budget} is too small for {n_heads} heads")));
    }
    Ok(d)
}

impl RunConfigFile {
    /// Parses a JSON document; syntax and schema errors name their line and
    /// column.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfigFile = serde_json::from_str(text).map_err(|e| {
            DivaError::config(format!("line {} column {}: {e}", e.line(), e.column()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            DivaError::Config(msg) => DivaError::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train_config(None, None)?;
        Ok(())
    }

    /// Resolved training configuration. `tasks` and `seed`, when given,
    /// take precedence over the file.
    pub fn train_config(&self, tasks: Option<&[TaskKind]>, seed: Option<u64>) -> Result<TrainConfig> {
        let mut cfg = self.train.clone();
        if let Some(p) = &self.pairs {
            cfg.model.pairs = p.clone();
        }
        let tasks = tasks.map(<[TaskKind]>::to_vec).or_else(|| self.tasks.clone()).unwrap_or_else(|| cfg.model.tasks.clone());
        let mut cfg = cfg.with_tasks(&tasks);
        if let Some(b) = self.embed_budget {
            cfg.model.embed_dim = split_budget(b, cfg.model.tasks.len())?;
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Settings that train in seconds on the default synthetic data while
    /// keeping every mechanism active.
    pub fn desk() -> Self {
        let mut train = TrainConfig {
            batch: BatchSpec { n_classes: 8, m_per_class: 4 },
            epochs: 60,
            lr: 1e-3,
            lr_decay_epochs: vec![45],
            queue_capacity: 512,
            eval_every: 0,
            ..TrainConfig::default()
        };
        train.model.encoder = EncoderConfig { input_dim: 64, hidden_dims: vec![128], feature_dim: 64 };
        train.loss.rho_dec = 0.3;
        RunConfigFile { data: SynthConfig::default(), train, tasks: None, pairs: None, embed_budget: Some(128) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfigFile::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfigFile::default());
        let t = cfg.train_config(None, None).unwrap();
        assert_eq!(t.epochs, 150);
        assert_eq!(t.model.tasks, TaskKind::ALL.to_vec());
    }

    #[test]
    fn errors_carry_position() {
        let err = RunConfigFile::from_json("{\n  \"train\": {\n    \"epochs\": 3,\n  }\n}").unwrap_err();
        assert!(matches!(&err, DivaError::Config(m) if m.contains("line 4")), "{err}");
        let err = RunConfigFile::from_json("{\"train\": {\"epoch\": 3}}").unwrap_err();
        assert!(matches!(&err, DivaError::Config(m) if m.contains("unknown field") && m.contains("column")), "{err}");
        assert!(RunConfigFile::from_json("{\"train\": {\"epochs\": 0}}").is_err());
        assert!(RunConfigFile::from_json("{\"tasks\": [\"S\"]}").is_err());
    }

    #[test]
    fn overrides_and_budget() {
        let cfg = RunConfigFile::from_json(r#"{"tasks": ["D", "Da"], "embed_budget": 128}"#).unwrap();
        let t = cfg.train_config(None, Some(4)).unwrap();
        assert_eq!(t.model.tasks, vec![TaskKind::Disc, TaskKind::Dance]);
        assert_eq!(t.model.pairs, vec![(TaskKind::Disc, TaskKind::Dance)]);
        assert_eq!(t.model.embed_dim, 64);
        assert_eq!(t.seed, 4);
        let t = cfg.train_config(Some(&TaskKind::ALL), None).unwrap();
        assert_eq!(t.model.embed_dim, 32);
        assert!(split_budget(3, 4).is_err());
    }

    #[test]
    fn desk_round_trips() {
        let desk = RunConfigFile::desk();
        assert_eq!(RunConfigFile::from_json(&desk.to_json()).unwrap(), desk);
    }
}
