//! Run configuration, read from TOML. Every field has a default, so an
//! empty file is a valid configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::data::TaskSpec;
use crate::error::{Error, Result};
use crate::graft::GraftSchedule;
use crate::kd::KdConfig;
use crate::model::ModelConfig;
use crate::optim::{two_phase_optimizers, AdamWConfig, OptimizerConfig};
use crate::prune::SparsitySchedule;

/// Training recipe of the distillation loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// All student modules from step 0, cross-entropy loss.
    NoProgNoKd,
    /// Progressive grafting, cross-entropy loss.
    ProgNoKd,
    /// All student modules from step 0, layer-wise distillation loss.
    NoProgKd,
    /// Progressive grafting with layer-wise distillation.
    ProgKd,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::NoProgNoKd,
        Strategy::ProgNoKd,
        Strategy::NoProgKd,
        Strategy::ProgKd,
    ];

    pub fn progressive(self) -> bool {
        matches!(self, Strategy::ProgNoKd | Strategy::ProgKd)
    }

    pub fn distills(self) -> bool {
        matches!(self, Strategy::NoProgKd | Strategy::ProgKd)
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::NoProgNoKd => "no_prog_no_kd",
            Strategy::ProgNoKd => "prog_no_kd",
            Strategy::NoProgKd => "no_prog_kd",
            Strategy::ProgKd => "prog_kd",
        }
    }
}

/// Plain cross-entropy finetuning of the dense teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub eval_every: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            steps: 1500,
            batch_size: 32,
            optimizer: AdamWConfig {
                lr: 3e-3,
                ..AdamWConfig::default()
            },
            eval_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub strategy: Strategy,
    pub batch_size: usize,
    pub eval_every: usize,
    /// Train examples scored at each evaluation; 0 scores the whole split.
    pub train_eval_size: usize,
    /// Distillation sees only this many leading training examples while the
    /// teacher sees the whole split; 0 uses everything.
    pub spd_train_size: usize,
    /// When false, nothing is grafted while pruning is under way.
    pub graft_while_prune: bool,
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub teacher: TeacherConfig,
    pub kd: KdConfig,
    pub sparsity: SparsitySchedule,
    pub graft: GraftSchedule,
    pub optimizer: OptimizerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            strategy: Strategy::ProgKd,
            batch_size: 32,
            eval_every: 50,
            train_eval_size: 500,
            spd_train_size: 0,
            graft_while_prune: true,
            model: ModelConfig::default(),
            task: TaskSpec::default(),
            teacher: TeacherConfig::default(),
            kd: KdConfig::default(),
            sparsity: SparsitySchedule::default(),
            graft: GraftSchedule::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Last step of pruning: the ramp end, `t1` unless overridden.
    pub fn prune_end(&self) -> usize {
        self.sparsity.end_step.unwrap_or(self.graft.t1)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.graft.validate()?;
        self.kd.validate(self.model.num_layers)?;
        self.sparsity.targets(self.model.num_layers)?;
        self.teacher.optimizer.validate()?;
        two_phase_optimizers(&self.optimizer, self.graft.t2, self.graft.t3)?;
        if self.batch_size == 0 || self.teacher.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.eval_every == 0 || self.teacher.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        let end = self.prune_end();
        if end == 0 || end > self.graft.t3 {
            return Err(Error::Config(format!(
                "pruning must end within (0, {}], got {end}",
                self.graft.t3
            )));
        }
        Ok(())
    }

    /// Checks that the model can consume the task's inputs and labels.
    pub fn check_task(&self, data: &Dataset) -> Result<()> {
        if data.vocab_size > self.model.vocab_size {
            return Err(Error::Config(format!(
                "task vocabulary {} exceeds model vocab_size {}",
                data.vocab_size, self.model.vocab_size
            )));
        }
        if data.num_classes > self.model.num_classes {
            return Err(Error::Config(format!(
                "task has {} classes, model {}",
                data.num_classes, self.model.num_classes
            )));
        }
        if data.max_len() > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "task sequences reach {} tokens, model max_seq_len is {}",
                data.max_len(),
                self.model.max_seq_len
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig {
            strategy: Strategy::NoProgKd,
            ..RunConfig::default()
        };
        cfg.sparsity.target = 0.8;
        cfg.kd.lambda = Some(vec![1.0, 0.5, 0.5, 0.5, 2.0]);
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_sections_default_the_rest() {
        let cfg = RunConfig::from_toml_str(
            "strategy = \"prog_no_kd\"\n[graft]\np0 = 0.3\n[model]\nnum_layers = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.strategy, Strategy::ProgNoKd);
        assert_eq!(cfg.graft.p0, 0.3);
        assert_eq!(cfg.graft.t1, GraftSchedule::default().t1);
        assert_eq!(cfg.model.d_model, 64);
    }

    #[test]
    fn bad_configs_are_config_errors() {
        for text in [
            "unknown_key = 1",
            "[graft]\np0 = 0.0",
            "[graft]\nt1 = 500\nt2 = 400",
            "[sparsity]\ntarget = 1.0",
            "[kd]\nlambda = [1.0]",
            "[model]\nd_model = 10\nnum_heads = 3",
            "batch_size = 0",
            "[sparsity]\nend_step = 100000",
        ] {
            assert!(
                matches!(RunConfig::from_toml_str(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }
}
