use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::DatasetRecipe;
use crate::error::{io_err, Error, Result};
use crate::model::Seq2SeqConfig;
use crate::synth::{SyntheticTask, SyntheticTaskSpec};
use crate::textproc::Bitext;
use crate::train::TrainConfig;

/// Where the train/valid/test corpora come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskSource {
    Synthetic {
        spec: SyntheticTaskSpec,
        train: usize,
        valid: usize,
        test: usize,
    },
    /// `<dir>/<name>.src` / `<dir>/<name>.trg` for each split.
    Corpus {
        dir: PathBuf,
        train: String,
        valid: String,
        test: String,
    },
}

pub struct TaskData {
    pub train: Bitext,
    pub valid: Bitext,
    pub test: Bitext,
    pub oracle: Option<SyntheticTask>,
}

impl TaskSource {
    pub fn load(&self) -> Result<TaskData> {
        match self {
            TaskSource::Synthetic {
                spec,
                train,
                valid,
                test,
            } => {
                let task = SyntheticTask::new(spec.clone())?;
                let c = task.generate_bitext(*train, *valid, *test);
                Ok(TaskData {
                    train: Bitext {
                        name: "base".into(),
                        ..c.train
                    },
                    valid: c.valid,
                    test: c.test,
                    oracle: Some(task),
                })
            }
            TaskSource::Corpus {
                dir,
                train,
                valid,
                test,
            } => Ok(TaskData {
                train: Bitext {
                    name: "base".into(),
                    ..Bitext::load(dir, train)?
                },
                valid: Bitext::load(dir, valid)?,
                test: Bitext::load(dir, test)?,
                oracle: None,
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudentSize {
    Small,
    Large,
}

impl StudentSize {
    pub fn label(self) -> &'static str {
        match self {
            StudentSize::Small => "small",
            StudentSize::Large => "large",
        }
    }
}

/// One experiment: a student size trained on one recipe with or without
/// dropout, repeated over trial seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub task: TaskSource,
    /// Teacher architecture, also used for LARGE students.
    pub large: Seq2SeqConfig,
    pub small: Seq2SeqConfig,
    pub student: StudentSize,
    pub recipe: DatasetRecipe,
    /// Dropout on sets both RNN dropout rates to 0.1, off sets them to 0.
    pub dropout: bool,
    /// Student budget in checkpoints.
    pub budget: usize,
    pub teacher_budget: usize,
    pub trials: Vec<u64>,
    pub teacher_seed: u64,
    /// Beam for test decoding and distillation.
    pub beam: usize,
    /// Optimizer and checkpoint settings; `max_checkpoints` and `seed` are
    /// set per run.
    pub train: TrainConfig,
    /// Also rerun the SMALL cells with `long_budget` checkpoints.
    pub long_budget: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskSource::Synthetic {
                spec: SyntheticTaskSpec::default(),
                train: 20000,
                valid: 1000,
                test: 1000,
            },
            large: Seq2SeqConfig::large(),
            small: Seq2SeqConfig::small(),
            student: StudentSize::Small,
            recipe: "base".parse().expect("valid recipe"),
            dropout: true,
            budget: 30,
            teacher_budget: 100,
            trials: vec![1, 2, 3],
            teacher_seed: 1,
            beam: 5,
            train: TrainConfig::default(),
            long_budget: None,
        }
    }
}

pub const DROPOUT_ON: f64 = 0.1;

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(&std::fs::read_to_string(path).map_err(io_err(path))?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.large.validate()?;
        self.small.validate()?;
        self.train.validate()?;
        if self.trials.is_empty() || self.budget == 0 || self.teacher_budget == 0 || self.beam == 0
        {
            return Err(Error::Config(
                "trials, budgets and beam must be non-empty/positive".into(),
            ));
        }
        Ok(())
    }

    /// Architecture for a student size with the dropout setting applied.
    pub fn student_model(&self, size: StudentSize, dropout: bool) -> Seq2SeqConfig {
        let base = match size {
            StudentSize::Small => self.small.clone(),
            StudentSize::Large => self.large.clone(),
        };
        base.with_dropout(if dropout { DROPOUT_ON } else { 0.0 })
    }

    pub fn cell(&self) -> Cell {
        Cell {
            recipe: self.recipe.clone(),
            dropout: self.dropout,
            student: self.student,
            budget: self.budget,
        }
    }
}

/// One row of the results table.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub recipe: DatasetRecipe,
    pub dropout: bool,
    pub student: StudentSize,
    pub budget: usize,
}

impl Cell {
    /// Directory-safe identifier, e.g. `base+kd.small.dropout.30`.
    pub fn id(&self) -> String {
        format!(
            "{}.{}.{}.{}",
            self.recipe.name(),
            self.student.label(),
            if self.dropout { "dropout" } else { "nodropout" },
            self.budget
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropout_switch() {
        let cfg = ExperimentConfig::default();
        let off = cfg.student_model(StudentSize::Small, false);
        assert_eq!((off.rnn_dropout_inputs, off.rnn_dropout_states), (0.0, 0.0));
        let on = cfg.student_model(StudentSize::Large, true);
        assert_eq!((on.rnn_dropout_inputs, on.rnn_dropout_states), (0.1, 0.1));
    }

    #[test]
    fn json_round_trip() {
        let cfg = ExperimentConfig {
            recipe: "base+kd+bt".parse().unwrap(),
            ..ExperimentConfig::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(
            serde_json::from_str::<ExperimentConfig>(&text).unwrap(),
            cfg
        );
        let partial: ExperimentConfig =
            serde_json::from_str(r#"{"recipe": "base+kd", "budget": 3}"#).unwrap();
        assert_eq!(partial.budget, 3);
        assert_eq!(partial.cell().id(), "base+kd.small.dropout.3");
    }
}
