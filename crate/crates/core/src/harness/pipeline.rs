use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Cell, ExperimentConfig, StudentSize, TaskData, DROPOUT_ON};
use crate::decode::DecodeConfig;
use crate::distill::{self, Component, DatasetRecipe, Derived, RecipeInputs};
use crate::error::{io_err, Error, Result};
use crate::eval::{corpus_bleu, TrialSummary};
use crate::model::Seq2SeqConfig;
use crate::textproc::{corpus_stats, Bitext, Codec, CorpusStats};
use crate::train::{metrics_tsv, train_loop, MetricsRow, TrainOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    pub test_bleu: f64,
    /// Perplexity of the selected checkpoint on the student's own training data.
    pub train_ppl: f64,
    pub best_checkpoint: usize,
    pub params: usize,
    pub metrics: Vec<MetricsRow>,
}

impl TrialResult {
    pub fn best_valid_bleu(&self) -> f64 {
        self.metrics
            .iter()
            .map(|m| m.valid_bleu)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Aggregated results for one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub dropout: bool,
    pub student: StudentSize,
    pub budget: usize,
    pub trials: Vec<TrialResult>,
    pub mean_bleu: f64,
    pub mean_train_ppl: f64,
    /// Set when a trial failed; the row then only holds the trials before it.
    pub failed_seed: Option<u64>,
    pub error: Option<String>,
}

impl ResultRow {
    pub fn cell(&self) -> Cell {
        Cell {
            recipe: self.dataset.parse().expect("row names come from recipes"),
            dropout: self.dropout,
            student: self.student,
            budget: self.budget,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.failed_seed.is_none()
    }

    pub fn summary(&self) -> Option<TrialSummary> {
        (!self.trials.is_empty()).then(|| TrialSummary {
            trials: self.trials.iter().map(|t| (t.seed, t.test_bleu)).collect(),
            mean: self.mean_bleu,
        })
    }
}

/// Orchestrates teachers, derived datasets and student runs for one task.
/// Teachers and dataset components are built on first use and cached.
pub struct Pipeline {
    pub config: ExperimentConfig,
    pub data: TaskData,
    out_dir: Option<PathBuf>,
    teacher: Option<TrainOutcome>,
    reverse: Option<TrainOutcome>,
    parts: BTreeMap<Component, Derived>,
    stats: BTreeMap<String, CorpusStats>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl Pipeline {
    pub fn new(config: ExperimentConfig, out_dir: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let data = config.task.load()?;
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            if let Some(oracle) = &data.oracle {
                oracle.save(&dir.join("oracle.json"))?;
            }
            let path = dir.join("experiment.json");
            std::fs::write(&path, serde_json::to_string_pretty(&config)?).map_err(io_err(&path))?;
        }
        let mut stats = BTreeMap::new();
        stats.insert("base".to_string(), corpus_stats(&data.train));
        Ok(Self {
            config,
            data,
            out_dir: out_dir.map(Path::to_path_buf),
            teacher: None,
            reverse: None,
            parts: BTreeMap::new(),
            stats,
        })
    }

    /// Uses already trained teachers instead of training them.
    pub fn with_teachers(
        mut self,
        teacher: Option<TrainOutcome>,
        reverse: Option<TrainOutcome>,
    ) -> Self {
        self.teacher = teacher.or(self.teacher);
        self.reverse = reverse.or(self.reverse);
        self
    }

    fn subdir(&self, parts: &[&str]) -> Option<PathBuf> {
        self.out_dir
            .as_ref()
            .map(|d| parts.iter().fold(d.clone(), |p, s| p.join(s)))
    }

    fn teacher_model(&self) -> Seq2SeqConfig {
        self.config.large.clone().with_dropout(DROPOUT_ON)
    }

    fn train_teacher(&self, reverse: bool) -> Result<TrainOutcome> {
        let (train, valid) = if reverse {
            (self.data.train.swapped(), self.data.valid.swapped())
        } else {
            (self.data.train.clone(), self.data.valid.clone())
        };
        let model = self.teacher_model();
        let codec = Codec::fit(&train, model.bpe_merges, self.config.train.min_count)?;
        let tc = crate::train::TrainConfig {
            max_checkpoints: self.config.teacher_budget,
            seed: self.config.teacher_seed,
            ..self.config.train.clone()
        };
        let dir = self.subdir(&[if reverse { "teacher.rev" } else { "teacher" }]);
        train_loop(&model, &tc, &codec, &train, &valid, dir.as_deref())
    }

    pub fn teacher(&mut self) -> Result<&TrainOutcome> {
        if self.teacher.is_none() {
            self.teacher = Some(self.train_teacher(false)?);
        }
        Ok(self.teacher.as_ref().expect("just set"))
    }

    pub fn reverse_teacher(&mut self) -> Result<&TrainOutcome> {
        if self.reverse.is_none() {
            self.reverse = Some(self.train_teacher(true)?);
        }
        Ok(self.reverse.as_ref().expect("just set"))
    }

    /// One dataset component, built from the base training set.
    pub fn component(&mut self, c: Component) -> Result<&Derived> {
        if !self.parts.contains_key(&c) {
            let recipe = DatasetRecipe::new(vec![c])?;
            if recipe.needs_teacher() {
                self.teacher()?;
            }
            if recipe.needs_reverse_teacher() {
                self.reverse_teacher()?;
            }
            let inputs = RecipeInputs {
                base: &self.data.train,
                teacher: self.teacher.as_ref().map(|t| &t.checkpoint),
                reverse_teacher: self.reverse.as_ref().map(|t| &t.checkpoint),
                beam: self.config.beam,
            };
            let (_, mut built) = distill::build_recipe(&recipe, &inputs)?;
            let derived = built.pop().expect("one component");
            if derived.failures > 0 {
                log::warn!(
                    "{}: {} sources produced no pair",
                    derived.bitext.name,
                    derived.failures
                );
            }
            self.parts.insert(c, derived);
        }
        Ok(&self.parts[&c])
    }

    /// The concatenated training set for a recipe.
    pub fn dataset(&mut self, recipe: &DatasetRecipe) -> Result<Bitext> {
        for &c in &recipe.components {
            self.component(c)?;
        }
        let parts: Vec<&Derived> = recipe.components.iter().map(|c| &self.parts[c]).collect();
        let joined =
            distill::concat_datasets(&parts.iter().map(|d| &d.bitext).collect::<Vec<_>>())?;
        self.stats.insert(recipe.name(), corpus_stats(&joined));
        if let Some(dir) = self.subdir(&["datasets"]) {
            joined.save(&dir)?;
            let owned: Vec<Derived> = parts.into_iter().cloned().collect();
            let teacher = self.subdir(&["teacher"]);
            let reverse = self.subdir(&["teacher.rev"]);
            let m = distill::manifest(
                &joined,
                &owned,
                recipe
                    .needs_teacher()
                    .then_some(teacher)
                    .flatten()
                    .as_deref(),
                recipe
                    .needs_reverse_teacher()
                    .then_some(reverse)
                    .flatten()
                    .as_deref(),
                self.config.beam,
            );
            m.save(&dir.join(format!("{}.manifest.json", recipe.name())))?;
            let path = dir.join("stats.json");
            std::fs::write(&path, serde_json::to_string_pretty(&self.stats)?)
                .map_err(io_err(&path))?;
        }
        Ok(joined)
    }

    pub fn stats(&self) -> &BTreeMap<String, CorpusStats> {
        &self.stats
    }

    /// Trains one student and scores its best checkpoint on the test set.
    pub fn run_trial(
        &self,
        model: &Seq2SeqConfig,
        train: &Bitext,
        seed: u64,
        budget: usize,
        dir: Option<&Path>,
    ) -> Result<TrialResult> {
        let codec = Codec::fit(train, model.bpe_merges, self.config.train.min_count)?;
        let tc = crate::train::TrainConfig {
            max_checkpoints: budget,
            seed,
            ..self.config.train.clone()
        };
        let out = train_loop(model, &tc, &codec, train, &self.data.valid, dir)?;
        let decode = DecodeConfig {
            beam_size: self.config.beam,
            ..DecodeConfig::default()
        };
        let hyps = out
            .checkpoint
            .translate(&self.data.test.sources(), &decode)?;
        let test_bleu = corpus_bleu(&hyps.best(), &self.data.test.targets())?.bleu;
        let train_ppl = out.checkpoint.perplexity(train)?;
        Ok(TrialResult {
            seed,
            test_bleu,
            train_ppl,
            best_checkpoint: out.checkpoint.meta.best_checkpoint,
            params: out.checkpoint.params.count(),
            metrics: out.metrics,
        })
    }

    /// Runs every trial seed of a cell. Failures are recorded in the row.
    pub fn run_cell(&mut self, cell: &Cell) -> ResultRow {
        let mut row = ResultRow {
            dataset: cell.recipe.name(),
            dropout: cell.dropout,
            student: cell.student,
            budget: cell.budget,
            trials: Vec::new(),
            mean_bleu: f64::NAN,
            mean_train_ppl: f64::NAN,
            failed_seed: None,
            error: None,
        };
        let train = match self.dataset(&cell.recipe) {
            Ok(t) => t,
            Err(e) => {
                row.failed_seed = self.config.trials.first().copied();
                row.error = Some(e.to_string());
                return row;
            }
        };
        let model = self.config.student_model(cell.student, cell.dropout);
        let cell_dir = self.subdir(&["cells", &cell.id()]);
        let this = &*self;
        let results: Vec<(u64, Result<TrialResult>)> = self
            .config
            .trials
            .par_iter()
            .map(|&seed| {
                let dir = cell_dir.as_ref().map(|d| d.join(format!("trial-{seed}")));
                (
                    seed,
                    this.run_trial(&model, &train, seed, cell.budget, dir.as_deref()),
                )
            })
            .collect();
        for (seed, r) in results {
            match r {
                Ok(t) => row.trials.push(t),
                Err(e) => {
                    log::error!("cell {} seed {seed}: {e}", cell.id());
                    row.failed_seed.get_or_insert(seed);
                    row.error.get_or_insert(e.to_string());
                }
            }
        }
        row.mean_bleu = mean(row.trials.iter().map(|t| t.test_bleu));
        row.mean_train_ppl = mean(row.trials.iter().map(|t| t.train_ppl));
        if let Some(dir) = cell_dir {
            if let Err(e) = save_row(&dir, &row) {
                log::error!("writing results for {}: {e}", cell.id());
            }
        }
        row
    }
}

fn save_row(dir: &Path, row: &ResultRow) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join("row.json");
    std::fs::write(&path, serde_json::to_string_pretty(row)?).map_err(io_err(&path))?;
    for t in &row.trials {
        let path = dir.join(format!("trial-{}.metrics.tsv", t.seed));
        std::fs::write(&path, metrics_tsv(&t.metrics, true)).map_err(io_err(&path))?;
    }
    Ok(())
}

/// Runs one experiment cell, training whatever teachers its recipe needs.
pub fn run_experiment(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ResultRow> {
    let mut pipeline = Pipeline::new(config.clone(), out_dir)?;
    let row = pipeline.run_cell(&config.cell());
    if let Some(e) = &row.error {
        if row.trials.is_empty() {
            return Err(Error::Config(format!(
                "experiment {} failed: {e}",
                config.cell().id()
            )));
        }
    }
    Ok(row)
}

/// Recipes in table order.
pub const TABLE_RECIPES: [&str; 5] = ["base", "kd", "base+kd", "base+kd+bt", "base+best-2"];

/// Every recipe for SMALL students with and without dropout, and for LARGE
/// students with dropout: 15 cells.
pub fn table_cells(budget: usize) -> Vec<Cell> {
    let mut cells = Vec::new();
    for (student, dropout) in [
        (StudentSize::Small, true),
        (StudentSize::Small, false),
        (StudentSize::Large, true),
    ] {
        for r in TABLE_RECIPES {
            cells.push(Cell {
                recipe: r.parse().expect("valid recipe"),
                dropout,
                student,
                budget,
            });
        }
    }
    cells
}

#[derive(Clone, Debug)]
pub struct PipelineReport {
    pub rows: Vec<ResultRow>,
    pub stats: BTreeMap<String, CorpusStats>,
}

impl PipelineReport {
    pub fn all_complete(&self) -> bool {
        self.rows.iter().all(ResultRow::is_complete)
    }
}

/// Trains both teachers, builds every dataset and runs all table cells, plus
/// the SMALL cells again at the long budget when configured. Writes the
/// report files when `out_dir` is given.
pub fn run_pipeline(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<PipelineReport> {
    let mut pipeline = Pipeline::new(config.clone(), out_dir)?;
    pipeline.teacher()?;
    pipeline.reverse_teacher()?;
    let mut cells = table_cells(config.budget);
    if let Some(long) = config.long_budget {
        cells.extend(
            table_cells(long)
                .into_iter()
                .filter(|c| c.student == StudentSize::Small),
        );
    }
    let rows: Vec<ResultRow> = cells.iter().map(|c| pipeline.run_cell(c)).collect();
    let report = PipelineReport {
        rows,
        stats: pipeline.stats().clone(),
    };
    if let Some(dir) = out_dir {
        super::report::write_report(
            dir,
            &super::report::render_report(&report.rows, &report.stats, config.budget),
        )?;
    }
    Ok(report)
}
