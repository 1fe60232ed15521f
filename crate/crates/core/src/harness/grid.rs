use std::fmt::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::DROPOUT_ON;
use super::pipeline::Pipeline;
use crate::distill::DatasetRecipe;
use crate::error::{io_err, Result};
use crate::model::{count_params, Seq2SeqConfig};
use crate::textproc::Codec;
use crate::train::{train_loop, TrainConfig};

/// BPE merge counts crossed with model widths (embedding = hidden).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub bpe: Vec<usize>,
    pub sizes: Vec<usize>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            bpe: vec![10000, 750, 500],
            sizes: vec![64, 128, 256],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub variant: String,
    pub bpe: usize,
    pub size: usize,
    pub params: usize,
    /// Best validation BLEU over the run, `None` if training failed.
    pub valid_bleu: Option<f64>,
    pub error: Option<String>,
}

pub const GRID_HEADER: &str = "variant\tbpe\tsize\tparams\tvalid_bleu";

pub fn grid_tsv(points: &[GridPoint]) -> String {
    let mut out = format!("{GRID_HEADER}\n");
    for p in points {
        let bleu = p
            .valid_bleu
            .map_or_else(|| "-".to_string(), |b| format!("{b:.2}"));
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            p.variant, p.bpe, p.size, p.params, bleu
        );
    }
    out
}

fn grid_model(base: &Seq2SeqConfig, bpe: usize, size: usize) -> Seq2SeqConfig {
    Seq2SeqConfig {
        bpe_merges: bpe,
        embed_size: size,
        hidden_size: size,
        ..base.clone()
    }
    .with_dropout(DROPOUT_ON)
}

impl Pipeline {
    /// Trains one model per (variant, bpe, size) with the first trial seed and
    /// records its best validation BLEU. Writes `grid.tsv` to `out_dir`.
    pub fn grid_search(
        &mut self,
        grid: &GridSpec,
        variants: &[DatasetRecipe],
        out_dir: Option<&Path>,
    ) -> Result<Vec<GridPoint>> {
        let mut jobs = Vec::new();
        for v in variants {
            let data = self.dataset(v)?;
            for &bpe in &grid.bpe {
                for &size in &grid.sizes {
                    jobs.push((v.name(), data.clone(), bpe, size));
                }
            }
        }
        let seed = self.config.trials[0];
        let tc = TrainConfig {
            max_checkpoints: self.config.budget,
            seed,
            ..self.config.train.clone()
        };
        let this = &*self;
        let points = jobs
            .into_par_iter()
            .map(|(variant, data, bpe, size)| {
                let model = grid_model(&this.config.small, bpe, size);
                let run = || -> Result<(usize, f64)> {
                    let codec = Codec::fit(&data, bpe, tc.min_count)?;
                    let params = count_params(&model, codec.src_vocab.len(), codec.trg_vocab.len());
                    let out = train_loop(&model, &tc, &codec, &data, &this.data.valid, None)?;
                    Ok((
                        params,
                        out.metrics
                            .iter()
                            .map(|m| m.valid_bleu)
                            .fold(f64::NEG_INFINITY, f64::max),
                    ))
                };
                match run() {
                    Ok((params, bleu)) => GridPoint {
                        variant,
                        bpe,
                        size,
                        params,
                        valid_bleu: Some(bleu),
                        error: None,
                    },
                    Err(e) => {
                        log::error!("grid point {variant} bpe={bpe} size={size}: {e}");
                        GridPoint {
                            variant,
                            bpe,
                            size,
                            params: 0,
                            valid_bleu: None,
                            error: Some(e.to_string()),
                        }
                    }
                }
            })
            .collect::<Vec<_>>();
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join("grid.tsv");
            std::fs::write(&path, grid_tsv(&points)).map_err(io_err(&path))?;
        }
        Ok(points)
    }
}
