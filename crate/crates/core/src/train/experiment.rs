//! Single runs and the component ablation matrix.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Toggles, TrainConfig};
use super::evaluate::{evaluate, MetricsReport};
use super::metrics::{paired_t_test, stratified_kfold, TTest};
use super::trainer::Trainer;
use crate::data::{corpus_stats, ImageSet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Fills unset normalization constants from the training images.
pub fn resolve_normalization(cfg: &mut TrainConfig, train: &ImageSet) -> Result<()> {
    if cfg.preprocess.normalize_mean.is_none() || cfg.preprocess.normalize_std.is_none() {
        let (m, s) = corpus_stats(&train.images)?;
        cfg.preprocess.normalize_mean.get_or_insert(m);
        cfg.preprocess.normalize_std.get_or_insert(s);
    }
    Ok(())
}

pub struct RunOutput<T> {
    pub trainer: Trainer<T>,
    pub report: MetricsReport,
}

/// Trains on `train` and evaluates the EMA shadow on `eval`.
pub fn train_and_evaluate<T: Scalar>(
    mut cfg: TrainConfig,
    train: &ImageSet,
    eval: &ImageSet,
) -> Result<RunOutput<T>> {
    resolve_normalization(&mut cfg, train)?;
    let mut trainer = Trainer::<T>::new(cfg)?;
    trainer.fit(train)?;
    let snapshot = trainer.state.ema_snapshot();
    let mut report = evaluate(&snapshot, eval, &trainer.cfg.preprocess, &train.domains())?;
    report.loss_curves = trainer.epoch_means();
    report.config_hash = trainer.cfg.hash();
    report.seed = trainer.cfg.seed;
    Ok(RunOutput { trainer, report })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub toggles: Toggles,
}

impl AblationRow {
    pub fn new(name: &str, il: bool, fl: bool, cons: bool) -> Self {
        Self {
            name: name.into(),
            toggles: Toggles {
                use_srm_il: il,
                use_srm_fl: fl,
                use_l_ccr: cons,
                use_l_pdr: cons,
            },
        }
    }
}

/// The six component settings: base, +IL, +IL+FL, +FL, +IL+cons, full.
pub fn component_rows() -> Vec<AblationRow> {
    vec![
        AblationRow::new("base", false, false, false),
        AblationRow::new("srm_il", true, false, false),
        AblationRow::new("srm_il+srm_fl", true, true, false),
        AblationRow::new("srm_fl", false, true, false),
        AblationRow::new("srm_il+l_cons", true, false, true),
        AblationRow::new("full", true, true, true),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub base: TrainConfig,
    pub rows: Vec<AblationRow>,
    pub seeds: Vec<u64>,
    /// When set, each seed is expanded into `k` stratified folds and each
    /// replicate trains on the other `k − 1` folds.
    pub folds: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub name: String,
    pub toggles: Toggles,
    /// Unseen-domain macro AUC per replicate.
    pub ood: Vec<f64>,
    /// Training-domain macro AUC per replicate (when evaluated).
    pub id: Vec<f64>,
    pub ood_mean: f64,
    pub ood_std: f64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub row: String,
    pub reference: String,
    pub mean_diff: f64,
    pub test: TTest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub replicates: Vec<String>,
    pub rows: Vec<RowResult>,
    /// Every row against the first row, paired over replicates.
    pub comparisons: Vec<Comparison>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&RowResult> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| row | IL | FL | cons | unseen AUC | Δ vs ref | t | p |\n|---|---|---|---|---|---|---|---|\n");
        let mark = |b: bool| if b { "x" } else { "" };
        for r in &self.rows {
            let cmp = self.comparisons.iter().find(|c| c.row == r.name);
            let (d, t, p) = match cmp {
                Some(c) => (
                    format!("{:+.4}", c.mean_diff),
                    format!("{:.3}", c.test.t),
                    format!(
                        "{:.4}{}",
                        c.test.p,
                        if c.test.degenerate {
                            " (degenerate)"
                        } else {
                            ""
                        }
                    ),
                ),
                None => ("".into(), "".into(), "".into()),
            };
            s.push_str(&format!(
                "| {} | {} | {} | {} | {:.4} ± {:.4} | {d} | {t} | {p} |\n",
                r.name,
                mark(r.toggles.use_srm_il),
                mark(r.toggles.use_srm_fl),
                mark(r.toggles.use_l_ccr || r.toggles.use_l_pdr),
                r.ood_mean,
                r.ood_std,
            ));
        }
        s
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Runs every row over every replicate (in parallel) and compares each row
/// with the first one by a paired t-test over replicates.
pub fn ablate<T: Scalar>(
    cfg: &AblationConfig,
    train: &ImageSet,
    eval: &ImageSet,
) -> Result<AblationReport> {
    if cfg.rows.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::config(
            "ablation needs at least one row and one seed",
        ));
    }
    // (label, seed, training subset)
    let mut replicates: Vec<(String, u64, Vec<usize>)> = Vec::new();
    for &seed in &cfg.seeds {
        match cfg.folds {
            Some(k) => {
                let folds = stratified_kfold(&train.label_matrix(), k, seed)?;
                for f in 0..k {
                    replicates.push((format!("seed{seed}/fold{f}"), seed, folds.train_indices(f)));
                }
            }
            None => replicates.push((format!("seed{seed}"), seed, (0..train.len()).collect())),
        }
    }
    let jobs: Vec<(usize, usize)> = (0..cfg.rows.len())
        .flat_map(|r| (0..replicates.len()).map(move |k| (r, k)))
        .collect();
    let results: Vec<Result<(f64, Option<f64>)>> = jobs
        .par_iter()
        .map(|&(r, k)| {
            let (label, seed, subset) = &replicates[k];
            let mut c = cfg.base.clone();
            c.toggles = cfg.rows[r].toggles;
            c.seed = *seed;
            let out = train_and_evaluate::<T>(c, &train.subset(subset), eval)?;
            let ood = out
                .report
                .ood_mean_auc
                .or(out.report.mean_auc)
                .ok_or_else(|| Error::Other(format!("{label}: no evaluable class")))?;
            log::info!("{} {label}: unseen AUC {ood:.4}", cfg.rows[r].name);
            Ok((ood, out.report.id_mean_auc))
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let n = replicates.len();
    let rows: Vec<RowResult> = cfg
        .rows
        .iter()
        .enumerate()
        .map(|(r, row)| {
            let slice = &results[r * n..(r + 1) * n];
            let ood: Vec<f64> = slice.iter().map(|x| x.0).collect();
            let id: Vec<f64> = slice.iter().filter_map(|x| x.1).collect();
            let (ood_mean, ood_std) = mean_std(&ood);
            let mut c = cfg.base.clone();
            c.toggles = row.toggles;
            RowResult {
                name: row.name.clone(),
                toggles: row.toggles,
                ood,
                id,
                ood_mean,
                ood_std,
                config_hash: c.hash(),
            }
        })
        .collect();
    let mut comparisons = Vec::new();
    if n >= 2 {
        for r in &rows[1..] {
            comparisons.push(Comparison {
                row: r.name.clone(),
                reference: rows[0].name.clone(),
                mean_diff: r.ood_mean - rows[0].ood_mean,
                test: paired_t_test(&r.ood, &rows[0].ood)?,
            });
        }
    }
    Ok(AblationReport {
        replicates: replicates.into_iter().map(|r| r.0).collect(),
        rows,
        comparisons,
    })
}
