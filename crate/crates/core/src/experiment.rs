//! Multi-seed adapter comparisons on synthetic data.
//!
//! Every adapter variant in a comparison trains on the identical split with
//! identical negative-sampling and shuffle streams (all forked from the
//! seed), so metric differences are attributable to the adapter. Results
//! aggregate as per-adapter means over seeds with relative improvement
//! against the no-adapter baseline.

use serde::Serialize;
use serde_json::json;

use crate::adapters::AdapterKind;
use crate::dataio::{split_811, synth_generate, DataSplit, FeatureMatrix, SplitMode, SyntheticSpec};
use crate::evaluator::{evaluate, MetricsTable};
use crate::numkit::SeededRng;
use crate::trainer::{train, Checkpoint, TrainConfig, TrainResult};
use crate::Result;

/// One synthetic dataset realization: interactions split three ways plus the
/// raw and ideal feature matrices aligned to it.
pub struct SyntheticRun {
    pub split: DataSplit,
    pub raw: FeatureMatrix,
    pub ideal: FeatureMatrix,
}

/// Generate and split one synthetic dataset.
pub fn synthesize(spec: &SyntheticSpec, seed: u64, mode: SplitMode) -> Result<SyntheticRun> {
    let mut rng = SeededRng::new(seed);
    let (set, raw, ideal) = synth_generate(spec, &mut rng)?;
    let split = split_811(&set, seed, mode);
    Ok(SyntheticRun { split, raw, ideal })
}

/// What `compare` runs per seed and adapter.
#[derive(Debug, Clone)]
pub struct CompareConfig {
    pub synth: SyntheticSpec,
    /// Template config; `seed` and `adapter` are overridden per run.
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub adapters: Vec<AdapterKind>,
    pub split_mode: SplitMode,
}

/// One trained variant.
pub struct CompareRun {
    pub adapter: AdapterKind,
    pub metrics: MetricsTable,
    pub checkpoint: Checkpoint,
    pub epochs_run: usize,
    pub mean_epoch_secs: f64,
}

/// All variants for one seed.
pub struct SeedResult {
    pub seed: u64,
    pub runs: Vec<CompareRun>,
}

/// The full comparison grid.
pub struct Comparison {
    pub ks: Vec<usize>,
    pub adapters: Vec<AdapterKind>,
    pub seeds: Vec<SeedResult>,
}

/// Train every adapter variant on every seed's dataset.
pub fn compare_adapters(cfg: &CompareConfig) -> Result<Comparison> {
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let data = synthesize(&cfg.synth, seed, cfg.split_mode)?;
        let mut runs = Vec::with_capacity(cfg.adapters.len());
        for &adapter in &cfg.adapters {
            let mut train_cfg = cfg.train.clone();
            train_cfg.seed = seed;
            train_cfg.adapter = adapter;
            let result = train(&data.split, &[&data.raw], &train_cfg)?;
            let model = result.best.to_model()?;
            let metrics = evaluate(&model, &[&data.raw], &data.split, &train_cfg.eval_ks)?;
            let epochs_run = result.reports.len();
            let mean_epoch_secs = result
                .reports
                .iter()
                .map(|r| r.wall_secs)
                .sum::<f64>()
                / epochs_run as f64;
            runs.push(CompareRun {
                adapter,
                metrics,
                checkpoint: result.best,
                epochs_run,
                mean_epoch_secs,
            });
        }
        seeds.push(SeedResult { seed, runs });
    }
    Ok(Comparison {
        ks: cfg.train.eval_ks.clone(),
        adapters: cfg.adapters.clone(),
        seeds,
    })
}

/// Train one variant on one pre-built dataset (used by the end-to-end
/// acceptance path, which also needs the ideal features afterwards).
pub fn train_variant(
    data: &SyntheticRun,
    template: &TrainConfig,
    adapter: AdapterKind,
    seed: u64,
) -> Result<(TrainResult, MetricsTable)> {
    let mut cfg = template.clone();
    cfg.seed = seed;
    cfg.adapter = adapter;
    let result = train(&data.split, &[&data.raw], &cfg)?;
    let model = result.best.to_model()?;
    let metrics = evaluate(&model, &[&data.raw], &data.split, &cfg.eval_ks)?;
    Ok((result, metrics))
}

impl Comparison {
    /// Mean (recall, ndcg) at K over seeds for one adapter.
    pub fn mean_at(&self, adapter: AdapterKind, k: usize) -> Option<(f64, f64)> {
        let mut recall = 0.0;
        let mut ndcg = 0.0;
        let mut n = 0usize;
        for seed in &self.seeds {
            for run in &seed.runs {
                if run.adapter == adapter {
                    let (r, d) = run.metrics.at(k)?;
                    recall += r;
                    ndcg += d;
                    n += 1;
                }
            }
        }
        if n == 0 {
            return None;
        }
        Some((recall / n as f64, ndcg / n as f64))
    }

    /// Per-seed metric values at K for one adapter, in seed order.
    pub fn per_seed_at(&self, adapter: AdapterKind, k: usize) -> Vec<(f64, f64)> {
        self.seeds
            .iter()
            .flat_map(|s| {
                s.runs
                    .iter()
                    .filter(|r| r.adapter == adapter)
                    .filter_map(|r| r.metrics.at(k))
            })
            .collect()
    }

    /// Mean-over-seeds table with an improvement line under each variant,
    /// relative to the `none` baseline.
    pub fn render_table(&self) -> String {
        let mut out = String::from("adapter   ");
        for &k in &self.ks {
            out.push_str(&format!("R@{:<9} N@{:<9} ", k, k));
        }
        out.push('\n');
        let baseline: Vec<Option<(f64, f64)>> = self
            .ks
            .iter()
            .map(|&k| self.mean_at(AdapterKind::None, k))
            .collect();
        for &adapter in &self.adapters {
            out.push_str(&format!("{:<9} ", adapter.to_string()));
            for &k in &self.ks {
                let (r, n) = self.mean_at(adapter, k).unwrap_or((f64::NAN, f64::NAN));
                out.push_str(&format!("{:<11.6} {:<11.6} ", r, n));
            }
            out.push('\n');
            if adapter != AdapterKind::None {
                out.push_str("  improve ");
                for (i, &k) in self.ks.iter().enumerate() {
                    let (r, n) = self.mean_at(adapter, k).unwrap_or((f64::NAN, f64::NAN));
                    let (ir, in_) = match baseline[i] {
                        Some((br, bn)) => (
                            format_improvement(br, r),
                            format_improvement(bn, n),
                        ),
                        None => ("n/a".into(), "n/a".into()),
                    };
                    out.push_str(&format!("{:<11} {:<11} ", ir, in_));
                }
                out.push('\n');
            }
        }
        out
    }

    /// Machine-readable summary: means, per-seed values, improvements.
    pub fn to_json(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct Row {
            adapter: String,
            k: usize,
            mean_recall: f64,
            mean_ndcg: f64,
            recall_improvement_pct: Option<f64>,
            ndcg_improvement_pct: Option<f64>,
            per_seed_recall: Vec<f64>,
            per_seed_ndcg: Vec<f64>,
        }
        let mut rows = Vec::new();
        for &adapter in &self.adapters {
            for &k in &self.ks {
                let (mr, mn) = self.mean_at(adapter, k).unwrap_or((f64::NAN, f64::NAN));
                let base = self.mean_at(AdapterKind::None, k);
                let (ri, ni) = if adapter == AdapterKind::None {
                    (None, None)
                } else {
                    match base {
                        Some((br, bn)) => {
                            (relative_improvement(br, mr), relative_improvement(bn, mn))
                        }
                        None => (None, None),
                    }
                };
                let per_seed = self.per_seed_at(adapter, k);
                rows.push(Row {
                    adapter: adapter.to_string(),
                    k,
                    mean_recall: mr,
                    mean_ndcg: mn,
                    recall_improvement_pct: ri,
                    ndcg_improvement_pct: ni,
                    per_seed_recall: per_seed.iter().map(|&(r, _)| r).collect(),
                    per_seed_ndcg: per_seed.iter().map(|&(_, n)| n).collect(),
                });
            }
        }
        json!({
            "seeds": self.seeds.iter().map(|s| s.seed).collect::<Vec<_>>(),
            "rows": rows,
        })
    }
}

/// `(variant - baseline) / baseline`, as a percentage; `None` when the
/// baseline is zero.
pub fn relative_improvement(baseline: f64, variant: f64) -> Option<f64> {
    if baseline == 0.0 {
        None
    } else {
        Some((variant - baseline) / baseline * 100.0)
    }
}

fn format_improvement(baseline: f64, variant: f64) -> String {
    match relative_improvement(baseline, variant) {
        Some(pct) => format!("{pct:+.2}%"),
        None => "n/a".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn improvement_percentages_match_hand_values() {
        assert_eq!(format_improvement(0.05, 0.05), "+0.00%");
        assert_eq!(format_improvement(0.0320, 0.0391), "+22.19%");
        assert_eq!(format_improvement(0.0298, 0.0319), "+7.05%");
        assert_eq!(format_improvement(0.0, 0.1), "n/a");
        assert_eq!(format_improvement(0.04, 0.03), "-25.00%");
    }

    #[test]
    fn small_comparison_grid_runs() {
        let cfg = CompareConfig {
            synth: SyntheticSpec {
                users: 30,
                items: 40,
                latent_dim: 3,
                feature_dim: 8,
                interactions_per_user: 10,
                drift_prob: 0.3,
                omit_prob: 0.3,
                omit_fraction: 0.5,
                noise_scale: 0.05,
            },
            train: TrainConfig {
                dim: 8,
                d_a_mult: 2.0,
                dropout: 0.0,
                max_epochs: 3,
                patience: 3,
                batch_size: 128,
                lora_rank: 2,
                eval_ks: vec![10, 20],
                ..TrainConfig::default()
            },
            seeds: vec![1, 2],
            adapters: vec![AdapterKind::None, AdapterKind::Befa],
            split_mode: SplitMode::PerUser,
        };
        let comparison = compare_adapters(&cfg).unwrap();
        assert_eq!(comparison.seeds.len(), 2);
        assert_eq!(comparison.seeds[0].runs.len(), 2);
        assert!(comparison.mean_at(AdapterKind::Befa, 20).is_some());
        let table = comparison.render_table();
        assert!(table.contains("none"));
        assert!(table.contains("befa"));
        assert!(table.contains("improve"));
        let j = comparison.to_json();
        assert_eq!(j["seeds"].as_array().unwrap().len(), 2);
    }
}
