//! Run configuration: a JSON document mirroring the training options plus
//! dataset paths. Unknown keys are rejected up front. Command-line flags
//! override config values, which override defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use befa_core::adapters::AdapterKind;
use befa_core::dataio::SplitMode;
use befa_core::trainer::TrainConfig;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub adapter: Option<AdapterKind>,
    pub dim: Option<usize>,
    pub da_mult: Option<f64>,
    pub dropout: Option<f64>,
    pub learning_rate: Option<f64>,
    pub lambda_e: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub lora_rank: Option<usize>,
    pub lora_alpha: Option<f64>,
    pub eval_ks: Option<Vec<usize>>,
    pub kcore: Option<usize>,
    pub split_mode: Option<String>,
    pub deterministic: Option<bool>,
    pub stop_grad_behavior: Option<bool>,
    pub identity_proj: Option<bool>,
    pub raw_cosine: Option<bool>,
    pub data: Option<PathBuf>,
    pub interactions: Option<PathBuf>,
    /// Modality name -> feature file path.
    pub features: Option<BTreeMap<String, PathBuf>>,
    pub feature_dim: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("config {} failed schema validation", path.display()))?;
        Ok(cfg)
    }
}

/// Flag values shared by every subcommand; `None` means "not given".
#[derive(Debug, Clone, Default)]
pub struct CommonFlags {
    pub seed: Option<u64>,
    pub adapter: Option<AdapterKind>,
    pub dim: Option<usize>,
    pub da_mult: Option<f64>,
    pub dropout: Option<f64>,
    pub learning_rate: Option<f64>,
    pub lambda_e: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub lora_rank: Option<usize>,
    pub lora_alpha: Option<f64>,
    pub eval_ks: Option<Vec<usize>>,
    pub kcore: Option<usize>,
    pub split_mode: Option<SplitMode>,
    pub deterministic: bool,
    pub stop_grad_behavior: bool,
    pub identity_proj: bool,
    pub raw_cosine: bool,
    pub out: Option<PathBuf>,
}

/// Fully merged settings for one invocation.
#[derive(Debug, Clone)]
pub struct Settings {
    pub train: TrainConfig,
    pub kcore: usize,
    pub split_mode: SplitMode,
    pub raw_cosine: bool,
    pub data: Option<PathBuf>,
    pub interactions: Option<PathBuf>,
    pub features: Vec<(String, PathBuf)>,
    pub feature_dim: Option<usize>,
    pub out: Option<PathBuf>,
}

pub fn resolve(flags: &CommonFlags, file: &RunConfig) -> Result<Settings> {
    let d = TrainConfig::default();
    let split_mode = match (&flags.split_mode, &file.split_mode) {
        (Some(m), _) => *m,
        (None, Some(s)) => s.parse::<SplitMode>().map_err(anyhow::Error::from)?,
        (None, None) => SplitMode::PerUser,
    };
    let train = TrainConfig {
        dim: flags.dim.or(file.dim).unwrap_or(d.dim),
        d_a_mult: flags.da_mult.or(file.da_mult).unwrap_or(d.d_a_mult),
        dropout: flags.dropout.or(file.dropout).unwrap_or(d.dropout),
        learning_rate: flags
            .learning_rate
            .or(file.learning_rate)
            .unwrap_or(d.learning_rate),
        lambda_e: flags.lambda_e.or(file.lambda_e).unwrap_or(d.lambda_e),
        batch_size: flags.batch_size.or(file.batch_size).unwrap_or(d.batch_size),
        max_epochs: flags.max_epochs.or(file.max_epochs).unwrap_or(d.max_epochs),
        patience: flags.patience.or(file.patience).unwrap_or(d.patience),
        adapter: flags.adapter.or(file.adapter).unwrap_or(d.adapter),
        lora_rank: flags.lora_rank.or(file.lora_rank).unwrap_or(d.lora_rank),
        lora_alpha: flags.lora_alpha.or(file.lora_alpha).unwrap_or(d.lora_alpha),
        seed: flags.seed.or(file.seed).unwrap_or(d.seed),
        stop_grad_behavior: flags.stop_grad_behavior
            || file.stop_grad_behavior.unwrap_or(false),
        identity_proj: flags.identity_proj || file.identity_proj.unwrap_or(false),
        deterministic: flags.deterministic || file.deterministic.unwrap_or(false),
        eval_ks: flags
            .eval_ks
            .clone()
            .or_else(|| file.eval_ks.clone())
            .unwrap_or(d.eval_ks),
        exclude_validation: true,
    };
    Ok(Settings {
        train,
        kcore: flags.kcore.or(file.kcore).unwrap_or(10),
        split_mode,
        raw_cosine: flags.raw_cosine || file.raw_cosine.unwrap_or(false),
        data: file.data.clone(),
        interactions: file.interactions.clone(),
        features: file
            .features
            .clone()
            .map(|m| m.into_iter().collect())
            .unwrap_or_default(),
        feature_dim: file.feature_dim,
        out: flags.out.clone().or_else(|| file.out.clone()),
    })
}

/// Parse `--features` occurrences: `modality=path` or a bare path (modality
/// `visual`). Later occurrences append; duplicate modalities are an error.
pub fn parse_feature_args(args: &[String], base: &mut Vec<(String, PathBuf)>) -> Result<()> {
    for a in args {
        let (modality, path) = match a.split_once('=') {
            Some((m, p)) => (m.to_string(), PathBuf::from(p)),
            None => ("visual".to_string(), PathBuf::from(a)),
        };
        if base.iter().any(|(m, _)| *m == modality) {
            bail!("duplicate feature modality `{modality}`");
        }
        base.push((modality, path));
    }
    Ok(())
}

/// Parse `--seeds`: `a..b` (inclusive), a comma list, or one value.
pub fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = spec.split_once("..") {
        let lo: u64 = a.trim().parse().context("bad seed range start")?;
        let hi: u64 = b.trim().parse().context("bad seed range end")?;
        if hi < lo {
            bail!("seed range {spec} is empty");
        }
        return Ok((lo..=hi).collect());
    }
    spec.split(',')
        .map(|s| s.trim().parse::<u64>().with_context(|| format!("bad seed `{s}`")))
        .collect()
}
