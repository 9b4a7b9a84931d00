//! Subcommand implementations. Each computes everything first and writes
//! outputs last, so a failing run leaves no partial files behind.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde_json::json;

use befa_core::adapters::{AdapterKind, Mode};
use befa_core::attribution::{
    compute_heatmap, export_heatmap, load_bundle, AttributionBundle, HeatmapFormat,
};
use befa_core::dataio::{
    kcore_filter, load_features, load_interactions, load_split, peek_feature_dim, save_features_binary,
    save_interactions, save_split, split_811, DataSplit, FeatureMatrix, Fold, SyntheticSpec,
};
use befa_core::diagnostics::{adapter_deviation_report, render_comparison};

use befa_core::experiment::{compare_adapters, CompareConfig};
use befa_core::numkit::SeededRng;
use befa_core::trainer::{load_checkpoint, save_checkpoint, Checkpoint};

use crate::config::{parse_feature_args, parse_seeds, Settings};
use crate::SynthArgs;

fn require_out(settings: &Settings) -> Result<&Path> {
    settings
        .out
        .as_deref()
        .ok_or_else(|| anyhow!("this command writes files; pass --out <dir>"))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth_spec(args: &SynthArgs) -> SyntheticSpec {
    SyntheticSpec {
        users: args.users.unwrap_or(240),
        items: args.items.unwrap_or(320),
        latent_dim: args.latent_k.unwrap_or(6),
        feature_dim: args.feature_dim.unwrap_or(16),
        interactions_per_user: args.per_user.unwrap_or(12),
        drift_prob: args.drift.unwrap_or(0.3),
        omit_prob: args.omit.unwrap_or(0.3),
        omit_fraction: args.omit_frac.unwrap_or(0.5),
        noise_scale: args.noise.unwrap_or(0.05),
    }
}

pub fn synth(args: &SynthArgs, settings: &Settings) -> Result<()> {
    let out = require_out(settings)?;
    let spec = synth_spec(args);
    let seed = settings.train.seed;
    let mut rng = SeededRng::new(seed);
    let (set, raw, ideal) = befa_core::dataio::synth_generate(&spec, &mut rng)?;

    ensure_dir(out)?;
    save_interactions(&set, out.join("interactions.tsv"))?;
    save_features_binary(&raw, set.space(), out.join("features_raw.bin"))?;
    save_features_binary(&ideal, set.space(), out.join("features_ideal.bin"))?;
    write_json(
        &out.join("synth_meta.json"),
        &json!({
            "seed": seed,
            "users_requested": spec.users,
            "items_requested": spec.items,
            "users": set.n_users(),
            "items": set.n_items(),
            "records": set.len(),
            "latent_dim": spec.latent_dim,
            "feature_dim": spec.feature_dim,
            "interactions_per_user": spec.interactions_per_user,
            "drift_prob": spec.drift_prob,
            "omit_prob": spec.omit_prob,
            "omit_fraction": spec.omit_fraction,
            "noise_scale": spec.noise_scale,
        }),
    )?;
    println!(
        "synth: {} users x {} items, {} records -> {}",
        set.n_users(),
        set.n_items(),
        set.len(),
        out.display()
    );
    Ok(())
}

pub fn prep(interactions: Option<&Path>, settings: &Settings) -> Result<()> {
    let out = require_out(settings)?;
    let path = interactions
        .map(Path::to_path_buf)
        .or_else(|| settings.interactions.clone())
        .ok_or_else(|| anyhow!("pass --interactions <path> (or set it in the config)"))?;
    let set = load_interactions(&path)?;
    let filtered = if settings.kcore >= 1 {
        kcore_filter(&set, settings.kcore)?
    } else {
        set.clone()
    };
    let split = split_811(&filtered, settings.train.seed, settings.split_mode);

    ensure_dir(out)?;
    save_split(&split, out)?;
    write_json(
        &out.join("prep_meta.json"),
        &json!({
            "source": path.display().to_string(),
            "kcore": settings.kcore,
            "seed": settings.train.seed,
            "split_mode": match settings.split_mode {
                befa_core::dataio::SplitMode::PerUser => "per-user",
                befa_core::dataio::SplitMode::Global => "global",
            },
            "users_before": set.n_users(),
            "items_before": set.n_items(),
            "records_before": set.len(),
            "users": filtered.n_users(),
            "items": filtered.n_items(),
            "train_records": split.fold(Fold::Train).len(),
            "validation_records": split.fold(Fold::Validation).len(),
            "test_records": split.fold(Fold::Test).len(),
        }),
    )?;
    println!(
        "prep: {} -> {} users, {} items after {}-core; folds {}/{}/{} -> {}",
        path.display(),
        filtered.n_users(),
        filtered.n_items(),
        settings.kcore,
        split.fold(Fold::Train).len(),
        split.fold(Fold::Validation).len(),
        split.fold(Fold::Test).len(),
        out.display()
    );
    Ok(())
}

/// Resolve the split directory and load features for it.
fn load_dataset(
    data: Option<&Path>,
    feature_args: &[String],
    feature_dim: Option<usize>,
    settings: &Settings,
    dims_from_checkpoint: Option<&Checkpoint>,
) -> Result<(DataSplit, Vec<FeatureMatrix>)> {
    let dir = data
        .map(Path::to_path_buf)
        .or_else(|| settings.data.clone())
        .ok_or_else(|| anyhow!("pass --data <dir> (or set it in the config)"))?;
    let split = load_split(&dir, settings.train.seed)?;

    let mut specs: Vec<(String, PathBuf)> = Vec::new();
    if feature_args.is_empty() {
        specs = settings.features.clone();
    } else {
        parse_feature_args(feature_args, &mut specs)?;
    }

    let mut features = Vec::with_capacity(specs.len());
    for (modality, path) in &specs {
        let expected = match feature_dim.or(settings.feature_dim) {
            Some(d) => d,
            None => match dims_from_checkpoint {
                Some(ckpt) => checkpoint_feature_dim(ckpt, modality)
                    .unwrap_or(peek_feature_dim(path)?),
                None => peek_feature_dim(path)?,
            },
        };
        features.push(load_features(path, modality.clone(), expected, split.space())?);
    }
    Ok((split, features))
}

fn checkpoint_feature_dim(ckpt: &Checkpoint, modality: &str) -> Option<usize> {
    ckpt.tensors
        .iter()
        .find(|t| t.name == format!("fusion.{modality}"))
        .and_then(|t| t.shape.get(1).copied())
}

pub fn train_cmd_output(
    result: &befa_core::trainer::TrainResult,
    metrics: &befa_core::evaluator::MetricsTable,
    out: &Path,
) -> Result<()> {
    ensure_dir(out)?;
    save_checkpoint(&result.best, out.join("checkpoint.befc"))?;

    let mut epochs = String::new();
    for r in &result.reports {
        let line = json!({
            "epoch": r.epoch,
            "train_loss": r.train_loss,
            "val_recall20": r.val_recall20,
            "val_ndcg20": r.val_ndcg20,
        });
        epochs.push_str(&serde_json::to_string(&line)?);
        epochs.push('\n');
    }
    fs::write(out.join("epochs.jsonl"), epochs)?;

    // Wall-clock data varies run to run, so it lives apart from the
    // deterministic outputs.
    let timing: Vec<serde_json::Value> = result
        .reports
        .iter()
        .map(|r| json!({"epoch": r.epoch, "step_secs": r.step_secs, "wall_secs": r.wall_secs}))
        .collect();
    let n = result.reports.len() as f64;
    write_json(
        &out.join("timing.json"),
        &json!({
            "epochs": timing,
            "mean_step_secs": result.reports.iter().map(|r| r.step_secs).sum::<f64>() / n,
            "mean_wall_secs": result.reports.iter().map(|r| r.wall_secs).sum::<f64>() / n,
        }),
    )?;
    write_json(&out.join("metrics.json"), &serde_json::to_value(metrics)?)?;
    Ok(())
}

pub fn train_cmd(
    data: Option<&Path>,
    feature_args: &[String],
    feature_dim: Option<usize>,
    settings: &Settings,
) -> Result<()> {
    let out = require_out(settings)?;
    let (split, features) = load_dataset(data, feature_args, feature_dim, settings, None)?;
    let feature_refs: Vec<&FeatureMatrix> = features.iter().collect();

    let result = befa_core::trainer::train(&split, &feature_refs, &settings.train)
        .map_err(anyhow::Error::from)
        .context("training failed")?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    let model = result.best.to_model()?;
    let metrics = befa_core::evaluator::evaluate(&model, &feature_refs, &split, &settings.train.eval_ks)?;

    train_cmd_output(&result, &metrics, out)?;
    println!(
        "train: adapter={} best epoch {} of {} run; test metrics:",
        settings.train.adapter,
        result.best_epoch,
        result.reports.len()
    );
    print!("{}", metrics.render_text());
    println!("outputs -> {}", out.display());
    Ok(())
}

pub fn evaluate_cmd(
    checkpoint: &Path,
    data: Option<&Path>,
    feature_args: &[String],
    feature_dim: Option<usize>,
    adapter_flag: Option<AdapterKind>,
    settings: &Settings,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    if let Some(expected) = adapter_flag {
        ckpt.ensure_adapter(expected)?;
    }
    let (split, features) = load_dataset(data, feature_args, feature_dim, settings, Some(&ckpt))?;
    let feature_refs: Vec<&FeatureMatrix> = features.iter().collect();
    let model = ckpt.to_model()?;
    let metrics = befa_core::evaluator::evaluate(&model, &feature_refs, &split, &settings.train.eval_ks)?;

    let value = serde_json::to_value(&metrics)?;
    println!("{}", serde_json::to_string(&value)?);
    print!("{}", metrics.render_text());
    if let Some(out) = settings.out.as_deref() {
        ensure_dir(out)?;
        write_json(&out.join("metrics.json"), &value)?;
    }
    Ok(())
}

pub fn compare(args: &SynthArgs, seeds: Option<&str>, settings: &Settings) -> Result<()> {
    let seeds = parse_seeds(seeds.unwrap_or("1..5"))?;
    let cfg = CompareConfig {
        synth: synth_spec(args),
        train: settings.train.clone(),
        seeds,
        adapters: vec![
            AdapterKind::None,
            AdapterKind::Befa,
            AdapterKind::Lora,
            AdapterKind::Prompt,
        ],
        split_mode: settings.split_mode,
    };
    let comparison = compare_adapters(&cfg)?;
    print!("{}", comparison.render_table());
    let value = comparison.to_json();
    if let Some(out) = settings.out.as_deref() {
        ensure_dir(out)?;
        write_json(&out.join("compare.json"), &value)?;
    } else {
        println!("{}", serde_json::to_string(&value)?);
    }
    Ok(())
}

pub fn attribute(
    bundle_dir: &Path,
    checkpoint: &Path,
    modality: Option<&str>,
    apply_adapter: bool,
    export_size: Option<&str>,
    formats: Option<&[String]>,
    settings: &Settings,
) -> Result<()> {
    let out = require_out(settings)?;
    let bundle = load_bundle(bundle_dir)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let model = ckpt.to_model()?;

    let export_size = export_size
        .map(|s| -> Result<(usize, usize)> {
            let (h, w) = s
                .split_once('x')
                .ok_or_else(|| anyhow!("--export-size wants HxW, e.g. 224x224"))?;
            Ok((h.parse()?, w.parse()?))
        })
        .transpose()?;

    let heatmap = if settings.raw_cosine {
        compute_heatmap(&bundle, None)?
    } else {
        let branch = match modality {
            Some(name) => model
                .branches
                .iter()
                .find(|b| b.modality == name)
                .ok_or_else(|| anyhow!("checkpoint has no modality `{name}`"))?,
            None => model
                .branches
                .first()
                .ok_or_else(|| anyhow!("checkpoint has no modality branches"))?,
        };
        if apply_adapter {
            if bundle.behavioral.len() != model.d() {
                bail!(
                    "bundle behavioral dim {} does not match model dim {}",
                    bundle.behavioral.len(),
                    model.d()
                );
            }
            let adapted: Vec<_> = bundle
                .mask_features
                .iter()
                .map(|x| {
                    branch
                        .adapter
                        .forward(x, &bundle.behavioral, Mode::Eval)
                        .map(|(out, _)| out)
                })
                .collect::<befa_core::Result<_>>()?;
            let adapted_bundle = AttributionBundle::new(
                bundle.activations.clone(),
                adapted,
                bundle.behavioral.clone(),
            )?;
            compute_heatmap(&adapted_bundle, Some(&branch.fusion))?
        } else {
            compute_heatmap(&bundle, Some(&branch.fusion))?
        }
    };

    let formats: Vec<HeatmapFormat> = match formats {
        Some(fs) => fs
            .iter()
            .map(|f| f.parse::<HeatmapFormat>().map_err(anyhow::Error::from))
            .collect::<Result<_>>()?,
        None => vec![HeatmapFormat::Pgm, HeatmapFormat::Csv],
    };
    ensure_dir(out)?;
    for format in formats {
        let (name, fmt) = match format {
            HeatmapFormat::Pgm => ("heatmap.pgm", HeatmapFormat::Pgm),
            HeatmapFormat::Csv => ("heatmap.csv", HeatmapFormat::Csv),
        };
        export_heatmap(&heatmap, out.join(name), fmt, export_size)?;
    }
    println!(
        "attribute: {} masks over {:?} -> {}",
        bundle.n_masks(),
        bundle.grid_size(),
        out.display()
    );
    Ok(())
}

pub fn diagnose(
    checkpoint: &Path,
    data: Option<&Path>,
    raw: &Path,
    ideal: &Path,
    settings: &Settings,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = ckpt.to_model()?;
    let dir = data
        .map(Path::to_path_buf)
        .or_else(|| settings.data.clone())
        .ok_or_else(|| anyhow!("pass --data <dir> (or set it in the config)"))?;
    let split = load_split(&dir, settings.train.seed)?;

    let modality = model
        .branches
        .first()
        .map(|b| b.modality.clone())
        .ok_or_else(|| anyhow!("checkpoint has no modality branches"))?;
    let dim = checkpoint_feature_dim(&ckpt, &modality)
        .ok_or_else(|| anyhow!("checkpoint lacks fusion tensor for `{modality}`"))?;
    let raw_features = load_features(raw, modality.clone(), dim, split.space())?;
    let ideal_features = load_features(ideal, modality.clone(), dim, split.space())?;

    let report = adapter_deviation_report(&model, &raw_features, &ideal_features)?;
    print!("{}", render_comparison(&report));
    if let Some(out) = settings.out.as_deref() {
        ensure_dir(out)?;
        write_json(&out.join("diagnostics.json"), &serde_json::to_value(&report)?)?;
    } else {
        println!("{}", serde_json::to_string(&serde_json::to_value(&report)?)?);
    }
    Ok(())
}

