//! BPR training with Adam, uniform negative sampling, per-epoch validation,
//! early stopping on Recall@20, and checkpoint persistence.
//!
//! All randomness derives from the config seed through tagged stream forks
//! (init / shuffle / negatives / dropout), so two runs with the same config
//! are bitwise identical, and two adapters trained from the same seed see
//! identical shuffles and negatives.

mod adam;
mod checkpoint;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, NamedTensor, RngCursor,
};

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapters::{Adapter, AdapterGrads, AdapterKind};
use crate::dataio::{DataSplit, FeatureMatrix, Fold};
use crate::evaluator;
use crate::numkit::{matvec_t, sigmoid, DenseMatrix, DenseVector, SeededRng};
use crate::recmodel::{item_forward, AdapterInit, ModelState};
use crate::{Error, Result};

const INIT_STREAM: u64 = 0x494e4954;
const SHUFFLE_STREAM: u64 = 0x53485546;
const NEGATIVE_STREAM: u64 = 0x4e454753;
const DROPOUT_STREAM: u64 = 0x44524f50;

/// Training hyperparameters, echoed into every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Behavioral embedding dimension.
    pub dim: usize,
    /// Decoupled-space size as a multiple of `dim`.
    pub d_a_mult: f64,
    pub dropout: f64,
    pub learning_rate: f64,
    /// L2 coefficient on batch-touched embedding rows.
    pub lambda_e: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Consecutive non-improving validation evaluations tolerated.
    pub patience: usize,
    pub adapter: AdapterKind,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub seed: u64,
    /// Block adapter gradients from reaching the behavioral embedding.
    pub stop_grad_behavior: bool,
    /// Freeze behavioral projections to the identity (needs d == d_a == d_m).
    pub identity_proj: bool,
    /// Single-threaded evaluation inside training.
    pub deterministic: bool,
    /// K values reported by final evaluation.
    pub eval_ks: Vec<usize>,
    /// Exclude validation positives when ranking for test.
    pub exclude_validation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            d_a_mult: 4.0,
            dropout: 0.1,
            learning_rate: 1e-3,
            lambda_e: 1e-4,
            batch_size: 2048,
            max_epochs: 1000,
            patience: 10,
            adapter: AdapterKind::Befa,
            lora_rank: 4,
            lora_alpha: 4.0,
            seed: 0,
            stop_grad_behavior: false,
            identity_proj: false,
            deterministic: false,
            eval_ks: vec![10, 20],
            exclude_validation: true,
        }
    }
}

impl TrainConfig {
    pub fn d_a(&self) -> usize {
        ((self.dim as f64 * self.d_a_mult).round() as usize).max(1)
    }

    pub fn adapter_init(&self) -> AdapterInit {
        AdapterInit {
            d_a: self.d_a(),
            dropout: self.dropout,
            lora_rank: self.lora_rank,
            lora_alpha: self.lora_alpha,
            identity_proj: self.identity_proj,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.dim == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return bad("dim, batch_size and max_epochs must be positive".into());
        }
        if self.d_a_mult <= 0.0 {
            return bad(format!("d_a_mult must be positive, got {}", self.d_a_mult));
        }
        if self.patience == 0 || self.patience > self.max_epochs {
            return bad(format!(
                "patience must be in 1..=max_epochs (got {} with max_epochs {})",
                self.patience, self.max_epochs
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0,1), got {}", self.dropout));
        }
        if self.learning_rate <= 0.0 || self.lambda_e < 0.0 {
            return bad("learning_rate must be positive and lambda_e nonnegative".into());
        }
        if self.eval_ks.is_empty() || self.eval_ks.iter().any(|&k| k == 0) {
            return bad("eval_ks must be nonempty positive values".into());
        }
        Ok(())
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_recall20: Option<f64>,
    pub val_ndcg20: Option<f64>,
    /// Seconds spent in gradient steps.
    pub step_secs: f64,
    /// Seconds for the whole epoch including validation.
    pub wall_secs: f64,
}

/// Output of [`train`].
#[derive(Debug)]
pub struct TrainResult {
    pub best: Checkpoint,
    /// 1-based epoch the best checkpoint was taken at.
    pub best_epoch: usize,
    pub reports: Vec<EpochReport>,
    pub warnings: Vec<String>,
}

/// Uniform draw over the items `user_items` does not contain. `user_items`
/// must be sorted.
pub fn sample_negatives(
    user_items: &[u32],
    n_items: usize,
    rng: &mut SeededRng,
) -> Result<u32> {
    if user_items.len() >= n_items {
        return Err(Error::InvalidArgument(
            "user has interacted with every item; no negatives exist".into(),
        ));
    }
    loop {
        let candidate = rng.index(n_items) as u32;
        if user_items.binary_search(&candidate).is_err() {
            return Ok(candidate);
        }
    }
}

/// Dense gradient buffers mirroring every trainable tensor.
#[derive(Debug)]
pub struct GradBuffers {
    pub user: DenseMatrix,
    pub item: DenseMatrix,
    pub fusion: Vec<DenseMatrix>,
    pub adapters: Vec<AdapterGrads>,
}

impl GradBuffers {
    pub fn zeros_like(state: &ModelState) -> Self {
        Self {
            user: DenseMatrix::zeros(state.embeddings.user.rows(), state.d()),
            item: DenseMatrix::zeros(state.embeddings.item.rows(), state.d()),
            fusion: state
                .branches
                .iter()
                .map(|b| DenseMatrix::zeros(b.fusion.rows(), b.fusion.cols()))
                .collect(),
            adapters: state.branches.iter().map(|b| b.adapter.zero_grads()).collect(),
        }
    }

    fn clear(&mut self, state: &ModelState) {
        self.user.as_mut_slice().fill(0.0);
        self.item.as_mut_slice().fill(0.0);
        for f in &mut self.fusion {
            f.as_mut_slice().fill(0.0);
        }
        for (a, b) in self.adapters.iter_mut().zip(&state.branches) {
            *a = b.adapter.zero_grads();
        }
    }
}

/// Mean BPR loss of a batch under eval-mode adapters:
/// `softplus(-(y+ - y-)) + lambda (|h_u|^2 + |h_+|^2 + |h_-|^2)` averaged.
pub fn bpr_loss(
    state: &ModelState,
    features: &[&FeatureMatrix],
    batch: &[(u32, u32, u32)],
    lambda: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for &(u, pos, neg) in batch {
        let hu = DenseVector::from_vec(state.embeddings.user.row(u as usize).to_vec());
        let rp = item_forward(state, features, pos, None)?.repr;
        let rn = item_forward(state, features, neg, None)?.repr;
        let x = hu.dot(&rp) - hu.dot(&rn);
        total += softplus(-x);
        let hp = state.embeddings.item.row(pos as usize);
        let hn = state.embeddings.item.row(neg as usize);
        total += lambda
            * (hu.norm_sq()
                + crate::numkit::dot_slices(hp, hp)
                + crate::numkit::dot_slices(hn, hn));
    }
    Ok(total / batch.len() as f64)
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + f64::ln_1p((-z.abs()).exp())
}

/// Forward/backward over one batch; gradients land in `bufs`. Returns the
/// mean batch loss. `rank_weight` scales the ranking term (1.0 normally;
/// 0.0 isolates the regularizer).
fn accumulate_batch(
    state: &ModelState,
    features: &[&FeatureMatrix],
    batch: &[(u32, u32, u32)],
    lambda: f64,
    rank_weight: f64,
    stop_grad_behavior: bool,
    mut dropout_rng: Option<&mut SeededRng>,
    bufs: &mut GradBuffers,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    bufs.clear(state);
    let inv_b = 1.0 / batch.len() as f64;
    let d = state.d();

    // Forward once per unique item in the batch; occurrences share the pass.
    let mut item_slot: HashMap<u32, usize> = HashMap::new();
    let mut items: Vec<u32> = Vec::new();
    for &(_, pos, neg) in batch {
        for it in [pos, neg] {
            if !item_slot.contains_key(&it) {
                item_slot.insert(it, items.len());
                items.push(it);
            }
        }
    }
    let mut forwards = Vec::with_capacity(items.len());
    for &it in &items {
        forwards.push(item_forward(state, features, it, dropout_rng.as_deref_mut())?);
    }
    let mut d_repr: Vec<DenseVector> = (0..items.len()).map(|_| DenseVector::zeros(d)).collect();

    let mut loss = 0.0;
    for &(u, pos, neg) in batch {
        let hu = state.embeddings.user.row(u as usize);
        let ps = item_slot[&pos];
        let ns = item_slot[&neg];
        let rp = &forwards[ps].repr;
        let rn = &forwards[ns].repr;
        let x = crate::numkit::dot_slices(hu, rp.as_slice())
            - crate::numkit::dot_slices(hu, rn.as_slice());

        if rank_weight != 0.0 {
            loss += rank_weight * softplus(-x);
            let factor = rank_weight * (sigmoid(x) - 1.0) * inv_b;
            let du = bufs.user.row_mut(u as usize);
            for j in 0..d {
                du[j] += factor * (rp[j] - rn[j]);
            }
            d_repr[ps].as_mut_slice().iter_mut().zip(hu).for_each(|(g, &h)| *g += factor * h);
            d_repr[ns].as_mut_slice().iter_mut().zip(hu).for_each(|(g, &h)| *g -= factor * h);
        }

        // L2 on the three touched embedding rows.
        let hp = state.embeddings.item.row(pos as usize);
        let hn = state.embeddings.item.row(neg as usize);
        loss += lambda
            * (crate::numkit::dot_slices(hu, hu)
                + crate::numkit::dot_slices(hp, hp)
                + crate::numkit::dot_slices(hn, hn));
        let reg = 2.0 * lambda * inv_b;
        let du = bufs.user.row_mut(u as usize);
        for j in 0..d {
            du[j] += reg * hu[j];
        }
        let dip = bufs.item.row_mut(pos as usize);
        for j in 0..d {
            dip[j] += reg * hp[j];
        }
        let din = bufs.item.row_mut(neg as usize);
        for j in 0..d {
            din[j] += reg * hn[j];
        }
    }

    // Pull the accumulated representation sensitivities back through fusion
    // and adapter, once per unique item.
    for (slot, fwd) in forwards.iter().enumerate() {
        let dr = &d_repr[slot];
        let mut d_h_item = dr.clone();
        for (b, branch) in state.branches.iter().enumerate() {
            bufs.fusion[b].add_outer(dr.as_slice(), fwd.branches[b].adapted.as_slice(), 1.0);
            let d_adapted = matvec_t(&branch.fusion, dr)?;
            let (agrads, _d_e, d_h) =
                branch.adapter.backward(&fwd.branches[b].tape, &d_adapted)?;
            bufs.adapters[b].add_assign(&agrads);
            if !stop_grad_behavior && d_h.len() == d {
                d_h_item.add_scaled(&d_h, 1.0);
            }
        }
        let row = bufs.item.row_mut(fwd.item as usize);
        for j in 0..d {
            row[j] += d_h_item[j];
        }
    }

    Ok(loss * inv_b)
}

/// Eval-mode batch gradients (dropout off); used by gradient verification.
pub fn bpr_gradients(
    state: &ModelState,
    features: &[&FeatureMatrix],
    batch: &[(u32, u32, u32)],
    lambda: f64,
    stop_grad_behavior: bool,
) -> Result<(f64, GradBuffers)> {
    let mut bufs = GradBuffers::zeros_like(state);
    let loss = accumulate_batch(
        state,
        features,
        batch,
        lambda,
        1.0,
        stop_grad_behavior,
        None,
        &mut bufs,
    )?;
    Ok((loss, bufs))
}

/// Sizes of every trainable tensor, in the fixed slot order used by
/// [`apply_adam`].
fn adam_slot_sizes(state: &ModelState) -> Vec<usize> {
    let mut sizes = vec![
        state.embeddings.user.as_slice().len(),
        state.embeddings.item.as_slice().len(),
    ];
    for branch in &state.branches {
        sizes.push(branch.fusion.as_slice().len());
        match &branch.adapter {
            Adapter::None => {}
            Adapter::Befa(p) => {
                sizes.extend([
                    p.w1.as_slice().len(),
                    p.b1.len(),
                    p.w2.as_slice().len(),
                    p.b2.len(),
                    p.w3.as_slice().len(),
                    p.b3.len(),
                ]);
                if !p.identity_proj {
                    sizes.extend([p.p_gate.as_slice().len(), p.p_merge.as_slice().len()]);
                }
            }
            Adapter::Lora(p) => {
                sizes.extend([p.a.as_slice().len(), p.b.as_slice().len()]);
            }
            Adapter::Prompt(p) => sizes.push(p.prompt.len()),
        }
    }
    sizes
}

/// One Adam update across every trainable tensor. Slot order must match
/// [`adam_slot_sizes`].
fn apply_adam(state: &mut ModelState, bufs: &GradBuffers, adam: &mut AdamState) {
    adam.begin_step();
    let mut slot = 0;
    let mut next = || {
        let s = slot;
        slot += 1;
        s
    };
    adam.update(next(), state.embeddings.user.as_mut_slice(), bufs.user.as_slice());
    adam.update(next(), state.embeddings.item.as_mut_slice(), bufs.item.as_slice());
    for (b, branch) in state.branches.iter_mut().enumerate() {
        adam.update(next(), branch.fusion.as_mut_slice(), bufs.fusion[b].as_slice());
        match (&mut branch.adapter, &bufs.adapters[b]) {
            (Adapter::None, AdapterGrads::None) => {}
            (Adapter::Befa(p), AdapterGrads::Befa(g)) => {
                adam.update(next(), p.w1.as_mut_slice(), g.w1.as_slice());
                adam.update(next(), p.b1.as_mut_slice(), g.b1.as_slice());
                adam.update(next(), p.w2.as_mut_slice(), g.w2.as_slice());
                adam.update(next(), p.b2.as_mut_slice(), g.b2.as_slice());
                adam.update(next(), p.w3.as_mut_slice(), g.w3.as_slice());
                adam.update(next(), p.b3.as_mut_slice(), g.b3.as_slice());
                if !p.identity_proj {
                    adam.update(next(), p.p_gate.as_mut_slice(), g.p_gate.as_slice());
                    adam.update(next(), p.p_merge.as_mut_slice(), g.p_merge.as_slice());
                }
            }
            (Adapter::Lora(p), AdapterGrads::Lora(g)) => {
                adam.update(next(), p.a.as_mut_slice(), g.a.as_slice());
                adam.update(next(), p.b.as_mut_slice(), g.b.as_slice());
            }
            (Adapter::Prompt(p), AdapterGrads::Prompt(g)) => {
                adam.update(next(), p.prompt.as_mut_slice(), g.prompt.as_slice());
            }
            _ => unreachable!("gradient kind mismatch"),
        }
    }
}

/// Build an optimizer matching a model's trainable tensors.
pub fn adam_for_model(state: &ModelState, cfg: &TrainConfig) -> AdamState {
    AdamState::new(
        AdamConfig::with_lr(cfg.learning_rate),
        &adam_slot_sizes(state),
    )
}

/// One training step: batch gradients plus one Adam update. Returns the
/// mean batch loss.
pub fn bpr_step(
    state: &mut ModelState,
    adam: &mut AdamState,
    features: &[&FeatureMatrix],
    batch: &[(u32, u32, u32)],
    cfg: &TrainConfig,
    dropout_rng: Option<&mut SeededRng>,
) -> Result<f64> {
    let mut bufs = GradBuffers::zeros_like(state);
    bpr_step_with(state, adam, features, batch, cfg, dropout_rng, &mut bufs)
}

fn bpr_step_with(
    state: &mut ModelState,
    adam: &mut AdamState,
    features: &[&FeatureMatrix],
    batch: &[(u32, u32, u32)],
    cfg: &TrainConfig,
    dropout_rng: Option<&mut SeededRng>,
    bufs: &mut GradBuffers,
) -> Result<f64> {
    let loss = accumulate_batch(
        state,
        features,
        batch,
        cfg.lambda_e,
        1.0,
        cfg.stop_grad_behavior,
        dropout_rng,
        bufs,
    )?;
    apply_adam(state, bufs, adam);
    Ok(loss)
}

/// Full training run: epochs of shuffled BPR steps with per-epoch validation,
/// early stopping on validation Recall@20, best-epoch checkpointing.
pub fn train(
    split: &DataSplit,
    features: &[&FeatureMatrix],
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    cfg.validate()?;
    let master = SeededRng::new(cfg.seed);
    let mut init_rng = master.fork(INIT_STREAM);
    let mut shuffle_rng = master.fork(SHUFFLE_STREAM);
    let mut negative_rng = master.fork(NEGATIVE_STREAM);
    let mut dropout_rng = master.fork(DROPOUT_STREAM);

    let mut state = ModelState::init(
        split.n_users(),
        split.n_items(),
        cfg.dim,
        cfg.adapter,
        &cfg.adapter_init(),
        features,
        &mut init_rng,
    )?;
    let mut adam = adam_for_model(&state, cfg);
    let mut bufs = GradBuffers::zeros_like(&state);

    // Sorted per-user train items for negative-sampling membership tests.
    let folds = split.user_folds();
    let user_train: Vec<Vec<u32>> = folds
        .iter()
        .map(|f| {
            let mut v = f.train.clone();
            v.sort_unstable();
            v
        })
        .collect();
    let has_validation = folds.iter().any(|f| !f.validation.is_empty());

    let mut warnings = Vec::new();
    if !has_validation {
        warnings.push(
            "validation fold is empty: early stopping disabled, training to max_epochs".into(),
        );
    }

    let base_records = split.fold(Fold::Train).to_vec();
    let mut order: Vec<usize> = (0..base_records.len()).collect();

    let mut reports = Vec::new();
    let mut best: Option<(f64, Checkpoint, usize)> = None;
    let mut since_best = 0usize;
    let mut last_epoch = 0usize;

    for epoch in 1..=cfg.max_epochs {
        last_epoch = epoch;
        let t0 = Instant::now();
        shuffle_rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut triples = Vec::with_capacity(cfg.batch_size);
        let mut n_done = 0usize;
        for (pos_in_epoch, &rec_idx) in order.iter().enumerate() {
            let (u, i) = base_records[rec_idx];
            let neg = sample_negatives(&user_train[u as usize], split.n_items(), &mut negative_rng)?;
            triples.push((u, i, neg));
            let is_last = pos_in_epoch + 1 == order.len();
            if triples.len() == cfg.batch_size || is_last {
                let loss = bpr_step_with(
                    &mut state,
                    &mut adam,
                    features,
                    &triples,
                    cfg,
                    Some(&mut dropout_rng),
                    &mut bufs,
                )?;
                loss_sum += loss * triples.len() as f64;
                n_done += triples.len();
                triples.clear();
            }
        }
        let train_loss = loss_sum / n_done as f64;
        let step_secs = t0.elapsed().as_secs_f64();

        let (val_recall20, val_ndcg20) = if has_validation {
            let m = evaluate_in_mode(&state, features, split, &[20], Fold::Validation, cfg)?;
            (Some(m.recall[0]), Some(m.ndcg[0]))
        } else {
            (None, None)
        };
        let wall_secs = t0.elapsed().as_secs_f64();

        reports.push(EpochReport {
            epoch,
            train_loss,
            val_recall20,
            val_ndcg20,
            step_secs,
            wall_secs,
        });

        if let Some(recall) = val_recall20 {
            let improved = best.as_ref().map(|(b, _, _)| recall > *b).unwrap_or(true);
            if improved {
                let ckpt = Checkpoint::from_model(
                    &state,
                    cfg,
                    epoch,
                    rng_cursor(cfg.seed, &shuffle_rng, &negative_rng, &dropout_rng),
                );
                best = Some((recall, ckpt, epoch));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
    }

    let (best, best_epoch) = match best {
        Some((_, ckpt, epoch)) => (ckpt, epoch),
        None => (
            Checkpoint::from_model(
                &state,
                cfg,
                last_epoch,
                rng_cursor(cfg.seed, &shuffle_rng, &negative_rng, &dropout_rng),
            ),
            last_epoch,
        ),
    };

    Ok(TrainResult {
        best,
        best_epoch,
        reports,
        warnings,
    })
}

fn rng_cursor(
    seed: u64,
    shuffle: &SeededRng,
    negatives: &SeededRng,
    dropout: &SeededRng,
) -> RngCursor {
    RngCursor {
        seed,
        shuffle_pos: shuffle.word_pos(),
        negatives_pos: negatives.word_pos(),
        dropout_pos: dropout.word_pos(),
    }
}

/// Evaluation honoring the deterministic flag (single-threaded pool when
/// set). Rankings are deterministic either way; the flag removes thread
/// scheduling from the picture entirely.
fn evaluate_in_mode(
    state: &ModelState,
    features: &[&FeatureMatrix],
    split: &DataSplit,
    ks: &[usize],
    fold: Fold,
    cfg: &TrainConfig,
) -> Result<evaluator::MetricsTable> {
    if cfg.deterministic {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(|| {
            evaluator::evaluate_fold(state, features, split, ks, fold, cfg.exclude_validation)
        })
    } else {
        evaluator::evaluate_fold(state, features, split, ks, fold, cfg.exclude_validation)
    }
}
