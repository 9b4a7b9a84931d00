//! Host recommender: trainable ID embeddings plus additive per-modality
//! content fusion.
//!
//! An item's representation is `h_i + sum_m T_m * g(h_i, e_{i,m})` where `g`
//! is the configured adapter (identity when none) and `T_m` a learned `d x
//! d_m` fusion projection. Scores are plain dot products against the user
//! embedding, so with no modalities (or zero fusion) the model reduces to
//! matrix factorization.

use rayon::prelude::*;

use crate::adapters::{Adapter, AdapterKind, AdapterTape, Mode};
use crate::dataio::FeatureMatrix;
use crate::numkit::{matvec, xavier_init, DenseMatrix, DenseVector, SeededRng};
use crate::{Error, Result};

/// Behavioral embedding rows for every user and item.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub user: DenseMatrix,
    pub item: DenseMatrix,
}

impl EmbeddingTable {
    pub fn init(n_users: usize, n_items: usize, d: usize, rng: &mut SeededRng) -> Self {
        Self {
            user: xavier_init(n_users, d, rng),
            item: xavier_init(n_items, d, rng),
        }
    }

    pub fn d(&self) -> usize {
        self.user.cols()
    }
}

/// One modality's fusion projection and adapter.
#[derive(Debug, Clone)]
pub struct ModalityBranch {
    pub modality: String,
    /// `d x d_m` fusion projection.
    pub fusion: DenseMatrix,
    pub adapter: Adapter,
}

/// Everything the scorer needs: embeddings plus per-modality branches.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub embeddings: EmbeddingTable,
    pub branches: Vec<ModalityBranch>,
}

/// Adapter hyperparameters used when a model is initialized.
#[derive(Debug, Clone, Copy)]
pub struct AdapterInit {
    pub d_a: usize,
    pub dropout: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Freeze behavioral projections to the identity (needs `d == d_a == d_m`).
    pub identity_proj: bool,
}

impl ModelState {
    /// Xavier-initialize embeddings, fusion projections, and one adapter per
    /// modality. Draw order is embeddings first, then per-branch tensors, so
    /// runs are reproducible.
    pub fn init(
        n_users: usize,
        n_items: usize,
        d: usize,
        kind: AdapterKind,
        init: &AdapterInit,
        features: &[&FeatureMatrix],
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let embeddings = EmbeddingTable::init(n_users, n_items, d, rng);
        let mut branches = Vec::with_capacity(features.len());
        for fm in features {
            if fm.n_items() != n_items {
                return Err(Error::dim(
                    "ModelState::init",
                    format!(
                        "modality `{}` has {} rows for {} items",
                        fm.modality(),
                        fm.n_items(),
                        n_items
                    ),
                ));
            }
            let d_m = fm.dim();
            let fusion = xavier_init(d, d_m, rng);
            let adapter = match kind {
                AdapterKind::None => Adapter::None,
                AdapterKind::Befa => {
                    if init.identity_proj {
                        if d != init.d_a || d != d_m {
                            return Err(Error::InvalidArgument(format!(
                                "identity projections need d == d_a == d_m (got {d}, {}, {d_m})",
                                init.d_a
                            )));
                        }
                        Adapter::Befa(crate::adapters::BefaParams::init_identity_proj(
                            d,
                            init.dropout,
                            rng,
                        )?)
                    } else {
                        Adapter::Befa(crate::adapters::BefaParams::init(
                            d,
                            init.d_a,
                            d_m,
                            init.dropout,
                            rng,
                        )?)
                    }
                }
                AdapterKind::Lora => Adapter::Lora(crate::adapters::LoraParams::init(
                    d_m,
                    init.lora_rank,
                    init.lora_alpha,
                    rng,
                )?),
                AdapterKind::Prompt => {
                    Adapter::Prompt(crate::adapters::PromptParams::init(d_m))
                }
            };
            branches.push(ModalityBranch {
                modality: fm.modality().to_string(),
                fusion,
                adapter,
            });
        }
        Ok(Self {
            embeddings,
            branches,
        })
    }

    pub fn n_users(&self) -> usize {
        self.embeddings.user.rows()
    }

    pub fn n_items(&self) -> usize {
        self.embeddings.item.rows()
    }

    pub fn d(&self) -> usize {
        self.embeddings.d()
    }

    pub fn adapter_kind(&self) -> AdapterKind {
        self.branches
            .first()
            .map(|b| b.adapter.kind())
            .unwrap_or(AdapterKind::None)
    }

    fn check_features(&self, features: &[&FeatureMatrix]) -> Result<()> {
        if features.len() != self.branches.len() {
            return Err(Error::dim(
                "item_representation",
                format!(
                    "{} feature matrices for {} branches",
                    features.len(),
                    self.branches.len()
                ),
            ));
        }
        for (b, fm) in self.branches.iter().zip(features) {
            if b.modality != fm.modality() {
                return Err(Error::InvalidArgument(format!(
                    "modality order mismatch: branch `{}` vs features `{}`",
                    b.modality,
                    fm.modality()
                )));
            }
        }
        Ok(())
    }
}

/// Per-branch forward intermediates for one item.
#[derive(Debug)]
pub struct BranchForward {
    pub adapted: DenseVector,
    pub tape: AdapterTape,
}

/// An item's representation plus what backward needs.
#[derive(Debug)]
pub struct ItemForward {
    pub item: u32,
    pub repr: DenseVector,
    pub branches: Vec<BranchForward>,
}

/// Compute `h_i + sum_m T_m * g(h_i, e_{i,m})`. Pass a rng for train-mode
/// dropout, `None` for eval.
pub fn item_forward(
    state: &ModelState,
    features: &[&FeatureMatrix],
    item: u32,
    mut rng: Option<&mut SeededRng>,
) -> Result<ItemForward> {
    state.check_features(features)?;
    if (item as usize) >= state.n_items() {
        return Err(Error::InvalidArgument(format!(
            "item index {item} out of range ({} items)",
            state.n_items()
        )));
    }
    let h_i = state.embeddings.item.row_vector(item as usize);
    let mut repr = h_i.clone();
    let mut branches = Vec::with_capacity(state.branches.len());
    for (branch, fm) in state.branches.iter().zip(features) {
        if (item as usize) >= fm.n_items() {
            return Err(Error::InvalidArgument(format!(
                "missing feature row for item index {item} in modality `{}`",
                fm.modality()
            )));
        }
        let e = fm.row_vector(item);
        let mode = match rng.as_deref_mut() {
            Some(r) => Mode::Train(r),
            None => Mode::Eval,
        };
        let (adapted, tape) = branch.adapter.forward(&e, &h_i, mode)?;
        repr.add_scaled(&matvec(&branch.fusion, &adapted)?, 1.0);
        branches.push(BranchForward { adapted, tape });
    }
    Ok(ItemForward {
        item,
        repr,
        branches,
    })
}

/// Eval-mode item representation.
pub fn item_representation(
    state: &ModelState,
    features: &[&FeatureMatrix],
    item: u32,
) -> Result<DenseVector> {
    Ok(item_forward(state, features, item, None)?.repr)
}

/// Eval-mode preference score `h_u . repr(i)`.
pub fn score(
    state: &ModelState,
    features: &[&FeatureMatrix],
    user: u32,
    item: u32,
) -> Result<f64> {
    if (user as usize) >= state.n_users() {
        return Err(Error::InvalidArgument(format!(
            "user index {user} out of range ({} users)",
            state.n_users()
        )));
    }
    let repr = item_representation(state, features, item)?;
    Ok(crate::numkit::dot_slices(
        state.embeddings.user.row(user as usize),
        repr.as_slice(),
    ))
}

/// Eval-mode scores for every item.
pub fn score_all(
    state: &ModelState,
    features: &[&FeatureMatrix],
    user: u32,
) -> Result<DenseVector> {
    let reprs = ItemReprs::compute(state, features)?;
    Ok(DenseVector::from_vec(reprs.scores_for(state, user)?))
}

/// Cache of eval-mode item representations, computed once per evaluation
/// sweep so ranking every user is a dot-product pass.
pub struct ItemReprs {
    reprs: DenseMatrix,
}

impl ItemReprs {
    pub fn compute(state: &ModelState, features: &[&FeatureMatrix]) -> Result<Self> {
        state.check_features(features)?;
        let n = state.n_items();
        let d = state.d();
        let rows: Vec<DenseVector> = (0..n as u32)
            .into_par_iter()
            .map(|i| item_representation(state, features, i))
            .collect::<Result<Vec<_>>>()?;
        let mut reprs = DenseMatrix::zeros(n, d);
        for (i, r) in rows.into_iter().enumerate() {
            reprs.row_mut(i).copy_from_slice(r.as_slice());
        }
        Ok(Self { reprs })
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.reprs
    }

    pub fn repr(&self, item: u32) -> &[f64] {
        self.reprs.row(item as usize)
    }

    /// Scores of every item for one user.
    pub fn scores_for(&self, state: &ModelState, user: u32) -> Result<Vec<f64>> {
        if (user as usize) >= state.n_users() {
            return Err(Error::InvalidArgument(format!(
                "user index {user} out of range ({} users)",
                state.n_users()
            )));
        }
        let hu = state.embeddings.user.row(user as usize);
        Ok((0..self.reprs.rows())
            .map(|i| crate::numkit::dot_slices(hu, self.reprs.row(i)))
            .collect())
    }
}
