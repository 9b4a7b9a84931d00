//! Content-feature adapters and their exact gradients.
//!
//! Three adapters share one calling convention: map an item's content
//! feature `e` (length `d_m`) to an adapted feature of the same length,
//! optionally conditioned on the item's behavioral embedding `h` (length
//! `d`). Every forward returns a tape holding the intermediates its backward
//! needs; backward returns parameter gradients plus the sensitivities `d_e`
//! and `d_h` so the host can keep propagating.

mod befa;
mod lora;
mod prompt;

pub use befa::{BefaGrads, BefaParams, BefaTape};
pub use lora::{LoraGrads, LoraParams, LoraTape};
pub use prompt::{PromptGrads, PromptParams, PromptTape};

use serde::{Deserialize, Serialize};

use crate::numkit::{DenseVector, SeededRng};
use crate::{Error, Result};

/// Which adapter the host applies between content features and fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    None,
    Befa,
    Lora,
    Prompt,
}

impl std::fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AdapterKind::None => "none",
            AdapterKind::Befa => "befa",
            AdapterKind::Lora => "lora",
            AdapterKind::Prompt => "prompt",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for AdapterKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AdapterKind::None),
            "befa" => Ok(AdapterKind::Befa),
            "lora" => Ok(AdapterKind::Lora),
            "prompt" => Ok(AdapterKind::Prompt),
            other => Err(Error::InvalidArgument(format!(
                "unknown adapter `{other}` (expected none, befa, lora or prompt)"
            ))),
        }
    }
}

/// The dimensions that determine trainable-parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterDims {
    /// Behavioral embedding dimension.
    pub d: usize,
    /// Decoupled-space dimension.
    pub d_a: usize,
    /// Content feature dimension.
    pub d_m: usize,
    /// Low-rank adapter rank.
    pub lora_rank: usize,
}

/// Exact count of trainable scalars for an adapter configuration.
pub fn param_count(kind: AdapterKind, dims: &AdapterDims) -> usize {
    let AdapterDims { d, d_a, d_m, lora_rank } = *dims;
    match kind {
        AdapterKind::None => 0,
        AdapterKind::Befa => {
            (d_a * d_m + d_a) + (d_a * d_a + d_a) + (d_m * d_a + d_m) + d_a * d + d_m * d
        }
        AdapterKind::Lora => 2 * lora_rank * d_m,
        AdapterKind::Prompt => d_m,
    }
}

/// Forward-pass mode. Train mode draws dropout masks from the given stream;
/// eval mode is deterministic.
pub enum Mode<'r> {
    Train(&'r mut SeededRng),
    Eval,
}

/// An adapter instance with its parameters.
#[derive(Debug, Clone)]
pub enum Adapter {
    None,
    Befa(BefaParams),
    Lora(LoraParams),
    Prompt(PromptParams),
}

/// Intermediates retained by [`Adapter::forward`].
#[derive(Debug, Clone)]
pub enum AdapterTape {
    None { h_len: usize },
    Befa(BefaTape),
    Lora(LoraTape),
    Prompt(PromptTape),
}

/// Parameter gradients produced by [`Adapter::backward`].
#[derive(Debug, Clone)]
pub enum AdapterGrads {
    None,
    Befa(BefaGrads),
    Lora(LoraGrads),
    Prompt(PromptGrads),
}

impl Adapter {
    pub fn kind(&self) -> AdapterKind {
        match self {
            Adapter::None => AdapterKind::None,
            Adapter::Befa(_) => AdapterKind::Befa,
            Adapter::Lora(_) => AdapterKind::Lora,
            Adapter::Prompt(_) => AdapterKind::Prompt,
        }
    }

    /// Adapted feature plus the tape for [`Adapter::backward`].
    pub fn forward(
        &self,
        e: &DenseVector,
        h: &DenseVector,
        mode: Mode<'_>,
    ) -> Result<(DenseVector, AdapterTape)> {
        match self {
            Adapter::None => Ok((e.clone(), AdapterTape::None { h_len: h.len() })),
            Adapter::Befa(p) => {
                let (out, tape) = p.forward(e, h, mode)?;
                Ok((out, AdapterTape::Befa(tape)))
            }
            Adapter::Lora(p) => {
                let (out, tape) = p.forward(e)?;
                Ok((out, AdapterTape::Lora(tape)))
            }
            Adapter::Prompt(p) => {
                let (out, tape) = p.forward(e)?;
                Ok((out, AdapterTape::Prompt(tape)))
            }
        }
    }

    /// Chain-rule pullback of the upstream sensitivity `d_out`.
    pub fn backward(
        &self,
        tape: &AdapterTape,
        d_out: &DenseVector,
    ) -> Result<(AdapterGrads, DenseVector, DenseVector)> {
        match (self, tape) {
            (Adapter::None, AdapterTape::None { h_len }) => Ok((
                AdapterGrads::None,
                d_out.clone(),
                DenseVector::zeros(*h_len),
            )),
            (Adapter::Befa(p), AdapterTape::Befa(t)) => {
                let (g, de, dh) = p.backward(t, d_out)?;
                Ok((AdapterGrads::Befa(g), de, dh))
            }
            (Adapter::Lora(p), AdapterTape::Lora(t)) => {
                let (g, de) = p.backward(t, d_out)?;
                let dh = DenseVector::zeros(0);
                Ok((AdapterGrads::Lora(g), de, dh))
            }
            (Adapter::Prompt(p), AdapterTape::Prompt(t)) => {
                let (g, de) = p.backward(t, d_out)?;
                let dh = DenseVector::zeros(0);
                Ok((AdapterGrads::Prompt(g), de, dh))
            }
            _ => Err(Error::InvalidArgument(
                "tape does not match adapter kind".into(),
            )),
        }
    }

    /// A zeroed gradient accumulator matching this adapter's parameters.
    pub fn zero_grads(&self) -> AdapterGrads {
        match self {
            Adapter::None => AdapterGrads::None,
            Adapter::Befa(p) => AdapterGrads::Befa(BefaGrads::zeros_like(p)),
            Adapter::Lora(p) => AdapterGrads::Lora(LoraGrads::zeros_like(p)),
            Adapter::Prompt(p) => AdapterGrads::Prompt(PromptGrads::zeros_like(p)),
        }
    }

    /// Actual trainable scalars in this instance (identity projections are
    /// frozen, so a BeFA configured with them counts fewer than the formula).
    pub fn n_trainable(&self) -> usize {
        match self {
            Adapter::None => 0,
            Adapter::Befa(p) => p.n_trainable(),
            Adapter::Lora(p) => p.n_trainable(),
            Adapter::Prompt(p) => p.n_trainable(),
        }
    }
}

impl AdapterGrads {
    /// `self += other`, used when one item's gradient accumulates over a batch.
    pub fn add_assign(&mut self, other: &AdapterGrads) {
        match (self, other) {
            (AdapterGrads::None, AdapterGrads::None) => {}
            (AdapterGrads::Befa(a), AdapterGrads::Befa(b)) => a.add_assign(b),
            (AdapterGrads::Lora(a), AdapterGrads::Lora(b)) => a.add_assign(b),
            (AdapterGrads::Prompt(a), AdapterGrads::Prompt(b)) => a.add_assign(b),
            _ => panic!("gradient kinds do not match"),
        }
    }
}

/// Inverted-dropout mask: factor per coordinate, 0 with probability `p`,
/// otherwise `1/(1-p)`. Returns `None` when dropout is inactive.
pub(crate) fn sample_dropout_mask(
    len: usize,
    p: f64,
    mode: &mut Mode<'_>,
) -> Option<DenseVector> {
    match mode {
        Mode::Eval => None,
        Mode::Train(rng) => {
            if p == 0.0 {
                return None;
            }
            let keep = 1.0 / (1.0 - p);
            let mask = (0..len)
                .map(|_| if rng.bernoulli(p) { 0.0 } else { keep })
                .collect::<Vec<_>>();
            Some(DenseVector::from_vec(mask))
        }
    }
}
