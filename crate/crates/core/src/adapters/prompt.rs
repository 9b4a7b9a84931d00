//! Additive soft-prompt adapter: `out = e + prompt`, with the prompt vector
//! as the only trainable tensor. Zero-initialized, so it starts as the
//! identity.

use crate::numkit::DenseVector;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct PromptParams {
    pub prompt: DenseVector,
}

impl PromptParams {
    pub fn init(d_m: usize) -> Self {
        Self {
            prompt: DenseVector::zeros(d_m),
        }
    }

    pub fn d_m(&self) -> usize {
        self.prompt.len()
    }

    pub fn n_trainable(&self) -> usize {
        self.prompt.len()
    }

    pub fn forward(&self, e: &DenseVector) -> Result<(DenseVector, PromptTape)> {
        if e.len() != self.d_m() {
            return Err(Error::dim(
                "prompt_forward",
                format!("e has length {} (want {})", e.len(), self.d_m()),
            ));
        }
        let mut out = e.clone();
        out.add_scaled(&self.prompt, 1.0);
        Ok((out, PromptTape { e_len: e.len() }))
    }

    /// The map is additive, so both gradients equal the upstream sensitivity.
    pub fn backward(
        &self,
        tape: &PromptTape,
        d_out: &DenseVector,
    ) -> Result<(PromptGrads, DenseVector)> {
        if d_out.len() != self.d_m() || tape.e_len != self.d_m() {
            return Err(Error::dim("prompt_backward", "tape/upstream mismatch".to_string()));
        }
        Ok((
            PromptGrads {
                prompt: d_out.clone(),
            },
            d_out.clone(),
        ))
    }
}

#[derive(Debug, Clone)]
pub struct PromptTape {
    pub(crate) e_len: usize,
}

#[derive(Debug, Clone)]
pub struct PromptGrads {
    pub prompt: DenseVector,
}

impl PromptGrads {
    pub fn zeros_like(p: &PromptParams) -> Self {
        Self {
            prompt: DenseVector::zeros(p.d_m()),
        }
    }

    pub fn add_assign(&mut self, other: &PromptGrads) {
        self.prompt.add_scaled(&other.prompt, 1.0);
    }
}
