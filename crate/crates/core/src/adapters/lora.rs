//! Low-rank residual adapter: `out = e + (alpha / r) * B (A e)`.
//!
//! `B` starts at zero so the adapter begins as the identity. Unlike the
//! behavior-gated adapter this one sees only the content feature, so it can
//! rescale feature directions globally but cannot condition on the item.

use crate::numkit::{matvec, matvec_t, xavier_init, DenseMatrix, DenseVector, SeededRng};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct LoraParams {
    /// Down-projection, `r x d_m`.
    pub a: DenseMatrix,
    /// Up-projection, `d_m x r`; zero-initialized.
    pub b: DenseMatrix,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraParams {
    pub fn init(d_m: usize, rank: usize, alpha: f64, rng: &mut SeededRng) -> Result<Self> {
        if rank == 0 || rank >= d_m {
            return Err(Error::InvalidArgument(format!(
                "lora rank must satisfy 0 < r < d_m (got r={rank}, d_m={d_m})"
            )));
        }
        Ok(Self {
            a: xavier_init(rank, d_m, rng),
            b: DenseMatrix::zeros(d_m, rank),
            rank,
            alpha,
        })
    }

    pub fn d_m(&self) -> usize {
        self.a.cols()
    }

    pub fn n_trainable(&self) -> usize {
        2 * self.rank * self.d_m()
    }

    fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn forward(&self, e: &DenseVector) -> Result<(DenseVector, LoraTape)> {
        if e.len() != self.d_m() {
            return Err(Error::dim(
                "lora_forward",
                format!("e has length {} (want {})", e.len(), self.d_m()),
            ));
        }
        let ae = matvec(&self.a, e)?;
        let mut out = e.clone();
        out.add_scaled(&matvec(&self.b, &ae)?, self.scale());
        Ok((
            out,
            LoraTape {
                e: e.clone(),
                ae,
            },
        ))
    }

    /// Returns `(grads, d_e)`; the adapter has no behavioral input.
    pub fn backward(
        &self,
        tape: &LoraTape,
        d_out: &DenseVector,
    ) -> Result<(LoraGrads, DenseVector)> {
        if d_out.len() != self.d_m() || tape.e.len() != self.d_m() {
            return Err(Error::dim("lora_backward", "tape/upstream mismatch".to_string()));
        }
        let s = self.scale();
        let mut g = LoraGrads::zeros_like(self);
        let bt_d = matvec_t(&self.b, d_out)?;
        g.b.add_outer(d_out.as_slice(), tape.ae.as_slice(), s);
        g.a.add_outer(bt_d.as_slice(), tape.e.as_slice(), s);
        let mut d_e = d_out.clone();
        d_e.add_scaled(&matvec_t(&self.a, &bt_d)?, s);
        Ok((g, d_e))
    }
}

#[derive(Debug, Clone)]
pub struct LoraTape {
    e: DenseVector,
    ae: DenseVector,
}

#[derive(Debug, Clone)]
pub struct LoraGrads {
    pub a: DenseMatrix,
    pub b: DenseMatrix,
}

impl LoraGrads {
    pub fn zeros_like(p: &LoraParams) -> Self {
        Self {
            a: DenseMatrix::zeros(p.a.rows(), p.a.cols()),
            b: DenseMatrix::zeros(p.b.rows(), p.b.cols()),
        }
    }

    pub fn add_assign(&mut self, other: &LoraGrads) {
        for (x, y) in self
            .a
            .as_mut_slice()
            .iter_mut()
            .zip(other.a.as_slice())
        {
            *x += y;
        }
        for (x, y) in self
            .b
            .as_mut_slice()
            .iter_mut()
            .zip(other.b.as_slice())
        {
            *x += y;
        }
    }
}
