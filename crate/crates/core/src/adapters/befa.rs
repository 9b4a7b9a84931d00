//! Behavior-gated feature adapter.
//!
//! Three stages, each a learned affine map with a nonlinearity:
//!
//! 1. decouple: `e_dec = dropout(relu(W1 e + b1))`, lifting the content
//!    feature into the decoupled space of dimension `d_a`;
//! 2. filter:   `e_flt = dropout(b_gate ⊙ tanh(W2 e_dec + b2))` with
//!    `b_gate = P_gate h` projecting the item's behavioral embedding;
//! 3. merge:    `out   = b_merge ⊙ sigmoid(W3 e_flt + b3)` with
//!    `b_merge = P_merge h`, back in content dimension `d_m`.
//!
//! The two projections reconcile the behavioral dimension `d` with the gate
//! sites; when `d == d_a == d_m` they may be fixed to the identity. ReLU is
//! applied to the decouple stage only (a ReLU after the tanh gate would
//! discard its sign), and dropout follows stages 1 and 2.
//!
//! The backward pass is the exact chain rule of the three stages and reuses
//! the tape's dropout masks, so analytic gradients match finite differences
//! of the same forward.

use crate::numkit::{
    apply_nonlinearity, hadamard, matvec, matvec_t, xavier_init, DenseMatrix, DenseVector,
    Nonlinearity, SeededRng,
};
use crate::{Error, Result};

use super::{sample_dropout_mask, Mode};

/// Trainable tensors of the behavior-gated adapter.
#[derive(Debug, Clone)]
pub struct BefaParams {
    /// Decouple weights, `d_a x d_m`.
    pub w1: DenseMatrix,
    pub b1: DenseVector,
    /// Filter weights, `d_a x d_a`.
    pub w2: DenseMatrix,
    pub b2: DenseVector,
    /// Merge weights, `d_m x d_a`.
    pub w3: DenseMatrix,
    pub b3: DenseVector,
    /// Behavioral projection for the filter gate, `d_a x d`.
    pub p_gate: DenseMatrix,
    /// Behavioral projection for the merge gate, `d_m x d`.
    pub p_merge: DenseMatrix,
    /// Dropout probability in `[0, 1)`.
    pub dropout: f64,
    /// When set, projections are frozen identities (requires `d == d_a == d_m`).
    pub identity_proj: bool,
}

impl BefaParams {
    /// Xavier-initialized weights and projections, zero biases.
    pub fn init(
        d: usize,
        d_a: usize,
        d_m: usize,
        dropout: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout must be in [0,1), got {dropout}"
            )));
        }
        Ok(Self {
            w1: xavier_init(d_a, d_m, rng),
            b1: DenseVector::zeros(d_a),
            w2: xavier_init(d_a, d_a, rng),
            b2: DenseVector::zeros(d_a),
            w3: xavier_init(d_m, d_a, rng),
            b3: DenseVector::zeros(d_m),
            p_gate: xavier_init(d_a, d, rng),
            p_merge: xavier_init(d_m, d, rng),
            dropout,
            identity_proj: false,
        })
    }

    /// Variant with frozen identity projections; only valid when the
    /// behavioral, decoupled and content dimensions all coincide.
    pub fn init_identity_proj(d: usize, dropout: f64, rng: &mut SeededRng) -> Result<Self> {
        let mut p = Self::init(d, d, d, dropout, rng)?;
        p.p_gate = DenseMatrix::identity(d);
        p.p_merge = DenseMatrix::identity(d);
        p.identity_proj = true;
        Ok(p)
    }

    pub fn d(&self) -> usize {
        self.p_gate.cols()
    }

    pub fn d_a(&self) -> usize {
        self.w1.rows()
    }

    pub fn d_m(&self) -> usize {
        self.w1.cols()
    }

    /// Trainable scalars in this instance.
    pub fn n_trainable(&self) -> usize {
        let (d, d_a, d_m) = (self.d(), self.d_a(), self.d_m());
        let core = (d_a * d_m + d_a) + (d_a * d_a + d_a) + (d_m * d_a + d_m);
        if self.identity_proj {
            core
        } else {
            core + d_a * d + d_m * d
        }
    }

    fn check_dims(&self, e: &DenseVector, h: &DenseVector) -> Result<()> {
        if e.len() != self.d_m() || h.len() != self.d() {
            return Err(Error::dim(
                "befa_forward",
                format!(
                    "e has length {} (want {}), h has length {} (want {})",
                    e.len(),
                    self.d_m(),
                    h.len(),
                    self.d()
                ),
            ));
        }
        Ok(())
    }

    /// Run the three stages; the tape retains everything backward needs.
    pub fn forward(
        &self,
        e: &DenseVector,
        h: &DenseVector,
        mut mode: Mode<'_>,
    ) -> Result<(DenseVector, BefaTape)> {
        self.check_dims(e, h)?;

        let mut pre1 = matvec(&self.w1, e)?;
        pre1.add_scaled(&self.b1, 1.0);
        let relu1 = apply_nonlinearity(&pre1, Nonlinearity::Relu);
        let mask1 = sample_dropout_mask(relu1.len(), self.dropout, &mut mode);
        let e_dec = match &mask1 {
            Some(m) => hadamard(&relu1, m)?,
            None => relu1,
        };

        let b_gate = matvec(&self.p_gate, h)?;
        let mut pre2 = matvec(&self.w2, &e_dec)?;
        pre2.add_scaled(&self.b2, 1.0);
        let t = apply_nonlinearity(&pre2, Nonlinearity::Tanh);
        let gated = hadamard(&b_gate, &t)?;
        let mask2 = sample_dropout_mask(gated.len(), self.dropout, &mut mode);
        let e_flt = match &mask2 {
            Some(m) => hadamard(&gated, m)?,
            None => gated,
        };

        let b_merge = matvec(&self.p_merge, h)?;
        let mut pre3 = matvec(&self.w3, &e_flt)?;
        pre3.add_scaled(&self.b3, 1.0);
        let s = apply_nonlinearity(&pre3, Nonlinearity::Sigmoid);
        let out = hadamard(&b_merge, &s)?;

        let tape = BefaTape {
            e: e.clone(),
            h: h.clone(),
            pre1,
            e_dec,
            mask1,
            b_gate,
            t,
            e_flt,
            mask2,
            b_merge,
            s,
        };
        Ok((out, tape))
    }

    /// Exact gradients for the forward pass that produced `tape`, under the
    /// same dropout masks. Returns `(grads, d_e, d_h)`.
    pub fn backward(
        &self,
        tape: &BefaTape,
        d_out: &DenseVector,
    ) -> Result<(BefaGrads, DenseVector, DenseVector)> {
        if tape.e.len() != self.d_m()
            || tape.h.len() != self.d()
            || tape.pre1.len() != self.d_a()
            || d_out.len() != self.d_m()
        {
            return Err(Error::dim(
                "befa_backward",
                "tape or upstream sensitivity does not match parameters".to_string(),
            ));
        }
        let mut g = BefaGrads::zeros_like(self);

        // Merge stage.
        let d_b_merge = hadamard(d_out, &tape.s)?;
        let mut d_pre3 = hadamard(d_out, &tape.b_merge)?;
        for (dp, &sv) in d_pre3.as_mut_slice().iter_mut().zip(tape.s.iter()) {
            *dp *= sv * (1.0 - sv);
        }
        g.w3.add_outer(d_pre3.as_slice(), tape.e_flt.as_slice(), 1.0);
        g.b3.add_scaled(&d_pre3, 1.0);
        let d_e_flt = matvec_t(&self.w3, &d_pre3)?;

        // Filter stage.
        let d_gated = match &tape.mask2 {
            Some(m) => hadamard(&d_e_flt, m)?,
            None => d_e_flt,
        };
        let d_b_gate = hadamard(&d_gated, &tape.t)?;
        let mut d_pre2 = hadamard(&d_gated, &tape.b_gate)?;
        for (dp, &tv) in d_pre2.as_mut_slice().iter_mut().zip(tape.t.iter()) {
            *dp *= 1.0 - tv * tv;
        }
        g.w2.add_outer(d_pre2.as_slice(), tape.e_dec.as_slice(), 1.0);
        g.b2.add_scaled(&d_pre2, 1.0);
        let d_e_dec = matvec_t(&self.w2, &d_pre2)?;

        // Decouple stage.
        let d_relu1 = match &tape.mask1 {
            Some(m) => hadamard(&d_e_dec, m)?,
            None => d_e_dec,
        };
        let mut d_pre1 = d_relu1;
        for (dp, &p) in d_pre1.as_mut_slice().iter_mut().zip(tape.pre1.iter()) {
            if p <= 0.0 {
                *dp = 0.0;
            }
        }
        g.w1.add_outer(d_pre1.as_slice(), tape.e.as_slice(), 1.0);
        g.b1.add_scaled(&d_pre1, 1.0);
        let d_e = matvec_t(&self.w1, &d_pre1)?;

        // Behavioral path.
        let d_h = if self.identity_proj {
            let mut d_h = d_b_gate.clone();
            d_h.add_scaled(&d_b_merge, 1.0);
            d_h
        } else {
            g.p_gate
                .add_outer(d_b_gate.as_slice(), tape.h.as_slice(), 1.0);
            g.p_merge
                .add_outer(d_b_merge.as_slice(), tape.h.as_slice(), 1.0);
            let mut d_h = matvec_t(&self.p_gate, &d_b_gate)?;
            d_h.add_scaled(&matvec_t(&self.p_merge, &d_b_merge)?, 1.0);
            d_h
        };

        Ok((g, d_e, d_h))
    }
}

/// Intermediates of one [`BefaParams::forward`] call.
#[derive(Debug, Clone)]
pub struct BefaTape {
    pub(crate) e: DenseVector,
    pub(crate) h: DenseVector,
    pre1: DenseVector,
    e_dec: DenseVector,
    mask1: Option<DenseVector>,
    b_gate: DenseVector,
    t: DenseVector,
    e_flt: DenseVector,
    mask2: Option<DenseVector>,
    b_merge: DenseVector,
    s: DenseVector,
}

impl BefaTape {
    /// Post-dropout decouple-stage output (exposed for the dropout
    /// expectation check).
    pub fn decoupled(&self) -> &DenseVector {
        &self.e_dec
    }
}

/// Gradient accumulator shaped like [`BefaParams`].
#[derive(Debug, Clone)]
pub struct BefaGrads {
    pub w1: DenseMatrix,
    pub b1: DenseVector,
    pub w2: DenseMatrix,
    pub b2: DenseVector,
    pub w3: DenseMatrix,
    pub b3: DenseVector,
    pub p_gate: DenseMatrix,
    pub p_merge: DenseMatrix,
}

impl BefaGrads {
    pub fn zeros_like(p: &BefaParams) -> Self {
        Self {
            w1: DenseMatrix::zeros(p.w1.rows(), p.w1.cols()),
            b1: DenseVector::zeros(p.b1.len()),
            w2: DenseMatrix::zeros(p.w2.rows(), p.w2.cols()),
            b2: DenseVector::zeros(p.b2.len()),
            w3: DenseMatrix::zeros(p.w3.rows(), p.w3.cols()),
            b3: DenseVector::zeros(p.b3.len()),
            p_gate: DenseMatrix::zeros(p.p_gate.rows(), p.p_gate.cols()),
            p_merge: DenseMatrix::zeros(p.p_merge.rows(), p.p_merge.cols()),
        }
    }

    pub fn add_assign(&mut self, other: &BefaGrads) {
        for (a, b) in [
            (self.w1.as_mut_slice(), other.w1.as_slice()),
            (self.w2.as_mut_slice(), other.w2.as_slice()),
            (self.w3.as_mut_slice(), other.w3.as_slice()),
            (self.p_gate.as_mut_slice(), other.p_gate.as_slice()),
            (self.p_merge.as_mut_slice(), other.p_merge.as_slice()),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.b1.add_scaled(&other.b1, 1.0);
        self.b2.add_scaled(&other.b2, 1.0);
        self.b3.add_scaled(&other.b3, 1.0);
    }

    /// Largest absolute entry across all tensors.
    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for s in [
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
            self.w3.as_slice(),
            self.b3.as_slice(),
            self.p_gate.as_slice(),
            self.p_merge.as_slice(),
        ] {
            for &v in s {
                m = m.max(v.abs());
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::sigmoid;

    fn square_params(d: usize) -> BefaParams {
        BefaParams {
            w1: DenseMatrix::zeros(d, d),
            b1: DenseVector::zeros(d),
            w2: DenseMatrix::zeros(d, d),
            b2: DenseVector::zeros(d),
            w3: DenseMatrix::zeros(d, d),
            b3: DenseVector::zeros(d),
            p_gate: DenseMatrix::identity(d),
            p_merge: DenseMatrix::identity(d),
            dropout: 0.0,
            identity_proj: false,
        }
    }

    #[test]
    fn zero_weights_give_half_gate() {
        let p = square_params(3);
        let e = DenseVector::from_vec(vec![4.0, -2.0, 9.0]);
        let h = DenseVector::constant(3, 1.0);
        let (out, _) = p.forward(&e, &h, Mode::Eval).unwrap();
        assert_eq!(out.as_slice(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn zero_behavior_annihilates_output_and_merge_grads() {
        let mut rng = SeededRng::new(3);
        let p = BefaParams::init(4, 6, 5, 0.0, &mut rng).unwrap();
        let e = DenseVector::from_vec((0..5).map(|i| i as f64 - 2.0).collect());
        let h = DenseVector::zeros(4);
        let (out, tape) = p.forward(&e, &h, Mode::Eval).unwrap();
        assert!(out.as_slice().iter().all(|&x| x == 0.0));

        let d_out = DenseVector::constant(5, 1.0);
        let (g, _, _) = p.backward(&tape, &d_out).unwrap();
        assert!(g.w3.as_slice().iter().all(|&x| x == 0.0));
        assert!(g.b3.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn worked_two_dim_example() {
        let mut p = square_params(2);
        p.w1 = DenseMatrix::identity(2);
        p.b2 = DenseVector::from_vec(vec![1.0, 1.0]);
        p.w3 = DenseMatrix::identity(2);
        let e = DenseVector::from_vec(vec![1.0, -1.0]);
        let h = DenseVector::from_vec(vec![1.0, 1.0]);
        let (out, tape) = p.forward(&e, &h, Mode::Eval).unwrap();

        assert_eq!(tape.decoupled().as_slice(), &[1.0, 0.0]);
        let expect = sigmoid(1.0f64.tanh());
        assert!((out[0] - expect).abs() < 1e-15);
        assert!((out[1] - expect).abs() < 1e-15);
        assert!((out[0] - 0.6817).abs() < 5e-4);
    }

    #[test]
    fn eval_forward_is_bitwise_deterministic() {
        let mut rng = SeededRng::new(10);
        let p = BefaParams::init(3, 5, 4, 0.4, &mut rng).unwrap();
        let e = DenseVector::from_vec(vec![0.3, -1.2, 0.8, 2.0]);
        let h = DenseVector::from_vec(vec![1.0, -0.5, 0.25]);
        let (a, _) = p.forward(&e, &h, Mode::Eval).unwrap();
        let (b, _) = p.forward(&e, &h, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn output_bounded_by_merge_gate() {
        let mut rng = SeededRng::new(12);
        let p = BefaParams::init(4, 8, 6, 0.0, &mut rng).unwrap();
        for trial in 0..50 {
            let mut r = SeededRng::new(trial);
            let e = DenseVector::from_vec((0..6).map(|_| r.uniform(-3.0, 3.0)).collect());
            let h = DenseVector::from_vec((0..4).map(|_| r.uniform(-3.0, 3.0)).collect());
            let (out, tape) = p.forward(&e, &h, Mode::Eval).unwrap();
            for j in 0..6 {
                assert!(out[j].abs() <= tape.b_merge[j].abs() + 1e-15);
            }
        }
    }

    #[test]
    fn zero_upstream_zeroes_every_gradient() {
        let mut rng = SeededRng::new(4);
        let p = BefaParams::init(3, 5, 4, 0.0, &mut rng).unwrap();
        let e = DenseVector::from_vec(vec![0.5, 1.0, -0.5, 0.25]);
        let h = DenseVector::from_vec(vec![1.0, 2.0, -1.0]);
        let (_, tape) = p.forward(&e, &h, Mode::Eval).unwrap();
        let (g, d_e, d_h) = p.backward(&tape, &DenseVector::zeros(4)).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert!(d_e.as_slice().iter().all(|&x| x == 0.0));
        assert!(d_h.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn dropped_coordinates_get_no_bias_gradient() {
        let mut rng = SeededRng::new(40);
        let p = BefaParams::init(3, 16, 4, 0.5, &mut rng).unwrap();
        let e = DenseVector::from_vec(vec![0.9, 1.0, -0.5, 0.25]);
        let h = DenseVector::from_vec(vec![1.0, 2.0, -1.0]);
        let mut drop_rng = SeededRng::new(77);
        let (_, tape) = p
            .forward(&e, &h, Mode::Train(&mut drop_rng))
            .unwrap();
        let (g, _, _) = p.backward(&tape, &DenseVector::constant(4, 1.0)).unwrap();
        let mask = tape.mask1.as_ref().unwrap();
        let mut saw_dropped = false;
        for j in 0..16 {
            if mask[j] == 0.0 {
                saw_dropped = true;
                assert_eq!(g.b1[j], 0.0);
            }
        }
        assert!(saw_dropped, "seed produced no dropped coordinate");
    }

    #[test]
    fn train_mode_dropout_matches_eval_in_expectation() {
        let mut rng = SeededRng::new(6);
        let p = BefaParams::init(3, 6, 5, 0.3, &mut rng).unwrap();
        let e = DenseVector::from_vec(vec![1.0, -0.4, 0.7, 2.0, -1.1]);
        let h = DenseVector::from_vec(vec![0.5, 1.0, -0.25]);
        let (_, eval_tape) = p.forward(&e, &h, Mode::Eval).unwrap();

        let n = 10_000;
        let mut drop_rng = SeededRng::new(123);
        let mut mean = DenseVector::zeros(6);
        for _ in 0..n {
            let (_, tape) = p.forward(&e, &h, Mode::Train(&mut drop_rng)).unwrap();
            mean.add_scaled(tape.decoupled(), 1.0 / n as f64);
        }
        for j in 0..6 {
            let want = eval_tape.decoupled()[j];
            // Monte-Carlo tolerance: sd of the mask factor is about
            // sqrt(p/(1-p)) * value, so four sigmas over 1e4 draws.
            let tol = 4.0 * (0.3f64 / 0.7).sqrt() * want.abs().max(0.05) / (n as f64).sqrt();
            assert!(
                (mean[j] - want).abs() < tol,
                "coordinate {j}: mean {} vs eval {} (tol {tol})",
                mean[j],
                want
            );
        }
    }

    /// One scalar slice per trainable tensor, for finite differencing.
    fn tensor_mut(p: &mut BefaParams, idx: usize) -> &mut [f64] {
        match idx {
            0 => p.w1.as_mut_slice(),
            1 => p.b1.as_mut_slice(),
            2 => p.w2.as_mut_slice(),
            3 => p.b2.as_mut_slice(),
            4 => p.w3.as_mut_slice(),
            5 => p.b3.as_mut_slice(),
            6 => p.p_gate.as_mut_slice(),
            7 => p.p_merge.as_mut_slice(),
            _ => unreachable!(),
        }
    }

    fn grad_slice(g: &BefaGrads, idx: usize) -> &[f64] {
        match idx {
            0 => g.w1.as_slice(),
            1 => g.b1.as_slice(),
            2 => g.w2.as_slice(),
            3 => g.b2.as_slice(),
            4 => g.w3.as_slice(),
            5 => g.b3.as_slice(),
            6 => g.p_gate.as_slice(),
            7 => g.p_merge.as_slice(),
            _ => unreachable!(),
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let (d, d_a, d_m) = (3, 5, 4);
        let mut rng = SeededRng::new(2024);
        let params = BefaParams::init(d, d_a, d_m, 0.0, &mut rng).unwrap();
        let e = DenseVector::from_vec((0..d_m).map(|_| rng.uniform(-1.0, 1.0)).collect());
        let h = DenseVector::from_vec((0..d).map(|_| rng.uniform(-1.0, 1.0)).collect());
        let c = DenseVector::from_vec((0..d_m).map(|_| rng.uniform(-1.0, 1.0)).collect());

        let loss = |p: &BefaParams, e: &DenseVector, h: &DenseVector| -> f64 {
            let (out, _) = p.forward(e, h, Mode::Eval).unwrap();
            out.dot(&c)
        };

        let (_, tape) = params.forward(&e, &h, Mode::Eval).unwrap();
        let (g, d_e, d_h) = params.backward(&tape, &c).unwrap();

        let step = 1e-6;
        let check = |analytic: f64, numeric: f64, what: &str| {
            let denom = analytic.abs().max(numeric.abs());
            if denom < 1e-10 {
                return;
            }
            let rel = (analytic - numeric).abs() / denom;
            assert!(rel < 1e-6, "{what}: analytic {analytic} numeric {numeric} rel {rel}");
        };

        for t in 0..8 {
            let n = grad_slice(&g, t).len();
            for i in 0..n {
                let mut plus = params.clone();
                tensor_mut(&mut plus, t)[i] += step;
                let mut minus = params.clone();
                tensor_mut(&mut minus, t)[i] -= step;
                let numeric = (loss(&plus, &e, &h) - loss(&minus, &e, &h)) / (2.0 * step);
                check(grad_slice(&g, t)[i], numeric, &format!("tensor {t} [{i}]"));
            }
        }

        for i in 0..d_m {
            let mut ep = e.clone();
            ep[i] += step;
            let mut em = e.clone();
            em[i] -= step;
            let numeric = (loss(&params, &ep, &h) - loss(&params, &em, &h)) / (2.0 * step);
            check(d_e[i], numeric, &format!("d_e[{i}]"));
        }
        for i in 0..d {
            let mut hp = h.clone();
            hp[i] += step;
            let mut hm = h.clone();
            hm[i] -= step;
            let numeric = (loss(&params, &e, &hp) - loss(&params, &e, &hm)) / (2.0 * step);
            check(d_h[i], numeric, &format!("d_h[{i}]"));
        }
    }

    #[test]
    fn identity_projection_requires_matching_dims() {
        let mut rng = SeededRng::new(1);
        let p = BefaParams::init_identity_proj(4, 0.0, &mut rng).unwrap();
        assert_eq!(p.d(), 4);
        assert_eq!(p.d_a(), 4);
        assert_eq!(p.d_m(), 4);
        // Projections carry no gradient when frozen.
        let e = DenseVector::from_vec(vec![1.0, 0.5, -0.5, 0.2]);
        let h = DenseVector::from_vec(vec![0.1, 0.2, 0.3, 0.4]);
        let (_, tape) = p.forward(&e, &h, Mode::Eval).unwrap();
        let (g, _, d_h) = p.backward(&tape, &DenseVector::constant(4, 1.0)).unwrap();
        assert!(g.p_gate.as_slice().iter().all(|&x| x == 0.0));
        assert!(g.p_merge.as_slice().iter().all(|&x| x == 0.0));
        assert!(d_h.as_slice().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn dim_mismatch_rejected() {
        let mut rng = SeededRng::new(9);
        let p = BefaParams::init(3, 5, 4, 0.0, &mut rng).unwrap();
        let bad_e = DenseVector::zeros(3);
        let h = DenseVector::zeros(3);
        assert!(p.forward(&bad_e, &h, Mode::Eval).is_err());
        let e = DenseVector::zeros(4);
        let bad_h = DenseVector::zeros(5);
        assert!(p.forward(&e, &bad_h, Mode::Eval).is_err());
    }
}
