//! Synthetic interaction/feature generator with known ideal features.
//!
//! A planted latent-factor model: user and item latents are i.i.d. standard
//! normal in `R^k`, interactions are drawn per user without replacement with
//! probability proportional to `softmax(z_u . z_i)`, and the ideal feature of
//! an item is its latent embedded in the first `k` of `d_m` coordinates. Raw
//! features start from the ideal row and are then corrupted: with probability
//! `drift_prob` the informative block is replaced by an independent random
//! unit vector scaled to the original norm, otherwise with probability
//! `omit_prob` a random `omit_fraction` of informative coordinates is zeroed.
//! The `d_m - k` nuisance coordinates receive `noise_scale * N(0,1)` on raw
//! rows only.

use crate::numkit::{DenseMatrix, SeededRng};
use crate::{Error, Result};

use super::features::FeatureMatrix;
use super::InteractionSet;

/// Shape and corruption parameters for [`synth_generate`].
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    /// Latent dimension `k`; must be below `feature_dim`.
    pub latent_dim: usize,
    /// Content feature dimension `d_m`.
    pub feature_dim: usize,
    pub interactions_per_user: usize,
    /// Probability an item's informative block is redirected.
    pub drift_prob: f64,
    /// Probability (given no drift) that informative coordinates are zeroed.
    pub omit_prob: f64,
    /// Fraction of informative coordinates zeroed by an omission, in (0,1).
    pub omit_fraction: f64,
    /// Scale of Gaussian noise on nuisance coordinates.
    pub noise_scale: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.users == 0 || self.items == 0 {
            return bad("users and items must be positive".into());
        }
        if self.latent_dim == 0 || self.latent_dim >= self.feature_dim {
            return bad(format!(
                "latent_dim must satisfy 0 < k < feature_dim (got k={}, d_m={})",
                self.latent_dim, self.feature_dim
            ));
        }
        if self.interactions_per_user == 0 {
            return bad("interactions_per_user must be positive".into());
        }
        if self.interactions_per_user > self.items {
            return bad(format!(
                "interactions_per_user {} exceeds item count {}",
                self.interactions_per_user, self.items
            ));
        }
        for (name, p) in [("drift_prob", self.drift_prob), ("omit_prob", self.omit_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be in [0,1], got {p}"));
            }
        }
        if !(self.omit_fraction > 0.0 && self.omit_fraction < 1.0) {
            return bad(format!(
                "omit_fraction must be in (0,1), got {}",
                self.omit_fraction
            ));
        }
        if self.noise_scale < 0.0 {
            return bad(format!("noise_scale must be >= 0, got {}", self.noise_scale));
        }
        Ok(())
    }
}

/// Generate interactions plus aligned raw and ideal feature matrices.
///
/// Items that end up with no interactions are dropped, so the returned set
/// satisfies the usual every-item-has-a-record invariant and both matrices
/// are aligned to its internal indices. Identical spec and rng seed give
/// identical output.
pub fn synth_generate(
    spec: &SyntheticSpec,
    rng: &mut SeededRng,
) -> Result<(InteractionSet, FeatureMatrix, FeatureMatrix)> {
    spec.validate()?;
    let k = spec.latent_dim;
    let dm = spec.feature_dim;

    let draw_latents = |rng: &mut SeededRng, n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..k).map(|_| rng.standard_normal()).collect())
            .collect()
    };
    let user_latents = draw_latents(rng, spec.users);
    let item_latents = draw_latents(rng, spec.items);

    // Interactions: per user, weighted sampling without replacement with
    // weight exp(z_u . z_i - max).
    let mut pairs: Vec<(String, String)> =
        Vec::with_capacity(spec.users * spec.interactions_per_user);
    for (u, zu) in user_latents.iter().enumerate() {
        let logits: Vec<f64> = item_latents
            .iter()
            .map(|zi| zu.iter().zip(zi).map(|(a, b)| a * b).sum())
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let mut total: f64 = weights.iter().sum();
        for _ in 0..spec.interactions_per_user {
            let mut t = rng.uniform(0.0, total);
            let mut chosen = usize::MAX;
            for (i, &w) in weights.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                t -= w;
                if t <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            if chosen == usize::MAX {
                // Floating-point slack: fall back to the last unsampled item.
                chosen = weights.iter().rposition(|&w| w > 0.0).expect("weights left");
            }
            total -= weights[chosen];
            weights[chosen] = 0.0;
            pairs.push((format!("u{u}"), format!("i{chosen}")));
        }
    }
    let set = InteractionSet::from_pairs(&pairs)?;

    // Feature rows aligned to the surviving internal item order.
    let mut ideal = DenseMatrix::zeros(set.n_items(), dm);
    let mut raw = DenseMatrix::zeros(set.n_items(), dm);
    for internal in 0..set.n_items() {
        let ext = set.space().item_id(internal as u32);
        let orig: usize = ext[1..].parse().expect("synthetic item id");
        let z = &item_latents[orig];

        ideal.row_mut(internal)[..k].copy_from_slice(z);

        let row = raw.row_mut(internal);
        row[..k].copy_from_slice(z);
        if rng.bernoulli(spec.drift_prob) {
            let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
            let mut dir: Vec<f64> = (0..k).map(|_| rng.standard_normal()).collect();
            let dn = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            if dn > 0.0 && norm > 0.0 {
                for d in &mut dir {
                    *d *= norm / dn;
                }
                row[..k].copy_from_slice(&dir);
            }
        } else if rng.bernoulli(spec.omit_prob) {
            let n_zero = ((spec.omit_fraction * k as f64).round() as usize).min(k);
            let mut idx: Vec<usize> = (0..k).collect();
            rng.shuffle(&mut idx);
            for &j in &idx[..n_zero] {
                row[j] = 0.0;
            }
        }
        if spec.noise_scale > 0.0 {
            for v in row[k..].iter_mut() {
                *v += spec.noise_scale * rng.standard_normal();
            }
        }
    }

    Ok((
        set,
        FeatureMatrix::new("visual", raw)?,
        FeatureMatrix::new("visual", ideal)?,
    ))
}
