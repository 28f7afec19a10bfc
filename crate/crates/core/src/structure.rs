//! Target-structure learning: weak/strong views of target points and the
//! prototypical-assignment consistency objective between them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::denoise::prototype_softmax;
use crate::error::{Error, Result};
use crate::losses::kl_consistency;
use crate::nn::{softmax_backward, EmaEncoder, Gradients, Network, Upstream};
use crate::proto::PrototypeBank;
use crate::scalar::Scalar;
use crate::tensor::Tensor2D;

/// Point-space stand-ins for image augmentations: Gaussian jitter for the weak
/// view; jitter, random rescaling and coordinate dropout for the strong view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub weak_jitter_std: f64,
    pub strong_jitter_std: f64,
    pub strong_drop_prob: f64,
    pub strong_scale_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            weak_jitter_std: 0.05,
            strong_jitter_std: 0.3,
            strong_drop_prob: 0.1,
            strong_scale_range: (0.8, 1.2),
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            weak_jitter_std: 0.0,
            strong_jitter_std: 0.0,
            strong_drop_prob: 0.0,
            strong_scale_range: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.strong_scale_range;
        if !(self.weak_jitter_std >= 0.0) || !(self.strong_jitter_std >= self.weak_jitter_std) {
            return Err(Error::Config(
                "jitter stds must satisfy 0 <= weak <= strong".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.strong_drop_prob) {
            return Err(Error::Config("strong drop probability must lie in [0, 1]".into()));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config("strong scale range must satisfy 0 < lo <= hi".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Weak,
    Strong,
}

/// Reproducible randomness for one augmentation call: every row draws from a
/// generator keyed by `(seed, sample id, iteration, view)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentKey {
    pub seed: u64,
    pub iteration: u64,
}

pub(crate) fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn stream_rng(parts: &[u64]) -> ChaCha8Rng {
    let mut h = 0x2545_F491_4F6C_DD1D_u64;
    for &p in parts {
        h = splitmix(h ^ p);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Augments each row of `x`; `sample_ids[i]` identifies row `i` in the dataset.
pub fn augment<T: Scalar>(
    x: &Tensor2D<T>,
    sample_ids: &[usize],
    cfg: &AugmentConfig,
    view: View,
    key: AugmentKey,
) -> Result<Tensor2D<T>> {
    if sample_ids.len() != x.rows() {
        return Err(Error::dim("augment", x.rows(), sample_ids.len()));
    }
    let tag = match view {
        View::Weak => 1,
        View::Strong => 2,
    };
    let mut out = x.clone();
    for (r, &id) in sample_ids.iter().enumerate() {
        let mut rng = stream_rng(&[key.seed, id as u64, key.iteration, tag]);
        let row = out.row_mut(r);
        match view {
            View::Weak => {
                let s = cfg.weak_jitter_std;
                for v in row.iter_mut() {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    *v += T::of(s * n);
                }
            }
            View::Strong => {
                let (lo, hi) = cfg.strong_scale_range;
                let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                let s = cfg.strong_jitter_std;
                for v in row.iter_mut() {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    let keep = rng.random::<f64>() >= cfg.strong_drop_prob;
                    *v = if keep {
                        T::of(scale) * (*v + T::of(s * n))
                    } else {
                        T::zero()
                    };
                }
            }
        }
    }
    Ok(out)
}

/// Soft prototypical assignment `softmax(−‖f − η_k‖/τ)`.
pub fn soft_assignment<T: Scalar>(features: &Tensor2D<T>, bank: &PrototypeBank<T>, tau: T) -> Result<Tensor2D<T>> {
    prototype_softmax(&bank.distances(features)?, tau)
}

/// Pulls a gradient on the assignment `z` back to the features. Prototypes are
/// constants; unseen classes and coincident points contribute nothing.
pub fn assignment_backward<T: Scalar>(
    features: &Tensor2D<T>,
    bank: &PrototypeBank<T>,
    assignment: &Tensor2D<T>,
    grad_assignment: &Tensor2D<T>,
    tau: T,
) -> Result<Tensor2D<T>> {
    let dist = bank.distances(features)?;
    // z = softmax(s), s_k = −d_k/τ
    let grad_s = softmax_backward(assignment, grad_assignment)?;
    let mut out = Tensor2D::zeros(features.rows(), features.cols());
    for i in 0..features.rows() {
        let f = features.row(i);
        for k in 0..bank.classes() {
            let d = dist.get(i, k);
            let g = grad_s.get(i, k);
            if !d.is_finite() || d == T::zero() || g == T::zero() {
                continue;
            }
            // ∂s_k/∂f = −(f − η_k)/(τ d)
            let coef = -g / (tau * d);
            let eta = bank.centroids().row(k);
            for ((o, &fj), &ej) in out.row_mut(i).iter_mut().zip(f).zip(eta) {
                *o += coef * (fj - ej);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ConsistencyOutput<T> {
    pub loss: T,
    pub grads: Gradients<T>,
    pub weak_assignment: Tensor2D<T>,
    pub strong_assignment: Tensor2D<T>,
}

/// One evaluation of the weak-teaches-strong consistency loss. The weak view
/// goes through the momentum encoder and is held constant; gradients flow only
/// into `net`'s feature extractor via the strong view.
#[allow(clippy::too_many_arguments)]
pub fn consistency_step<T: Scalar>(
    x: &Tensor2D<T>,
    sample_ids: &[usize],
    net: &mut Network<T>,
    ema: &EmaEncoder<T>,
    bank: &PrototypeBank<T>,
    cfg: &AugmentConfig,
    tau: T,
    floor: T,
    key: AugmentKey,
) -> Result<ConsistencyOutput<T>> {
    if !bank.any_seen() {
        return Err(Error::State("prototype bank has no seen class".into()));
    }
    let weak = augment(x, sample_ids, cfg, View::Weak, key)?;
    let weak_assignment = soft_assignment(&ema.forward(&weak)?, bank, tau)?;
    let strong = augment(x, sample_ids, cfg, View::Strong, key)?;
    let out = net.forward_train(&strong)?;
    let strong_assignment = soft_assignment(&out.features, bank, tau)?;
    let kl = kl_consistency(&weak_assignment, &strong_assignment, floor)?;
    let grad_features = assignment_backward(&out.features, bank, &strong_assignment, &kl.grad, tau)?;
    let grads = net.backward(Upstream::features(&grad_features))?;
    Ok(ConsistencyOutput {
        loss: kl.value,
        grads,
        weak_assignment,
        strong_assignment,
    })
}
