//! Training objectives. Every loss is a mean over its valid rows and returns
//! its gradient with respect to the tensor that produced its input (logits for
//! classifier losses, assignment probabilities for the consistency term).

use crate::error::{Error, Result};
use crate::nn::softmax_backward;
use crate::scalar::Scalar;
use crate::tensor::Tensor2D;
use crate::IGNORE;

/// Coefficients shared by the objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights<T> {
    pub sce_alpha: T,
    pub sce_beta: T,
    pub gamma1: T,
    pub gamma2: T,
    pub kd_beta: T,
    /// Floor applied to every probability inside a logarithm.
    pub clamp_floor: T,
}

impl<T: Scalar> Default for LossWeights<T> {
    fn default() -> Self {
        Self {
            sce_alpha: T::of(0.1),
            sce_beta: T::one(),
            gamma1: T::of(10.0),
            gamma2: T::of(0.1),
            kd_beta: T::one(),
            clamp_floor: T::of(1e-4),
        }
    }
}

impl<T: Scalar> LossWeights<T> {
    pub fn validate(&self) -> Result<()> {
        let z = T::zero();
        for (name, v) in [
            ("sce_alpha", self.sce_alpha),
            ("sce_beta", self.sce_beta),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("kd_beta", self.kd_beta),
        ] {
            if !(v >= z) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        if !(self.clamp_floor > z && self.clamp_floor < T::one()) {
            return Err(Error::Config(format!(
                "clamp floor must lie in (0, 1), got {}",
                self.clamp_floor
            )));
        }
        Ok(())
    }
}

/// Scalar loss and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    pub value: T,
    pub grad: Tensor2D<T>,
    /// Set when every row was ignored; value and gradient are then zero.
    pub all_ignored: bool,
}

fn check_labels<T: Scalar>(probs: &Tensor2D<T>, labels: &[usize], op: &'static str) -> Result<usize> {
    if labels.len() != probs.rows() {
        return Err(Error::dim(op, probs.rows(), labels.len()));
    }
    let k = probs.cols();
    let mut valid = 0;
    for &y in labels {
        if y == IGNORE {
            continue;
        }
        if y >= k {
            return Err(Error::dim(op, format!("label < {k}"), y));
        }
        valid += 1;
    }
    Ok(valid)
}

fn same_shape<T: Scalar>(a: &Tensor2D<T>, b: &Tensor2D<T>, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    Ok(())
}

/// Cross-entropy against hard labels; gradient is w.r.t. the logits.
pub fn ce_loss<T: Scalar>(probs: &Tensor2D<T>, labels: &[usize]) -> Result<LossOutput<T>> {
    let valid = check_labels(probs, labels, "ce_loss")?;
    let mut grad = Tensor2D::zeros(probs.rows(), probs.cols());
    if valid == 0 {
        return Ok(LossOutput {
            value: T::zero(),
            grad,
            all_ignored: true,
        });
    }
    let inv = T::of_usize(valid).recip();
    let mut total = T::zero();
    for (r, &y) in labels.iter().enumerate() {
        if y == IGNORE {
            continue;
        }
        let p = probs.row(r);
        total += -p[y].ln();
        let g = grad.row_mut(r);
        for (gj, &pj) in g.iter_mut().zip(p) {
            *gj = pj * inv;
        }
        g[y] -= inv;
    }
    Ok(LossOutput {
        value: total * inv,
        grad,
        all_ignored: false,
    })
}

/// Symmetric cross-entropy `α·CE(p, ŷ) + β·CE(ŷ, p)` against hard labels.
///
/// The reverse term clamps the one-hot ŷ to `[floor, 1]`; the forward term
/// floors `p` inside its log.
pub fn sce_loss<T: Scalar>(
    probs: &Tensor2D<T>,
    labels: &[usize],
    alpha: T,
    beta: T,
    floor: T,
) -> Result<LossOutput<T>> {
    let parts = sce_parts(probs, labels, floor)?;
    let mut grad = parts.ce.grad.scale(alpha);
    grad.axpy(beta, &parts.rce.grad)?;
    Ok(LossOutput {
        value: alpha * parts.ce.value + beta * parts.rce.value,
        grad,
        all_ignored: parts.ce.all_ignored,
    })
}

/// The two unweighted halves of [`sce_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceParts<T> {
    pub ce: LossOutput<T>,
    pub rce: LossOutput<T>,
}

pub fn sce_parts<T: Scalar>(probs: &Tensor2D<T>, labels: &[usize], floor: T) -> Result<SceParts<T>> {
    let valid = check_labels(probs, labels, "sce_loss")?;
    let (n, k) = probs.shape();
    let mut ce_grad = Tensor2D::zeros(n, k);
    let mut rce_grad = Tensor2D::zeros(n, k);
    if valid == 0 {
        let zero = |grad| LossOutput {
            value: T::zero(),
            grad,
            all_ignored: true,
        };
        return Ok(SceParts {
            ce: zero(ce_grad),
            rce: zero(rce_grad),
        });
    }
    let inv = T::of_usize(valid).recip();
    // −log of the clamped zero entries of ŷ
    let neg_log_floor = -floor.ln();
    let mut ce = T::zero();
    let mut rce = T::zero();
    for (r, &y) in labels.iter().enumerate() {
        if y == IGNORE {
            continue;
        }
        let p = probs.row(r);
        let py = p[y];
        if py > floor {
            ce += -py.ln();
            let g = ce_grad.row_mut(r);
            for (gj, &pj) in g.iter_mut().zip(p) {
                *gj = pj * inv;
            }
            g[y] -= inv;
        } else {
            ce += neg_log_floor;
        }
        // −Σ_k p_k log ŷ_k = −log(floor)·(1 − p_y)
        rce += neg_log_floor * (T::one() - py);
        // d/dz_j (−A p_y) = −A p_y (δ_jy − p_j)
        let g = rce_grad.row_mut(r);
        for (j, (gj, &pj)) in g.iter_mut().zip(p).enumerate() {
            let delta = if j == y { T::one() } else { T::zero() };
            *gj = -neg_log_floor * py * (delta - pj) * inv;
        }
    }
    Ok(SceParts {
        ce: LossOutput {
            value: ce * inv,
            grad: ce_grad,
            all_ignored: false,
        },
        rce: LossOutput {
            value: rce * inv,
            grad: rce_grad,
            all_ignored: false,
        },
    })
}

/// Symmetric cross-entropy against soft targets `q` (rows of a distribution):
/// `α·(−Σ q log p) + β·(−Σ p log q)`, both logs floored.
pub fn sce_loss_soft<T: Scalar>(
    probs: &Tensor2D<T>,
    targets: &Tensor2D<T>,
    alpha: T,
    beta: T,
    floor: T,
) -> Result<LossOutput<T>> {
    same_shape(probs, targets, "sce_loss_soft")?;
    let (n, k) = probs.shape();
    let mut grad_p = Tensor2D::zeros(n, k);
    if n == 0 {
        return Ok(LossOutput {
            value: T::zero(),
            grad: grad_p,
            all_ignored: true,
        });
    }
    let inv = T::of_usize(n).recip();
    let mut total = T::zero();
    for r in 0..n {
        let p = probs.row(r);
        let q = targets.row(r);
        let g = grad_p.row_mut(r);
        for j in 0..k {
            let (pj, qj) = (p[j], q[j]);
            let log_q = qj.max(floor).ln();
            total += -beta * pj * log_q;
            g[j] = -beta * log_q * inv;
            if pj > floor {
                total += -alpha * qj * pj.ln();
                g[j] += -alpha * qj / pj * inv;
            } else {
                total += -alpha * qj * floor.ln();
            }
        }
    }
    Ok(LossOutput {
        value: total * inv,
        grad: softmax_backward(probs, &grad_p)?,
        all_ignored: false,
    })
}

/// `mean_i Σ_k w log(w / max(z, floor))` with `w` the constant teacher rows.
/// The gradient is w.r.t. the student probabilities `z`.
pub fn kl_consistency<T: Scalar>(teacher: &Tensor2D<T>, student: &Tensor2D<T>, floor: T) -> Result<LossOutput<T>> {
    same_shape(teacher, student, "kl_consistency")?;
    kl_rows(teacher, student, floor)
}

fn kl_rows<T: Scalar>(teacher: &Tensor2D<T>, student: &Tensor2D<T>, floor: T) -> Result<LossOutput<T>> {
    let (n, k) = student.shape();
    let mut grad = Tensor2D::zeros(n, k);
    if n == 0 {
        return Ok(LossOutput {
            value: T::zero(),
            grad,
            all_ignored: true,
        });
    }
    let inv = T::of_usize(n).recip();
    let mut total = T::zero();
    for r in 0..n {
        let w = teacher.row(r);
        let z = student.row(r);
        let g = grad.row_mut(r);
        for j in 0..k {
            if w[j] <= T::zero() {
                continue;
            }
            let zj = z[j].max(floor);
            total += w[j] * (w[j].max(floor).ln() - zj.ln());
            if z[j] > floor {
                g[j] = -w[j] / z[j] * inv;
            }
        }
    }
    Ok(LossOutput {
        value: total * inv,
        grad,
        all_ignored: false,
    })
}

/// Anti-degeneration term `mean_i −Σ_k log max(p(i,k), floor)`; gradient is
/// w.r.t. the logits.
pub fn regularizer<T: Scalar>(probs: &Tensor2D<T>, floor: T) -> Result<LossOutput<T>> {
    let (n, k) = probs.shape();
    let mut grad_p = Tensor2D::zeros(n, k);
    if n == 0 {
        return Ok(LossOutput {
            value: T::zero(),
            grad: grad_p,
            all_ignored: true,
        });
    }
    let inv = T::of_usize(n).recip();
    let mut total = T::zero();
    for r in 0..n {
        let p = probs.row(r);
        let g = grad_p.row_mut(r);
        for j in 0..k {
            if p[j] > floor {
                total += -p[j].ln();
                g[j] = -inv / p[j];
            } else {
                total += -floor.ln();
            }
        }
    }
    Ok(LossOutput {
        value: total * inv,
        grad: softmax_backward(probs, &grad_p)?,
        all_ignored: false,
    })
}

/// Stage-1 objective `ℓ_ce^s + ℓ_sce^t + γ1·ℓ_kl^t + γ2·ℓ_reg^t`.
pub fn total_stage1_loss<T: Scalar>(source_ce: T, target_sce: T, kl: T, reg: T, gamma1: T, gamma2: T) -> T {
    source_ce + target_sce + gamma1 * kl + gamma2 * reg
}

/// Distillation objective and its gradients w.r.t. the student's source and
/// target logits.
#[derive(Debug, Clone, PartialEq)]
pub struct KdLoss<T> {
    pub value: T,
    pub source_ce: T,
    pub target_ce: T,
    pub kl: T,
    pub grad_source: Tensor2D<T>,
    pub grad_target: Tensor2D<T>,
    /// Teacher hard labels `ξ(p_t)` after thresholding.
    pub target_labels: Vec<usize>,
}

/// `ℓ_ce^s(p_s, y_s) + ℓ_ce^t(p_t†, ξ(p_t)) + β·KL(p_t ‖ p_t†)`.
///
/// The teacher probabilities are constants. Rows whose teacher confidence is
/// below `threshold` drop out of the target CE but still count in the KL term.
#[allow(clippy::too_many_arguments)]
pub fn kd_loss<T: Scalar>(
    student_source: &Tensor2D<T>,
    source_labels: &[usize],
    student_target: &Tensor2D<T>,
    teacher_target: &Tensor2D<T>,
    threshold: T,
    kd_beta: T,
    floor: T,
) -> Result<KdLoss<T>> {
    same_shape(student_target, teacher_target, "kd_loss")?;
    let src = ce_loss(student_source, source_labels)?;
    let target_labels = crate::denoise::hard_label(teacher_target, threshold);
    let tgt = ce_loss(student_target, &target_labels)?;
    let kl = kl_rows(teacher_target, student_target, floor)?;
    let mut grad_target = tgt.grad;
    grad_target.axpy(kd_beta, &softmax_backward(student_target, &kl.grad)?)?;
    Ok(KdLoss {
        value: src.value + tgt.value + kd_beta * kl.value,
        source_ce: src.value,
        target_ce: tgt.value,
        kl: kl.value,
        grad_source: src.grad,
        grad_target,
        target_labels,
    })
}
