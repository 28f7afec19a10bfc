//! Online pseudo-label rectification against a frozen set of soft predictions.

use std::io::Write;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{argmax, Tensor2D};
use crate::IGNORE;

/// Argmax per row (ties to the lowest class). Rows whose largest probability
/// is below `threshold` map to [`IGNORE`].
pub fn hard_label<T: Scalar>(probs: &Tensor2D<T>, threshold: T) -> Vec<usize> {
    probs
        .row_iter()
        .map(|row| {
            let k = argmax(row);
            if row[k] < threshold {
                IGNORE
            } else {
                k
            }
        })
        .collect()
}

/// `softmax(−d/τ)` per row over the finite entries; `+∞` entries get weight 0.
///
/// This one kernel backs both the label modulation weights and the
/// prototypical soft assignments.
pub fn prototype_softmax<T: Scalar>(dist: &Tensor2D<T>, tau: T) -> Result<Tensor2D<T>> {
    if !(tau > T::zero()) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let mut out = Tensor2D::zeros(dist.rows(), dist.cols());
    for r in 0..dist.rows() {
        let d = dist.row(r);
        let min = d
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .fold(T::infinity(), T::min);
        if !min.is_finite() {
            return Err(Error::State(format!(
                "row {r}: no finite prototype distance (all classes unseen)"
            )));
        }
        let o = out.row_mut(r);
        let mut total = T::zero();
        for (w, &dk) in o.iter_mut().zip(d) {
            *w = if dk.is_finite() {
                (-(dk - min) / tau).exp()
            } else {
                T::zero()
            };
            total += *w;
        }
        for w in o.iter_mut() {
            *w /= total;
        }
    }
    Ok(out)
}

/// Class-wise trust weights ω from feature-to-prototype distances.
pub fn modulation_weights<T: Scalar>(dist: &Tensor2D<T>, tau: T) -> Result<Tensor2D<T>> {
    prototype_softmax(dist, tau)
}

/// ω ⊙ p₀ without normalization.
pub fn weighted_predictions<T: Scalar>(boilerplate: &Tensor2D<T>, weights: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    if boilerplate.shape() != weights.shape() {
        return Err(Error::dim(
            "weighted_predictions",
            format!("{:?}", boilerplate.shape()),
            format!("{:?}", weights.shape()),
        ));
    }
    let data = boilerplate
        .data()
        .iter()
        .zip(weights.data())
        .map(|(&p, &w)| p * w)
        .collect();
    Tensor2D::from_vec(boilerplate.rows(), boilerplate.cols(), data)
}

/// Rows of ω ⊙ p₀ rescaled to sum to one (soft rectified labels). A row with
/// zero total mass falls back to the uniform distribution.
pub fn rectified_soft<T: Scalar>(boilerplate: &Tensor2D<T>, weights: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    let mut q = weighted_predictions(boilerplate, weights)?;
    let k = q.cols();
    for r in 0..q.rows() {
        let row = q.row_mut(r);
        let total: T = row.iter().copied().sum();
        if total > T::zero() {
            row.iter_mut().for_each(|v| *v /= total);
        } else {
            row.iter_mut().for_each(|v| *v = T::of_usize(k).recip());
        }
    }
    Ok(q)
}

/// Hard rectified labels `argmax_k ω(i,k)·p₀(i,k)`.
///
/// With `threshold > 0` the product row is renormalized first and rows whose
/// top mass is below the threshold become [`IGNORE`]. A zero threshold never
/// ignores a row.
pub fn rectify<T: Scalar>(boilerplate: &Tensor2D<T>, weights: &Tensor2D<T>, threshold: T) -> Result<Vec<usize>> {
    let prod = weighted_predictions(boilerplate, weights)?;
    Ok(prod
        .row_iter()
        .map(|row| {
            let k = argmax(row);
            if threshold > T::zero() {
                let total: T = row.iter().copied().sum();
                if !(total > T::zero()) || row[k] / total < threshold {
                    return IGNORE;
                }
            }
            k
        })
        .collect())
}

/// Frozen soft predictions p₀ plus the current rectified hard labels.
#[derive(Debug, Clone)]
pub struct PseudoLabelStore<T> {
    boilerplate: Option<Tensor2D<T>>,
    current: Vec<usize>,
    temperature: T,
}

impl<T: Scalar> PseudoLabelStore<T> {
    pub fn new(temperature: T) -> Result<Self> {
        if !(temperature > T::zero()) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        Ok(Self {
            boilerplate: None,
            current: Vec::new(),
            temperature,
        })
    }

    /// Installs p₀. The store accepts exactly one write.
    pub fn set_boilerplate(&mut self, probs: Tensor2D<T>) -> Result<()> {
        if self.boilerplate.is_some() {
            return Err(Error::State("boilerplate predictions are write-once".into()));
        }
        let tol = T::of(1e-6);
        for (i, row) in probs.row_iter().enumerate() {
            let s: T = row.iter().copied().sum();
            if (s - T::one()).abs() > tol || row.iter().any(|v| !v.is_finite()) {
                return Err(Error::State(format!("boilerplate row {i} is not a distribution")));
            }
        }
        self.current = hard_label(&probs, T::zero());
        self.boilerplate = Some(probs);
        Ok(())
    }

    pub fn boilerplate(&self) -> Result<&Tensor2D<T>> {
        self.boilerplate
            .as_ref()
            .ok_or_else(|| Error::State("boilerplate predictions not generated".into()))
    }

    pub fn temperature(&self) -> T {
        self.temperature
    }

    pub fn current(&self) -> &[usize] {
        &self.current
    }

    pub fn len(&self) -> usize {
        self.current.len()
    }

    pub fn is_empty(&self) -> bool {
        self.current.is_empty()
    }

    /// Boilerplate argmax per sample.
    pub fn initial_labels(&self) -> Result<Vec<usize>> {
        Ok(hard_label(self.boilerplate()?, T::zero()))
    }

    /// Recomputes the rectified labels of the samples in `indices` from their
    /// boilerplate rows and the modulation weights `weights` (one row per index).
    pub fn rectify_rows(&mut self, indices: &[usize], weights: &Tensor2D<T>, threshold: T) -> Result<Vec<usize>> {
        let p0 = self.boilerplate()?.select_rows(indices);
        let labels = rectify(&p0, weights, threshold)?;
        for (&i, &y) in indices.iter().zip(&labels) {
            self.current[i] = y;
        }
        Ok(labels)
    }
}

/// One row of the label dump.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRecord {
    pub sample: usize,
    pub boilerplate: usize,
    pub rectified: usize,
    pub max_weight: f64,
    pub correct: Option<bool>,
}

/// CSV: `sample,boilerplate,rectified,max_weight,correct`. Ignored labels are
/// written as `-1`; `correct` is empty when no ground truth was supplied.
pub fn write_label_dump<W: Write>(records: &[LabelRecord], mut out: W) -> Result<()> {
    writeln!(out, "sample,boilerplate,rectified,max_weight,correct")?;
    let lab = |y: usize| {
        if y == IGNORE {
            "-1".to_string()
        } else {
            y.to_string()
        }
    };
    for r in records {
        let correct = match r.correct {
            Some(true) => "1",
            Some(false) => "0",
            None => "",
        };
        writeln!(
            out,
            "{},{},{},{:.6},{}",
            r.sample,
            lab(r.boilerplate),
            lab(r.rectified),
            r.max_weight,
            correct
        )?;
    }
    Ok(())
}
