//! Class prototypes: feature-space centroids tracked by exponential moving
//! average.

use std::io::Write;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{euclidean, Tensor2D};
use crate::IGNORE;

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank<T> {
    centroids: Tensor2D<T>,
    momentum: T,
    seen: Vec<bool>,
}

/// Per-class means of one batch together with the member counts.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchCentroids<T> {
    pub centroids: Tensor2D<T>,
    pub counts: Vec<usize>,
}

impl<T: Scalar> BatchCentroids<T> {
    pub fn present(&self, k: usize) -> bool {
        self.counts[k] > 0
    }
}

/// Per-class mean of `features` over rows labelled `k`. Rows labelled
/// [`IGNORE`] are skipped; classes without members get a zero row and count 0.
pub fn batch_centroids<T: Scalar>(
    features: &Tensor2D<T>,
    labels: &[usize],
    classes: usize,
) -> Result<BatchCentroids<T>> {
    if labels.len() != features.rows() {
        return Err(Error::dim("batch_centroids", features.rows(), labels.len()));
    }
    let d = features.cols();
    let mut sums = Tensor2D::zeros(classes, d);
    let mut counts = vec![0usize; classes];
    for (r, &y) in labels.iter().enumerate() {
        if y == IGNORE {
            continue;
        }
        if y >= classes {
            return Err(Error::dim("batch_centroids", format!("label < {classes}"), y));
        }
        counts[y] += 1;
        for (s, &v) in sums.row_mut(y).iter_mut().zip(features.row(r)) {
            *s += v;
        }
    }
    for (k, &c) in counts.iter().enumerate() {
        if c > 0 {
            let inv = T::of_usize(c).recip();
            for s in sums.row_mut(k) {
                *s *= inv;
            }
        }
    }
    Ok(BatchCentroids {
        centroids: sums,
        counts,
    })
}

impl<T: Scalar> PrototypeBank<T> {
    /// Dataset-level initialization: centroid `k` is the mean feature of every
    /// sample whose hard label is `k`. Classes with no sample keep a zero
    /// centroid and are marked unseen.
    pub fn init(features: &Tensor2D<T>, labels: &[usize], classes: usize, momentum: T) -> Result<Self> {
        check_momentum(momentum)?;
        let batch = batch_centroids(features, labels, classes)?;
        Ok(Self {
            seen: batch.counts.iter().map(|&c| c > 0).collect(),
            centroids: batch.centroids,
            momentum,
        })
    }

    /// Same as [`PrototypeBank::init`] but consumes a stream of feature chunks,
    /// accumulating sums so the whole dataset never needs to be materialised.
    pub fn init_streaming<'a, I>(chunks: I, classes: usize, dim: usize, momentum: T) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a Tensor2D<T>, &'a [usize])>,
    {
        check_momentum(momentum)?;
        let mut sums = Tensor2D::zeros(classes, dim);
        let mut counts = vec![0usize; classes];
        for (feats, labels) in chunks {
            if feats.cols() != dim {
                return Err(Error::dim("PrototypeBank::init_streaming", dim, feats.cols()));
            }
            let b = batch_centroids(feats, labels, classes)?;
            for k in 0..classes {
                if b.counts[k] == 0 {
                    continue;
                }
                let c = T::of_usize(b.counts[k]);
                for (s, &m) in sums.row_mut(k).iter_mut().zip(b.centroids.row(k)) {
                    *s += m * c;
                }
                counts[k] += b.counts[k];
            }
        }
        for (k, &c) in counts.iter().enumerate() {
            if c > 0 {
                let inv = T::of_usize(c).recip();
                for s in sums.row_mut(k) {
                    *s *= inv;
                }
            }
        }
        Ok(Self {
            seen: counts.iter().map(|&c| c > 0).collect(),
            centroids: sums,
            momentum,
        })
    }

    /// Bank with explicit centroids, all classes marked seen.
    pub fn from_centroids(centroids: Tensor2D<T>, momentum: T) -> Result<Self> {
        check_momentum(momentum)?;
        if !centroids.all_finite() {
            return Err(Error::NonFinite("prototype centroids".into()));
        }
        Ok(Self {
            seen: vec![true; centroids.rows()],
            centroids,
            momentum,
        })
    }

    pub fn centroids(&self) -> &Tensor2D<T> {
        &self.centroids
    }

    pub fn seen(&self) -> &[bool] {
        &self.seen
    }

    pub fn momentum(&self) -> T {
        self.momentum
    }

    pub fn classes(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn any_seen(&self) -> bool {
        self.seen.iter().any(|&s| s)
    }

    /// `η ← λη + (1−λ)η′` for classes present in the batch. A class seen for
    /// the first time adopts its batch centroid outright.
    pub fn ema_update(&mut self, batch: &BatchCentroids<T>) -> Result<()> {
        if batch.centroids.shape() != self.centroids.shape() || batch.counts.len() != self.classes() {
            return Err(Error::dim(
                "PrototypeBank::ema_update",
                format!("{:?}", self.centroids.shape()),
                format!("{:?}", batch.centroids.shape()),
            ));
        }
        let lambda = self.momentum;
        let fresh = T::one() - lambda;
        for k in 0..self.classes() {
            if !batch.present(k) {
                continue;
            }
            let src = batch.centroids.row(k);
            if self.seen[k] {
                for (e, &b) in self.centroids.row_mut(k).iter_mut().zip(src) {
                    *e = lambda * *e + fresh * b;
                }
            } else {
                self.centroids.row_mut(k).copy_from_slice(src);
                self.seen[k] = true;
            }
        }
        Ok(())
    }

    /// Euclidean feature-to-centroid distances; unseen classes get `+∞`.
    pub fn distances(&self, features: &Tensor2D<T>) -> Result<Tensor2D<T>> {
        if features.cols() != self.dim() {
            return Err(Error::dim("PrototypeBank::distances", self.dim(), features.cols()));
        }
        let k = self.classes();
        let mut out = Tensor2D::zeros(features.rows(), k);
        for r in 0..features.rows() {
            let f = features.row(r);
            for c in 0..k {
                let d = if self.seen[c] {
                    euclidean(f, self.centroids.row(c))
                } else {
                    T::infinity()
                };
                out.set(r, c, d);
            }
        }
        Ok(out)
    }

    /// CSV snapshot: `class,seen,c0,c1,…`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let header: Vec<String> = (0..self.dim()).map(|j| format!("c{j}")).collect();
        writeln!(out, "class,seen,{}", header.join(","))?;
        for k in 0..self.classes() {
            let vals: Vec<String> = self
                .centroids
                .row(k)
                .iter()
                .map(|v| format!("{}", v.as_f64()))
                .collect();
            writeln!(out, "{k},{},{}", u8::from(self.seen[k]), vals.join(","))?;
        }
        Ok(())
    }
}

fn check_momentum<T: Scalar>(m: T) -> Result<()> {
    if !(m >= T::zero() && m < T::one()) {
        return Err(Error::Config(format!("prototype momentum must lie in [0, 1), got {m}")));
    }
    Ok(())
}
