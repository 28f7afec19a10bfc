//! Synthetic source/target benchmarks with a controllable covariate shift.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::structure::stream_rng;
use crate::tensor::{argmax, Tensor2D};

/// Class-conditional generator for the source domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ClassShape {
    /// Isotropic Gaussian per class.
    Gaussian { means: Vec<Vec<f64>>, stds: Vec<f64> },
    /// Two interleaving half circles (2 classes, 2-D) with Gaussian noise.
    Moons { noise: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    /// Rotation in the plane of the first two coordinates, degrees.
    pub rotation_deg: f64,
    pub translation: Vec<f64>,
}

impl DomainShift {
    pub fn identity(dim: usize) -> Self {
        Self {
            rotation_deg: 0.0,
            translation: vec![0.0; dim],
        }
    }

    pub fn apply(&self, point: &mut [f64]) {
        if point.len() >= 2 && self.rotation_deg != 0.0 {
            let (s, c) = self.rotation_deg.to_radians().sin_cos();
            let (x, y) = (point[0], point[1]);
            point[0] = c * x - s * y;
            point[1] = s * x + c * y;
        }
        for (p, t) in point.iter_mut().zip(&self.translation) {
            *p += t;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub classes: usize,
    pub dim: usize,
    pub shape: ClassShape,
    pub shift: DomainShift,
    pub class_freqs: Vec<f64>,
    pub n_source: usize,
    pub n_target: usize,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes == 0 || self.dim == 0 {
            return bad("classes and dim must be positive".into());
        }
        if self.class_freqs.len() != self.classes {
            return bad(format!("{} class frequencies for {} classes", self.class_freqs.len(), self.classes));
        }
        let total: f64 = self.class_freqs.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.class_freqs.iter().any(|&f| f < 0.0) {
            return bad("class frequencies must be nonnegative and sum to 1".into());
        }
        if self.shift.translation.len() != self.dim {
            return bad("translation length must equal dim".into());
        }
        match &self.shape {
            ClassShape::Gaussian { means, stds } => {
                if means.len() != self.classes || stds.len() != self.classes {
                    return bad("one mean and one std per class required".into());
                }
                if means.iter().any(|m| m.len() != self.dim) {
                    return bad("mean vectors must have length dim".into());
                }
                if stds.iter().any(|&s| !(s > 0.0)) {
                    return bad("class stds must be positive".into());
                }
            }
            ClassShape::Moons { noise } => {
                if self.classes != 2 || self.dim != 2 {
                    return bad("moons need 2 classes in 2-D".into());
                }
                if !(*noise >= 0.0) {
                    return bad("moons noise must be nonnegative".into());
                }
            }
        }
        Ok(())
    }

    /// Named stock benchmarks.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "gauss-shift" => Ok(Self::gauss_shift()),
            "moons-shift" => Ok(Self::moons_shift()),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    /// Four 2-D Gaussian classes; the target is the source rotated by 32°
    /// and translated.
    pub fn gauss_shift() -> Self {
        Self {
            name: "gauss-shift".into(),
            classes: 4,
            dim: 2,
            shape: ClassShape::Gaussian {
                means: vec![
                    vec![2.5, 2.5],
                    vec![-2.5, 2.5],
                    vec![-2.5, -2.5],
                    vec![2.5, -2.5],
                ],
                stds: vec![0.6, 0.6, 0.6, 0.6],
            },
            shift: DomainShift {
                rotation_deg: 32.0,
                translation: vec![0.3, 0.2],
            },
            class_freqs: vec![0.25, 0.25, 0.25, 0.25],
            n_source: 1000,
            n_target: 1000,
            seed: 0,
        }
    }

    /// Two-moons rotated by 55° and nudged along x.
    pub fn moons_shift() -> Self {
        Self {
            name: "moons-shift".into(),
            classes: 2,
            dim: 2,
            shape: ClassShape::Moons { noise: 0.1 },
            shift: DomainShift {
                rotation_deg: 55.0,
                translation: vec![0.3, 0.0],
            },
            class_freqs: vec![0.5, 0.5],
            n_source: 1000,
            n_target: 1000,
            seed: 0,
        }
    }

    fn sample_point<R: Rng>(&self, class: usize, rng: &mut R) -> Vec<f64> {
        match &self.shape {
            ClassShape::Gaussian { means, stds } => means[class]
                .iter()
                .map(|&m| {
                    let n: f64 = StandardNormal.sample(rng);
                    m + stds[class] * n
                })
                .collect(),
            ClassShape::Moons { noise } => {
                let t = rng.random_range(0.0..std::f64::consts::PI);
                let (x, y) = if class == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                // centre the pair so the rotation acts about the data centroid
                let mut p = vec![x - 0.5, y - 0.25];
                for v in &mut p {
                    let n: f64 = StandardNormal.sample(rng);
                    *v += noise * n;
                }
                p
            }
        }
    }

    /// Per-class standard deviation (Gaussian) or noise level (moons).
    pub fn spread(&self) -> f64 {
        match &self.shape {
            ClassShape::Gaussian { stds, .. } => stds.first().copied().unwrap_or(0.0),
            ClassShape::Moons { noise } => *noise,
        }
    }

    /// Sets every class spread to `v`.
    pub fn set_spread(&mut self, v: f64) {
        match &mut self.shape {
            ClassShape::Gaussian { stds, .. } => stds.iter_mut().for_each(|s| *s = v),
            ClassShape::Moons { noise } => *noise = v,
        }
    }

    /// Class means of the source distribution before any shift.
    pub fn source_class_means(&self) -> Vec<Vec<f64>> {
        match &self.shape {
            ClassShape::Gaussian { means, .. } => means.clone(),
            ClassShape::Moons { .. } => {
                let mean_cos = 0.0;
                let mean_sin = 2.0 / std::f64::consts::PI;
                vec![
                    vec![mean_cos - 0.5, mean_sin - 0.25],
                    vec![1.0 - mean_cos - 0.5, 0.5 - mean_sin - 0.25],
                ]
            }
        }
    }
}

/// Ground-truth target labels. They are only read by the evaluation code in
/// [`crate::metrics`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HiddenLabels(Vec<usize>);

impl HiddenLabels {
    pub fn new(labels: Vec<usize>) -> Self {
        Self(labels)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub(crate) fn labels(&self) -> &[usize] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet<T> {
    pub x: Tensor2D<T>,
    pub y: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark<T> {
    pub spec: DomainSpec,
    pub source: LabeledSet<T>,
    pub target_x: Tensor2D<T>,
    pub target_truth: HiddenLabels,
}

fn sample_labels<R: Rng>(freqs: &[f64], n: usize, rng: &mut R) -> Vec<usize> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (k, &f) in freqs.iter().enumerate() {
                acc += f;
                if u < acc {
                    return k;
                }
            }
            freqs.iter().rposition(|&f| f > 0.0).unwrap_or(0)
        })
        .collect()
}

fn sample_domain<T: Scalar, R: Rng>(
    spec: &DomainSpec,
    n: usize,
    shift: Option<&DomainShift>,
    rng: &mut R,
) -> (Tensor2D<T>, Vec<usize>) {
    let y = sample_labels(&spec.class_freqs, n, rng);
    let mut data = Vec::with_capacity(n * spec.dim);
    for &k in &y {
        let mut p = spec.sample_point(k, rng);
        if let Some(s) = shift {
            s.apply(&mut p);
        }
        data.extend(p.into_iter().map(T::of));
    }
    let x = Tensor2D::from_vec(n, spec.dim, data).expect("sampled rows have dim columns");
    (x, y)
}

/// Draws both domains. The target shares the source's class-conditional law
/// pushed through `spec.shift`.
pub fn generate<T: Scalar>(spec: &DomainSpec) -> Result<Benchmark<T>> {
    spec.validate()?;
    let mut src_rng = stream_rng(&[spec.seed, 0x5_0c]);
    let mut tgt_rng = stream_rng(&[spec.seed, 0x7a_7e]);
    let (sx, sy) = sample_domain(spec, spec.n_source, None, &mut src_rng);
    let (tx, ty) = sample_domain(spec, spec.n_target, Some(&spec.shift), &mut tgt_rng);
    Ok(Benchmark {
        spec: spec.clone(),
        source: LabeledSet { x: sx, y: sy },
        target_x: tx,
        target_truth: HiddenLabels(ty),
    })
}

/// Flips the labels of the `round(rate·N)` samples with the smallest model
/// margin (top score minus runner-up). A flipped label becomes the
/// highest-scoring class other than the current one.
pub fn inject_boundary_noise<T, F>(labels: &[usize], features: &Tensor2D<T>, model: F, rate: f64) -> Result<Vec<usize>>
where
    T: Scalar,
    F: Fn(&Tensor2D<T>) -> Result<Tensor2D<T>>,
{
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("noise rate must lie in [0, 1), got {rate}")));
    }
    if labels.len() != features.rows() {
        return Err(Error::dim("inject_boundary_noise", features.rows(), labels.len()));
    }
    let scores = model(features)?;
    if scores.rows() != labels.len() || scores.cols() < 2 {
        return Err(Error::dim(
            "inject_boundary_noise",
            format!("{} rows × ≥2 classes", labels.len()),
            format!("{:?}", scores.shape()),
        ));
    }
    let order = boundary_order(&scores);
    let flips = (rate * labels.len() as f64).round() as usize;
    let mut out = labels.to_vec();
    for &i in order.iter().take(flips) {
        let row = scores.row(i);
        let mut best = None;
        for (k, &s) in row.iter().enumerate() {
            if k == labels[i] {
                continue;
            }
            match best {
                Some((_, bs)) if s <= bs => {}
                _ => best = Some((k, s)),
            }
        }
        out[i] = best.map(|(k, _)| k).expect("at least two classes");
    }
    Ok(out)
}

/// Sample indices sorted by ascending margin, ties by index.
pub fn boundary_order<T: Scalar>(scores: &Tensor2D<T>) -> Vec<usize> {
    let margins: Vec<T> = scores.row_iter().map(margin).collect();
    let mut order: Vec<usize> = (0..scores.rows()).collect();
    order.sort_by(|&a, &b| margins[a].partial_cmp(&margins[b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    order
}

fn margin<T: Scalar>(row: &[T]) -> T {
    let top = argmax(row);
    let second = row
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != top)
        .map(|(_, &v)| v)
        .fold(T::neg_infinity(), T::max);
    row[top] - second
}

/// Shuffled mini-batch index lists for one epoch.
pub fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(&[seed, 0xba7c, epoch]);
    idx.shuffle(&mut rng);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

fn write_set<T: Scalar, W: Write>(x: &Tensor2D<T>, y: &[usize], mut out: W) -> Result<()> {
    let cols: Vec<String> = (0..x.cols()).map(|j| format!("x{j}")).collect();
    writeln!(out, "{},y", cols.join(","))?;
    for (r, &label) in y.iter().enumerate() {
        let vals: Vec<String> = x.row(r).iter().map(|v| format!("{}", v.as_f64())).collect();
        writeln!(out, "{},{label}", vals.join(","))?;
    }
    Ok(())
}

fn read_set<T: Scalar, R: BufRead>(input: R, dim: usize) -> Result<(Tensor2D<T>, Vec<usize>)> {
    let mut lines = input.lines();
    let header = lines.next().ok_or_else(|| Error::Schema("empty dataset CSV".into()))??;
    let cols: Vec<&str> = header.trim().split(',').collect();
    if cols.len() != dim + 1 || cols.last() != Some(&"y") {
        return Err(Error::Schema(format!("expected {dim} feature columns and y, got {header:?}")));
    }
    let mut data = Vec::new();
    let mut y = Vec::new();
    for (ln, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != dim + 1 {
            return Err(Error::Schema(format!("row {} has {} fields", ln + 2, fields.len())));
        }
        for f in &fields[..dim] {
            let v: f64 = f
                .parse()
                .map_err(|e| Error::Parse(format!("row {}: {f:?}: {e}", ln + 2)))?;
            data.push(T::of(v));
        }
        y.push(
            fields[dim]
                .parse()
                .map_err(|e| Error::Parse(format!("row {} label: {e}", ln + 2)))?,
        );
    }
    Ok((Tensor2D::from_vec(y.len(), dim, data)?, y))
}

/// Writes `source.csv`, `target.csv` (with ground truth, for evaluation and
/// plotting only) and `spec.json` into `dir`.
pub fn export<T: Scalar>(bench: &Benchmark<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_set(&bench.source.x, &bench.source.y, fs::File::create(dir.join("source.csv"))?)?;
    write_set(&bench.target_x, bench.target_truth.labels(), fs::File::create(dir.join("target.csv"))?)?;
    let mut f = fs::File::create(dir.join("spec.json"))?;
    serde_json::to_writer_pretty(&mut f, &bench.spec)?;
    writeln!(f)?;
    Ok(())
}

pub fn import<T: Scalar>(dir: &Path) -> Result<Benchmark<T>> {
    let spec: DomainSpec = serde_json::from_reader(BufReader::new(fs::File::open(dir.join("spec.json"))?))?;
    spec.validate()?;
    let (sx, sy) = read_set(BufReader::new(fs::File::open(dir.join("source.csv"))?), spec.dim)?;
    let (tx, ty) = read_set(BufReader::new(fs::File::open(dir.join("target.csv"))?), spec.dim)?;
    Ok(Benchmark {
        spec,
        source: LabeledSet { x: sx, y: sy },
        target_x: tx,
        target_truth: HiddenLabels(ty),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        DomainSpec::gauss_shift().validate().unwrap();
        DomainSpec::moons_shift().validate().unwrap();
        assert!(DomainSpec::preset("nope").is_err());
    }

    #[test]
    fn generation_is_seeded() {
        let a: Benchmark<f64> = generate(&DomainSpec::gauss_shift()).unwrap();
        let b: Benchmark<f64> = generate(&DomainSpec::gauss_shift()).unwrap();
        assert_eq!(a, b);
        let mut spec = DomainSpec::gauss_shift();
        spec.seed = 1;
        let c: Benchmark<f64> = generate(&spec).unwrap();
        assert_ne!(a.source.x, c.source.x);
    }

    #[test]
    fn bad_freqs_rejected() {
        let mut spec = DomainSpec::gauss_shift();
        spec.class_freqs = vec![0.5, 0.5, 0.5, 0.5];
        assert!(generate::<f64>(&spec).is_err());
    }

    #[test]
    fn shift_rotates_then_translates() {
        let s = DomainShift {
            rotation_deg: 90.0,
            translation: vec![1.0, 0.0],
        };
        let mut p = vec![1.0, 0.0];
        s.apply(&mut p);
        assert!((p[0] - 1.0).abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12);
    }

    fn linear_scores(x: &Tensor2D<f64>) -> Result<Tensor2D<f64>> {
        // two classes split by the line x0 = 0
        let rows: Vec<Vec<f64>> = x.row_iter().map(|r| vec![-r[0], r[0]]).collect();
        Tensor2D::from_rows(&rows)
    }

    #[test]
    fn zero_rate_is_identity() {
        let x = Tensor2D::from_f64_rows(&[&[0.1, 0.0], &[-2.0, 1.0]]).unwrap();
        let y = inject_boundary_noise(&[1, 0], &x, linear_scores, 0.0).unwrap();
        assert_eq!(y, vec![1, 0]);
    }

    #[test]
    fn flips_smallest_margins() {
        let x = Tensor2D::from_f64_rows(&[&[3.0, 0.0], &[0.1, 0.0], &[-0.2, 0.0], &[-4.0, 0.0], &[1.0, 0.0]]).unwrap();
        let y = inject_boundary_noise(&[1, 1, 0, 0, 1], &x, linear_scores, 0.4).unwrap();
        assert_eq!(y, vec![1, 0, 1, 0, 1]);
    }

    #[test]
    fn epoch_batches_cover_everything() {
        let b = epoch_batches(10, 4, 1, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_ne!(epoch_batches(10, 4, 1, 1), b);
    }

    #[test]
    fn csv_round_trip() {
        let mut spec = DomainSpec::moons_shift();
        spec.n_source = 20;
        spec.n_target = 15;
        let bench: Benchmark<f64> = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export(&bench, dir.path()).unwrap();
        let back: Benchmark<f64> = import(dir.path()).unwrap();
        assert_eq!(back, bench);
    }
}
