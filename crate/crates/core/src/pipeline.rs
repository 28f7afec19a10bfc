//! Training orchestration: source-only warm-up, denoised self-training with
//! structure learning, and repeated distillation into a fresh student.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, LabelForm, LabelMode, Plateau, PretrainConfig, ProtoInit, StageConfig, StageKind, StudentInit};
use crate::data::{epoch_batches, generate, Benchmark, HiddenLabels, LabeledSet};
use crate::denoise::{hard_label, modulation_weights, rectified_soft, rectify, LabelRecord, PseudoLabelStore};
use crate::error::{Error, Result};
use crate::losses::{ce_loss, kd_loss, regularizer, sce_loss, sce_loss_soft, total_stage1_loss};
use crate::metrics::{evaluate, proto_drift, IouReport};
use crate::nn::{save_checkpoint, EmaEncoder, Gradients, Network, Upstream};
use crate::proto::{batch_centroids, PrototypeBank};
use crate::scalar::Scalar;
use crate::structure::{consistency_step, splitmix, stream_rng, AugmentKey};
use crate::tensor::{argmax, Tensor2D};

/// One row of the metrics CSV. Loss columns hold the mean over the
/// iterations since the previous row. Distillation rows put the target CE in
/// `sce_t` and the teacher KL in `kl`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub stage: String,
    pub ce_s: f64,
    pub sce_t: f64,
    pub kl: f64,
    pub reg: f64,
    pub total: f64,
    pub source_acc: f64,
    pub target_acc: f64,
    pub pseudo_acc: f64,
    pub proto_drift: f64,
    pub target_miou: f64,
    pub pseudo_miou: f64,
}

pub const METRICS_HEADER: &str =
    "iter,stage,ce_s,sce_t,kl,reg,total,source_acc,target_acc,pseudo_acc,proto_drift,target_miou,pseudo_miou";

fn cell(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.8}")
    } else {
        "nan".into()
    }
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.iter,
            self.stage,
            cell(self.ce_s),
            cell(self.sce_t),
            cell(self.kl),
            cell(self.reg),
            cell(self.total),
            cell(self.source_acc),
            cell(self.target_acc),
            cell(self.pseudo_acc),
            cell(self.proto_drift),
            cell(self.target_miou),
            cell(self.pseudo_miou),
        )
    }
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], mut out: W) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv_line())?;
    }
    Ok(())
}

/// Gradient descent with optional heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    momentum: T,
    velocity: Option<Gradients<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: T) -> Self {
        Self {
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, net: &mut Network<T>, grads: &Gradients<T>, lr: T) -> Result<()> {
        if !grads.all_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        if self.momentum == T::zero() {
            net.apply_gradients(grads, lr);
        } else {
            let v = self.velocity.get_or_insert_with(|| Gradients::zeros_like(net));
            let mut next = grads.clone();
            next.axpy(self.momentum, v);
            *v = next;
            net.apply_gradients(v, lr);
        }
        if !net.all_finite() {
            return Err(Error::NonFinite("network parameters after update".into()));
        }
        Ok(())
    }
}

/// Training inputs. `truth` is consumed only by evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Domains<'a, T> {
    pub source: &'a LabeledSet<T>,
    pub target_x: &'a Tensor2D<T>,
    pub truth: Option<&'a HiddenLabels>,
    pub classes: usize,
}

impl<'a, T: Scalar> Domains<'a, T> {
    pub fn from_benchmark(b: &'a Benchmark<T>) -> Self {
        Self {
            source: &b.source,
            target_x: &b.target_x,
            truth: Some(&b.target_truth),
            classes: b.spec.classes,
        }
    }
}

/// Scores at one evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPoint {
    pub source_acc: f64,
    pub target: Option<IouReport>,
    pub pseudo: Option<IouReport>,
    pub proto_drift: f64,
}

impl EvalPoint {
    pub fn target_acc(&self) -> f64 {
        self.target.as_ref().map_or(f64::NAN, |r| r.accuracy)
    }

    pub fn target_miou(&self) -> f64 {
        self.target.as_ref().map_or(f64::NAN, |r| r.mean_iou)
    }

    pub fn pseudo_acc(&self) -> f64 {
        self.pseudo.as_ref().map_or(f64::NAN, |r| r.accuracy)
    }
}

pub fn predict<T: Scalar>(net: &Network<T>, x: &Tensor2D<T>) -> Result<Vec<usize>> {
    Ok(hard_label(&net.forward(x)?.probs, T::zero()))
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return f64::NAN;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

fn eval_network<T: Scalar>(net: &Network<T>, d: &Domains<'_, T>) -> Result<EvalPoint> {
    let source_acc = accuracy(&predict(net, &d.source.x)?, &d.source.y);
    let target = match d.truth {
        Some(t) => Some(evaluate(&predict(net, d.target_x)?, t, d.classes)?),
        None => None,
    };
    Ok(EvalPoint {
        source_acc,
        target,
        pseudo: None,
        proto_drift: f64::NAN,
    })
}

#[derive(Debug, Clone, Copy, Default)]
struct LossMeans {
    sums: [f64; 5],
    count: usize,
}

impl LossMeans {
    fn push(&mut self, parts: [f64; 5]) {
        for (s, p) in self.sums.iter_mut().zip(parts) {
            *s += p;
        }
        self.count += 1;
    }

    fn take(&mut self) -> [f64; 5] {
        let out = if self.count == 0 {
            [f64::NAN; 5]
        } else {
            self.sums.map(|s| s / self.count as f64)
        };
        *self = Self::default();
        out
    }
}

/// Collects metrics rows across stages with a global iteration counter.
#[derive(Debug, Clone)]
pub struct Recorder {
    pub rows: Vec<MetricsRow>,
    pub iter: usize,
    pub eval_interval: usize,
    losses: LossMeans,
}

impl Recorder {
    pub fn new(eval_interval: usize) -> Self {
        Self {
            rows: Vec::new(),
            iter: 0,
            eval_interval: eval_interval.max(1),
            losses: LossMeans::default(),
        }
    }

    fn tick(&mut self, parts: [f64; 5]) -> bool {
        self.losses.push(parts);
        self.iter += 1;
        self.iter % self.eval_interval == 0
    }

    fn record(&mut self, stage: &str, e: &EvalPoint) {
        if self.rows.last().is_some_and(|r| r.iter == self.iter && r.stage == stage) {
            return;
        }
        let [ce_s, sce_t, kl, reg, total] = self.losses.take();
        self.rows.push(MetricsRow {
            iter: self.iter,
            stage: stage.to_string(),
            ce_s,
            sce_t,
            kl,
            reg,
            total,
            source_acc: e.source_acc,
            target_acc: e.target_acc(),
            pseudo_acc: e.pseudo_acc(),
            proto_drift: e.proto_drift,
            target_miou: e.target_miou(),
            pseudo_miou: e.pseudo.as_ref().map_or(f64::NAN, |r| r.mean_iou),
        });
    }

    pub fn stage_rows<'a>(&'a self, stage: &'a str) -> impl Iterator<Item = &'a MetricsRow> + 'a {
        self.rows.iter().filter(move |r| r.stage == stage)
    }
}

fn check_finite(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Endless shuffled stream of source mini-batches.
struct SourceBatches {
    n: usize,
    size: usize,
    seed: u64,
    epoch: u64,
    queue: Vec<Vec<usize>>,
}

impl SourceBatches {
    fn new(n: usize, size: usize, seed: u64) -> Self {
        Self {
            n,
            size,
            seed,
            epoch: 0,
            queue: Vec::new(),
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.queue.is_empty() {
            self.queue = epoch_batches(self.n, self.size, self.seed ^ 0x50_75_72_63, self.epoch);
            self.queue.reverse();
            self.epoch += 1;
        }
        self.queue.pop().unwrap_or_default()
    }
}

fn source_ce_step<T: Scalar>(
    net: &mut Network<T>,
    opt: &mut Sgd<T>,
    source: &LabeledSet<T>,
    idx: &[usize],
    lr: T,
) -> Result<f64> {
    let x = source.x.select_rows(idx);
    let y: Vec<usize> = idx.iter().map(|&i| source.y[i]).collect();
    let out = net.forward_train(&x)?;
    let loss = ce_loss(&out.probs, &y)?;
    check_finite(loss.value.as_f64(), "source cross-entropy")?;
    let grads = net.backward(Upstream::logits(&loss.grad))?;
    opt.step(net, &grads, lr)?;
    Ok(loss.value.as_f64())
}

fn stage_lr<T: Scalar>(cfg: &StageConfig, epoch: usize) -> T {
    T::of(cfg.learning_rate * cfg.lr_decay.powi(epoch as i32))
}

/// Result of the source-only warm-up.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmupReport {
    pub epochs_run: usize,
    /// Scores of the warmed-up model; `target_acc` is the before-adaptation
    /// baseline.
    pub eval: EvalPoint,
}

/// Source-only cross-entropy training until source accuracy plateaus or the
/// epoch cap is reached.
pub fn warmup<T: Scalar>(
    net: &mut Network<T>,
    d: &Domains<'_, T>,
    cfg: &StageConfig,
    stop: Plateau,
    rec: &mut Recorder,
) -> Result<WarmupReport> {
    let mut opt = Sgd::new(T::of(cfg.momentum));
    let mut history: Vec<f64> = Vec::new();
    let mut epochs_run = 0;
    for epoch in 0..cfg.epochs {
        let lr = stage_lr::<T>(cfg, epoch);
        for idx in epoch_batches(d.source.x.rows(), cfg.batch_size, cfg.seed ^ 0x3a_12, epoch as u64) {
            let ce = source_ce_step(net, &mut opt, d.source, &idx, lr)?;
            if rec.tick([ce, f64::NAN, f64::NAN, f64::NAN, ce]) {
                let e = eval_network(net, d)?;
                rec.record("warmup", &e);
            }
        }
        epochs_run += 1;
        history.push(accuracy(&predict(net, &d.source.x)?, &d.source.y));
        if history.len() > stop.patience {
            let recent = &history[history.len() - stop.patience - 1..];
            let hi = recent.iter().copied().fold(f64::MIN, f64::max);
            let lo = recent.iter().copied().fold(f64::MAX, f64::min);
            if hi - lo < stop.plateau {
                break;
            }
        }
    }
    net.clear_cache();
    let eval = eval_network(net, d)?;
    rec.record("warmup", &eval);
    Ok(WarmupReport { epochs_run, eval })
}

/// Freezes the warmed-up model's soft predictions on the target set.
pub fn generate_boilerplate<T: Scalar>(net: &Network<T>, target_x: &Tensor2D<T>, tau: T) -> Result<PseudoLabelStore<T>> {
    let mut store = PseudoLabelStore::new(tau)?;
    store.set_boilerplate(net.forward(target_x)?.probs)?;
    Ok(store)
}

/// Stage-1 state after training.
#[derive(Debug, Clone)]
pub struct Stage1Outcome<T> {
    pub net: Network<T>,
    pub ema: EmaEncoder<T>,
    pub bank: PrototypeBank<T>,
    pub store: PseudoLabelStore<T>,
    pub eval: EvalPoint,
}

fn uniform<T: Scalar>(rows: usize, k: usize) -> Tensor2D<T> {
    Tensor2D::filled(rows, k, T::of_usize(k).recip())
}

/// Modulation weights for `x` (uniform when denoising is off).
fn weights_for<T: Scalar>(
    ema_features: &Tensor2D<T>,
    bank: &PrototypeBank<T>,
    cfg: &StageConfig,
) -> Result<Tensor2D<T>> {
    if cfg.denoise {
        modulation_weights(&bank.distances(ema_features)?, T::of(cfg.tau))
    } else {
        Ok(uniform(ema_features.rows(), bank.classes()))
    }
}

/// Current pseudo labels for the whole target set under the state of `net`,
/// `ema` and `bank`.
pub fn current_pseudo_labels<T: Scalar>(
    net: &Network<T>,
    ema: &EmaEncoder<T>,
    bank: &PrototypeBank<T>,
    store: &PseudoLabelStore<T>,
    target_x: &Tensor2D<T>,
    cfg: &StageConfig,
) -> Result<(Vec<usize>, Tensor2D<T>)> {
    let feats = ema.forward(target_x)?;
    let w = weights_for(&feats, bank, cfg)?;
    let base = match cfg.label_mode {
        LabelMode::FixedBoilerplate => store.boilerplate()?.clone(),
        LabelMode::Dynamic => net.forward(target_x)?.probs,
    };
    let labels = match cfg.label_form {
        LabelForm::Hard => rectify(&base, &w, T::of(cfg.label_threshold))?,
        LabelForm::Soft => hard_label(&rectified_soft(&base, &w)?, T::zero()),
    };
    Ok((labels, w))
}

fn eval_stage1<T: Scalar>(
    net: &Network<T>,
    ema: &EmaEncoder<T>,
    bank: &PrototypeBank<T>,
    store: &PseudoLabelStore<T>,
    d: &Domains<'_, T>,
    cfg: &StageConfig,
) -> Result<EvalPoint> {
    let mut e = eval_network(net, d)?;
    if let Some(truth) = d.truth {
        let (labels, _) = current_pseudo_labels(net, ema, bank, store, d.target_x, cfg)?;
        e.pseudo = Some(evaluate(&labels, truth, d.classes)?);
        e.proto_drift = proto_drift(bank, &ema.forward(d.target_x)?, truth)?;
    }
    Ok(e)
}

/// Self-training with prototype-denoised pseudo labels and prototypical
/// consistency. Each iteration runs, in order: a source CE step, label
/// rectification and a target SCE step, a consistency + regularizer step,
/// the prototype EMA update, and the momentum-encoder update.
pub fn run_stage1<T: Scalar>(
    mut net: Network<T>,
    store: PseudoLabelStore<T>,
    d: &Domains<'_, T>,
    cfg: &StageConfig,
    rec: &mut Recorder,
) -> Result<Stage1Outcome<T>> {
    cfg.validate()?;
    let mut store = store;
    let k = d.classes;
    let floor = T::of(cfg.losses.clamp_floor);
    let tau = T::of(cfg.tau);
    let (g1, g2) = (T::of(cfg.losses.gamma1), T::of(cfg.losses.gamma2));

    // prologue: prototypes from f on ξ(p₀), momentum encoder from the live net
    let mut bank = match cfg.proto_init {
        ProtoInit::TargetPseudo => {
            PrototypeBank::init(&net.features(d.target_x)?, &store.initial_labels()?, k, T::of(cfg.proto_momentum))?
        }
        ProtoInit::SourceTruth => PrototypeBank::init(&net.features(&d.source.x)?, &d.source.y, k, T::of(cfg.proto_momentum))?,
    };
    if !bank.any_seen() {
        return Err(Error::State("degenerate prototype bank: no class seen".into()));
    }
    let mut ema = EmaEncoder::new(&net, T::of(cfg.ema_decay))?;
    let mut opt = Sgd::new(T::of(cfg.momentum));
    let mut sources = SourceBatches::new(d.source.x.rows(), cfg.batch_size, cfg.seed);

    for epoch in 0..cfg.epochs {
        let lr = stage_lr::<T>(cfg, epoch);
        for idx in epoch_batches(d.target_x.rows(), cfg.batch_size, cfg.seed, epoch as u64) {
            let ce_s = source_ce_step(&mut net, &mut opt, d.source, &sources.next_batch(), lr)?;

            let xt = d.target_x.select_rows(&idx);
            let ema_feats = ema.forward(&xt)?;
            let w = weights_for(&ema_feats, &bank, cfg)?;
            let base = match cfg.label_mode {
                LabelMode::FixedBoilerplate => store.boilerplate()?.select_rows(&idx),
                LabelMode::Dynamic => net.forward(&xt)?.probs,
            };
            let out = net.forward_train(&xt)?;
            let (sce, labels) = match cfg.label_form {
                LabelForm::Hard => {
                    let labels = match cfg.label_mode {
                        LabelMode::FixedBoilerplate => store.rectify_rows(&idx, &w, T::of(cfg.label_threshold))?,
                        LabelMode::Dynamic => rectify(&base, &w, T::of(cfg.label_threshold))?,
                    };
                    let l = sce_loss(&out.probs, &labels, T::of(cfg.losses.sce_alpha), T::of(cfg.losses.sce_beta), floor)?;
                    (l, labels)
                }
                LabelForm::Soft => {
                    let q = rectified_soft(&base, &w)?;
                    let l = sce_loss_soft(&out.probs, &q, T::of(cfg.losses.sce_alpha), T::of(cfg.losses.sce_beta), floor)?;
                    (l, hard_label(&q, T::zero()))
                }
            };
            check_finite(sce.value.as_f64(), "target SCE")?;
            let grads = net.backward(Upstream::logits(&sce.grad))?;
            opt.step(&mut net, &grads, lr)?;

            let key = AugmentKey {
                seed: cfg.seed,
                iteration: rec.iter as u64,
            };
            let cons = consistency_step(&xt, &idx, &mut net, &ema, &bank, &cfg.augment, tau, floor, key)?;
            let clean = net.forward_train(&xt)?;
            let reg = regularizer(&clean.probs, floor)?;
            let mut grads = net.backward(Upstream::logits(&reg.grad))?;
            for g in [cons.loss, reg.value] {
                check_finite(g.as_f64(), "consistency/regularizer")?;
            }
            if g1 > T::zero() || g2 > T::zero() {
                let mut combined = Gradients::zeros_like(&net);
                combined.axpy(g1, &cons.grads);
                combined.axpy(g2, &grads);
                grads = combined;
                opt.step(&mut net, &grads, lr)?;
            }

            let batch = batch_centroids(&ema_feats, &labels, k)?;
            bank.ema_update(&batch)?;
            ema.update(&net)?;

            let total = total_stage1_loss(T::of(ce_s), sce.value, cons.loss, reg.value, g1, g2);
            let parts = [ce_s, sce.value.as_f64(), cons.loss.as_f64(), reg.value.as_f64(), total.as_f64()];
            if rec.tick(parts) {
                let e = eval_stage1(&net, &ema, &bank, &store, d, cfg)?;
                rec.record("stage1", &e);
            }
        }
    }
    net.clear_cache();
    let eval = eval_stage1(&net, &ema, &bank, &store, d, cfg)?;
    rec.record("stage1", &eval);
    Ok(Stage1Outcome {
        net,
        ema,
        bank,
        store,
        eval,
    })
}

/// Margin-style contrastive pretraining of the feature extractor on unlabeled
/// points: two jittered views of a point are pulled together while views of
/// different points are pushed beyond a squared-distance margin. The second
/// view is held constant.
pub fn pretrain_contrastive<T: Scalar>(net: &mut Network<T>, x: &Tensor2D<T>, cfg: &PretrainConfig, seed: u64) -> Result<f64> {
    let mut opt = Sgd::new(T::zero());
    let margin = T::of(cfg.margin);
    let mut last = f64::NAN;
    for epoch in 0..cfg.epochs {
        let lr = T::of(cfg.learning_rate);
        for (b, idx) in epoch_batches(x.rows(), cfg.batch_size, seed ^ 0xc0_47, epoch as u64)
            .into_iter()
            .enumerate()
        {
            let n = idx.len();
            if n < 2 {
                continue;
            }
            let base = x.select_rows(&idx);
            let mut rng = stream_rng(&[seed, epoch as u64, b as u64, 0x7e_a1]);
            let mut jitter = |t: &Tensor2D<T>| -> Tensor2D<T> {
                let mut out = t.clone();
                for v in out.data_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v += T::of(cfg.jitter * z);
                }
                out
            };
            let va = jitter(&base);
            let vb = jitter(&base);
            let fb = net.features(&vb)?;
            let fa = net.forward_train(&va)?.features;
            let inv_n = T::of_usize(n).recip();
            let inv_neg = T::of_usize(n * (n - 1)).recip();
            let two = T::of(2.0);
            let mut grad = Tensor2D::zeros(n, fa.cols());
            let mut loss = T::zero();
            for i in 0..n {
                for j in 0..n {
                    let diff: Vec<T> = fa.row(i).iter().zip(fb.row(j)).map(|(&a, &b)| a - b).collect();
                    let sq: T = diff.iter().map(|&v| v * v).sum();
                    if i == j {
                        loss += sq * inv_n;
                        for (g, &dv) in grad.row_mut(i).iter_mut().zip(&diff) {
                            *g += two * dv * inv_n;
                        }
                    } else if sq < margin {
                        loss += (margin - sq) * inv_neg;
                        for (g, &dv) in grad.row_mut(i).iter_mut().zip(&diff) {
                            *g -= two * dv * inv_neg;
                        }
                    }
                }
            }
            check_finite(loss.as_f64(), "contrastive pretraining loss")?;
            let grads = net.backward(Upstream::features(&grad))?;
            opt.step(net, &grads, lr)?;
            last = loss.as_f64();
        }
    }
    net.clear_cache();
    Ok(last)
}

/// Builds the student network for a distillation stage.
pub fn init_student<T: Scalar>(
    teacher: &Network<T>,
    init: StudentInit,
    target_x: &Tensor2D<T>,
    pretrain: &PretrainConfig,
    seed: u64,
) -> Result<Network<T>> {
    let arch = teacher.architecture();
    match init {
        StudentInit::Resume => {
            let mut s = teacher.clone();
            s.clear_cache();
            Ok(s)
        }
        StudentInit::FreshRandom => Ok(Network::new(&arch, &mut ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x5717)))),
        StudentInit::FreshPretrained => {
            let mut s = Network::new(&arch, &mut ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x5717)));
            pretrain_contrastive(&mut s, target_x, pretrain, seed)?;
            Ok(s)
        }
    }
}

#[derive(Debug, Clone)]
pub struct DistillOutcome<T> {
    pub student: Network<T>,
    pub eval: EvalPoint,
}

/// Trains `student` against a frozen teacher with source CE, thresholded
/// teacher pseudo labels and the teacher-to-student KL term.
pub fn run_distill_stage<T: Scalar>(
    teacher: &Network<T>,
    mut student: Network<T>,
    d: &Domains<'_, T>,
    cfg: &StageConfig,
    stage_name: &str,
    rec: &mut Recorder,
) -> Result<DistillOutcome<T>> {
    cfg.validate()?;
    let floor = T::of(cfg.losses.clamp_floor);
    let mut opt = Sgd::new(T::of(cfg.momentum));
    let mut sources = SourceBatches::new(d.source.x.rows(), cfg.batch_size, cfg.seed ^ 0xd1);
    let teacher_probs = teacher.forward(d.target_x)?.probs;
    let eval = |s: &Network<T>| -> Result<EvalPoint> {
        let mut e = eval_network(s, d)?;
        if let Some(truth) = d.truth {
            let labels = hard_label(&teacher_probs, T::of(cfg.kd_threshold));
            e.pseudo = Some(evaluate(&labels, truth, d.classes)?);
        }
        Ok(e)
    };
    for epoch in 0..cfg.epochs {
        let lr = stage_lr::<T>(cfg, epoch);
        for idx in epoch_batches(d.target_x.rows(), cfg.batch_size, cfg.seed ^ 0xd1, epoch as u64) {
            let sidx = sources.next_batch();
            let xs = d.source.x.select_rows(&sidx);
            let ys: Vec<usize> = sidx.iter().map(|&i| d.source.y[i]).collect();
            let xt = d.target_x.select_rows(&idx);
            let pt = teacher_probs.select_rows(&idx);

            let out_s = student.forward_train(&xs)?;
            let out_t = student.forward(&xt)?;
            let kd = kd_loss(
                &out_s.probs,
                &ys,
                &out_t.probs,
                &pt,
                T::of(cfg.kd_threshold),
                T::of(cfg.losses.kd_beta),
                floor,
            )?;
            check_finite(kd.value.as_f64(), "distillation loss")?;
            let mut grads = student.backward(Upstream::logits(&kd.grad_source))?;
            student.forward_train(&xt)?;
            let gt = student.backward(Upstream::logits(&kd.grad_target))?;
            grads.axpy(T::one(), &gt);
            opt.step(&mut student, &grads, lr)?;

            let parts = [
                kd.source_ce.as_f64(),
                kd.target_ce.as_f64(),
                kd.kl.as_f64(),
                f64::NAN,
                kd.value.as_f64(),
            ];
            if rec.tick(parts) {
                let e = eval(&student)?;
                rec.record(stage_name, &e);
            }
        }
    }
    student.clear_cache();
    let e = eval(&student)?;
    rec.record(stage_name, &e);
    Ok(DistillOutcome { student, eval: e })
}

/// Summary of one stage in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub source_acc: f64,
    pub target_acc: f64,
    pub target_miou: f64,
    pub pseudo_acc: Option<f64>,
    pub proto_drift: Option<f64>,
}

impl StageSummary {
    fn from_eval(stage: &str, e: &EvalPoint) -> Self {
        let finite = |v: f64| v.is_finite().then_some(v);
        Self {
            stage: stage.to_string(),
            source_acc: e.source_acc,
            target_acc: e.target_acc(),
            target_miou: e.target_miou(),
            pseudo_acc: finite(e.pseudo_acc()),
            proto_drift: finite(e.proto_drift),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub message: String,
}

/// Provenance record of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: std::collections::BTreeMap<String, String>,
    /// SHA-256 over the crate sources and the resolved configuration.
    pub content_hash: String,
    pub stages: Vec<StageSummary>,
    pub failure: Option<StageFailure>,
    pub wall_clock_secs: f64,
}

const SOURCES: [&str; 14] = [
    include_str!("lib.rs"),
    include_str!("scalar.rs"),
    include_str!("error.rs"),
    include_str!("tensor.rs"),
    include_str!("nn.rs"),
    include_str!("proto.rs"),
    include_str!("denoise.rs"),
    include_str!("losses.rs"),
    include_str!("structure.rs"),
    include_str!("data.rs"),
    include_str!("metrics.rs"),
    include_str!("plot.rs"),
    include_str!("config.rs"),
    include_str!("pipeline.rs"),
];

pub fn content_hash(cfg: &ExperimentConfig) -> String {
    let mut h = Sha256::new();
    for src in SOURCES {
        h.update(format!("blob {}\0", src.len()).as_bytes());
        h.update(src.as_bytes());
    }
    let text = cfg.to_text();
    h.update(format!("config {}\0", text.len()).as_bytes());
    h.update(text.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// In-memory result of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentOutcome<T> {
    pub manifest: RunManifest,
    pub metrics: Vec<MetricsRow>,
    pub bench: Benchmark<T>,
    pub final_net: Network<T>,
    pub stage1: Option<Stage1Outcome<T>>,
}

/// Warm-up, then every configured stage in order. A failing stage stops the
/// run and is recorded in the manifest.
pub fn run_experiment<T: Scalar>(cfg: &ExperimentConfig) -> Result<ExperimentOutcome<T>> {
    cfg.validate()?;
    let started = Instant::now();
    let bench: Benchmark<T> = generate(&cfg.data)?;
    let d = Domains::from_benchmark(&bench);
    let mut rec = Recorder::new(cfg.eval_interval);
    let mut net = Network::new(&cfg.architecture(), &mut ChaCha8Rng::seed_from_u64(splitmix(cfg.seed)));
    let mut stages = Vec::new();
    let mut failure = None;
    let mut stage1 = None;

    match warmup(&mut net, &d, &cfg.warmup, cfg.warmup_stop, &mut rec) {
        Ok(w) => stages.push(StageSummary::from_eval("warmup", &w.eval)),
        Err(e) => {
            failure = Some(StageFailure {
                stage: "warmup".into(),
                message: e.to_string(),
            })
        }
    }
    let mut distill_round = 0;
    if failure.is_none() {
        for kind in &cfg.stages {
            let result: Result<(String, EvalPoint)> = match kind {
                StageKind::Stage1 => generate_boilerplate(&net, d.target_x, T::of(cfg.stage1.tau))
                    .and_then(|store| run_stage1(net.clone(), store, &d, &cfg.stage1, &mut rec))
                    .map(|out| {
                        net = out.net.clone();
                        let e = out.eval.clone();
                        stage1 = Some(out);
                        ("stage1".to_string(), e)
                    }),
                StageKind::Distill => {
                    distill_round += 1;
                    let name = format!("distill{distill_round}");
                    let scfg = StageConfig {
                        seed: cfg.distill.seed.wrapping_add(distill_round as u64),
                        ..cfg.distill.clone()
                    };
                    init_student(&net, scfg.student_init, d.target_x, &cfg.pretrain, scfg.seed)
                        .and_then(|s| run_distill_stage(&net, s, &d, &scfg, &name, &mut rec))
                        .map(|out| {
                            net = out.student;
                            (name, out.eval)
                        })
                }
            };
            match result {
                Ok((name, e)) => stages.push(StageSummary::from_eval(&name, &e)),
                Err(e) => {
                    failure = Some(StageFailure {
                        stage: match kind {
                            StageKind::Stage1 => "stage1".into(),
                            StageKind::Distill => format!("distill{distill_round}"),
                        },
                        message: e.to_string(),
                    });
                    break;
                }
            }
        }
    }

    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.snapshot(),
        content_hash: content_hash(cfg),
        stages,
        failure,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(ExperimentOutcome {
        manifest,
        metrics: rec.rows,
        bench,
        final_net: net,
        stage1,
    })
}

/// Per-sample label dump for the end of stage 1.
pub fn label_records<T: Scalar>(s1: &Stage1Outcome<T>, cfg: &StageConfig, target_x: &Tensor2D<T>, truth: Option<&HiddenLabels>) -> Result<Vec<LabelRecord>> {
    let (labels, w) = current_pseudo_labels(&s1.net, &s1.ema, &s1.bank, &s1.store, target_x, cfg)?;
    let init = s1.store.initial_labels()?;
    let gt = truth.map(crate::metrics::ground_truth);
    Ok((0..labels.len())
        .map(|i| LabelRecord {
            sample: i,
            boilerplate: init[i],
            rectified: labels[i],
            max_weight: w.row(i)[argmax(w.row(i))].as_f64(),
            correct: gt.map(|g| g[i] == labels[i]),
        })
        .collect())
}

/// Writes the run directory: `metrics.csv`, `manifest.json`,
/// `target_features.csv`, `prototypes.csv`, `labels.csv` (when stage 1 ran),
/// `model.ckpt`, `dataset/` and `plots/*.svg`.
/// Prototypes live in the stage-1 feature space, so they only belong on the
/// final feature plot when stage 1 was the last stage to run.
pub fn prototypes_share_final_space(m: &RunManifest) -> bool {
    m.stages.last().is_some_and(|s| s.stage == "stage1")
}

pub fn write_run<T: Scalar>(out: &ExperimentOutcome<T>, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let metrics_path = dir.join("metrics.csv");
    write_metrics_csv(&out.metrics, BufWriter::new(fs::File::create(&metrics_path)?))?;

    let feats = out.final_net.features(&out.bench.target_x)?;
    let feature_path = dir.join("target_features.csv");
    {
        let mut w = BufWriter::new(fs::File::create(&feature_path)?);
        let cols: Vec<String> = (0..feats.cols()).map(|j| format!("f{j}")).collect();
        writeln!(w, "{},y", cols.join(","))?;
        let truth = crate::metrics::ground_truth(&out.bench.target_truth);
        for (r, &y) in truth.iter().enumerate() {
            let vals: Vec<String> = feats.row(r).iter().map(|v| format!("{:.8}", v.as_f64())).collect();
            writeln!(w, "{},{y}", vals.join(","))?;
        }
        w.flush()?;
    }

    let mut proto_path = None;
    if let Some(s1) = &out.stage1 {
        let p = dir.join("prototypes.csv");
        s1.bank.write_csv(BufWriter::new(fs::File::create(&p)?))?;
        proto_path = Some(p);
        let records = label_records(s1, &cfg.stage1, &out.bench.target_x, Some(&out.bench.target_truth))?;
        crate::denoise::write_label_dump(&records, BufWriter::new(fs::File::create(dir.join("labels.csv"))?))?;
    }
    save_checkpoint(&out.final_net, BufWriter::new(fs::File::create(dir.join("model.ckpt"))?))?;
    crate::data::export(&out.bench, &dir.join("dataset"))?;
    crate::plot::emit_plots(
        &metrics_path,
        &feature_path,
        proto_path.as_deref().filter(|_| prototypes_share_final_space(&out.manifest)),
        &dir.join("plots"),
    )?;
    let mut m = BufWriter::new(fs::File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut m, &out.manifest)?;
    writeln!(m)?;
    m.flush()?;
    Ok(())
}
