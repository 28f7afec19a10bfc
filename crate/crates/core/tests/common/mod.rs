//! Shared fixtures: random small networks, loss closures through the network
//! and a central finite-difference checker.

#![allow(dead_code)]

use protoadapt::denoise::hard_label;
use protoadapt::losses::{ce_loss, kd_loss, regularizer, sce_loss, sce_loss_soft, LossWeights};
use protoadapt::nn::{softmax_rows, Architecture, Gradients, Network, Upstream};
use protoadapt::proto::PrototypeBank;
use protoadapt::structure::{consistency_step, AugmentConfig, AugmentKey};
use protoadapt::pipeline::ExperimentOutcome;
use protoadapt::{run_experiment, EmaEncoder, ExperimentConfig, Tensor2D, IGNORE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
pub const FLOOR: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(r: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor2D<f64> {
    let data = (0..rows * cols).map(|_| r.random_range(-scale..scale)).collect();
    Tensor2D::from_vec(rows, cols, data).unwrap()
}

pub fn random_probs(r: &mut impl Rng, rows: usize, cols: usize) -> Tensor2D<f64> {
    softmax_rows(&random_tensor(r, rows, cols, 2.0))
}

/// One random instance: a 3-layer tanh network (2 feature layers + head) and
/// a batch of inputs.
pub struct Instance {
    pub net: Network<f64>,
    pub x: Tensor2D<f64>,
    pub n: usize,
    pub k: usize,
    pub rng: ChaCha8Rng,
}

pub fn instance(seed: u64) -> Instance {
    let mut r = rng(seed);
    let n = r.random_range(1..=8);
    let k = r.random_range(2..=5);
    let input = r.random_range(2..=4);
    let arch = Architecture {
        input_dim: input,
        hidden: vec![r.random_range(2..=8)],
        feature_dim: r.random_range(2..=8),
        classes: k,
    };
    let net = Network::new(&arch, &mut r);
    let x = random_tensor(&mut r, n, input, 1.5);
    Instance { net, x, n, k, rng: r }
}

pub fn random_labels(r: &mut impl Rng, n: usize, k: usize, allow_ignore: bool) -> Vec<usize> {
    let mut y: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
    if allow_ignore && n > 1 {
        y[r.random_range(0..n)] = IGNORE;
    }
    y
}

/// Value and parameter gradient of a loss evaluated through a network.
pub type LossFn<'a> = Box<dyn Fn(&mut Network<f64>) -> (f64, Gradients<f64>) + 'a>;

/// Largest elementwise relative error `|a − n| / max(|a|, |n|, 1e-6)` between
/// the analytic gradient and central differences.
pub fn max_relative_error(net: &Network<f64>, loss: &LossFn<'_>) -> f64 {
    let mut work = net.clone();
    let (_, grads) = loss(&mut work);
    let analytic = grads.flat();
    let theta = net.params_flat();
    let mut worst: f64 = 0.0;
    for i in 0..theta.len() {
        let mut plus = theta.clone();
        plus[i] += FD_STEP;
        work.set_params_flat(&plus).unwrap();
        let (lp, _) = loss(&mut work);
        let mut minus = theta.clone();
        minus[i] -= FD_STEP;
        work.set_params_flat(&minus).unwrap();
        let (lm, _) = loss(&mut work);
        let numeric = (lp - lm) / (2.0 * FD_STEP);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}

pub fn source_ce(x: Tensor2D<f64>, y: Vec<usize>) -> LossFn<'static> {
    Box::new(move |net| {
        let out = net.forward_train(&x).unwrap();
        let l = ce_loss(&out.probs, &y).unwrap();
        (l.value, net.backward(Upstream::logits(&l.grad)).unwrap())
    })
}

pub fn target_sce(x: Tensor2D<f64>, y: Vec<usize>, w: LossWeights<f64>) -> LossFn<'static> {
    Box::new(move |net| {
        let out = net.forward_train(&x).unwrap();
        let l = sce_loss(&out.probs, &y, w.sce_alpha, w.sce_beta, w.clamp_floor).unwrap();
        (l.value, net.backward(Upstream::logits(&l.grad)).unwrap())
    })
}

pub fn target_sce_soft(x: Tensor2D<f64>, q: Tensor2D<f64>, w: LossWeights<f64>) -> LossFn<'static> {
    Box::new(move |net| {
        let out = net.forward_train(&x).unwrap();
        let l = sce_loss_soft(&out.probs, &q, w.sce_alpha, w.sce_beta, w.clamp_floor).unwrap();
        (l.value, net.backward(Upstream::logits(&l.grad)).unwrap())
    })
}

pub fn reg(x: Tensor2D<f64>) -> LossFn<'static> {
    Box::new(move |net| {
        let out = net.forward_train(&x).unwrap();
        let l = regularizer(&out.probs, FLOOR).unwrap();
        (l.value, net.backward(Upstream::logits(&l.grad)).unwrap())
    })
}

/// Fixture for the prototype-consistency loss: a momentum encoder taken from
/// a perturbed copy of the network and a bank of random prototypes.
pub struct ConsistencyFixture {
    pub ema: EmaEncoder<f64>,
    pub bank: PrototypeBank<f64>,
    pub ids: Vec<usize>,
    pub cfg: AugmentConfig,
    pub key: AugmentKey,
}

pub fn consistency_fixture(inst: &mut Instance) -> ConsistencyFixture {
    let r = &mut inst.rng;
    let mut teacher = inst.net.clone();
    let perturbed: Vec<f64> = teacher
        .params_flat()
        .iter()
        .map(|v| v + r.random_range(-0.3..0.3))
        .collect();
    teacher.set_params_flat(&perturbed).unwrap();
    let ema = EmaEncoder::new(&teacher, 0.999).unwrap();
    let centroids = random_tensor(r, inst.k, inst.net.feature_dim(), 0.8);
    let bank = PrototypeBank::from_centroids(centroids, 0.9999).unwrap();
    ConsistencyFixture {
        ema,
        bank,
        ids: (0..inst.n).map(|i| i * 3 + 1).collect(),
        cfg: AugmentConfig::default(),
        key: AugmentKey {
            seed: r.random(),
            iteration: r.random_range(0..1000),
        },
    }
}

pub fn consistency<'a>(x: Tensor2D<f64>, fx: &'a ConsistencyFixture, tau: f64) -> LossFn<'a> {
    Box::new(move |net| {
        let out = consistency_step(&x, &fx.ids, net, &fx.ema, &fx.bank, &fx.cfg, tau, FLOOR, fx.key).unwrap();
        (out.loss, out.grads)
    })
}

/// The weighted stage-1 objective `ce_s + sce_t + γ1·kl + γ2·reg`.
pub fn stage1_total<'a>(
    xs: Tensor2D<f64>,
    ys: Vec<usize>,
    xt: Tensor2D<f64>,
    yt: Vec<usize>,
    fx: &'a ConsistencyFixture,
    w: LossWeights<f64>,
) -> LossFn<'a> {
    let parts = [
        (1.0, source_ce(xs, ys)),
        (1.0, target_sce(xt.clone(), yt, w)),
        (w.gamma1, consistency(xt.clone(), fx, 1.0)),
        (w.gamma2, reg(xt)),
    ];
    Box::new(move |net| {
        let mut total = 0.0;
        let mut grads = Gradients::zeros_like(net);
        for (c, f) in &parts {
            let (v, g) = f(net);
            total += c * v;
            grads.axpy(*c, &g);
        }
        (total, grads)
    })
}

/// Distillation objective against a fixed teacher distribution.
pub fn distill(
    xs: Tensor2D<f64>,
    ys: Vec<usize>,
    xt: Tensor2D<f64>,
    teacher: Tensor2D<f64>,
    threshold: f64,
    kd_beta: f64,
) -> LossFn<'static> {
    Box::new(move |net| {
        let ps = net.forward_train(&xs).unwrap().probs;
        let pt = net.forward(&xt).unwrap().probs;
        let kd = kd_loss(&ps, &ys, &pt, &teacher, threshold, kd_beta, FLOOR).unwrap();
        let mut grads = net.backward(Upstream::logits(&kd.grad_source)).unwrap();
        net.forward_train(&xt).unwrap();
        grads.axpy(1.0, &net.backward(Upstream::logits(&kd.grad_target)).unwrap());
        (kd.value, grads)
    })
}

/// Teacher rows with a mix of confident and uncertain predictions.
pub fn teacher_probs(r: &mut impl Rng, n: usize, k: usize) -> Tensor2D<f64> {
    let mut t = random_tensor(r, n, k, 1.0);
    for i in 0..n {
        if r.random_bool(0.5) {
            let c = r.random_range(0..k);
            t.set(i, c, t.get(i, c) + 8.0);
        }
    }
    softmax_rows(&t)
}

pub fn argmax_labels(p: &Tensor2D<f64>) -> Vec<usize> {
    hard_label(p, 0.0)
}

/// Runs the default experiment with `overrides` (config text) at `seed`.
pub fn run(overrides: &str, seed: u64) -> ExperimentOutcome<f64> {
    let cfg = ExperimentConfig::parse(overrides).unwrap().with_seed(seed);
    let out = run_experiment::<f64>(&cfg).unwrap();
    assert!(out.manifest.failure.is_none(), "seed {seed}: {:?}", out.manifest.failure);
    out
}

/// Final target accuracy of `stage` in a finished run.
pub fn stage_acc(out: &ExperimentOutcome<f64>, stage: &str) -> f64 {
    out.manifest
        .stages
        .iter()
        .find(|s| s.stage == stage)
        .unwrap_or_else(|| panic!("no stage {stage}"))
        .target_acc
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Target-accuracy curve of stage 1, starting from the warmed-up network.
pub fn stage1_curve(out: &ExperimentOutcome<f64>) -> Vec<f64> {
    let start = stage_acc(out, "warmup");
    std::iter::once(start)
        .chain(out.metrics.iter().filter(|r| r.stage == "stage1").map(|r| r.target_acc))
        .collect()
}

/// Largest drop below the running peak.
pub fn max_drawdown(curve: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut worst: f64 = 0.0;
    for &a in curve {
        peak = peak.max(a);
        worst = worst.max(peak - a);
    }
    worst
}
