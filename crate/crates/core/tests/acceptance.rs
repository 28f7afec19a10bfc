//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use common::*;
use protoadapt::data::{generate, inject_boundary_noise, DomainSpec};
use protoadapt::denoise::{modulation_weights, rectify};
use protoadapt::losses::LossWeights;
use protoadapt::metrics::{confusion_and_iou, ground_truth, label_error_rate};
use protoadapt::nn::Network;
use protoadapt::proto::{batch_centroids, PrototypeBank};
use protoadapt::{write_run, ExperimentConfig, Tensor2D, IGNORE};
use rand::Rng;
use std::path::Path;
use std::time::Instant;

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// A1: every loss against central differences, 20 instances each.
fn a1_gradients() -> Verdict {
    let start = Instant::now();
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let builders: [(&str, fn(&mut Instance) -> f64); 6] = [
        ("ce", |i| {
            let y = random_labels(&mut i.rng, i.n, i.k, true);
            max_relative_error(&i.net, &source_ce(i.x.clone(), y))
        }),
        ("sce", |i| {
            let y = random_labels(&mut i.rng, i.n, i.k, true);
            max_relative_error(&i.net, &target_sce(i.x.clone(), y, LossWeights::default()))
        }),
        ("kl", |i| {
            let fx = consistency_fixture(i);
            let loss = consistency(i.x.clone(), &fx, 1.0);
            max_relative_error(&i.net, &loss)
        }),
        ("reg", |i| max_relative_error(&i.net, &reg(i.x.clone()))),
        ("total", |i| {
            let xs = random_tensor(&mut i.rng, i.n, i.net.input_dim(), 1.5);
            let ys = random_labels(&mut i.rng, i.n, i.k, false);
            let yt = random_labels(&mut i.rng, i.n, i.k, true);
            let fx = consistency_fixture(i);
            let loss = stage1_total(xs, ys, i.x.clone(), yt, &fx, LossWeights::default());
            max_relative_error(&i.net, &loss)
        }),
        ("kd", |i| {
            let xs = random_tensor(&mut i.rng, i.n, i.net.input_dim(), 1.5);
            let ys = random_labels(&mut i.rng, i.n, i.k, false);
            let teacher = teacher_probs(&mut i.rng, i.n, i.k);
            max_relative_error(&i.net, &distill(xs, ys, i.x.clone(), teacher, 0.95, 1.0))
        }),
    ];
    for (b, (name, f)) in builders.iter().enumerate() {
        let mut w: f64 = 0.0;
        for s in 0..20u64 {
            let mut inst = instance(10_000 + 100 * b as u64 + s);
            assert!(inst.n <= 8 && inst.k <= 5);
            w = w.max(f(&mut inst));
        }
        worst.push((name, w));
    }
    let secs = start.elapsed().as_secs_f64();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let detail = worst.iter().map(|(n, w)| format!("{n} {w:.1e}")).collect::<Vec<_>>().join(", ");
    check(
        max < FD_TOL && secs < 10.0,
        format!("worst relative error per loss: {detail} (tol {FD_TOL:e}); {secs:.2} s (limit 10 s)"),
    )
}

/// Direct per-class mean, written independently of the crate.
fn direct_means(f: &Tensor2D<f64>, y: &[usize], k: usize) -> Vec<Option<Vec<f64>>> {
    let d = f.cols();
    let mut sum = vec![vec![0.0; d]; k];
    let mut cnt = vec![0usize; k];
    for (i, &c) in y.iter().enumerate() {
        if c == IGNORE {
            continue;
        }
        cnt[c] += 1;
        for j in 0..d {
            sum[c][j] += f.get(i, j);
        }
    }
    (0..k)
        .map(|c| (cnt[c] > 0).then(|| sum[c].iter().map(|v| v / cnt[c] as f64).collect()))
        .collect()
}

fn mean_proto_error(bank: &PrototypeBank<f64>, truth: &[Option<Vec<f64>>]) -> f64 {
    let errs: Vec<f64> = truth
        .iter()
        .enumerate()
        .filter_map(|(c, t)| t.as_ref().map(|t| (c, t)))
        .map(|(c, t)| {
            let row = bank.centroids().row(c);
            row.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        })
        .collect();
    mean(&errs)
}

/// A2: frozen encoder, correct labels, 2000 full-batch EMA updates.
fn a2_prototype_convergence() -> Verdict {
    let spec = DomainSpec::gauss_shift();
    let bench = generate::<f64>(&spec).unwrap();
    let cfg = ExperimentConfig::default();
    let encoder = Network::<f64>::new(&cfg.architecture(), &mut rng(2));
    let f = encoder.features(&bench.target_x).unwrap();
    let y = ground_truth(&bench.target_truth);
    let truth = direct_means(&f, y, spec.classes);
    let batch = batch_centroids(&f, y, spec.classes).unwrap();

    let mut from_init = PrototypeBank::init(&f, y, spec.classes, 0.9999).unwrap();
    let unlabeled = vec![IGNORE; y.len()];
    let mut from_empty = PrototypeBank::init(&f, &unlabeled, spec.classes, 0.9999).unwrap();
    for _ in 0..2000 {
        from_init.ema_update(&batch).unwrap();
        from_empty.ema_update(&batch).unwrap();
    }
    let (e1, e2) = (mean_proto_error(&from_init, &truth), mean_proto_error(&from_empty, &truth));
    check(
        e1 < 1e-2 && e2 < 1e-2,
        format!("mean ‖η − centroid‖ after 2000 updates: {e1:.2e} (initialized), {e2:.2e} (empty start); limit 1e-2"),
    )
}

/// A3: boundary noise from the source nearest-mean model, then rectification
/// with true target centroids in input space.
fn a3_denoising() -> Verdict {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in SEEDS {
        let mut spec = DomainSpec::gauss_shift();
        spec.seed = seed;
        let bench = generate::<f64>(&spec).unwrap();
        let k = spec.classes;
        let x = &bench.target_x;
        let truth = ground_truth(&bench.target_truth);
        let means = spec.source_class_means();
        let source_model = |x: &Tensor2D<f64>| {
            let rows: Vec<Vec<f64>> = x
                .row_iter()
                .map(|p| means.iter().map(|m| -p.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).collect())
                .collect();
            Tensor2D::from_rows(&rows)
        };
        let noisy = inject_boundary_noise(truth, x, source_model, 0.2).unwrap();
        let mut p0 = Tensor2D::filled(x.rows(), k, 0.4 / (k - 1) as f64);
        for (i, &c) in noisy.iter().enumerate() {
            p0.set(i, c, 0.6);
        }
        let bank = PrototypeBank::init(x, truth, k, 0.9999).unwrap();
        let w = modulation_weights(&bank.distances(x).unwrap(), 1.0).unwrap();
        let fixed = rectify(&p0, &w, 0.0).unwrap();
        let before = label_error_rate(&noisy, &bench.target_truth).unwrap();
        let after = label_error_rate(&fixed, &bench.target_truth).unwrap();
        let reduction = 1.0 - after / before;
        ok &= reduction >= 0.30;
        lines.push(format!("s{seed} {before:.3}→{after:.3}"));
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        ok && secs < 5.0,
        format!("label error {} (need ≥30% reduction each); {secs:.2} s (limit 5 s)", lines.join(", ")),
    )
}

/// A4: dynamic labels collapse on moons-shift, fixed boilerplate does not.
fn a4_degeneration() -> Verdict {
    let base = "preset=moons-shift\nstages=stage1\nstage1.gamma1=0\nstage1.gamma2=0\n";
    let dd = |mode: &str| -> Vec<f64> {
        SEEDS
            .iter()
            .map(|&s| max_drawdown(&stage1_curve(&run(&format!("{base}stage1.label_mode={mode}\n"), s))))
            .collect()
    };
    let dynamic = dd("dynamic");
    let fixed = dd("fixed-boilerplate");
    let (md, mf) = (median(&dynamic), median(&fixed));
    check(
        md >= 0.05 && mf <= 0.02,
        format!(
            "median drawdown from running peak: dynamic {:.1} pts (need ≥5), fixed {:.1} pts (need ≤2)",
            100.0 * md,
            100.0 * mf
        ),
    )
}

struct Ablation {
    full: Vec<f64>,
    distill1: Vec<f64>,
    distill2: Vec<f64>,
    denoise: Vec<f64>,
    structure: Vec<f64>,
    vanilla: Vec<f64>,
    secs_per_seed: f64,
}

fn ablation() -> Ablation {
    let start = Instant::now();
    let (mut full, mut distill1, mut distill2) = (Vec::new(), Vec::new(), Vec::new());
    for s in SEEDS {
        let out = run("", s);
        full.push(stage_acc(&out, "stage1"));
        distill1.push(stage_acc(&out, "distill1"));
        distill2.push(stage_acc(&out, "distill2"));
    }
    let variant = |extra: &str| -> Vec<f64> {
        SEEDS
            .iter()
            .map(|&s| stage_acc(&run(&format!("stages=stage1\n{extra}"), s), "stage1"))
            .collect()
    };
    let denoise = variant("stage1.gamma1=0\nstage1.gamma2=0\n");
    let structure = variant("stage1.denoise=false\n");
    let vanilla = variant("stage1.gamma1=0\nstage1.gamma2=0\nstage1.denoise=false\n");
    Ablation {
        full,
        distill1,
        distill2,
        denoise,
        structure,
        vanilla,
        secs_per_seed: start.elapsed().as_secs_f64() / SEEDS.len() as f64,
    }
}

/// A5: full > denoise-only, full > structure-only, each > vanilla, and the
/// full stage 1 at least 5 points above vanilla.
fn a5_ordering(a: &Ablation) -> Verdict {
    let (f, d, s, v) = (median(&a.full), median(&a.denoise), median(&a.structure), median(&a.vanilla));
    check(
        f > d && f > s && d > v && s > v && f - v >= 0.05 && a.secs_per_seed < 300.0,
        format!(
            "median target acc: full {f:.3}, denoise-only {d:.3}, structure-only {s:.3}, vanilla {v:.3}; gain {:.1} pts (need ≥5); {:.1} s per seed",
            100.0 * (f - v),
            a.secs_per_seed
        ),
    )
}

/// A6: distillation does not regress.
fn a6_distillation(a: &Ablation) -> Verdict {
    let (m1, m2, m3) = (median(&a.full), median(&a.distill1), median(&a.distill2));
    let (mean1, mean3) = (mean(&a.full), mean(&a.distill2));
    check(
        m2 - m1 >= -0.01 && m3 - m2 >= -0.01 && mean3 >= mean1,
        format!(
            "median stage1 {m1:.3} → distill1 {m2:.3} → distill2 {m3:.3} (each step ≥ −1 pt); mean {mean1:.4} → {mean3:.4} (need ≥)"
        ),
    )
}

/// A7: label threshold barely matters.
fn a7_threshold() -> Verdict {
    let accs: Vec<f64> = [0.0, 0.2, 0.4, 0.6, 0.8, 0.9]
        .iter()
        .map(|t| stage_acc(&run(&format!("stages=stage1\nstage1.label_threshold={t}\n"), 0), "stage1"))
        .collect();
    let spread = accs.iter().cloned().fold(f64::MIN, f64::max) - accs.iter().cloned().fold(f64::MAX, f64::min);
    check(
        spread < 0.015,
        format!(
            "stage-1 acc over thresholds {:?}: spread {:.2} pts (limit 1.5)",
            accs.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>(),
            100.0 * spread
        ),
    )
}

/// A8: τ = 1 beats τ = 10.
fn a8_temperature(a: &Ablation) -> Verdict {
    let hot: Vec<f64> = SEEDS[..3]
        .iter()
        .map(|&s| stage_acc(&run("stages=stage1\nstage1.tau=10\n", s), "stage1"))
        .collect();
    let (m1, m10) = (median(&a.full[..3]), median(&hot));
    check(
        m1 - m10 >= 0.03,
        format!("median stage-1 acc τ=1 {m1:.3} vs τ=10 {m10:.3}: gap {:.1} pts (need ≥3)", 100.0 * (m1 - m10)),
    )
}

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = vec![("metrics.csv".to_string(), std::fs::read(dir.join("metrics.csv")).unwrap())];
    let mut svgs: Vec<_> = std::fs::read_dir(dir.join("plots"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "svg"))
        .collect();
    svgs.sort();
    for p in svgs {
        files.push((p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()));
    }
    files
}

/// A9: identical config and seed give byte-identical CSV and SVG outputs.
fn a9_determinism() -> Verdict {
    let cfg = ExperimentConfig::default().with_seed(7);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let out = protoadapt::run_experiment::<f64>(&cfg).unwrap();
        write_run(&out, &cfg, d.path()).unwrap();
    }
    let (a, b) = (artifacts(dirs[0].path()), artifacts(dirs[1].path()));
    let names: Vec<_> = a.iter().map(|f| f.0.as_str()).collect();
    check(
        a == b && a.len() > 1,
        format!("{} files compared ({}): {}", a.len(), names.join(", "), if a == b { "identical" } else { "differ" }),
    )
}

/// A10: three operations against brute-force oracles.
fn a10_oracles() -> Verdict {
    let mut r = rng(1010);
    let (mut e_init, mut e_iou, mut e_w) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let (n, k, d) = (r.random_range(1..=30), r.random_range(1..=5), r.random_range(1..=4));
        let f = random_tensor(&mut r, n, d, 3.0);
        let y: Vec<usize> = (0..n).map(|_| if r.random_bool(0.1) { IGNORE } else { r.random_range(0..k) }).collect();

        // prototypes: indicator sums, fed through the streaming path in chunks
        let chunk = r.random_range(1..=n);
        let rows: Vec<(Tensor2D<f64>, Vec<usize>)> = (0..n)
            .step_by(chunk)
            .map(|s| {
                let idx: Vec<usize> = (s..(s + chunk).min(n)).collect();
                (f.select_rows(&idx), idx.iter().map(|&i| y[i]).collect())
            })
            .collect();
        let bank = PrototypeBank::init_streaming(rows.iter().map(|(a, b)| (a, b.as_slice())), k, d, 0.9).unwrap();
        for (c, m) in direct_means(&f, &y, k).iter().enumerate() {
            match m {
                Some(m) => {
                    assert!(bank.seen()[c]);
                    for j in 0..d {
                        e_init = e_init.max((bank.centroids().get(c, j) - m[j]).abs());
                    }
                }
                None => assert!(!bank.seen()[c]),
            }
        }

        // confusion and IoU by pairwise counting
        let truth: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let report = confusion_and_iou(&y, &truth, k).unwrap();
        let mut ious = Vec::new();
        for c in 0..k {
            let counted = |p: &usize| *p != IGNORE;
            let tp = y.iter().zip(&truth).filter(|(p, t)| counted(p) && **p == c && **t == c).count();
            let fp = y.iter().zip(&truth).filter(|(p, t)| counted(p) && **p == c && **t != c).count();
            let fn_ = y.iter().zip(&truth).filter(|(p, t)| counted(p) && **p != c && **t == c).count();
            // classes absent from the counted ground truth are excluded
            let expect = (tp + fn_ > 0).then(|| tp as f64 / (tp + fp + fn_) as f64);
            match (expect, report.per_class_iou[c]) {
                (Some(a), Some(b)) => e_iou = e_iou.max((a - b).abs()),
                (None, None) => {}
                _ => e_iou = f64::INFINITY,
            }
            if let Some(v) = expect {
                ious.push(v);
            }
        }
        if !ious.is_empty() {
            e_iou = e_iou.max((mean(&ious) - report.mean_iou).abs());
        }

        // modulation weights: exp(−‖f − η‖/τ) normalised per row
        let protos = random_tensor(&mut r, k, d, 2.0);
        let tau = r.random_range(0.1..5.0);
        let pb = PrototypeBank::from_centroids(protos.clone(), 0.9).unwrap();
        let w = modulation_weights(&pb.distances(&f).unwrap(), tau).unwrap();
        for i in 0..n {
            let dist: Vec<f64> = (0..k)
                .map(|c| (0..d).map(|j| (f.get(i, j) - protos.get(c, j)).powi(2)).sum::<f64>().sqrt())
                .collect();
            let z: f64 = dist.iter().map(|v| (-v / tau).exp()).sum();
            for c in 0..k {
                e_w = e_w.max(((-dist[c] / tau).exp() / z - w.get(i, c)).abs());
            }
        }
    }
    check(
        e_init <= 1e-10 && e_iou <= 1e-10 && e_w <= 1e-10,
        format!("max abs error over 100 instances: init {e_init:.1e}, iou {e_iou:.1e}, weights {e_w:.1e} (limit 1e-10)"),
    )
}

fn main() {
    let mut failed = Vec::new();
    let mut report = |id: &str, v: Verdict| {
        let (tag, detail) = match v {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed.push(id.to_string());
                ("FAIL", d)
            }
        };
        println!("{id:<3} {tag}  {detail}");
    };
    report("A1", a1_gradients());
    report("A2", a2_prototype_convergence());
    report("A3", a3_denoising());
    report("A4", a4_degeneration());
    let a = ablation();
    report("A5", a5_ordering(&a));
    report("A6", a6_distillation(&a));
    report("A7", a7_threshold());
    report("A8", a8_temperature(&a));
    report("A9", a9_determinism());
    report("A10", a10_oracles());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
