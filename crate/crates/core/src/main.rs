use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use protoadapt::config::{expand_sweep, parse_pairs, parse_stages};
use protoadapt::pipeline::{prototypes_share_final_space, run_experiment, write_run};
use protoadapt::plot::emit_plots;
use protoadapt::{Error, ExperimentConfig, Result, RunManifest};

#[derive(Parser)]
#[command(name = "protoadapt", version, about = "Prototype-denoised self-training for domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Warm-up followed by the configured stages.
    Run(RunArgs),
    /// One run per point of the grid spanned by comma-separated values.
    Sweep(RunArgs),
    /// Source-only warm-up; records the before-adaptation baseline.
    Baseline(RunArgs),
    /// Re-draws the SVG plots of an existing run directory.
    Plot {
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs/latest")]
    out_dir: PathBuf,
    /// Comma-separated stage list, e.g. `stage1,distill,distill` (`none` for
    /// warm-up only).
    #[arg(long)]
    stages: Option<String>,
}

impl RunArgs {
    fn text(&self) -> Result<String> {
        match &self.config {
            Some(p) => Ok(fs::read_to_string(p)?),
            None => Ok(String::new()),
        }
    }

    /// CLI flags override file keys.
    fn overrides(&self, pairs: &mut Vec<(String, String)>) -> Result<()> {
        if let Some(seed) = self.seed {
            pairs.push(("seed".into(), seed.to_string()));
        }
        if let Some(s) = &self.stages {
            parse_stages(s)?;
            pairs.push(("stages".into(), s.clone()));
        }
        Ok(())
    }
}

fn execute(cfg: &ExperimentConfig, dir: &Path) -> Result<RunManifest> {
    let out = run_experiment::<f64>(cfg)?;
    write_run(&out, cfg, dir)?;
    Ok(out.manifest)
}

fn report(dir: &Path, m: &RunManifest) {
    for s in &m.stages {
        println!(
            "{}  {:<8} source_acc={:.4} target_acc={:.4} target_miou={:.4}",
            dir.display(),
            s.stage,
            s.source_acc,
            s.target_acc,
            s.target_miou
        );
    }
    if let Some(f) = &m.failure {
        eprintln!("{}  stage {} failed: {}", dir.display(), f.stage, f.message);
    }
}

fn single(args: &RunArgs, force_baseline: bool) -> Result<bool> {
    let mut pairs = parse_pairs(&args.text()?)?;
    args.overrides(&mut pairs)?;
    if force_baseline {
        pairs.push(("stages".into(), "none".into()));
    }
    let cfg = ExperimentConfig::from_pairs(&pairs)?;
    let m = execute(&cfg, &args.out_dir)?;
    report(&args.out_dir, &m);
    Ok(m.failure.is_none())
}

fn sweep(args: &RunArgs) -> Result<bool> {
    let grid = expand_sweep(&args.text()?)?;
    let mut configs = Vec::with_capacity(grid.len());
    for mut pairs in grid {
        args.overrides(&mut pairs)?;
        configs.push(ExperimentConfig::from_pairs(&pairs)?);
    }
    fs::create_dir_all(&args.out_dir)?;
    let width = configs.len().to_string().len().max(3);
    let dirs: Vec<PathBuf> = (0..configs.len())
        .map(|i| args.out_dir.join(format!("point_{i:0width$}")))
        .collect();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut results: Vec<Option<Result<RunManifest>>> = (0..configs.len()).map(|_| None).collect();
    for (chunk_i, chunk) in configs.chunks(threads).enumerate() {
        let base = chunk_i * threads;
        let out: Vec<Result<RunManifest>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .enumerate()
                .map(|(j, cfg)| {
                    let dir = &dirs[base + j];
                    s.spawn(move || execute(cfg, dir))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::State("sweep worker panicked".into()))))
                .collect()
        });
        for (j, r) in out.into_iter().enumerate() {
            results[base + j] = Some(r);
        }
    }
    let mut ok = true;
    for (dir, r) in dirs.iter().zip(results.into_iter().flatten()) {
        match r {
            Ok(m) => {
                ok &= m.failure.is_none();
                report(dir, &m);
            }
            Err(e) => {
                ok = false;
                eprintln!("{}  error: {e}", dir.display());
            }
        }
    }
    Ok(ok)
}

fn plot(dir: &Path) -> Result<bool> {
    let protos = dir.join("prototypes.csv");
    let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let draw = protos.exists() && prototypes_share_final_space(&manifest);
    let written = emit_plots(
        &dir.join("metrics.csv"),
        &dir.join("target_features.csv"),
        draw.then_some(protos.as_path()),
        &dir.join("plots"),
    )?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => single(a, false),
        Command::Baseline(a) => single(a, true),
        Command::Sweep(a) => sweep(a),
        Command::Plot { out_dir } => plot(out_dir),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
