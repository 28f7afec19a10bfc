//! Flat `key=value` experiment configuration with stage-scoped prefixes
//! (`stage1.gamma1=10`), plus grid expansion for sweeps.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::data::DomainSpec;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nn::Architecture;
use crate::structure::AugmentConfig;

/// Where rectified labels are derived from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    /// ω ⊙ p₀ with p₀ frozen after warm-up.
    FixedBoilerplate,
    /// ω ⊙ p with p the live network's predictions (ablation).
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelForm {
    Hard,
    Soft,
}

/// Which labelled features seed the prototype bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtoInit {
    /// Target features under the initial hard pseudo labels.
    TargetPseudo,
    /// Source features under their ground-truth labels.
    SourceTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudentInit {
    /// Continue from a copy of the teacher.
    Resume,
    FreshRandom,
    /// Random init followed by contrastive pretraining on target points.
    FreshPretrained,
}

macro_rules! keyword_enum {
    ($ty:ident { $($var:ident => $text:literal),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($ty::$var),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " {:?}"), other
                    ))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$var => $text,)+ })
            }
        }
    };
}

keyword_enum!(LabelMode { FixedBoilerplate => "fixed-boilerplate", Dynamic => "dynamic" });
keyword_enum!(LabelForm { Hard => "hard", Soft => "soft" });
keyword_enum!(ProtoInit { TargetPseudo => "target-pseudo", SourceTruth => "source-truth" });
keyword_enum!(StudentInit { Resume => "resume", FreshRandom => "fresh-random", FreshPretrained => "fresh-pretrained" });

/// Hyperparameters of one training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay applied once per epoch.
    pub lr_decay: f64,
    pub momentum: f64,
    /// Prototype EMA momentum λ.
    pub proto_momentum: f64,
    /// Momentum-encoder decay, independent of λ.
    pub ema_decay: f64,
    pub tau: f64,
    pub losses: LossWeights<f64>,
    pub kd_threshold: f64,
    /// Confidence threshold applied to the renormalized rectified labels.
    pub label_threshold: f64,
    pub label_mode: LabelMode,
    pub label_form: LabelForm,
    pub proto_init: ProtoInit,
    /// When false the modulation weights are uniform.
    pub denoise: bool,
    pub augment: AugmentConfig,
    pub student_init: StudentInit,
    pub seed: u64,
}

impl StageConfig {
    /// Stage-1 defaults, tuned for the 2-D presets.
    pub fn stage1() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.05,
            lr_decay: 0.9,
            momentum: 0.0,
            proto_momentum: 0.9999,
            ema_decay: 0.999,
            tau: 1.0,
            losses: LossWeights::default(),
            kd_threshold: 0.95,
            label_threshold: 0.0,
            label_mode: LabelMode::FixedBoilerplate,
            label_form: LabelForm::Hard,
            proto_init: ProtoInit::TargetPseudo,
            denoise: true,
            augment: AugmentConfig {
                strong_jitter_std: 1.0,
                strong_drop_prob: 0.0,
                ..AugmentConfig::default()
            },
            student_init: StudentInit::FreshPretrained,
            seed: 0,
        }
    }

    pub fn warmup() -> Self {
        Self {
            learning_rate: 0.01,
            ..Self::stage1()
        }
    }

    pub fn distill() -> Self {
        Self {
            epochs: 10,
            ..Self::stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0) {
            return bad("learning rate and its decay must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.proto_momentum) || !(0.0..1.0).contains(&self.ema_decay) {
            return bad("proto_momentum and ema_decay must lie in [0, 1)");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if !(0.0..=1.0).contains(&self.kd_threshold) || !(0.0..=1.0).contains(&self.label_threshold) {
            return bad("thresholds must lie in [0, 1]");
        }
        self.losses.validate()?;
        self.augment.validate()
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.learning_rate = parse(key, value)?,
            "lr_decay" => self.lr_decay = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "proto_momentum" => self.proto_momentum = parse(key, value)?,
            "ema_decay" => self.ema_decay = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "sce_alpha" => self.losses.sce_alpha = parse(key, value)?,
            "sce_beta" => self.losses.sce_beta = parse(key, value)?,
            "gamma1" => self.losses.gamma1 = parse(key, value)?,
            "gamma2" => self.losses.gamma2 = parse(key, value)?,
            "kd_beta" => self.losses.kd_beta = parse(key, value)?,
            "clamp_floor" => self.losses.clamp_floor = parse(key, value)?,
            "kd_threshold" => self.kd_threshold = parse(key, value)?,
            "label_threshold" => self.label_threshold = parse(key, value)?,
            "label_mode" => self.label_mode = value.parse()?,
            "label_form" => self.label_form = value.parse()?,
            "proto_init" => self.proto_init = value.parse()?,
            "denoise" => self.denoise = parse(key, value)?,
            "weak_jitter" => self.augment.weak_jitter_std = parse(key, value)?,
            "strong_jitter" => self.augment.strong_jitter_std = parse(key, value)?,
            "strong_drop" => self.augment.strong_drop_prob = parse(key, value)?,
            "strong_scale_lo" => self.augment.strong_scale_range.0 = parse(key, value)?,
            "strong_scale_hi" => self.augment.strong_scale_range.1 = parse(key, value)?,
            "student_init" => self.student_init = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown stage key {key:?}"))),
        }
        Ok(())
    }

    fn entries(&self, prefix: &str, out: &mut BTreeMap<String, String>) {
        let mut put = |k: &str, v: String| {
            out.insert(format!("{prefix}.{k}"), v);
        };
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("lr", fmt_f(self.learning_rate));
        put("lr_decay", fmt_f(self.lr_decay));
        put("momentum", fmt_f(self.momentum));
        put("proto_momentum", fmt_f(self.proto_momentum));
        put("ema_decay", fmt_f(self.ema_decay));
        put("tau", fmt_f(self.tau));
        put("sce_alpha", fmt_f(self.losses.sce_alpha));
        put("sce_beta", fmt_f(self.losses.sce_beta));
        put("gamma1", fmt_f(self.losses.gamma1));
        put("gamma2", fmt_f(self.losses.gamma2));
        put("kd_beta", fmt_f(self.losses.kd_beta));
        put("clamp_floor", fmt_f(self.losses.clamp_floor));
        put("kd_threshold", fmt_f(self.kd_threshold));
        put("label_threshold", fmt_f(self.label_threshold));
        put("label_mode", self.label_mode.to_string());
        put("label_form", self.label_form.to_string());
        put("proto_init", self.proto_init.to_string());
        put("denoise", self.denoise.to_string());
        put("weak_jitter", fmt_f(self.augment.weak_jitter_std));
        put("strong_jitter", fmt_f(self.augment.strong_jitter_std));
        put("strong_drop", fmt_f(self.augment.strong_drop_prob));
        put("strong_scale_lo", fmt_f(self.augment.strong_scale_range.0));
        put("strong_scale_hi", fmt_f(self.augment.strong_scale_range.1));
        put("student_init", self.student_init.to_string());
        put("seed", self.seed.to_string());
    }
}

/// Contrastive pretraining used by the `fresh-pretrained` student init.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Std of the input jitter producing the two views.
    pub jitter: f64,
    /// Squared-distance margin for negatives.
    pub margin: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            learning_rate: 0.05,
            jitter: 0.1,
            margin: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    Stage1,
    Distill,
}

keyword_enum!(StageKind { Stage1 => "stage1", Distill => "distill" });

/// Warm-up stopping rule: stop once source accuracy varies by less than
/// `plateau` over the last `patience` epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plateau {
    pub plateau: f64,
    pub patience: usize,
}

/// Everything needed to run one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DomainSpec,
    pub arch_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub seed: u64,
    pub stages: Vec<StageKind>,
    pub eval_interval: usize,
    pub warmup: StageConfig,
    pub warmup_stop: Plateau,
    pub stage1: StageConfig,
    pub distill: StageConfig,
    pub pretrain: PretrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_preset("gauss-shift").expect("built-in preset")
    }
}

impl ExperimentConfig {
    pub fn for_preset(name: &str) -> Result<Self> {
        Ok(Self {
            data: DomainSpec::preset(name)?,
            arch_hidden: vec![32],
            feature_dim: 32,
            seed: 0,
            stages: vec![StageKind::Stage1, StageKind::Distill, StageKind::Distill],
            eval_interval: 50,
            warmup: StageConfig::warmup(),
            warmup_stop: Plateau {
                plateau: 0.005,
                patience: 3,
            },
            stage1: StageConfig::stage1(),
            distill: StageConfig::distill(),
            pretrain: PretrainConfig::default(),
        })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.data.dim,
            hidden: self.arch_hidden.clone(),
            feature_dim: self.feature_dim,
            classes: self.data.classes,
        }
    }

    /// Sets the run seed and propagates it to data generation and every stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.seed = seed;
        self.warmup.seed = seed;
        self.stage1.seed = seed;
        self.distill.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.warmup.validate()?;
        self.stage1.validate()?;
        self.distill.validate()?;
        if self.feature_dim == 0 || self.eval_interval == 0 {
            return Err(Error::Config("feature_dim and eval_interval must be positive".into()));
        }
        if self.pretrain.batch_size < 2 {
            return Err(Error::Config("pretrain.batch_size must be at least 2".into()));
        }
        Ok(())
    }

    /// Parses `key=value` text on top of the preset named by `preset=` (or
    /// gauss-shift). `seed=` is applied before the other keys so stage-scoped
    /// seeds can still override it.
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let preset = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "preset")
            .map_or("gauss-shift", |(_, v)| v.as_str());
        let mut cfg = Self::for_preset(preset)?;
        if let Some((_, v)) = pairs.iter().rev().find(|(k, _)| k == "seed") {
            cfg = cfg.with_seed(parse("seed", v)?);
        }
        for (k, v) in pairs {
            if k == "preset" || k == "seed" {
                continue;
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (scope, rest) = key.split_once('.').unwrap_or(("", key));
        match (scope, rest) {
            ("", "stages") => self.stages = parse_stages(value)?,
            ("", "eval_interval") => self.eval_interval = parse(key, value)?,
            ("net", "hidden") => {
                self.arch_hidden = if value.is_empty() {
                    Vec::new()
                } else {
                    value.split('x').map(|w| parse(key, w)).collect::<Result<_>>()?
                }
            }
            ("net", "feature_dim") => self.feature_dim = parse(key, value)?,
            ("data", "n_source") => self.data.n_source = parse(key, value)?,
            ("data", "n_target") => self.data.n_target = parse(key, value)?,
            ("data", "seed") => self.data.seed = parse(key, value)?,
            ("data", "spread") => self.data.set_spread(parse(key, value)?),
            ("data", "rotation_deg") => self.data.shift.rotation_deg = parse(key, value)?,
            ("data", "translation") => {
                self.data.shift.translation = value.split('x').map(|w| parse(key, w)).collect::<Result<_>>()?
            }
            ("warmup", "plateau") => self.warmup_stop.plateau = parse(key, value)?,
            ("warmup", "patience") => self.warmup_stop.patience = parse(key, value)?,
            ("warmup", k) => self.warmup.set(k, value)?,
            ("stage1", k) => self.stage1.set(k, value)?,
            ("distill", k) => self.distill.set(k, value)?,
            ("pretrain", "epochs") => self.pretrain.epochs = parse(key, value)?,
            ("pretrain", "batch_size") => self.pretrain.batch_size = parse(key, value)?,
            ("pretrain", "lr") => self.pretrain.learning_rate = parse(key, value)?,
            ("pretrain", "jitter") => self.pretrain.jitter = parse(key, value)?,
            ("pretrain", "margin") => self.pretrain.margin = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Fully resolved key/value snapshot, sorted by key.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("preset".into(), self.data.name.clone());
        m.insert("seed".into(), self.seed.to_string());
        m.insert(
            "stages".into(),
            self.stages.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
        );
        m.insert("eval_interval".into(), self.eval_interval.to_string());
        m.insert(
            "net.hidden".into(),
            self.arch_hidden.iter().map(ToString::to_string).collect::<Vec<_>>().join("x"),
        );
        m.insert("net.feature_dim".into(), self.feature_dim.to_string());
        m.insert("data.n_source".into(), self.data.n_source.to_string());
        m.insert("data.n_target".into(), self.data.n_target.to_string());
        m.insert("data.seed".into(), self.data.seed.to_string());
        m.insert("data.spread".into(), fmt_f(self.data.spread()));
        m.insert("data.rotation_deg".into(), fmt_f(self.data.shift.rotation_deg));
        m.insert(
            "data.translation".into(),
            self.data.shift.translation.iter().map(|v| fmt_f(*v)).collect::<Vec<_>>().join("x"),
        );
        m.insert("warmup.plateau".into(), fmt_f(self.warmup_stop.plateau));
        m.insert("warmup.patience".into(), self.warmup_stop.patience.to_string());
        self.warmup.entries("warmup", &mut m);
        self.stage1.entries("stage1", &mut m);
        self.distill.entries("distill", &mut m);
        m.insert("pretrain.epochs".into(), self.pretrain.epochs.to_string());
        m.insert("pretrain.batch_size".into(), self.pretrain.batch_size.to_string());
        m.insert("pretrain.lr".into(), fmt_f(self.pretrain.learning_rate));
        m.insert("pretrain.jitter".into(), fmt_f(self.pretrain.jitter));
        m.insert("pretrain.margin".into(), fmt_f(self.pretrain.margin));
        m
    }

    /// Snapshot rendered back into the config text format.
    pub fn to_text(&self) -> String {
        self.snapshot()
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key}={value:?}: {e}")))
}

pub fn parse_stages(value: &str) -> Result<Vec<StageKind>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty() && *s != "none")
        .map(str::parse)
        .collect()
}

/// Ordered `key=value` pairs; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected key=value, got {raw:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Keys whose values may hold comma lists without being sweep axes.
const LIST_KEYS: [&str; 1] = ["stages"];

/// Expands comma-separated values into the Cartesian grid of configurations.
/// Axes vary in file order with the last axis fastest.
pub fn expand_sweep(text: &str) -> Result<Vec<Vec<(String, String)>>> {
    let pairs = parse_pairs(text)?;
    let mut grid: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (k, v) in pairs {
        let options: Vec<String> = if LIST_KEYS.contains(&k.as_str()) {
            v.split(';').map(|s| s.trim().to_string()).collect()
        } else {
            v.split(',').map(|s| s.trim().to_string()).collect()
        };
        let mut next = Vec::with_capacity(grid.len() * options.len());
        for point in &grid {
            for o in &options {
                let mut p = point.clone();
                p.push((k.clone(), o.clone()));
                next.push(p);
            }
        }
        grid = next;
    }
    Ok(grid)
}
