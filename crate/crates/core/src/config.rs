//! Experiment configuration stored as flat `section.key = value` lines.
//!
//! Every key is required and unknown keys are rejected, so a config file is a
//! complete record of a run. [`ExperimentConfig::to_text`] writes the
//! canonical form; its sha256 is the config hash stamped on outputs.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{self, Error, Result};
use crate::gcn::GcnConfig;
use crate::losses::LossWeights;
use crate::matcher::Distance;
use crate::model::PretrainConfig;
use crate::synth::SynthConfig;

/// Which optional terms of the joint objective are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    pub lb: bool,
    pub sgmd: bool,
    pub gcn: bool,
    /// Unbounded `−log R` balance instead of the limited one.
    pub vanilla_balance: bool,
}

impl Flags {
    pub const BASELINE: Flags = Flags {
        lb: false,
        sgmd: false,
        gcn: false,
        vanilla_balance: false,
    };
    pub const FULL: Flags = Flags {
        lb: true,
        sgmd: true,
        gcn: true,
        vanilla_balance: false,
    };

    pub fn validate(&self) -> Result<()> {
        if self.lb && self.vanilla_balance {
            return Err(Error::Validation(
                "flags: vanilla_balance and lb are mutually exclusive".into(),
            ));
        }
        Ok(())
    }

    /// Short variant name, e.g. `lb+sgmd` or `baseline`.
    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if self.lb {
            parts.push("lb");
        }
        if self.vanilla_balance {
            parts.push("vanilla-balance");
        }
        if self.sgmd {
            parts.push("sgmd");
        }
        if self.gcn {
            parts.push("gcn");
        }
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("+")
        }
    }
}

impl FromStr for Flags {
    type Err = Error;

    /// Comma or `+` separated list of `lb`, `sgmd`, `gcn`, `vanilla`;
    /// `baseline` or `none` for no flags.
    fn from_str(s: &str) -> Result<Self> {
        let mut f = Flags::BASELINE;
        for tok in s.split([',', '+']).map(str::trim).filter(|t| !t.is_empty()) {
            match tok {
                "lb" => f.lb = true,
                "sgmd" => f.sgmd = true,
                "gcn" => f.gcn = true,
                "vanilla" | "vanilla-balance" | "vanilla_balance" => f.vanilla_balance = true,
                "baseline" | "none" => {}
                other => {
                    return Err(Error::InvalidValue {
                        key: "flags".into(),
                        message: format!("unknown flag `{other}`"),
                    })
                }
            }
        }
        f.validate()?;
        Ok(f)
    }
}

/// Target unknown-class mass of the limited balance term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum BalanceTarget {
    /// `(L_T − L_S) / L_T`, the unknown share of the label space.
    Auto,
    Fixed(f64),
}

impl BalanceTarget {
    pub fn resolve(&self, known: usize, total: usize) -> f64 {
        match *self {
            Self::Auto => (total - known) as f64 / total as f64,
            Self::Fixed(w) => w,
        }
    }
}

impl fmt::Display for BalanceTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Auto => f.write_str("auto"),
            Self::Fixed(w) => write!(f, "{w}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_d: f64,
    pub lambda_b: f64,
    pub lambda_g: f64,
    pub tau: f64,
    pub w: BalanceTarget,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_d: 0.1,
            lambda_b: 0.1,
            lambda_g: 0.5,
            tau: 0.3,
            w: BalanceTarget::Auto,
            epsilon: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn resolve(&self, known: usize, total: usize) -> Result<LossWeights> {
        let lw = LossWeights {
            lambda_d: self.lambda_d,
            lambda_b: self.lambda_b,
            lambda_g: self.lambda_g,
            tau: self.tau,
            w: self.w.resolve(known, total),
            epsilon: self.epsilon,
        };
        if known < total {
            lw.validate()?;
        }
        Ok(lw)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// L2 penalty on encoder weight and head.
    pub weight_decay: f64,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            epochs: 20,
            batch_size: 32,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchingConfig {
    pub folds: usize,
    /// Recompute the matching every this many epochs; 0 keeps it fixed.
    pub rematch_every: usize,
    pub distance: Distance,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            rematch_every: 0,
            distance: Distance::L1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Encoder output width `M`.
    pub feature_dim: usize,
    pub synth: SynthConfig,
    pub pretrain: PretrainConfig,
    pub gcn: GcnConfig,
    /// Scale word vectors to unit rows before they enter the GCN.
    pub normalize_word_vectors: bool,
    pub losses: LossConfig,
    pub joint: JointConfig,
    pub matching: MatchingConfig,
    pub flags: Flags,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            feature_dim: 16,
            synth: SynthConfig::default(),
            pretrain: PretrainConfig::default(),
            gcn: GcnConfig::default(),
            normalize_word_vectors: false,
            losses: LossConfig::default(),
            joint: JointConfig::default(),
            matching: MatchingConfig::default(),
            flags: Flags::FULL,
        }
    }
}

struct Entries {
    origin: String,
    map: BTreeMap<String, (String, usize)>,
}

impl Entries {
    fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let loc = format!("{origin}:{}", i + 1);
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(&loc, "expected `section.key = value`"))?;
            let (k, v) = (k.trim(), v.trim());
            if !k.contains('.') || k.split('.').any(str::is_empty) {
                return Err(Error::parse(
                    &loc,
                    format!("key `{k}` is not `section.key`"),
                ));
            }
            if map.insert(k.to_string(), (v.to_string(), i + 1)).is_some() {
                return Err(Error::parse(&loc, format!("duplicate key `{k}`")));
            }
        }
        Ok(Self {
            origin: origin.to_string(),
            map,
        })
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let (v, line) = self
            .map
            .remove(key)
            .ok_or_else(|| Error::MissingKey(key.to_string()))?;
        v.parse().map_err(|e: T::Err| Error::InvalidValue {
            key: key.to_string(),
            message: format!("{}:{line}: `{v}`: {e}", self.origin),
        })
    }

    fn finish(self) -> Result<()> {
        match self.map.into_iter().next() {
            None => Ok(()),
            Some((k, (_, line))) => Err(Error::parse(
                format!("{}:{line}", self.origin),
                format!("unknown key `{k}`"),
            )),
        }
    }
}

impl FromStr for BalanceTarget {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            return Ok(Self::Auto);
        }
        s.parse::<f64>()
            .map(Self::Fixed)
            .map_err(|_| "expected a number or `auto`".to_string())
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        self.synth.validate()?;
        self.flags.validate()?;
        if self.feature_dim == 0 {
            return bad("run.feature_dim must be >= 1".into());
        }
        let positive = [
            ("pretrain.lr", self.pretrain.lr),
            ("gcn.lr", self.gcn.lr),
            ("joint.lr", self.joint.lr),
        ];
        for (k, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{k} must be positive"));
            }
        }
        let unit = [
            ("pretrain.momentum", self.pretrain.momentum),
            ("gcn.momentum", self.gcn.momentum),
            ("joint.momentum", self.joint.momentum),
        ];
        for (k, v) in unit {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{k} must be in [0, 1)"));
            }
        }
        let counts = [
            ("pretrain.epochs", self.pretrain.epochs),
            ("pretrain.batch_size", self.pretrain.batch_size),
            ("gcn.layers", self.gcn.layers),
            ("gcn.steps", self.gcn.steps),
            ("joint.epochs", self.joint.epochs),
            ("joint.batch_size", self.joint.batch_size),
            ("matching.folds", self.matching.folds),
        ];
        for (k, v) in counts {
            if v == 0 {
                return bad(format!("{k} must be >= 1"));
            }
        }
        if self.gcn.layers > 1 && self.gcn.hidden_dim == 0 {
            return bad("gcn.hidden_dim must be >= 1".into());
        }
        if self.pretrain.weight_decay < 0.0
            || self.joint.weight_decay < 0.0
            || self.gcn.weight_decay < 0.0
        {
            return bad("weight_decay must be non-negative".into());
        }
        self.losses
            .resolve(self.synth.known_classes, self.synth.total_classes)?;
        Ok(())
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut e = Entries::parse(text, origin)?;
        let cfg = Self {
            seed: e.take("run.seed")?,
            feature_dim: e.take("run.feature_dim")?,
            synth: SynthConfig {
                known_classes: e.take("synth.known_classes")?,
                total_classes: e.take("synth.total_classes")?,
                raw_dim: e.take("synth.raw_dim")?,
                latent_dim: e.take("synth.latent_dim")?,
                word_dim: e.take("synth.word_dim")?,
                source_per_class: e.take("synth.source_per_class")?,
                target_per_class: e.take("synth.target_per_class")?,
                branching: e.take("synth.branching")?,
                root_scale: e.take("synth.root_scale")?,
                step_size: e.take("synth.step_size")?,
                noise: e.take("synth.noise")?,
                word_offset: e.take("synth.word_offset")?,
                word_noise: e.take("synth.word_noise")?,
                rotation: e.take("synth.rotation")?,
                translation: e.take("synth.translation")?,
                seed: e.take("synth.seed")?,
            },
            pretrain: PretrainConfig {
                lr: e.take("pretrain.lr")?,
                momentum: e.take("pretrain.momentum")?,
                epochs: e.take("pretrain.epochs")?,
                batch_size: e.take("pretrain.batch_size")?,
                weight_decay: e.take("pretrain.weight_decay")?,
            },
            gcn: GcnConfig {
                layers: e.take("gcn.layers")?,
                hidden_dim: e.take("gcn.hidden_dim")?,
                activation_slope: e.take("gcn.activation_slope")?,
                lr: e.take("gcn.lr")?,
                momentum: e.take("gcn.momentum")?,
                steps: e.take("gcn.steps")?,
                init_scale: e.take("gcn.init_scale")?,
                weight_decay: e.take("gcn.weight_decay")?,
                normalize_targets: e.take("gcn.normalize_targets")?,
            },
            normalize_word_vectors: e.take("gcn.normalize_word_vectors")?,
            losses: LossConfig {
                lambda_d: e.take("losses.lambda_d")?,
                lambda_b: e.take("losses.lambda_b")?,
                lambda_g: e.take("losses.lambda_g")?,
                tau: e.take("losses.tau")?,
                w: e.take("losses.w")?,
                epsilon: e.take("losses.epsilon")?,
            },
            joint: JointConfig {
                lr: e.take("joint.lr")?,
                momentum: e.take("joint.momentum")?,
                epochs: e.take("joint.epochs")?,
                batch_size: e.take("joint.batch_size")?,
                weight_decay: e.take("joint.weight_decay")?,
            },
            matching: MatchingConfig {
                folds: e.take("matching.folds")?,
                rematch_every: e.take("matching.rematch_every")?,
                distance: e.take("matching.distance")?,
            },
            flags: Flags {
                lb: e.take("flags.lb")?,
                sgmd: e.take("flags.sgmd")?,
                gcn: e.take("flags.gcn")?,
                vanilla_balance: e.take("flags.vanilla_balance")?,
            },
        };
        e.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&error::read_to_string(path)?, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        error::write_string(path, &self.to_text())
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let s = &self.synth;
        let p = &self.pretrain;
        let g = &self.gcn;
        let l = &self.losses;
        let j = &self.joint;
        let m = &self.matching;
        let f = &self.flags;
        let sections: [(&str, Vec<(&str, String)>); 8] = [
            (
                "run",
                vec![
                    ("seed", self.seed.to_string()),
                    ("feature_dim", self.feature_dim.to_string()),
                ],
            ),
            (
                "synth",
                vec![
                    ("known_classes", s.known_classes.to_string()),
                    ("total_classes", s.total_classes.to_string()),
                    ("raw_dim", s.raw_dim.to_string()),
                    ("latent_dim", s.latent_dim.to_string()),
                    ("word_dim", s.word_dim.to_string()),
                    ("source_per_class", s.source_per_class.to_string()),
                    ("target_per_class", s.target_per_class.to_string()),
                    ("branching", s.branching.to_string()),
                    ("root_scale", s.root_scale.to_string()),
                    ("step_size", s.step_size.to_string()),
                    ("noise", s.noise.to_string()),
                    ("word_offset", s.word_offset.to_string()),
                    ("word_noise", s.word_noise.to_string()),
                    ("rotation", s.rotation.to_string()),
                    ("translation", s.translation.to_string()),
                    ("seed", s.seed.to_string()),
                ],
            ),
            (
                "pretrain",
                vec![
                    ("lr", p.lr.to_string()),
                    ("momentum", p.momentum.to_string()),
                    ("epochs", p.epochs.to_string()),
                    ("batch_size", p.batch_size.to_string()),
                    ("weight_decay", p.weight_decay.to_string()),
                ],
            ),
            (
                "gcn",
                vec![
                    ("layers", g.layers.to_string()),
                    ("hidden_dim", g.hidden_dim.to_string()),
                    ("activation_slope", g.activation_slope.to_string()),
                    ("lr", g.lr.to_string()),
                    ("momentum", g.momentum.to_string()),
                    ("steps", g.steps.to_string()),
                    ("init_scale", g.init_scale.to_string()),
                    ("weight_decay", g.weight_decay.to_string()),
                    ("normalize_targets", g.normalize_targets.to_string()),
                    (
                        "normalize_word_vectors",
                        self.normalize_word_vectors.to_string(),
                    ),
                ],
            ),
            (
                "losses",
                vec![
                    ("lambda_d", l.lambda_d.to_string()),
                    ("lambda_b", l.lambda_b.to_string()),
                    ("lambda_g", l.lambda_g.to_string()),
                    ("tau", l.tau.to_string()),
                    ("w", l.w.to_string()),
                    ("epsilon", l.epsilon.to_string()),
                ],
            ),
            (
                "joint",
                vec![
                    ("lr", j.lr.to_string()),
                    ("momentum", j.momentum.to_string()),
                    ("epochs", j.epochs.to_string()),
                    ("batch_size", j.batch_size.to_string()),
                    ("weight_decay", j.weight_decay.to_string()),
                ],
            ),
            (
                "matching",
                vec![
                    ("folds", m.folds.to_string()),
                    ("rematch_every", m.rematch_every.to_string()),
                    ("distance", m.distance.to_string()),
                ],
            ),
            (
                "flags",
                vec![
                    ("lb", f.lb.to_string()),
                    ("sgmd", f.sgmd.to_string()),
                    ("gcn", f.gcn.to_string()),
                    ("vanilla_balance", f.vanilla_balance.to_string()),
                ],
            ),
        ];
        let mut out = String::new();
        for (i, (section, keys)) in sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            for (k, v) in keys {
                let _ = writeln!(out, "{section}.{k} = {v}");
            }
        }
        out
    }

    /// Hex sha256 of the canonical text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}
