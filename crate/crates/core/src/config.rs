//! Flat `key = value` configuration shared by training, inference and the CLI.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// How the S-head aligns features before its 1x1 layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Alignment {
    /// Ordinary convolution.
    Plain,
    /// Deformable convolution whose offsets are predicted from the feature map.
    Deformable,
    /// Deformable convolution whose offsets come from the refinement deltas.
    Guided,
}

impl FromStr for Alignment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "plain" => Ok(Alignment::Plain),
            "deformable" => Ok(Alignment::Deformable),
            "guided" => Ok(Alignment::Guided),
            other => Err(format!("expected plain|deformable|guided, got `{other}`")),
        }
    }
}

impl fmt::Display for Alignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Alignment::Plain => "plain",
            Alignment::Deformable => "deformable",
            Alignment::Guided => "guided",
        })
    }
}

/// Size of the mimic subset drawn from the teacher sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MimicSubset {
    All,
    Count(usize),
}

impl FromStr for MimicSubset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "all" {
            return Ok(MimicSubset::All);
        }
        s.parse::<usize>()
            .map(MimicSubset::Count)
            .map_err(|_| format!("expected `all` or a count, got `{s}`"))
    }
}

impl fmt::Display for MimicSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MimicSubset::All => f.write_str("all"),
            MimicSubset::Count(n) => write!(f, "{n}"),
        }
    }
}

/// Parsing and printing of one config value.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn format_value(&self) -> String;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                s.parse::<$t>().map_err(|e| format!("`{s}`: {e}"))
            }
            fn format_value(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

scalar_value!(usize, u64, f64, bool, String, Alignment, MimicSubset);

impl ConfigValue for Vec<usize> {
    fn parse_value(s: &str) -> Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(Vec::new());
        }
        s.split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
            .collect()
    }

    fn format_value(&self) -> String {
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

macro_rules! train_config {
    ($( $(#[doc = $doc:expr])* $name:ident : $ty:ty = $default:expr ),* $(,)?) => {
        /// Every tunable of the model, the training schedule, the synthetic
        /// data and inference.
        #[derive(Clone, Debug, PartialEq)]
        pub struct TrainConfig {
            $( $(#[doc = $doc])* pub $name: $ty, )*
        }

        impl Default for TrainConfig {
            fn default() -> Self {
                TrainConfig { $( $name: $default, )* }
            }
        }

        impl TrainConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            /// Sets one key from its text form. Unknown keys are rejected.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key.trim() {
                    $( stringify!($name) => {
                        self.$name = <$ty as ConfigValue>::parse_value(value)
                            .map_err(|e| Error::Config(format!("{}: {e}", stringify!($name))))?;
                    } )*
                    other => return Err(Error::Config(format!("unknown key `{other}`"))),
                }
                Ok(())
            }

            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$( (stringify!($name), self.$name.format_value()) ),*]
            }
        }
    };
}

train_config! {
    /// Square input side in pixels; a multiple of 128.
    image_size: usize = 256,
    num_classes: usize = 3,
    /// Channel width of the four backbone stages (strides 4, 8, 16, 32).
    backbone_widths: Vec<usize> = vec![16, 32, 64, 128],
    /// Convolutions per backbone stage, the first one with stride 2.
    backbone_depth: usize = 2,
    fpn_channels: usize = 64,
    /// S-head alignment layer width.
    s_ch: usize = 64,
    /// S-head feature width; also the width of the T-head regression feature.
    s_fc: usize = 256,
    /// T-head classification fc width.
    t_fc: usize = 256,
    /// T-head regression conv width.
    t_conv: usize = 64,
    /// Hidden widths of the offset micro-network.
    micro_channels: Vec<usize> = vec![64, 128],
    alignment: Alignment = Alignment::Guided,
    /// Anchor side over stride.
    base_scale: f64 = 4.0,
    eta1: f64 = 1.0,
    eta2: f64 = 2.0,
    /// Positive-area side as a fraction of the object side.
    shrink: f64 = 0.3,
    proposal_nms: f64 = 0.8,
    proposal_k: usize = 512,
    head_iou: f64 = 0.6,
    n_teacher: usize = 128,
    pos_ratio: f64 = 0.25,
    hard_k: usize = 128,
    max_reg_pos: usize = 64,
    thead_enabled: bool = true,
    mimic_enabled: bool = true,
    mimic_m: MimicSubset = MimicSubset::All,
    /// T-head reads features one level finer than the anchor level.
    staggered: bool = true,
    detach_teacher: bool = true,
    detach_refinement_deltas: bool = true,
    roi_output: usize = 7,
    roi_sampling: usize = 2,
    base_lr: f64 = 0.01,
    warmup_steps: usize = 500,
    decay_epochs: Vec<usize> = vec![10, 13],
    decay_factor: f64 = 10.0,
    total_epochs: usize = 15,
    momentum: f64 = 0.9,
    weight_decay: f64 = 1e-4,
    /// Global gradient-norm cap; 0 disables clipping.
    grad_clip: f64 = 0.0,
    batch_size: usize = 4,
    seed: u64 = 0,
    train_scenes: usize = 2000,
    eval_scenes: usize = 200,
    min_objects: usize = 1,
    max_objects: usize = 6,
    min_object_size: f64 = 16.0,
    /// Largest object side as a fraction of the image side.
    max_object_frac: f64 = 0.8,
    max_pair_iou: f64 = 0.3,
    noise_std: f64 = 0.04,
    flip: bool = true,
    infer_top_k: usize = 1000,
    infer_nms: f64 = 0.6,
    score_threshold: f64 = 0.005,
    max_detections: usize = 100,
    /// Epochs between periodic checkpoints; 0 keeps only the final one.
    checkpoint_every: usize = 5,
}

impl TrainConfig {
    /// Full-size network widths, sampling sizes and schedule constants.
    pub fn full_scale() -> Self {
        TrainConfig {
            fpn_channels: 256,
            s_ch: 256,
            s_fc: 1024,
            t_fc: 1024,
            t_conv: 256,
            proposal_k: 2000,
            infer_top_k: 1000,
            base_lr: 0.04,
            decay_epochs: vec![8, 11],
            total_epochs: 13,
            ..TrainConfig::default()
        }
    }

    /// Parses `key = value` lines on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`", lineno + 1)));
            };
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides, later ones winning.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref().trim_start_matches("--");
            let Some((k, v)) = o.split_once('=') else {
                return Err(Error::Config(format!("override `{o}` is not key=value")));
            };
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.image_size % 128 != 0 {
            return fail(format!("image_size must be a positive multiple of 128, got {}", self.image_size));
        }
        if self.backbone_widths.len() != 4 {
            return fail("backbone_widths needs exactly four entries".into());
        }
        let positive = [
            ("num_classes", self.num_classes),
            ("backbone_depth", self.backbone_depth),
            ("fpn_channels", self.fpn_channels),
            ("s_ch", self.s_ch),
            ("s_fc", self.s_fc),
            ("t_fc", self.t_fc),
            ("t_conv", self.t_conv),
            ("proposal_k", self.proposal_k),
            ("n_teacher", self.n_teacher),
            ("hard_k", self.hard_k),
            ("max_reg_pos", self.max_reg_pos),
            ("roi_output", self.roi_output),
            ("roi_sampling", self.roi_sampling),
            ("batch_size", self.batch_size),
            ("total_epochs", self.total_epochs),
            ("infer_top_k", self.infer_top_k),
            ("max_detections", self.max_detections),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return fail(format!("{k} must be positive"));
        }
        if self.backbone_widths.iter().chain(&self.micro_channels).any(|&w| w == 0) {
            return fail("layer widths must be positive".into());
        }
        if !self.decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return fail("decay_epochs must be strictly increasing".into());
        }
        if self.decay_epochs.last().is_some_and(|&e| e >= self.total_epochs) {
            return fail("decay_epochs must be below total_epochs".into());
        }
        if !(self.eta1 < self.eta2) || self.eta1 <= 0.0 {
            return fail("need 0 < eta1 < eta2".into());
        }
        if !(self.shrink > 0.0 && self.shrink <= 1.0) {
            return fail("shrink must be in (0, 1]".into());
        }
        if !(self.pos_ratio >= 0.0 && self.pos_ratio <= 1.0) {
            return fail("pos_ratio must be in [0, 1]".into());
        }
        if self.decay_factor <= 0.0 || self.base_lr <= 0.0 {
            return fail("base_lr and decay_factor must be positive".into());
        }
        if self.min_objects > self.max_objects {
            return fail("min_objects exceeds max_objects".into());
        }
        if self.mimic_enabled && !self.thead_enabled {
            return fail("mimic_enabled requires thead_enabled".into());
        }
        Ok(())
    }

    /// Gradient steps in one epoch.
    pub fn steps_per_epoch(&self) -> usize {
        self.train_scenes.div_ceil(self.batch_size).max(1)
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch() * self.total_epochs
    }

    /// Logit count of both heads: the classes plus background.
    pub fn num_logits(&self) -> usize {
        self.num_classes + 1
    }
}
