//! Flat `key = value` run configuration covering every module.

use std::fmt::Write as _;
use std::path::Path;

use crate::codec::Codec;
use crate::distill::{DistillConfig, Renoise};
use crate::error::{Error, Result};
use crate::metrics::Thresholds;
use crate::net::{HashEmbedder, ModelConfig};
use crate::registration::{IcpConfig, RotationMode};
use crate::rollout::OrderPolicy;
use crate::scenes::{SceneRules, Splits};

/// Seed of the frozen instruction-embedding table.
pub const TEXT_SEED: u64 = 0x7e57;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub jobs: usize,
    pub data_dir: String,
    pub out_dir: String,

    pub resolution: usize,
    pub patch: usize,
    pub channels: usize,
    pub threshold: f64,

    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub cond_dim: usize,
    pub ffn_mult: usize,
    pub identity_flag: bool,
    pub vocab: usize,
    pub max_tokens: usize,

    pub cfg_weight: f64,
    pub num_steps: usize,
    pub drop: f64,

    pub train_steps: usize,
    pub batch: usize,
    pub lr_base: f64,
    pub lr_teacher: f64,

    pub distill_steps: usize,
    pub lr_student: f64,
    pub lr_critic: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub ratio: usize,
    pub distill_iterations: usize,
    pub step_loss: bool,
    pub holistic_loss: bool,
    pub renoise: String,

    pub icp_iters: usize,
    pub icp_tol: f64,
    pub icp_yaws: usize,
    pub icp_points: usize,
    pub icp_full_rotation: bool,

    /// Collision and boundary tolerance in voxels.
    pub tau: f64,
    pub delta_pos: f64,
    pub delta_yaw: f64,
    pub bootstrap: usize,

    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub attempts: usize,

    pub order: String,
    pub eval_min_objects: usize,
    pub eval_max_objects: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            jobs: 1,
            data_dir: "data".into(),
            out_dir: "out".into(),
            resolution: 16,
            patch: 2,
            channels: 8,
            threshold: 0.0,
            width: 64,
            layers: 4,
            heads: 4,
            cond_dim: 64,
            ffn_mult: 4,
            identity_flag: true,
            vocab: 4096,
            max_tokens: 16,
            cfg_weight: 3.0,
            num_steps: 50,
            drop: 0.1,
            train_steps: 2000,
            batch: 8,
            lr_base: 1e-4,
            lr_teacher: 5e-5,
            distill_steps: 4,
            lr_student: 2e-6,
            lr_critic: 5e-7,
            beta1: 0.0,
            beta2: 0.999,
            weight_decay: 0.01,
            ratio: 5,
            distill_iterations: 500,
            step_loss: true,
            holistic_loss: true,
            renoise: "fresh".into(),
            icp_iters: 50,
            icp_tol: 1e-6,
            icp_yaws: 8,
            icp_points: 512,
            icp_full_rotation: false,
            tau: 1.0,
            delta_pos: 0.05,
            delta_yaw: 15.0,
            bootstrap: 1000,
            train_scenes: 1024,
            val_scenes: 64,
            test_scenes: 128,
            min_objects: 3,
            max_objects: 10,
            attempts: 1000,
            order: "bottom-up".into(),
            eval_min_objects: 8,
            eval_max_objects: 10,
        }
    }
}

trait Value: Sized {
    fn parse_value(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse_value(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
plain_value!(u64, usize, bool);

impl Value for f64 {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl Value for String {
    fn parse_value(s: &str) -> Option<Self> {
        let s = s.trim();
        let s = s
            .strip_prefix('"')
            .and_then(|r| r.strip_suffix('"'))
            .unwrap_or(s);
        Some(s.to_string())
    }
    fn render(&self) -> String {
        self.clone()
    }
}

macro_rules! keys {
    ($($key:literal => $field:ident),* $(,)?) => {
        impl RunConfig {
            /// Every accepted key, in file order.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$field = Value::parse_value(value).ok_or_else(|| {
                            Error::Config(format!("bad value for {key}: `{value}`"))
                        })?;
                    })*
                    other => return Err(Error::Config(format!("unknown key `{other}`"))),
                }
                Ok(())
            }

            /// Resolved `key = value` lines.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(let _ = writeln!(out, "{} = {}", $key, Value::render(&self.$field));)*
                out
            }
        }
    };
}

keys! {
    "seed" => seed,
    "jobs" => jobs,
    "paths.data" => data_dir,
    "paths.out" => out_dir,
    "grid.resolution" => resolution,
    "codec.patch" => patch,
    "codec.d" => channels,
    "codec.threshold" => threshold,
    "model.width" => width,
    "model.layers" => layers,
    "model.heads" => heads,
    "model.cond_dim" => cond_dim,
    "model.ffn_mult" => ffn_mult,
    "model.identity_flag" => identity_flag,
    "text.vocab" => vocab,
    "text.max_tokens" => max_tokens,
    "flow.cfg_weight" => cfg_weight,
    "flow.num_steps" => num_steps,
    "flow.drop" => drop,
    "train.steps" => train_steps,
    "train.batch" => batch,
    "train.lr_base" => lr_base,
    "train.lr_teacher" => lr_teacher,
    "distill.T" => distill_steps,
    "distill.lr_student" => lr_student,
    "distill.lr_critic" => lr_critic,
    "distill.beta1" => beta1,
    "distill.beta2" => beta2,
    "distill.weight_decay" => weight_decay,
    "distill.ratio" => ratio,
    "distill.iterations" => distill_iterations,
    "distill.step_loss" => step_loss,
    "distill.holistic_loss" => holistic_loss,
    "distill.renoise" => renoise,
    "icp.max_iters" => icp_iters,
    "icp.tol" => icp_tol,
    "icp.yaw_candidates" => icp_yaws,
    "icp.max_points" => icp_points,
    "icp.full_rotation" => icp_full_rotation,
    "metrics.tau" => tau,
    "metrics.delta_pos" => delta_pos,
    "metrics.delta_yaw" => delta_yaw,
    "metrics.bootstrap" => bootstrap,
    "data.train" => train_scenes,
    "data.val" => val_scenes,
    "data.test" => test_scenes,
    "data.min_objects" => min_objects,
    "data.max_objects" => max_objects,
    "data.attempts" => attempts,
    "order.policy" => order,
    "eval.min_objects" => eval_min_objects,
    "eval.max_objects" => eval_max_objects,
}

impl RunConfig {
    /// Smaller latent (patch 4) and network for single-core training runs.
    /// A patch decodes as occupied when it holds any voxel.
    pub fn compact() -> Self {
        RunConfig {
            patch: 4,
            threshold: -1.0 + 1.0 / 64.0,
            width: 32,
            layers: 2,
            heads: 2,
            cond_dim: 32,
            ffn_mult: 4,
            ..RunConfig::default()
        }
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.codec()?.latent_dims(self.resolution).map_err(|e| Error::Config(e.to_string()))?;
        self.model_config().validate()?;
        self.distill_config()?.validate()?;
        self.icp_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.order_policy()?;
        if !(0.0..=1.0).contains(&self.drop) {
            return Err(Error::Config(format!("flow.drop {} outside [0, 1]", self.drop)));
        }
        if self.cfg_weight < 0.0 || self.num_steps == 0 {
            return Err(Error::Config("flow.cfg_weight must be >= 0 and flow.num_steps >= 1".into()));
        }
        if self.batch == 0 || self.jobs == 0 || self.vocab == 0 || self.max_tokens == 0 {
            return Err(Error::Config("train.batch, jobs and text sizes must be >= 1".into()));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config("data.min_objects must be in 1..=data.max_objects".into()));
        }
        if self.tau < 0.0 {
            return Err(Error::Config("metrics.tau must be >= 0".into()));
        }
        Ok(())
    }

    pub fn codec(&self) -> Result<Codec> {
        Codec::new(self.patch, self.channels, self.threshold as f32).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            channels: self.channels,
            width: self.width,
            layers: self.layers,
            heads: self.heads,
            cond_dim: self.cond_dim,
            ffn_mult: self.ffn_mult,
            identity_flag: self.identity_flag,
            seed: self.seed,
        }
    }

    pub fn embedder(&self) -> HashEmbedder {
        HashEmbedder::new(self.vocab, self.cond_dim, self.max_tokens, TEXT_SEED)
    }

    pub fn renoise(&self) -> Result<Renoise> {
        match self.renoise.as_str() {
            "fresh" => Ok(Renoise::Fresh),
            "predicted" => Ok(Renoise::Predicted),
            other => Err(Error::Config(format!("distill.renoise must be fresh or predicted, got `{other}`"))),
        }
    }

    pub fn distill_config(&self) -> Result<DistillConfig> {
        Ok(DistillConfig {
            steps: self.distill_steps,
            lr_student: self.lr_student,
            lr_critic: self.lr_critic,
            betas: (self.beta1, self.beta2),
            weight_decay: self.weight_decay,
            ratio: self.ratio,
            cfg_weight: self.cfg_weight,
            step_loss: self.step_loss,
            holistic_loss: self.holistic_loss,
            renoise: self.renoise()?,
            seed: self.seed,
        })
    }

    pub fn icp_config(&self) -> IcpConfig {
        IcpConfig {
            max_iterations: self.icp_iters,
            tolerance: self.icp_tol,
            yaw_candidates: self.icp_yaws,
            mode: if self.icp_full_rotation {
                RotationMode::Full
            } else {
                RotationMode::YawOnly
            },
            max_source_points: self.icp_points,
            seed: self.seed,
        }
    }

    pub fn thresholds(&self) -> Thresholds {
        Thresholds {
            tau: self.tau / self.resolution as f64,
            delta_pos: self.delta_pos,
            delta_yaw: self.delta_yaw.to_radians(),
        }
    }

    pub fn rules(&self) -> SceneRules {
        SceneRules {
            resolution: self.resolution,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            attempt_budget: self.attempts,
        }
    }

    pub fn splits(&self) -> Splits {
        Splits {
            train: self.train_scenes,
            val: self.val_scenes,
            test: self.test_scenes,
        }
    }

    pub fn order_policy(&self) -> Result<OrderPolicy> {
        match self.order.as_str() {
            "bottom-up" => Ok(OrderPolicy::BottomUp),
            "instruction-order" => Ok(OrderPolicy::InstructionOrder),
            other => Err(Error::Config(format!("unknown order.policy `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_text() {
        let mut cfg = RunConfig::compact();
        cfg.renoise = "predicted".into();
        cfg.delta_yaw = 12.5;
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.to_text().lines().count(), RunConfig::KEYS.len());
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(matches!(RunConfig::parse("model.depth = 3"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("seed = -1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("seed"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("codec.patch = 3"), Err(Error::Config(_))));
        let cfg = RunConfig::parse("# comment\n\nseed = 7  # trailing\nflow.cfg_weight = 1.5\n").unwrap();
        assert_eq!((cfg.seed, cfg.cfg_weight), (7, 1.5));
    }

    #[test]
    fn paper_defaults() {
        let c = RunConfig::default();
        assert_eq!((c.cfg_weight, c.num_steps, c.drop), (3.0, 50, 0.1));
        assert_eq!((c.lr_student, c.lr_critic, c.ratio), (2e-6, 5e-7, 5));
        assert_eq!(c.thresholds().tau, 1.0 / 16.0);
    }
}
