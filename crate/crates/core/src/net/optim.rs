//! Optimizers, step-decay learning rates and the training configuration.

use crate::config::Section;
use crate::error::{invalid, Result};
use crate::net::{Gradients, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd" | "sgd-momentum" => Ok(Self::SgdMomentum),
            "adam" => Ok(Self::Adam),
            other => Err(format!("unknown optimizer `{other}` (sgd, adam)")),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::SgdMomentum => "sgd",
            Self::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs (0-based) at which the rate is multiplied by `lr_factor`.
    pub milestones: Vec<usize>,
    pub lr_factor: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Zero padding for random crops; 0 disables.
    pub pad_crop: usize,
    pub flip: bool,
    /// Restore the parameters of the best validation epoch at the end.
    pub keep_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::SgdMomentum,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 2e-4,
            milestones: vec![80, 120, 160],
            lr_factor: 0.1,
            batch_size: 128,
            epochs: 200,
            seed: 0,
            pad_crop: 0,
            flip: false,
            keep_best: true,
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "optimizer",
    "lr",
    "momentum",
    "weight_decay",
    "milestones",
    "lr_factor",
    "batch_size",
    "epochs",
    "seed",
    "pad_crop",
    "flip",
    "keep_best",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|(_, msg)| invalid(msg))
    }

    /// The first offending field and what is wrong with it.
    fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(("lr", format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(("momentum", format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(("weight_decay", "weight decay must be non-negative".into()));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor.is_finite()) {
            return Err(("lr_factor", "lr factor must be positive".into()));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(("milestones", "milestones must be strictly increasing".into()));
        }
        if self.batch_size == 0 {
            return Err(("batch_size", "batch size must be positive".into()));
        }
        Ok(())
    }

    /// Reads a `[train]` section; absent keys keep their defaults.
    pub fn from_section(sec: &Section) -> Result<Self> {
        sec.check_keys(TRAIN_KEYS)?;
        let d = Self::default();
        let cfg = Self {
            optimizer: sec.parse_or("optimizer", d.optimizer)?,
            lr: sec.parse_or("lr", d.lr)?,
            momentum: sec.parse_or("momentum", d.momentum)?,
            weight_decay: sec.parse_or("weight_decay", d.weight_decay)?,
            milestones: sec.parse_list("milestones")?.unwrap_or(d.milestones),
            lr_factor: sec.parse_or("lr_factor", d.lr_factor)?,
            batch_size: sec.parse_or("batch_size", d.batch_size)?,
            epochs: sec.parse_or("epochs", d.epochs)?,
            seed: sec.parse_or("seed", d.seed)?,
            pad_crop: sec.parse_or("pad_crop", d.pad_crop)?,
            flip: sec.parse_or("flip", d.flip)?,
            keep_best: sec.parse_or("keep_best", d.keep_best)?,
        };
        cfg.check().map_err(|(field, msg)| sec.error(field, msg))?;
        Ok(cfg)
    }
}

/// Learning rate for a 0-based epoch under step decay.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    let drops = cfg.milestones.iter().filter(|&&m| epoch >= m).count();
    cfg.lr * cfg.lr_factor.powi(drops as i32)
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// SGD with heavy-ball momentum or Adam; L2 weight decay is added to the
/// gradient of conv / linear master weights only.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    weight_decay: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: i32,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, net: &Network) -> Self {
        let zeros: Vec<Vec<f64>> = net.param_info().iter().map(|p| vec![0.0; p.len]).collect();
        Self {
            kind: cfg.optimizer,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            second: if cfg.optimizer == OptimizerKind::Adam {
                zeros.clone()
            } else {
                Vec::new()
            },
            first: zeros,
            steps: 0,
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients, lr: f64) -> Result<()> {
        let info = net.param_info();
        if grads.tensors.len() != info.len() || grads.tensors.iter().zip(&info).any(|(g, i)| g.len() != i.len) {
            return Err(invalid("gradients do not match the network parameters"));
        }
        self.steps += 1;
        let (bc1, bc2) = (
            1.0 - ADAM_BETA1.powi(self.steps),
            1.0 - ADAM_BETA2.powi(self.steps),
        );
        for (k, (param, info)) in net.params_mut().into_iter().zip(&info).enumerate() {
            let wd = if info.decay { self.weight_decay } else { 0.0 };
            let g = &grads.tensors[k];
            let m = &mut self.first[k];
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    for i in 0..param.len() {
                        let gi = g[i] + wd * param[i];
                        m[i] = self.momentum * m[i] + gi;
                        param[i] -= lr * m[i];
                    }
                }
                OptimizerKind::Adam => {
                    let v = &mut self.second[k];
                    for i in 0..param.len() {
                        let gi = g[i] + wd * param[i];
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                        param[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}
