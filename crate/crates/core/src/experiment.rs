//! Training runs described by a single config file.
//!
//! ```text
//! [network]
//! arch = mnist_cnn.arch     # or name/input/classes here plus a [layers] section
//!
//! [schedule]
//! weights = 4-2-1
//! activations = 2
//!
//! [train]
//! epochs = 5
//!
//! [data]
//! kind = mnist
//! root = ../data/mnist
//! ```
//!
//! Relative paths resolve against the directory of the config file.

use std::path::{Path, PathBuf};

use crate::arch::NetworkDef;
use crate::config::ConfigFile;
use crate::data::{DataConfig, Dataset, Split};
use crate::error::{QbitError, Result};
use crate::net::{deploy, evaluate, train, EpochMetrics, Network, PackedModel, TrainConfig, TrainReport};
use crate::schedule::{validate_schedule, BitwidthSchedule, Notation};

const SECTIONS: &[&str] = &["network", "layers", "schedule", "train", "data"];

#[derive(Debug, Clone)]
pub struct Experiment {
    pub def: NetworkDef,
    /// `None` trains the full-precision network.
    pub schedule: Option<BitwidthSchedule>,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Experiment {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let cfg = ConfigFile::parse(text)?;
        if let Some(s) = cfg.sections.iter().find(|s| !SECTIONS.contains(&s.name.as_str())) {
            return Err(QbitError::Config {
                line: s.line,
                field: s.name.clone(),
                message: format!("unknown section (expected one of {})", SECTIONS.join(", ")),
            });
        }
        let net = cfg.require_section("network")?;
        let def = match net.get("arch") {
            Some(e) => {
                net.check_keys(&["arch"])?;
                if cfg.section("layers").is_some() {
                    return Err(net.error("arch", "`arch` and a [layers] section are mutually exclusive"));
                }
                let path = resolve(base, Path::new(&e.value));
                let text = std::fs::read_to_string(&path)
                    .map_err(|err| net.error("arch", format!("cannot read {}: {err}", path.display())))?;
                NetworkDef::from_text(&text).map_err(|err| net.error("arch", format!("{}: {err}", path.display())))?
            }
            None => NetworkDef::from_config(&cfg)?,
        };

        let schedule = match cfg.section("schedule") {
            None => None,
            Some(sec) => {
                sec.check_keys(&["weights", "activations"])?;
                let w: String = sec.require("weights")?;
                if w == "fp" {
                    None
                } else {
                    let k_a: u8 = sec.parse_or("activations", 2)?;
                    let notation = Notation::parse(&w).map_err(|e| sec.error("weights", e.to_string()))?;
                    let s = BitwidthSchedule::from_notation(&def, &notation, k_a)
                        .map_err(|e| sec.error("weights", e.to_string()))?;
                    if let Some(v) = validate_schedule(&s).first() {
                        return Err(sec.error("weights", v.to_string()));
                    }
                    Some(s)
                }
            }
        };

        let train = match cfg.section("train") {
            Some(sec) => TrainConfig::from_section(sec)?,
            None => TrainConfig::default(),
        };
        let mut data = DataConfig::from_section(cfg.require_section("data")?)?;
        if let Some(root) = &data.root {
            data.root = Some(resolve(base, root));
        }
        if data.normalization.mean.len() != def.input[0] {
            return Err(cfg
                .require_section("data")?
                .error("mean", format!("{} channels configured for a {}-channel input", data.normalization.mean.len(), def.input[0])));
        }
        Ok(Self {
            def,
            schedule,
            train,
            data,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn build(&self) -> Result<Network> {
        match &self.schedule {
            Some(s) => Network::with_schedule(self.def.clone(), s, self.train.seed),
            None => Network::new(self.def.clone(), self.train.seed),
        }
    }

    /// Training and validation sets plus the test split.
    pub fn datasets(&self) -> Result<(Dataset, Dataset, Dataset)> {
        let full = self.data.load(Split::Train)?;
        let test = self.data.load(Split::Test)?;
        let (tr, val) = full.split_validation(self.data.val_denominator, self.train.seed);
        Ok((tr, val, test))
    }

    /// Trains from scratch and evaluates the deployed model on the test split.
    pub fn run(&self, on_epoch: impl FnMut(&EpochMetrics)) -> Result<Outcome> {
        let (tr, val, test) = self.datasets()?;
        let mut net = self.build()?;
        let norm = &self.data.normalization;
        let report = train(&mut net, &self.train, &tr, &val, norm, on_epoch)?;
        let packed = deploy(&net)?;
        let test_acc = evaluate(&packed, &test, norm, 256)?;
        Ok(Outcome {
            net,
            packed,
            report,
            test_acc,
        })
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub net: Network,
    pub packed: PackedModel,
    pub report: TrainReport,
    /// Test accuracy of the packed model at the best validation epoch.
    pub test_acc: f64,
}
