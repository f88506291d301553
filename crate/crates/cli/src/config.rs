//! The flat run configuration.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use cbt_core::augment::AugmentConfig;
use cbt_core::continual::CbtConfig;
use cbt_core::eval::{ProbeConfig, ProbeMode};
use cbt_core::kvtext;
use cbt_core::model::{Activation, EncoderConfig, EncoderKind};
use cbt_core::numerics::AdamConfig;
use cbt_core::ssl_bt::BtLossConfig;
use cbt_core::taskgen::{DomainSpec, TaskCounts};
use cbt_core::{Error, Result};

/// Every accepted key with its default and a one-line description.
pub const FIELDS: &[(&str, &str, &str)] = &[
    (
        "seed",
        "0",
        "master seed for data, initialization, augmentation and shuffling",
    ),
    (
        "workdir",
        ".",
        "root of the data and run directories (overridden by --workdir)",
    ),
    (
        "tasks",
        "satelloid,droneoid,aerialoid",
        "domain presets in training order",
    ),
    (
        "baseline",
        "cbt",
        "encoder probed when no checkpoint is given: cbt, bt_joint or none_pretrain",
    ),
    ("seeds", "0,1,2", "probe seeds"),
    ("data.tile_size", "32", "tile side in pixels"),
    ("data.unlabeled", "96", "unlabeled tiles per task"),
    ("data.train", "64", "labeled training tiles per task"),
    ("data.val", "16", "labeled validation tiles per task"),
    ("data.test", "32", "labeled test tiles per task"),
    ("model.kind", "tinyconv", "encoder trunk: tinyconv or mlp"),
    (
        "model.hidden_widths",
        "8,16",
        "trunk channel (tinyconv) or unit (mlp) widths",
    ),
    ("model.embed_dim", "16", "embedding dimension D"),
    ("model.projector_widths", "32,32", "hidden widths of the projector"),
    ("model.activation", "tanh", "tanh or relu"),
    ("aug.flip_prob", "0.5", "horizontal flip probability"),
    ("aug.noise_sigma", "0.02", "additive Gaussian noise std"),
    ("aug.brightness_delta", "0.1", "maximum absolute brightness shift"),
    ("aug.contrast_min", "0.8", "lower contrast factor"),
    ("aug.contrast_max", "1.2", "upper contrast factor"),
    ("aug.crop_min", "0.6", "smallest crop side as a fraction of the tile"),
    ("aug.crop_max", "1.0", "largest crop side as a fraction of the tile"),
    ("bt.mu", "0.005", "weight of the redundancy-reduction term"),
    ("bt.eps", "0.00001", "standardization epsilon"),
    ("cbt.lambda", "0.01", "EWC penalty weight (presets: 0.1 and 0.01)"),
    ("cbt.epochs", "30", "pretraining epochs per task"),
    ("cbt.batch_size", "16", "pretraining batch size"),
    ("adam.lr", "0.01", "pretraining learning rate"),
    ("adam.beta1", "0.9", "Adam first-moment decay"),
    ("adam.beta2", "0.999", "Adam second-moment decay"),
    ("adam.eps", "0.00000001", "Adam denominator epsilon"),
    ("probe.hidden", "16", "hidden width of the segmentation head"),
    ("probe.epochs", "20", "probe training epochs"),
    ("probe.batch_tiles", "8", "tiles per probe step"),
    ("probe.lr", "0.01", "probe learning rate"),
    ("probe.mode", "frozen", "frozen or finetune"),
    ("probe.fractions", "0.1,0.5,1.0", "labeled fractions swept by the probe"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    Cbt,
    BtJoint,
    NonePretrain,
}

impl FromStr for Baseline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cbt" => Ok(Baseline::Cbt),
            "bt_joint" => Ok(Baseline::BtJoint),
            "none_pretrain" => Ok(Baseline::NonePretrain),
            other => Err(Error::Config(format!("unknown baseline `{other}`"))),
        }
    }
}

/// Fully resolved configuration.
#[derive(Clone, Debug)]
pub struct RunConfig {
    resolved: BTreeMap<String, String>,
    pub seed: u64,
    pub workdir: PathBuf,
    pub tasks: Vec<String>,
    pub baseline: Baseline,
    pub probe_seeds: Vec<u64>,
    pub tile_size: usize,
    pub counts: TaskCounts,
    pub encoder: EncoderConfig,
    pub cbt: CbtConfig,
    pub probe: ProbeConfig,
    pub fractions: Vec<f64>,
}

fn parsed<T: FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = &map[key];
    raw.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{raw}`")))
}

fn list<T: FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<Vec<T>> {
    kvtext::parse_list(&map[key]).map_err(|_| Error::Config(format!("`{key}`: cannot parse `{}`", map[key])))
}

impl RunConfig {
    pub fn defaults() -> BTreeMap<String, String> {
        FIELDS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect()
    }

    /// The default configuration as a commented document.
    pub fn documented_defaults() -> String {
        let mut s = String::new();
        for (k, v, doc) in FIELDS {
            s.push_str(&format!("# {doc}\n{k}={v}\n"));
        }
        s
    }

    /// Resolves a config document over the defaults. Unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        Self::resolve(kvtext::parse(text)?, &BTreeMap::new())
    }

    /// Applies `file` then `overrides` on top of the defaults.
    pub fn resolve(file: BTreeMap<String, String>, overrides: &BTreeMap<String, String>) -> Result<Self> {
        let mut map = Self::defaults();
        for (k, v) in file.into_iter().chain(overrides.clone()) {
            match map.get_mut(&k) {
                Some(slot) => *slot = v,
                None => return Err(Error::Config(format!("unknown config key `{k}`"))),
            }
        }
        Self::from_map(map)
    }

    fn from_map(map: BTreeMap<String, String>) -> Result<Self> {
        let seed: u64 = parsed(&map, "seed")?;
        let tasks: Vec<String> = list(&map, "tasks")?;
        if tasks.is_empty() {
            return Err(Error::Config("`tasks` must name at least one domain".into()));
        }
        for (i, t) in tasks.iter().enumerate() {
            DomainSpec::preset(t, seed)?;
            if tasks[..i].contains(t) {
                return Err(Error::Config(format!("task `{t}` listed twice")));
            }
        }
        let tile_size: usize = parsed(&map, "data.tile_size")?;
        let encoder = EncoderConfig {
            input_shape: (3, tile_size, tile_size),
            kind: parsed::<EncoderKind>(&map, "model.kind")?,
            hidden_widths: list(&map, "model.hidden_widths")?,
            embed_dim: parsed(&map, "model.embed_dim")?,
            projector_widths: list(&map, "model.projector_widths")?,
            activation: parsed::<Activation>(&map, "model.activation")?,
            init_seed: seed,
        };
        encoder.validate()?;
        let cbt = CbtConfig {
            lambda: parsed(&map, "cbt.lambda")?,
            bt: BtLossConfig {
                mu: parsed(&map, "bt.mu")?,
                eps: parsed(&map, "bt.eps")?,
            },
            epochs: parsed(&map, "cbt.epochs")?,
            batch_size: parsed(&map, "cbt.batch_size")?,
            adam: AdamConfig {
                lr: parsed(&map, "adam.lr")?,
                beta1: parsed(&map, "adam.beta1")?,
                beta2: parsed(&map, "adam.beta2")?,
                eps: parsed(&map, "adam.eps")?,
            },
            augment: AugmentConfig {
                flip_prob: parsed(&map, "aug.flip_prob")?,
                noise_sigma: parsed(&map, "aug.noise_sigma")?,
                brightness_delta: parsed(&map, "aug.brightness_delta")?,
                contrast_range: (parsed(&map, "aug.contrast_min")?, parsed(&map, "aug.contrast_max")?),
                crop_scale_range: (parsed(&map, "aug.crop_min")?, parsed(&map, "aug.crop_max")?),
                seed,
            },
            seed,
        };
        cbt.validate()?;
        let probe = ProbeConfig {
            hidden: parsed(&map, "probe.hidden")?,
            epochs: parsed(&map, "probe.epochs")?,
            batch_tiles: parsed(&map, "probe.batch_tiles")?,
            adam: AdamConfig {
                lr: parsed(&map, "probe.lr")?,
                ..AdamConfig::default()
            },
            mode: parsed::<ProbeMode>(&map, "probe.mode")?,
            seed: 0,
        };
        probe.validate()?;
        let fractions: Vec<f64> = list(&map, "probe.fractions")?;
        if fractions.is_empty() || fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::Config(
                "`probe.fractions` must be a non-empty list in (0,1]".into(),
            ));
        }
        let probe_seeds: Vec<u64> = list(&map, "seeds")?;
        if probe_seeds.is_empty() {
            return Err(Error::Config("`seeds` must not be empty".into()));
        }
        let counts = TaskCounts {
            unlabeled: parsed(&map, "data.unlabeled")?,
            train: parsed(&map, "data.train")?,
            val: parsed(&map, "data.val")?,
            test: parsed(&map, "data.test")?,
        };
        Ok(Self {
            seed,
            workdir: PathBuf::from(&map["workdir"]),
            tasks,
            baseline: parsed(&map, "baseline")?,
            probe_seeds,
            tile_size,
            counts,
            encoder,
            cbt,
            probe,
            fractions,
            resolved: map,
        })
    }

    /// The resolved document, one `key=value` per line in key order.
    pub fn echo(&self) -> String {
        kvtext::render(&self.resolved)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.resolved.get(key).map(String::as_str)
    }

    /// Digest of the resolved config, excluding the working directory.
    pub fn hash(&self) -> String {
        let mut m = self.resolved.clone();
        m.remove("workdir");
        cbt_core::taskgen::sha256_hex(kvtext::render(&m).as_bytes())
    }

    pub fn domain(&self, task: &str) -> Result<DomainSpec> {
        DomainSpec::preset(task, self.seed)
    }

    pub fn task_index(&self, task: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t == task)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let c = RunConfig::from_text("").unwrap();
        assert_eq!(c.tasks, ["satelloid", "droneoid", "aerialoid"]);
        assert_eq!(c.cbt.lambda, 0.01);
        assert_eq!(c.fractions, [0.1, 0.5, 1.0]);
        assert_eq!(RunConfig::from_text(&c.echo()).unwrap().echo(), c.echo());
    }

    #[test]
    fn unknown_and_malformed_keys_rejected() {
        assert!(matches!(RunConfig::from_text("cbt.lamda=0.1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_text("cbt.lambda=abc"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_text("cbt.epochs=0"), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::from_text("tasks=satelloid,satelloid"),
            Err(Error::Config(_))
        ));
        assert!(matches!(RunConfig::from_text("tasks=mars"), Err(Error::Config(_))));
    }

    #[test]
    fn seed_flows_everywhere() {
        let c = RunConfig::from_text("seed=7").unwrap();
        assert_eq!((c.encoder.init_seed, c.cbt.seed, c.cbt.augment.seed), (7, 7, 7));
    }

    #[test]
    fn hash_ignores_workdir() {
        let a = RunConfig::from_text("workdir=/a").unwrap();
        let b = RunConfig::from_text("workdir=/b").unwrap();
        let c = RunConfig::from_text("seed=1").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn documented_defaults_parse() {
        assert!(RunConfig::from_text(&RunConfig::documented_defaults()).is_ok());
    }
}
