//! Toy encoders, the projector head, and checkpoint persistence.
//!
//! Parameter layout:
//! - `enc.{i}.weight` / `enc.{i}.bias`: trunk layers (dense `[in, out]` for the
//!   MLP, `[out, in, 3, 3]` kernels for the convolutional trunk);
//! - `proj.{j}.weight` / `proj.{j}.bias`: projector layers, the last one mapping
//!   to the embedding dimension without an activation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::container::{Container, FORMAT_VERSION};
use crate::error::{config_err, shape_err, Error, Result};
use crate::kvtext;
use crate::numerics::{AdamConfig, AdamState, ParamVars, ParameterVector, Tape, Tensor, Var};

const CONV_KERNEL: usize = 3;
const CONV_STRIDE: usize = 2;
const CONV_PAD: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Mlp,
    TinyConv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::Mlp => "mlp",
            EncoderKind::TinyConv => "tinyconv",
        })
    }
}

impl FromStr for EncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(EncoderKind::Mlp),
            "tinyconv" => Ok(EncoderKind::TinyConv),
            _ => config_err(format!("unknown encoder kind `{s}`")),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            _ => config_err(format!("unknown activation `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// `(C, H, W)`
    pub input_shape: (usize, usize, usize),
    pub kind: EncoderKind,
    pub hidden_widths: Vec<usize>,
    pub embed_dim: usize,
    pub projector_widths: Vec<usize>,
    pub activation: Activation,
    pub init_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_shape: (3, 32, 32),
            kind: EncoderKind::TinyConv,
            hidden_widths: vec![8, 16],
            embed_dim: 16,
            projector_widths: vec![32, 32],
            activation: Activation::Tanh,
            init_seed: 0,
        }
    }
}

/// One dense or convolutional layer in parameter order.
struct LayerShape {
    prefix: String,
    weight: Vec<usize>,
    bias: usize,
    fan_in: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return config_err(format!("input shape {:?} has a zero dimension", self.input_shape));
        }
        if self.embed_dim < 2 {
            return config_err(format!("embed_dim {} < 2", self.embed_dim));
        }
        if self.hidden_widths.iter().chain(&self.projector_widths).any(|&x| x == 0) {
            return config_err("layer widths must be positive");
        }
        match self.kind {
            EncoderKind::Mlp if self.hidden_widths.is_empty() => {
                config_err("mlp encoder needs at least one hidden width")
            }
            EncoderKind::TinyConv if self.hidden_widths.len() != 2 => {
                config_err("tinyconv encoder takes exactly two channel widths")
            }
            _ => Ok(()),
        }
    }

    /// Width of the trunk output (the representation used by probes).
    pub fn trunk_dim(&self) -> usize {
        *self.hidden_widths.last().expect("validated config")
    }

    /// Spatial sizes of the two convolutional feature maps.
    pub fn conv_map_sizes(&self) -> [(usize, usize); 2] {
        let (_, h, w) = self.input_shape;
        let down = |s: usize| (s + 2 * CONV_PAD - CONV_KERNEL) / CONV_STRIDE + 1;
        [(down(h), down(w)), (down(down(h)), down(down(w)))]
    }

    fn layers(&self) -> Vec<LayerShape> {
        let (c, h, w) = self.input_shape;
        let mut layers = Vec::new();
        match self.kind {
            EncoderKind::Mlp => {
                let mut fan_in = c * h * w;
                for (i, &width) in self.hidden_widths.iter().enumerate() {
                    layers.push(LayerShape {
                        prefix: format!("enc.{i}"),
                        weight: vec![fan_in, width],
                        bias: width,
                        fan_in,
                    });
                    fan_in = width;
                }
            }
            EncoderKind::TinyConv => {
                let mut in_ch = c;
                for (i, &width) in self.hidden_widths.iter().enumerate() {
                    layers.push(LayerShape {
                        prefix: format!("enc.{i}"),
                        weight: vec![width, in_ch, CONV_KERNEL, CONV_KERNEL],
                        bias: width,
                        fan_in: in_ch * CONV_KERNEL * CONV_KERNEL,
                    });
                    in_ch = width;
                }
            }
        }
        let mut fan_in = self.trunk_dim();
        let outs = self
            .projector_widths
            .iter()
            .copied()
            .chain(std::iter::once(self.embed_dim));
        for (j, width) in outs.enumerate() {
            layers.push(LayerShape {
                prefix: format!("proj.{j}"),
                weight: vec![fan_in, width],
                bias: width,
                fan_in,
            });
            fan_in = width;
        }
        layers
    }

    /// Closed-form number of trainable values.
    pub fn param_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| l.weight.iter().product::<usize>() + l.bias)
            .sum()
    }

    /// Number of trainable values in the trunk alone.
    pub fn trunk_param_count(&self) -> usize {
        self.layers()
            .iter()
            .filter(|l| l.prefix.starts_with("enc."))
            .map(|l| l.weight.iter().product::<usize>() + l.bias)
            .sum()
    }

    pub fn to_kv(&self, prefix: &str) -> BTreeMap<String, String> {
        let (c, h, w) = self.input_shape;
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(format!("{prefix}{k}"), v);
        };
        put("input_shape", kvtext::join_list(&[c, h, w]));
        put("kind", self.kind.to_string());
        put("hidden_widths", kvtext::join_list(&self.hidden_widths));
        put("embed_dim", self.embed_dim.to_string());
        put("projector_widths", kvtext::join_list(&self.projector_widths));
        put("activation", self.activation.to_string());
        put("init_seed", self.init_seed.to_string());
        m
    }

    pub fn from_kv(map: &BTreeMap<String, String>, prefix: &str) -> Result<Self> {
        let key = |k: &str| format!("{prefix}{k}");
        let dims: Vec<usize> = kvtext::parse_list(kvtext::get(map, &key("input_shape"))?)?;
        let [c, h, w] = dims[..] else {
            return config_err(format!("input_shape needs three values, got {dims:?}"));
        };
        let cfg = Self {
            input_shape: (c, h, w),
            kind: kvtext::get(map, &key("kind"))?.parse()?,
            hidden_widths: kvtext::parse_list(kvtext::get(map, &key("hidden_widths"))?)?,
            embed_dim: kvtext::get_parsed(map, &key("embed_dim"))?,
            projector_widths: kvtext::parse_list(kvtext::get(map, &key("projector_widths"))?)?,
            activation: kvtext::get(map, &key("activation"))?.parse()?,
            init_seed: kvtext::get_parsed(map, &key("init_seed"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Deterministic initialization: weights `N(0,1)/√fan_in`, biases zero.
pub fn init_params(cfg: &EncoderConfig) -> Result<ParameterVector> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let mut pv = ParameterVector::new();
    for layer in cfg.layers() {
        let n: usize = layer.weight.iter().product();
        let scale = 1.0 / (layer.fan_in as f64).sqrt();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        pv.push(format!("{}.weight", layer.prefix), Tensor::new(layer.weight, data)?)?;
        pv.push(format!("{}.bias", layer.prefix), Tensor::zeros(&[layer.bias]))?;
    }
    Ok(pv)
}

/// Handles produced by one forward pass.
pub struct EncoderOutput {
    /// `B×trunk_dim`
    pub trunk: Var,
    /// `B×D`, the projector output fed to the Barlow Twins loss.
    pub embedding: Var,
    /// Convolutional feature maps (`B×C_i×H_i×W_i`), empty for the MLP.
    pub maps: Vec<Var>,
}

fn activate(tape: &mut Tape, x: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Tanh => tape.tanh(x),
        Activation::Relu => tape.relu(x),
    }
}

fn dense(tape: &mut Tape, vars: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, vars.get(&format!("{prefix}.weight"))?)?;
    tape.add_bias(y, vars.get(&format!("{prefix}.bias"))?)
}

/// Runs the trunk only.
pub fn trunk_forward(tape: &mut Tape, vars: &ParamVars, cfg: &EncoderConfig, images: Var) -> Result<(Var, Vec<Var>)> {
    let (b, c, h, w) = tape.value(images).dims4()?;
    if (c, h, w) != cfg.input_shape {
        return shape_err(format!(
            "images {:?} do not match encoder input {:?}",
            (c, h, w),
            cfg.input_shape
        ));
    }
    match cfg.kind {
        EncoderKind::Mlp => {
            let mut x = tape.reshape(images, &[b, c * h * w])?;
            for i in 0..cfg.hidden_widths.len() {
                let y = dense(tape, vars, &format!("enc.{i}"), x)?;
                x = activate(tape, y, cfg.activation)?;
            }
            Ok((x, Vec::new()))
        }
        EncoderKind::TinyConv => {
            let mut x = images;
            let mut maps = Vec::new();
            for i in 0..cfg.hidden_widths.len() {
                let y = tape.conv2d(
                    x,
                    vars.get(&format!("enc.{i}.weight"))?,
                    vars.get(&format!("enc.{i}.bias"))?,
                    CONV_STRIDE,
                    CONV_PAD,
                )?;
                x = activate(tape, y, cfg.activation)?;
                maps.push(x);
            }
            Ok((tape.global_avg_pool(x)?, maps))
        }
    }
}

/// Trunk followed by the projector.
pub fn forward(tape: &mut Tape, vars: &ParamVars, cfg: &EncoderConfig, images: Var) -> Result<EncoderOutput> {
    let (trunk, maps) = trunk_forward(tape, vars, cfg, images)?;
    let mut x = trunk;
    let last = cfg.projector_widths.len();
    for j in 0..=last {
        let y = dense(tape, vars, &format!("proj.{j}"), x)?;
        x = if j < last {
            activate(tape, y, cfg.activation)?
        } else {
            y
        };
    }
    Ok(EncoderOutput {
        trunk,
        embedding: x,
        maps,
    })
}

/// Embeds a `B×C×H×W` batch into `B×D`.
pub fn embed(params: &ParameterVector, cfg: &EncoderConfig, images: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = ParamVars::frozen(&mut tape, params);
    let x = tape.constant(images.clone());
    let out = forward(&mut tape, &vars, cfg, x)?;
    Ok(tape.value(out.embedding).clone())
}

/// Trunk representation of a `B×C×H×W` batch.
pub fn represent(params: &ParameterVector, cfg: &EncoderConfig, images: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = ParamVars::frozen(&mut tape, params);
    let x = tape.constant(images.clone());
    let (trunk, _) = trunk_forward(&mut tape, &vars, cfg, x)?;
    Ok(tape.value(trunk).clone())
}

/// Trained parameters together with everything needed to reuse them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub params: ParameterVector,
    pub encoder_config: EncoderConfig,
    /// Task names trained so far, in training order.
    pub provenance: Vec<String>,
    /// Optimizer state, present when training can be resumed from this file.
    pub optimizer: Option<AdamState>,
    /// Free-form annotations (e.g. completed epochs).
    pub extra: BTreeMap<String, String>,
}

const ADAM_M: &str = ".adam_m";
const ADAM_V: &str = ".adam_v";

impl Checkpoint {
    pub fn new(params: ParameterVector, encoder_config: EncoderConfig, provenance: Vec<String>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            params,
            encoder_config,
            provenance,
            optimizer: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.push_params(&self.params, "");
        let mut meta = self.encoder_config.to_kv("model.");
        meta.insert("kind".into(), "checkpoint".into());
        if let Some(opt) = &self.optimizer {
            c.push_params(&opt.m, ADAM_M);
            c.push_params(&opt.v, ADAM_V);
            meta.insert("adam.step_count".into(), opt.step_count.to_string());
            meta.insert("adam.lr".into(), format!("{:?}", opt.config.lr));
            meta.insert("adam.beta1".into(), format!("{:?}", opt.config.beta1));
            meta.insert("adam.beta2".into(), format!("{:?}", opt.config.beta2));
            meta.insert("adam.eps".into(), format!("{:?}", opt.config.eps));
        }
        for (k, v) in &self.extra {
            meta.insert(format!("extra.{k}"), v.clone());
        }
        c.provenance = self.provenance.clone();
        c.metadata = meta;
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.metadata.get("kind").map(String::as_str) != Some("checkpoint") {
            return Err(Error::Format("container is not a checkpoint".into()));
        }
        let encoder_config =
            EncoderConfig::from_kv(&c.metadata, "model.").map_err(|e| Error::Format(format!("encoder config: {e}")))?;
        let expected = init_params(&encoder_config)?;
        let mut params = ParameterVector::new();
        for (name, t) in expected.entries() {
            let stored = c.tensor(name)?;
            if stored.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "entry `{name}` has shape {:?}, config implies {:?}",
                    stored.shape(),
                    t.shape()
                )));
            }
            params.push(name.clone(), stored.clone())?;
        }
        let optimizer = if c.metadata.contains_key("adam.step_count") {
            let mut m = ParameterVector::new();
            let mut v = ParameterVector::new();
            for (name, _) in params.entries() {
                m.push(name.clone(), c.tensor(&format!("{name}{ADAM_M}"))?.clone())?;
                v.push(name.clone(), c.tensor(&format!("{name}{ADAM_V}"))?.clone())?;
            }
            params
                .expect_same_layout(&m)
                .map_err(|e| Error::Format(e.to_string()))?;
            params
                .expect_same_layout(&v)
                .map_err(|e| Error::Format(e.to_string()))?;
            Some(AdamState {
                config: AdamConfig {
                    lr: kvtext::get_parsed(&c.metadata, "adam.lr")?,
                    beta1: kvtext::get_parsed(&c.metadata, "adam.beta1")?,
                    beta2: kvtext::get_parsed(&c.metadata, "adam.beta2")?,
                    eps: kvtext::get_parsed(&c.metadata, "adam.eps")?,
                },
                m,
                v,
                step_count: kvtext::get_parsed(&c.metadata, "adam.step_count")?,
            })
        } else {
            None
        };
        let known = params.len() * if optimizer.is_some() { 3 } else { 1 };
        if c.entries.len() != known {
            return Err(Error::Format(format!(
                "checkpoint has {} entries, expected {known}",
                c.entries.len()
            )));
        }
        let extra = c
            .metadata
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("extra.").map(|k| (k.to_string(), v.clone())))
            .collect();
        Ok(Self {
            format_version: FORMAT_VERSION,
            params,
            encoder_config,
            provenance: c.provenance.clone(),
            optimizer,
            extra,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.to_container().save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_container(&Container::load(path)?)
}
