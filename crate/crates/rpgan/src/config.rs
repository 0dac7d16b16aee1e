//! Plain-text run configuration: `section.key = value` lines, `#` comments.
//! Unknown keys are rejected, and every run writes its resolved form next to
//! the outputs so artifacts stay reproducible from disk alone.

use crate::data::{self, Dataset};
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::{Bucket, Generator};
use crate::layers::{Activation, LayerKind};
use crate::tensor::Tensor;
use crate::train::{LossVariant, TrainConfig};
use rand::Rng;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub enum ArchConfig {
    /// Dense generator for point data: z -> hidden... -> out_dim.
    Mlp {
        z_dim: usize,
        hidden: Vec<usize>,
        out_dim: usize,
        m: Vec<usize>,
    },
    /// Dense stem + residual upsampling blocks + output convolution.
    Conv {
        z_dim: usize,
        stem: [usize; 3],
        channels: Vec<usize>,
        out_channels: usize,
        m: Vec<usize>,
    },
    /// Nonlinearity-free dense chain with a final tanh.
    Linear { shapes: Vec<usize>, m: Vec<usize> },
}

impl ArchConfig {
    pub fn bucket_count(&self) -> usize {
        match self {
            ArchConfig::Mlp { m, .. }
            | ArchConfig::Conv { m, .. }
            | ArchConfig::Linear { m, .. } => m.len(),
        }
    }

    pub fn with_uniform_m(&self, n_in: usize) -> ArchConfig {
        let mut out = self.clone();
        match &mut out {
            ArchConfig::Mlp { m, .. }
            | ArchConfig::Conv { m, .. }
            | ArchConfig::Linear { m, .. } => {
                for v in m.iter_mut() {
                    *v = n_in;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub enum DataConfig {
    Ring {
        modes: usize,
        radius: f64,
        sigma: f64,
        count: usize,
    },
    Idx {
        path: PathBuf,
        labels: Option<PathBuf>,
        colorize: bool,
        keep_labels: Option<(u8, u8)>,
    },
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub disc_hidden: Vec<usize>,
    pub disc_channels: Vec<usize>,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub out_dir: PathBuf,
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected an integer, got '{v}'")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected a number, got '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected a boolean, got '{v}'"
        ))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| parse_usize(key, p.trim())).collect()
}

fn parse_triple(key: &str, v: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = v.split('x').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("{key}: expected CxHxW, got '{v}'")));
    }
    Ok([
        parse_usize(key, parts[0].trim())?,
        parse_usize(key, parts[1].trim())?,
        parse_usize(key, parts[2].trim())?,
    ])
}

impl RunConfig {
    pub fn parse_file(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<RunConfig> {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected 'section.key = value', got '{raw}'",
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            if kv.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!("duplicate key '{key}'")));
            }
        }
        Self::from_pairs(kv)
    }

    fn from_pairs(mut kv: BTreeMap<String, String>) -> Result<RunConfig> {
        let mut take = |k: &str| kv.remove(k);
        let require = |opt: Option<String>, k: &str| {
            opt.ok_or_else(|| Error::Config(format!("missing required key '{k}'")))
        };

        let arch_kind = require(take("arch.kind"), "arch.kind")?;
        let arch = match arch_kind.as_str() {
            "mlp" => ArchConfig::Mlp {
                z_dim: parse_usize("arch.z_dim", &require(take("arch.z_dim"), "arch.z_dim")?)?,
                hidden: parse_list("arch.hidden", &require(take("arch.hidden"), "arch.hidden")?)?,
                out_dim: parse_usize(
                    "arch.out_dim",
                    &require(take("arch.out_dim"), "arch.out_dim")?,
                )?,
                m: parse_list("arch.m", &require(take("arch.m"), "arch.m")?)?,
            },
            "conv" => ArchConfig::Conv {
                z_dim: parse_usize("arch.z_dim", &require(take("arch.z_dim"), "arch.z_dim")?)?,
                stem: parse_triple("arch.stem", &require(take("arch.stem"), "arch.stem")?)?,
                channels: parse_list(
                    "arch.channels",
                    &require(take("arch.channels"), "arch.channels")?,
                )?,
                out_channels: parse_usize(
                    "arch.out_channels",
                    &require(take("arch.out_channels"), "arch.out_channels")?,
                )?,
                m: parse_list("arch.m", &require(take("arch.m"), "arch.m")?)?,
            },
            "linear" => ArchConfig::Linear {
                shapes: parse_list("arch.shapes", &require(take("arch.shapes"), "arch.shapes")?)?,
                m: parse_list("arch.m", &require(take("arch.m"), "arch.m")?)?,
            },
            other => {
                return Err(Error::Config(format!(
                    "arch.kind: expected mlp|conv|linear, got '{other}'"
                )))
            }
        };

        let disc_hidden = match take("disc.hidden") {
            Some(v) => parse_list("disc.hidden", &v)?,
            None => vec![64, 64],
        };
        let disc_channels = match take("disc.channels") {
            Some(v) => parse_list("disc.channels", &v)?,
            None => vec![16, 32],
        };

        let mut train = TrainConfig::default();
        if let Some(v) = take("train.loss") {
            train.loss = LossVariant::parse(&v)?;
        }
        if let Some(v) = take("train.lr") {
            train.lr = parse_f64("train.lr", &v)?;
        }
        if let Some(v) = take("train.beta1") {
            train.beta1 = parse_f64("train.beta1", &v)?;
        }
        if let Some(v) = take("train.beta2") {
            train.beta2 = parse_f64("train.beta2", &v)?;
        }
        if let Some(v) = take("train.d_steps") {
            train.d_steps = parse_usize("train.d_steps", &v)?;
        }
        if let Some(v) = take("train.batch") {
            train.batch = parse_usize("train.batch", &v)?;
        }
        train.steps = parse_usize("train.steps", &require(take("train.steps"), "train.steps")?)?;
        if let Some(v) = take("train.seed") {
            train.seed = parse_usize("train.seed", &v)? as u64;
        }
        if let Some(v) = take("train.diversity_weight") {
            train.diversity_weight = parse_f64("train.diversity_weight", &v)?;
        }
        if let Some(v) = take("train.penalty_coef") {
            train.penalty_coef = parse_f64("train.penalty_coef", &v)?;
        }
        if let Some(v) = take("train.train_z") {
            train.train_z = parse_bool("train.train_z", &v)?;
        }

        let data_kind = require(take("data.kind"), "data.kind")?;
        let data = match data_kind.as_str() {
            "ring" => DataConfig::Ring {
                modes: take("data.modes")
                    .map(|v| parse_usize("data.modes", &v))
                    .transpose()?
                    .unwrap_or(8),
                radius: take("data.radius")
                    .map(|v| parse_f64("data.radius", &v))
                    .transpose()?
                    .unwrap_or(0.7),
                sigma: take("data.sigma")
                    .map(|v| parse_f64("data.sigma", &v))
                    .transpose()?
                    .unwrap_or(0.05),
                count: take("data.count")
                    .map(|v| parse_usize("data.count", &v))
                    .transpose()?
                    .unwrap_or(8192),
            },
            "idx" => {
                let path = require(take("data.path"), "data.path")?;
                let labels = take("data.labels").map(PathBuf::from);
                let colorize = take("data.colorize")
                    .map(|v| parse_bool("data.colorize", &v))
                    .transpose()?
                    .unwrap_or(false);
                let keep_labels = match take("data.keep_labels") {
                    Some(v) => {
                        let (lo, hi) = v.split_once('-').ok_or_else(|| {
                            Error::Config(format!("data.keep_labels: expected 'lo-hi', got '{v}'"))
                        })?;
                        Some((
                            parse_usize("data.keep_labels", lo.trim())? as u8,
                            parse_usize("data.keep_labels", hi.trim())? as u8,
                        ))
                    }
                    None => None,
                };
                DataConfig::Idx {
                    path: PathBuf::from(path),
                    labels,
                    colorize,
                    keep_labels,
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "data.kind: expected ring|idx, got '{other}'"
                )))
            }
        };

        let out_dir = PathBuf::from(require(take("out.dir"), "out.dir")?);

        if let Some(unknown) = kv.keys().next() {
            return Err(Error::Config(format!("unknown key '{unknown}'")));
        }

        let cfg = RunConfig {
            arch,
            disc_hidden,
            disc_channels,
            train,
            data,
            out_dir,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let expect = match &self.arch {
            ArchConfig::Mlp { hidden, .. } => hidden.len() + 1,
            ArchConfig::Conv { channels, .. } => channels.len() + 2,
            ArchConfig::Linear { shapes, .. } => shapes.len().saturating_sub(1),
        };
        if self.arch.bucket_count() != expect {
            return Err(Error::Config(format!(
                "arch.m lists {} buckets, architecture has {expect}",
                self.arch.bucket_count()
            )));
        }
        self.train.validate()
    }

    /// Canonical form, sorted by key; written next to run outputs.
    pub fn resolved_text(&self) -> String {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        match &self.arch {
            ArchConfig::Mlp {
                z_dim,
                hidden,
                out_dim,
                m,
            } => {
                kv.insert("arch.kind".into(), "mlp".into());
                kv.insert("arch.z_dim".into(), z_dim.to_string());
                kv.insert("arch.hidden".into(), list(hidden));
                kv.insert("arch.out_dim".into(), out_dim.to_string());
                kv.insert("arch.m".into(), list(m));
            }
            ArchConfig::Conv {
                z_dim,
                stem,
                channels,
                out_channels,
                m,
            } => {
                kv.insert("arch.kind".into(), "conv".into());
                kv.insert("arch.z_dim".into(), z_dim.to_string());
                kv.insert(
                    "arch.stem".into(),
                    format!("{}x{}x{}", stem[0], stem[1], stem[2]),
                );
                kv.insert("arch.channels".into(), list(channels));
                kv.insert("arch.out_channels".into(), out_channels.to_string());
                kv.insert("arch.m".into(), list(m));
            }
            ArchConfig::Linear { shapes, m } => {
                kv.insert("arch.kind".into(), "linear".into());
                kv.insert("arch.shapes".into(), list(shapes));
                kv.insert("arch.m".into(), list(m));
            }
        }
        kv.insert("disc.hidden".into(), list(&self.disc_hidden));
        kv.insert("disc.channels".into(), list(&self.disc_channels));
        kv.insert("train.loss".into(), self.train.loss.name().into());
        kv.insert("train.lr".into(), self.train.lr.to_string());
        kv.insert("train.beta1".into(), self.train.beta1.to_string());
        kv.insert("train.beta2".into(), self.train.beta2.to_string());
        kv.insert("train.d_steps".into(), self.train.d_steps.to_string());
        kv.insert("train.batch".into(), self.train.batch.to_string());
        kv.insert("train.steps".into(), self.train.steps.to_string());
        kv.insert("train.seed".into(), self.train.seed.to_string());
        kv.insert(
            "train.diversity_weight".into(),
            self.train.diversity_weight.to_string(),
        );
        kv.insert(
            "train.penalty_coef".into(),
            self.train.penalty_coef.to_string(),
        );
        kv.insert("train.train_z".into(), self.train.train_z.to_string());
        match &self.data {
            DataConfig::Ring {
                modes,
                radius,
                sigma,
                count,
            } => {
                kv.insert("data.kind".into(), "ring".into());
                kv.insert("data.modes".into(), modes.to_string());
                kv.insert("data.radius".into(), radius.to_string());
                kv.insert("data.sigma".into(), sigma.to_string());
                kv.insert("data.count".into(), count.to_string());
            }
            DataConfig::Idx {
                path,
                labels,
                colorize,
                keep_labels,
            } => {
                kv.insert("data.kind".into(), "idx".into());
                kv.insert("data.path".into(), path.display().to_string());
                if let Some(l) = labels {
                    kv.insert("data.labels".into(), l.display().to_string());
                }
                kv.insert("data.colorize".into(), colorize.to_string());
                if let Some((lo, hi)) = keep_labels {
                    kv.insert("data.keep_labels".into(), format!("{lo}-{hi}"));
                }
            }
        }
        kv.insert("out.dir".into(), self.out_dir.display().to_string());
        let mut out = String::new();
        for (k, v) in kv {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Instantiates the generator this config describes.
    pub fn build_generator(&self, rng: &mut impl Rng) -> Result<Generator<f32>> {
        let gen = match &self.arch {
            ArchConfig::Mlp {
                z_dim,
                hidden,
                out_dim,
                m,
            } => {
                let mut widths = vec![*z_dim];
                widths.extend_from_slice(hidden);
                widths.push(*out_dim);
                let mut buckets = Vec::with_capacity(m.len());
                for (i, &count) in m.iter().enumerate() {
                    let activation = if i + 1 == m.len() {
                        Activation::None
                    } else {
                        Activation::Relu
                    };
                    buckets.push(Bucket::init(
                        LayerKind::Dense {
                            input: widths[i],
                            output: widths[i + 1],
                            bias: true,
                            activation,
                        },
                        count,
                        rng,
                    ));
                }
                Generator {
                    buckets,
                    z: Tensor::randn(vec![*z_dim], 0.0, 1.0, rng),
                    nonlinear: true,
                    stem_shape: None,
                    output_activation: Activation::None,
                    output_shape: None,
                }
            }
            ArchConfig::Conv {
                z_dim,
                stem,
                channels,
                out_channels,
                m,
            } => {
                let stem_flat = stem[0] * stem[1] * stem[2];
                let mut buckets = Vec::with_capacity(m.len());
                buckets.push(Bucket::init(
                    LayerKind::Dense {
                        input: *z_dim,
                        output: stem_flat,
                        bias: true,
                        activation: Activation::None,
                    },
                    m[0],
                    rng,
                ));
                let mut ch = stem[0];
                for (k, &oc) in channels.iter().enumerate() {
                    buckets.push(Bucket::init(
                        LayerKind::Residual {
                            in_ch: ch,
                            out_ch: oc,
                            upsample: true,
                        },
                        m[k + 1],
                        rng,
                    ));
                    ch = oc;
                }
                buckets.push(Bucket::init(
                    LayerKind::OutputConv {
                        in_ch: ch,
                        out_ch: *out_channels,
                        kernel: 3,
                    },
                    m[m.len() - 1],
                    rng,
                ));
                Generator {
                    buckets,
                    z: Tensor::randn(vec![*z_dim], 0.0, 1.0, rng),
                    nonlinear: true,
                    stem_shape: Some(stem.to_vec()),
                    output_activation: Activation::Tanh,
                    output_shape: None,
                }
            }
            ArchConfig::Linear { shapes, m } => {
                crate::fusion::build_linear_generator(shapes, m, rng)?
            }
        };
        gen.validate()?;
        Ok(gen)
    }

    /// Critic matching the generator's output: dense for point data,
    /// convolutional for images.
    pub fn build_discriminator(&self, rng: &mut impl Rng) -> Result<Discriminator<f32>> {
        let spectral = self.train.loss == LossVariant::HingeSn;
        let probe = self.build_generator(&mut rand_chacha::ChaCha8Rng::from_rng(rng))?;
        let shape = probe.output_sample_shape()?;
        Ok(if shape.len() == 3 {
            Discriminator::conv(
                &[shape[0], shape[1], shape[2]],
                &self.disc_channels,
                1,
                spectral,
                rng,
            )
        } else {
            let flat: usize = shape.iter().product();
            Discriminator::mlp(flat, &self.disc_hidden, 1, spectral, rng)
        })
    }

    pub fn build_dataset(&self, rng: &mut impl Rng) -> Result<Dataset<f32>> {
        match &self.data {
            DataConfig::Ring {
                modes,
                radius,
                sigma,
                count,
            } => data::synth_mixture(*modes, *radius, *sigma, *count, rng),
            DataConfig::Idx {
                path,
                labels,
                colorize,
                keep_labels,
            } => {
                let mut ds = data::load_idx::<f32>(path)?;
                if let Some(lp) = labels {
                    let lv = data::load_idx_labels(lp)?;
                    if lv.len() != ds.len() {
                        return Err(Error::Format(format!(
                            "label count {} does not match image count {}",
                            lv.len(),
                            ds.len()
                        )));
                    }
                    ds.labels = Some(lv);
                }
                if let Some((lo, hi)) = keep_labels {
                    ds = ds.filter_by_label(|l| l >= *lo && l <= *hi)?;
                }
                if *colorize {
                    ds = data::colorize(&ds, rng)?;
                }
                Ok(ds)
            }
        }
    }
}

use rand_chacha::rand_core::SeedableRng;
