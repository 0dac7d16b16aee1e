//! Incremental extension of trained generators with fresh instances, and
//! route inversion: per-bucket classifiers mapping images back to the
//! instance indices that produced them.

use crate::data::atomic_write;
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::{Generator, Route};
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};
use crate::train::{Adam, TrainConfig, TrainReport, TrainSession};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::Path;

// ── extension ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub enum InitMode {
    /// Fresh draws from the layer's initialization.
    Random,
    /// Copy of a random pre-existing instance plus Gaussian noise.
    ClonePerturb { std: f64 },
}

#[derive(Debug, Clone)]
pub struct ExtensionSpec {
    /// Instances appended per bucket; at least one entry must be positive.
    pub added: Vec<usize>,
    pub init: InitMode,
}

/// Appends new trainable instances to each bucket and freezes every
/// pre-existing instance, so old routes replay bit-identically and
/// subsequent training touches only the additions.
pub fn extend<T: Real>(
    gen: &Generator<T>,
    spec: &ExtensionSpec,
    rng: &mut impl Rng,
) -> Result<Generator<T>> {
    if spec.added.len() != gen.buckets.len() {
        return Err(Error::Contract(format!(
            "extension lists {} buckets, generator has {}",
            spec.added.len(),
            gen.buckets.len()
        )));
    }
    if spec.added.iter().all(|&d| d == 0) {
        return Err(Error::Contract(
            "extension adds no instances anywhere".into(),
        ));
    }
    let mut out = gen.clone();
    for (bucket, &delta) in out.buckets.iter_mut().zip(&spec.added) {
        for inst in &mut bucket.instances {
            inst.trainable = false;
        }
        for _ in 0..delta {
            let mut inst = match spec.init {
                InitMode::Random => bucket.kind.init_instance(rng),
                InitMode::ClonePerturb { std } => {
                    let source = rng.random_range(0..bucket.instances.len());
                    let mut clone = bucket.instances[source].clone();
                    let normal = rand_distr::Normal::new(0.0, std).map_err(|_| {
                        Error::Contract(format!("bad clone-perturb deviation {std}"))
                    })?;
                    for (_, t) in &mut clone.params {
                        for v in t.data_mut() {
                            let n: f64 = rand_distr::Distribution::sample(&normal, rng);
                            *v += T::from_f64(n);
                        }
                    }
                    clone
                }
            };
            inst.trainable = true;
            bucket.instances.push(inst);
        }
    }
    out.validate()?;
    Ok(out)
}

/// Digest over non-trainable instance parameters only; unchanged across any
/// amount of masked training.
pub fn frozen_fingerprint<T: Real>(gen: &Generator<T>) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    };
    for bucket in &gen.buckets {
        for inst in &bucket.instances {
            if inst.trainable {
                continue;
            }
            for (name, t) in &inst.params {
                feed(name.as_bytes());
                for v in t.data() {
                    feed(&v.as_f64().to_bits().to_le_bytes());
                }
            }
        }
    }
    hash
}

/// Continues adversarial training on an extended generator. The trainability
/// mask must cover something: at least one trainable instance, or a
/// trainable fixed input.
pub fn incremental_train<T: Real>(
    gen: &mut Generator<T>,
    disc: &mut Discriminator<T>,
    data: &crate::data::Dataset<T>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let trainable_instances: usize = gen
        .buckets
        .iter()
        .flat_map(|b| &b.instances)
        .filter(|i| i.trainable)
        .count();
    if trainable_instances == 0 && !cfg.train_z {
        return Err(Error::Contract(
            "trainability mask covers zero parameters".into(),
        ));
    }
    let mut session = TrainSession::new(gen.clone(), disc.clone(), cfg.clone())?;
    session.run(data, cfg.steps)?;
    *gen = session.gen;
    *disc = session.disc;
    Ok(session.report)
}

// ── inversion ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub enum ClassifierArch {
    Mlp { hidden: Vec<usize> },
    Conv { channels: Vec<usize> },
}

#[derive(Debug, Clone)]
pub struct InverterCfg {
    pub arch: ClassifierArch,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Fraction of generated images held out for accuracy reporting.
    pub holdout: f64,
}

impl Default for InverterCfg {
    fn default() -> Self {
        InverterCfg {
            arch: ClassifierArch::Mlp { hidden: vec![64] },
            epochs: 10,
            batch: 64,
            lr: 1e-3,
            holdout: 0.2,
        }
    }
}

/// Index predictor for one bucket. A single-instance bucket needs no model:
/// it is the constant predictor with accuracy one.
#[derive(Debug, Clone)]
pub struct Classifier<T: Real> {
    pub net: Option<Discriminator<T>>,
    pub classes: usize,
}

impl<T: Real> Classifier<T> {
    /// Class probabilities for one image (softmax over logits).
    pub fn predict_probs(&self, image: &Tensor<T>) -> Result<Vec<f64>> {
        let Some(net) = &self.net else {
            return Ok(vec![1.0; 1]);
        };
        let logits = forward_logits(net, image)?;
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        Ok(exps.iter().map(|e| e / denom).collect())
    }

    /// Most likely index; ties break toward the lowest index.
    pub fn predict(&self, image: &Tensor<T>) -> Result<usize> {
        let probs = self.predict_probs(image)?;
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        Ok(best)
    }
}

fn forward_logits<T: Real>(net: &Discriminator<T>, image: &Tensor<T>) -> Result<Vec<f64>> {
    let mut scratch = net.clone();
    let mut tape = Tape::new();
    let binding = scratch.bind(&mut tape, false);
    let mut shape = vec![1];
    shape.extend_from_slice(&net.input_shape);
    let flat = image.reshaped(shape)?;
    let x = tape.constant(&flat);
    let (scores, _) = net.forward_taped(&mut tape, &binding, x)?;
    Ok(tape.value(scores).iter().map(|v| v.as_f64()).collect())
}

/// One independent classifier per bucket.
#[derive(Debug, Clone)]
pub struct Inverter<T: Real> {
    pub classifiers: Vec<Classifier<T>>,
}

#[derive(Debug, Clone)]
pub struct InverterReport {
    /// Held-out accuracy per bucket.
    pub accuracy: Vec<f64>,
    pub train_samples: usize,
    pub holdout_samples: usize,
}

impl InverterReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::from("bucket,accuracy\n");
        for (b, acc) in self.accuracy.iter().enumerate() {
            out.push_str(&format!("{},{}\n", b + 1, acc));
        }
        atomic_write(path.as_ref(), out.as_bytes())
    }
}

/// Trains per-bucket index classifiers on generated images with recorded
/// routes. Buckets train independently (in parallel) on an 80/20 split of
/// the same generated corpus.
pub fn train_inverter<T: Real>(
    gen: &Generator<T>,
    samples: usize,
    cfg: &InverterCfg,
    rng: &mut impl Rng,
) -> Result<(Inverter<T>, InverterReport)> {
    if samples < 10 {
        return Err(Error::Contract(
            "inverter training needs at least 10 samples".into(),
        ));
    }
    if !(0.0..1.0).contains(&cfg.holdout) || cfg.holdout == 0.0 {
        return Err(Error::Contract(format!(
            "holdout fraction {} outside (0, 1)",
            cfg.holdout
        )));
    }
    gen.validate()?;

    // generate the corpus in chunks so tapes stay small
    let mut images: Vec<Tensor<T>> = Vec::with_capacity(samples);
    let mut routes: Vec<Route> = Vec::with_capacity(samples);
    let chunk = 256;
    while images.len() < samples {
        let n = chunk.min(samples - images.len());
        let (batch, rs) = gen.batch_forward(n, rng)?;
        for i in 0..n {
            images.push(batch.slice_sample(i)?);
        }
        routes.extend(rs);
    }
    let holdout_from = samples - (samples as f64 * cfg.holdout).round().max(1.0) as usize;

    let sample_shape = gen.output_sample_shape()?;
    let flat_dim: usize = sample_shape.iter().product();
    let seeds: Vec<u64> = gen.buckets.iter().map(|_| rng.random()).collect();

    let trained: Vec<Result<(Classifier<T>, f64)>> = gen
        .buckets
        .par_iter()
        .enumerate()
        .map(|(l, bucket)| {
            let classes = bucket.len();
            if classes == 1 {
                return Ok((Classifier { net: None, classes }, 1.0));
            }
            let mut local = ChaCha8Rng::seed_from_u64(seeds[l]);
            let mut net: Discriminator<T> = match &cfg.arch {
                ClassifierArch::Mlp { hidden } => {
                    Discriminator::mlp(flat_dim, hidden, classes, false, &mut local)
                }
                ClassifierArch::Conv { channels } => {
                    if sample_shape.len() != 3 {
                        return Err(Error::Contract(format!(
                            "conv classifier needs [C, H, W] samples, got {sample_shape:?}"
                        )));
                    }
                    let shape3 = [sample_shape[0], sample_shape[1], sample_shape[2]];
                    Discriminator::conv(&shape3, channels, classes, false, &mut local)
                }
            };
            let labels: Vec<usize> = routes.iter().map(|r| r.0[l]).collect();
            train_classifier(
                &mut net,
                &images[..holdout_from],
                &labels[..holdout_from],
                cfg,
                &mut local,
            )?;
            let correct = (holdout_from..samples)
                .map(|i| {
                    let c = Classifier {
                        net: Some(net.clone()),
                        classes,
                    };
                    Ok((c.predict(&images[i])? == labels[i]) as usize)
                })
                .sum::<Result<usize>>()?;
            let acc = correct as f64 / (samples - holdout_from) as f64;
            Ok((
                Classifier {
                    net: Some(net),
                    classes,
                },
                acc,
            ))
        })
        .collect();

    let mut classifiers = Vec::with_capacity(trained.len());
    let mut accuracy = Vec::with_capacity(trained.len());
    for t in trained {
        let (c, a) = t?;
        classifiers.push(c);
        accuracy.push(a);
    }
    Ok((
        Inverter { classifiers },
        InverterReport {
            accuracy,
            train_samples: holdout_from,
            holdout_samples: samples - holdout_from,
        },
    ))
}

fn train_classifier<T: Real>(
    net: &mut Discriminator<T>,
    images: &[Tensor<T>],
    labels: &[usize],
    cfg: &InverterCfg,
    rng: &mut impl Rng,
) -> Result<()> {
    let opt_cfg = TrainConfig {
        lr: cfg.lr,
        beta1: 0.9,
        beta2: 0.999,
        ..TrainConfig::default()
    };
    let mut adam: Adam<T> = Adam::new(&opt_cfg);
    let n = images.len();
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<Tensor<T>> = chunk.iter().map(|&i| images[i].clone()).collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let stacked = Tensor::stack(&batch)?;
            let mut tape = Tape::new();
            let binding = net.bind(&mut tape, true);
            let mut shape = vec![chunk.len()];
            shape.extend_from_slice(&net.input_shape);
            let x = {
                let id = tape.constant(&stacked);
                tape.reshape(id, shape)?
            };
            let (logits, _) = net.forward_taped(&mut tape, &binding, x)?;
            let loss = tape.cross_entropy(logits, &targets)?;
            tape.backward(loss)?;
            net.zero_grads();
            net.absorb_grads(&tape, &binding);
            adam.begin_step();
            net.visit_params_mut(|name, t, tr| adam.update(name, t, tr));
        }
    }
    Ok(())
}

/// Argmax route for an image.
pub fn invert<T: Real>(inv: &Inverter<T>, image: &Tensor<T>) -> Result<Route> {
    let indices = inv
        .classifiers
        .iter()
        .map(|c| c.predict(image))
        .collect::<Result<Vec<usize>>>()?;
    Ok(Route(indices))
}

/// Copy of `route` with one coordinate replaced, bounds-checked against the
/// generator.
pub fn edit_route<T: Real>(
    gen: &Generator<T>,
    route: &Route,
    bucket: usize,
    new_index: usize,
) -> Result<Route> {
    if bucket >= gen.buckets.len() {
        return Err(Error::Contract(format!(
            "bucket {bucket} out of range for {} buckets",
            gen.buckets.len()
        )));
    }
    let len = gen.buckets[bucket].len();
    if new_index >= len {
        return Err(Error::RouteBounds {
            bucket,
            index: new_index,
            len,
        });
    }
    let mut edited = route.clone();
    edited.0[bucket] = new_index;
    Ok(edited)
}
