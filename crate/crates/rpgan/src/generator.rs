//! The routed generator: ordered buckets of interchangeable layer instances,
//! a learnable fixed input, and forward evaluation along a chosen route.

use crate::error::{Error, Result};
use crate::layers::{Activation, Instance, LayerKind};
use crate::tape::{Tape, VarId};
use crate::tensor::{Real, Tensor};
use num_bigint::BigUint;
use num_traits::ToPrimitive;
use rand::Rng;

/// One slot in the generator pipeline, holding `m_i >= 1` interchangeable
/// instances of a single layer kind.
#[derive(Debug, Clone)]
pub struct Bucket<T: Real> {
    pub kind: LayerKind,
    pub instances: Vec<Instance<T>>,
}

impl<T: Real> Bucket<T> {
    pub fn init(kind: LayerKind, count: usize, rng: &mut impl Rng) -> Self {
        let instances = (0..count).map(|_| kind.init_instance(rng)).collect();
        Bucket { kind, instances }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// The discrete latent code: one instance index per bucket (0-based).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Route(pub Vec<usize>);

impl Route {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::fmt::Display for Route {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|i| i.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

#[derive(Debug, Clone)]
pub struct Generator<T: Real> {
    pub buckets: Vec<Bucket<T>>,
    /// Learnable fixed input; the only non-routed parameter.
    pub z: Tensor<T>,
    /// When false, every internal activation is replaced by identity. The
    /// output activation below is unaffected.
    pub nonlinear: bool,
    /// Sample shape `[C, H, W]` the first bucket's flat output reshapes to,
    /// for dense-stem convolutional generators.
    pub stem_shape: Option<Vec<usize>>,
    pub output_activation: Activation,
    /// Final sample shape override (e.g. flat dense output viewed as an image).
    pub output_shape: Option<Vec<usize>>,
}

/// How generator parameters enter a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindMode {
    /// Values only; nothing receives gradient.
    Frozen,
    /// Instance parameters follow their `trainable` flag; `train_z` gates
    /// the fixed input.
    Trainable { train_z: bool },
}

/// Tape handles for one generator's parameters.
pub struct GenBinding {
    pub z: VarId,
    /// `instances[bucket][instance][param]` in `param_specs` order.
    pub instances: Vec<Vec<Vec<VarId>>>,
}

impl<T: Real> Generator<T> {
    /// Validates structure: non-empty buckets, instance parameters matching
    /// their bucket kind, and a consistent shape chain from `z` to output.
    pub fn validate(&self) -> Result<()> {
        if self.buckets.is_empty() {
            return Err(Error::Config("generator has no buckets".into()));
        }
        for (bi, bucket) in self.buckets.iter().enumerate() {
            if bucket.instances.is_empty() {
                return Err(Error::Config(format!("bucket {bi} has no instances")));
            }
            let specs = bucket.kind.param_specs();
            for (ii, inst) in bucket.instances.iter().enumerate() {
                if inst.params.len() != specs.len() {
                    return Err(Error::Config(format!(
                        "bucket {bi} instance {ii} has {} parameters, kind expects {}",
                        inst.params.len(),
                        specs.len()
                    )));
                }
                for ((name, tensor), (sname, sshape)) in inst.params.iter().zip(&specs) {
                    if name != sname || tensor.shape() != sshape.as_slice() {
                        return Err(Error::Config(format!(
                            "bucket {bi} instance {ii} parameter {name} has shape {:?}, kind expects {sname} {:?}",
                            tensor.shape(),
                            sshape
                        )));
                    }
                }
            }
        }
        self.output_sample_shape().map(|_| ())
    }

    /// Shape of a single generated sample (no batch dimension).
    pub fn output_sample_shape(&self) -> Result<Vec<usize>> {
        let mut shape = vec![1];
        shape.extend_from_slice(self.z.shape());
        for (bi, bucket) in self.buckets.iter().enumerate() {
            shape = bucket.kind.output_shape(&shape)?;
            if bi == 0 {
                if let Some(stem) = &self.stem_shape {
                    let flat: usize = shape[1..].iter().product();
                    if stem.iter().product::<usize>() != flat {
                        return Err(Error::ShapeMismatch {
                            op: "stem_reshape",
                            lhs: shape,
                            rhs: stem.clone(),
                        });
                    }
                    shape = std::iter::once(1).chain(stem.iter().copied()).collect();
                }
            }
        }
        if let Some(out) = &self.output_shape {
            let flat: usize = shape[1..].iter().product();
            if out.iter().product::<usize>() != flat {
                return Err(Error::ShapeMismatch {
                    op: "output_reshape",
                    lhs: shape,
                    rhs: out.clone(),
                });
            }
            return Ok(out.clone());
        }
        Ok(shape[1..].to_vec())
    }

    /// Instance counts per bucket.
    pub fn instance_counts(&self) -> Vec<usize> {
        self.buckets.iter().map(|b| b.len()).collect()
    }

    pub fn check_route(&self, route: &Route) -> Result<()> {
        if route.len() != self.buckets.len() {
            return Err(Error::Contract(format!(
                "route has {} coordinates, generator has {} buckets",
                route.len(),
                self.buckets.len()
            )));
        }
        for (bucket, &index) in route.0.iter().enumerate() {
            let len = self.buckets[bucket].len();
            if index >= len {
                return Err(Error::RouteBounds { bucket, index, len });
            }
        }
        Ok(())
    }

    /// Uniform independent choice of one instance per bucket.
    pub fn sample_route(&self, rng: &mut impl Rng) -> Route {
        Route(
            self.buckets
                .iter()
                .map(|b| rng.random_range(0..b.len()))
                .collect(),
        )
    }

    /// Number of distinct routes as an exact big integer.
    pub fn latent_cardinality(&self) -> BigUint {
        self.buckets
            .iter()
            .fold(BigUint::from(1u32), |acc, b| acc * BigUint::from(b.len()))
    }

    /// Latent cardinality divided by the training-set size.
    pub fn coverage(&self, dataset_size: usize) -> Result<f64> {
        if dataset_size == 0 {
            return Err(Error::Contract("coverage of an empty dataset".into()));
        }
        let card = self.latent_cardinality().to_f64().unwrap_or(f64::INFINITY);
        Ok(card / dataset_size as f64)
    }

    /// Registers all parameters on a tape.
    pub fn bind(&self, tape: &mut Tape<T>, mode: BindMode) -> GenBinding {
        let grad_for = |trainable: bool| match mode {
            BindMode::Frozen => false,
            BindMode::Trainable { .. } => trainable,
        };
        let z_grad = match mode {
            BindMode::Frozen => false,
            BindMode::Trainable { train_z } => train_z,
        };
        let z = tape.leaf(self.z.data().to_vec(), self.z.shape().to_vec(), z_grad);
        let instances = self
            .buckets
            .iter()
            .map(|bucket| {
                bucket
                    .instances
                    .iter()
                    .map(|inst| {
                        inst.params
                            .iter()
                            .map(|(_, t)| {
                                tape.leaf(
                                    t.data().to_vec(),
                                    t.shape().to_vec(),
                                    grad_for(inst.trainable),
                                )
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        GenBinding { z, instances }
    }

    /// Taped forward along `route`; output keeps a leading batch dim of 1.
    pub fn forward_taped(
        &self,
        tape: &mut Tape<T>,
        binding: &GenBinding,
        route: &Route,
    ) -> Result<VarId> {
        self.check_route(route)?;
        let mut shape = vec![1];
        shape.extend_from_slice(self.z.shape());
        let mut x = tape.reshape(binding.z, shape)?;
        for (bi, bucket) in self.buckets.iter().enumerate() {
            let params = &binding.instances[bi][route.0[bi]];
            x = bucket.kind.forward(tape, params, x, self.nonlinear)?;
            if bi == 0 {
                if let Some(stem) = &self.stem_shape {
                    let mut s = vec![1];
                    s.extend_from_slice(stem);
                    x = tape.reshape(x, s)?;
                }
            }
        }
        x = self.output_activation.apply(tape, x);
        if let Some(out) = &self.output_shape {
            let mut s = vec![1];
            s.extend_from_slice(out);
            x = tape.reshape(x, s)?;
        }
        Ok(x)
    }

    /// Pure forward: a deterministic function of (parameters, z, route).
    pub fn forward(&self, route: &Route) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, BindMode::Frozen);
        let out = self.forward_taped(&mut tape, &binding, route)?;
        let t = tape.to_tensor(out);
        let sample_shape = t.shape()[1..].to_vec();
        t.reshaped(sample_shape)
    }

    /// Generates `batch_size` samples, each along its own independently
    /// sampled route. Returns the stacked batch and the routes used.
    pub fn batch_forward(
        &self,
        batch_size: usize,
        rng: &mut impl Rng,
    ) -> Result<(Tensor<T>, Vec<Route>)> {
        if batch_size == 0 {
            return Err(Error::Contract("batch_forward of zero samples".into()));
        }
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, BindMode::Frozen);
        let mut routes = Vec::with_capacity(batch_size);
        let mut samples = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let route = self.sample_route(rng);
            let out = self.forward_taped(&mut tape, &binding, &route)?;
            let t = tape.to_tensor(out);
            let sample_shape = t.shape()[1..].to_vec();
            samples.push(t.reshaped(sample_shape)?);
            routes.push(route);
        }
        Ok((Tensor::stack(&samples)?, routes))
    }

    /// The diversity term: minus the sum over buckets and unordered instance
    /// pairs of the mean squared difference of their parameters, each bucket
    /// normalized by the pooled population standard deviation of all its
    /// instance parameters (treated as a constant during backward). Buckets
    /// whose pooled deviation is below 1e-12 contribute zero.
    pub fn diversity_loss_taped(&self, tape: &mut Tape<T>, binding: &GenBinding) -> VarId {
        let mut terms: Vec<VarId> = Vec::new();
        for (bi, bucket) in self.buckets.iter().enumerate() {
            let m = bucket.len();
            if m < 2 {
                continue;
            }
            let mut sum = 0.0f64;
            let mut sum_sq = 0.0f64;
            let mut count = 0usize;
            for inst in &bucket.instances {
                for (_, t) in &inst.params {
                    for v in t.data() {
                        let x = v.as_f64();
                        sum += x;
                        sum_sq += x * x;
                        count += 1;
                    }
                }
            }
            let mean = sum / count as f64;
            let var = (sum_sq / count as f64 - mean * mean).max(0.0);
            let std = var.sqrt();
            if std < 1e-12 {
                continue;
            }
            let inv_s2 = T::from_f64(1.0 / (std * std));
            let n_params = bucket.kind.param_specs().len();
            for p in 0..n_params {
                for i in 0..m {
                    for j in (i + 1)..m {
                        let a = binding.instances[bi][i][p];
                        let b = binding.instances[bi][j][p];
                        let d = tape.sub(a, b);
                        let sq = tape.mul(d, d);
                        let mse = tape.mean(sq);
                        terms.push(tape.scale(mse, inv_s2));
                    }
                }
            }
        }
        let total = match terms.split_first() {
            None => tape.leaf(vec![T::zero()], vec![1], false),
            Some((&first, rest)) => rest.iter().fold(first, |acc, &t| tape.add(acc, t)),
        };
        tape.neg(total)
    }

    /// Value of the diversity term without gradient bookkeeping.
    pub fn diversity_loss(&self) -> Tensor<T> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, BindMode::Frozen);
        let id = self.diversity_loss_taped(&mut tape, &binding);
        Tensor::scalar(tape.scalar_value(id))
    }

    /// Visits every parameter with a stable name: `z`, then
    /// `b{bucket}.i{instance}.{param}` in structural order.
    pub fn visit_params(&self, mut f: impl FnMut(&str, &Tensor<T>, bool)) {
        f("z", &self.z, true);
        for (bi, bucket) in self.buckets.iter().enumerate() {
            for (ii, inst) in bucket.instances.iter().enumerate() {
                for (name, t) in &inst.params {
                    f(&format!("b{bi}.i{ii}.{name}"), t, inst.trainable);
                }
            }
        }
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>, bool)) {
        f("z", &mut self.z, true);
        for (bi, bucket) in self.buckets.iter_mut().enumerate() {
            for (ii, inst) in bucket.instances.iter_mut().enumerate() {
                let trainable = inst.trainable;
                for (name, t) in &mut inst.params {
                    f(&format!("b{bi}.i{ii}.{name}"), t, trainable);
                }
            }
        }
    }

    /// Order-sensitive FNV-1a digest over all parameter bit patterns.
    pub fn fingerprint(&self) -> u64 {
        let mut hash: u64 = 0xcbf29ce484222325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        };
        self.visit_params(|name, t, _| {
            feed(name.as_bytes());
            for v in t.data() {
                feed(&v.as_f64().to_bits().to_le_bytes());
            }
        });
        hash
    }

    /// Writes tape gradients back into parameter `grad` buffers, accumulating.
    pub fn absorb_grads(&mut self, tape: &Tape<T>, binding: &GenBinding) {
        if let Some(g) = tape.grad(binding.z) {
            self.z.accumulate_grad(g);
        }
        for (bi, bucket) in self.buckets.iter_mut().enumerate() {
            for (ii, inst) in bucket.instances.iter_mut().enumerate() {
                for (pi, (_, t)) in inst.params.iter_mut().enumerate() {
                    if let Some(g) = tape.grad(binding.instances[bi][ii][pi]) {
                        t.accumulate_grad(g);
                    }
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(|_, t, _| t.zero_grad());
    }
}
