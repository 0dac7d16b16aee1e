//! Plain (non-routed) critic networks used as adversaries, with optional
//! spectral weight normalization and a taped input-gradient construction for
//! gradient penalties.

use crate::error::{Error, Result};
use crate::kernels::ConvDims;
use crate::layers::LEAKY_SLOPE;
use crate::tape::{Tape, VarId};
use crate::tensor::{Real, Tensor};
use rand::Rng;

/// One stage of the critic. Leaky-relu activations sit on every dense/conv
/// stage except the final one; structural stages carry no parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DiscStage {
    Dense {
        input: usize,
        output: usize,
    },
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    },
    AvgPool,
    Flatten,
}

#[derive(Debug, Clone)]
pub struct Discriminator<T: Real> {
    pub stages: Vec<DiscStage>,
    /// `(w, b)` for parameterized stages, `None` for structural ones.
    pub params: Vec<Option<(Tensor<T>, Tensor<T>)>>,
    /// Persistent power-iteration vectors, one per parameterized stage.
    pub sn_state: Vec<Option<Vec<T>>>,
    pub spectral_norm: bool,
    pub input_shape: Vec<usize>,
}

/// Tape handles for critic parameters.
pub struct DiscBinding {
    pub params: Vec<Option<(VarId, VarId)>>,
    /// Per-stage 1/sigma factors applied this pass (1.0 when unnormalized).
    pub inv_sigmas: Vec<f64>,
}

/// One power-iteration refinement of the top singular value estimate for a
/// weight viewed as `rows x cols`. Returns the estimate and the updated
/// left vector.
pub fn spectral_sigma<T: Real>(w: &[T], rows: usize, cols: usize, u: &[T]) -> (f64, Vec<T>) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(u.len(), rows);
    // v = normalize(W^T u)
    let mut v = vec![T::zero(); cols];
    for r in 0..rows {
        let ur = u[r];
        for c in 0..cols {
            v[c] += w[r * cols + c] * ur;
        }
    }
    normalize(&mut v);
    // u' = normalize(W v)
    let mut u_next = vec![T::zero(); rows];
    for r in 0..rows {
        let mut acc = T::zero();
        for c in 0..cols {
            acc += w[r * cols + c] * v[c];
        }
        u_next[r] = acc;
    }
    normalize(&mut u_next);
    // sigma = u'^T W v
    let mut sigma = T::zero();
    for r in 0..rows {
        let mut acc = T::zero();
        for c in 0..cols {
            acc += w[r * cols + c] * v[c];
        }
        sigma += u_next[r] * acc;
    }
    (sigma.as_f64(), u_next)
}

fn normalize<T: Real>(v: &mut [T]) {
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    let denom = norm.max(T::from_f64(1e-12));
    for x in v.iter_mut() {
        *x /= denom;
    }
}

/// Divides a weight by its estimated top singular value. The estimate comes
/// from one power-iteration step on `state.u`, which is updated in place;
/// sigma is treated as a constant with respect to gradients.
pub fn spectral_normalize<T: Real>(weight: &Tensor<T>, u: &mut Vec<T>) -> Tensor<T> {
    let rows = weight.shape()[0];
    let cols = weight.numel() / rows;
    let (sigma, u_next) = spectral_sigma(weight.data(), rows, cols, u);
    *u = u_next;
    let inv = if sigma.abs() < 1e-12 {
        1.0
    } else {
        1.0 / sigma
    };
    let data = weight
        .data()
        .iter()
        .map(|&v| v * T::from_f64(inv))
        .collect();
    Tensor::new(weight.shape().to_vec(), data).expect("same shape")
}

impl<T: Real> Discriminator<T> {
    /// Leaky-relu MLP over flat inputs ending in `out_dim` raw scores
    /// (1 for critics, class counts for classifiers).
    pub fn mlp(
        input_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        spectral_norm: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let mut stages = Vec::new();
        let mut params = Vec::new();
        let mut prev = input_dim;
        for &h in hidden {
            stages.push(DiscStage::Dense {
                input: prev,
                output: h,
            });
            params.push(Some(init_dense::<T>(prev, h, rng)));
            prev = h;
        }
        stages.push(DiscStage::Dense {
            input: prev,
            output: out_dim,
        });
        params.push(Some(init_dense::<T>(prev, out_dim, rng)));
        let sn_state = vec![None; stages.len()];
        Discriminator {
            stages,
            params,
            sn_state,
            spectral_norm,
            input_shape: vec![input_dim],
        }
    }

    /// Small convolutional critic: conv stages with 2x pooling, then a dense
    /// head. `channels` lists the conv widths.
    pub fn conv(
        in_shape: &[usize; 3],
        channels: &[usize],
        out_dim: usize,
        spectral_norm: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let mut stages = Vec::new();
        let mut params: Vec<Option<(Tensor<T>, Tensor<T>)>> = Vec::new();
        let (mut c, mut h, mut w) = (in_shape[0], in_shape[1], in_shape[2]);
        for &oc in channels {
            stages.push(DiscStage::Conv {
                in_ch: c,
                out_ch: oc,
                kernel: 3,
            });
            params.push(Some(init_conv::<T>(c, oc, 3, rng)));
            c = oc;
            if h % 2 == 0 && w % 2 == 0 && h > 2 && w > 2 {
                stages.push(DiscStage::AvgPool);
                params.push(None);
                h /= 2;
                w /= 2;
            }
        }
        stages.push(DiscStage::Flatten);
        params.push(None);
        let flat = c * h * w;
        stages.push(DiscStage::Dense {
            input: flat,
            output: out_dim,
        });
        params.push(Some(init_dense::<T>(flat, out_dim, rng)));
        let sn_state = vec![None; stages.len()];
        Discriminator {
            stages,
            params,
            sn_state,
            spectral_norm,
            input_shape: in_shape.to_vec(),
        }
    }

    /// Registers parameters on a tape. With spectral normalization enabled,
    /// each weight's 1/sigma factor is computed here (one power-iteration
    /// step, state updated in place) and later applied as a constant scale.
    pub fn bind(&mut self, tape: &mut Tape<T>, trainable: bool) -> DiscBinding {
        let mut params = Vec::with_capacity(self.stages.len());
        let mut inv_sigmas = Vec::with_capacity(self.stages.len());
        for (i, p) in self.params.iter().enumerate() {
            match p {
                Some((w, b)) => {
                    let inv = if self.spectral_norm {
                        let rows = w.shape()[0];
                        let cols = w.numel() / rows;
                        let u = self.sn_state[i].get_or_insert_with(|| {
                            // deterministic start vector
                            let mut v = vec![T::zero(); rows];
                            v[0] = T::one();
                            v
                        });
                        let (sigma, u_next) = spectral_sigma(w.data(), rows, cols, u);
                        *u = u_next;
                        if sigma.abs() < 1e-12 {
                            1.0
                        } else {
                            1.0 / sigma
                        }
                    } else {
                        1.0
                    };
                    let wid = tape.leaf(w.data().to_vec(), w.shape().to_vec(), trainable);
                    let bid = tape.leaf(b.data().to_vec(), b.shape().to_vec(), trainable);
                    params.push(Some((wid, bid)));
                    inv_sigmas.push(inv);
                }
                None => {
                    params.push(None);
                    inv_sigmas.push(1.0);
                }
            }
        }
        DiscBinding { params, inv_sigmas }
    }

    /// Taped forward over a batch. Returns the `[B, 1]` scores and the
    /// penultimate activations (features before the final dense stage).
    pub fn forward_taped(
        &self,
        tape: &mut Tape<T>,
        binding: &DiscBinding,
        x: VarId,
    ) -> Result<(VarId, VarId)> {
        let mut cur = x;
        let mut features = x;
        let last = self.stages.len() - 1;
        for (i, stage) in self.stages.iter().enumerate() {
            match stage {
                DiscStage::Dense { .. } => {
                    let (w, b) = binding.params[i].expect("dense stage has parameters");
                    let w = scale_weight(tape, w, binding.inv_sigmas[i]);
                    cur = tape.linear(cur, w, Some(b))?;
                    if i != last {
                        cur = tape.leaky_relu(cur, T::from_f64(LEAKY_SLOPE));
                    }
                }
                DiscStage::Conv { .. } => {
                    let (w, b) = binding.params[i].expect("conv stage has parameters");
                    let w = scale_weight(tape, w, binding.inv_sigmas[i]);
                    cur = tape.conv2d(cur, w, 1, 1)?;
                    cur = tape.add_channel_bias(cur, b)?;
                    if i != last {
                        cur = tape.leaky_relu(cur, T::from_f64(LEAKY_SLOPE));
                    }
                }
                DiscStage::AvgPool => cur = tape.avg_pool2(cur)?,
                DiscStage::Flatten => {
                    let sh = tape.shape(cur).to_vec();
                    let flat: usize = sh[1..].iter().product();
                    cur = tape.reshape(cur, vec![sh[0], flat])?;
                }
            }
            if i + 1 == last {
                features = cur;
            }
        }
        Ok((cur, features))
    }

    /// Penultimate-layer features for a single sample, without touching the
    /// power-iteration state.
    pub fn features(&self, sample: &Tensor<T>) -> Result<Tensor<T>> {
        let mut scratch = self.clone();
        let mut tape = Tape::new();
        let binding = scratch.bind(&mut tape, false);
        let mut shape = vec![1];
        shape.extend_from_slice(self.input_shape.as_slice());
        let flat = sample.reshaped(shape)?;
        let x = tape.constant(&flat);
        let (_, feats) = self.forward_taped(&mut tape, &binding, x)?;
        Ok(tape.to_tensor(feats))
    }

    /// Builds the gradient of the summed scores with respect to the input as
    /// tape values, via a manual reverse sweep through the stages. Activation
    /// masks are treated as constants, which is exact for the piecewise-linear
    /// activations used here. The result stays differentiable with respect to
    /// the critic weights, which is what gradient penalties need.
    pub fn input_gradient_taped(
        &self,
        tape: &mut Tape<T>,
        binding: &DiscBinding,
        x: VarId,
    ) -> Result<VarId> {
        // forward, remembering pre-activation values and layer inputs
        // (stage index, weight/input var, activation mask, conv dims)
        type SweepRecord<T> = (usize, VarId, Option<Vec<T>>, Option<ConvDims>);
        let mut cur = x;
        let last = self.stages.len() - 1;
        let mut records: Vec<SweepRecord<T>> = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            match stage {
                DiscStage::Dense { .. } => {
                    let (w, b) = binding.params[i].expect("dense stage has parameters");
                    let w = scale_weight(tape, w, binding.inv_sigmas[i]);
                    let pre = tape.linear(cur, w, Some(b))?;
                    if i != last {
                        let mask = leaky_mask(tape.value(pre));
                        records.push((i, w, Some(mask), None));
                        cur = tape.leaky_relu(pre, T::from_f64(LEAKY_SLOPE));
                    } else {
                        records.push((i, w, None, None));
                        cur = pre;
                    }
                }
                DiscStage::Conv { .. } => {
                    let (w, b) = binding.params[i].expect("conv stage has parameters");
                    let w = scale_weight(tape, w, binding.inv_sigmas[i]);
                    let dims = ConvDims::infer(tape.shape(cur), tape.shape(w), 1, 1)?;
                    let pre0 = tape.conv2d(cur, w, 1, 1)?;
                    let pre = tape.add_channel_bias(pre0, b)?;
                    if i != last {
                        let mask = leaky_mask(tape.value(pre));
                        records.push((i, w, Some(mask), Some(dims)));
                        cur = tape.leaky_relu(pre, T::from_f64(LEAKY_SLOPE));
                    } else {
                        records.push((i, w, None, Some(dims)));
                        cur = pre;
                    }
                }
                DiscStage::AvgPool => {
                    records.push((i, cur, None, None));
                    cur = tape.avg_pool2(cur)?;
                }
                DiscStage::Flatten => {
                    records.push((i, cur, None, None));
                    let sh = tape.shape(cur).to_vec();
                    let flat: usize = sh[1..].iter().product();
                    cur = tape.reshape(cur, vec![sh[0], flat])?;
                }
            }
        }
        if tape.shape(cur)[1] != 1 {
            return Err(Error::Contract(
                "input gradient requires a scalar-score critic".into(),
            ));
        }

        // reverse sweep: upstream starts as ones over the [B, 1] scores
        let batch = tape.shape(cur)[0];
        let mut up = tape.leaf(vec![T::one(); batch], vec![batch, 1], false);
        for (i, aux, mask, dims) in records.into_iter().rev() {
            match &self.stages[i] {
                DiscStage::Dense { .. } => {
                    // d(pre) -> d(input) = d(pre) @ W
                    if let Some(mask) = mask {
                        let m = tape.leaf(mask, tape.shape(up).to_vec(), false);
                        up = tape.mul(up, m);
                    }
                    up = tape.matmul(up, aux, false, false)?;
                }
                DiscStage::Conv { .. } => {
                    if let Some(mask) = mask {
                        let m = tape.leaf(mask, tape.shape(up).to_vec(), false);
                        up = tape.mul(up, m);
                    }
                    let dims = dims.expect("conv record has dims");
                    up = tape.conv2d_input_grad(up, aux, &dims)?;
                }
                DiscStage::AvgPool => {
                    // adjoint of 2x2 mean pooling: spread a quarter share
                    up = tape.upsample_nearest2(up)?;
                    up = tape.scale(up, T::from_f64(0.25));
                }
                DiscStage::Flatten => {
                    let sh = tape.shape(aux).to_vec();
                    up = tape.reshape(up, sh)?;
                }
            }
        }
        Ok(up)
    }

    pub fn visit_params(&self, mut f: impl FnMut(&str, &Tensor<T>, bool)) {
        for (i, p) in self.params.iter().enumerate() {
            if let Some((w, b)) = p {
                f(&format!("d{i}.w"), w, true);
                f(&format!("d{i}.b"), b, true);
            }
        }
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>, bool)) {
        for (i, p) in self.params.iter_mut().enumerate() {
            if let Some((w, b)) = p {
                f(&format!("d{i}.w"), w, true);
                f(&format!("d{i}.b"), b, true);
            }
        }
    }

    pub fn absorb_grads(&mut self, tape: &Tape<T>, binding: &DiscBinding) {
        for (p, bound) in self.params.iter_mut().zip(&binding.params) {
            if let (Some((w, b)), Some((wid, bid))) = (p, bound) {
                if let Some(g) = tape.grad(*wid) {
                    w.accumulate_grad(g);
                }
                if let Some(g) = tape.grad(*bid) {
                    b.accumulate_grad(g);
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(|_, t, _| t.zero_grad());
    }
}

fn scale_weight<T: Real>(tape: &mut Tape<T>, w: VarId, inv_sigma: f64) -> VarId {
    if inv_sigma == 1.0 {
        w
    } else {
        tape.scale(w, T::from_f64(inv_sigma))
    }
}

fn leaky_mask<T: Real>(pre: &[T]) -> Vec<T> {
    let slope = T::from_f64(LEAKY_SLOPE);
    pre.iter()
        .map(|&v| if v > T::zero() { T::one() } else { slope })
        .collect()
}

fn init_dense<T: Real>(input: usize, output: usize, rng: &mut impl Rng) -> (Tensor<T>, Tensor<T>) {
    let std = (1.0 / input as f64).sqrt();
    (
        Tensor::randn(vec![output, input], 0.0, std, rng),
        Tensor::zeros(vec![output]),
    )
}

fn init_conv<T: Real>(
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    rng: &mut impl Rng,
) -> (Tensor<T>, Tensor<T>) {
    let std = (1.0 / (in_ch * kernel * kernel) as f64).sqrt();
    (
        Tensor::randn(vec![out_ch, in_ch, kernel, kernel], 0.0, std, rng),
        Tensor::zeros(vec![out_ch]),
    )
}
