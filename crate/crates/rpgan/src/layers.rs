//! Layer kinds that bucket instances can take, with shared shape logic,
//! initialization and taped forward passes.

use crate::error::{Error, Result};
use crate::tape::{Tape, VarId};
use crate::tensor::{Real, Tensor};
use rand::Rng;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    LeakyRelu,
    Tanh,
}

impl Activation {
    pub fn apply<T: Real>(self, tape: &mut Tape<T>, x: VarId) -> VarId {
        match self {
            Activation::None => x,
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu => tape.leaky_relu(x, T::from_f64(LEAKY_SLOPE)),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// The computational unit a bucket replicates. All instances of a bucket
/// share one kind; only parameter values differ.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerKind {
    /// Affine map on flat features, optional bias and activation.
    Dense {
        input: usize,
        output: usize,
        bias: bool,
        activation: Activation,
    },
    /// Convolution, optionally preceded by nearest-neighbor x2 upsampling.
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        upsample: bool,
        activation: Activation,
    },
    /// Two 3x3 convolutions with a skip connection; the skip gains a 1x1
    /// projection when the channel count changes. Optional x2 upsampling
    /// applies to both branches.
    Residual {
        in_ch: usize,
        out_ch: usize,
        upsample: bool,
    },
    /// Final stride-1 convolution onto image channels; the output activation
    /// is owned by the generator, not the layer.
    OutputConv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    },
}

/// One concrete parameterization of a bucket's layer kind.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance<T: Real> {
    pub params: Vec<(String, Tensor<T>)>,
    pub trainable: bool,
}

impl<T: Real> Instance<T> {
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

impl LayerKind {
    /// Parameter names and shapes, in the order instances store them.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        match *self {
            LayerKind::Dense {
                input,
                output,
                bias,
                ..
            } => {
                let mut specs = vec![("w".to_string(), vec![output, input])];
                if bias {
                    specs.push(("b".into(), vec![output]));
                }
                specs
            }
            LayerKind::Conv {
                in_ch,
                out_ch,
                kernel,
                ..
            }
            | LayerKind::OutputConv {
                in_ch,
                out_ch,
                kernel,
            } => vec![
                ("w".into(), vec![out_ch, in_ch, kernel, kernel]),
                ("b".into(), vec![out_ch]),
            ],
            LayerKind::Residual { in_ch, out_ch, .. } => {
                let mut specs = vec![
                    ("conv1.w".into(), vec![out_ch, in_ch, 3, 3]),
                    ("conv1.b".into(), vec![out_ch]),
                    ("conv2.w".into(), vec![out_ch, out_ch, 3, 3]),
                    ("conv2.b".into(), vec![out_ch]),
                ];
                if in_ch != out_ch {
                    specs.push(("skip.w".into(), vec![out_ch, in_ch, 1, 1]));
                }
                specs
            }
        }
    }

    /// Fresh instance with fan-in scaled Gaussian weights and zero biases.
    pub fn init_instance<T: Real>(&self, rng: &mut impl Rng) -> Instance<T> {
        let params = self
            .param_specs()
            .into_iter()
            .map(|(name, shape)| {
                let tensor = if name.ends_with(".b") || name == "b" {
                    Tensor::zeros(shape)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let std = (1.0 / fan_in as f64).sqrt();
                    Tensor::randn(shape, 0.0, std, rng)
                };
                (name, tensor)
            })
            .collect();
        Instance {
            params,
            trainable: true,
        }
    }

    /// Output shape for a sample-level input shape (leading batch dim of 1).
    pub fn output_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerKind::Dense { input, output, .. } => {
                if in_shape.len() != 2 || in_shape[1] != input {
                    return Err(Error::ShapeMismatch {
                        op: "dense",
                        lhs: in_shape.to_vec(),
                        rhs: vec![in_shape.first().copied().unwrap_or(1), input],
                    });
                }
                Ok(vec![in_shape[0], output])
            }
            LayerKind::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
                upsample,
                ..
            } => {
                if in_shape.len() != 4 || in_shape[1] != in_ch {
                    return Err(Error::ShapeMismatch {
                        op: "conv",
                        lhs: in_shape.to_vec(),
                        rhs: vec![0, in_ch, 0, 0],
                    });
                }
                let (h, w) = if upsample {
                    (in_shape[2] * 2, in_shape[3] * 2)
                } else {
                    (in_shape[2], in_shape[3])
                };
                let oh = (h + 2 * pad)
                    .checked_sub(kernel)
                    .filter(|d| d % stride == 0)
                    .map(|d| d / stride + 1)
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "conv output not integral for input {h}x{w} kernel {kernel} stride {stride} pad {pad}"
                        ))
                    })?;
                let ow = (w + 2 * pad)
                    .checked_sub(kernel)
                    .filter(|d| d % stride == 0)
                    .map(|d| d / stride + 1)
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "conv output not integral for input {h}x{w} kernel {kernel} stride {stride} pad {pad}"
                        ))
                    })?;
                Ok(vec![in_shape[0], out_ch, oh, ow])
            }
            LayerKind::Residual {
                in_ch,
                out_ch,
                upsample,
            } => {
                if in_shape.len() != 4 || in_shape[1] != in_ch {
                    return Err(Error::ShapeMismatch {
                        op: "residual",
                        lhs: in_shape.to_vec(),
                        rhs: vec![0, in_ch, 0, 0],
                    });
                }
                let scale = if upsample { 2 } else { 1 };
                Ok(vec![
                    in_shape[0],
                    out_ch,
                    in_shape[2] * scale,
                    in_shape[3] * scale,
                ])
            }
            LayerKind::OutputConv { in_ch, out_ch, .. } => {
                if in_shape.len() != 4 || in_shape[1] != in_ch {
                    return Err(Error::ShapeMismatch {
                        op: "output_conv",
                        lhs: in_shape.to_vec(),
                        rhs: vec![0, in_ch, 0, 0],
                    });
                }
                Ok(vec![in_shape[0], out_ch, in_shape[2], in_shape[3]])
            }
        }
    }

    /// Internal activation the layer applies, before any nonlinearity
    /// suppression at the generator level.
    pub fn internal_activation(&self) -> Activation {
        match *self {
            LayerKind::Dense { activation, .. } | LayerKind::Conv { activation, .. } => activation,
            LayerKind::Residual { .. } => Activation::Relu,
            LayerKind::OutputConv { .. } => Activation::None,
        }
    }

    /// Taped forward through one instance. `nonlinear = false` replaces every
    /// internal activation with identity.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &[VarId],
        x: VarId,
        nonlinear: bool,
    ) -> Result<VarId> {
        let act = |a: Activation| if nonlinear { a } else { Activation::None };
        match *self {
            LayerKind::Dense {
                bias, activation, ..
            } => {
                let b = if bias { Some(params[1]) } else { None };
                let y = tape.linear(x, params[0], b)?;
                Ok(act(activation).apply(tape, y))
            }
            LayerKind::Conv {
                stride,
                pad,
                upsample,
                activation,
                ..
            } => {
                let x = if upsample {
                    tape.upsample_nearest2(x)?
                } else {
                    x
                };
                let y = tape.conv2d(x, params[0], stride, pad)?;
                let y = tape.add_channel_bias(y, params[1])?;
                Ok(act(activation).apply(tape, y))
            }
            LayerKind::Residual {
                in_ch,
                out_ch,
                upsample,
            } => {
                let x = if upsample {
                    tape.upsample_nearest2(x)?
                } else {
                    x
                };
                let h = tape.conv2d(x, params[0], 1, 1)?;
                let h = tape.add_channel_bias(h, params[1])?;
                let h = act(Activation::Relu).apply(tape, h);
                let h = tape.conv2d(h, params[2], 1, 1)?;
                let h = tape.add_channel_bias(h, params[3])?;
                let skip = if in_ch != out_ch {
                    tape.conv2d(x, params[4], 1, 0)?
                } else {
                    x
                };
                Ok(tape.add(h, skip))
            }
            LayerKind::OutputConv { kernel, .. } => {
                let pad = kernel / 2;
                let y = tape.conv2d(x, params[0], 1, pad)?;
                tape.add_channel_bias(y, params[1])
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dense_shapes_and_init() {
        let kind = LayerKind::Dense {
            input: 4,
            output: 3,
            bias: true,
            activation: Activation::Relu,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let inst: Instance<f32> = kind.init_instance(&mut rng);
        assert_eq!(inst.param("w").unwrap().shape(), &[3, 4]);
        assert_eq!(inst.param("b").unwrap().shape(), &[3]);
        assert_eq!(kind.output_shape(&[1, 4]).unwrap(), vec![1, 3]);
        assert!(kind.output_shape(&[1, 5]).is_err());
    }

    #[test]
    fn residual_skip_projection_only_on_channel_change() {
        let same = LayerKind::Residual {
            in_ch: 4,
            out_ch: 4,
            upsample: false,
        };
        let grow = LayerKind::Residual {
            in_ch: 2,
            out_ch: 4,
            upsample: true,
        };
        assert_eq!(same.param_specs().len(), 4);
        assert_eq!(grow.param_specs().len(), 5);
        assert_eq!(grow.output_shape(&[1, 2, 4, 4]).unwrap(), vec![1, 4, 8, 8]);
    }

    #[test]
    fn nonlinear_flag_disables_internal_activation() {
        let kind = LayerKind::Dense {
            input: 2,
            output: 2,
            bias: true,
            activation: Activation::Relu,
        };
        let inst: Instance<f64> = Instance {
            params: vec![
                (
                    "w".into(),
                    Tensor::new(vec![2, 2], vec![1.0, 0.5, -0.5, 1.0]).unwrap(),
                ),
                ("b".into(), Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()),
            ],
            trainable: true,
        };
        let x = Tensor::new(vec![1, 2], vec![-5.0, -5.0]).unwrap();

        let run = |nonlinear: bool| {
            let mut tape = Tape::new();
            let xi = tape.constant(&x);
            let ids: Vec<_> = inst.params.iter().map(|(_, t)| tape.constant(t)).collect();
            let y = kind.forward(&mut tape, &ids, xi, nonlinear).unwrap();
            tape.value(y).to_vec()
        };
        let with_act = run(true);
        let without = run(false);
        // large negative pre-activations clamp to zero under relu
        assert!(with_act.iter().all(|&v| v >= 0.0));
        assert!(without.iter().any(|&v| v < 0.0));
    }
}
