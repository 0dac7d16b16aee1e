//! Adversarial training: hinge loss with a spectrally normalized critic
//! (default) or Wasserstein loss with gradient penalty, Adam updates, a
//! learnable fixed input, and trainability masks.

use crate::data::Dataset;
use crate::discriminator::{DiscBinding, Discriminator};
use crate::error::{Error, Result};
use crate::generator::{BindMode, Generator};
use crate::tape::{Tape, VarId};
use crate::tensor::{Real, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossVariant {
    HingeSn,
    WganPenalty,
}

impl LossVariant {
    pub fn name(self) -> &'static str {
        match self {
            LossVariant::HingeSn => "hinge-sn",
            LossVariant::WganPenalty => "wgan-penalty",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hinge-sn" => Ok(LossVariant::HingeSn),
            "wgan-penalty" => Ok(LossVariant::WganPenalty),
            other => Err(Error::Config(format!("unknown loss variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub loss: LossVariant,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub d_steps: usize,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub diversity_weight: f64,
    pub penalty_coef: f64,
    pub train_z: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossVariant::HingeSn,
            lr: 2.5e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            d_steps: 1,
            batch: 64,
            steps: 0,
            seed: 0,
            diversity_weight: 1.0,
            penalty_coef: 10.0,
            train_z: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_steps == 0 {
            return Err(Error::Config("d_steps must be >= 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        Ok(())
    }
}

// ── losses ──────────────────────────────────────────────────────────

/// Hinge pair: `loss_d = mean(relu(1 - d_real)) + mean(relu(1 + d_fake))`,
/// `loss_g = -mean(d_fake)`.
pub fn hinge_losses<T: Real>(tape: &mut Tape<T>, d_real: VarId, d_fake: VarId) -> (VarId, VarId) {
    let neg_real = tape.neg(d_real);
    let m_real = tape.add_scalar(neg_real, T::one());
    let m_real = tape.relu(m_real);
    let m_real = tape.mean(m_real);
    let m_fake = tape.add_scalar(d_fake, T::one());
    let m_fake = tape.relu(m_fake);
    let m_fake = tape.mean(m_fake);
    let loss_d = tape.add(m_real, m_fake);

    let mf = tape.mean(d_fake);
    let loss_g = tape.neg(mf);
    (loss_d, loss_g)
}

/// Wasserstein pair with an externally computed penalty term:
/// `loss_d = mean(d_fake) - mean(d_real) + coef * penalty`,
/// `loss_g = -mean(d_fake)`.
pub fn wgan_penalty_losses<T: Real>(
    tape: &mut Tape<T>,
    d_real: VarId,
    d_fake: VarId,
    penalty: VarId,
    coef: f64,
) -> (VarId, VarId) {
    let mf = tape.mean(d_fake);
    let mr = tape.mean(d_real);
    let diff = tape.sub(mf, mr);
    let scaled = tape.scale(penalty, T::from_f64(coef));
    let loss_d = tape.add(diff, scaled);
    let loss_g = tape.neg(mf);
    (loss_d, loss_g)
}

/// Mean squared excess of the critic's input-gradient norm over 1, evaluated
/// at the given (constant) points. Differentiable with respect to the critic
/// weights through the taped gradient construction.
pub fn gradient_penalty<T: Real>(
    tape: &mut Tape<T>,
    disc: &Discriminator<T>,
    binding: &DiscBinding,
    x: VarId,
) -> Result<VarId> {
    let g = disc.input_gradient_taped(tape, binding, x)?;
    let sh = tape.shape(g).to_vec();
    let flat: usize = sh[1..].iter().product();
    let g = tape.reshape(g, vec![sh[0], flat])?;
    let sq = tape.mul(g, g);
    let ss = tape.sum_rows(sq)?;
    let ss = tape.add_scalar(ss, T::from_f64(1e-12));
    let norm = tape.sqrt(ss);
    let excess = tape.add_scalar(norm, -T::one());
    let penalty = tape.mul(excess, excess);
    Ok(tape.mean(penalty))
}

// ── optimizer ───────────────────────────────────────────────────────

/// Adam with bias correction. Moment buffers are keyed by parameter name so
/// state survives checkpointing; the step counter is shared per optimizer.
#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub slots: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: &TrainConfig) -> Self {
        Adam {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Applies one Adam update to a parameter from its accumulated gradient.
    /// Parameters without a gradient, or not trainable, are left untouched.
    pub fn update(&mut self, name: &str, param: &mut Tensor<T>, trainable: bool) {
        if !trainable {
            return;
        }
        let Some(grad) = param.grad() else { return };
        let grad = grad.to_vec();
        let n = grad.len();
        let (m, v) = self
            .slots
            .entry(name.to_string())
            .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        for ((p, g), (mi, vi)) in param
            .data_mut()
            .iter_mut()
            .zip(&grad)
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = b1 * *mi + (one - b1) * *g;
            *vi = b2 * *vi + (one - b2) * *g * *g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

// ── reporting ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct ReportRow {
    pub step: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    pub diversity: f64,
}

/// Loss curves plus per-bucket instance usage counts.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub rows: Vec<ReportRow>,
    pub route_counts: Vec<Vec<u64>>,
    pub steps_run: usize,
}

impl TrainReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::from("step,loss_d,loss_g,diversity_term\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.step, r.loss_d, r.loss_g, r.diversity
            ));
        }
        crate::data::atomic_write(path.as_ref(), out.as_bytes())
    }
}

// ── the loop ────────────────────────────────────────────────────────

/// Owns everything a run needs so training can pause, checkpoint and resume.
pub struct TrainSession<T: Real> {
    pub gen: Generator<T>,
    pub disc: Discriminator<T>,
    pub cfg: TrainConfig,
    pub opt_g: Adam<T>,
    pub opt_d: Adam<T>,
    pub rng: ChaCha8Rng,
    pub step: usize,
    pub report: TrainReport,
}

impl<T: Real> TrainSession<T> {
    pub fn new(gen: Generator<T>, disc: Discriminator<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        gen.validate()?;
        let route_counts = gen.buckets.iter().map(|b| vec![0u64; b.len()]).collect();
        Ok(TrainSession {
            opt_g: Adam::new(&cfg),
            opt_d: Adam::new(&cfg),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            step: 0,
            report: TrainReport {
                rows: Vec::new(),
                route_counts,
                steps_run: 0,
            },
            gen,
            disc,
            cfg,
        })
    }

    /// Runs `steps` generator updates (each preceded by `d_steps` critic
    /// updates). Aborts with step index and losses if anything goes
    /// non-finite.
    pub fn run(&mut self, data: &Dataset<T>, steps: usize) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Contract("training on an empty dataset".into()));
        }
        for _ in 0..steps {
            let mut loss_d = 0.0;
            for _ in 0..self.cfg.d_steps {
                loss_d = self.critic_update(data)?;
            }
            let (loss_g, diversity) = self.generator_update()?;
            self.step += 1;
            self.report.steps_run = self.step;
            self.report.rows.push(ReportRow {
                step: self.step,
                loss_d,
                loss_g,
                diversity,
            });
            if !loss_d.is_finite() || !loss_g.is_finite() || !diversity.is_finite() {
                return Err(Error::NonFinite {
                    step: self.step,
                    loss_d,
                    loss_g,
                });
            }
        }
        Ok(())
    }

    fn critic_update(&mut self, data: &Dataset<T>) -> Result<f64> {
        let batch = self.cfg.batch;
        let real = data.sample_batch(batch, &mut self.rng)?;
        let (fake, routes) = self.gen.batch_forward(batch, &mut self.rng)?;
        for r in &routes {
            for (b, &i) in r.0.iter().enumerate() {
                self.report.route_counts[b][i] += 1;
            }
        }

        let mut tape: Tape<T> = Tape::new();
        let binding = self.disc.bind(&mut tape, true);
        let mut in_shape = vec![batch];
        in_shape.extend_from_slice(&self.disc.input_shape);
        let real_id = {
            let id = tape.constant(&real);
            tape.reshape(id, in_shape.clone())?
        };
        let fake_id = {
            let id = tape.constant(&fake);
            tape.reshape(id, in_shape.clone())?
        };
        let (d_real, _) = self.disc.forward_taped(&mut tape, &binding, real_id)?;
        let (d_fake, _) = self.disc.forward_taped(&mut tape, &binding, fake_id)?;

        let loss_d = match self.cfg.loss {
            LossVariant::HingeSn => hinge_losses(&mut tape, d_real, d_fake).0,
            LossVariant::WganPenalty => {
                // one uniform interpolation coefficient per sample
                let stride: usize = real.numel() / batch;
                let mut mixed = Vec::with_capacity(real.numel());
                for s in 0..batch {
                    let alpha = T::from_f64(self.rng.random_range(0.0..1.0));
                    for k in 0..stride {
                        let r = real.data()[s * stride + k];
                        let f = fake.data()[s * stride + k];
                        mixed.push(alpha * r + (T::one() - alpha) * f);
                    }
                }
                let x_hat = tape.leaf(mixed, in_shape, false);
                let penalty = gradient_penalty(&mut tape, &self.disc, &binding, x_hat)?;
                wgan_penalty_losses(&mut tape, d_real, d_fake, penalty, self.cfg.penalty_coef).0
            }
        };
        tape.backward(loss_d)?;
        self.disc.zero_grads();
        self.disc.absorb_grads(&tape, &binding);
        self.opt_d.begin_step();
        let opt = &mut self.opt_d;
        self.disc
            .visit_params_mut(|name, t, tr| opt.update(name, t, tr));
        Ok(tape.scalar_value(loss_d).as_f64())
    }

    fn generator_update(&mut self) -> Result<(f64, f64)> {
        let batch = self.cfg.batch;
        let mut tape: Tape<T> = Tape::new();
        let g_binding = self.gen.bind(
            &mut tape,
            BindMode::Trainable {
                train_z: self.cfg.train_z,
            },
        );
        let d_binding = self.disc.bind(&mut tape, false);

        let mut parts = Vec::with_capacity(batch);
        for _ in 0..batch {
            let route = self.gen.sample_route(&mut self.rng);
            for (b, &i) in route.0.iter().enumerate() {
                self.report.route_counts[b][i] += 1;
            }
            parts.push(self.gen.forward_taped(&mut tape, &g_binding, &route)?);
        }
        let fake = tape.concat0(&parts)?;
        let mut in_shape = vec![batch];
        in_shape.extend_from_slice(&self.disc.input_shape);
        let fake = tape.reshape(fake, in_shape)?;
        let (d_fake, _) = self.disc.forward_taped(&mut tape, &d_binding, fake)?;
        let mf = tape.mean(d_fake);
        let loss_g = tape.neg(mf);

        let diversity = self.gen.diversity_loss_taped(&mut tape, &g_binding);
        let weighted = tape.scale(diversity, T::from_f64(self.cfg.diversity_weight));
        let total = tape.add(loss_g, weighted);

        tape.backward(total)?;
        self.gen.zero_grads();
        self.gen.absorb_grads(&tape, &g_binding);
        self.opt_g.begin_step();
        let opt = &mut self.opt_g;
        self.gen
            .visit_params_mut(|name, t, tr| opt.update(name, t, tr));
        Ok((
            tape.scalar_value(loss_g).as_f64(),
            tape.scalar_value(diversity).as_f64(),
        ))
    }
}

/// One-shot training per `cfg.steps`, mutating the models in place.
pub fn train<T: Real>(
    gen: &mut Generator<T>,
    disc: &mut Discriminator<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let mut session = TrainSession::new(gen.clone(), disc.clone(), cfg.clone())?;
    session.run(data, cfg.steps)?;
    *gen = session.gen;
    *disc = session.disc;
    Ok(session.report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_pair(tape: &mut Tape<f64>, real: &[f64], fake: &[f64]) -> (VarId, VarId) {
        let r = tape.leaf(real.to_vec(), vec![real.len(), 1], false);
        let f = tape.leaf(fake.to_vec(), vec![fake.len(), 1], false);
        (r, f)
    }

    #[test]
    fn hinge_hand_values() {
        // perfect critic: margins satisfied on both sides
        let mut tape = Tape::new();
        let (r, f) = scalar_pair(&mut tape, &[10.0], &[-10.0]);
        let (ld, _) = hinge_losses(&mut tape, r, f);
        assert_eq!(tape.scalar_value(ld), 0.0);

        // indifferent critic
        let mut tape = Tape::new();
        let (r, f) = scalar_pair(&mut tape, &[0.0, 0.0], &[0.0, 0.0]);
        let (ld, lg) = hinge_losses(&mut tape, r, f);
        assert_eq!(tape.scalar_value(ld), 2.0);
        assert_eq!(tape.scalar_value(lg), 0.0);
    }

    #[test]
    fn wgan_hand_values() {
        let mut tape = Tape::new();
        let (r, f) = scalar_pair(&mut tape, &[1.0, 1.0], &[1.0, 1.0]);
        let zero = tape.leaf(vec![0.0], vec![1], false);
        let (ld, _) = wgan_penalty_losses(&mut tape, r, f, zero, 10.0);
        assert_eq!(tape.scalar_value(ld), 0.0);

        let mut tape = Tape::new();
        let (r, f) = scalar_pair(&mut tape, &[3.0], &[1.0]);
        let zero = tape.leaf(vec![0.0], vec![1], false);
        let (ld, lg) = wgan_penalty_losses(&mut tape, r, f, zero, 10.0);
        assert_eq!(tape.scalar_value(ld), -2.0);
        assert_eq!(tape.scalar_value(lg), -1.0);
    }

    #[test]
    fn adam_zero_grad_leaves_parameter() {
        let cfg = TrainConfig::default();
        let mut adam: Adam<f64> = Adam::new(&cfg);
        let mut p = Tensor::new(vec![1], vec![0.5]).unwrap();
        adam.begin_step();
        adam.update("p", &mut p, true); // no grad accumulated
        assert_eq!(p.data(), &[0.5]);
        p.accumulate_grad(&[0.0]);
        adam.update("p", &mut p, true);
        assert_eq!(p.data(), &[0.5]);
    }

    #[test]
    fn adam_first_step_is_roughly_lr() {
        // with g = 1 and bias correction, step 1 moves by lr / (1 + eps)
        let cfg = TrainConfig {
            lr: 0.01,
            ..TrainConfig::default()
        };
        let mut adam: Adam<f64> = Adam::new(&cfg);
        let mut p = Tensor::new(vec![1], vec![1.0]).unwrap();
        p.accumulate_grad(&[1.0]);
        adam.begin_step();
        adam.update("p", &mut p, true);
        let moved = 1.0 - p.data()[0];
        assert!((moved - 0.01).abs() < 1e-6, "moved {moved}");
    }

    #[test]
    fn adam_respects_trainability() {
        let cfg = TrainConfig::default();
        let mut adam: Adam<f64> = Adam::new(&cfg);
        let mut p = Tensor::new(vec![1], vec![2.0]).unwrap();
        p.accumulate_grad(&[5.0]);
        adam.begin_step();
        adam.update("p", &mut p, false);
        assert_eq!(p.data(), &[2.0]);
    }
}
