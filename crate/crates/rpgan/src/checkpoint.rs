//! Fixed binary container for trained state. One format holds either a
//! generator/critic bundle (with optimizer state) or an inverter.
//!
//! Layout (all integers little-endian unless noted):
//!   magic  "RPGN"            4 bytes
//!   version u32              currently 1
//!   kind    u8               0 = gan bundle, 1 = inverter
//! followed by the kind-specific body. Tensor blobs are name-length-prefixed
//! names, a u32 rank, u32 dimensions, then f32 data. Round trips are
//! bit-exact and serialization is deterministic, so saving a loaded file
//! reproduces it byte for byte.

use crate::discriminator::{DiscStage, Discriminator};
use crate::error::{Error, Result};
use crate::generator::{Bucket, Generator, Route};
use crate::layers::{Activation, Instance, LayerKind};
use crate::lifecycle::{Classifier, Inverter};
use crate::tensor::Tensor;
use crate::train::Adam;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"RPGN";
pub const VERSION: u32 = 1;

const KIND_GAN: u8 = 0;
const KIND_INVERTER: u8 = 1;

/// Everything a training run persists.
#[derive(Debug, Clone)]
pub struct GanBundle {
    pub generator: Generator<f32>,
    pub discriminator: Option<Discriminator<f32>>,
    pub optimizers: Option<(Adam<f32>, Adam<f32>)>,
    pub seed: u64,
    pub rng_state: Option<RngState>,
    pub steps_done: u64,
}

/// Exact stream position of the training RNG, for bit-identical resumption.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

// ── byte plumbing ───────────────────────────────────────────────────

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn bytes(&mut self, bs: &[u8]) {
        self.buf.extend_from_slice(bs);
    }
    fn name(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    fn dims(&mut self, dims: &[usize]) {
        self.u32(dims.len() as u32);
        for &d in dims {
            self.u32(d as u32);
        }
    }
    fn tensor(&mut self, name: &str, t: &Tensor<f32>) {
        self.name(name);
        self.dims(t.shape());
        self.f32s(t.data());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} (wanted {n} more of {})",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Format("non-utf8 name in checkpoint".into()))
    }
    fn dims(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| Ok(self.u32()? as usize)).collect()
    }
    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let name = self.name()?;
        let dims = self.dims()?;
        let numel: usize = dims.iter().product();
        let data = self.f32s(numel)?;
        Ok((name, Tensor::new(dims, data)?))
    }
    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint body",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

// ── encoders ────────────────────────────────────────────────────────

fn activation_tag(a: Activation) -> u8 {
    match a {
        Activation::None => 0,
        Activation::Relu => 1,
        Activation::LeakyRelu => 2,
        Activation::Tanh => 3,
    }
}

fn activation_from(tag: u8) -> Result<Activation> {
    Ok(match tag {
        0 => Activation::None,
        1 => Activation::Relu,
        2 => Activation::LeakyRelu,
        3 => Activation::Tanh,
        other => return Err(Error::Format(format!("unknown activation tag {other}"))),
    })
}

fn write_kind(w: &mut Writer, kind: &LayerKind) {
    match *kind {
        LayerKind::Dense {
            input,
            output,
            bias,
            activation,
        } => {
            w.u8(0);
            w.u32(input as u32);
            w.u32(output as u32);
            w.u8(bias as u8);
            w.u8(activation_tag(activation));
        }
        LayerKind::Conv {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            upsample,
            activation,
        } => {
            w.u8(1);
            w.u32(in_ch as u32);
            w.u32(out_ch as u32);
            w.u32(kernel as u32);
            w.u32(stride as u32);
            w.u32(pad as u32);
            w.u8(upsample as u8);
            w.u8(activation_tag(activation));
        }
        LayerKind::Residual {
            in_ch,
            out_ch,
            upsample,
        } => {
            w.u8(2);
            w.u32(in_ch as u32);
            w.u32(out_ch as u32);
            w.u8(upsample as u8);
        }
        LayerKind::OutputConv {
            in_ch,
            out_ch,
            kernel,
        } => {
            w.u8(3);
            w.u32(in_ch as u32);
            w.u32(out_ch as u32);
            w.u32(kernel as u32);
        }
    }
}

fn read_kind(r: &mut Reader) -> Result<LayerKind> {
    Ok(match r.u8()? {
        0 => LayerKind::Dense {
            input: r.u32()? as usize,
            output: r.u32()? as usize,
            bias: r.u8()? != 0,
            activation: activation_from(r.u8()?)?,
        },
        1 => LayerKind::Conv {
            in_ch: r.u32()? as usize,
            out_ch: r.u32()? as usize,
            kernel: r.u32()? as usize,
            stride: r.u32()? as usize,
            pad: r.u32()? as usize,
            upsample: r.u8()? != 0,
            activation: activation_from(r.u8()?)?,
        },
        2 => LayerKind::Residual {
            in_ch: r.u32()? as usize,
            out_ch: r.u32()? as usize,
            upsample: r.u8()? != 0,
        },
        3 => LayerKind::OutputConv {
            in_ch: r.u32()? as usize,
            out_ch: r.u32()? as usize,
            kernel: r.u32()? as usize,
        },
        other => return Err(Error::Format(format!("unknown layer kind tag {other}"))),
    })
}

fn write_opt_dims(w: &mut Writer, dims: &Option<Vec<usize>>) {
    match dims {
        Some(d) => {
            w.u8(1);
            w.dims(d);
        }
        None => w.u8(0),
    }
}

fn read_opt_dims(r: &mut Reader) -> Result<Option<Vec<usize>>> {
    Ok(if r.u8()? != 0 { Some(r.dims()?) } else { None })
}

fn write_generator(w: &mut Writer, gen: &Generator<f32>) {
    w.u32(gen.buckets.len() as u32);
    for bucket in &gen.buckets {
        write_kind(w, &bucket.kind);
        w.u32(bucket.instances.len() as u32);
        for inst in &bucket.instances {
            w.u8(inst.trainable as u8);
            w.u32(inst.params.len() as u32);
            for (name, t) in &inst.params {
                w.tensor(name, t);
            }
        }
    }
    w.tensor("z", &gen.z);
    w.u8(gen.nonlinear as u8);
    write_opt_dims(w, &gen.stem_shape);
    w.u8(activation_tag(gen.output_activation));
    write_opt_dims(w, &gen.output_shape);
}

fn read_generator(r: &mut Reader) -> Result<Generator<f32>> {
    let n_buckets = r.u32()? as usize;
    let mut buckets = Vec::with_capacity(n_buckets);
    for _ in 0..n_buckets {
        let kind = read_kind(r)?;
        let n_inst = r.u32()? as usize;
        let mut instances = Vec::with_capacity(n_inst);
        for _ in 0..n_inst {
            let trainable = r.u8()? != 0;
            let n_params = r.u32()? as usize;
            let params = (0..n_params).map(|_| r.tensor()).collect::<Result<_>>()?;
            instances.push(Instance { params, trainable });
        }
        buckets.push(Bucket { kind, instances });
    }
    let (_, z) = r.tensor()?;
    let nonlinear = r.u8()? != 0;
    let stem_shape = read_opt_dims(r)?;
    let output_activation = activation_from(r.u8()?)?;
    let output_shape = read_opt_dims(r)?;
    let gen = Generator {
        buckets,
        z,
        nonlinear,
        stem_shape,
        output_activation,
        output_shape,
    };
    gen.validate()?;
    Ok(gen)
}

fn write_discriminator(w: &mut Writer, disc: &Discriminator<f32>) {
    w.u32(disc.stages.len() as u32);
    for (i, stage) in disc.stages.iter().enumerate() {
        match *stage {
            DiscStage::Dense { input, output } => {
                w.u8(0);
                w.u32(input as u32);
                w.u32(output as u32);
            }
            DiscStage::Conv {
                in_ch,
                out_ch,
                kernel,
            } => {
                w.u8(1);
                w.u32(in_ch as u32);
                w.u32(out_ch as u32);
                w.u32(kernel as u32);
            }
            DiscStage::AvgPool => w.u8(2),
            DiscStage::Flatten => w.u8(3),
        }
        match &disc.params[i] {
            Some((wt, bt)) => {
                w.u8(1);
                w.tensor("w", wt);
                w.tensor("b", bt);
                match &disc.sn_state[i] {
                    Some(u) => {
                        w.u8(1);
                        w.u32(u.len() as u32);
                        w.f32s(u);
                    }
                    None => w.u8(0),
                }
            }
            None => w.u8(0),
        }
    }
    w.u8(disc.spectral_norm as u8);
    w.dims(&disc.input_shape);
}

fn read_discriminator(r: &mut Reader) -> Result<Discriminator<f32>> {
    let n_stages = r.u32()? as usize;
    let mut stages = Vec::with_capacity(n_stages);
    let mut params = Vec::with_capacity(n_stages);
    let mut sn_state = Vec::with_capacity(n_stages);
    for _ in 0..n_stages {
        let stage = match r.u8()? {
            0 => DiscStage::Dense {
                input: r.u32()? as usize,
                output: r.u32()? as usize,
            },
            1 => DiscStage::Conv {
                in_ch: r.u32()? as usize,
                out_ch: r.u32()? as usize,
                kernel: r.u32()? as usize,
            },
            2 => DiscStage::AvgPool,
            3 => DiscStage::Flatten,
            other => return Err(Error::Format(format!("unknown critic stage tag {other}"))),
        };
        stages.push(stage);
        if r.u8()? != 0 {
            let (_, wt) = r.tensor()?;
            let (_, bt) = r.tensor()?;
            params.push(Some((wt, bt)));
            if r.u8()? != 0 {
                let n = r.u32()? as usize;
                sn_state.push(Some(r.f32s(n)?));
            } else {
                sn_state.push(None);
            }
        } else {
            params.push(None);
            sn_state.push(None);
        }
    }
    let spectral_norm = r.u8()? != 0;
    let input_shape = r.dims()?;
    Ok(Discriminator {
        stages,
        params,
        sn_state,
        spectral_norm,
        input_shape,
    })
}

fn write_adam(w: &mut Writer, adam: &Adam<f32>) {
    w.f64(adam.lr);
    w.f64(adam.beta1);
    w.f64(adam.beta2);
    w.f64(adam.eps);
    w.u64(adam.t);
    w.u32(adam.slots.len() as u32);
    for (name, (m, v)) in &adam.slots {
        w.name(name);
        w.u32(m.len() as u32);
        w.f32s(m);
        w.f32s(v);
    }
}

fn read_adam(r: &mut Reader) -> Result<Adam<f32>> {
    let lr = r.f64()?;
    let beta1 = r.f64()?;
    let beta2 = r.f64()?;
    let eps = r.f64()?;
    let t = r.u64()?;
    let n = r.u32()? as usize;
    let mut slots = std::collections::BTreeMap::new();
    for _ in 0..n {
        let name = r.name()?;
        let len = r.u32()? as usize;
        let m = r.f32s(len)?;
        let v = r.f32s(len)?;
        slots.insert(name, (m, v));
    }
    Ok(Adam {
        lr,
        beta1,
        beta2,
        eps,
        t,
        slots,
    })
}

// ── public surface ──────────────────────────────────────────────────

pub fn encode_gan(bundle: &GanBundle) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u8(KIND_GAN);
    write_generator(&mut w, &bundle.generator);
    match &bundle.discriminator {
        Some(d) => {
            w.u8(1);
            write_discriminator(&mut w, d);
        }
        None => w.u8(0),
    }
    match &bundle.optimizers {
        Some((g, d)) => {
            w.u8(1);
            write_adam(&mut w, g);
            write_adam(&mut w, d);
        }
        None => w.u8(0),
    }
    w.u64(bundle.seed);
    match &bundle.rng_state {
        Some(rs) => {
            w.u8(1);
            w.bytes(&rs.seed);
            w.u128(rs.word_pos);
        }
        None => w.u8(0),
    }
    w.u64(bundle.steps_done);
    w.buf
}

fn read_header(r: &mut Reader) -> Result<u8> {
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:02x?}, expected {MAGIC:02x?}",
            magic
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    r.u8()
}

pub fn decode_gan(bytes: &[u8]) -> Result<GanBundle> {
    let mut r = Reader::new(bytes);
    let kind = read_header(&mut r)?;
    if kind != KIND_GAN {
        return Err(Error::Format(format!(
            "checkpoint holds kind {kind}, expected a generator bundle"
        )));
    }
    let generator = read_generator(&mut r)?;
    let discriminator = if r.u8()? != 0 {
        Some(read_discriminator(&mut r)?)
    } else {
        None
    };
    let optimizers = if r.u8()? != 0 {
        Some((read_adam(&mut r)?, read_adam(&mut r)?))
    } else {
        None
    };
    let seed = r.u64()?;
    let rng_state = if r.u8()? != 0 {
        let seed_bytes: [u8; 32] = r.take(32)?.try_into().unwrap();
        Some(RngState {
            seed: seed_bytes,
            word_pos: r.u128()?,
        })
    } else {
        None
    };
    let steps_done = r.u64()?;
    r.done()?;
    Ok(GanBundle {
        generator,
        discriminator,
        optimizers,
        seed,
        rng_state,
        steps_done,
    })
}

pub fn save_checkpoint(bundle: &GanBundle, path: impl AsRef<Path>) -> Result<()> {
    crate::data::atomic_write(path.as_ref(), &encode_gan(bundle))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<GanBundle> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_gan(&bytes)
}

pub fn encode_inverter(inv: &Inverter<f32>) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u8(KIND_INVERTER);
    w.u32(inv.classifiers.len() as u32);
    for c in &inv.classifiers {
        w.u32(c.classes as u32);
        match &c.net {
            Some(net) => {
                w.u8(1);
                write_discriminator(&mut w, net);
            }
            None => w.u8(0),
        }
    }
    w.buf
}

pub fn decode_inverter(bytes: &[u8]) -> Result<Inverter<f32>> {
    let mut r = Reader::new(bytes);
    let kind = read_header(&mut r)?;
    if kind != KIND_INVERTER {
        return Err(Error::Format(format!(
            "checkpoint holds kind {kind}, expected an inverter"
        )));
    }
    let n = r.u32()? as usize;
    let mut classifiers = Vec::with_capacity(n);
    for _ in 0..n {
        let classes = r.u32()? as usize;
        let net = if r.u8()? != 0 {
            Some(read_discriminator(&mut r)?)
        } else {
            None
        };
        classifiers.push(Classifier { net, classes });
    }
    r.done()?;
    Ok(Inverter { classifiers })
}

pub fn save_inverter(inv: &Inverter<f32>, path: impl AsRef<Path>) -> Result<()> {
    crate::data::atomic_write(path.as_ref(), &encode_inverter(inv))
}

pub fn load_inverter(path: impl AsRef<Path>) -> Result<Inverter<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_inverter(&bytes)
}

/// Replays `routes` through both generators and reports the first mismatch.
pub fn verify_replay(a: &Generator<f32>, b: &Generator<f32>, routes: &[Route]) -> Result<()> {
    for route in routes {
        let xa = a.forward(route)?;
        let xb = b.forward(route)?;
        if xa.data() != xb.data() {
            return Err(Error::Verification(format!(
                "outputs diverge on route {route}"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Activation;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bundle(seed: u64) -> GanBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let buckets = vec![
            Bucket::init(
                LayerKind::Dense {
                    input: 3,
                    output: 8,
                    bias: true,
                    activation: Activation::Relu,
                },
                2,
                &mut rng,
            ),
            Bucket::init(
                LayerKind::Dense {
                    input: 8,
                    output: 4,
                    bias: true,
                    activation: Activation::None,
                },
                3,
                &mut rng,
            ),
        ];
        let generator = Generator {
            buckets,
            z: Tensor::randn(vec![3], 0.0, 1.0, &mut rng),
            nonlinear: true,
            stem_shape: None,
            output_activation: Activation::Tanh,
            output_shape: Some(vec![1, 2, 2]),
        };
        let discriminator = Discriminator::mlp(4, &[8], 1, true, &mut rng);
        GanBundle {
            generator,
            discriminator: Some(discriminator),
            optimizers: None,
            seed,
            rng_state: Some(RngState {
                seed: [7; 32],
                word_pos: 123456,
            }),
            steps_done: 42,
        }
    }

    #[test]
    fn double_round_trip_is_byte_identical() {
        let b = bundle(1);
        let bytes1 = encode_gan(&b);
        let decoded = decode_gan(&bytes1).unwrap();
        let bytes2 = encode_gan(&decoded);
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn corrupted_magic_and_version_rejected() {
        let b = bundle(2);
        let mut bytes = encode_gan(&b);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_gan(&bad), Err(Error::Format(_))));
        bytes[4] = 99; // version low byte
        assert!(matches!(decode_gan(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_rejected_everywhere() {
        let b = bundle(3);
        let bytes = encode_gan(&b);
        for cut in [3, 8, 9, 20, bytes.len() - 1] {
            assert!(decode_gan(&bytes[..cut]).is_err(), "cut {cut}");
        }
        // trailing garbage also rejected
        let mut extended = bytes.clone();
        extended.push(0);
        assert!(decode_gan(&extended).is_err());
    }

    #[test]
    fn loaded_generator_replays_routes_bit_identically() {
        let b = bundle(4);
        let bytes = encode_gan(&b);
        let loaded = decode_gan(&bytes).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let routes: Vec<Route> = (0..20)
            .map(|_| b.generator.sample_route(&mut rng))
            .collect();
        verify_replay(&b.generator, &loaded.generator, &routes).unwrap();
    }

    #[test]
    fn optimizer_state_round_trips() {
        let mut b = bundle(6);
        let cfg = crate::train::TrainConfig::default();
        let mut g: Adam<f32> = Adam::new(&cfg);
        let mut p = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        p.accumulate_grad(&[0.5, -0.5]);
        g.begin_step();
        g.update("w", &mut p, true);
        let d: Adam<f32> = Adam::new(&cfg);
        b.optimizers = Some((g.clone(), d));
        let decoded = decode_gan(&encode_gan(&b)).unwrap();
        let (g2, _) = decoded.optimizers.unwrap();
        assert_eq!(g2.t, 1);
        assert_eq!(g2.slots["w"], g.slots["w"]);
    }
}
