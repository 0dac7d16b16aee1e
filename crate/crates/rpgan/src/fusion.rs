//! Nonlinearity-free dense generators and fusion of consecutive dense
//! buckets into single matrix-product buckets, with an equivalence check and
//! a wall-clock/FLOP benchmark.

use crate::data::atomic_write;
use crate::error::{Error, Result};
use crate::generator::{Bucket, Generator, Route};
use crate::kernels;
use crate::layers::{Activation, Instance, LayerKind};
use crate::tensor::{Real, Tensor};
use rand::Rng;
use std::collections::HashSet;
use std::path::Path;
use std::time::Instant;

/// Which buckets to fuse and which instance tuples populate the new bucket.
#[derive(Debug, Clone)]
pub struct FusionPlan {
    /// Inclusive source range.
    pub first: usize,
    pub last: usize,
    /// Instance index tuples `(i_first, ..., i_last)`; one fused instance per
    /// tuple.
    pub selection: Vec<Vec<usize>>,
}

/// Dense-only generator with identity internal activations and a final tanh.
/// `shapes` lists the feature widths from the input onward, so `m` has one
/// entry fewer. A flat output whose width is a perfect square is viewed as a
/// single-channel square image.
pub fn build_linear_generator<T: Real>(
    shapes: &[usize],
    m: &[usize],
    rng: &mut impl Rng,
) -> Result<Generator<T>> {
    if shapes.len() < 2 || m.len() + 1 != shapes.len() {
        return Err(Error::Config(format!(
            "need one instance count per layer: got {} shapes and {} counts",
            shapes.len(),
            m.len()
        )));
    }
    if m.contains(&0) {
        return Err(Error::Config("instance counts must be >= 1".into()));
    }
    let mut buckets = Vec::with_capacity(m.len());
    for (i, &count) in m.iter().enumerate() {
        let kind = LayerKind::Dense {
            input: shapes[i],
            output: shapes[i + 1],
            bias: true,
            activation: Activation::None,
        };
        buckets.push(Bucket::init(kind, count, rng));
    }
    let out = *shapes.last().expect("non-empty shapes");
    let side = (out as f64).sqrt().round() as usize;
    let output_shape = if side * side == out {
        Some(vec![1, side, side])
    } else {
        None
    };
    let gen = Generator {
        buckets,
        z: Tensor::randn(vec![shapes[0]], 0.0, 1.0, rng),
        nonlinear: false,
        stem_shape: None,
        output_activation: Activation::Tanh,
        output_shape,
    };
    gen.validate()?;
    Ok(gen)
}

/// Uniform distinct instance tuples over the source range.
pub fn plan_random(
    gen: &Generator<impl Real>,
    first: usize,
    last: usize,
    count: usize,
    rng: &mut impl Rng,
) -> Result<FusionPlan> {
    check_range(gen, first, last)?;
    let sizes: Vec<usize> = (first..=last).map(|i| gen.buckets[i].len()).collect();
    let total: u128 = sizes.iter().map(|&s| s as u128).product();
    if (count as u128) > total {
        return Err(Error::Config(format!(
            "cannot draw {count} distinct tuples from {total} combinations"
        )));
    }
    let mut seen = HashSet::with_capacity(count);
    let mut selection = Vec::with_capacity(count);
    while selection.len() < count {
        let tuple: Vec<usize> = sizes.iter().map(|&s| rng.random_range(0..s)).collect();
        if seen.insert(tuple.clone()) {
            selection.push(tuple);
        }
    }
    Ok(FusionPlan {
        first,
        last,
        selection,
    })
}

fn check_range(gen: &Generator<impl Real>, first: usize, last: usize) -> Result<()> {
    if first > last || last >= gen.buckets.len() {
        return Err(Error::Config(format!(
            "bad fusion range {first}..{last} for {} buckets",
            gen.buckets.len()
        )));
    }
    for i in first..=last {
        match gen.buckets[i].kind {
            LayerKind::Dense { activation, .. } => {
                if gen.nonlinear && activation != Activation::None {
                    return Err(Error::Config(format!(
                        "bucket {i} applies a nonlinearity inside the fusion range"
                    )));
                }
            }
            _ => {
                return Err(Error::Config(format!(
                    "bucket {i} is not fully-connected; only dense buckets fuse"
                )));
            }
        }
    }
    if first == 0 && gen.stem_shape.is_some() && last != 0 {
        return Err(Error::Config(
            "fusion range crosses the stem reshape".into(),
        ));
    }
    Ok(())
}

/// Replaces the source range by one dense bucket whose instance `t` is the
/// exact affine composition of the tuple `plan.selection[t]`. A single-bucket
/// identity selection copies instances verbatim.
pub fn fuse_buckets<T: Real>(gen: &Generator<T>, plan: &FusionPlan) -> Result<Generator<T>> {
    check_range(gen, plan.first, plan.last)?;
    if plan.selection.is_empty() {
        return Err(Error::Config("fusion plan selects no tuples".into()));
    }
    let width = plan.last - plan.first + 1;
    let dims: Vec<(usize, usize, bool)> = (plan.first..=plan.last)
        .map(|i| match gen.buckets[i].kind {
            LayerKind::Dense {
                input,
                output,
                bias,
                ..
            } => (input, output, bias),
            _ => unreachable!("range checked dense"),
        })
        .collect();
    for w in dims.windows(2) {
        if w[0].1 != w[1].0 {
            return Err(Error::Config(format!(
                "dense chain mismatch inside fusion range: {} -> {}",
                w[0].1, w[1].0
            )));
        }
    }
    let in_dim = dims[0].0;
    let out_dim = dims[dims.len() - 1].1;
    let any_bias = dims.iter().any(|d| d.2);

    let mut fused_instances = Vec::with_capacity(plan.selection.len());
    for tuple in &plan.selection {
        if tuple.len() != width {
            return Err(Error::Config(format!(
                "selection tuple {tuple:?} does not span {width} buckets"
            )));
        }
        for (k, &idx) in tuple.iter().enumerate() {
            let bucket = plan.first + k;
            let len = gen.buckets[bucket].len();
            if idx >= len {
                return Err(Error::RouteBounds {
                    bucket,
                    index: idx,
                    len,
                });
            }
        }
        // fold the affine chain bottom-up; starting from a verbatim copy
        // keeps single-bucket selections bit-exact
        let first_inst = &gen.buckets[plan.first].instances[tuple[0]];
        let mut w = first_inst.param("w").expect("dense has w").data().to_vec();
        let mut w_rows = dims[0].1;
        let w_cols = dims[0].0;
        let mut bias = match first_inst.param("b") {
            Some(b) => b.data().to_vec(),
            None => vec![T::zero(); w_rows],
        };
        for (k, &idx) in tuple.iter().enumerate().skip(1) {
            let inst = &gen.buckets[plan.first + k].instances[idx];
            let wk = inst.param("w").expect("dense has w");
            let rows_k = dims[k].1;
            // w <- wk (rows_k x w_rows) @ w (w_rows x w_cols)
            let mut next = vec![T::zero(); rows_k * w_cols];
            kernels::matmul(
                wk.data(),
                &w,
                &mut next,
                rows_k,
                w_rows,
                w_cols,
                false,
                false,
                false,
            );
            // bias <- wk @ bias (+ bk)
            let mut next_bias = vec![T::zero(); rows_k];
            kernels::matmul(
                wk.data(),
                &bias,
                &mut next_bias,
                rows_k,
                w_rows,
                1,
                false,
                false,
                false,
            );
            if let Some(bk) = inst.param("b") {
                for (nb, add) in next_bias.iter_mut().zip(bk.data()) {
                    *nb += *add;
                }
            }
            w = next;
            w_rows = rows_k;
            bias = next_bias;
        }
        let mut params = vec![("w".to_string(), Tensor::new(vec![out_dim, in_dim], w)?)];
        if any_bias {
            params.push(("b".into(), Tensor::new(vec![out_dim], bias)?));
        }
        fused_instances.push(Instance {
            params,
            trainable: true,
        });
    }

    let fused_bucket = Bucket {
        kind: LayerKind::Dense {
            input: in_dim,
            output: out_dim,
            bias: any_bias,
            activation: Activation::None,
        },
        instances: fused_instances,
    };
    let mut buckets = Vec::with_capacity(gen.buckets.len() - width + 1);
    buckets.extend(gen.buckets[..plan.first].iter().cloned());
    buckets.push(fused_bucket);
    buckets.extend(gen.buckets[plan.last + 1..].iter().cloned());
    let fused = Generator {
        buckets,
        z: gen.z.clone(),
        nonlinear: gen.nonlinear,
        stem_shape: gen.stem_shape.clone(),
        output_activation: gen.output_activation,
        output_shape: gen.output_shape.clone(),
    };
    fused.validate()?;
    Ok(fused)
}

/// Compares fused routes against the original compositions they stand for.
/// Returns the largest absolute output difference over `trials` random
/// (tuple, outer-route) draws.
pub fn verify_fusion<T: Real>(
    gen: &Generator<T>,
    fused: &Generator<T>,
    plan: &FusionPlan,
    trials: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let t = rng.random_range(0..plan.selection.len());
        let outer = gen.sample_route(rng);
        let mut fused_route = Vec::new();
        fused_route.extend_from_slice(&outer.0[..plan.first]);
        fused_route.push(t);
        fused_route.extend_from_slice(&outer.0[plan.last + 1..]);
        let mut original_route = outer.0.clone();
        original_route[plan.first..=plan.last].copy_from_slice(&plan.selection[t]);

        let a = fused.forward(&Route(fused_route))?;
        let b = gen.forward(&Route(original_route))?;
        worst = worst.max(a.max_abs_diff(&b)?);
    }
    Ok(worst)
}

/// Multiply-add count of the dense chain in `[first, last]` for one sample.
pub fn dense_range_flops(gen: &Generator<impl Real>, first: usize, last: usize) -> Result<u64> {
    check_range(gen, first, last)?;
    let mut total = 0u64;
    for i in first..=last {
        if let LayerKind::Dense { input, output, .. } = gen.buckets[i].kind {
            total += (input * output) as u64;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub batch: usize,
    pub reps: usize,
    pub composed_ns_per_image: f64,
    pub fused_ns_per_image: f64,
    pub speedup: f64,
    pub composed_range_flops: u64,
    pub fused_range_flops: u64,
    pub flop_ratio: f64,
}

impl BenchReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::from("variant,batch,ns_per_image,flops,speedup\n");
        out.push_str(&format!(
            "composed,{},{:.0},{},1.0\n",
            self.batch, self.composed_ns_per_image, self.composed_range_flops
        ));
        out.push_str(&format!(
            "fused,{},{:.0},{},{}\n",
            self.batch, self.fused_ns_per_image, self.fused_range_flops, self.speedup
        ));
        atomic_write(path.as_ref(), out.as_bytes())
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    xs[xs.len() / 2]
}

/// Wall-clock comparison of the two generators plus exact multiply-add
/// counts over the fused range. Timings are medians over `reps` batches
/// after one warm-up batch per variant; callers verify equivalence first.
pub fn benchmark_fusion<T: Real>(
    gen: &Generator<T>,
    fused: &Generator<T>,
    plan: &FusionPlan,
    batch: usize,
    reps: usize,
    rng: &mut impl Rng,
) -> Result<BenchReport> {
    if batch == 0 || reps == 0 {
        return Err(Error::Contract("benchmark needs batch, reps >= 1".into()));
    }
    fn time_one<T: Real>(
        g: &Generator<T>,
        batch: usize,
        reps: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>> {
        let mut samples = Vec::with_capacity(reps);
        g.batch_forward(batch, rng)?; // warm-up
        for _ in 0..reps {
            let start = Instant::now();
            g.batch_forward(batch, rng)?;
            samples.push(start.elapsed().as_nanos() as f64 / batch as f64);
        }
        Ok(samples)
    }
    let composed_ns = median(time_one(gen, batch, reps, rng)?);
    let fused_ns = median(time_one(fused, batch, reps, rng)?);
    let composed_range_flops = dense_range_flops(gen, plan.first, plan.last)?;
    let fused_range_flops = dense_range_flops(fused, plan.first, plan.first)?;
    Ok(BenchReport {
        batch,
        reps,
        composed_ns_per_image: composed_ns,
        fused_ns_per_image: fused_ns,
        speedup: composed_ns / fused_ns,
        composed_range_flops,
        fused_range_flops,
        flop_ratio: composed_range_flops as f64 / fused_range_flops as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_gen(shapes: &[usize], m: &[usize], seed: u64) -> Generator<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        build_linear_generator(shapes, m, &mut rng).unwrap()
    }

    #[test]
    fn shape_chain_is_validated() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(build_linear_generator::<f64>(&[4, 8, 3], &[2], &mut rng).is_err());
        assert!(build_linear_generator::<f64>(&[4, 8, 3], &[2, 2], &mut rng).is_ok());
    }

    #[test]
    fn pre_tanh_output_is_linear_in_z() {
        let mut gen = linear_gen(&[6, 5, 4], &[3, 2], 1);
        gen.output_activation = Activation::None;
        let route = Route(vec![1, 0]);
        let base = gen.forward(&route).unwrap();
        let mut scaled_gen = gen.clone();
        // pre-tanh map is linear only when biases vanish
        for b in &mut scaled_gen.buckets {
            for inst in &mut b.instances {
                for (name, t) in &mut inst.params {
                    if name == "b" {
                        for v in t.data_mut() {
                            *v = 0.0;
                        }
                    }
                }
            }
        }
        let unscaled = scaled_gen.forward(&route).unwrap();
        for v in scaled_gen.z.data_mut() {
            *v *= 3.0;
        }
        let scaled = scaled_gen.forward(&route).unwrap();
        for (s, u) in scaled.data().iter().zip(unscaled.data()) {
            assert!((s - 3.0 * u).abs() < 1e-5 * u.abs().max(1.0));
        }
        drop(base);
    }

    #[test]
    fn two_by_two_product_is_exact() {
        // W2 * W1 must equal the fused matrix exactly
        let gen = linear_gen(&[2, 2, 2], &[1, 1], 2);
        let plan = FusionPlan {
            first: 0,
            last: 1,
            selection: vec![vec![0, 0]],
        };
        let fused = fuse_buckets(&gen, &plan).unwrap();
        let w1 = gen.buckets[0].instances[0].param("w").unwrap().data();
        let w2 = gen.buckets[1].instances[0].param("w").unwrap().data();
        let mut expect = vec![0.0; 4];
        kernels::matmul(w2, w1, &mut expect, 2, 2, 2, false, false, false);
        assert_eq!(
            fused.buckets[0].instances[0].param("w").unwrap().data(),
            &expect[..]
        );
    }

    #[test]
    fn single_bucket_identity_fusion_is_bit_exact() {
        let gen = linear_gen(&[5, 7, 3], &[4, 2], 3);
        let plan = FusionPlan {
            first: 0,
            last: 0,
            selection: (0..4).map(|i| vec![i]).collect(),
        };
        let fused = fuse_buckets(&gen, &plan).unwrap();
        for route in [Route(vec![0, 0]), Route(vec![3, 1]), Route(vec![2, 0])] {
            let a = gen.forward(&route).unwrap();
            let b = fused.forward(&route).unwrap();
            assert_eq!(a.data(), b.data(), "route {route}");
        }
    }

    #[test]
    fn nonlinear_bucket_inside_range_is_refused() {
        let mut gen = linear_gen(&[4, 4, 4], &[2, 2], 4);
        gen.nonlinear = true;
        gen.buckets[1].kind = LayerKind::Dense {
            input: 4,
            output: 4,
            bias: true,
            activation: Activation::Relu,
        };
        let err = check_range(&gen, 0, 1).unwrap_err();
        assert!(err.to_string().contains("bucket 1"));
    }

    #[test]
    fn fused_latent_cardinality_accounts_for_selection() {
        let gen = linear_gen(&[3, 4, 5, 6], &[4, 4, 2], 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let plan = plan_random(&gen, 0, 1, 5, &mut rng).unwrap();
        let fused = fuse_buckets(&gen, &plan).unwrap();
        // 5 tuples kept of 16, times the untouched bucket of 2
        assert_eq!(fused.latent_cardinality(), 10u32.into());
        assert!(fused.latent_cardinality() < gen.latent_cardinality());
    }

    #[test]
    fn flop_counts_match_closed_form() {
        let gen = linear_gen(&[128, 128, 256, 512, 1024, 784], &[2, 2, 2, 2, 2], 7);
        // buckets 2..4 in zero-based terms: 256x512 + 512x1024 + 1024x784
        assert_eq!(dense_range_flops(&gen, 2, 4).unwrap(), 1_458_176);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let plan = plan_random(&gen, 2, 4, 3, &mut rng).unwrap();
        let fused = fuse_buckets(&gen, &plan).unwrap();
        assert_eq!(dense_range_flops(&fused, 2, 2).unwrap(), 200_704);
    }

    #[test]
    fn random_tuples_compose_exactly() {
        let gen = linear_gen(&[6, 8, 10, 4], &[3, 3, 3], 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let plan = plan_random(&gen, 0, 2, 10, &mut rng).unwrap();
        let fused = fuse_buckets(&gen, &plan).unwrap();
        let worst = verify_fusion(&gen, &fused, &plan, 50, &mut rng).unwrap();
        assert!(worst <= 1e-10, "max abs diff {worst}");
    }
}
