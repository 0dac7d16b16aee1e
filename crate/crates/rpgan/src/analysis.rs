//! Per-bucket responsibility analysis: generate images that vary only one
//! bucket, compare them under color/feature metrics, and summarize each
//! bucket's diversity relative to the first.

use crate::data::atomic_write;
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::{Generator, Route};
use crate::tensor::{Real, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::Path;

pub const COLOR_BINS: usize = 25;

/// Freezing scheme: hold `base_route` fixed everywhere except `vary_bucket`.
#[derive(Debug, Clone)]
pub struct FrozenRouteSpec {
    pub base_route: Route,
    pub vary_bucket: usize,
    /// Optional restriction of the varied indices (for qualitative grids).
    pub instance_subset: Option<Vec<usize>>,
}

/// Generates `k` images whose routes differ from the base only at the varied
/// bucket, sampling indices without replacement. Returns images with the
/// routes that produced them.
pub fn freeze_and_vary<T: Real>(
    gen: &Generator<T>,
    spec: &FrozenRouteSpec,
    k: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<Tensor<T>>, Vec<Route>)> {
    gen.check_route(&spec.base_route)?;
    let l = spec.vary_bucket;
    if l >= gen.buckets.len() {
        return Err(Error::Contract(format!(
            "vary_bucket {l} out of range for {} buckets",
            gen.buckets.len()
        )));
    }
    let mut pool: Vec<usize> = match &spec.instance_subset {
        Some(subset) => {
            for &i in subset {
                if i >= gen.buckets[l].len() {
                    return Err(Error::RouteBounds {
                        bucket: l,
                        index: i,
                        len: gen.buckets[l].len(),
                    });
                }
            }
            subset.clone()
        }
        None => (0..gen.buckets[l].len()).collect(),
    };
    if k > pool.len() {
        return Err(Error::Contract(format!(
            "cannot draw {k} distinct instances from {} available in bucket {l}",
            pool.len()
        )));
    }
    pool.shuffle(rng);
    pool.truncate(k);
    let mut images = Vec::with_capacity(k);
    let mut routes = Vec::with_capacity(k);
    for idx in pool {
        let mut route = spec.base_route.clone();
        route.0[l] = idx;
        images.push(gen.forward(&route)?);
        routes.push(route);
    }
    Ok((images, routes))
}

// ── metrics ─────────────────────────────────────────────────────────

/// Hellinger distance between two discrete distributions.
pub fn hellinger_hist(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let sum: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| (a.sqrt() - b.sqrt()).powi(2))
        .sum();
    (sum.sqrt()) / std::f64::consts::SQRT_2
}

/// 25-bin per-channel intensity histogram of a `[C, H, W]` image in [-1, 1].
/// Values map onto [0, 255] with flooring; 255 lands in the last bin.
pub fn color_histograms<T: Real>(img: &Tensor<T>) -> Result<Vec<[f64; COLOR_BINS]>> {
    let shape = img.shape();
    if shape.len() != 3 || shape[1] * shape[2] == 0 {
        return Err(Error::Contract(format!(
            "color histogram expects non-empty [C, H, W] images, got {shape:?}"
        )));
    }
    let (ch, pixels) = (shape[0], shape[1] * shape[2]);
    let mut hists = vec![[0.0f64; COLOR_BINS]; ch];
    for c in 0..ch {
        for i in 0..pixels {
            let v = img.data()[c * pixels + i].as_f64();
            let byte = (((v + 1.0) * 127.5).floor()).clamp(0.0, 255.0) as usize;
            let bin = (byte * COLOR_BINS) / 256;
            hists[c][bin] += 1.0;
        }
        for b in hists[c].iter_mut() {
            *b /= pixels as f64;
        }
    }
    Ok(hists)
}

/// Per-channel Hellinger distance between the color histograms of two
/// same-shaped images.
pub fn hellinger_color_distance<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<f64>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "hellinger_color_distance",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let ha = color_histograms(a)?;
    let hb = color_histograms(b)?;
    Ok(ha
        .iter()
        .zip(&hb)
        .map(|(p, q)| hellinger_hist(p, q))
        .collect())
}

/// Feature-space proxy distance: one minus the cosine similarity of the
/// critic's penultimate-layer activations. Symmetric, zero on identical
/// inputs, bounded by [0, 2].
pub fn semantic_distance<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    disc: &Discriminator<T>,
) -> Result<f64> {
    if a.shape() == b.shape() && a.data() == b.data() {
        return Ok(0.0);
    }
    let fa = disc.features(a)?;
    let fb = disc.features(b)?;
    let dot: f64 = fa
        .data()
        .iter()
        .zip(fb.data())
        .map(|(&x, &y)| x.as_f64() * y.as_f64())
        .sum();
    let na: f64 = fa
        .data()
        .iter()
        .map(|&x| x.as_f64().powi(2))
        .sum::<f64>()
        .sqrt();
    let nb: f64 = fb
        .data()
        .iter()
        .map(|&x| x.as_f64().powi(2))
        .sum::<f64>()
        .sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return Ok(0.0);
    }
    Ok((1.0 - dot / (na * nb)).clamp(0.0, 2.0))
}

/// Distance used when comparing varied images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageMetric {
    /// Mean per-channel Hellinger distance of 25-bin intensity histograms.
    Color,
    /// Critic-feature cosine distance (needs a trained critic).
    Semantic,
    /// Plain mean absolute pixel difference.
    Pixel,
}

impl ImageMetric {
    pub fn name(self) -> &'static str {
        match self {
            ImageMetric::Color => "color",
            ImageMetric::Semantic => "semantic",
            ImageMetric::Pixel => "pixel",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "color" => Ok(ImageMetric::Color),
            "semantic" => Ok(ImageMetric::Semantic),
            "pixel" => Ok(ImageMetric::Pixel),
            other => Err(Error::Config(format!("unknown metric '{other}'"))),
        }
    }

    fn eval<T: Real>(
        self,
        a: &Tensor<T>,
        b: &Tensor<T>,
        disc: Option<&Discriminator<T>>,
    ) -> Result<f64> {
        match self {
            ImageMetric::Color => {
                let per_channel = hellinger_color_distance(a, b)?;
                Ok(per_channel.iter().sum::<f64>() / per_channel.len() as f64)
            }
            ImageMetric::Semantic => {
                let disc = disc.ok_or_else(|| {
                    Error::Contract(
                        "semantic metric needs a trained critic; use the pixel metric as a \
                         pixel-space fallback"
                            .into(),
                    )
                })?;
                semantic_distance(a, b, disc)
            }
            ImageMetric::Pixel => {
                if a.shape() != b.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "pixel_distance",
                        lhs: a.shape().to_vec(),
                        rhs: b.shape().to_vec(),
                    });
                }
                let n = a.numel() as f64;
                Ok(a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| (x.as_f64() - y.as_f64()).abs())
                    .sum::<f64>()
                    / n)
            }
        }
    }
}

/// Per-bucket mean and standard deviation of the diversity ratio.
#[derive(Debug, Clone)]
pub struct BucketRatio {
    pub bucket: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone)]
pub struct DiversityReport {
    pub metric: &'static str,
    pub ratios: Vec<BucketRatio>,
    pub routes_used: usize,
    pub routes_skipped: usize,
    pub images_per_bucket: usize,
}

impl DiversityReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::from("bucket,metric,mean_ratio,std_ratio\n");
        for r in &self.ratios {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.bucket + 1,
                self.metric,
                r.mean,
                r.std
            ));
        }
        out.push_str(&format!(
            "# routes_used={} routes_skipped={} images_per_bucket={}\n",
            self.routes_used, self.routes_skipped, self.images_per_bucket
        ));
        atomic_write(path.as_ref(), out.as_bytes())
    }
}

/// For each random base route and each bucket `l`, generates
/// `images_per_bucket` images varying only bucket `l` and forms the ratio of
/// their summed pairwise distances to the first bucket's. Ratios average
/// over routes; routes whose first-bucket diversity is zero are skipped, and
/// more than half skipped is an error.
pub fn diversity_ratio<T: Real>(
    gen: &Generator<T>,
    metric: ImageMetric,
    disc: Option<&Discriminator<T>>,
    routes: usize,
    images_per_bucket: usize,
    rng: &mut impl Rng,
) -> Result<DiversityReport> {
    gen.validate()?;
    if images_per_bucket < 2 {
        return Err(Error::Contract(
            "diversity ratio needs at least two images per bucket".into(),
        ));
    }
    for (l, b) in gen.buckets.iter().enumerate() {
        if b.len() < images_per_bucket {
            return Err(Error::Contract(format!(
                "bucket {l} has {} instances, fewer than images_per_bucket {images_per_bucket}",
                b.len()
            )));
        }
    }
    let n_buckets = gen.buckets.len();

    // sample all routes and per-bucket index draws up front so evaluation
    // order cannot affect the result
    let mut jobs = Vec::with_capacity(routes);
    for _ in 0..routes {
        let base = gen.sample_route(rng);
        let mut specs = Vec::with_capacity(n_buckets);
        for l in 0..n_buckets {
            let spec = FrozenRouteSpec {
                base_route: base.clone(),
                vary_bucket: l,
                instance_subset: None,
            };
            let seed: u64 = rng.random();
            specs.push((spec, seed));
        }
        jobs.push(specs);
    }

    let per_route: Vec<Result<Option<Vec<f64>>>> = jobs
        .par_iter()
        .map(|specs| {
            let mut sums = Vec::with_capacity(n_buckets);
            for (spec, seed) in specs {
                let mut local = ChaCha8Rng::seed_from_u64(*seed);
                let (images, _) = freeze_and_vary(gen, spec, images_per_bucket, &mut local)?;
                let mut total = 0.0;
                for i in 0..images.len() {
                    for j in 0..images.len() {
                        if i != j {
                            total += metric.eval(&images[i], &images[j], disc)?;
                        }
                    }
                }
                sums.push(total);
            }
            if sums[0] == 0.0 {
                return Ok(None);
            }
            Ok(Some(sums.iter().map(|s| s / sums[0]).collect()))
        })
        .collect();

    let mut used: Vec<Vec<f64>> = Vec::new();
    let mut skipped = 0usize;
    for r in per_route {
        match r? {
            Some(ratios) => used.push(ratios),
            None => skipped += 1,
        }
    }
    if skipped * 2 > routes {
        return Err(Error::Contract(format!(
            "{skipped} of {routes} routes had zero first-bucket diversity"
        )));
    }
    if used.is_empty() {
        return Err(Error::Contract("no usable routes".into()));
    }

    let ratios = (0..n_buckets)
        .map(|l| {
            let vals: Vec<f64> = used.iter().map(|r| r[l]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            BucketRatio {
                bucket: l,
                mean,
                std: var.sqrt(),
            }
        })
        .collect();
    Ok(DiversityReport {
        metric: metric.name(),
        ratios,
        routes_used: used.len(),
        routes_skipped: skipped,
        images_per_bucket,
    })
}

/// Exhaustive variant of [`diversity_ratio`]: every route is used as a base
/// and every bucket varies over all of its instances, so the result is a
/// deterministic function of the generator alone. Only viable for small
/// route spaces (capped at 4096 routes).
pub fn diversity_ratio_exhaustive<T: Real>(
    gen: &Generator<T>,
    metric: ImageMetric,
    disc: Option<&Discriminator<T>>,
) -> Result<DiversityReport> {
    gen.validate()?;
    let counts = gen.instance_counts();
    let total: usize = counts.iter().product();
    if total > 4096 {
        return Err(Error::Contract(format!(
            "{total} routes is too many for exhaustive evaluation"
        )));
    }
    let n_buckets = counts.len();
    let mut used: Vec<Vec<f64>> = Vec::new();
    let mut skipped = 0usize;
    let mut base = vec![0usize; n_buckets];
    'outer: loop {
        let mut sums = Vec::with_capacity(n_buckets);
        for l in 0..n_buckets {
            let mut images = Vec::with_capacity(counts[l]);
            for idx in 0..counts[l] {
                let mut route = Route(base.clone());
                route.0[l] = idx;
                images.push(gen.forward(&route)?);
            }
            let mut total = 0.0;
            for i in 0..images.len() {
                for j in 0..images.len() {
                    if i != j {
                        total += metric.eval(&images[i], &images[j], disc)?;
                    }
                }
            }
            sums.push(total);
        }
        if sums[0] == 0.0 {
            skipped += 1;
        } else {
            used.push(sums.iter().map(|s| s / sums[0]).collect());
        }
        // next route in mixed-radix order
        for d in (0..n_buckets).rev() {
            base[d] += 1;
            if base[d] < counts[d] {
                continue 'outer;
            }
            base[d] = 0;
        }
        break;
    }
    if skipped * 2 > total {
        return Err(Error::Contract(format!(
            "{skipped} of {total} routes had zero first-bucket diversity"
        )));
    }
    if used.is_empty() {
        return Err(Error::Contract("no usable routes".into()));
    }
    let ratios = (0..n_buckets)
        .map(|l| {
            let vals: Vec<f64> = used.iter().map(|r| r[l]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            BucketRatio {
                bucket: l,
                mean,
                std: var.sqrt(),
            }
        })
        .collect();
    Ok(DiversityReport {
        metric: metric.name(),
        ratios,
        routes_used: used.len(),
        routes_skipped: skipped,
        images_per_bucket: 0,
    })
}

/// Copy of a single-instance generator with Gaussian noise added to the
/// parameters of one bucket; the original is untouched.
pub fn noise_inject<T: Real>(
    gen: &Generator<T>,
    layer: usize,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<Generator<T>> {
    if sigma < 0.0 {
        return Err(Error::Contract(format!("negative noise level {sigma}")));
    }
    if gen.buckets.iter().any(|b| b.len() != 1) {
        return Err(Error::Contract(
            "noise injection applies to single-instance generators".into(),
        ));
    }
    if layer >= gen.buckets.len() {
        return Err(Error::Contract(format!(
            "layer {layer} out of range for {} buckets",
            gen.buckets.len()
        )));
    }
    let mut noisy = gen.clone();
    let normal = rand_distr::Normal::new(0.0, 1.0).expect("unit normal");
    for (_, t) in &mut noisy.buckets[layer].instances[0].params {
        for v in t.data_mut() {
            let drawn: f64 = rand_distr::Distribution::sample(&normal, rng);
            *v += T::from_f64(sigma * drawn);
        }
    }
    Ok(noisy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::Bucket;
    use crate::layers::{Activation, Instance, LayerKind};

    fn tiny_image_gen(weights: &[Vec<f64>]) -> Generator<f64> {
        // two buckets of bias-free dense maps from a 4-vector viewed as a
        // 1x2x2 image at the output
        let buckets = weights
            .iter()
            .map(|ws| Bucket {
                kind: LayerKind::Dense {
                    input: 4,
                    output: 4,
                    bias: false,
                    activation: Activation::None,
                },
                instances: ws
                    .iter()
                    .map(|&w| {
                        let mut data = vec![0.0; 16];
                        for d in 0..4 {
                            data[d * 4 + d] = w;
                        }
                        Instance {
                            params: vec![("w".into(), Tensor::new(vec![4, 4], data).unwrap())],
                            trainable: true,
                        }
                    })
                    .collect(),
            })
            .collect();
        Generator {
            buckets,
            z: Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
            nonlinear: true,
            stem_shape: None,
            output_activation: Activation::Tanh,
            output_shape: Some(vec![1, 2, 2]),
        }
    }

    #[test]
    fn hellinger_hand_values() {
        let mut p = [0.0; COLOR_BINS];
        let mut q = [0.0; COLOR_BINS];
        p[0] = 1.0;
        q[1] = 1.0;
        assert!((hellinger_hist(&p, &q) - 1.0).abs() < 1e-12);

        let mut p = [0.0; COLOR_BINS];
        let mut q = [0.0; COLOR_BINS];
        p[0] = 0.5;
        p[1] = 0.5;
        q[0] = 0.5;
        q[2] = 0.5;
        let expect = (0.5f64 + 0.5).sqrt() / std::f64::consts::SQRT_2;
        assert!((hellinger_hist(&p, &q) - expect).abs() < 1e-12);
        #[allow(clippy::approx_constant)]
        let stated = 0.7071;
        assert!((hellinger_hist(&p, &q) - stated).abs() < 1e-4);

        assert_eq!(hellinger_hist(&p, &p), 0.0);
    }

    #[test]
    fn identical_images_have_zero_color_distance() {
        let img = Tensor::new(vec![3, 2, 2], vec![0.3; 12]).unwrap();
        let d = hellinger_color_distance(&img, &img).unwrap();
        assert_eq!(d, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn disjoint_intensity_masses_have_unit_distance() {
        let a = Tensor::new(vec![1, 2, 2], vec![-1.0; 4]).unwrap();
        let b = Tensor::new(vec![1, 2, 2], vec![1.0; 4]).unwrap();
        let d = hellinger_color_distance(&a, &b).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn boundary_pixel_lands_in_last_bin() {
        let img = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        let h = color_histograms(&img).unwrap();
        assert_eq!(h[0][COLOR_BINS - 1], 1.0);
    }

    #[test]
    fn freeze_and_vary_changes_only_target_coordinate() {
        let gen = tiny_image_gen(&[vec![0.5, 0.6, 0.7, 0.8], vec![1.0, 1.1, 1.2]]);
        let spec = FrozenRouteSpec {
            base_route: Route(vec![1, 2]),
            vary_bucket: 0,
            instance_subset: None,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let (images, routes) = freeze_and_vary(&gen, &spec, 3, &mut rng).unwrap();
        assert_eq!(images.len(), 3);
        let mut seen = std::collections::HashSet::new();
        for r in &routes {
            assert_eq!(r.0[1], 2);
            assert!(seen.insert(r.0[0]), "sampling without replacement");
        }
        // k > m_l is a contract error
        assert!(freeze_and_vary(&gen, &spec, 5, &mut rng).is_err());
    }

    #[test]
    fn freeze_and_vary_honors_instance_subsets() {
        let gen = tiny_image_gen(&[vec![0.5, 0.6, 0.7, 0.8], vec![1.0, 1.1]]);
        let spec = FrozenRouteSpec {
            base_route: Route(vec![0, 1]),
            vary_bucket: 0,
            instance_subset: Some(vec![0, 2]),
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let (images, routes) = freeze_and_vary(&gen, &spec, 2, &mut rng).unwrap();
        assert_eq!(images.len(), 2);
        for r in &routes {
            assert!(r.0[0] == 0 || r.0[0] == 2);
        }
        // an out-of-range subset entry is a bounds error
        let bad = FrozenRouteSpec {
            instance_subset: Some(vec![9]),
            ..spec
        };
        assert!(freeze_and_vary(&gen, &bad, 1, &mut rng).is_err());
    }

    #[test]
    fn semantic_metric_without_critic_points_to_pixel_fallback() {
        let gen = tiny_image_gen(&[vec![0.5, 0.9], vec![1.0, 1.5]]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let err = diversity_ratio(&gen, ImageMetric::Semantic, None, 5, 2, &mut rng).unwrap_err();
        assert!(err.to_string().contains("pixel"), "{err}");
    }

    #[test]
    fn first_bucket_ratio_is_one() {
        let gen = tiny_image_gen(&[vec![0.5, 0.9], vec![1.0, 1.5, 0.7]]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let report = diversity_ratio(&gen, ImageMetric::Pixel, None, 20, 2, &mut rng).unwrap();
        assert!((report.ratios[0].mean - 1.0).abs() < 1e-12);
        assert_eq!(report.ratios[0].std, 0.0);
    }

    #[test]
    fn identical_instances_in_target_bucket_give_zero_ratio() {
        let gen = tiny_image_gen(&[vec![0.5, 0.9], vec![1.3, 1.3]]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let report = diversity_ratio(&gen, ImageMetric::Pixel, None, 10, 2, &mut rng).unwrap();
        assert_eq!(report.ratios[1].mean, 0.0);
    }

    #[test]
    fn degenerate_first_bucket_skips_routes_and_errors() {
        // identical first-bucket instances give zero reference diversity on
        // every route, so more than half skip and the call fails
        let gen = tiny_image_gen(&[vec![0.5, 0.5], vec![1.0, 1.5]]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let err = diversity_ratio(&gen, ImageMetric::Pixel, None, 10, 2, &mut rng).unwrap_err();
        assert!(err.to_string().contains("zero first-bucket diversity"));
    }

    #[test]
    fn noise_injection_isolates_one_layer() {
        let gen = tiny_image_gen(&[vec![0.5], vec![1.0]]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);

        let same = noise_inject(&gen, 0, 0.0, &mut rng).unwrap();
        assert_eq!(same.fingerprint(), gen.fingerprint());

        let noisy = noise_inject(&gen, 1, 0.1, &mut rng).unwrap();
        assert_eq!(
            noisy.buckets[0].instances[0].params[0].1.data(),
            gen.buckets[0].instances[0].params[0].1.data()
        );
        assert_ne!(
            noisy.buckets[1].instances[0].params[0].1.data(),
            gen.buckets[1].instances[0].params[0].1.data()
        );
        // original untouched
        assert_eq!(gen.buckets[1].instances[0].params[0].1.data()[0], 1.0);
    }
}
