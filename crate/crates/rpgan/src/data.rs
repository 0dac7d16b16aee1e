//! Dataset ingestion and image output: IDX containers, synthetic 2-D
//! mixtures, per-sample colorization, and PGM/PPM grid rendering.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::io::Write;
use std::path::Path;

/// Training data: `[N, ...]` samples in [-1, 1] plus optional byte labels.
#[derive(Debug, Clone)]
pub struct Dataset<T: Real> {
    pub samples: Tensor<T>,
    pub labels: Option<Vec<u8>>,
}

impl<T: Real> Dataset<T> {
    pub fn len(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.samples.shape()[1..]
    }

    /// Random batch with replacement.
    pub fn sample_batch(&self, n: usize, rng: &mut impl Rng) -> Result<Tensor<T>> {
        let len = self.len();
        let parts: Vec<Tensor<T>> = (0..n)
            .map(|_| self.samples.slice_sample(rng.random_range(0..len)))
            .collect::<Result<_>>()?;
        Tensor::stack(&parts)
    }

    /// Subset whose labels satisfy `keep`. Requires labels.
    pub fn filter_by_label(&self, keep: impl Fn(u8) -> bool) -> Result<Dataset<T>> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::Contract("filter_by_label on unlabeled dataset".into()))?;
        let mut parts = Vec::new();
        let mut kept = Vec::new();
        for (i, &l) in labels.iter().enumerate() {
            if keep(l) {
                parts.push(self.samples.slice_sample(i)?);
                kept.push(l);
            }
        }
        if parts.is_empty() {
            return Err(Error::Contract("label filter kept no samples".into()));
        }
        Ok(Dataset {
            samples: Tensor::stack(&parts)?,
            labels: Some(kept),
        })
    }
}

// ── synthetic mixtures ──────────────────────────────────────────────

/// Equally weighted Gaussian centers on a circle.
pub fn mixture_centers(modes: usize, radius: f64) -> Vec<[f64; 2]> {
    (0..modes)
        .map(|k| {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / modes as f64;
            [radius * theta.cos(), radius * theta.sin()]
        })
        .collect()
}

/// `n` points from the ring mixture, clamped into [-1, 1] to keep the
/// dataset range invariant; pick radius + 3 sigma well inside the box.
pub fn synth_mixture<T: Real>(
    modes: usize,
    radius: f64,
    sigma: f64,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Dataset<T>> {
    if modes == 0 || n == 0 {
        return Err(Error::Contract(
            "synth_mixture needs modes >= 1, n >= 1".into(),
        ));
    }
    let centers = mixture_centers(modes, radius);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = Vec::with_capacity(n * 2);
    for _ in 0..n {
        let c = centers[rng.random_range(0..modes)];
        for d in 0..2 {
            let v = c[d] + sigma * normal.sample(rng);
            data.push(T::from_f64(v.clamp(-1.0, 1.0)));
        }
    }
    Ok(Dataset {
        samples: Tensor::new(vec![n, 2], data)?,
        labels: None,
    })
}

// ── IDX containers ──────────────────────────────────────────────────

const IDX_DTYPE_U8: u8 = 0x08;

/// Parsed IDX payload: unsigned-byte data plus dimension sizes.
pub struct IdxPayload {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Byte-level IDX parser: `00 00 08 <ndims>` magic, big-endian u32 dims,
/// then exactly prod(dims) bytes.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxPayload> {
    if bytes.len() < 4 {
        return Err(Error::Format(format!(
            "IDX header truncated: {} bytes",
            bytes.len()
        )));
    }
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != IDX_DTYPE_U8 {
        return Err(Error::Format(format!(
            "bad IDX magic {:02x} {:02x} {:02x} {:02x}",
            bytes[0], bytes[1], bytes[2], bytes[3]
        )));
    }
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(Error::Format("IDX with zero dimensions".into()));
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::Format(format!(
            "IDX header truncated: expected {header} bytes, got {}",
            bytes.len()
        )));
    }
    let mut dims = Vec::with_capacity(ndims);
    for d in 0..ndims {
        let off = 4 + 4 * d;
        let size = u32::from_be_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
            as usize;
        dims.push(size);
    }
    let expected: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "IDX payload length {} does not match dims {:?} (expected {expected})",
            payload.len(),
            dims
        )));
    }
    Ok(IdxPayload {
        dims,
        data: payload.to_vec(),
    })
}

/// Loads an IDX image cube (`00 00 08 03`) as `[N, 1, H, W]` samples, pixels
/// affinely mapped onto [-1, 1] via x / 127.5 - 1.
pub fn load_idx<T: Real>(path: impl AsRef<Path>) -> Result<Dataset<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let payload = parse_idx(&bytes)?;
    if payload.dims.len() != 3 {
        return Err(Error::Format(format!(
            "expected 3-dimensional IDX image cube, got {} dims",
            payload.dims.len()
        )));
    }
    let (n, h, w) = (payload.dims[0], payload.dims[1], payload.dims[2]);
    let data: Vec<T> = payload
        .data
        .iter()
        .map(|&b| T::from_f64(b as f64 / 127.5 - 1.0))
        .collect();
    Ok(Dataset {
        samples: Tensor::new(vec![n, 1, h, w], data)?,
        labels: None,
    })
}

/// Loads an IDX label vector (`00 00 08 01`).
pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let payload = parse_idx(&bytes)?;
    if payload.dims.len() != 1 {
        return Err(Error::Format(format!(
            "expected 1-dimensional IDX label vector, got {} dims",
            payload.dims.len()
        )));
    }
    Ok(payload.data)
}

// ── colorization ────────────────────────────────────────────────────

/// Random tint with max channel exactly 1: one channel is pinned to 1
/// (chosen uniformly), the other two are uniform on [0, 1]. This makes the
/// tint hue uniform over the color wheel.
pub fn sample_tint(rng: &mut impl Rng) -> [f64; 3] {
    let pinned = rng.random_range(0..3usize);
    let mut tint = [0.0; 3];
    for (c, t) in tint.iter_mut().enumerate() {
        *t = if c == pinned {
            1.0
        } else {
            rng.random_range(0.0..1.0)
        };
    }
    tint
}

/// Hue in degrees [0, 360) of an RGB triple, for tint diagnostics.
pub fn tint_hue(rgb: [f64; 3]) -> f64 {
    let max = rgb[0].max(rgb[1]).max(rgb[2]);
    let min = rgb[0].min(rgb[1]).min(rgb[2]);
    let delta = max - min;
    if delta == 0.0 {
        return 0.0;
    }
    let h = if max == rgb[0] {
        (rgb[1] - rgb[2]) / delta % 6.0
    } else if max == rgb[1] {
        (rgb[2] - rgb[0]) / delta + 2.0
    } else {
        (rgb[0] - rgb[1]) / delta + 4.0
    };
    (h * 60.0).rem_euclid(360.0)
}

/// Multiplies a grayscale sample by a tint in [0, 1] value space: the gray
/// level is mapped to [0, 1], scaled per channel, and mapped back, so tint 0
/// yields the minimum value -1 and tint (1,1,1) reproduces the gray sample.
pub fn apply_tint<T: Real>(gray: &Tensor<T>, tint: [f64; 3]) -> Result<Tensor<T>> {
    let shape = gray.shape();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(Error::Contract(format!(
            "apply_tint expects [1, H, W] samples, got {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut data = Vec::with_capacity(3 * h * w);
    for t in tint {
        for v in gray.data() {
            let v01 = (v.as_f64() + 1.0) / 2.0;
            data.push(T::from_f64(2.0 * (v01 * t) - 1.0));
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Tints every grayscale sample with an independently sampled hue.
pub fn colorize<T: Real>(ds: &Dataset<T>, rng: &mut impl Rng) -> Result<Dataset<T>> {
    let shape = ds.sample_shape();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(Error::Contract(format!(
            "colorize expects [N, 1, H, W] datasets, got samples of {shape:?}"
        )));
    }
    let mut parts = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let gray = ds.samples.slice_sample(i)?;
        parts.push(apply_tint(&gray, sample_tint(rng))?);
    }
    Ok(Dataset {
        samples: Tensor::stack(&parts)?,
        labels: ds.labels.clone(),
    })
}

// ── image grids ─────────────────────────────────────────────────────

const GRID_GAP: usize = 2;

/// Renders same-shaped `[C, H, W]` images (C = 1 or 3) as one binary PGM/PPM
/// grid with 2-pixel black separators. Values clamp from [-1, 1] to [0, 255].
pub fn write_grid<T: Real>(
    images: &[Tensor<T>],
    cols: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = render_grid(images, cols)?;
    atomic_write(path, &bytes)
}

/// Grid bytes without touching the filesystem.
pub fn render_grid<T: Real>(images: &[Tensor<T>], cols: usize) -> Result<Vec<u8>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Contract("write_grid of zero images".into()))?;
    let shape = first.shape().to_vec();
    if shape.len() != 3 || (shape[0] != 1 && shape[0] != 3) {
        return Err(Error::Contract(format!(
            "write_grid expects [C, H, W] images with C of 1 or 3, got {shape:?}"
        )));
    }
    if cols == 0 {
        return Err(Error::Contract("write_grid needs cols >= 1".into()));
    }
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "write_grid",
                lhs: shape,
                rhs: img.shape().to_vec(),
            });
        }
    }
    let (ch, h, w) = (shape[0], shape[1], shape[2]);
    let rows = images.len().div_ceil(cols);
    let canvas_h = rows * h + GRID_GAP * (rows - 1);
    let canvas_w = cols * w + GRID_GAP * (cols - 1);
    let mut canvas = vec![0u8; ch * canvas_h * canvas_w];
    for (i, img) in images.iter().enumerate() {
        let (gy, gx) = (i / cols, i % cols);
        let oy = gy * (h + GRID_GAP);
        let ox = gx * (w + GRID_GAP);
        for c in 0..ch {
            for y in 0..h {
                for x in 0..w {
                    let v = img.data()[(c * h + y) * w + x].as_f64();
                    let byte = (((v + 1.0) / 2.0) * 255.0).round().clamp(0.0, 255.0) as u8;
                    canvas[(c * canvas_h + oy + y) * canvas_w + ox + x] = byte;
                }
            }
        }
    }
    let mut out = Vec::new();
    if ch == 1 {
        out.extend_from_slice(format!("P5\n{canvas_w} {canvas_h}\n255\n").as_bytes());
        out.extend_from_slice(&canvas);
    } else {
        out.extend_from_slice(format!("P6\n{canvas_w} {canvas_h}\n255\n").as_bytes());
        for y in 0..canvas_h {
            for x in 0..canvas_w {
                for c in 0..3 {
                    out.push(canvas[(c * canvas_h + y) * canvas_w + x]);
                }
            }
        }
    }
    Ok(out)
}

/// Write-temp-then-rename so partially written files never appear.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Synthetic IDX writer used as the byte-level oracle.
    pub(crate) fn build_idx(dims: &[usize], data: &[u8]) -> Vec<u8> {
        let mut bytes = vec![0, 0, IDX_DTYPE_U8, dims.len() as u8];
        for &d in dims {
            bytes.extend_from_slice(&(d as u32).to_be_bytes());
        }
        bytes.extend_from_slice(data);
        bytes
    }

    #[test]
    fn idx_header_hand_case() {
        // header 00 00 08 03, dims (2,3,3) + 18 bytes -> N=2 of 3x3
        let bytes = build_idx(&[2, 3, 3], &[7u8; 18]);
        let payload = parse_idx(&bytes).unwrap();
        assert_eq!(payload.dims, vec![2, 3, 3]);
        assert_eq!(payload.data.len(), 18);
    }

    #[test]
    fn idx_pixel_endpoints_map_to_unit_range() {
        let dir = std::env::temp_dir().join("rpgan-idx-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("endpoints.idx");
        let bytes = build_idx(&[1, 1, 2], &[0, 255]);
        std::fs::write(&path, bytes).unwrap();
        let ds: Dataset<f64> = load_idx(&path).unwrap();
        assert_eq!(ds.samples.shape(), &[1, 1, 1, 2]);
        assert_eq!(ds.samples.data()[0], -1.0);
        assert_eq!(ds.samples.data()[1], 1.0);
    }

    #[test]
    fn idx_rebuild_reproduces_bytes_exactly() {
        let bytes = build_idx(&[3, 2], &[9, 8, 7, 6, 5, 4]);
        let parsed = parse_idx(&bytes).unwrap();
        let rebuilt = build_idx(&parsed.dims, &parsed.data);
        assert_eq!(bytes, rebuilt);
    }

    #[test]
    fn loaders_stay_within_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let ds: Dataset<f32> = synth_mixture(8, 0.95, 0.3, 2000, &mut rng).unwrap();
        assert!(ds.samples.data().iter().all(|v| (-1.0..=1.0).contains(v)));

        let dir = std::env::temp_dir().join("rpgan-idx-range");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("r.idx");
        let payload: Vec<u8> = (0..=255u8).collect();
        std::fs::write(&path, build_idx(&[1, 16, 16], &payload)).unwrap();
        let ds: Dataset<f64> = load_idx(&path).unwrap();
        assert!(ds.samples.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let colored = colorize(&ds, &mut rng).unwrap();
        assert!(colored
            .samples
            .data()
            .iter()
            .all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn idx_rejects_bad_magic_and_truncation() {
        let good = build_idx(&[2, 2], &[1, 2, 3, 4]);
        assert!(parse_idx(&good).is_ok());

        let mut bad_magic = good.clone();
        bad_magic[2] = 0x0D;
        assert!(parse_idx(&bad_magic).is_err());

        let truncated = &good[..good.len() - 1];
        assert!(parse_idx(truncated).is_err());
    }

    #[test]
    fn tint_endpoints() {
        let gray = Tensor::new(vec![1, 1, 2], vec![0.5f64, -1.0]).unwrap();
        // neutral tint reproduces the gray channels
        let rgb = apply_tint(&gray, [1.0, 1.0, 1.0]).unwrap();
        for c in 0..3 {
            assert_eq!(rgb.data()[c * 2], 0.5);
            assert_eq!(rgb.data()[c * 2 + 1], -1.0);
        }
        // pure red zeroes green/blue down to the minimum value
        let rgb = apply_tint(&gray, [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(rgb.data()[0], 0.5);
        assert!(rgb.data()[2..].iter().all(|&v| v == -1.0));
    }

    #[test]
    fn mixture_degenerate_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ds: Dataset<f64> = synth_mixture(1, 0.5, 0.0, 10, &mut rng).unwrap();
        for i in 0..10 {
            let p = ds.samples.slice_sample(i).unwrap();
            assert_eq!(p.data(), &[0.5, 0.0]);
        }
    }

    #[test]
    fn mixture_is_seed_deterministic() {
        let gen = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            synth_mixture::<f32>(8, 0.7, 0.05, 64, &mut rng)
                .unwrap()
                .samples
                .data()
                .to_vec()
        };
        assert_eq!(gen(9), gen(9));
        assert_ne!(gen(9), gen(10));
    }

    #[test]
    fn grid_single_white_image_bytes() {
        let img = Tensor::new(vec![1, 4, 4], vec![1.0f32; 16]).unwrap();
        let bytes = render_grid(&[img], 1).unwrap();
        let expect_header = b"P5\n4 4\n255\n";
        assert_eq!(&bytes[..expect_header.len()], expect_header);
        assert_eq!(&bytes[expect_header.len()..], &[255u8; 16]);
    }

    #[test]
    fn grid_two_by_two_canvas_dimensions() {
        let imgs: Vec<Tensor<f32>> = (0..4)
            .map(|_| Tensor::new(vec![1, 3, 5], vec![0.0; 15]).unwrap())
            .collect();
        let bytes = render_grid(&imgs, 2).unwrap();
        // canvas 2*3+2 high, 2*5+2 wide
        assert!(bytes.starts_with(b"P5\n12 8\n255\n"));
    }

    #[test]
    fn grid_values_clamp_never_wrap() {
        let img = Tensor::new(vec![1, 1, 2], vec![5.0f32, -5.0]).unwrap();
        let bytes = render_grid(&[img], 1).unwrap();
        let px = &bytes[bytes.len() - 2..];
        assert_eq!(px, &[255u8, 0]);
    }
}
