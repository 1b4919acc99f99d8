//! Labelled image sets: a synthetic blob generator and an IDX reader.

use std::path::Path;

use ldeq_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{DataSource, RunConfig};
use crate::error::{HarnessError, Result};

const IDX_LABELS: u32 = 0x0000_0801;
const IDX_IMAGES: u32 = 0x0000_0803;

/// Images in `[0, 1]`, stored `(N, C, H, W)` row-major, with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<usize>,
    channels: usize,
    height: usize,
    width: usize,
    classes: usize,
}

impl Dataset {
    pub fn new(
        images: Vec<f32>,
        labels: Vec<usize>,
        (channels, height, width): (usize, usize, usize),
        classes: usize,
    ) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 || images.len() != labels.len() * per {
            return Err(HarnessError::Core(ldeq_core::Error::Shape(format!(
                "{} pixels for {} images of {channels}x{height}x{width}",
                images.len(),
                labels.len()
            ))));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(HarnessError::Core(ldeq_core::Error::Domain(format!(
                "label {bad} out of range for {classes} classes"
            ))));
        }
        Ok(Self {
            images,
            labels,
            channels,
            height,
            width,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `(C, H, W)`
    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.channels * self.height * self.width;
        &self.images[i * per..(i + 1) * per]
    }

    /// Stack the selected samples into an `(B, C, H, W)` tensor.
    pub fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let mut data = Vec::with_capacity(idx.len() * self.image(0).len());
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        let t = Tensor::new(vec![idx.len(), self.channels, self.height, self.width], data)
            .expect("batch shape matches by construction");
        (t, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Index batches of one epoch, shuffled by `(seed, epoch)`. The last
    /// batch may be short.
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    /// In-order batches, for evaluation.
    pub fn sequential(&self, batch_size: usize) -> Vec<Vec<usize>> {
        let order: Vec<usize> = (0..self.len()).collect();
        order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
    pub seed: u64,
}

/// Class-conditioned Gaussian blobs. Class `k` places a blob at its own
/// spot on a ring around the centre, with a width that grows with `k`, so
/// classes differ both in position and in scale. Positions jitter, the
/// amplitude varies and pixel noise is added before clipping to `[0, 1]`.
/// Labels cycle through the classes, so the set is balanced.
pub fn synthetic(spec: &SyntheticSpec) -> Dataset {
    let SyntheticSpec {
        classes: k,
        samples: n,
        channels: c,
        height: h,
        width: w,
        ..
    } = *spec;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise).expect("noise is finite and >= 0");
    let jitter = Normal::new(0.0, 0.04).expect("constant");
    let side = h.min(w) as f64;
    let mut images = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % k;
        let angle = std::f64::consts::TAU * label as f64 / k as f64;
        let cy = (0.5 + 0.22 * angle.sin() + jitter.sample(&mut rng)) * h as f64;
        let cx = (0.5 + 0.22 * angle.cos() + jitter.sample(&mut rng)) * w as f64;
        let sigma = side * (0.06 + 0.12 * label as f64 / (k.max(2) - 1) as f64);
        let amp = rng.gen_range(0.8..1.0);
        for ch in 0..c {
            let gain = 1.0 - 0.2 * ch as f64 / c as f64;
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                    let v = gain * amp * (-d2 / (2.0 * sigma * sigma)).exp() + noise.sample(&mut rng);
                    images.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        labels.push(label);
    }
    Dataset::new(images, labels, (c, h, w), k).expect("generator output is consistent")
}

fn format_err(path: &Path, offset: u64, msg: impl Into<String>) -> HarnessError {
    HarnessError::Format {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(path, at as u64, "file ends inside the header"))
}

/// Parse an IDX file with the expected magic; returns the dimensions and
/// the payload.
fn parse_idx<'a>(bytes: &'a [u8], magic: u32, path: &Path) -> Result<(Vec<usize>, &'a [u8])> {
    let got = be_u32(bytes, 0, path)?;
    if got != magic {
        return Err(format_err(path, 0, format!("magic 0x{got:08x}, expected 0x{magic:08x}")));
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|d| be_u32(bytes, 4 + 4 * d, path).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndim;
    let want: usize = dims.iter().product();
    let payload = &bytes[start..];
    if payload.len() != want {
        return Err(format_err(
            path,
            (start + payload.len().min(want)) as u64,
            format!("payload has {} bytes, header promises {want}", payload.len()),
        ));
    }
    Ok((dims, payload))
}

pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(Vec<f32>, (usize, usize, usize))> {
    let (dims, payload) = parse_idx(bytes, IDX_IMAGES, path)?;
    let pixels = payload.iter().map(|&b| f32::from(b) / 255.0).collect();
    Ok((pixels, (dims[0], dims[1], dims[2])))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let (_, payload) = parse_idx(bytes, IDX_LABELS, path)?;
    Ok(payload.iter().map(|&b| usize::from(b)).collect())
}

/// Unsigned-byte IDX image file of `(n, h, w)` pixels.
pub fn encode_idx_images(n: usize, h: usize, w: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = IDX_IMAGES.to_be_bytes().to_vec();
    for d in [n, h, w] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = IDX_LABELS.to_be_bytes().to_vec();
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Read an IDX image/label pair. The class count is `classes` when given,
/// otherwise one more than the largest label.
pub fn load_idx(images: &Path, labels: &Path, classes: Option<usize>) -> Result<Dataset> {
    let ib = std::fs::read(images).map_err(|e| HarnessError::io(images, e))?;
    let lb = std::fs::read(labels).map_err(|e| HarnessError::io(labels, e))?;
    let (pixels, (n, h, w)) = parse_idx_images(&ib, images)?;
    let lab = parse_idx_labels(&lb, labels)?;
    if lab.len() != n {
        return Err(format_err(
            labels,
            4,
            format!("{} labels for {n} images in {}", lab.len(), images.display()),
        ));
    }
    let k = classes.unwrap_or_else(|| lab.iter().max().map_or(1, |m| m + 1));
    Dataset::new(pixels, lab, (1, h, w), k)
}

/// The dataset a run config describes, checked against the model's input.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let m = &cfg.model;
    let ds = match cfg.data.source {
        DataSource::Synthetic => synthetic(&SyntheticSpec {
            classes: m.classes,
            samples: cfg.data.samples,
            channels: m.input_channels,
            height: m.height,
            width: m.width,
            noise: cfg.data.noise,
            seed: cfg.seed,
        }),
        DataSource::Idx => {
            let (Some(i), Some(l)) = (&cfg.data.images, &cfg.data.labels) else {
                unreachable!("validated config carries both idx paths")
            };
            load_idx(i, l, Some(m.classes))?
        }
    };
    if ds.image_shape() != (m.input_channels, m.height, m.width) {
        return Err(HarnessError::config(
            "data",
            crate::error::Origin::Default,
            format!(
                "images are {:?} but the model expects {}x{}x{}",
                ds.image_shape(),
                m.input_channels,
                m.height,
                m.width
            ),
        ));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            classes: 3,
            samples: 500,
            channels: 1,
            height: 16,
            width: 16,
            noise: 0.1,
            seed,
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_normalized() {
        let a = synthetic(&spec(1));
        let b = synthetic(&spec(1));
        assert_eq!(a, b);
        assert_eq!(a.batches(32, 1, 0), b.batches(32, 1, 0));
        assert_ne!(a.batches(32, 1, 0), a.batches(32, 1, 1));
        assert_ne!(a, synthetic(&spec(2)));
        assert!(a.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let counts = (0..3).map(|k| a.labels().iter().filter(|&&l| l == k).count()).collect::<Vec<_>>();
        assert!(counts.iter().all(|&c| c == 166 || c == 167), "{counts:?}");
    }

    #[test]
    fn batches_cover_every_sample_once() {
        let d = synthetic(&spec(0));
        let mut all: Vec<usize> = d.batches(64, 3, 2).concat();
        all.sort_unstable();
        assert_eq!(all, (0..500).collect::<Vec<_>>());
        let (x, y) = d.batch(&[4, 7]);
        assert_eq!(x.shape(), &[2, 1, 16, 16]);
        assert_eq!(x.sample(1), d.image(7));
        assert_eq!(y, vec![d.labels()[4], d.labels()[7]]);
    }

    #[test]
    fn idx_round_trip() {
        let p = Path::new("mem");
        let pixels: Vec<u8> = (0..2 * 3 * 4).map(|v| (v * 10) as u8).collect();
        let (img, shape) = parse_idx_images(&encode_idx_images(2, 3, 4, &pixels), p).unwrap();
        assert_eq!(shape, (2, 3, 4));
        assert_eq!(img[1], 10.0 / 255.0);
        assert_eq!(parse_idx_labels(&encode_idx_labels(&[1, 0]), p).unwrap(), vec![1, 0]);
    }

    #[test]
    fn idx_bad_magic_reports_offset() {
        let mut bytes = encode_idx_labels(&[1, 2]);
        bytes[2] = 0x09;
        let err = parse_idx_labels(&bytes, Path::new("l.idx")).unwrap_err().to_string();
        assert!(err.contains("offset 0") && err.contains("magic"), "{err}");
        let err = parse_idx_images(&encode_idx_labels(&[1]), Path::new("i.idx")).unwrap_err();
        assert!(matches!(err, HarnessError::Format { offset: 0, .. }));
    }

    #[test]
    fn idx_truncated_payload_rejected() {
        let bytes = encode_idx_images(2, 2, 2, &[0; 7]);
        let err = parse_idx_images(&bytes, Path::new("i.idx")).unwrap_err();
        assert!(matches!(err, HarnessError::Format { offset: 23, .. }), "{err}");
    }
}
