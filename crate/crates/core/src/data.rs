//! Dataset ingestion and binarization.
//!
//! Images are stored as reals in `[0, 255/256]` (byte value divided by 256)
//! and binarized either by a fixed 0.5 threshold or stochastically, treating
//! each pixel as a Bernoulli success probability; the stochastic form is
//! meant to be redrawn every epoch, and averaging many draws reconstructs
//! the gray-scale image. Synthetic generators with analytic log-evidence
//! accompany the loaders so estimator accuracy can be scored against exact
//! answers.

use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::io::{Read, Write};
use std::path::Path;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// A gray-scale (or binarized) image dataset. Pixel values live in
/// `[0, 255/256]`; every image has `rows * cols` pixels.
#[derive(Clone, Debug)]
pub struct ImageDataset {
    pub images: Vec<Vec<f64>>,
    pub labels: Option<Vec<u8>>,
    pub split: Split,
    pub rows: usize,
    pub cols: usize,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn pixel_count(&self) -> usize {
        self.rows * self.cols
    }

    fn validate(&self) -> Result<()> {
        let px = self.pixel_count();
        for (i, img) in self.images.iter().enumerate() {
            if img.len() != px {
                return Err(Error::Data(format!(
                    "image {i} has {} pixels, expected {px}",
                    img.len()
                )));
            }
            if img.iter().any(|&p| !(0.0..1.0).contains(&p)) {
                return Err(Error::Data(format!("image {i} has a pixel outside [0, 1)")));
            }
        }
        if let Some(l) = &self.labels {
            if l.len() != self.images.len() {
                return Err(Error::Data(format!(
                    "{} labels for {} images",
                    l.len(),
                    self.images.len()
                )));
            }
        }
        Ok(())
    }
}

fn read_u32_be(buf: &[u8], off: usize, what: &str) -> Result<u32> {
    let bytes: [u8; 4] = buf
        .get(off..off + 4)
        .ok_or_else(|| Error::Data(format!("truncated IDX file: missing {what}")))?
        .try_into()
        .expect("slice length checked");
    Ok(u32::from_be_bytes(bytes))
}

/// Loads an IDX image file (magic `0x00000803`, big-endian dimensions).
/// Byte values are divided by 256, so the representable pixel range is
/// exactly `[0, 255/256]`.
pub fn load_idx_images(path: &Path, split: Split) -> Result<ImageDataset> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let magic = read_u32_be(&buf, 0, "magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Data(format!(
            "bad IDX image magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}"
        )));
    }
    let n = read_u32_be(&buf, 4, "item count")? as usize;
    let rows = read_u32_be(&buf, 8, "row count")? as usize;
    let cols = read_u32_be(&buf, 12, "column count")? as usize;
    let px = rows * cols;
    let expected = 16 + n * px;
    if buf.len() < expected {
        return Err(Error::Data(format!(
            "truncated IDX image file: {} bytes, header promises {expected}",
            buf.len()
        )));
    }
    if buf.len() > expected {
        return Err(Error::Data(format!(
            "IDX image dimension mismatch: {} trailing bytes after {n} images of {px} pixels",
            buf.len() - expected
        )));
    }
    let images = (0..n)
        .map(|i| {
            buf[16 + i * px..16 + (i + 1) * px].iter().map(|&b| f64::from(b) / 256.0).collect()
        })
        .collect();
    Ok(ImageDataset { images, labels: None, split, rows, cols })
}

/// Loads an IDX label file (magic `0x00000801`).
pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let magic = read_u32_be(&buf, 0, "magic")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Data(format!(
            "bad IDX label magic {magic:#010x}, expected {IDX_LABEL_MAGIC:#010x}"
        )));
    }
    let n = read_u32_be(&buf, 4, "item count")? as usize;
    let expected = 8 + n;
    if buf.len() < expected {
        return Err(Error::Data(format!(
            "truncated IDX label file: {} bytes, header promises {expected}",
            buf.len()
        )));
    }
    if buf.len() > expected {
        return Err(Error::Data(format!(
            "IDX label dimension mismatch: {} trailing bytes after {n} labels",
            buf.len() - expected
        )));
    }
    Ok(buf[8..].to_vec())
}

/// Attaches a label vector loaded separately; counts must agree.
pub fn attach_labels(ds: &mut ImageDataset, labels: Vec<u8>) -> Result<()> {
    if labels.len() != ds.len() {
        return Err(Error::Data(format!(
            "label/image count mismatch: {} labels, {} images",
            labels.len(),
            ds.len()
        )));
    }
    ds.labels = Some(labels);
    Ok(())
}

/// Writes images back to IDX. Pixels must be exact multiples of 1/256
/// (which loading and binarization both preserve), so a write/load cycle is
/// bit-exact.
pub fn write_idx_images(ds: &ImageDataset, path: &Path) -> Result<()> {
    ds.validate()?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&IDX_IMAGE_MAGIC.to_be_bytes())?;
    f.write_all(&(ds.len() as u32).to_be_bytes())?;
    f.write_all(&(ds.rows as u32).to_be_bytes())?;
    f.write_all(&(ds.cols as u32).to_be_bytes())?;
    let mut bytes = Vec::with_capacity(ds.len() * ds.pixel_count());
    for img in &ds.images {
        for &p in img {
            let scaled = p * 256.0;
            let b = scaled.round();
            if (scaled - b).abs() > 1e-12 || !(0.0..=255.0).contains(&b) {
                return Err(Error::Data(format!(
                    "pixel {p} is not an exact multiple of 1/256 in [0, 255/256]"
                )));
            }
            bytes.push(b as u8);
        }
    }
    f.write_all(&bytes)?;
    Ok(())
}

pub fn write_idx_labels(labels: &[u8], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&IDX_LABEL_MAGIC.to_be_bytes())?;
    f.write_all(&(labels.len() as u32).to_be_bytes())?;
    f.write_all(labels)?;
    Ok(())
}

/// Deterministic binarization: 1 where the pixel is ≥ 0.5.
pub fn binarize_threshold(ds: &ImageDataset) -> ImageDataset {
    let images = ds
        .images
        .iter()
        .map(|img| img.iter().map(|&p| if p >= 0.5 { 1.0 } else { 0.0 }).collect())
        .collect();
    ImageDataset { images, ..ds.clone() }
}

/// Stochastic binarization: each pixel is an independent Bernoulli draw with
/// its gray-scale value as the success probability. Meant to be redrawn at
/// the start of every epoch; averaging many draws recovers the gray-scale
/// image.
pub fn binarize_stochastic<Rg: Rng>(ds: &ImageDataset, rng: &mut Rg) -> ImageDataset {
    let images = ds
        .images
        .iter()
        .map(|img| img.iter().map(|&p| if rng.gen::<f64>() < p { 1.0 } else { 0.0 }).collect())
        .collect();
    ImageDataset { images, ..ds.clone() }
}

/// One persisted evaluation binarization: the seed that produced it plus the
/// drawn data, so scores are comparable across runs and implementations.
#[derive(Clone, Debug)]
pub struct EvalDraw {
    pub seed: u64,
    pub data: ImageDataset,
}

/// `k` independent stochastic binarizations with recorded seeds
/// (`base_seed, base_seed+1, …`). Re-running with the same base seed
/// reproduces the draws bit-exactly.
pub fn make_eval_draws(ds: &ImageDataset, k: usize, base_seed: u64) -> Vec<EvalDraw> {
    assert!(k >= 1, "need at least one draw");
    (0..k as u64)
        .map(|i| {
            let seed = base_seed.wrapping_add(i);
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            EvalDraw { seed, data: binarize_stochastic(ds, &mut rng) }
        })
        .collect()
}

/// Conjugate Gaussian observations with exact per-datum log-evidence:
/// z ~ N(0,1), x | z ~ N(z,1), so p(x) = N(x; 0, 2).
#[derive(Clone, Debug)]
pub struct ConjugateDataset {
    pub xs: Vec<f64>,
    pub log_marginals: Vec<f64>,
}

pub fn synthetic_conjugate<Rg: Rng>(n: usize, rng: &mut Rg) -> ConjugateDataset {
    assert!(n >= 1);
    let mut xs = Vec::with_capacity(n);
    let mut log_marginals = Vec::with_capacity(n);
    for _ in 0..n {
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        let e: f64 = rng.sample(rand_distr::StandardNormal);
        let x = z + e;
        xs.push(x);
        log_marginals.push(crate::potential::ConjugateGaussJoint { x }.log_marginal());
    }
    ConjugateDataset { xs, log_marginals }
}

impl ConjugateDataset {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,log_marginal\n");
        for (x, lm) in self.xs.iter().zip(&self.log_marginals) {
            s.push_str(&format!("{x:.17e},{lm:.17e}\n"));
        }
        s
    }
}

/// Two-cluster heteroscedastic observations with exact log-evidence:
/// z ~ N(0,1), c ~ Bernoulli(1/2), y | z, c ~ N(z, σ_c²). The two clusters
/// have very different posterior scales, which gives an input-conditioned
/// mass matrix something real to learn.
#[derive(Clone, Debug)]
pub struct TwoClusterDataset {
    pub ys: Vec<f64>,
    pub clusters: Vec<u8>,
    pub log_marginals: Vec<f64>,
}

pub fn synthetic_two_cluster<Rg: Rng>(n: usize, rng: &mut Rg) -> TwoClusterDataset {
    assert!(n >= 1);
    let mut ys = Vec::with_capacity(n);
    let mut clusters = Vec::with_capacity(n);
    let mut log_marginals = Vec::with_capacity(n);
    for _ in 0..n {
        let c = u8::from(rng.gen::<bool>());
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        let e: f64 = rng.sample(rand_distr::StandardNormal);
        let y = z + crate::potential::TWO_CLUSTER_SIGMAS[usize::from(c)] * e;
        let joint = crate::potential::TwoClusterJoint { y, cluster: c };
        ys.push(y);
        clusters.push(c);
        log_marginals.push(joint.log_marginal());
    }
    TwoClusterDataset { ys, clusters, log_marginals }
}

impl TwoClusterDataset {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("y,cluster,log_marginal\n");
        for i in 0..self.ys.len() {
            s.push_str(&format!(
                "{:.17e},{},{:.17e}\n",
                self.ys[i], self.clusters[i], self.log_marginals[i]
            ));
        }
        s
    }
}

/// Seeded synthetic image corpus: a single soft blob whose center wanders
/// over the frame and whose size and brightness vary. The generative factors
/// are low-dimensional and smooth, so a small decoder can model the corpus
/// well — a self-contained stand-in for handwritten-digit data in
/// environments without it. Labels encode the blob's quadrant.
pub fn synthetic_images(n: usize, rows: usize, cols: usize, seed: u64) -> ImageDataset {
    assert!(n >= 1 && rows >= 8 && cols >= 8);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let (rf, cf) = (rows as f64, cols as f64);
    for _ in 0..n {
        let cy = rf * (0.28 + 0.44 * rng.gen::<f64>());
        let cx = cf * (0.28 + 0.44 * rng.gen::<f64>());
        let s = rf * (0.09 + 0.07 * rng.gen::<f64>());
        let amp = 0.72 + 0.26 * rng.gen::<f64>();
        let mut img = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let dr = (r as f64 - cy) / s;
                let dc = (c as f64 - cx) / s;
                let v = amp * (-(dr * dr + dc * dc) / 2.0).exp();
                // Quantize onto the byte grid so IDX round-trips are exact.
                img.push((v * 256.0).floor().clamp(0.0, 255.0) / 256.0);
            }
        }
        images.push(img);
        let quad = u8::from(cy >= rf / 2.0) * 2 + u8::from(cx >= cf / 2.0);
        labels.push(quad);
    }
    ImageDataset { images, labels: Some(labels), split: Split::Train, rows, cols }
}
