//! Synthetic image datasets and the flat `IBDS1` file format.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

const MAGIC: &[u8; 5] = b"IBDS1";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]` with values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub generator: String,
    pub seed: u64,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let (n, _, _, _) = images.dims4()?;
        if labels.len() != n {
            return Err(Error::Shape(format!("{} labels for {} images", labels.len(), n)));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidArgument(format!("label {} of {} classes", bad, classes)));
        }
        Ok(Self {
            images,
            labels,
            classes,
            generator: "file".into(),
            seed: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            images: self.images.rows(start, len)?,
            labels: self.labels[start..start + len].to_vec(),
            classes: self.classes,
            generator: self.generator.clone(),
            seed: self.seed,
        })
    }

    /// Images at the given indices, in order.
    pub fn gather(&self, idx: &[usize]) -> Result<Self> {
        let per: usize = self.image_shape().iter().product();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("index {} of {}", i, self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let [c, h, w] = self.image_shape();
        Ok(Self {
            images: Tensor::new(vec![idx.len(), c, h, w], data)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            generator: self.generator.clone(),
            seed: self.seed,
        })
    }
}

/// One bar image of orientation `y·π/M`, drawn from its own stream.
fn bar_image(index: u64, label: usize, classes: usize, shape: [usize; 3], seed: u64) -> Vec<f64> {
    let [c, h, w] = shape;
    let mut rng = stream(seed, Purpose::Data, index);
    let theta = label as f64 * PI / classes as f64;
    let (dx, dy) = (theta.cos(), theta.sin());
    let jitter = 0.125 * h.min(w) as f64;
    let cx = (w as f64 - 1.0) / 2.0 + rng.gen_range(-jitter..jitter);
    let cy = (h as f64 - 1.0) / 2.0 + rng.gen_range(-jitter..jitter);
    let amplitude = rng.gen_range(0.6..1.0);
    let width = 0.08 * h.min(w) as f64;
    let half_len = 0.3 * h.min(w) as f64;
    let noise = Normal::new(0.0, 0.05).expect("positive std");
    let mut plane = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let (px, py) = (j as f64 - cx, i as f64 - cy);
            let along = px * dx + py * dy;
            let across = -px * dy + py * dx;
            plane[i * w + j] = amplitude
                * (-across * across / (2.0 * width * width)).exp()
                * (-along * along / (2.0 * half_len * half_len)).exp();
        }
    }
    let mut out = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        for &v in &plane {
            out.push((v + noise.sample(&mut rng)).clamp(0.0, 1.0));
        }
    }
    out
}

/// Images `start..start + n` of the bars family. Disjoint ranges give
/// disjoint samples, so train and test sets come from the same call with
/// different offsets.
pub fn synth_bars_range(start: usize, n: usize, classes: usize, shape: [usize; 3], seed: u64) -> Result<Dataset> {
    if classes == 0 || classes > 8 {
        return Err(Error::InvalidArgument(format!("bars support 1 to 8 classes, got {}", classes)));
    }
    if shape.contains(&0) {
        return Err(Error::InvalidArgument(format!("image shape {:?}", shape)));
    }
    let per: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for i in start..start + n {
        let y = i % classes;
        data.extend(bar_image(i as u64, y, classes, shape, seed));
        labels.push(y);
    }
    Ok(Dataset {
        images: Tensor::new(vec![n, shape[0], shape[1], shape[2]], data)?,
        labels,
        classes,
        generator: "synth_bars".into(),
        seed,
    })
}

pub fn synth_bars(n: usize, classes: usize, shape: [usize; 3], seed: u64) -> Result<Dataset> {
    synth_bars_range(0, n, classes, shape, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OodKind {
    UniformNoise,
    Inverted,
    ShuffledPixels,
}

impl std::str::FromStr for OodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform_noise" | "noise" => Ok(OodKind::UniformNoise),
            "inverted" => Ok(OodKind::Inverted),
            "shuffled" | "shuffled_pixels" => Ok(OodKind::ShuffledPixels),
            _ => Err(Error::InvalidArgument(format!("unknown OoD kind '{}'", s))),
        }
    }
}

/// An out-of-distribution set shaped like `base`; labels are carried over.
pub fn synth_ood(kind: OodKind, base: &Dataset, seed: u64) -> Result<Dataset> {
    let per: usize = base.image_shape().iter().product();
    let mut data = base.images.data().to_vec();
    match kind {
        OodKind::UniformNoise => {
            for (i, img) in data.chunks_mut(per).enumerate() {
                let mut rng = stream(seed, Purpose::Ood, i as u64);
                for v in img {
                    *v = rng.gen::<f64>();
                }
            }
        }
        OodKind::Inverted => {
            for v in &mut data {
                *v = 1.0 - *v;
            }
        }
        OodKind::ShuffledPixels => {
            for (i, img) in data.chunks_mut(per).enumerate() {
                let mut rng = stream(seed, Purpose::Ood, i as u64);
                img.shuffle(&mut rng);
            }
        }
    }
    let name = match kind {
        OodKind::UniformNoise => "uniform_noise",
        OodKind::Inverted => "inverted",
        OodKind::ShuffledPixels => "shuffled",
    };
    Ok(Dataset {
        images: Tensor::new(base.images.shape().to_vec(), data)?,
        labels: base.labels.clone(),
        classes: base.classes,
        generator: name.into(),
        seed,
    })
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(MAGIC)?;
    let [c, h, w] = ds.image_shape();
    for v in [ds.len(), c, h, w, ds.classes] {
        let v = u32::try_from(v).map_err(|_| Error::InvalidArgument("dataset too large".into()))?;
        f.write_all(&v.to_le_bytes())?;
    }
    for v in ds.images.data() {
        f.write_all(&v.to_le_bytes())?;
    }
    for &y in &ds.labels {
        let y = u16::try_from(y).map_err(|_| Error::InvalidArgument("label exceeds u16".into()))?;
        f.write_all(&y.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let fail = |m: &str| Error::Format(format!("{}: {}", path.display(), m));
    if bytes.len() < 25 || &bytes[..5] != MAGIC {
        return Err(fail("not an IBDS1 dataset"));
    }
    let header: Vec<usize> = (0..5)
        .map(|k| u32::from_le_bytes(bytes[5 + 4 * k..9 + 4 * k].try_into().expect("4 bytes")) as usize)
        .collect();
    let (n, c, h, w, m) = (header[0], header[1], header[2], header[3], header[4]);
    let pixels = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| fail("header overflows"))?;
    let expected = 25 + pixels * 8 + n * 2;
    if bytes.len() != expected {
        return Err(fail(&format!("expected {} bytes, found {}", expected, bytes.len())));
    }
    let mut data = Vec::with_capacity(pixels);
    for k in 0..pixels {
        let at = 25 + 8 * k;
        let v = f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(fail("non-finite pixel"));
        }
        data.push(v);
    }
    let label_base = 25 + 8 * pixels;
    let labels: Vec<usize> = (0..n)
        .map(|k| u16::from_le_bytes([bytes[label_base + 2 * k], bytes[label_base + 2 * k + 1]]) as usize)
        .collect();
    let mut ds = Dataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, m)
        .map_err(|e| fail(&e.to_string()))?;
    ds.generator = "file".into();
    Ok(ds)
}
