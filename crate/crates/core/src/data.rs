//! Synthetic class-conditional image datasets and the `VCD1` file format.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic        4 bytes  "VCD1"
//! n_classes    u32
//! per_class    u32
//! channels     u32
//! height       u32
//! width        u32
//! seed         u64
//! generator    u32      0 = blobs, 1 = rings
//! images       f32 × n·C·H·W   values in [-1, 1]
//! labels       u32 × n
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::streams;
use crate::{Rng, Tensor};

pub const DATASET_MAGIC: &[u8; 4] = b"VCD1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Blobs,
    Rings,
}

impl GeneratorKind {
    fn id(self) -> u32 {
        match self {
            GeneratorKind::Blobs => 0,
            GeneratorKind::Rings => 1,
        }
    }

    fn from_id(id: u32) -> Result<Self> {
        match id {
            0 => Ok(GeneratorKind::Blobs),
            1 => Ok(GeneratorKind::Rings),
            _ => Err(Error::Format(format!("unknown generator id {id}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
    pub generator: GeneratorKind,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_classes: 4,
            samples_per_class: 512,
            height: 16,
            width: 16,
            channels: 1,
            seed: 0,
            generator: GeneratorKind::Blobs,
        }
    }
}

impl DatasetSpec {
    pub fn len(&self) -> usize {
        self.n_classes * self.samples_per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks the spec on its own and against the model patch size.
    pub fn validate(&self, patch_size: usize) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.n_classes)));
        }
        if self.samples_per_class == 0 || self.channels == 0 {
            return Err(Error::Config("samples_per_class and channels must be positive".into()));
        }
        if patch_size == 0 || !self.height.is_multiple_of(patch_size) || !self.width.is_multiple_of(patch_size) {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible by patch size {patch_size}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Images in `[-1, 1]` laid out `n × C × H × W`, with one class id per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub images: Vec<f32>,
    pub labels: Vec<u32>,
}

/// Affine parameters of a min-max rescale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinMax {
    pub min: f32,
    pub max: f32,
}

impl MinMax {
    pub fn invert(&self, scaled: &Tensor) -> Tensor {
        let (lo, span) = (self.min as f64, (self.max - self.min) as f64);
        scaled.map(|v| ((v as f64 + 1.0) * 0.5 * span + lo) as f32)
    }
}

/// Maps the global minimum to −1 and maximum to +1.
pub fn minmax_rescale(raw: &Tensor) -> Result<(Tensor, MinMax)> {
    let (min, max) = raw
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(max > min) {
        return Err(Error::Invalid("cannot rescale a constant dataset".into()));
    }
    let span = (max - min) as f64;
    let scaled = raw.map(|v| {
        let u = (v - min) as f64 / span;
        ((2.0 * u - 1.0) as f32).clamp(-1.0, 1.0)
    });
    Ok((scaled, MinMax { min, max }))
}

fn gaussian_bump(y: f32, x: f32, cy: f32, cx: f32, sa: f32, sb: f32, theta: f32) -> f32 {
    let (dy, dx) = (y - cy, x - cx);
    let (s, c) = theta.sin_cos();
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    (-(u * u) / (2.0 * sa * sa) - (v * v) / (2.0 * sb * sb)).exp()
}

fn render(spec: &DatasetSpec, class: usize, rng: &mut Rng) -> Vec<f32> {
    let (h, w) = (spec.height as f32, spec.width as f32);
    let k = spec.n_classes;
    let mut img = vec![0.0f32; spec.image_len()];
    let plane = spec.height * spec.width;
    let amp = rng.uniform_range(0.85, 1.15);
    let pixel: Box<dyn Fn(f32, f32) -> f32> = match spec.generator {
        GeneratorKind::Blobs => {
            let grid = (k as f32).sqrt().ceil() as usize;
            let (row, col) = (class / grid, class % grid);
            let (cell_h, cell_w) = (h / grid as f32, w / grid as f32);
            let cy = (row as f32 + 0.5) * cell_h + rng.uniform_range(-0.12, 0.12) * cell_h;
            let cx = (col as f32 + 0.5) * cell_w + rng.uniform_range(-0.12, 0.12) * cell_w;
            let base = 0.16 * cell_h.min(cell_w) * 2.0;
            let sa = base * rng.uniform_range(0.9, 1.1);
            let sb = 0.5 * base * rng.uniform_range(0.9, 1.1);
            let theta = std::f32::consts::PI * class as f32 / k as f32 + rng.uniform_range(-0.2, 0.2);
            Box::new(move |y, x| amp * gaussian_bump(y, x, cy, cx, sa, sb, theta))
        }
        GeneratorKind::Rings => {
            let m = h.min(w);
            let cy = 0.5 * h + rng.uniform_range(-0.06, 0.06) * m;
            let cx = 0.5 * w + rng.uniform_range(-0.06, 0.06) * m;
            let frac = if k > 1 { class as f32 / (k - 1) as f32 } else { 0.0 };
            let radius = (0.12 + 0.26 * frac) * m + rng.uniform_range(-0.02, 0.02) * m;
            let width = 0.05 * m;
            Box::new(move |y, x| {
                let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
                amp * (-(d - radius).powi(2) / (2.0 * width * width)).exp()
            })
        }
    };
    for ch in 0..spec.channels {
        let factor = 1.0 - 0.3 * ch as f32 / spec.channels as f32;
        for yy in 0..spec.height {
            for xx in 0..spec.width {
                img[ch * plane + yy * spec.width + xx] = factor * pixel(yy as f32 + 0.5, xx as f32 + 0.5);
            }
        }
    }
    img
}

/// Deterministic synthetic dataset; sample `i` has class `i % n_classes`.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate(1)?;
    let mut rng = Rng::derive(spec.seed, streams::DATA);
    let n = spec.len();
    let mut raw = Vec::with_capacity(n * spec.image_len());
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.n_classes;
        raw.extend(render(spec, class, &mut rng));
        labels.push(class as u32);
    }
    let raw = Tensor::from_parts(&[n, spec.channels, spec.height, spec.width], raw)?;
    let (scaled, _) = minmax_rescale(&raw)?;
    Ok(Dataset {
        spec: spec.clone(),
        images: scaled.into_data(),
        labels,
    })
}

/// One batch of images `[B, C, H, W]` with class ids.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.spec.channels, self.spec.height, self.spec.width]
    }

    pub fn image(&self, i: usize) -> Tensor {
        let w = self.spec.image_len();
        Tensor::raw(self.image_shape().to_vec(), self.images[i * w..(i + 1) * w].to_vec())
    }

    pub fn gather(&self, indices: &[usize]) -> Batch {
        let w = self.spec.image_len();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(&self.images[i * w..(i + 1) * w]);
        }
        let [c, h, wd] = self.image_shape();
        Batch {
            indices: indices.to_vec(),
            images: Tensor::raw(vec![indices.len(), c, h, wd], data),
            labels: indices.iter().map(|&i| self.labels[i] as usize).collect(),
        }
    }

    /// Index lists for one epoch; the trailing partial batch is dropped.
    pub fn epoch_indices(&self, batch_size: usize, shuffle: Option<&mut Rng>) -> Result<Vec<Vec<usize>>> {
        if batch_size < 2 {
            return Err(Error::Config(format!("batch size must be at least 2, got {batch_size}")));
        }
        let order = match shuffle {
            Some(rng) => rng.permutation(self.len()),
            None => (0..self.len()).collect(),
        };
        Ok(order.chunks_exact(batch_size).map(|c| c.to_vec()).collect())
    }

    pub fn batches<'a>(
        &'a self,
        batch_size: usize,
        shuffle: Option<&mut Rng>,
    ) -> Result<impl Iterator<Item = Batch> + 'a> {
        let idx = self.epoch_indices(batch_size, shuffle)?;
        Ok(idx.into_iter().map(move |b| self.gather(&b)))
    }

    /// Dataset-global RMS over all pixels.
    pub fn rms(&self) -> f64 {
        let ss: f64 = self.images.iter().map(|&v| (v as f64) * (v as f64)).sum();
        (ss / self.images.len() as f64).sqrt()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let s = &self.spec;
        w.write_all(DATASET_MAGIC)?;
        for v in [s.n_classes, s.samples_per_class, s.channels, s.height, s.width] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&s.seed.to_le_bytes())?;
        w.write_all(&s.generator.id().to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.images.len() * 4 + self.labels.len() * 4);
        for v in &self.images {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.labels {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format(format!("bad dataset magic {magic:?}")));
        }
        let mut u32s = [0u32; 5];
        for v in u32s.iter_mut() {
            *v = read_u32(r)?;
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let seed = u64::from_le_bytes(b8);
        let generator = GeneratorKind::from_id(read_u32(r)?)?;
        let spec = DatasetSpec {
            n_classes: u32s[0] as usize,
            samples_per_class: u32s[1] as usize,
            channels: u32s[2] as usize,
            height: u32s[3] as usize,
            width: u32s[4] as usize,
            seed,
            generator,
        };
        let n = spec.len();
        let count = n
            .checked_mul(spec.image_len())
            .filter(|&c| c < (1 << 31))
            .ok_or_else(|| Error::Format("dataset header sizes overflow".into()))?;
        let mut buf = vec![0u8; count * 4];
        r.read_exact(&mut buf)?;
        let images: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if images.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Format("dataset pixel outside [-1, 1]".into()));
        }
        let mut lb = vec![0u8; n * 4];
        r.read_exact(&mut lb)?;
        let labels: Vec<u32> = lb
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if labels.iter().any(|&l| l as usize >= spec.n_classes) {
            return Err(Error::Format("dataset label out of range".into()));
        }
        Ok(Self { spec, images, labels })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec {
            samples_per_class: 64,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn deterministic_and_bounded() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let min = a.images.iter().cloned().fold(f32::INFINITY, f32::min);
        let max = a.images.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!((min, max), (-1.0, 1.0));
        for c in 0..4 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 64);
        }
    }

    #[test]
    fn rescale_examples() {
        let raw = Tensor::new(&[3], vec![0.0, 255.0, 127.5]).unwrap();
        let (s, mm) = minmax_rescale(&raw).unwrap();
        assert_eq!(s.data(), &[-1.0, 1.0, 0.0]);
        let back = mm.invert(&s);
        assert!(back.max_abs_diff(&raw) < 1e-6 * 255.0);
        let unit = Tensor::new(&[3], vec![-1.0, 0.25, 1.0]).unwrap();
        assert_eq!(minmax_rescale(&unit).unwrap().0, unit);
        assert!(minmax_rescale(&Tensor::full(&[4], 2.0)).is_err());
    }

    #[test]
    fn batching() {
        let d = generate(&small()).unwrap();
        let plain = d.epoch_indices(60, None).unwrap();
        assert_eq!(plain.len(), 4);
        assert_eq!(plain[0], (0..60).collect::<Vec<_>>());
        let a = d.epoch_indices(60, Some(&mut Rng::new(3))).unwrap();
        let b = d.epoch_indices(60, Some(&mut Rng::new(3))).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.concat();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 240);
        assert!(d.epoch_indices(1, None).is_err());
    }

    #[test]
    fn validation() {
        assert!(DatasetSpec { n_classes: 1, ..small() }.validate(4).is_err());
        assert!(DatasetSpec { height: 18, ..small() }.validate(4).is_err());
        assert!(small().validate(4).is_ok());
    }
}
