//! Image stores backed by CIFAR-10 binary batches or directories of PPM files.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ppm::Ppm;
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = CIFAR_SIDE * CIFAR_SIDE * 3;
pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetFormat {
    Cifar10Bin,
    PpmDir,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10-bin" => Ok(DatasetFormat::Cifar10Bin),
            "ppm-dir" => Ok(DatasetFormat::PpmDir),
            other => Err(Error::invalid(format!("unknown dataset format `{other}` (cifar10-bin | ppm-dir)"))),
        }
    }
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetFormat::Cifar10Bin => "cifar10-bin",
            DatasetFormat::PpmDir => "ppm-dir",
        })
    }
}

/// Equally sized 8-bit images kept in `H×W×C` interleaved order.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageStore {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<u8>,
    labels: Vec<i32>,
}

impl ImageStore {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<u8>, labels: Vec<i32>) -> Result<Self> {
        if pixels.len() != height * width * channels * labels.len() {
            return Err(Error::invalid("pixel buffer does not match image count and geometry"));
        }
        Ok(ImageStore { height, width, channels, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let sz = self.height * self.width * self.channels;
        &self.pixels[i * sz..(i + 1) * sz]
    }

    /// Image `i` scaled to `[0, 1]`.
    pub fn image(&self, i: usize) -> Tensor {
        let bytes = self.image_bytes(i);
        Tensor::from_fn(vec![self.height, self.width, self.channels], |k| bytes[k] as f64 / 255.0)
    }

    /// Keeps the first `n` records (all of them when `n` is 0 or too large).
    pub fn truncate(&mut self, n: usize) {
        if n > 0 && n < self.len() {
            self.labels.truncate(n);
            self.pixels.truncate(n * self.height * self.width * self.channels);
        }
    }

    fn append(&mut self, other: ImageStore) -> Result<()> {
        if self.is_empty() {
            *self = other;
            return Ok(());
        }
        if other.dims() != self.dims() {
            return Err(Error::invalid(format!("image size {:?} differs from {:?}", other.dims(), self.dims())));
        }
        self.pixels.extend(other.pixels);
        self.labels.extend(other.labels);
        Ok(())
    }
}

/// Decodes CIFAR-10 binary records: a label byte then the R, G and B planes.
pub fn parse_cifar10(bytes: &[u8]) -> Result<ImageStore> {
    let full = bytes.len() / CIFAR_RECORD;
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format {
            format: "cifar10-bin",
            offset: (full * CIFAR_RECORD) as u64,
            reason: format!("truncated record ({} trailing bytes)", bytes.len() % CIFAR_RECORD),
        });
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut pixels = Vec::with_capacity(full * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(full);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Format {
                format: "cifar10-bin",
                offset: (r * CIFAR_RECORD) as u64,
                reason: format!("label byte {} outside 0..=9", rec[0]),
            });
        }
        labels.push(rec[0] as i32);
        let planes = &rec[1..];
        for p in 0..plane {
            pixels.extend([planes[p], planes[plane + p], planes[2 * plane + p]]);
        }
    }
    ImageStore::new(CIFAR_SIDE, CIFAR_SIDE, 3, pixels, labels)
}

/// Encodes a 32×32×3 store back into CIFAR-10 binary records.
pub fn encode_cifar10(store: &ImageStore) -> Result<Vec<u8>> {
    if store.dims() != (CIFAR_SIDE, CIFAR_SIDE, 3) {
        return Err(Error::invalid("CIFAR-10 records are 32×32×3"));
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut out = Vec::with_capacity(store.len() * CIFAR_RECORD);
    for i in 0..store.len() {
        let label = store.labels[i];
        if !(0..=9).contains(&label) {
            return Err(Error::invalid(format!("label {label} cannot be stored in a CIFAR-10 record")));
        }
        out.push(label as u8);
        let img = store.image_bytes(i);
        for c in 0..3 {
            out.extend((0..plane).map(|p| img[p * 3 + c]));
        }
    }
    Ok(out)
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case(ext)))
        .collect();
    files.sort();
    Ok(files)
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Format { format, offset, reason } => {
            Error::Format { format, offset, reason: format!("{}: {reason}", path.display()) }
        }
        other => other,
    }
}

/// Loads a dataset. For `cifar10-bin`, `path` is a batch file or a directory
/// whose `*.bin` files are read in lexicographic order. For `ppm-dir`, every
/// `*.ppm` in the directory becomes one record with label −1.
pub fn ingest_dataset(path: &Path, format: DatasetFormat) -> Result<ImageStore> {
    let mut store = ImageStore::new(0, 0, 0, Vec::new(), Vec::new())?;
    match format {
        DatasetFormat::Cifar10Bin => {
            let files = if path.is_dir() { sorted_files(path, "bin")? } else { vec![path.to_path_buf()] };
            for f in files {
                let bytes = fs::read(&f).map_err(|e| Error::io(&f, e))?;
                store.append(parse_cifar10(&bytes).map_err(|e| with_path(&f, e))?)?;
            }
        }
        DatasetFormat::PpmDir => {
            for f in sorted_files(path, "ppm")? {
                let img = Ppm::read(&f).map_err(|e| with_path(&f, e))?;
                let one = ImageStore::new(img.height, img.width, 3, img.pixels, vec![-1])?;
                store.append(one).map_err(|e| with_path(&f, e))?;
            }
        }
    }
    if store.is_empty() {
        return Err(Error::invalid(format!("no images found at {}", path.display())));
    }
    Ok(store)
}

/// Per-channel affine normalization `(x − mean)/std`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// Channel statistics of the whole store in `[0, 1]` units.
    pub fn from_store(store: &ImageStore) -> Self {
        let (h, w, c) = store.dims();
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for px in store.pixels.chunks_exact(c) {
            for k in 0..c {
                let v = px[k] as f64 / 255.0;
                sum[k] += v;
                sq[k] += v * v;
            }
        }
        let n = (store.len() * h * w).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq.iter().zip(&mean).map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(1e-3)).collect();
        Normalization { mean, std }
    }

    pub fn apply(&self, image: &mut Tensor) {
        let c = self.mean.len();
        for px in image.data_mut().chunks_exact_mut(c) {
            for k in 0..c {
                px[k] = (px[k] - self.mean[k]) / self.std[k];
            }
        }
    }

    pub fn invert(&self, image: &mut Tensor) {
        let c = self.mean.len();
        for px in image.data_mut().chunks_exact_mut(c) {
            for k in 0..c {
                px[k] = px[k] * self.std[k] + self.mean[k];
            }
        }
    }

    /// `mean0,mean1,...;std0,std1,...` with round-trip float formatting.
    pub fn encode(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        format!("{};{}", join(&self.mean), join(&self.std))
    }

    pub fn decode(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("malformed normalization `{s}`"));
        let (m, d) = s.split_once(';').ok_or_else(bad)?;
        let parse = |p: &str| p.split(',').map(|x| x.trim().parse::<f64>().map_err(|_| bad())).collect::<Result<Vec<_>>>();
        let (mean, std) = (parse(m)?, parse(d)?);
        if mean.len() != std.len() || std.iter().any(|&x| !(x > 0.0)) {
            return Err(bad());
        }
        Ok(Normalization { mean, std })
    }
}
