//! MNIST ingestion, corruption (blank lower rows, then salt-and-pepper noise),
//! train/test splitting and seeded batch streams.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::{Scalar, Tensor};

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("expected image magic 0x{IDX_IMAGE_MAGIC:08x}, found 0x{found:08x} at byte offset {offset}")]
    BadMagic { found: u32, offset: usize },
    #[error("truncated IDX data: expected {expected} bytes, found {actual} (payload starts at byte offset {offset})")]
    Truncated {
        expected: usize,
        actual: usize,
        offset: usize,
    },
    #[error("IDX {what} mismatch at byte offset {offset}: expected {expected}, found {found}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
        offset: usize,
    },
    #[error("gzip decode failed: {0}")]
    Gzip(std::io::Error),
    #[error("invalid {0}")]
    Invalid(String),
}

/// A normalized square grayscale image with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    side: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(side: usize, pixels: Vec<f64>) -> Result<Self, DataError> {
        if side == 0 || pixels.len() != side * side {
            return Err(DataError::Invalid(format!(
                "image of side {side} with {} pixels",
                pixels.len()
            )));
        }
        Ok(Image { side, pixels })
    }

    pub fn zeros(side: usize) -> Self {
        Image {
            side,
            pixels: vec![0.0; side * side],
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.pixels[r * self.side..(r + 1) * self.side]
    }

    pub fn is_normalized(&self) -> bool {
        self.pixels.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Quantizes to bytes with `round(v * 255)`, clamped to `0..=255`.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| quantize(v)).collect()
    }
}

pub fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Maps bytes to `[0, 1]` via `byte / 255`. The length must be a square.
pub fn normalize(bytes: &[u8]) -> Image {
    let side = (bytes.len() as f64).sqrt().round() as usize;
    assert_eq!(side * side, bytes.len(), "image byte count must be a square");
    Image {
        side,
        pixels: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
    }
}

/// Packs images into a `[B, S, S]` tensor.
pub fn images_to_tensor<T: Scalar>(images: &[Image]) -> Tensor<T> {
    assert!(!images.is_empty(), "empty image batch");
    let side = images[0].side;
    let data = images
        .iter()
        .flat_map(|im| {
            assert_eq!(im.side, side, "mixed image sizes in batch");
            im.pixels.iter().map(|&v| T::from_f64(v))
        })
        .collect();
    Tensor::from_parts_unchecked(vec![images.len(), side, side], data)
}

/// Splits a `[B, S, S]` tensor back into images.
pub fn tensor_to_images<T: Scalar>(t: &Tensor<T>) -> Vec<Image> {
    let [b, h, w] = t.shape()[..] else {
        panic!("expected [B, S, S], got {:?}", t.shape());
    };
    assert_eq!(h, w, "non-square image tensor");
    t.data()
        .chunks(h * w)
        .take(b)
        .map(|c| Image {
            side: h,
            pixels: c.iter().map(|v| v.as_f64()).collect(),
        })
        .collect()
}

/// Raw MNIST images as stored in an IDX file.
#[derive(Debug, Clone, PartialEq)]
pub struct MnistSet {
    bytes: Vec<u8>,
    count: usize,
    rows: usize,
    cols: usize,
    checksum: String,
}

impl MnistSet {
    pub fn from_images(rows: usize, cols: usize, bytes: Vec<u8>) -> Result<Self, DataError> {
        if rows == 0 || cols == 0 || bytes.len() % (rows * cols) != 0 {
            return Err(DataError::Invalid(format!(
                "{} bytes do not hold {rows}x{cols} images",
                bytes.len()
            )));
        }
        let checksum = hex_digest(&bytes);
        Ok(MnistSet {
            count: bytes.len() / (rows * cols),
            bytes,
            rows,
            cols,
            checksum,
        })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn side(&self) -> usize {
        self.rows
    }

    /// SHA-256 of the image payload, hex encoded.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn raw(&self, index: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.bytes[index * n..(index + 1) * n]
    }

    pub fn image(&self, index: usize) -> Image {
        normalize(self.raw(index))
    }

    /// Serializes back into the IDX layout (uncompressed).
    pub fn to_idx_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.bytes.len());
        out.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
        for d in [self.count, self.rows, self.cols] {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.bytes);
        out
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Reads an IDX image file, transparently un-gzipping it when the gzip magic
/// bytes are present.
pub fn load_idx(path: impl AsRef<Path>) -> Result<MnistSet, DataError> {
    let path = path.as_ref();
    let raw = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_idx(&raw)
}

pub fn parse_idx(raw: &[u8]) -> Result<MnistSet, DataError> {
    let bytes = if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw)
            .read_to_end(&mut out)
            .map_err(DataError::Gzip)?;
        out
    } else {
        raw.to_vec()
    };
    let word = |offset: usize| -> Result<u32, DataError> {
        bytes
            .get(offset..offset + 4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
            .ok_or(DataError::Truncated {
                expected: offset + 4,
                actual: bytes.len(),
                offset,
            })
    };
    let magic = word(0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(DataError::BadMagic {
            found: magic,
            offset: 0,
        });
    }
    let count = word(4)? as usize;
    let rows = word(8)? as usize;
    let cols = word(12)? as usize;
    for (what, found, offset) in [("row count", rows, 8), ("column count", cols, 12)] {
        if found != IMAGE_SIDE {
            return Err(DataError::DimMismatch {
                what,
                expected: IMAGE_SIDE,
                found,
                offset,
            });
        }
    }
    let expected = 16 + count * rows * cols;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            actual: bytes.len(),
            offset: 16,
        });
    }
    if bytes.len() > expected {
        return Err(DataError::DimMismatch {
            what: "payload length",
            expected,
            found: bytes.len(),
            offset: 4,
        });
    }
    MnistSet::from_images(rows, cols, bytes[16..].to_vec())
}

/// Parameters of the destruction pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionSpec {
    /// First blanked row (inclusive).
    pub blank_start: usize,
    /// Last blanked row (inclusive).
    pub blank_end: usize,
    /// Per-pixel probability of salt-and-pepper replacement.
    pub density: f64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        CorruptionSpec {
            blank_start: 14,
            blank_end: 27,
            density: 0.2,
        }
    }
}

impl CorruptionSpec {
    pub fn validate(&self, side: usize) -> Result<(), DataError> {
        if self.blank_start > self.blank_end || self.blank_end >= side {
            return Err(DataError::Invalid(format!(
                "blank rows {}..={} for {side}-row images",
                self.blank_start, self.blank_end
            )));
        }
        if !(0.0..=1.0).contains(&self.density) {
            return Err(DataError::Invalid(format!("noise density {}", self.density)));
        }
        Ok(())
    }
}

/// Blanks the configured rows, then applies salt-and-pepper noise over the
/// whole image: each pixel is replaced with probability `density` by 0 or 1
/// with equal odds.
pub fn corrupt(image: &Image, spec: &CorruptionSpec, rng: &mut impl Rng) -> Image {
    let mut out = image.clone();
    let side = out.side;
    let end = spec.blank_end.min(side.saturating_sub(1));
    if spec.blank_start <= end {
        out.pixels[spec.blank_start * side..(end + 1) * side].fill(0.0);
    }
    if spec.density > 0.0 {
        for p in out.pixels.iter_mut() {
            if rng.gen::<f64>() < spec.density {
                *p = if rng.gen::<bool>() { 1.0 } else { 0.0 };
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.75,
            seed: 0,
        }
    }
}

/// Disjoint, exhaustive train/test index sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..n`; the first `round(fraction * n)` indices (kept
/// within `1..n`) train, the rest test.
pub fn split(n: usize, spec: &SplitSpec) -> Result<Split, DataError> {
    if n < 2 {
        return Err(DataError::Invalid(format!("split of {n} images")));
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(DataError::Invalid(format!(
            "train fraction {}",
            spec.train_fraction
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_train = ((spec.train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let test = order.split_off(n_train);
    Ok(Split { train: order, test })
}

/// A corrupted input with its clean target.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub corrupted: Image,
    pub clean: Image,
}

/// Serializable position of a [`BatchStream`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamState {
    pub rng: RngState,
    pub order: Vec<usize>,
    pub cursor: usize,
    pub epoch: u64,
}

/// Exact position of a ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }

    /// `[seed as 4 LE words, stream, word_pos low, word_pos high]`.
    pub fn to_words(&self) -> Vec<u64> {
        let mut w: Vec<u64> = self
            .seed
            .chunks(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        w.push(self.stream);
        w.push(self.word_pos as u64);
        w.push((self.word_pos >> 64) as u64);
        w
    }

    pub fn from_words(w: &[u64]) -> Option<Self> {
        if w.len() != 7 {
            return None;
        }
        let mut seed = [0u8; 32];
        for (i, word) in w[..4].iter().enumerate() {
            seed[i * 8..(i + 1) * 8].copy_from_slice(&word.to_le_bytes());
        }
        Some(RngState {
            seed,
            stream: w[4],
            word_pos: (w[5] as u128) | ((w[6] as u128) << 64),
        })
    }
}

/// Endless stream of training batches. Each epoch reshuffles; every served
/// image gets fresh corruption; incomplete tail batches are dropped.
pub struct BatchStream {
    set: Arc<MnistSet>,
    indices: Vec<usize>,
    batch_size: usize,
    corruption: CorruptionSpec,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
}

impl BatchStream {
    pub fn new(
        set: Arc<MnistSet>,
        indices: Vec<usize>,
        batch_size: usize,
        corruption: CorruptionSpec,
        rng: ChaCha8Rng,
    ) -> Result<Self, DataError> {
        if batch_size == 0 {
            return Err(DataError::Invalid("batch size 0".into()));
        }
        if indices.len() < batch_size {
            return Err(DataError::Invalid(format!(
                "{} images cannot fill a batch of {batch_size}",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= set.len()) {
            return Err(DataError::Invalid(format!("image index {bad} out of range")));
        }
        corruption.validate(set.side())?;
        Ok(BatchStream {
            set,
            indices,
            batch_size,
            corruption,
            rng,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.indices.len() / self.batch_size
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Vec<SamplePair> {
        if self.order.is_empty() || self.cursor + self.batch_size > self.order.len() {
            self.order = self.indices.clone();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
            self.epoch += 1;
        }
        let picked = &self.order[self.cursor..self.cursor + self.batch_size];
        self.cursor += self.batch_size;
        picked
            .iter()
            .map(|&i| {
                let clean = self.set.image(i);
                let corrupted = corrupt(&clean, &self.corruption, &mut self.rng);
                SamplePair { corrupted, clean }
            })
            .collect()
    }

    pub fn state(&self) -> StreamState {
        StreamState {
            rng: RngState::capture(&self.rng),
            order: self.order.clone(),
            cursor: self.cursor,
            epoch: self.epoch,
        }
    }

    pub fn restore(&mut self, state: &StreamState) -> Result<(), DataError> {
        if state.cursor > state.order.len()
            || state.order.iter().any(|&i| i >= self.set.len())
        {
            return Err(DataError::Invalid("stream state does not fit this dataset".into()));
        }
        self.rng = state.rng.restore();
        self.order = state.order.clone();
        self.cursor = state.cursor;
        self.epoch = state.epoch;
        Ok(())
    }
}

/// Corrupts `images` in order from one stream seeded with `seed`.
pub fn corrupt_fixed(images: &[Image], spec: &CorruptionSpec, seed: u64) -> Vec<SamplePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    images
        .iter()
        .map(|clean| SamplePair {
            corrupted: corrupt(clean, spec, &mut rng),
            clean: clean.clone(),
        })
        .collect()
}

/// Writes a binary PGM (P5, maxval 255).
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pgm pixel count");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a binary PGM with maxval 255 into `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), DataError> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(DataError::Invalid("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(DataError::Invalid(format!(
            "unsupported PGM header {} / maxval {}",
            fields[0], fields[3]
        )));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| DataError::Invalid(format!("PGM dimension {s}")))
    };
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let data = bytes
        .get(pos..pos + w * h)
        .ok_or(DataError::Truncated {
            expected: pos + w * h,
            actual: bytes.len(),
            offset: pos,
        })?
        .to_vec();
    Ok((w, h, data))
}
