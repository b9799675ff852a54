//! IDX image/label files, binarization and mini-batch plans.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const NUM_CLASSES: usize = 10;

const GZIP_PREFIX: [u8; 2] = [0x1f, 0x8b];

/// Unpacked IDX image tensor: `count` images of `rows x cols` bytes, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl RawImages {
    pub fn image(&self, index: usize) -> &[u8] {
        let size = self.rows * self.cols;
        &self.pixels[index * size..(index + 1) * size]
    }
}

/// Decompresses `bytes` if they start with the gzip magic, otherwise borrows them.
fn maybe_gunzip(bytes: &[u8]) -> Result<std::borrow::Cow<'_, [u8]>> {
    if bytes.starts_with(&GZIP_PREFIX) {
        let mut out = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut out)
            .map_err(|e| Error::Idx(format!("gzip: {e}")))?;
        Ok(out.into())
    } else {
        Ok(bytes.into())
    }
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx(format!("truncated header at byte {offset}")))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != expected {
        return Err(Error::Idx(format!(
            "wrong magic number {magic:#010x}, expected {expected:#010x}"
        )));
    }
    Ok(())
}

/// Parses an IDX3 image file (raw or gzip-wrapped). Only 28x28 images are accepted.
pub fn load_idx_images(bytes: &[u8]) -> Result<RawImages> {
    let bytes = maybe_gunzip(bytes)?;
    check_magic(&bytes, IMAGE_MAGIC)?;
    let count = read_be_u32(&bytes, 4)? as usize;
    let rows = read_be_u32(&bytes, 8)? as usize;
    let cols = read_be_u32(&bytes, 12)? as usize;
    if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
        return Err(Error::Idx(format!(
            "images are {rows}x{cols}, only {IMAGE_SIDE}x{IMAGE_SIDE} is supported"
        )));
    }
    let body = &bytes[16..];
    let expected = count * rows * cols;
    if body.len() != expected {
        return Err(Error::Idx(format!(
            "image payload has {} bytes, header promises {expected}",
            body.len()
        )));
    }
    Ok(RawImages {
        count,
        rows,
        cols,
        pixels: body.to_vec(),
    })
}

/// Parses an IDX1 label file (raw or gzip-wrapped); every label must be 0-9.
pub fn load_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let bytes = maybe_gunzip(bytes)?;
    check_magic(&bytes, LABEL_MAGIC)?;
    let count = read_be_u32(&bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::Idx(format!(
            "label payload has {} bytes, header promises {count}",
            body.len()
        )));
    }
    if let Some((i, &l)) = body.iter().enumerate().find(|(_, &l)| usize::from(l) >= NUM_CLASSES) {
        return Err(Error::Idx(format!("label {l} at index {i} is outside 0-9")));
    }
    Ok(body.to_vec())
}

pub fn encode_idx_images(images: &RawImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for word in [
        IMAGE_MAGIC,
        images.count as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&word.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Pixel becomes 1 iff `pixel / 255 > threshold`.
pub fn binarize(raw: &RawImages, threshold: f64) -> Array2<f64> {
    let size = raw.rows * raw.cols;
    Array2::from_shape_fn((raw.count, size), |(r, c)| {
        if f64::from(raw.pixels[r * size + c]) / 255.0 > threshold {
            1.0
        } else {
            0.0
        }
    })
}

/// Grey levels scaled to `[0, 1]`, for runs that skip binarization.
pub fn intensities(raw: &RawImages) -> Array2<f64> {
    let size = raw.rows * raw.cols;
    Array2::from_shape_fn((raw.count, size), |(r, c)| {
        f64::from(raw.pixels[r * size + c]) / 255.0
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub name: String,
    images: Array2<f64>,
    labels: Vec<usize>,
}

impl DatasetSplit {
    pub fn new(name: impl Into<String>, images: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if images.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                context: "dataset labels",
                expected: images.nrows(),
                actual: labels.len(),
            });
        }
        if images.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            name: name.into(),
            images: images.as_standard_layout().into_owned(),
            labels,
        })
    }

    pub fn images(&self) -> ArrayView2<'_, f64> {
        self.images.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.images.ncols()
    }

    /// Keeps only the first `n` samples (or all of them if there are fewer).
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            name: self.name.clone(),
            images: self.images.slice(ndarray::s![..n, ..]).to_owned(),
            labels: self.labels[..n].to_vec(),
        }
    }

    pub fn select(&self, indices: &[usize]) -> (Array2<f64>, Vec<usize>) {
        (
            self.images.select(Axis(0), indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// How raw grey levels become visible-unit values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PixelEncoding {
    Binary { threshold: f64 },
    Intensity,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an image/label file pair into a split.
pub fn load_split(
    name: &str,
    images_path: &Path,
    labels_path: &Path,
    encoding: PixelEncoding,
    limit: Option<usize>,
) -> Result<DatasetSplit> {
    let raw = load_idx_images(&read_file(images_path)?)
        .map_err(|e| Error::Idx(format!("{}: {e}", images_path.display())))?;
    let labels = load_idx_labels(&read_file(labels_path)?)
        .map_err(|e| Error::Idx(format!("{}: {e}", labels_path.display())))?;
    if raw.count != labels.len() {
        return Err(Error::Idx(format!(
            "{} images but {} labels",
            raw.count,
            labels.len()
        )));
    }
    let images = match encoding {
        PixelEncoding::Binary { threshold } => binarize(&raw, threshold),
        PixelEncoding::Intensity => intensities(&raw),
    };
    let split = DatasetSplit::new(name, images, labels.into_iter().map(usize::from).collect())?;
    Ok(match limit {
        Some(n) => split.truncated(n),
        None => split,
    })
}

/// Looks for `stem` or `stem.gz` inside `dir`.
pub fn find_idx_file(dir: &Path, stem: &str) -> Option<PathBuf> {
    [dir.join(stem), dir.join(format!("{stem}.gz"))]
        .into_iter()
        .find(|p| p.is_file())
}

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Shuffled partition of `0..n` into consecutive batches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    epoch_seed: u64,
    batches: Vec<Vec<usize>>,
}

impl BatchPlan {
    pub fn epoch_seed(&self) -> u64 {
        self.epoch_seed
    }

    pub fn batches(&self) -> &[Vec<usize>] {
        &self.batches
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }
}

/// Draws an epoch seed from `rng`, shuffles `0..n` with it and cuts the
/// permutation into slices of `batch_size` (the last may be shorter).
pub fn make_batches(n: usize, batch_size: usize, rng: &mut RngStream) -> Result<BatchPlan> {
    if n == 0 || batch_size == 0 {
        return Err(Error::InvalidArgument(format!(
            "need n >= 1 and batch_size >= 1, got n={n}, batch_size={batch_size}"
        )));
    }
    let epoch_seed = rng.next_u64();
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::new(epoch_seed).shuffle(&mut order);
    let batches = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(BatchPlan {
        epoch_seed,
        batches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use flate2::Compression;
    use proptest::prelude::*;
    use std::io::Write;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut out = magic.to_be_bytes().to_vec();
        for d in dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out
    }

    #[test]
    fn minimal_image_file() {
        let mut bytes = header(IMAGE_MAGIC, &[1, 28, 28]);
        bytes.extend(std::iter::repeat_n(0u8, 784));
        let raw = load_idx_images(&bytes).unwrap();
        assert_eq!(raw.count, 1);
        assert!(raw.image(0).iter().all(|&p| p == 0));
    }

    #[test]
    fn image_errors() {
        let mut wrong_magic = header(LABEL_MAGIC, &[1, 28, 28]);
        wrong_magic.extend(std::iter::repeat_n(0u8, 784));
        assert!(load_idx_images(&wrong_magic).is_err());

        let mut truncated = header(IMAGE_MAGIC, &[2, 28, 28]);
        truncated.extend(std::iter::repeat_n(0u8, 784));
        assert!(load_idx_images(&truncated).is_err());

        let mut odd = header(IMAGE_MAGIC, &[1, 32, 32]);
        odd.extend(std::iter::repeat_n(0u8, 1024));
        assert!(load_idx_images(&odd).is_err());

        assert!(load_idx_images(&[0, 0, 8]).is_err());
    }

    #[test]
    fn label_file() {
        let mut bytes = header(LABEL_MAGIC, &[2]);
        bytes.extend_from_slice(&[3, 7]);
        assert_eq!(load_idx_labels(&bytes).unwrap(), vec![3, 7]);

        let mut bad = header(LABEL_MAGIC, &[1]);
        bad.push(12);
        assert!(load_idx_labels(&bad).is_err());

        let mut short = header(LABEL_MAGIC, &[3]);
        short.push(1);
        assert!(load_idx_labels(&short).is_err());
    }

    #[test]
    fn gzip_is_sniffed() {
        let labels = encode_idx_labels(&[1, 2, 3, 9]);
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&labels).unwrap();
        let gz = enc.finish().unwrap();
        assert_eq!(load_idx_labels(&gz).unwrap(), vec![1, 2, 3, 9]);
    }

    #[test]
    fn binarize_examples() {
        let mut pixels = vec![0u8; 784];
        let raw = RawImages { count: 1, rows: 28, cols: 28, pixels: pixels.clone() };
        assert!(binarize(&raw, 0.3).iter().all(|&x| x == 0.0));

        pixels[0] = 128;
        pixels[1] = 127;
        pixels[2] = 255;
        pixels[3] = 254;
        let raw = RawImages { count: 1, rows: 28, cols: 28, pixels };
        let b = binarize(&raw, 0.5);
        assert_eq!(b[[0, 0]], 1.0);
        assert_eq!(b[[0, 1]], 0.0);
        let strict = binarize(&raw, 0.999);
        assert_eq!(strict.row(0).sum(), 1.0);
        assert_eq!(strict[[0, 2]], 1.0);
    }

    #[test]
    fn binarize_idempotent_on_binary_data() {
        let pixels: Vec<u8> = (0..784).map(|i| if i % 3 == 0 { 255 } else { 0 }).collect();
        let raw = RawImages { count: 1, rows: 28, cols: 28, pixels };
        let once = binarize(&raw, 0.5);
        let again_raw = RawImages {
            count: 1,
            rows: 28,
            cols: 28,
            pixels: once.iter().map(|&x| (x * 255.0) as u8).collect(),
        };
        assert_eq!(binarize(&again_raw, 0.5), once);
    }

    #[test]
    fn batch_examples() {
        let mut rng = RngStream::new(1);
        let plan = make_batches(5, 2, &mut rng).unwrap();
        let sizes: Vec<usize> = plan.batches().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        assert_eq!(make_batches(128, 128, &mut rng).unwrap().len(), 1);
        assert!(make_batches(0, 4, &mut rng).is_err());
        assert!(make_batches(4, 0, &mut rng).is_err());
    }

    #[test]
    fn successive_epochs_reshuffle() {
        let mut rng = RngStream::new(5);
        let a = make_batches(100, 10, &mut rng).unwrap();
        let b = make_batches(100, 10, &mut rng).unwrap();
        assert_ne!(a.epoch_seed(), b.epoch_seed());
        assert_ne!(a.batches(), b.batches());
    }

    #[test]
    fn dataset_split_validates() {
        assert!(DatasetSplit::new("x", Array2::zeros((3, 4)), vec![0, 1]).is_err());
        assert!(DatasetSplit::new("x", Array2::from_elem((1, 4), 2.0), vec![0]).is_err());
        let s = DatasetSplit::new("x", Array2::zeros((3, 4)), vec![0, 1, 2]).unwrap();
        assert_eq!(s.truncated(2).len(), 2);
        assert_eq!(s.truncated(10).len(), 3);
    }

    proptest! {
        #[test]
        fn batches_form_a_permutation(n in 1usize..500, bs in 1usize..64, seed in any::<u64>()) {
            let plan = make_batches(n, bs, &mut RngStream::new(seed)).unwrap();
            let mut all: Vec<usize> = plan.batches().iter().flatten().copied().collect();
            prop_assert!(plan.batches().iter().all(|b| !b.is_empty() && b.len() <= bs));
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn idx_round_trip(count in 0usize..4, seed in any::<u64>(), labels in proptest::collection::vec(0u8..10, 0..40)) {
            let mut rng = RngStream::new(seed);
            let pixels: Vec<u8> = (0..count * 784).map(|_| (rng.next_u64() & 0xff) as u8).collect();
            let raw = RawImages { count, rows: 28, cols: 28, pixels };
            prop_assert_eq!(load_idx_images(&encode_idx_images(&raw)).unwrap(), raw);
            prop_assert_eq!(load_idx_labels(&encode_idx_labels(&labels)).unwrap(), labels);
        }
    }
}
