//! Versioned little-endian binary model format.
//!
//! ```text
//! "RDBN"  u32 version  u8 mode  u8 flags  u16 reserved
//! u32 input_dim  u32 n_layers
//! per layer: u32 n_visible  u32 n_hidden  f64[m*n] W  f64[m] b  f64[n] c
//! if flags & HAS_HEAD: u32 input_dim  u32 n_classes  f64[d*k] W  f64[k] bias
//! ```
//! Arrays are row-major. Floats are stored by bit pattern, so a round trip is exact.

use std::path::Path;

use ndarray::{Array1, Array2};

use crate::dbn::{DbnMode, DbnModel};
use crate::error::{Error, Result};
use crate::finetune::{ClassifierModel, SoftmaxHead};
use crate::rbm::RbmLayer;

pub const MAGIC: &[u8; 4] = b"RDBN";
pub const FORMAT_VERSION: u32 = 1;

const HAS_HEAD: u8 = 1;
const REINFORCED_FORWARD: u8 = 2;

/// A stack with an optional classifier head, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SavedModel {
    pub dbn: DbnModel,
    pub head: Option<SoftmaxHead>,
    pub reinforced_forward: bool,
}

impl SavedModel {
    pub fn stack_only(dbn: DbnModel) -> Self {
        Self {
            dbn,
            head: None,
            reinforced_forward: false,
        }
    }

    pub fn from_classifier(model: &ClassifierModel) -> Self {
        Self {
            dbn: model.dbn().clone(),
            head: Some(model.head().clone()),
            reinforced_forward: model.reinforced_forward(),
        }
    }

    /// Rebuilds a classifier; a missing head becomes a zero head with `n_classes` outputs.
    pub fn into_classifier(self, n_classes: usize) -> Result<ClassifierModel> {
        let model = match self.head {
            Some(head) => ClassifierModel::with_head(self.dbn, head)?,
            None => ClassifierModel::new(self.dbn, n_classes)?,
        };
        Ok(model.with_reinforced_forward(self.reinforced_forward))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(match self.dbn.mode() {
            DbnMode::Standard => 0,
            DbnMode::Residual => 1,
        });
        let mut flags = 0;
        if self.head.is_some() {
            flags |= HAS_HEAD;
        }
        if self.reinforced_forward {
            flags |= REINFORCED_FORWARD;
        }
        out.push(flags);
        out.extend_from_slice(&0u16.to_le_bytes());
        put_u32(&mut out, self.dbn.input_dim());
        put_u32(&mut out, self.dbn.num_layers());
        for layer in self.dbn.layers() {
            put_u32(&mut out, layer.n_visible());
            put_u32(&mut out, layer.n_hidden());
            put_f64s(&mut out, layer.weights().iter());
            put_f64s(&mut out, layer.visible_bias().iter());
            put_f64s(&mut out, layer.hidden_bias().iter());
        }
        if let Some(head) = &self.head {
            put_u32(&mut out, head.input_dim());
            put_u32(&mut out, head.n_classes());
            put_f64s(&mut out, head.weights().iter());
            put_f64s(&mut out, head.bias().iter());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::ModelFormat("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::ModelFormat(format!("unsupported version {version}")));
        }
        let mode = match r.take(1)?[0] {
            0 => DbnMode::Standard,
            1 => DbnMode::Residual,
            other => return Err(Error::ModelFormat(format!("unknown mode byte {other}"))),
        };
        let flags = r.take(1)?[0];
        if flags & !(HAS_HEAD | REINFORCED_FORWARD) != 0 {
            return Err(Error::ModelFormat(format!("unknown flags {flags:#04x}")));
        }
        r.take(2)?;
        let input_dim = r.u32()? as usize;
        let n_layers = r.u32()? as usize;
        if n_layers == 0 {
            return Err(Error::ModelFormat("model has no layers".into()));
        }
        let mut layers = Vec::with_capacity(n_layers.min(64));
        for _ in 0..n_layers {
            let m = r.u32()? as usize;
            let n = r.u32()? as usize;
            let w = r.matrix(m, n)?;
            let b = r.vector(m)?;
            let c = r.vector(n)?;
            layers.push(RbmLayer::from_parts(w, b, c)?);
        }
        if layers[0].n_visible() != input_dim {
            return Err(Error::ModelFormat(format!(
                "input_dim {input_dim} disagrees with first layer ({})",
                layers[0].n_visible()
            )));
        }
        let dbn = DbnModel::from_layers(layers, mode)?;
        let head = if flags & HAS_HEAD != 0 {
            let d = r.u32()? as usize;
            let k = r.u32()? as usize;
            let w = r.matrix(d, k)?;
            let bias = r.vector(k)?;
            Some(SoftmaxHead::from_parts(w, bias)?)
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::ModelFormat(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            dbn,
            head,
            reinforced_forward: flags & REINFORCED_FORWARD != 0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("dimension exceeds u32");
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s<'a>(out: &mut Vec<u8>, values: impl Iterator<Item = &'a f64>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::ModelFormat("truncated model file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn floats(&mut self, count: usize) -> Result<Vec<f64>> {
        let len = count
            .checked_mul(8)
            .ok_or_else(|| Error::ModelFormat("array size overflow".into()))?;
        let raw = self.take(len)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn vector(&mut self, n: usize) -> Result<Array1<f64>> {
        Ok(Array1::from(self.floats(n)?))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::ModelFormat("array size overflow".into()))?;
        let data = self.floats(count)?;
        Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::ModelFormat(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    fn random_classifier(widths: &[usize], mode: DbnMode, seed: u64) -> ClassifierModel {
        let mut rng = RngStream::new(seed);
        let dbn = DbnModel::new(&widths[..widths.len() - 1], mode, 0.5, &mut rng).unwrap();
        let d = *widths.last().unwrap();
        let h = widths[widths.len() - 2];
        let w = Array2::from_shape_fn((h, d), |_| rng.normal(0.0, 1.0));
        let b = Array1::from_shape_fn(d, |_| rng.normal(0.0, 1.0));
        ClassifierModel::with_head(dbn, SoftmaxHead::from_parts(w, b).unwrap()).unwrap()
    }

    fn assert_bits_equal(a: &SavedModel, b: &SavedModel) {
        assert_eq!(a.dbn.mode(), b.dbn.mode());
        assert_eq!(a.reinforced_forward, b.reinforced_forward);
        for (la, lb) in a.dbn.layers().iter().zip(b.dbn.layers()) {
            let bits = |l: &RbmLayer| -> Vec<u64> {
                l.weights()
                    .iter()
                    .chain(l.visible_bias())
                    .chain(l.hidden_bias())
                    .map(|x| x.to_bits())
                    .collect()
            };
            assert_eq!(bits(la), bits(lb));
        }
        assert_eq!(a.head, b.head);
    }

    #[test]
    fn round_trip_with_head() {
        let model = random_classifier(&[7, 5, 4, 3], DbnMode::Residual, 9).with_reinforced_forward(true);
        let saved = SavedModel::from_classifier(&model);
        let back = SavedModel::decode(&saved.encode()).unwrap();
        assert_bits_equal(&saved, &back);
        let rebuilt = back.into_classifier(3).unwrap();
        assert!(rebuilt.reinforced_forward());
        assert_eq!(rebuilt.dbn(), model.dbn());
    }

    #[test]
    fn round_trip_stack_only_via_file() {
        let mut rng = RngStream::new(1);
        let dbn = DbnModel::new(&[6, 3], DbnMode::Standard, 0.1, &mut rng).unwrap();
        let saved = SavedModel::stack_only(dbn);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rdbn");
        saved.save(&path).unwrap();
        let back = SavedModel::load(&path).unwrap();
        assert_bits_equal(&saved, &back);
        assert!(back.head.is_none());
        assert!(SavedModel::load(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn rejects_corrupt_input() {
        let saved = SavedModel::from_classifier(&random_classifier(&[4, 3, 2], DbnMode::Standard, 2));
        let bytes = saved.encode();
        assert!(SavedModel::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(SavedModel::decode(&extra).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(SavedModel::decode(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(SavedModel::decode(&bad).is_err());
        let mut bad = bytes;
        bad[8] = 7;
        assert!(SavedModel::decode(&bad).is_err());
        assert!(SavedModel::decode(&[]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn round_trip_is_bit_exact(
            widths in proptest::collection::vec(1usize..6, 3..6),
            residual in any::<bool>(),
            seed in any::<u64>(),
        ) {
            let mode = if residual { DbnMode::Residual } else { DbnMode::Standard };
            let mut widths = widths;
            *widths.last_mut().unwrap() += 1;
            let model = random_classifier(&widths, mode, seed);
            let saved = SavedModel::from_classifier(&model);
            let bytes = saved.encode();
            let back = SavedModel::decode(&bytes).unwrap();
            prop_assert_eq!(back.encode(), bytes);
        }
    }
}
