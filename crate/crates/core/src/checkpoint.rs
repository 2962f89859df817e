//! Binary checkpoint container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "DATM" | u32 version
//! hyperparameters: f64 lambda, f64 alpha, u64 batch_size, u64 seed, u64 epochs, u8 eq4_literal,
//!   u64 input_dim, u64 n + n×i32 context, u64 subsample, u64 n + n×u64 feature widths,
//!   u64 n + n×u64 task widths, u64 classes, u64 n + n×u64 domain widths, u64 tap
//! for each group (θ_f, θ_y, θ_d): u32 layer count, then per layer
//!   u64 rows, u64 cols, rows×cols f64 weights (row-major), rows f64 bias
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::DenseLayer;
use crate::model::{Architecture, DatModel, Group, HyperParams};
use crate::numeric::Matrix;

pub const MAGIC: &[u8; 4] = b"DATM";
pub const VERSION: u32 = 1;

/// Serializes a model with the hyperparameters it was trained under.
pub fn encode(model: &DatModel, hp: &HyperParams) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.f64(model.lambda());
    w.f64(hp.alpha);
    w.u64(hp.batch_size as u64);
    w.u64(hp.seed);
    w.u64(hp.epochs as u64);
    w.0.push(model.eq4_literal() as u8);
    let arch = model.arch();
    w.u64(arch.input_dim as u64);
    w.u64(arch.context.len() as u64);
    for &c in &arch.context {
        w.0.extend_from_slice(&c.to_le_bytes());
    }
    w.u64(arch.subsample as u64);
    w.widths(&arch.feature_widths);
    w.widths(&arch.task_widths);
    w.u64(arch.classes as u64);
    w.widths(&arch.domain_widths);
    w.u64(arch.tap as u64);
    for g in Group::ALL {
        let layers = model.group(g);
        w.u32(layers.len() as u32);
        for l in layers {
            w.u64(l.weights.rows() as u64);
            w.u64(l.weights.cols() as u64);
            for &v in l.weights.data() {
                w.f64(v);
            }
            for &b in &l.bias {
                w.f64(b);
            }
        }
    }
    w.0
}

pub fn decode(bytes: &[u8]) -> Result<(DatModel, HyperParams)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a DATM checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let lambda = r.f64()?;
    let alpha = r.f64()?;
    let batch_size = r.usize()?;
    let seed = r.u64()?;
    let epochs = r.usize()?;
    let eq4_literal = match r.take(1)?[0] {
        0 => false,
        1 => true,
        b => return Err(Error::Format(format!("bad eq4 flag {b}"))),
    };
    let input_dim = r.usize()?;
    let n = r.len(4)?;
    let mut context = Vec::with_capacity(n);
    for _ in 0..n {
        context.push(i32::from_le_bytes(r.take(4)?.try_into().unwrap()));
    }
    let subsample = r.usize()?;
    let feature_widths = r.widths()?;
    let task_widths = r.widths()?;
    let classes = r.usize()?;
    let domain_widths = r.widths()?;
    let tap = r.usize()?;
    let arch = Architecture { input_dim, context, subsample, feature_widths, task_widths, classes, domain_widths, tap };

    let mut groups = Vec::with_capacity(3);
    for _ in Group::ALL {
        let count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let rows = r.usize()?;
            let cols = r.usize()?;
            let size = rows
                .checked_mul(cols)
                .filter(|&s| s <= r.remaining() / 8)
                .ok_or_else(|| Error::Format(format!("layer {rows}x{cols} exceeds file size")))?;
            let mut data = Vec::with_capacity(size);
            for _ in 0..size {
                data.push(r.f64()?);
            }
            let mut bias = Vec::with_capacity(rows);
            for _ in 0..rows {
                bias.push(r.f64()?);
            }
            layers.push(DenseLayer::new(Matrix::from_vec(rows, cols, data)?, bias)?);
        }
        groups.push(layers);
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", r.remaining())));
    }
    let domain = groups.pop().unwrap();
    let task = groups.pop().unwrap();
    let feature = groups.pop().unwrap();
    let hp = HyperParams { lambda, alpha, batch_size, seed, epochs, arch: arch.clone(), eq4_literal };
    let model = DatModel::from_parts(arch, lambda, eq4_literal, feature, task, domain)?;
    Ok((model, hp))
}

pub fn save(path: impl AsRef<Path>, model: &DatModel, hp: &HyperParams) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(model, hp)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(DatModel, HyperParams)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn widths(&mut self, ws: &[usize]) {
        self.u64(ws.len() as u64);
        for &w in ws {
            self.u64(w as u64);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("size overflows usize".into()))
    }

    /// A count whose items occupy `item` bytes each.
    fn len(&mut self, item: usize) -> Result<usize> {
        let n = self.usize()?;
        if n > self.remaining() / item {
            return Err(Error::Format("count exceeds file size".into()));
        }
        Ok(n)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn widths(&mut self) -> Result<Vec<usize>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.usize()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_same(a: &DatModel, b: &DatModel) {
        assert_eq!(a.arch(), b.arch());
        assert_eq!(a.lambda().to_bits(), b.lambda().to_bits());
        for id in a.param_ids() {
            assert_eq!(a.param(id).to_bits(), b.param(id).to_bits());
        }
    }

    #[test]
    fn starts_with_magic_and_version() {
        let hp = HyperParams::default();
        let bytes = encode(&DatModel::build(&hp).unwrap(), &hp);
        assert_eq!(&bytes[..4], b"DATM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
    }

    #[test]
    fn rejects_corruption() {
        let hp = HyperParams::default();
        let bytes = encode(&DatModel::build(&hp).unwrap(), &hp);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn round_trip_is_bit_exact(
            seed in any::<u64>(),
            lambda in -1.0f64..1.0,
            widths in proptest::collection::vec(1usize..6, 1..4),
            tap_pick in 0usize..4,
            literal in any::<bool>(),
        ) {
            let tap = 1 + tap_pick % widths.len();
            let hp = HyperParams {
                lambda,
                seed,
                eq4_literal: literal,
                arch: Architecture {
                    input_dim: 3,
                    context: vec![-2, 0, 1],
                    subsample: 2,
                    feature_widths: widths,
                    task_widths: vec![3],
                    classes: 3,
                    domain_widths: vec![2],
                    tap,
                },
                ..HyperParams::default()
            };
            let model = DatModel::build(&hp).unwrap();
            let bytes = encode(&model, &hp);
            let (back, hp_back) = decode(&bytes).unwrap();
            assert_same(&model, &back);
            prop_assert_eq!(&hp_back, &hp);
            prop_assert_eq!(encode(&back, &hp_back), bytes);
        }
    }
}
