//! Binary network checkpoints.
//!
//! Layout (little-endian): the magic `RECOS1\0\0`, a `u32` version, the
//! input shape (`u32` rank then `u32` dims), a `u32` layer count and, per
//! layer, its name, kind, rectifier and bank (`u32` anchors, `u32` dim,
//! `anchors·dim` weights then `anchors` mean coefficients as `f32`).

use std::fs;
use std::path::Path;

use crate::error::{CheckpointError, Result};
use crate::network::{LayerKind, LayerSpec, Network};
use crate::numerics::{Shape, Tensor};
use crate::recos::{AnchorBank, Rectifier};

pub const MAGIC: &[u8; 8] = b"RECOS1\0\0";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("dimension fits in u32").to_le_bytes());
}

pub fn to_bytes(net: &Network) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 4 * net.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, net.input_shape().rank());
    net.input_shape().dims().iter().for_each(|&d| put_u32(&mut out, d));
    put_u32(&mut out, net.depth());
    for layer in net.layers() {
        put_u32(&mut out, layer.name.len());
        out.extend_from_slice(layer.name.as_bytes());
        match layer.spec.kind {
            LayerKind::Conv {
                filters,
                window,
                stride,
                pool,
            } => {
                out.push(0);
                put_u32(&mut out, filters);
                put_u32(&mut out, window);
                put_u32(&mut out, stride);
                out.push(u8::from(pool));
            }
            LayerKind::FullyConnected { units } => {
                out.push(1);
                put_u32(&mut out, units);
            }
        }
        let (tag, param) = match layer.spec.rectifier {
            Rectifier::Sigmoid => (0u8, 0.0f32),
            Rectifier::Relu => (1, 0.0),
            Rectifier::PRelu { slope } => (2, slope),
            Rectifier::TRelu { phi } => (3, phi),
        };
        out.push(tag);
        out.extend_from_slice(&param.to_le_bytes());
        let bank = layer.bank();
        put_u32(&mut out, bank.anchors());
        put_u32(&mut out, bank.dim());
        for v in bank.weights().iter().chain(bank.bias()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CheckpointError::Malformed(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn usize(&mut self) -> Result<usize, CheckpointError> {
        Ok(self.u32()? as usize)
    }

    fn f32(&mut self) -> Result<f32, CheckpointError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| CheckpointError::Malformed("parameter count overflows".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

fn malformed(e: impl std::fmt::Display) -> CheckpointError {
    CheckpointError::Malformed(e.to_string())
}

pub fn from_bytes(bytes: &[u8]) -> Result<Network, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic(bytes.to_vec()))?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic.to_vec()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let rank = r.usize()?;
    let dims = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>, _>>()?;
    let input = Shape::new(dims).map_err(malformed)?;
    let depth = r.usize()?;
    let mut specs = Vec::new();
    let mut names = Vec::new();
    let mut banks = Vec::new();
    for _ in 0..depth {
        let len = r.usize()?;
        names.push(String::from_utf8(r.take(len)?.to_vec()).map_err(malformed)?);
        let kind = match r.u8()? {
            0 => LayerKind::Conv {
                filters: r.usize()?,
                window: r.usize()?,
                stride: r.usize()?,
                pool: r.u8()? != 0,
            },
            1 => LayerKind::FullyConnected { units: r.usize()? },
            t => return Err(CheckpointError::Malformed(format!("unknown layer kind {t}"))),
        };
        let (tag, param) = (r.u8()?, r.f32()?);
        let rectifier = match tag {
            0 => Rectifier::Sigmoid,
            1 => Rectifier::Relu,
            2 => Rectifier::prelu(param).map_err(malformed)?,
            3 => Rectifier::trelu(param).map_err(malformed)?,
            t => return Err(CheckpointError::Malformed(format!("unknown rectifier {t}"))),
        };
        specs.push(LayerSpec::new(kind, rectifier));
        let (anchors, dim) = (r.usize()?, r.usize()?);
        if anchors != kind.width() {
            return Err(CheckpointError::Malformed(format!(
                "layer width {} but {anchors} stored anchors",
                kind.width()
            )));
        }
        let count = anchors
            .checked_mul(dim)
            .ok_or_else(|| CheckpointError::Malformed("parameter count overflows".into()))?;
        let weights = r.f32s(count)?;
        let bias = r.f32s(anchors)?;
        let w = Tensor::matrix(anchors, dim, weights).map_err(malformed)?;
        banks.push(AnchorBank::new(w, bias).map_err(malformed)?);
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let mut net = Network::with_names(input, &specs, names).map_err(malformed)?;
    for (l, bank) in banks.into_iter().enumerate() {
        net.set_bank(l, bank).map_err(malformed)?;
    }
    Ok(net)
}

pub fn save(net: &Network, path: &Path) -> Result<(), CheckpointError> {
    Ok(fs::write(path, to_bytes(net))?)
}

pub fn load(path: &Path) -> Result<Network, CheckpointError> {
    from_bytes(&fs::read(path)?)
}
