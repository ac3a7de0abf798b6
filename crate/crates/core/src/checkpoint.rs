//! Binary parameter checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic          8 bytes   b"FAIRKMS\0"
//! version        u32       1
//! layer_count    u32       encoder layers + 2
//! encoder_count  u32
//! then for each layer (encoder[0..], expr_head, attr_head):
//!   activation   u8        0 = linear, 1 = relu
//!   inputs       u32
//!   outputs      u32
//!   weights      f64 * inputs * outputs, row-major (input index outer)
//!   bias         f64 * outputs
//! ```
//!
//! No trailing bytes are permitted.

use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::model::{Activation, DenseLayer, ModelParams};

pub const MAGIC: &[u8; 8] = b"FAIRKMS\0";
pub const VERSION: u32 = 1;

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&((params.encoder.len() + 2) as u32).to_le_bytes());
    out.extend_from_slice(&(params.encoder.len() as u32).to_le_bytes());
    for layer in params.layers() {
        out.push(match layer.activation {
            Activation::Linear => 0,
            Activation::Relu => 1,
        });
        out.extend_from_slice(&(layer.inputs() as u32).to_le_bytes());
        out.extend_from_slice(&(layer.outputs() as u32).to_le_bytes());
        for v in layer.weights.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in layer.bias.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode(buf: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let enc = r.u32()? as usize;
    if enc == 0 || count != enc + 2 {
        return Err(Error::Checkpoint(format!("layer count {count} inconsistent with {enc} encoder layers")));
    }
    let mut layers = Vec::with_capacity(count);
    for i in 0..count {
        let activation = match r.take(1)?[0] {
            0 => Activation::Linear,
            1 => Activation::Relu,
            other => return Err(Error::Checkpoint(format!("layer {i}: unknown activation tag {other}"))),
        };
        let inputs = r.u32()? as usize;
        let outputs = r.u32()? as usize;
        let weights = Array2::from_shape_vec((inputs, outputs), r.f64s(inputs * outputs)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let bias = Array1::from(r.f64s(outputs)?);
        layers.push(DenseLayer {
            weights,
            bias,
            activation,
        });
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let attr = layers.pop().expect("attr head");
    let expr = layers.pop().expect("expr head");
    ModelParams::from_layers(layers, expr, attr).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}
