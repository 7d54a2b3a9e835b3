// SPDX-License-Identifier: Apache-2.0

//! Toy-model checkpoint layout. All integers are little-endian `u32`, all
//! parameters little-endian IEEE-754 `f64`.
//!
//! ```text
//! "AVSM"
//! version (= 1)
//! num_queries N, num_categories K, height H, width W
//! head_mode (0 = simplex, 1 = independent)
//! num_layers L, then L × (inputs, outputs)
//! mask logits      N·H·W      (query-major, row-major pixels)
//! class logits     N·(K+1)
//! per layer: weights outputs·inputs (row-major), bias outputs
//! ```

use std::fs;
use std::path::Path;

use crate::avsc::{AudioHead, Dense, HeadMode};
use crate::mask::{MaskLogits, MaskShape};
use crate::synth::model::ToyModel;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AVSM";
pub const CHECKPOINT_VERSION: u32 = 1;

fn err(reason: impl Into<String>) -> Error {
    Error::Format { format: "AVSM checkpoint", reason: reason.into() }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| err(format!("dimension {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(model: &ToyModel) -> Result<Vec<u8>> {
    let shape = model.shape();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION as usize)?;
    put_u32(&mut out, model.num_queries())?;
    put_u32(&mut out, model.num_categories())?;
    put_u32(&mut out, shape.height)?;
    put_u32(&mut out, shape.width)?;
    put_u32(&mut out, match model.head.mode() {
        HeadMode::Simplex => 0,
        HeadMode::Independent => 1,
    })?;
    let layers = model.head.layers();
    put_u32(&mut out, layers.len())?;
    for l in layers {
        put_u32(&mut out, l.inputs)?;
        put_u32(&mut out, l.outputs)?;
    }
    for m in &model.mask_logits {
        put_f64s(&mut out, m.values());
    }
    for row in &model.class_logits {
        put_f64s(&mut out, row);
    }
    for l in layers {
        put_f64s(&mut out, &l.weights);
        put_f64s(&mut out, &l.bias);
    }
    Ok(out)
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len()).ok_or_else(|| err("truncated"))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| err("block too large"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode_checkpoint(data: &[u8]) -> Result<ToyModel> {
    let mut r = Reader { data, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(err("bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(err(format!("unsupported version {version}")));
    }
    let n = r.u32()?;
    let k = r.u32()?;
    let shape = MaskShape::new(r.u32()?, r.u32()?)?;
    let mode = match r.u32()? {
        0 => HeadMode::Simplex,
        1 => HeadMode::Independent,
        m => return Err(err(format!("unknown head mode {m}"))),
    };
    let num_layers = r.u32()?;
    if num_layers == 0 {
        return Err(err("audio head has no layers"));
    }
    let dims = (0..num_layers).map(|_| Ok((r.u32()?, r.u32()?))).collect::<Result<Vec<_>>>()?;
    let mask_logits = (0..n)
        .map(|_| MaskLogits::from_values(shape, r.f64s(shape.len())?))
        .collect::<Result<Vec<_>>>()?;
    let class_logits = (0..n).map(|_| r.f64s(k + 1)).collect::<Result<Vec<_>>>()?;
    let layers = dims
        .into_iter()
        .map(|(inputs, outputs)| {
            let weights = r.f64s(inputs * outputs)?;
            let bias = r.f64s(outputs)?;
            Ok(Dense { inputs, outputs, weights, bias })
        })
        .collect::<Result<Vec<_>>>()?;
    if r.pos != data.len() {
        return Err(err(format!("{} trailing bytes", data.len() - r.pos)));
    }
    let head = AudioHead::from_layers(layers, mode)?;
    if head.num_categories() != k {
        return Err(err(format!("head emits {} categories, header says {k}", head.num_categories())));
    }
    ToyModel::new(mask_logits, class_logits, head)
}

pub fn write_checkpoint(path: impl AsRef<Path>, model: &ToyModel) -> Result<()> {
    fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ToyModel> {
    decode_checkpoint(&fs::read(path)?)
}
