//! Versioned binary model checkpoint.
//!
//! Layout (all integers little-endian):
//!   magic "HNS1" | u32 version | input dims | u32 layer count
//!   per layer: u8 kind tag, kind dims (u32s), u8 flags (bit0 masked,
//!   bit1 prune-eligible)
//!   per weighted layer: weights then bias, each as u8 dtype (0 = f32),
//!   u8 ndim, u32 dims, raw f32 data
//!   u8 has_prune_mask; if set, per weighted layer: u32 unit count + keep
//!   bitset (LSB-first, byte-padded)

use crate::error::{Error, Result};
use crate::nn::{Dims, LayerKind, LayerSpec, Model};
use crate::prune::PruneMask;
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"HNS1";
pub const VERSION: u32 = 1;

struct Counter<W: Write> {
    inner: W,
}

impl<W: Write> Counter<W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        self.inner.write_all(&[v])?;
        Ok(())
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn bytes(&mut self, v: &[u8]) -> Result<()> {
        self.inner.write_all(v)?;
        Ok(())
    }
}

struct Cursor<R: Read> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.offset,
            message: message.into(),
        }
    }
    fn read(&mut self, buf: &mut [u8]) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| Error::Parse {
            offset: at,
            message: format!("truncated: {e}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }
    fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.read(&mut b)?;
        Ok(b[0])
    }
    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
}

fn write_tensor<W: Write>(w: &mut Counter<W>, t: &Tensor) -> Result<()> {
    w.u8(0)?; // dtype f32
    w.u8(t.shape().len() as u8)?;
    for &d in t.shape() {
        w.u32(d as u32)?;
    }
    let mut raw = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    w.bytes(&raw)
}

fn read_tensor<R: Read>(r: &mut Cursor<R>) -> Result<Tensor> {
    let dtype = r.u8()?;
    if dtype != 0 {
        return Err(r.fail(format!("unsupported dtype {dtype}")));
    }
    let ndim = r.u8()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u32()? as usize);
    }
    let len: usize = shape.iter().product();
    let mut raw = vec![0u8; len * 4];
    r.read(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(&shape, data)
}

const TAG_DENSE: u8 = 0;
const TAG_CONV: u8 = 1;
const TAG_POOL: u8 = 2;
const TAG_RELU: u8 = 3;
const TAG_FLATTEN: u8 = 4;
const TAG_BN: u8 = 5;

pub fn save(path: &Path, model: &Model, prune: Option<&PruneMask>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = Counter { inner: std::io::BufWriter::new(file) };
    w.bytes(MAGIC)?;
    w.u32(VERSION)?;
    match model.input {
        Dims::Flat(d) => {
            w.u8(0)?;
            w.u32(d as u32)?;
        }
        Dims::Chw(c, h, wd) => {
            w.u8(1)?;
            w.u32(c as u32)?;
            w.u32(h as u32)?;
            w.u32(wd as u32)?;
        }
    }
    w.u32(model.specs.len() as u32)?;
    for spec in &model.specs {
        match spec.kind {
            LayerKind::Dense { in_features, out_features } => {
                w.u8(TAG_DENSE)?;
                w.u32(in_features as u32)?;
                w.u32(out_features as u32)?;
            }
            LayerKind::Conv2d { in_channels, out_channels } => {
                w.u8(TAG_CONV)?;
                w.u32(in_channels as u32)?;
                w.u32(out_channels as u32)?;
            }
            LayerKind::MaxPool2d => w.u8(TAG_POOL)?,
            LayerKind::Relu => w.u8(TAG_RELU)?,
            LayerKind::Flatten => w.u8(TAG_FLATTEN)?,
            LayerKind::BatchNorm2d { channels } => {
                w.u8(TAG_BN)?;
                w.u32(channels as u32)?;
            }
        }
        let flags = (spec.masked as u8) | ((spec.prune_eligible as u8) << 1);
        w.u8(flags)?;
    }
    for l in model.weighted_layers() {
        write_tensor(&mut w, model.weights[l].as_ref().unwrap())?;
        write_tensor(&mut w, model.biases[l].as_ref().unwrap())?;
    }
    match prune {
        None => w.u8(0)?,
        Some(mask) => {
            w.u8(1)?;
            for l in model.weighted_layers() {
                let keep = mask.keep[l]
                    .as_ref()
                    .ok_or_else(|| Error::State(format!("prune mask missing layer {l}")))?;
                w.u32(keep.len() as u32)?;
                let mut byte = 0u8;
                for (i, &k) in keep.iter().enumerate() {
                    if k {
                        byte |= 1 << (i % 8);
                    }
                    if i % 8 == 7 {
                        w.u8(byte)?;
                        byte = 0;
                    }
                }
                if keep.len() % 8 != 0 {
                    w.u8(byte)?;
                }
            }
        }
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, Option<PruneMask>)> {
    let file = std::fs::File::open(path)?;
    let mut r = Cursor { inner: std::io::BufReader::new(file), offset: 0 };
    let mut magic = [0u8; 4];
    r.read(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let input = match r.u8()? {
        0 => Dims::Flat(r.u32()? as usize),
        1 => {
            let c = r.u32()? as usize;
            let h = r.u32()? as usize;
            let wd = r.u32()? as usize;
            Dims::Chw(c, h, wd)
        }
        tag => return Err(r.fail(format!("unknown input dims tag {tag}"))),
    };
    let layer_count = r.u32()? as usize;
    let mut specs = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let kind = match r.u8()? {
            TAG_DENSE => LayerKind::Dense {
                in_features: r.u32()? as usize,
                out_features: r.u32()? as usize,
            },
            TAG_CONV => LayerKind::Conv2d {
                in_channels: r.u32()? as usize,
                out_channels: r.u32()? as usize,
            },
            TAG_POOL => LayerKind::MaxPool2d,
            TAG_RELU => LayerKind::Relu,
            TAG_FLATTEN => LayerKind::Flatten,
            TAG_BN => LayerKind::BatchNorm2d { channels: r.u32()? as usize },
            tag => return Err(r.fail(format!("unknown layer tag {tag}"))),
        };
        let flags = r.u8()?;
        specs.push(LayerSpec {
            kind,
            masked: flags & 1 != 0,
            prune_eligible: flags & 2 != 0,
        });
    }
    // Rebuild through init to validate the chain, then replace parameters.
    let mut model = crate::nn::init_model(specs, input, 0)
        .map_err(|e| Error::Parse { offset: r.offset, message: format!("invalid chain: {e}") })?;
    for l in model.weighted_layers() {
        let weights = read_tensor(&mut r)?;
        let bias = read_tensor(&mut r)?;
        let expect_w = model.weights[l].as_ref().unwrap().shape();
        if weights.shape() != expect_w {
            return Err(r.fail(format!(
                "layer {l} weight shape {:?}, expected {:?}",
                weights.shape(),
                expect_w
            )));
        }
        let expect_b = model.biases[l].as_ref().unwrap().shape();
        if bias.shape() != expect_b {
            return Err(r.fail(format!(
                "layer {l} bias shape {:?}, expected {:?}",
                bias.shape(),
                expect_b
            )));
        }
        model.weights[l] = Some(weights);
        model.biases[l] = Some(bias);
    }
    let prune = match r.u8()? {
        0 => None,
        1 => {
            let mut mask = PruneMask::all_keep(&model);
            for l in model.weighted_layers() {
                let count = r.u32()? as usize;
                let units = model.specs[l].kind.unit_count();
                if count != units {
                    return Err(r.fail(format!(
                        "layer {l} unit count {count}, expected {units}"
                    )));
                }
                let mut raw = vec![0u8; count.div_ceil(8)];
                r.read(&mut raw)?;
                let keep = mask.keep[l].as_mut().unwrap();
                for (i, k) in keep.iter_mut().enumerate() {
                    *k = raw[i / 8] & (1 << (i % 8)) != 0;
                }
            }
            Some(mask)
        }
        tag => return Err(r.fail(format!("unknown prune-mask tag {tag}"))),
    };
    Ok((model, prune))
}
