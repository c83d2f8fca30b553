//! Binary model and optimizer checkpoints.
//!
//! Model container (all integers little-endian `u32` unless noted):
//!
//! ```text
//! "SIGSPP"  magic, 6 bytes
//! version
//! name length, name (UTF-8)
//! layers length, layer notation (UTF-8, e.g. "conv3-32-p1 bn relu spp-4-2-1 ...")
//! input channels, nominal height, nominal width (0 x 0 = variable size)
//! M (user head size), forgery head flag (u8)
//! block count, then per block: rank, dims[rank], f32 values
//! ```
//!
//! Blocks follow [`Model::state_blocks`] order. The optimizer checkpoint
//! (`"SIGOPT"`) stores the hyperparameters as `f64`, the epoch as `u64`, and
//! one length-prefixed `f32` block per velocity buffer.

use std::fs;
use std::path::Path;

use crate::error::{ContainerError, Error, Result};
use crate::nn::model::Model;
use crate::nn::optim::OptimizerState;
use crate::nn::spec::NetworkSpec;

pub const MODEL_MAGIC: &[u8; 6] = b"SIGSPP";
pub const OPTIMIZER_MAGIC: &[u8; 6] = b"SIGOPT";
pub const FORMAT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f32s(&mut self, values: &[f32]) {
        for v in values {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        if self.buf.len() - self.pos < n {
            return Err(ContainerError::Truncated { offset: self.pos, needed: n - (self.buf.len() - self.pos) });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, ContainerError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64, ContainerError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String, ContainerError> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| ContainerError::Header("string is not UTF-8".into()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, ContainerError> {
        let bytes =
            self.take(n.checked_mul(4).ok_or(ContainerError::Truncated { offset: self.pos, needed: usize::MAX })?)?;
        Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect())
    }
    fn magic(&mut self, magic: &[u8; 6]) -> Result<(), ContainerError> {
        match self.take(6) {
            Ok(m) if m == magic => Ok(()),
            _ => Err(ContainerError::BadMagic),
        }
    }
    fn version(&mut self) -> Result<(), ContainerError> {
        let found = self.u32()? as u32;
        if found != FORMAT_VERSION {
            return Err(ContainerError::Version { found, expected: FORMAT_VERSION });
        }
        Ok(())
    }
    fn finish(&self) -> Result<(), ContainerError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(ContainerError::Trailing(n)),
        }
    }
}

pub fn encode_model(model: &Model<f32>) -> Vec<u8> {
    let spec = model.spec();
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MODEL_MAGIC);
    w.u32(FORMAT_VERSION as usize);
    w.str(&spec.name);
    w.str(&spec.layers_text());
    w.u32(spec.input_channels);
    let (nh, nw) = spec.nominal_input.unwrap_or((0, 0));
    w.u32(nh);
    w.u32(nw);
    w.u32(spec.users);
    w.0.push(u8::from(spec.forgery_head));
    let blocks = model.state_blocks();
    w.u32(blocks.len());
    for (_, shape, values) in blocks {
        w.u32(shape.len());
        for d in shape {
            w.u32(d);
        }
        w.f32s(values);
    }
    w.0
}

/// Decodes a model container. Header and every block shape are validated
/// before any weight is accepted.
pub fn decode_model(bytes: &[u8]) -> Result<Model<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.magic(MODEL_MAGIC)?;
    r.version()?;
    let name = r.str()?;
    let layers_text = r.str()?;
    let layers =
        NetworkSpec::parse_layers(&layers_text).map_err(|e| ContainerError::Header(format!("layer notation: {e}")))?;
    let input_channels = r.u32()?;
    let (nh, nw) = (r.u32()?, r.u32()?);
    let users = r.u32()?;
    let forgery_head = match r.u8()? {
        0 => false,
        1 => true,
        v => return Err(ContainerError::Header(format!("bad forgery flag {v}")).into()),
    };
    let spec = NetworkSpec {
        name,
        layers,
        input_channels,
        nominal_input: (nh != 0 || nw != 0).then_some((nh, nw)),
        users,
        forgery_head,
    };
    let mut model = Model::<f32>::zeros(spec).map_err(|e| ContainerError::Header(format!("inconsistent spec: {e}")))?;
    let expected: Vec<(String, Vec<usize>)> = model.state_blocks().into_iter().map(|(n, s, _)| (n, s)).collect();
    let count = r.u32()?;
    if count != expected.len() {
        return Err(ContainerError::Header(format!("{count} weight blocks, spec needs {}", expected.len())).into());
    }
    let mut decoded = Vec::with_capacity(count);
    for (name, shape) in &expected {
        let rank = r.u32()?;
        let found = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        if &found != shape {
            return Err(ContainerError::ShapeMismatch { block: name.clone(), expected: shape.clone(), found }.into());
        }
        decoded.push(r.f32s(shape.iter().product())?);
    }
    r.finish()?;
    for (dst, src) in model.state_blocks_mut().into_iter().zip(decoded) {
        *dst = src;
    }
    Ok(model)
}

pub fn save_model(model: &Model<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Model<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

pub fn encode_optimizer(state: &OptimizerState<f32>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(OPTIMIZER_MAGIC);
    w.u32(FORMAT_VERSION as usize);
    w.0.extend_from_slice(&state.learning_rate.to_le_bytes());
    w.0.extend_from_slice(&state.momentum.to_le_bytes());
    w.0.extend_from_slice(&state.weight_decay.to_le_bytes());
    w.0.extend_from_slice(&(state.epoch as u64).to_le_bytes());
    match state.velocity() {
        Some(blocks) => {
            w.0.push(1);
            w.u32(blocks.len());
            for b in blocks {
                w.u32(b.len());
                w.f32s(b);
            }
        }
        None => w.0.push(0),
    }
    w.0
}

/// Decodes an optimizer checkpoint for `model`, checking buffer shapes.
pub fn decode_optimizer(bytes: &[u8], model: &Model<f32>) -> Result<OptimizerState<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.magic(OPTIMIZER_MAGIC)?;
    r.version()?;
    let lr = r.f64()?;
    let momentum = r.f64()?;
    let weight_decay = r.f64()?;
    let epoch = r.u64()? as usize;
    let mut state =
        OptimizerState::new(model, lr, momentum, weight_decay).map_err(|e| ContainerError::Header(e.to_string()))?;
    state.epoch = epoch;
    let velocity = match r.u8()? {
        0 => None,
        1 => {
            let shapes = model.param_shapes();
            let n = r.u32()?;
            if n != shapes.len() {
                return Err(
                    ContainerError::Header(format!("{n} velocity blocks for {} parameters", shapes.len())).into()
                );
            }
            let mut blocks = Vec::with_capacity(n);
            for (i, &len) in shapes.iter().enumerate() {
                let found = r.u32()?;
                if found != len {
                    return Err(ContainerError::ShapeMismatch {
                        block: format!("velocity {i}"),
                        expected: vec![len],
                        found: vec![found],
                    }
                    .into());
                }
                blocks.push(r.f32s(len)?);
            }
            Some(blocks)
        }
        v => return Err(ContainerError::Header(format!("bad velocity flag {v}")).into()),
    };
    r.finish()?;
    state.set_velocity(velocity).map_err(|e| ContainerError::Header(e.to_string()))?;
    Ok(state)
}
