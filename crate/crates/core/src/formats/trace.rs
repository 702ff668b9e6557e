//! Binary attention traces (`.atrc`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    5 bytes  "ATRC1"
//! endian   1 byte   b'L'
//! height   u32
//! width    u32
//! tokens   u32
//! layers   u32
//! steps    u32
//! payload  steps·layers·height·width·tokens × f32, row-major
//!          (step, layer, location, token)
//! ```
//!
//! Coarser layers are nearest-upsampled to the base grid before storage.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::GridDims;
use crate::model::AttentionMap;

pub const TRACE_MAGIC: &[u8; 5] = b"ATRC1";
const HEADER_LEN: usize = 5 + 1 + 5 * 4;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub dims: GridDims,
    pub tokens: usize,
    pub layers: usize,
    pub steps: usize,
    pub payload: Vec<f32>,
}

impl AttentionTrace {
    pub fn new(dims: GridDims, tokens: usize, layers: usize) -> Self {
        Self {
            dims,
            tokens,
            layers,
            steps: 0,
            payload: Vec::new(),
        }
    }

    fn step_len(&self) -> usize {
        self.layers * self.dims.len() * self.tokens
    }

    pub fn push_step(&mut self, attention: &[AttentionMap]) -> Result<()> {
        if attention.len() != self.layers {
            return Err(Error::Shape(format!(
                "{} layers pushed into a {}-layer trace",
                attention.len(),
                self.layers
            )));
        }
        for map in attention {
            if map.values.ncols() != self.tokens {
                return Err(Error::Shape(format!(
                    "{} tokens pushed into a {}-token trace",
                    map.values.ncols(),
                    self.tokens
                )));
            }
            let up = map.upsampled(self.dims);
            self.payload.extend(up.values.iter().map(|&x| x as f32));
        }
        self.steps += 1;
        Ok(())
    }

    /// Slice `[location × token]` of one step and layer.
    pub fn slice(&self, step: usize, layer: usize) -> &[f32] {
        let n = self.dims.len() * self.tokens;
        let start = (step * self.layers + layer) * n;
        &self.payload[start..start + n]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len() * 4);
        out.extend_from_slice(TRACE_MAGIC);
        out.push(b'L');
        for v in [self.dims.height, self.dims.width, self.tokens, self.layers, self.steps] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for x in &self.payload {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::CorruptTrace {
                expected: HEADER_LEN as u64,
                actual: bytes.len() as u64,
            });
        }
        if &bytes[..5] != TRACE_MAGIC || bytes[5] != b'L' {
            return Err(Error::Parse {
                path: "<trace>".into(),
                message: "bad trace magic".into(),
            });
        }
        let field = |i: usize| {
            let o = 6 + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
        };
        let (height, width, tokens, layers, steps) = (field(0), field(1), field(2), field(3), field(4));
        let count = steps as u64 * layers as u64 * height as u64 * width as u64 * tokens as u64;
        let expected = HEADER_LEN as u64 + count * 4;
        if bytes.len() as u64 != expected {
            return Err(Error::CorruptTrace {
                expected,
                actual: bytes.len() as u64,
            });
        }
        let payload = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            dims: GridDims::new(height, width),
            tokens,
            layers,
            steps,
            payload,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn check_len(&self) -> bool {
        self.payload.len() == self.steps * self.step_len()
    }
}

/// Writes then reads back a trace.
pub fn trace_roundtrip(trace: &AttentionTrace, path: &Path) -> Result<AttentionTrace> {
    trace.write(path)?;
    AttentionTrace::read(path)
}
