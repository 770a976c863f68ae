//! Binary weight files.
//!
//! Layout: `version u8 | kind u8 | n_records u32` followed by records of
//! `role u8 | block u32 | rows u32 | cols u32 | rows·cols f64`, all little
//! endian. Vectors are stored as `1×n` records.

use std::collections::BTreeMap;
use std::path::Path;

use crate::edgemodel::EdgeWeights;
use crate::encoder::{BlockBiases, EncoderBlockWeights, LayerNormParams};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const STORE_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    CloudStack = 1,
    Edge = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stored {
    Cloud(Vec<EncoderBlockWeights>),
    Edge(EdgeWeights),
}

mod role {
    pub const W_Q: u8 = 1;
    pub const W_K: u8 = 2;
    pub const W_V: u8 = 3;
    pub const W_1: u8 = 4;
    pub const W_2: u8 = 5;
    pub const B_Q: u8 = 6;
    pub const B_K: u8 = 7;
    pub const B_V: u8 = 8;
    pub const B_1: u8 = 9;
    pub const B_2: u8 = 10;
    pub const GAMMA1: u8 = 11;
    pub const BETA1: u8 = 12;
    pub const GAMMA2: u8 = 13;
    pub const BETA2: u8 = 14;
    pub const W_EMBED: u8 = 20;
    pub const B_EMBED: u8 = 21;
    pub const POS_EMBED: u8 = 22;
    pub const W_HEAD: u8 = 23;
    pub const B_HEAD: u8 = 24;
}

struct Writer {
    buf: Vec<u8>,
    n: u32,
}

impl Writer {
    fn new(kind: Kind) -> Self {
        let mut buf = vec![STORE_VERSION, kind as u8];
        buf.extend_from_slice(&0u32.to_le_bytes());
        Self { buf, n: 0 }
    }

    fn put(&mut self, role: u8, block: usize, rows: usize, cols: usize, data: &[f64]) {
        self.buf.push(role);
        for v in [block, rows, cols] {
            self.buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for x in data {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
        self.n += 1;
    }

    fn mat(&mut self, role: u8, block: usize, m: &Matrix) {
        self.put(role, block, m.rows(), m.cols(), m.data());
    }

    fn vec(&mut self, role: u8, block: usize, v: &[f64]) {
        self.put(role, block, 1, v.len(), v);
    }

    fn finish(mut self) -> Vec<u8> {
        self.buf[2..6].copy_from_slice(&self.n.to_le_bytes());
        self.buf
    }
}

pub fn encode_cloud(blocks: &[EncoderBlockWeights]) -> Vec<u8> {
    let mut w = Writer::new(Kind::CloudStack);
    for (i, b) in blocks.iter().enumerate() {
        for (role, m) in [(role::W_Q, &b.w_q), (role::W_K, &b.w_k), (role::W_V, &b.w_v), (role::W_1, &b.w_1), (role::W_2, &b.w_2)] {
            w.mat(role, i, m);
        }
        if let Some(bs) = &b.biases {
            for (role, v) in [(role::B_Q, &bs.b_q), (role::B_K, &bs.b_k), (role::B_V, &bs.b_v), (role::B_1, &bs.b_1), (role::B_2, &bs.b_2)] {
                w.vec(role, i, v);
            }
        }
        if let Some(n) = &b.norms {
            for (role, v) in [(role::GAMMA1, &n.gamma1), (role::BETA1, &n.beta1), (role::GAMMA2, &n.gamma2), (role::BETA2, &n.beta2)] {
                w.vec(role, i, v);
            }
        }
    }
    w.finish()
}

pub fn encode_edge(e: &EdgeWeights) -> Vec<u8> {
    let mut w = Writer::new(Kind::Edge);
    w.mat(role::W_EMBED, 0, &e.w_embed);
    w.vec(role::B_EMBED, 0, &e.b_embed);
    if let Some(p) = &e.pos_embed {
        w.mat(role::POS_EMBED, 0, p);
    }
    w.mat(role::W_HEAD, 0, &e.w_head);
    w.vec(role::B_HEAD, 0, &e.b_head);
    w.finish()
}

struct Record {
    role: u8,
    block: usize,
    value: Matrix,
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or(Error::Decode { offset: at, reason: "truncated".into() })
}

fn parse(bytes: &[u8]) -> Result<(Kind, Vec<Record>)> {
    let version = *bytes.first().ok_or(Error::Decode { offset: 0, reason: "empty file".into() })?;
    if version != STORE_VERSION {
        return Err(Error::Decode { offset: 0, reason: format!("unsupported version {version}") });
    }
    let kind = match bytes.get(1) {
        Some(1) => Kind::CloudStack,
        Some(2) => Kind::Edge,
        Some(k) => return Err(Error::Decode { offset: 1, reason: format!("unknown container kind {k}") }),
        None => return Err(Error::Decode { offset: 1, reason: "truncated".into() }),
    };
    let n = read_u32(bytes, 2)?;
    let mut at = 6;
    let mut out = Vec::new();
    for _ in 0..n {
        let start = at;
        let role = *bytes.get(at).ok_or(Error::Decode { offset: at, reason: "truncated".into() })?;
        let block = read_u32(bytes, at + 1)? as usize;
        let rows = read_u32(bytes, at + 5)? as usize;
        let cols = read_u32(bytes, at + 9)? as usize;
        at += 13;
        let len = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .filter(|&l| at + l <= bytes.len())
            .ok_or(Error::Decode { offset: start, reason: "record overruns the file".into() })?;
        let data = bytes[at..at + len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        at += len;
        let value = Matrix::new(rows, cols, data).map_err(|e| Error::Decode { offset: start, reason: e.to_string() })?;
        out.push(Record { role, block, value });
    }
    if at != bytes.len() {
        return Err(Error::Decode { offset: at, reason: "trailing bytes".into() });
    }
    Ok((kind, out))
}

fn take(map: &mut BTreeMap<u8, Matrix>, role: u8, block: usize) -> Result<Matrix> {
    map.remove(&role)
        .ok_or_else(|| Error::Decode { offset: 0, reason: format!("block {block} lacks tensor role {role}") })
}

fn take_vec(map: &mut BTreeMap<u8, Matrix>, role: u8, block: usize) -> Result<Vec<f64>> {
    Ok(take(map, role, block)?.into_data())
}

pub fn decode(bytes: &[u8]) -> Result<Stored> {
    let (kind, records) = parse(bytes)?;
    let mut blocks: BTreeMap<usize, BTreeMap<u8, Matrix>> = BTreeMap::new();
    for r in records {
        if blocks.entry(r.block).or_default().insert(r.role, r.value).is_some() {
            return Err(Error::Decode { offset: 0, reason: format!("duplicate role {} in block {}", r.role, r.block) });
        }
    }
    match kind {
        Kind::CloudStack => {
            let mut out = Vec::with_capacity(blocks.len());
            for (i, (idx, mut m)) in blocks.into_iter().enumerate() {
                if idx != i {
                    return Err(Error::Decode { offset: 0, reason: format!("block {i} missing") });
                }
                let biases = if m.contains_key(&role::B_Q) {
                    Some(BlockBiases {
                        b_q: take_vec(&mut m, role::B_Q, i)?,
                        b_k: take_vec(&mut m, role::B_K, i)?,
                        b_v: take_vec(&mut m, role::B_V, i)?,
                        b_1: take_vec(&mut m, role::B_1, i)?,
                        b_2: take_vec(&mut m, role::B_2, i)?,
                    })
                } else {
                    None
                };
                let norms = if m.contains_key(&role::GAMMA1) {
                    Some(LayerNormParams {
                        gamma1: take_vec(&mut m, role::GAMMA1, i)?,
                        beta1: take_vec(&mut m, role::BETA1, i)?,
                        gamma2: take_vec(&mut m, role::GAMMA2, i)?,
                        beta2: take_vec(&mut m, role::BETA2, i)?,
                    })
                } else {
                    None
                };
                let b = EncoderBlockWeights {
                    w_q: take(&mut m, role::W_Q, i)?,
                    w_k: take(&mut m, role::W_K, i)?,
                    w_v: take(&mut m, role::W_V, i)?,
                    w_1: take(&mut m, role::W_1, i)?,
                    w_2: take(&mut m, role::W_2, i)?,
                    biases,
                    norms,
                };
                if let Some(r) = m.keys().next() {
                    return Err(Error::Decode { offset: 0, reason: format!("unexpected role {r} in a cloud block") });
                }
                b.validate().map_err(|e| Error::Decode { offset: 0, reason: e.to_string() })?;
                out.push(b);
            }
            if out.is_empty() {
                return Err(Error::Decode { offset: 2, reason: "no blocks".into() });
            }
            Ok(Stored::Cloud(out))
        }
        Kind::Edge => {
            let mut m = blocks.remove(&0).unwrap_or_default();
            if !blocks.is_empty() {
                return Err(Error::Decode { offset: 0, reason: "edge weights have a single block".into() });
            }
            let e = EdgeWeights {
                w_embed: take(&mut m, role::W_EMBED, 0)?,
                b_embed: take_vec(&mut m, role::B_EMBED, 0)?,
                pos_embed: m.remove(&role::POS_EMBED),
                w_head: take(&mut m, role::W_HEAD, 0)?,
                b_head: take_vec(&mut m, role::B_HEAD, 0)?,
            };
            if let Some(r) = m.keys().next() {
                return Err(Error::Decode { offset: 0, reason: format!("unexpected role {r} in edge weights") });
            }
            Ok(Stored::Edge(e))
        }
    }
}

pub fn save_cloud(path: impl AsRef<Path>, blocks: &[EncoderBlockWeights]) -> Result<()> {
    Ok(std::fs::write(path, encode_cloud(blocks))?)
}

pub fn save_edge(path: impl AsRef<Path>, edge: &EdgeWeights) -> Result<()> {
    Ok(std::fs::write(path, encode_edge(edge))?)
}

pub fn load(path: impl AsRef<Path>) -> Result<Stored> {
    decode(&std::fs::read(path)?)
}

pub fn load_cloud(path: impl AsRef<Path>) -> Result<Vec<EncoderBlockWeights>> {
    match load(path)? {
        Stored::Cloud(b) => Ok(b),
        Stored::Edge(_) => Err(Error::Decode { offset: 1, reason: "expected cloud weights, found edge weights".into() }),
    }
}

pub fn load_edge(path: impl AsRef<Path>) -> Result<EdgeWeights> {
    match load(path)? {
        Stored::Edge(e) => Ok(e),
        Stored::Cloud(_) => Err(Error::Decode { offset: 1, reason: "expected edge weights, found cloud weights".into() }),
    }
}
