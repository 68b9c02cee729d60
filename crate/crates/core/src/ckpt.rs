//! Single-file checkpoints.
//!
//! Byte layout (integers are little-endian):
//!
//! ```text
//! magic        8 bytes   "SURVAE01"
//! descriptor   u64 len, UTF-8 JSON architecture document
//! parameters   u64 len, then: u64 count, count × entry
//! optimizer    u64 len, then: u8 present; if 1: u64 step, u64 count,
//!              count × (entry m, entry v) sharing the parameter name
//! rng          u64 len, opaque bytes (empty, or 32-byte seed, u64 stream,
//!              u128 word position)
//! iteration    u64
//!
//! entry        u64 name len, name bytes, u64 rank, rank × u64 dims,
//!              numel × f64 bits
//! ```
//!
//! Sections are read strictly in order; trailing bytes are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use crate::ad::{Parameterized, Tensor};
use crate::error::{Error, Result};
use crate::flow::{Flow, FlowSpec};
use crate::train::{Adam, RngState};

pub const MAGIC: &[u8; 8] = b"SURVAE01";

/// Resumable optimizer state stored next to the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainerState {
    pub adam: Option<Adam>,
    pub rng: Option<RngState>,
    pub iteration: u64,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

fn put_entry(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_bytes(out, name.as_bytes());
    put_u64(out, t.rank() as u64);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a flow and optional trainer state.
pub fn to_bytes(flow: &Flow, state: &TrainerState) -> Result<Vec<u8>> {
    let mut out = MAGIC.to_vec();
    put_bytes(&mut out, flow.spec().to_json()?.as_bytes());

    let mut params = Vec::new();
    let ps = flow.parameters();
    put_u64(&mut params, ps.len() as u64);
    for p in ps {
        put_entry(&mut params, &p.name, &p.value);
    }
    put_bytes(&mut out, &params);

    let mut opt = Vec::new();
    match &state.adam {
        None => opt.push(0),
        Some(a) => {
            opt.push(1);
            put_u64(&mut opt, a.step);
            put_u64(&mut opt, a.moments.len() as u64);
            for (name, (m, v)) in &a.moments {
                put_entry(&mut opt, name, m);
                put_entry(&mut opt, name, v);
            }
        }
    }
    put_bytes(&mut out, &opt);

    let mut rng = Vec::new();
    if let Some(r) = &state.rng {
        rng.extend_from_slice(&r.seed);
        rng.extend_from_slice(&r.stream.to_le_bytes());
        rng.extend_from_slice(&r.word_pos.to_le_bytes());
    }
    put_bytes(&mut out, &rng);
    put_u64(&mut out, state.iteration);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Corrupt(msg.into())
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(corrupt(format!("truncated {} section", self.what))),
        }
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| corrupt(format!("length {v} in {} section", self.what)))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }

    fn section(&mut self, what: &'static str) -> Result<Reader<'a>> {
        self.what = what;
        Ok(Reader::new(self.bytes()?, what))
    }

    fn entry(&mut self) -> Result<(String, Tensor)> {
        let name = String::from_utf8(self.bytes()?.to_vec())
            .map_err(|_| corrupt(format!("non-UTF-8 name in {} section", self.what)))?;
        let rank = self.len()?;
        let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| corrupt("tensor size overflows"))?;
        let raw = self.take(numel.checked_mul(8).ok_or_else(|| corrupt("tensor size overflows"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }

    fn finish(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(corrupt(format!("{} trailing bytes after {} section", self.buf.len() - self.pos, self.what)))
        }
    }
}

/// Parses a checkpoint. Nothing is returned unless every section is valid.
pub fn from_bytes(bytes: &[u8]) -> Result<(Flow, TrainerState)> {
    let mut r = Reader::new(bytes, "magic");
    if r.take(8)? != MAGIC {
        return Err(corrupt("bad magic tag (not a checkpoint or unsupported version)"));
    }
    r.what = "descriptor";
    let desc = std::str::from_utf8(r.bytes()?).map_err(|_| corrupt("descriptor is not UTF-8"))?;
    let mut flow = Flow::build(&FlowSpec::from_json(desc)?)?;

    let mut p = r.section("parameters")?;
    let count = p.len()?;
    let expected = flow.parameters().len();
    if count != expected {
        return Err(corrupt(format!("{count} parameter entries, architecture has {expected}")));
    }
    for _ in 0..count {
        let (name, t) = p.entry()?;
        if flow.parameter_mut(&name).is_none() {
            return Err(corrupt(format!("unknown parameter {name}")));
        }
        flow.set_parameter(&name, t)?;
    }
    p.finish()?;

    let mut o = r.section("optimizer")?;
    let adam = match o.take(1)?[0] {
        0 => None,
        1 => {
            let step = o.u64()?;
            let n = o.len()?;
            let mut moments = BTreeMap::new();
            for _ in 0..n {
                let (name, m) = o.entry()?;
                let (name2, v) = o.entry()?;
                if name != name2 || m.shape() != v.shape() {
                    return Err(corrupt(format!("mismatched moment pair for {name}")));
                }
                moments.insert(name, (m, v));
            }
            Some(Adam { step, moments })
        }
        b => return Err(corrupt(format!("optimizer flag {b}"))),
    };
    o.finish()?;

    let mut g = r.section("rng")?;
    let rng = match g.buf.len() {
        0 => None,
        56 => Some(RngState {
            seed: g.take(32)?.try_into().expect("32 bytes"),
            stream: g.u64()?,
            word_pos: u128::from_le_bytes(g.take(16)?.try_into().expect("16 bytes")),
        }),
        n => return Err(corrupt(format!("rng state of {n} bytes"))),
    };
    g.finish()?;

    r.what = "iteration";
    let iteration = r.u64()?;
    r.finish()?;
    Ok((flow, TrainerState { adam, rng, iteration }))
}

pub fn save(path: impl AsRef<Path>, flow: &Flow, state: &TrainerState) -> Result<()> {
    std::fs::write(path, to_bytes(flow, state)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(Flow, TrainerState)> {
    from_bytes(&std::fs::read(path)?)
}
