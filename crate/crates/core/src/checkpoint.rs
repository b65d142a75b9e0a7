//! Binary checkpoint container.
//!
//! Layout (all integers and doubles little-endian):
//!
//! ```text
//! magic "KGRCKPT\0" | version u32 | stage u8 | epoch u64
//! num_entities u64 | num_relations u64 | dim u64 | raw_dim u64
//! config_len u64 | config JSON bytes
//! rng seed [u8; 32] | rng stream u64 | rng word_pos u128 | optimizer step u64
//! table_count u64, then per table: name_len u32 | name | rows u64 | cols u64 | rows*cols f64
//! ```
//!
//! Parameter tables come first in [`ModelState::param_slots`] order, followed
//! by optimizer moments (`adam.m.<name>`, `adam.v.<name>`) in name order.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::gnn::{LayerStack, StackShape};
use crate::linalg::Matrix;
use crate::model::{AdamSlot, ModelState, Optimizer, RngState, Stage};
use crate::scoring::RelationEmbeddings;
use crate::text::{MlpParams, TextParams};

pub const MAGIC: &[u8; 8] = b"KGRCKPT\0";
pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn table(&mut self, name: &str, m: &Matrix) {
        self.u32(name.len() as u32);
        self.bytes(name.as_bytes());
        self.u64(m.rows() as u64);
        self.u64(m.cols() as u64);
        for v in m.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size overflows usize".into()))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }
    fn table(&mut self) -> Result<(String, Matrix)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("table name is not UTF-8".into()))?;
        let rows = self.usize()?;
        let cols = self.usize()?;
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= self.buf.len() - self.pos))
            .ok_or_else(|| Error::Checkpoint(format!("table {name} overruns the file")))?;
        let data = self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((name, Matrix::from_vec(rows, cols, data)?))
    }
}

pub fn to_bytes(state: &ModelState) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u8(state.stage as u8);
    w.u64(state.epoch);
    w.u64(state.num_entities() as u64);
    w.u64(state.num_relations() as u64);
    w.u64(state.dim() as u64);
    w.u64(state.text.head.in_dim() as u64);
    let config = state.config.to_json();
    w.u64(config.len() as u64);
    w.bytes(config.as_bytes());
    w.bytes(&state.rng.seed);
    w.u64(state.rng.stream);
    w.bytes(&state.rng.word_pos.to_le_bytes());
    w.u64(state.optimizer.step);
    let params = state.param_slots();
    w.u64((params.len() + 2 * state.optimizer.slots.len()) as u64);
    for (name, m) in params {
        w.table(&name, m);
    }
    for (name, slot) in &state.optimizer.slots {
        w.table(&format!("adam.m.{name}"), &slot.m);
        w.table(&format!("adam.v.{name}"), &slot.v);
    }
    w.0
}

pub fn from_bytes(buf: &[u8]) -> Result<ModelState> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let stage = Stage::from_tag(r.u8()?)?;
    let epoch = r.u64()?;
    let n_ent = r.usize()?;
    let n_rel = r.usize()?;
    let dim = r.usize()?;
    let raw_dim = r.usize()?;
    let config_len = r.usize()?;
    let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let rng = RngState {
        seed,
        stream: r.u64()?,
        word_pos: r.u128()?,
    };
    let step = r.u64()?;
    let n_tables = r.usize()?;

    let mlp = || MlpParams::zeros(dim, raw_dim);
    let stack = match stage {
        Stage::Text => None,
        Stage::Graph => {
            let shape = StackShape {
                kind: config.gnn.variant,
                dim,
                depth: config.gnn.depth,
                heads: config.gnn.heads,
                num_relations: n_rel,
                leaky_slope: config.gnn.leaky_slope,
            };
            LayerStack::init(&shape, true, &mut ChaCha8Rng::seed_from_u64(0))?
        }
    };
    let mut state = ModelState {
        text: TextParams {
            head: mlp(),
            tail: config.separate_head_tail_mlp.then(mlp),
            fallback: Matrix::zeros(1, dim),
        },
        features: Matrix::zeros(n_ent, dim),
        relations: RelationEmbeddings {
            forward: Matrix::zeros(n_rel, dim),
            inverse: Matrix::zeros(n_rel, dim),
        },
        stack,
        rng,
        optimizer: Optimizer {
            config: config.optimizer.clone(),
            step,
            slots: Default::default(),
        },
        config,
        stage,
        epoch,
    };

    let mut slots = state.param_slots_mut();
    if n_tables < slots.len() {
        return Err(Error::Checkpoint(format!(
            "{n_tables} tables, expected at least {}",
            slots.len()
        )));
    }
    for (name, dest) in slots.iter_mut() {
        let (got, m) = r.table()?;
        if &got != name || m.shape() != dest.shape() {
            return Err(Error::Checkpoint(format!(
                "table {got} {:?} where {name} {:?} was expected",
                m.shape(),
                dest.shape()
            )));
        }
        **dest = m;
    }
    let extra = n_tables - slots.len();
    drop(slots);
    if extra % 2 != 0 {
        return Err(Error::Checkpoint("optimizer tables are not paired".into()));
    }
    for _ in 0..extra / 2 {
        let (mname, m) = r.table()?;
        let (vname, v) = r.table()?;
        let key = mname
            .strip_prefix("adam.m.")
            .filter(|k| vname.strip_prefix("adam.v.") == Some(*k) && m.shape() == v.shape())
            .ok_or_else(|| Error::Checkpoint(format!("bad optimizer tables {mname}/{vname}")))?;
        state.optimizer.slots.insert(key.to_owned(), AdamSlot { m, v });
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(state)
}

pub fn save(state: &ModelState, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(state)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelState> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}
