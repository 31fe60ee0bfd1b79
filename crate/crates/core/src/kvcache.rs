//! Per-layer, per-position key/value store with update-step tracking.
//!
//! Entries are written only through [`KVCache::commit`], after the decoder
//! has decided which positions were recomputed. Nothing is ever evicted:
//! positions that were not recomputed keep serving their last committed
//! states.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardOutput, Precision};
use crate::tensor::{Matrix, Real};

/// Recompute accounting. One "position update" is one position pushed
/// through every layer of the model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CacheStats {
    pub total_position_updates: usize,
    pub per_step_query_sizes: Vec<usize>,
    /// What a full recompute would have cost over the same steps.
    pub full_recompute_equivalent: usize,
}

impl CacheStats {
    /// `1 - total / full`, or 0 when nothing has been recorded.
    pub fn savings_ratio(&self) -> f64 {
        if self.full_recompute_equivalent == 0 {
            return 0.0;
        }
        1.0 - self.total_position_updates as f64 / self.full_recompute_equivalent as f64
    }
}

/// Layer-averaged key/value states of one position at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KVSnapshot {
    pub step: usize,
    pub position: usize,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct KVCache<T> {
    n_layers: usize,
    seq_len: usize,
    d_model: usize,
    keys: Vec<Matrix<T>>,
    values: Vec<Matrix<T>>,
    last_update_step: Vec<Option<usize>>,
    last_committed: Option<usize>,
    stats: CacheStats,
    stale_splice: bool,
}

impl<T: Real> KVCache<T> {
    pub fn new(n_layers: usize, seq_len: usize, d_model: usize) -> Result<Self> {
        for (name, v) in [("n_layers", n_layers), ("seq_len", seq_len), ("d_model", d_model)] {
            if v == 0 {
                return Err(Error::Input(format!("{name} must be positive")));
            }
        }
        Ok(Self {
            n_layers,
            seq_len,
            d_model,
            keys: (0..n_layers).map(|_| Matrix::zeros(seq_len, d_model)).collect(),
            values: (0..n_layers).map(|_| Matrix::zeros(seq_len, d_model)).collect(),
            last_update_step: vec![None; seq_len],
            last_committed: None,
            stats: CacheStats::default(),
            stale_splice: false,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn stats(&self) -> &CacheStats {
        &self.stats
    }

    pub fn last_update_step(&self, position: usize) -> Option<usize> {
        self.last_update_step.get(position).copied().flatten()
    }

    pub fn is_readable(&self, position: usize) -> bool {
        self.last_update_step(position).is_some()
    }

    /// Forgets a position so that subsequent reads fail.
    pub fn invalidate(&mut self, position: usize) {
        if let Some(slot) = self.last_update_step.get_mut(position) {
            *slot = None;
        }
    }

    /// Fault injection for self-tests: when enabled, [`assemble`](Self::assemble)
    /// prefers stale cached rows over the fresh ones it is handed.
    #[doc(hidden)]
    pub fn set_stale_splice_fault(&mut self, on: bool) {
        self.stale_splice = on;
    }

    pub fn key_row(&self, layer: usize, position: usize) -> Result<&[T]> {
        self.check_readable(layer, position)?;
        Ok(self.keys[layer].row(position))
    }

    pub fn value_row(&self, layer: usize, position: usize) -> Result<&[T]> {
        self.check_readable(layer, position)?;
        Ok(self.values[layer].row(position))
    }

    fn check_readable(&self, layer: usize, position: usize) -> Result<()> {
        if layer >= self.n_layers || position >= self.seq_len || !self.is_readable(position) {
            return Err(Error::CacheIncomplete { layer, position });
        }
        Ok(())
    }

    /// Writes the fresh K/V of every queried position at every layer and
    /// records the step. Steps must be committed in strictly increasing order.
    pub fn commit(&mut self, step: usize, out: &ForwardOutput<T>) -> Result<()> {
        if let Some(last) = self.last_committed {
            if step <= last {
                return Err(Error::State(format!(
                    "step {step} committed after step {last}; steps are committed once, in order"
                )));
            }
        }
        if out.fresh_keys.len() != self.n_layers || out.fresh_values.len() != self.n_layers {
            return Err(Error::Input(format!(
                "forward output has {} layers, cache has {}",
                out.fresh_keys.len(),
                self.n_layers
            )));
        }
        let q = out.query_positions.len();
        for layer in 0..self.n_layers {
            for m in [&out.fresh_keys[layer], &out.fresh_values[layer]] {
                if m.shape() != (q, self.d_model) {
                    return Err(Error::Input(format!(
                        "fresh K/V at layer {layer} has shape {:?}, expected ({q}, {})",
                        m.shape(),
                        self.d_model
                    )));
                }
            }
        }
        if let Some(&bad) = out.query_positions.iter().find(|&&p| p >= self.seq_len) {
            return Err(Error::Input(format!(
                "query position {bad} outside cache of length {}",
                self.seq_len
            )));
        }

        for layer in 0..self.n_layers {
            for (row, &pos) in out.query_positions.iter().enumerate() {
                self.keys[layer]
                    .row_mut(pos)
                    .copy_from_slice(out.fresh_keys[layer].row(row));
                self.values[layer]
                    .row_mut(pos)
                    .copy_from_slice(out.fresh_values[layer].row(row));
            }
        }
        for &pos in &out.query_positions {
            self.last_update_step[pos] = Some(step);
        }
        self.last_committed = Some(step);
        self.stats.total_position_updates += q;
        self.stats.per_step_query_sizes.push(q);
        self.stats.full_recompute_equivalent += self.seq_len;
        Ok(())
    }

    /// Builds full `seq_len × d_model` key and value matrices for `layer`:
    /// rows listed in `fresh_positions` come from `fresh_k`/`fresh_v` (row
    /// `r` belongs to `fresh_positions[r]`), every other row from the cache.
    pub fn assemble(
        &self,
        layer: usize,
        fresh_positions: &[usize],
        fresh_k: &Matrix<T>,
        fresh_v: &Matrix<T>,
    ) -> Result<(Matrix<T>, Matrix<T>)> {
        if layer >= self.n_layers {
            return Err(Error::Input(format!("layer {layer} out of range")));
        }
        if fresh_k.rows() != fresh_positions.len() || fresh_v.rows() != fresh_positions.len() {
            return Err(Error::Input("fresh K/V row count differs from fresh positions".into()));
        }
        let mut source: Vec<Option<usize>> = vec![None; self.seq_len];
        for (row, &pos) in fresh_positions.iter().enumerate() {
            if pos >= self.seq_len {
                return Err(Error::Input(format!("fresh position {pos} out of range")));
            }
            source[pos] = Some(row);
        }

        let mut k = Matrix::zeros(self.seq_len, self.d_model);
        let mut v = Matrix::zeros(self.seq_len, self.d_model);
        for (pos, src) in source.iter().enumerate() {
            let use_cache = match src {
                None => true,
                Some(_) => self.stale_splice && self.is_readable(pos),
            };
            if use_cache {
                self.check_readable(layer, pos)?;
                k.row_mut(pos).copy_from_slice(self.keys[layer].row(pos));
                v.row_mut(pos).copy_from_slice(self.values[layer].row(pos));
            } else {
                let row = src.expect("fresh row");
                k.row_mut(pos).copy_from_slice(fresh_k.row(row));
                v.row_mut(pos).copy_from_slice(fresh_v.row(row));
            }
        }
        Ok((k, v))
    }

    /// Layer-mean key and value of each requested position.
    pub fn snapshot(&self, step: usize, positions: &[usize]) -> Result<Vec<KVSnapshot>> {
        positions
            .iter()
            .map(|&pos| {
                self.check_readable(0, pos)?;
                let mut key = vec![0.0; self.d_model];
                let mut value = vec![0.0; self.d_model];
                for layer in 0..self.n_layers {
                    for (acc, x) in key.iter_mut().zip(self.keys[layer].row(pos)) {
                        *acc += x.as_f64();
                    }
                    for (acc, x) in value.iter_mut().zip(self.values[layer].row(pos)) {
                        *acc += x.as_f64();
                    }
                }
                let n = self.n_layers as f64;
                key.iter_mut().for_each(|x| *x /= n);
                value.iter_mut().for_each(|x| *x /= n);
                Ok(KVSnapshot {
                    step,
                    position: pos,
                    key,
                    value,
                })
            })
            .collect()
    }
}

const DUMP_MAGIC: &[u8; 4] = b"D2KV";
const DUMP_VERSION: u8 = 1;

/// Writes snapshots taken at `step` as a little-endian binary blob.
///
/// Layout: `"D2KV"`, version `u8`, element width `u8` (4 or 8), two zero
/// bytes, then `step`, snapshot count and `d_model` as `u64`. Each snapshot
/// follows as its position (`u64`), the key row, then the value row.
pub fn write_snapshot_dump<W: Write>(
    mut w: W,
    step: usize,
    d_model: usize,
    precision: Precision,
    snapshots: &[KVSnapshot],
) -> Result<()> {
    w.write_all(DUMP_MAGIC)?;
    w.write_u8(DUMP_VERSION)?;
    w.write_u8(precision.byte_width())?;
    w.write_u16::<LittleEndian>(0)?;
    w.write_u64::<LittleEndian>(step as u64)?;
    w.write_u64::<LittleEndian>(snapshots.len() as u64)?;
    w.write_u64::<LittleEndian>(d_model as u64)?;
    for s in snapshots {
        if s.key.len() != d_model || s.value.len() != d_model {
            return Err(Error::Input(format!(
                "snapshot for position {} does not have width {d_model}",
                s.position
            )));
        }
        w.write_u64::<LittleEndian>(s.position as u64)?;
        for &x in s.key.iter().chain(&s.value) {
            match precision {
                Precision::F32 => w.write_f32::<LittleEndian>(x as f32)?,
                Precision::F64 => w.write_f64::<LittleEndian>(x)?,
            }
        }
    }
    Ok(())
}

pub fn read_snapshot_dump<R: Read>(mut r: R) -> Result<Vec<KVSnapshot>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(Error::Input("not a KV snapshot dump".into()));
    }
    let version = r.read_u8()?;
    if version != DUMP_VERSION {
        return Err(Error::Input(format!("unsupported dump version {version}")));
    }
    let width = r.read_u8()?;
    r.read_u16::<LittleEndian>()?;
    let step = r.read_u64::<LittleEndian>()? as usize;
    let count = r.read_u64::<LittleEndian>()? as usize;
    let d_model = r.read_u64::<LittleEndian>()? as usize;
    let read_row = |r: &mut R| -> Result<Vec<f64>> {
        (0..d_model)
            .map(|_| match width {
                4 => Ok(r.read_f32::<LittleEndian>()? as f64),
                8 => Ok(r.read_f64::<LittleEndian>()?),
                w => Err(Error::Input(format!("unsupported element width {w}"))),
            })
            .collect()
    };
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let position = r.read_u64::<LittleEndian>()? as usize;
        let key = read_row(&mut r)?;
        let value = read_row(&mut r)?;
        out.push(KVSnapshot {
            step,
            position,
            key,
            value,
        });
    }
    Ok(out)
}
