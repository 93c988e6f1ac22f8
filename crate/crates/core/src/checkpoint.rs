//! Self-describing binary checkpoints. Layout, all little-endian:
//!
//! ```text
//! magic            4 bytes  "HGCV"
//! version          u32      currently 1
//! scalar width     u8       4 = f32, 8 = f64
//! config           u32 byte length + that many bytes of JSON (ModelConfig)
//! tensor count     u32
//!   per tensor:    name (u16 length + UTF-8), element count u64, raw IEEE-754
//! meta count       u32
//!   per entry:     name (u16 length + UTF-8), u64 value
//! ```
//!
//! The tensor table holds the model parameters under their canonical names,
//! batch-norm running statistics as `norm{i}.running_mean` / `.running_var`,
//! and (when optimizer state is saved) Adam moments as `adam.m.{name}` /
//! `adam.v.{name}`. The meta table holds `norm{i}.batches_seen` and
//! `adam.t`. Round trips are bitwise.

use crate::error::{CheckpointError, Result};
use crate::model::{ModelConfig, ModelParams, ModelState};
use crate::numerics::Scalar;
use crate::train::AdamState;
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 4] = b"HGCV";
pub const FORMAT_VERSION: u32 = 1;

fn put_name(out: &mut Vec<u8>, name: &str) {
    let bytes = name.as_bytes();
    out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn put_tensor<F: Scalar>(out: &mut Vec<u8>, name: &str, data: &[F]) {
    put_name(out, name);
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for &v in data {
        v.write_le(out);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> std::result::Result<String, CheckpointError> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))
    }

    fn tensor<F: Scalar>(&mut self) -> std::result::Result<(String, Vec<F>), CheckpointError> {
        let name = self.name()?;
        let count = self.u64()? as usize;
        let raw = self.take(count * F::BYTE_WIDTH)?;
        let data = raw
            .chunks_exact(F::BYTE_WIDTH)
            .map(F::read_le)
            .collect();
        Ok((name, data))
    }
}

fn collect_tensors<F: Scalar>(
    params: &ModelParams<F>,
    state: &ModelState<F>,
    adam: Option<&AdamState<F>>,
) -> (Vec<(String, Vec<F>)>, Vec<(String, u64)>) {
    let mut tensors: Vec<(String, Vec<F>)> = Vec::new();
    let mut meta: Vec<(String, u64)> = Vec::new();
    for (name, s) in params.named_tensors() {
        tensors.push((name, s.to_vec()));
    }
    for (i, norm) in state.norms.iter().enumerate() {
        tensors.push((format!("norm{i}.running_mean"), norm.running_mean.clone()));
        tensors.push((format!("norm{i}.running_var"), norm.running_var.clone()));
        meta.push((format!("norm{i}.batches_seen"), norm.batches_seen));
    }
    if let Some(adam) = adam {
        for ((name, _), (m, v)) in params
            .named_tensors()
            .into_iter()
            .zip(adam.m.iter().zip(adam.v.iter()))
        {
            tensors.push((format!("adam.m.{name}"), m.clone()));
            tensors.push((format!("adam.v.{name}"), v.clone()));
        }
        meta.push(("adam.t".into(), adam.t));
    }
    (tensors, meta)
}

fn encode<F: Scalar>(
    params: &ModelParams<F>,
    config: &ModelConfig,
    state: &ModelState<F>,
    adam: Option<&AdamState<F>>,
) -> std::result::Result<Vec<u8>, CheckpointError> {
    let json = serde_json::to_vec(config)
        .map_err(|e| CheckpointError::Corrupt(format!("config serialization: {e}")))?;
    let (tensors, meta) = collect_tensors(params, state, adam);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(F::BYTE_WIDTH as u8);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, data) in &tensors {
        put_tensor(&mut out, name, data);
    }
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    for (name, value) in &meta {
        put_name(&mut out, name);
        out.extend_from_slice(&value.to_le_bytes());
    }
    Ok(out)
}

/// Write a checkpoint atomically (temp file + rename).
pub fn save_checkpoint<F: Scalar>(
    params: &ModelParams<F>,
    config: &ModelConfig,
    state: &ModelState<F>,
    adam: Option<&AdamState<F>>,
    path: &Path,
) -> Result<()> {
    let bytes = encode(params, config, state, adam)?;
    let io_err = |e: std::io::Error| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(io_err)?;
        f.write_all(&bytes).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
    }
    std::fs::rename(&tmp, path).map_err(io_err)?;
    Ok(())
}

/// Everything a checkpoint restores.
#[derive(Debug)]
pub struct Checkpoint<F: Scalar> {
    pub params: ModelParams<F>,
    pub config: ModelConfig,
    pub state: ModelState<F>,
    pub adam: Option<AdamState<F>>,
}

fn decode<F: Scalar>(buf: &[u8]) -> std::result::Result<Checkpoint<F>, CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let width = r.u8()? as usize;
    if width != F::BYTE_WIDTH {
        return Err(CheckpointError::Corrupt(format!(
            "scalar width {width} in file, expected {}",
            F::BYTE_WIDTH
        )));
    }
    let json_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(json_len)?)
        .map_err(|e| CheckpointError::Corrupt(format!("config block: {e}")))?;
    let n_tensors = r.u32()? as usize;
    let mut table: HashMap<String, Vec<F>> = HashMap::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let (name, data) = r.tensor()?;
        if table.insert(name.clone(), data).is_some() {
            return Err(CheckpointError::Corrupt(format!("duplicate tensor {name}")));
        }
    }
    let n_meta = r.u32()? as usize;
    let mut meta: HashMap<String, u64> = HashMap::with_capacity(n_meta);
    for _ in 0..n_meta {
        let name = r.name()?;
        meta.insert(name, r.u64()?);
    }

    let mut take_tensor = |name: &str, want: usize| -> std::result::Result<Vec<F>, CheckpointError> {
        let data = table
            .remove(name)
            .ok_or_else(|| CheckpointError::Corrupt(format!("missing tensor {name}")))?;
        if data.len() != want {
            return Err(CheckpointError::ShapeMismatch(format!(
                "{name}: {} values in file, config implies {want}",
                data.len()
            )));
        }
        Ok(data)
    };

    let mut params = ModelParams::<F>::zeros(&config)
        .map_err(|e| CheckpointError::Corrupt(format!("config invalid: {e}")))?;
    for (name, slot) in params.named_tensors_mut() {
        let data = take_tensor(&name, slot.len())?;
        slot.copy_from_slice(&data);
    }
    let mut state = ModelState::<F>::new(&config);
    for (i, norm) in state.norms.iter_mut().enumerate() {
        let h = norm.running_mean.len();
        norm.running_mean = take_tensor(&format!("norm{i}.running_mean"), h)?;
        norm.running_var = take_tensor(&format!("norm{i}.running_var"), h)?;
        norm.batches_seen = *meta.get(&format!("norm{i}.batches_seen")).ok_or_else(|| {
            CheckpointError::Corrupt(format!("missing meta norm{i}.batches_seen"))
        })?;
    }
    let adam = if meta.contains_key("adam.t") {
        let mut adam = AdamState::new_like(&params);
        adam.t = meta["adam.t"];
        let names: Vec<String> = params.named_tensors().iter().map(|(n, _)| n.clone()).collect();
        for (i, name) in names.iter().enumerate() {
            let want = adam.m[i].len();
            adam.m[i] = take_tensor(&format!("adam.m.{name}"), want)?;
            adam.v[i] = take_tensor(&format!("adam.v.{name}"), want)?;
        }
        Some(adam)
    } else {
        None
    };
    if !table.is_empty() {
        let mut extra: Vec<&String> = table.keys().collect();
        extra.sort();
        return Err(CheckpointError::Corrupt(format!(
            "unexpected tensors in file: {extra:?}"
        )));
    }
    Ok(Checkpoint {
        params,
        config,
        state,
        adam,
    })
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<Checkpoint<F>> {
    let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(decode(&bytes)?)
}
