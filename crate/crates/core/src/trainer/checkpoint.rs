//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "MMCKPT\0\0" | version u32 | entry count u32
//! entries: name_len u16, name, dtype u8, ndim u8, dims u64 × ndim, offset u64, byte_len u64
//! payload: raw element buffers, offsets relative to the payload start
//! crc32 of everything above, u32
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, ModelStats};
use crate::numcore::{DType, RunningStats, Scalar, Tensor};
use crate::rng::RngState;

use super::optim::OptimState;

pub const MAGIC: &[u8; 8] = b"MMCKPT\0\0";
pub const VERSION: u32 = 1;

/// Everything needed to resume training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ModelParams<T>,
    pub stats: ModelStats<T>,
    pub opt: OptimState<T>,
    /// Position of the training episode stream.
    pub rng: RngState,
    /// Free-form UTF-8 metadata owned by the caller.
    pub meta: String,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn step(&self) -> u64 {
        self.opt.step
    }
}

struct Entry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

fn blob(name: &str, bytes: Vec<u8>) -> Entry {
    Entry { name: name.into(), dtype: DType::U8, shape: vec![bytes.len()], bytes }
}

fn floats<T: Scalar>(name: String, shape: &[usize], data: &[T]) -> Entry {
    let mut bytes = Vec::with_capacity(data.len() * T::DTYPE.size());
    data.iter().for_each(|v| v.write_le(&mut bytes));
    Entry { name, dtype: T::DTYPE, shape: shape.to_vec(), bytes }
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Checkpoint(detail.into())
}

/// Serializes a checkpoint to bytes.
pub fn encode<T: Scalar>(ck: &Checkpoint<T>) -> Result<Vec<u8>> {
    let config = toml::to_string(&ck.params.config).map_err(|e| corrupt(format!("config: {e}")))?;
    let mut entries = vec![
        blob("config", config.into_bytes()),
        blob("meta", ck.meta.clone().into_bytes()),
        blob("step", ck.opt.step.to_le_bytes().to_vec()),
        blob("rng", ck.rng.to_bytes()),
    ];
    let named = ck.params.named();
    for (name, t) in &named {
        entries.push(floats(format!("param.{name}"), t.shape(), t.data()));
    }
    for (i, s) in ck.stats.layers.iter().enumerate() {
        entries.push(floats(format!("stats.{i}.mean"), &[s.channels()], &s.mean));
        entries.push(floats(format!("stats.{i}.var"), &[s.channels()], &s.var));
    }
    entries.push(blob("stats.initialized", ck.stats.layers.iter().map(|s| s.is_initialized() as u8).collect()));
    if ck.opt.m.len() != named.len() {
        return Err(corrupt("optimizer state does not match the parameter list"));
    }
    for ((name, t), (m, v)) in named.iter().zip(ck.opt.m.iter().zip(&ck.opt.v)) {
        entries.push(floats(format!("adam.m.{name}"), t.shape(), m));
        entries.push(floats(format!("adam.v.{name}"), t.shape(), v));
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for e in &entries {
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.dtype.code());
        out.push(e.shape.len() as u8);
        for &d in &e.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&(e.bytes.len() as u64).to_le_bytes());
        offset += e.bytes.len() as u64;
    }
    for e in &entries {
        out.extend_from_slice(&e.bytes);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt("manifest runs past the end"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

struct Decoded<'a> {
    entries: BTreeMap<String, (DType, Vec<usize>, &'a [u8])>,
}

impl<'a> Decoded<'a> {
    fn raw(&self, name: &str) -> Result<&(DType, Vec<usize>, &'a [u8])> {
        self.entries.get(name).ok_or_else(|| corrupt(format!("missing entry {name}")))
    }

    fn blob(&self, name: &str) -> Result<&'a [u8]> {
        let (dtype, _, bytes) = self.raw(name)?;
        if *dtype != DType::U8 {
            return Err(corrupt(format!("{name} should be a byte blob")));
        }
        Ok(bytes)
    }

    fn floats<T: Scalar>(&self, name: &str, shape: &[usize]) -> Result<Vec<T>> {
        let (dtype, s, bytes) = self.raw(name)?;
        if *dtype != T::DTYPE {
            return Err(corrupt(format!("{name} is {dtype:?}, expected {:?}", T::DTYPE)));
        }
        if s != shape {
            return Err(corrupt(format!("{name} has shape {s:?}, expected {shape:?}")));
        }
        let size = T::DTYPE.size();
        if bytes.len() != shape.iter().product::<usize>() * size {
            return Err(corrupt(format!("{name} has {} bytes for shape {shape:?}", bytes.len())));
        }
        Ok(bytes.chunks_exact(size).map(T::read_le).collect())
    }
}

/// Parses bytes produced by [`encode`]. The checksum is verified before
/// anything else, so a damaged file yields no partial state.
pub fn decode<T: Scalar>(buf: &[u8]) -> Result<Checkpoint<T>> {
    if buf.len() < MAGIC.len() + 12 {
        return Err(corrupt("file too short; checksum cannot be verified (truncated?)"));
    }
    let (body, tail) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(corrupt("checksum mismatch (file truncated or corrupt)"));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(corrupt("not a checkpoint file (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported format version {version}, this build reads {VERSION}")));
    }
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| corrupt("entry name is not UTF-8"))?.to_string();
        let dtype = DType::from_code(r.u8()?).ok_or_else(|| corrupt(format!("unknown dtype for {name}")))?;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let offset = r.u64()? as usize;
        let len = r.u64()? as usize;
        manifest.push((name, dtype, shape, offset, len));
    }
    let payload = &body[r.pos..];
    let mut entries = BTreeMap::new();
    for (name, dtype, shape, offset, len) in manifest {
        let bytes = offset
            .checked_add(len)
            .and_then(|end| payload.get(offset..end))
            .ok_or_else(|| corrupt(format!("entry {name} lies outside the payload")))?;
        entries.insert(name, (dtype, shape, bytes));
    }
    let d = Decoded { entries };

    let config_text = std::str::from_utf8(d.blob("config")?).map_err(|_| corrupt("config is not UTF-8"))?;
    let config: ModelConfig = toml::from_str(config_text).map_err(|e| corrupt(format!("config: {e}")))?;
    let meta = String::from_utf8(d.blob("meta")?.to_vec()).map_err(|_| corrupt("meta is not UTF-8"))?;
    let step = u64::from_le_bytes(d.blob("step")?.try_into().map_err(|_| corrupt("step must be 8 bytes"))?);
    let rng = RngState::from_bytes(d.blob("rng")?)?;

    let mut params = ModelParams::<T>::init(&config, &mut rand::rngs::mock::StepRng::new(0, 0))?;
    let names: Vec<(String, Vec<usize>)> =
        params.named().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
    for ((name, shape), dst) in names.iter().zip(params.tensors_mut()) {
        *dst = Tensor::new(shape.clone(), d.floats(&format!("param.{name}"), shape)?)?;
    }
    let flags = d.blob("stats.initialized")?;
    let mut layers = Vec::with_capacity(flags.len());
    for (i, &flag) in flags.iter().enumerate() {
        let shape = [config.filters];
        let mean = d.floats(&format!("stats.{i}.mean"), &shape)?;
        let var = d.floats(&format!("stats.{i}.var"), &shape)?;
        layers.push(RunningStats::from_parts(mean, var, flag != 0));
    }
    if layers.len() != ModelStats::<T>::new(&config).layers.len() {
        return Err(corrupt(format!("{} running-stat layers stored", layers.len())));
    }
    let mut m = Vec::with_capacity(names.len());
    let mut v = Vec::with_capacity(names.len());
    for (name, shape) in &names {
        m.push(d.floats(&format!("adam.m.{name}"), shape)?);
        v.push(d.floats(&format!("adam.v.{name}"), shape)?);
    }
    Ok(Checkpoint { params, stats: ModelStats { layers }, opt: OptimState { m, v, step }, rng, meta })
}

/// Writes via a temporary sibling and a rename so that readers never see a
/// half-written file.
pub fn save_checkpoint<T: Scalar>(ck: &Checkpoint<T>, path: &Path) -> Result<()> {
    let bytes = encode(ck)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = ModelParams::<f32>::init(&ModelConfig::tiny(), &mut rng).unwrap();
        let mut opt = OptimState::new(params.named().into_iter().map(|(_, t)| t));
        opt.step = 17;
        opt.m[0][0] = 0.25;
        let mut stats = ModelStats::new(&params.config);
        stats.layers[2] = RunningStats::from_parts(vec![0.5; 4], vec![2.0; 4], false);
        Checkpoint { params, stats, opt, rng: RngState::capture(&rng), meta: "note".into() }
    }

    #[test]
    fn round_trip_is_exact_and_stable() {
        let ck = sample();
        let bytes = encode(&ck).unwrap();
        let back: Checkpoint<f32> = decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn truncation_and_corruption_are_detected() {
        let bytes = encode(&sample()).unwrap();
        let cut = &bytes[..bytes.len() - 9];
        assert!(decode::<f32>(cut).unwrap_err().to_string().contains("checksum"));
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(decode::<f32>(&flipped).unwrap_err().to_string().contains("checksum"));
        assert!(decode::<f32>(&bytes[..5]).is_err());
    }

    #[test]
    fn dtype_mismatch_is_reported() {
        let bytes = encode(&sample()).unwrap();
        assert!(decode::<f64>(&bytes).is_err());
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[8] = 99;
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(decode::<f32>(&bytes).unwrap_err().to_string().contains("version 99"));
    }
}
