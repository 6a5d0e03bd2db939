//! Binary checkpoints.
//!
//! Layout, all integers `u32` little-endian: magic `CVTR`, version, record
//! count, then per record the name length, UTF-8 name, rank, dims and the
//! `f32` little-endian payload. Complex tensors are stored as their `.re`
//! record followed by their `.im` record. A `meta.config` record carries the
//! model configuration; optional `adam.*` records carry optimizer state.

use std::fs;
use std::path::Path;

use crate::architecture::{init_params, Model, ModelConfig};
use crate::training::AdamState;
use crate::{Error, Result, Tensor};

pub const MAGIC: &[u8; 4] = b"CVTR";
pub const VERSION: u32 = 1;

const META: &str = "meta.config";
const ADAM_STEP: &str = "adam.step";
/// Largest step count an `f32` payload holds exactly.
const MAX_STEP: u64 = 1 << 24;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Record {
    fn new(name: impl Into<String>, dims: &[usize], data: Vec<f32>) -> Self {
        Record {
            name: name.into(),
            dims: dims.to_vec(),
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

fn config_to_values(c: &ModelConfig) -> Vec<f32> {
    vec![
        c.n_back as f32,
        c.n_forward as f32,
        c.scales as f32,
        c.channels as f32,
        c.alpha as f32,
        c.refinement_enabled as u8 as f32,
        c.unet_depth as f32,
        c.color_channels as f32,
        c.real_valued as u8 as f32,
    ]
}

fn config_from_values(v: &[f32]) -> Result<ModelConfig> {
    let bad = || Error::Checkpoint(format!("malformed {META} record"));
    if v.len() != 9 {
        return Err(bad());
    }
    let count = |x: f32| -> Result<usize> {
        if x >= 0.0 && x.fract() == 0.0 && x < MAX_STEP as f32 {
            Ok(x as usize)
        } else {
            Err(bad())
        }
    };
    let flag = |x: f32| -> Result<bool> {
        match x {
            0.0 => Ok(false),
            1.0 => Ok(true),
            _ => Err(bad()),
        }
    };
    // shortest decimal form of the stored f32, so 0.2 comes back as 0.2
    let alpha: f64 = v[4].to_string().parse().map_err(|_| bad())?;
    let cfg = ModelConfig {
        n_back: count(v[0])?,
        n_forward: count(v[1])?,
        scales: count(v[2])?,
        channels: count(v[3])?,
        alpha,
        refinement_enabled: flag(v[5])?,
        unet_depth: count(v[6])?,
        color_channels: count(v[7])?,
        real_valued: flag(v[8])?,
    };
    cfg.validate()?;
    Ok(cfg)
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, adam: Option<&AdamState<f32>>) -> Result<Self> {
        let mut records = vec![Record::new(META, &[9], config_to_values(&model.config))];
        for (_, name, t) in model.params.iter() {
            records.push(Record::new(name, t.shape(), t.data().to_vec()));
        }
        if let Some(state) = adam {
            if state.m.len() != model.params.len() || state.v.len() != model.params.len() {
                return Err(Error::Checkpoint(
                    "optimizer state does not match the parameter list".into(),
                ));
            }
            if state.step > MAX_STEP {
                return Err(Error::Checkpoint(format!(
                    "optimizer step {} exceeds {MAX_STEP}",
                    state.step
                )));
            }
            for ((_, name, _), m) in model.params.iter().zip(&state.m) {
                records.push(Record::new(format!("adam.m.{name}"), m.shape(), m.data().to_vec()));
            }
            for ((_, name, _), v) in model.params.iter().zip(&state.v) {
                records.push(Record::new(format!("adam.v.{name}"), v.shape(), v.data().to_vec()));
            }
            records.push(Record::new(ADAM_STEP, &[1], vec![state.step as f32]));
        }
        Ok(Checkpoint { records })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self
            .records
            .iter()
            .map(|r| 8 + r.name.len() + 4 * (r.dims.len() + r.data.len()))
            .sum();
        let mut out = Vec::with_capacity(12 + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
            for &d in &r.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in &r.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        let magic = rd.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {:?}, expected \"CVTR\"",
                String::from_utf8_lossy(magic)
            )));
        }
        let version = rd.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let count = rd.u32("record count")? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let len = rd.u32("name length")? as usize;
            let name = std::str::from_utf8(rd.take(len, "name")?)
                .map_err(|_| Error::Checkpoint(format!("record {i}: name is not UTF-8")))?
                .to_string();
            let rank = rd.u32("rank")? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(rd.u32("dims")? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("record `{name}`: dims overflow")))?;
            let raw = rd.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Checkpoint(format!("record `{name}`: dims overflow")))?,
                "payload",
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            records.push(Record { name, dims, data });
        }
        if rd.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last record",
                bytes.len() - rd.pos
            )));
        }
        Ok(Checkpoint { records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    pub fn record(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    /// Configuration stored alongside the weights.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let r = self
            .record(META)
            .ok_or_else(|| Error::Checkpoint(format!("no {META} record")))?;
        config_from_values(&r.data)
    }

    /// Builds a model for `config` from the stored weights. Parameters must
    /// appear in the model's order with matching shapes; the first layer
    /// that differs is named in the error. Nothing is returned on failure.
    pub fn restore(&self, config: &ModelConfig) -> Result<(Model<f32>, Option<AdamState<f32>>)> {
        let mut model = init_params::<f32>(config, 0)?;
        let mut weights = self
            .records
            .iter()
            .filter(|r| r.name != META && !r.name.starts_with("adam."));
        let ids: Vec<_> = model.params.ids().collect();
        for &id in &ids {
            let expected = model.params.name(id).to_string();
            let shape = model.params.get(id).shape().to_vec();
            let r = weights
                .next()
                .ok_or_else(|| Error::Checkpoint(format!("layer mismatch at `{expected}`: missing from checkpoint")))?;
            if r.name != expected || r.dims != shape {
                return Err(Error::Checkpoint(format!(
                    "layer mismatch at `{expected}` {shape:?}: checkpoint has `{}` {:?}",
                    r.name, r.dims
                )));
            }
            *model.params.get_mut(id) = Tensor::from_vec(&r.dims, r.data.clone())?;
        }
        if let Some(extra) = weights.next() {
            return Err(Error::Checkpoint(format!(
                "layer mismatch at `{}`: not part of the model",
                extra.name
            )));
        }

        let adam = match self.record(ADAM_STEP) {
            None => None,
            Some(step) => {
                let mut state = AdamState::new(&model.params);
                for (k, &id) in ids.iter().enumerate() {
                    let name = model.params.name(id);
                    let shape = model.params.get(id).shape();
                    for (prefix, slot) in [("adam.m.", &mut state.m[k]), ("adam.v.", &mut state.v[k])] {
                        let key = format!("{prefix}{name}");
                        let r = self
                            .record(&key)
                            .ok_or_else(|| Error::Checkpoint(format!("missing optimizer record `{key}`")))?;
                        if r.dims != shape {
                            return Err(Error::Checkpoint(format!(
                                "optimizer record `{key}` has dims {:?}",
                                r.dims
                            )));
                        }
                        *slot = Tensor::from_vec(&r.dims, r.data.clone())?;
                    }
                }
                let s = step.data.first().copied().unwrap_or(-1.0);
                if step.data.len() != 1 || s < 0.0 || s.fract() != 0.0 {
                    return Err(Error::Checkpoint(format!("malformed {ADAM_STEP} record")));
                }
                state.step = s as u64;
                Some(state)
            }
        };
        Ok((model, adam))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model<f32>, adam: Option<&AdamState<f32>>) -> Result<()> {
    Checkpoint::from_model(model, adam)?.save(path)
}

/// Loads a checkpoint using the configuration recorded inside it.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model<f32>, Option<AdamState<f32>>)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = ckpt.model_config()?;
    ckpt.restore(&cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            channels: 4,
            ..ModelConfig::tiny()
        }
    }

    fn trained_state(model: &Model<f32>) -> AdamState<f32> {
        let mut s = AdamState::new(&model.params);
        for (k, m) in s.m.iter_mut().enumerate() {
            m.data_mut().iter_mut().for_each(|x| *x = k as f32 * 0.5 - 1.0);
        }
        for v in s.v.iter_mut() {
            v.data_mut().iter_mut().for_each(|x| *x = 0.25);
        }
        s.step = 37;
        s
    }

    #[test]
    fn byte_round_trip_is_identical() {
        let m = init_params::<f32>(&small(), 3).unwrap();
        let adam = trained_state(&m);
        let bytes = Checkpoint::from_model(&m, Some(&adam)).unwrap().to_bytes();
        let (m2, a2) = Checkpoint::from_bytes(&bytes).unwrap().restore(&small()).unwrap();
        assert!(m.params.bit_eq(&m2.params));
        let a2 = a2.unwrap();
        assert_eq!(a2.step, 37);
        assert_eq!(a2.m, adam.m);
        assert_eq!(a2.v, adam.v);
        assert_eq!(Checkpoint::from_model(&m2, Some(&a2)).unwrap().to_bytes(), bytes);
    }

    #[test]
    fn header_layout() {
        let m = init_params::<f32>(&small(), 3).unwrap();
        let bytes = Checkpoint::from_model(&m, None).unwrap().to_bytes();
        assert_eq!(&bytes[..4], b"CVTR");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(
            u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize,
            m.params.len() + 1
        );
        let name_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        assert_eq!(&bytes[16..16 + name_len], b"meta.config");
    }

    #[test]
    fn stored_config_comes_back() {
        let cfg = ModelConfig {
            refinement_enabled: false,
            real_valued: true,
            ..small()
        };
        let m = init_params::<f32>(&cfg, 1).unwrap();
        let ck = Checkpoint::from_bytes(&Checkpoint::from_model(&m, None).unwrap().to_bytes()).unwrap();
        assert_eq!(ck.model_config().unwrap(), cfg);
        let (m2, adam) = ck.restore(&cfg).unwrap();
        assert!(adam.is_none());
        let frozen = m.params.ids().filter(|&id| m.params.is_frozen(id)).count();
        assert!(frozen > 0);
        assert_eq!(m2.params.ids().filter(|&id| m2.params.is_frozen(id)).count(), frozen);
    }

    #[test]
    fn corrupted_magic_names_expected() {
        let m = init_params::<f32>(&small(), 3).unwrap();
        let mut bytes = Checkpoint::from_model(&m, None).unwrap().to_bytes();
        bytes[0] = b'X';
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("CVTR"), "{err}");
    }

    #[test]
    fn version_and_truncation_rejected() {
        let m = init_params::<f32>(&small(), 3).unwrap();
        let bytes = Checkpoint::from_model(&m, None).unwrap().to_bytes();
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(Checkpoint::from_bytes(&v2)
            .unwrap_err()
            .to_string()
            .contains("version 2"));
        for cut in [3, 11, 20, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err().to_string();
            assert!(err.contains("truncated"), "{err}");
        }
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn config_mismatch_names_first_divergent_layer() {
        let m = init_params::<f32>(&small(), 3).unwrap();
        let ck = Checkpoint::from_model(&m, None).unwrap();
        let wider = ModelConfig { channels: 8, ..small() };
        let err = ck.restore(&wider).unwrap_err().to_string();
        assert!(err.contains("`real2complex1.re.weight`"), "{err}");
        let no_refine = ModelConfig {
            refinement_enabled: false,
            ..small()
        };
        let err = ck.restore(&no_refine).unwrap_err().to_string();
        assert!(err.contains("refine.real2complex"), "{err}");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.cvtr");
        let m = init_params::<f32>(&small(), 9).unwrap();
        save_checkpoint(&path, &m, None).unwrap();
        let (m2, _) = load_checkpoint(&path).unwrap();
        assert_eq!(m2.config, m.config);
        assert!(m.params.bit_eq(&m2.params));
        assert!(load_checkpoint(dir.path().join("missing")).is_err());
    }
}
