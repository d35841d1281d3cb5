//! Training checkpoints.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! magic        b"PVCK"
//! version      u32
//! header_len   u64
//! header       UTF-8 JSON: config, stage, step, trained steps, mel stats,
//!              parameter names and shapes, Adam step counts, metric log
//! payload      per parameter in header order: value, Adam m, Adam v (f64 LE)
//! ```
//!
//! Values are stored as raw f64 bits, so a save/load round trip is exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{MelStats, Model};
use crate::nn::optim::Adam;
use crate::nn::Matrix;
use crate::training::{MetricRecord, Stage, TrainState};

pub const MAGIC: &[u8; 4] = b"PVCK";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    adam_t: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    stage: Stage,
    step: u64,
    trained_steps: u64,
    mel_stats: MelStats,
    tensors: Vec<TensorEntry>,
    log: Vec<MetricRecord>,
}

fn push_matrix(out: &mut Vec<u8>, m: &Matrix) {
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(state: &TrainState) -> Vec<u8> {
    let store = &state.model.store;
    let header = Header {
        config: state.model.run.clone(),
        stage: state.stage,
        step: state.step,
        trained_steps: state.model.trained_steps,
        mel_stats: state.model.mel_stats.clone(),
        tensors: store
            .ids()
            .map(|id| {
                let (r, c) = store.get(id).shape();
                TensorEntry {
                    name: store.name(id).to_string(),
                    shape: [r, c],
                    adam_t: state.adam.slots[id.index()].t,
                }
            })
            .collect(),
        log: state.log.clone(),
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 24 * store.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for id in store.ids() {
        let slot = &state.adam.slots[id.index()];
        push_matrix(&mut out, store.get(id));
        push_matrix(&mut out, &slot.m);
        push_matrix(&mut out, &slot.v);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn fill(&mut self, m: &mut Matrix) -> Result<()> {
        let raw = self.take(8 * m.len())?;
        for (v, chunk) in m.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        Ok(())
    }
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<TrainState> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    let mut model = Model::new(&header.config, header.mel_stats)?;
    if model.store.len() != header.tensors.len() {
        return Err(Error::format(path, "parameter count does not match the configured model"));
    }
    let mut adam = Adam::new(&model.store);
    for (id, entry) in model.store.ids().zip(&header.tensors) {
        let (rows, cols) = model.store.get(id).shape();
        if entry.name != model.store.name(id) || entry.shape != [rows, cols] {
            return Err(Error::format(path, format!("parameter {} does not match the configured model", entry.name)));
        }
        r.fill(model.store.get_mut(id))?;
        let slot = &mut adam.slots[id.index()];
        r.fill(&mut slot.m)?;
        r.fill(&mut slot.v)?;
        slot.t = entry.adam_t;
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after checkpoint payload"));
    }
    model.trained_steps = header.trained_steps;
    Ok(TrainState {
        model,
        adam,
        stage: header.stage,
        step: header.step,
        log: header.log,
    })
}

/// Writes atomically via a temporary sibling file.
pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, to_bytes(state))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn state() -> TrainState {
        let mut run = RunConfig::default();
        run.model = ModelConfig {
            n_blocks: 1,
            ..ModelConfig::compact()
        };
        let mut stats = MelStats::identity(run.frame.n_mels);
        stats.mean[0] = 1.3924583153451113;
        stats.std[1] = 0.1 + 0.2;
        let model = Model::new(&run, stats).unwrap();
        let mut adam = Adam::new(&model.store);
        adam.slots[3].t = 11;
        adam.slots[3].m.data_mut()[0] = 0.1 + 0.2;
        let mut rec = MetricRecord::new(3, Stage::Pretrain, crate::training::Phase::D, 1e-3, 1.0 / 3.0);
        rec.ce = Some(1.3924583153451113);
        TrainState {
            model,
            adam,
            stage: Stage::Adapt,
            step: 42,
            log: vec![rec],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = state();
        let bytes = to_bytes(&s);
        let back = from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.model.store, s.model.store);
        assert_eq!(back.model.mel_stats, s.model.mel_stats);
        assert_eq!(back.log, s.log);
        assert_eq!(back.adam, s.adam);
        assert_eq!((back.stage, back.step), (Stage::Adapt, 42));
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn rejects_damaged_files() {
        let bytes = to_bytes(&state());
        let p = Path::new("mem");
        assert!(from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad, p), Err(Error::Format { .. })));
        let mut longer = bytes;
        longer.push(0);
        assert!(from_bytes(&longer, p).is_err());
    }
}
