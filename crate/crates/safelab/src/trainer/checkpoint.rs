//! Bit-exact binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"SLCK"
//! u32      format version (1)
//! u64      config JSON length, then that many bytes
//! u32      tensor count
//! repeat:  u16 name length, name bytes,
//!          u8 rank, rank × u64 dims,
//!          u64 data byte length, f32 LE data
//! u64      state JSON length, then that many bytes
//! ```
//!
//! Tensors are the model parameters followed by the Adam moments
//! (`adam.m.*`, `adam.v.*`) in the parameter set's stable order, so
//! save → load → save reproduces the file byte for byte.

use super::{AdamState, StreamSnapshot, TrainConfig, TrainError, TrainState};
use crate::corpus::Source;
use crate::model::{Model, ModelConfig, ParamSet};
use crate::rng::StreamState;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"SLCK";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ConfigRecord {
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct StateRecord {
    step: u64,
    tokens_seen: u64,
    adam_step: u64,
    mixture_rng: StreamState,
    streams: BTreeMap<String, StreamSnapshot>,
    loss_history: Vec<f32>,
    accounting: BTreeMap<String, u64>,
}

/// Expected dims of a tensor, by its name with any `adam.m.`/`adam.v.`
/// prefix removed.
fn shape_of(config: &ModelConfig, name: &str) -> Result<Vec<u64>, TrainError> {
    let (d, f, v) = (config.d_model as u64, config.d_ff as u64, config.vocab_size as u64);
    let base = name.rsplit('.').next().unwrap_or(name);
    match base {
        "emb" => Ok(vec![v, d]),
        "lnf" | "ln1" | "ln2" => Ok(vec![d]),
        "wq" | "wk" | "wv" | "wo" => Ok(vec![d, d]),
        "wg" | "wu" => Ok(vec![d, f]),
        "wd" => Ok(vec![f, d]),
        _ => Err(TrainError::CorruptCheckpoint(format!("unknown tensor name {name:?}"))),
    }
}

fn stream_key(phase: usize, source: Source) -> String {
    format!("{phase}:{source}")
}

fn parse_stream_key(key: &str) -> Result<(usize, Source), TrainError> {
    let (phase, source) = key
        .split_once(':')
        .ok_or_else(|| TrainError::CorruptCheckpoint(format!("bad stream key {key:?}")))?;
    let phase = phase
        .parse()
        .map_err(|_| TrainError::CorruptCheckpoint(format!("bad stream phase in {key:?}")))?;
    let source = Source::parse(source)
        .ok_or_else(|| TrainError::CorruptCheckpoint(format!("bad stream source in {key:?}")))?;
    Ok((phase, source))
}

fn write_tensor(out: &mut Vec<u8>, config: &ModelConfig, name: &str, data: &[f32]) -> Result<(), TrainError> {
    let dims = shape_of(config, name)?;
    let expect: u64 = dims.iter().product();
    debug_assert_eq!(expect as usize, data.len(), "tensor {name}");
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dims.len() as u8);
    for &dim in &dims {
        out.extend_from_slice(&dim.to_le_bytes());
    }
    out.extend_from_slice(&((data.len() * 4) as u64).to_le_bytes());
    for &x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(())
}

/// Serialize a checkpoint to bytes.
pub fn checkpoint_bytes(
    model: &Model<f32>,
    state: &TrainState,
    train_config: &TrainConfig,
) -> Result<Vec<u8>, TrainError> {
    let config_json = serde_json::to_string(&ConfigRecord {
        model: model.config,
        train: train_config.clone(),
    })
    .expect("config serializes");

    let mut streams: BTreeMap<String, StreamSnapshot> = state
        .stream_snapshots
        .iter()
        .map(|(&(p, s), snap)| (stream_key(p, s), snap.clone()))
        .collect();
    for (&(p, s), live) in &state.streams {
        streams.insert(stream_key(p, s), live.snapshot());
    }
    let state_json = serde_json::to_string(&StateRecord {
        step: state.step,
        tokens_seen: state.tokens_seen,
        adam_step: state.adam.t,
        mixture_rng: StreamState::capture(&state.mixture_rng),
        streams,
        loss_history: state.loss_history.clone(),
        accounting: state
            .accounting
            .iter()
            .map(|(&(p, s), &n)| (stream_key(p, s), n))
            .collect(),
    })
    .expect("state serializes");

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u64).to_le_bytes());
    out.extend_from_slice(config_json.as_bytes());

    let n_tensors = 3 * (1 + 9 * model.config.n_layer + 1) as u32;
    out.extend_from_slice(&n_tensors.to_le_bytes());
    let mut err = None;
    model.params.for_each(|name, t| {
        if err.is_none() {
            err = write_tensor(&mut out, &model.config, &name, t).err();
        }
    });
    state.adam.m.for_each(|name, t| {
        if err.is_none() {
            err = write_tensor(&mut out, &model.config, &format!("adam.m.{name}"), t).err();
        }
    });
    state.adam.v.for_each(|name, t| {
        if err.is_none() {
            err = write_tensor(&mut out, &model.config, &format!("adam.v.{name}"), t).err();
        }
    });
    if let Some(e) = err {
        return Err(e);
    }

    out.extend_from_slice(&(state_json.len() as u64).to_le_bytes());
    out.extend_from_slice(state_json.as_bytes());
    Ok(out)
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &Model<f32>,
    state: &TrainState,
    train_config: &TrainConfig,
) -> Result<(), TrainError> {
    let bytes = checkpoint_bytes(model, state, train_config)?;
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    file.sync_all()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn exact(&mut self, buf: &mut [u8]) -> Result<(), TrainError> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                TrainError::CorruptCheckpoint("file truncated".into())
            } else {
                TrainError::CheckpointIo(e)
            }
        })
    }

    fn u16(&mut self) -> Result<u16, TrainError> {
        let mut b = [0u8; 2];
        self.exact(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        let mut b = [0u8; 8];
        self.exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn u8(&mut self) -> Result<u8, TrainError> {
        let mut b = [0u8; 1];
        self.exact(&mut b)?;
        Ok(b[0])
    }

    fn bytes(&mut self, n: usize) -> Result<Vec<u8>, TrainError> {
        let mut buf = vec![0u8; n];
        self.exact(&mut buf)?;
        Ok(buf)
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model<f32>, TrainState, TrainConfig), TrainError> {
    let file = std::fs::File::open(path.as_ref())?;
    let mut r = Reader { inner: io::BufReader::new(file) };

    let mut magic = [0u8; 4];
    r.exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TrainError::CorruptCheckpoint(format!("bad magic {magic:02x?}")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(TrainError::CorruptCheckpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }

    let config_len = r.u64()? as usize;
    let config_json = r.bytes(config_len)?;
    let config: ConfigRecord = serde_json::from_slice(&config_json)
        .map_err(|e| TrainError::CorruptCheckpoint(format!("bad config record: {e}")))?;
    config.model.validate()?;

    let n_tensors = r.u32()? as usize;
    let mut tensors: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    for _ in 0..n_tensors {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.bytes(name_len)?)
            .map_err(|_| TrainError::CorruptCheckpoint("tensor name not UTF-8".into()))?;
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64()?);
        }
        let expect = shape_of(&config.model, &name)?;
        if dims != expect {
            return Err(TrainError::CorruptCheckpoint(format!(
                "tensor {name}: shape {dims:?}, expected {expect:?}"
            )));
        }
        let byte_len = r.u64()? as usize;
        let n: u64 = dims.iter().product();
        if byte_len != n as usize * 4 {
            return Err(TrainError::CorruptCheckpoint(format!(
                "tensor {name}: {byte_len} bytes for {n} elements"
            )));
        }
        let raw = r.bytes(byte_len)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if tensors.insert(name.clone(), data).is_some() {
            return Err(TrainError::CorruptCheckpoint(format!("duplicate tensor {name}")));
        }
    }

    let state_len = r.u64()? as usize;
    let state_json = r.bytes(state_len)?;
    let record: StateRecord = serde_json::from_slice(&state_json)
        .map_err(|e| TrainError::CorruptCheckpoint(format!("bad state record: {e}")))?;

    let mut fill = |prefix: &str, set: &mut ParamSet<f32>| -> Result<(), TrainError> {
        let mut missing = None;
        set.for_each_mut(|name, t| {
            let full = if prefix.is_empty() { name } else { format!("{prefix}{name}") };
            match tensors.remove(&full) {
                Some(data) if data.len() == t.len() => t.copy_from_slice(&data),
                Some(_) => {
                    missing.get_or_insert(format!("tensor {full} has wrong length"));
                }
                None => {
                    missing.get_or_insert(format!("missing tensor {full}"));
                }
            }
        });
        match missing {
            Some(m) => Err(TrainError::CorruptCheckpoint(m)),
            None => Ok(()),
        }
    };

    let mut model = Model {
        config: config.model,
        params: ParamSet::zeros_like_config(&config.model),
    };
    let mut adam = AdamState::new(&config.model);
    adam.t = record.adam_step;
    fill("", &mut model.params)?;
    fill("adam.m.", &mut adam.m)?;
    fill("adam.v.", &mut adam.v)?;
    if let Some(name) = tensors.keys().next() {
        return Err(TrainError::CorruptCheckpoint(format!("unexpected tensor {name}")));
    }

    let mixture_rng = record
        .mixture_rng
        .restore()
        .map_err(|e| TrainError::CorruptCheckpoint(format!("bad RNG state: {e}")))?;
    let mut stream_snapshots = BTreeMap::new();
    for (key, snap) in record.streams {
        stream_snapshots.insert(parse_stream_key(&key)?, snap);
    }
    let mut accounting = BTreeMap::new();
    for (key, n) in record.accounting {
        accounting.insert(parse_stream_key(&key)?, n);
    }

    let state = TrainState {
        step: record.step,
        tokens_seen: record.tokens_seen,
        adam,
        mixture_rng,
        streams: BTreeMap::new(),
        stream_snapshots,
        loss_history: record.loss_history,
        accounting,
    };
    Ok((model, state, config.train))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, Document, Variant};
    use crate::curriculum::{make_schedule, Mixture};
    use crate::model::ModelConfig;
    use crate::trainer::{pretrain, PretrainOpts};

    fn tiny_model(seed: u64) -> Model<f32> {
        Model::init(ModelConfig {
            n_layer: 1,
            n_head: 2,
            d_model: 16,
            d_ff: 32,
            context_len: 16,
            vocab_size: crate::corpus::Vocab::SIZE,
            seed,
        })
        .unwrap()
    }

    fn corpora() -> BTreeMap<Source, Corpus> {
        let docs: Vec<Document> = (0..30)
            .map(|i| Document {
                id: format!("d{i}"),
                text: format!("document {i} with some repeated words to learn from."),
                safety_score: 0.1,
                source: Source::Web,
                variant: Variant::Raw,
                response: None,
            })
            .collect();
        [(Source::Web, Corpus::from_documents(docs).unwrap())].into_iter().collect()
    }

    fn schedule(budget: u64) -> crate::curriculum::CurriculumSchedule {
        let m: Mixture = [(Source::Web, 1.0)].into_iter().collect();
        make_schedule(0.0, budget, &m, &m).unwrap()
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = tiny_model(3);
        let config = TrainConfig { batch_size: 2, seed: 11, ..TrainConfig::default() };
        let mut state = TrainState::new(&model.config, config.seed);
        pretrain(
            &mut model,
            &schedule(320),
            &corpora(),
            &config,
            &mut state,
            PretrainOpts { pause_at_step: Some(5), ..Default::default() },
            |_| {},
        )
        .unwrap();

        let p1 = dir.path().join("a.ckpt");
        save_checkpoint(&p1, &model, &state, &config).unwrap();
        let (m2, s2, c2) = load_checkpoint(&p1).unwrap();
        assert_eq!(m2.params, model.params);
        assert_eq!(s2.step, state.step);
        assert_eq!(s2.adam.m, state.adam.m);
        assert_eq!(c2, config);

        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p2, &m2, &s2, &c2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn resume_reproduces_uninterrupted_run_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let config = TrainConfig { batch_size: 1, seed: 21, ..TrainConfig::default() };
        let sched = schedule(320); // 20 steps of 16 tokens

        // Uninterrupted twin.
        let mut m_full = tiny_model(5);
        let mut s_full = TrainState::new(&m_full.config, config.seed);
        pretrain(&mut m_full, &sched, &corpora(), &config, &mut s_full, PretrainOpts::default(), |_| {})
            .unwrap();
        assert_eq!(s_full.step, 20);

        // Interrupt at step 10, checkpoint, reload, continue.
        let mut m_half = tiny_model(5);
        let mut s_half = TrainState::new(&m_half.config, config.seed);
        pretrain(
            &mut m_half,
            &sched,
            &corpora(),
            &config,
            &mut s_half,
            PretrainOpts { pause_at_step: Some(10), ..Default::default() },
            |_| {},
        )
        .unwrap();
        assert_eq!(s_half.step, 10);
        let ckpt = dir.path().join("mid.ckpt");
        save_checkpoint(&ckpt, &m_half, &s_half, &config).unwrap();

        let (mut m_res, mut s_res, c_res) = load_checkpoint(&ckpt).unwrap();
        pretrain(&mut m_res, &sched, &corpora(), &c_res, &mut s_res, PretrainOpts::default(), |_| {})
            .unwrap();

        assert_eq!(s_res.loss_history, s_full.loss_history);
        assert_eq!(m_res.params, m_full.params);
        assert_eq!(s_res.accounting, s_full.accounting);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model(1);
        let config = TrainConfig::default();
        let state = TrainState::new(&model.config, 0);
        let path = dir.path().join("good.ckpt");
        save_checkpoint(&path, &model, &state, &config).unwrap();
        let good = std::fs::read(&path).unwrap();

        // Truncation.
        let trunc = dir.path().join("trunc.ckpt");
        std::fs::write(&trunc, &good[..good.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&trunc), Err(TrainError::CorruptCheckpoint(_))));

        // Bad magic.
        let mut bad = good.clone();
        bad[0] = b'X';
        let badp = dir.path().join("magic.ckpt");
        std::fs::write(&badp, &bad).unwrap();
        assert!(matches!(load_checkpoint(&badp), Err(TrainError::CorruptCheckpoint(_))));

        // Bad version.
        let mut badv = good.clone();
        badv[4] = 99;
        let badvp = dir.path().join("version.ckpt");
        std::fs::write(&badvp, &badv).unwrap();
        assert!(matches!(load_checkpoint(&badvp), Err(TrainError::CorruptCheckpoint(_))));
    }
}
