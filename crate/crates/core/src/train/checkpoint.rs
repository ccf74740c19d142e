//! Checkpoint files: the run config as header text, then parameters,
//! optimizer moments, batch-norm buffers and the noise generator position.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{AdamState, ParamStore, Precision, Tensor};
use crate::nets::Buffers;
use crate::records::{Record, RecordData, RecordFile, FORMAT_VERSION};

use super::{Result, TrainConfig, TrainError, TrainState};

pub const CHECKPOINT_VERSION: u32 = FORMAT_VERSION;

fn rng_words(rng: &ChaCha8Rng) -> Vec<u64> {
    let seed = rng.get_seed();
    let mut words: Vec<u64> = seed.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
    let pos = rng.get_word_pos();
    words.push(rng.get_stream());
    words.push(pos as u64);
    words.push((pos >> 64) as u64);
    words
}

fn rng_from_words(w: &[u64]) -> Result<ChaCha8Rng> {
    if w.len() != 7 {
        return Err(TrainError::Checkpoint(format!("noise generator state has {} words, expected 7", w.len())));
    }
    let mut seed = [0u8; 32];
    for (chunk, word) in seed.chunks_exact_mut(8).zip(&w[..4]) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(w[4]);
    rng.set_word_pos(w[5] as u128 | (w[6] as u128) << 64);
    Ok(rng)
}

fn push_net(file: &mut RecordFile, params: &ParamStore, adam: &AdamState, buffers: &Buffers, precision: Precision) {
    for (i, (name, t)) in params.iter().enumerate() {
        let data = match precision {
            Precision::F32 => RecordData::F32(t.data().iter().map(|&v| v as f32).collect()),
            Precision::F64 => RecordData::F64(t.data().to_vec()),
        };
        file.push(Record::new(format!("param/{name}"), t.shape().to_vec(), data).expect("shape"));
        file.push(Record::f64(format!("adam.m/{name}"), t.shape().to_vec(), adam.m[i].clone()).expect("shape"));
        file.push(Record::f64(format!("adam.v/{name}"), t.shape().to_vec(), adam.v[i].clone()).expect("shape"));
    }
    for (name, t) in buffers {
        file.push(Record::f64(format!("buffer/{name}"), t.shape().to_vec(), t.data().to_vec()).expect("shape"));
    }
}

fn to_file(state: &TrainState) -> RecordFile {
    let mut file = RecordFile::new(state.config.to_text());
    file.push(Record::u64s("state.iteration", vec![state.iteration]));
    file.push(Record::u64s("state.sample_shape", state.sample_shape.iter().map(|&s| s as u64).collect()));
    file.push(Record::u64s("state.noise_rng", rng_words(&state.noise_rng)));
    file.push(Record::u64s("adam_g.step", vec![state.adam_g.step]));
    file.push(Record::u64s("adam_d.step", vec![state.adam_d.step]));
    let p = state.config.precision;
    push_net(&mut file, state.generator.params(), &state.adam_g, &state.generator.buffers(), p);
    push_net(&mut file, state.discriminator.params(), &state.adam_d, &state.discriminator.buffers(), p);
    file
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    Ok(to_file(state).write(path)?)
}

fn single(file: &RecordFile, name: &str) -> Result<u64> {
    match file.require_u64(name)? {
        [v] => Ok(*v),
        other => Err(TrainError::Checkpoint(format!("{name} holds {} values", other.len()))),
    }
}

fn load_net(file: &RecordFile, namespace: &str, params: &mut ParamStore, adam: &mut AdamState) -> Result<Buffers> {
    for i in 0..params.len() {
        let name = params.names()[i].clone();
        let expect = params.tensors()[i].shape().to_vec();
        let take = |prefix: &str| -> Result<Vec<f64>> {
            let (shape, data) = file.require_f64(&format!("{prefix}/{name}"))?;
            if shape != expect {
                return Err(TrainError::Checkpoint(format!("{prefix}/{name} has shape {shape:?}, network expects {expect:?}")));
            }
            Ok(data)
        };
        let values = take("param")?;
        adam.m[i] = take("adam.m")?;
        adam.v[i] = take("adam.v")?;
        params.tensors_mut()[i].data_mut().copy_from_slice(&values);
    }
    let buffers = file
        .records
        .iter()
        .filter_map(|r| {
            let name = r.name.strip_prefix("buffer/").filter(|n| n.starts_with(namespace))?;
            let t = Tensor::new(r.shape.clone(), r.data.to_f64()?).ok()?;
            Some((name.to_string(), t))
        })
        .collect();
    Ok(buffers)
}

/// Rebuilds the networks from the stored config and restores every field
/// except the in-memory metric history.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let file = RecordFile::read(path)?;
    let config = TrainConfig::from_text(&file.header)?;
    let sample_shape: Vec<usize> = file.require_u64("state.sample_shape")?.iter().map(|&s| s as usize).collect();
    let mut state = TrainState::new(config, &sample_shape)?;
    state.iteration = single(&file, "state.iteration")?;
    state.noise_rng = rng_from_words(file.require_u64("state.noise_rng")?)?;
    state.adam_g.step = single(&file, "adam_g.step")?;
    state.adam_d.step = single(&file, "adam_d.step")?;
    let gb = load_net(&file, "g.", state.generator.params_mut(), &mut state.adam_g)?;
    state.generator.load_buffers(&gb)?;
    let db = load_net(&file, "d.", state.discriminator.params_mut(), &mut state.adam_d)?;
    state.discriminator.load_buffers(&db)?;
    let expected = state.generator.params().len() * 3
        + state.discriminator.params().len() * 3
        + gb.len()
        + db.len()
        + 5;
    if file.records.len() != expected {
        return Err(TrainError::Checkpoint(format!("{} records, expected {expected}", file.records.len())));
    }
    Ok(state)
}
