//! Single-file checkpoint container: a magic tag, a JSON manifest (names,
//! shapes, dtype, byte offsets) and raw little-endian arrays. Writes go to
//! a temp file first and are renamed into place.

use super::{Adam, TrainState, TrainingConfig};
use crate::error::{Error, Result};
use crate::latent::DomainDictionary;
use crate::nets::ParamSet;
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 8] = b"MMITCKP1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    byte_len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: TrainingConfig,
    iteration: u64,
    rng_seed: Vec<u8>,
    rng_word_pos: String,
    domain_dict: String,
    adam_t: BTreeMap<String, u64>,
    entries: Vec<Entry>,
    data_len: u64,
}

const NET_PREFIXES: [&str; 5] = ["ec", "es", "g", "dc", "dx"];

fn net_params<'a>(state: &'a TrainState, prefix: &str) -> &'a ParamSet<f32> {
    match prefix {
        "ec" => &state.nets.content_encoder.params,
        "es" => &state.nets.style_encoder.params,
        "g" => &state.nets.generator.params,
        "dc" => &state.nets.content_critic.params,
        "dx" => &state.nets.image_critic.params,
        _ => unreachable!(),
    }
}

fn net_params_mut<'a>(state: &'a mut TrainState, prefix: &str) -> &'a mut ParamSet<f32> {
    match prefix {
        "ec" => &mut state.nets.content_encoder.params,
        "es" => &mut state.nets.style_encoder.params,
        "g" => &mut state.nets.generator.params,
        "dc" => &mut state.nets.content_critic.params,
        "dx" => &mut state.nets.image_critic.params,
        _ => unreachable!(),
    }
}

fn net_opt<'a>(state: &'a TrainState, prefix: &str) -> &'a Adam {
    match prefix {
        "ec" => &state.opt_ec,
        "es" => &state.opt_es,
        "g" => &state.opt_g,
        "dc" => &state.opt_dc,
        "dx" => &state.opt_dx,
        _ => unreachable!(),
    }
}

fn net_opt_mut<'a>(state: &'a mut TrainState, prefix: &str) -> &'a mut Adam {
    match prefix {
        "ec" => &mut state.opt_ec,
        "es" => &mut state.opt_es,
        "g" => &mut state.opt_g,
        "dc" => &mut state.opt_dc,
        "dx" => &mut state.opt_dx,
        _ => unreachable!(),
    }
}

fn push_array(
    entries: &mut Vec<Entry>,
    data: &mut Vec<u8>,
    name: String,
    arr: &ArrayD<f32>,
) {
    let offset = data.len() as u64;
    let std = arr.as_standard_layout();
    for &v in std.iter() {
        data.extend_from_slice(&v.to_le_bytes());
    }
    entries.push(Entry {
        name,
        shape: arr.shape().to_vec(),
        dtype: "f32".into(),
        offset,
        byte_len: (arr.len() * 4) as u64,
    });
}

/// Persist the full training state. Reloading reproduces forward outputs
/// bitwise and resumes optimization exactly.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut data = Vec::new();
    let mut adam_t = BTreeMap::new();
    for prefix in NET_PREFIXES {
        let ps = net_params(state, prefix);
        for (name, arr) in ps.iter() {
            push_array(&mut entries, &mut data, format!("{prefix}.{name}"), arr);
        }
        let opt = net_opt(state, prefix);
        let (m, v) = opt.moments();
        for (i, (name, _)) in ps.iter().enumerate() {
            push_array(&mut entries, &mut data, format!("adam.{prefix}.m.{name}"), &m[i]);
            push_array(&mut entries, &mut data, format!("adam.{prefix}.v.{name}"), &v[i]);
        }
        adam_t.insert(prefix.to_string(), opt.t);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: state.config.clone(),
        iteration: state.iteration,
        rng_seed: state.rng.get_seed().to_vec(),
        rng_word_pos: state.rng.get_word_pos().to_string(),
        domain_dict: state.dict.to_text(),
        adam_t,
        entries,
        data_len: data.len() as u64,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;

    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(MAGIC)?;
        f.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
        f.write_all(&manifest_bytes)?;
        f.write_all(&data)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn integrity(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

/// Load a checkpoint into a fully reconstructed [`TrainState`].
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(integrity(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let data_start = 16 + manifest_len;
    if bytes.len() < data_start {
        return Err(integrity("truncated checkpoint (manifest cut short)"));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..data_start])
        .map_err(|e| integrity(format!("manifest parse failure: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(integrity(format!(
            "unsupported checkpoint format version {}",
            manifest.format_version
        )));
    }
    let data = &bytes[data_start..];
    if data.len() as u64 != manifest.data_len {
        return Err(integrity(format!(
            "truncated checkpoint: expected {} data bytes, found {}",
            manifest.data_len,
            data.len()
        )));
    }

    let dict = DomainDictionary::from_text(&manifest.domain_dict)?;
    let mut state = TrainState::new(manifest.config.clone(), dict)?;
    state.iteration = manifest.iteration;

    let seed: [u8; 32] = manifest
        .rng_seed
        .as_slice()
        .try_into()
        .map_err(|_| integrity("bad rng seed length"))?;
    let word_pos: u128 = manifest
        .rng_word_pos
        .parse()
        .map_err(|_| integrity("bad rng word position"))?;
    state.rng = rand_chacha::ChaCha8Rng::from_seed(seed);
    state.rng.set_word_pos(word_pos);

    let read_entry = |entry: &Entry| -> Result<ArrayD<f32>> {
        let n: usize = entry.shape.iter().product();
        if entry.byte_len as usize != n * 4 {
            return Err(integrity(format!("entry {} length mismatch", entry.name)));
        }
        let start = entry.offset as usize;
        let end = start + entry.byte_len as usize;
        if end > data.len() {
            return Err(integrity(format!("entry {} out of bounds", entry.name)));
        }
        let vals: Vec<f32> = data[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ArrayD::from_shape_vec(IxDyn(&entry.shape), vals)
            .map_err(|e| integrity(format!("entry {}: {e}", entry.name)))
    };

    let by_name: BTreeMap<&str, &Entry> = manifest
        .entries
        .iter()
        .map(|e| (e.name.as_str(), e))
        .collect();
    if by_name.len() != manifest.entries.len() {
        return Err(integrity("duplicate entry names in manifest"));
    }

    for prefix in NET_PREFIXES {
        let names: Vec<String> = net_params(&state, prefix)
            .names()
            .to_vec();
        let mut m = Vec::with_capacity(names.len());
        let mut v = Vec::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            let lookup = |full: &str| -> Result<ArrayD<f32>> {
                let entry = by_name
                    .get(full)
                    .ok_or_else(|| integrity(format!("checkpoint missing entry {full}")))?;
                read_entry(entry)
            };
            let full = format!("{prefix}.{name}");
            let arr = lookup(&full)?;
            let ps = net_params_mut(&mut state, prefix);
            if ps.value(i).shape() != arr.shape() {
                return Err(integrity(format!(
                    "entry {full} shape {:?} != expected {:?}",
                    arr.shape(),
                    ps.value(i).shape()
                )));
            }
            *ps.value_mut(i) = arr;
            m.push(lookup(&format!("adam.{prefix}.m.{name}"))?);
            v.push(lookup(&format!("adam.{prefix}.v.{name}"))?);
        }
        let t = *manifest
            .adam_t
            .get(prefix)
            .ok_or_else(|| integrity(format!("missing adam_t for {prefix}")))?;
        net_opt_mut(&mut state, prefix).restore_moments(m, v, t);
    }
    let expected = NET_PREFIXES
        .iter()
        .map(|p| net_params(&state, p).len() * 3)
        .sum::<usize>();
    if manifest.entries.len() != expected {
        return Err(integrity(format!(
            "checkpoint has {} entries, expected {expected}",
            manifest.entries.len()
        )));
    }
    Ok(state)
}

/// Guard for resuming: structural fields of the loaded config must match.
pub fn ensure_compatible(loaded: &TrainingConfig, requested: &TrainingConfig) -> Result<()> {
    if let Some(conflict) = loaded.structural_conflict(requested) {
        return Err(Error::ConfigConflict(conflict));
    }
    Ok(())
}
