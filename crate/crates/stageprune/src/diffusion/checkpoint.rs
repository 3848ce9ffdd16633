//! Model checkpoints: a JSON config header followed by named flat f64
//! arrays, little-endian. Saving and reloading is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::model::{DenoiserModel, ModelConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SPCK";
const VERSION: u32 = 1;

pub fn save(model: &DenoiserModel, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let config = serde_json::to_vec(&model.config)
        .map_err(|e| Error::InvalidInput(format!("config serialization: {e}")))?;
    w.write_all(&(config.len() as u32).to_le_bytes())?;
    w.write_all(&config)?;

    let slots = model.params.named_slots();
    w.write_all(&(slots.len() as u32).to_le_bytes())?;
    for (name, data) in slots {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(data.len() as u64).to_le_bytes())?;
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<DenoiserModel> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::InvalidInput(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::InvalidInput(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let config_len = read_u32(&mut r)? as usize;
    let mut config_bytes = vec![0u8; config_len];
    r.read_exact(&mut config_bytes)?;
    let config: ModelConfig = serde_json::from_slice(&config_bytes)
        .map_err(|e| Error::InvalidInput(format!("config header: {e}")))?;
    config
        .check()
        .map_err(|e| Error::InvalidInput(format!("config header: {e}")))?;

    let mut model = DenoiserModel::zeroed(config);
    let expected: Vec<String> = model
        .params
        .named_slots()
        .iter()
        .map(|(n, _)| n.clone())
        .collect();
    let slot_count = read_u32(&mut r)? as usize;
    if slot_count != expected.len() {
        return Err(Error::InvalidInput(format!(
            "checkpoint has {slot_count} tensors, model needs {}",
            expected.len()
        )));
    }
    for (i, slot) in model.params.slots_mut().into_iter().enumerate() {
        let name_len = read_u16(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::InvalidInput("bad tensor name".into()))?;
        if name != expected[i] {
            return Err(Error::InvalidInput(format!(
                "tensor order mismatch: expected {}, found {name}",
                expected[i]
            )));
        }
        let len = read_u64(&mut r)? as usize;
        if len != slot.len() {
            return Err(Error::InvalidInput(format!(
                "tensor {name}: expected {} values, found {len}",
                slot.len()
            )));
        }
        let mut buf = [0u8; 8];
        for v in slot.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
    }
    Ok(model)
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
