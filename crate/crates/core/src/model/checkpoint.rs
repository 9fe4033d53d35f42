//! Versioned binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"NCDLABCK"
//! version u32 (= 1)
//! count   u32
//! count x { name_len u32, name utf-8, rank u32, dims u64 x rank, values f64 x prod(dims) }
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a round trip is bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Linear, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"NCDLABCK";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(params: &ModelParams, mut w: W) -> Result<()> {
    let named = params.named_tensors();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(named.len() as u32).to_le_bytes())?;
    for (name, t) in named {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    write_checkpoint(params, BufWriter::new(File::create(path).map_err(Error::file(path))?))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Reads a checkpoint. Loaded parameters are trainable.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelParams> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| corrupt("file too short for header"))?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic bytes"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut arrays = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 256 {
            return Err(corrupt("array name too long"));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| corrupt("array name is not utf-8"))?;
        let rank = read_u32(&mut r)? as usize;
        if !(1..=2).contains(&rank) {
            return Err(corrupt(format!("{name}: unsupported rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = dims.iter().product();
        if len > 1 << 28 {
            return Err(corrupt(format!("{name}: implausible size {len}")));
        }
        let mut bytes = vec![0u8; len * 8];
        r.read_exact(&mut bytes)?;
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if arrays.insert(name.clone(), Tensor::new(dims, values)?).is_some() {
            return Err(corrupt(format!("duplicate array {name}")));
        }
    }
    let mut encoder = Vec::new();
    while arrays.contains_key(&format!("encoder.{}.weight", encoder.len())) {
        let i = encoder.len();
        encoder.push(Linear {
            weight: take(&mut arrays, &format!("encoder.{i}.weight"))?,
            bias: take(&mut arrays, &format!("encoder.{i}.bias"))?,
        });
    }
    let known_head = take(&mut arrays, "known_head")?;
    let novel_head = take(&mut arrays, "novel_head")?;
    let novel_projection = if arrays.contains_key("projection.0.weight") {
        let mut layers = Vec::with_capacity(2);
        for i in 0..2 {
            layers.push(Linear {
                weight: take(&mut arrays, &format!("projection.{i}.weight"))?,
                bias: take(&mut arrays, &format!("projection.{i}.bias"))?,
            });
        }
        Some(layers)
    } else {
        None
    };
    if let Some(extra) = arrays.keys().next() {
        return Err(corrupt(format!("unexpected array {extra}")));
    }
    let params = ModelParams {
        encoder,
        known_head,
        novel_head,
        novel_projection,
    };
    params.validate().map_err(|e| corrupt(e.to_string()))?;
    Ok(params.trainable())
}

fn take(arrays: &mut BTreeMap<String, Tensor>, name: &str) -> Result<Tensor> {
    arrays
        .remove(name)
        .ok_or_else(|| corrupt(format!("missing array {name}")))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    read_checkpoint(BufReader::new(File::open(path).map_err(Error::file(path))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bits(p: &ModelParams) -> Vec<u64> {
        p.tensors().iter().flat_map(|t| t.values().iter().map(|v| v.to_bits())).collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for projection in [Some(32), None] {
            let mut arch = Architecture::desk_scale(16, 10, 5);
            arch.projection_hidden = projection;
            let p = ModelParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
            let mut buf = Vec::new();
            write_checkpoint(&p, &mut buf).unwrap();
            let q = read_checkpoint(buf.as_slice()).unwrap();
            assert_eq!(bits(&p), bits(&q));
            assert_eq!(p, q);
        }
    }

    #[test]
    fn rejects_corruption() {
        let arch = Architecture::desk_scale(4, 3, 2);
        let p = ModelParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(Error::Checkpoint(_))));
        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(Error::Checkpoint(_))));
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
        assert!(read_checkpoint(&buf[..4]).is_err());
    }
}
