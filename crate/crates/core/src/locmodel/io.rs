//! Versioned binary model files.
//!
//! Layout (little-endian): magic `XVKDPRM\0`, format version `u32`, config-hash
//! length `u32` and UTF-8 bytes, `levels`/`channels`/`embed_dim` as `u32`,
//! init seed `u64`, parameter count `u64`, then the flat `f64` parameters.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelError, ModelParams};

const MAGIC: &[u8; 8] = b"XVKDPRM\0";
pub const PARAMS_FORMAT_VERSION: u32 = 1;

pub fn write_params<W: Write>(params: &ModelParams, config_hash: &str, mut w: W) -> Result<(), ModelError> {
    w.write_all(MAGIC)?;
    w.write_all(&PARAMS_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(config_hash.len() as u32).to_le_bytes())?;
    w.write_all(config_hash.as_bytes())?;
    for d in [params.levels(), params.channels(), params.embed_dim()] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&params.init_seed().to_le_bytes())?;
    w.write_all(&(params.flat().len() as u64).to_le_bytes())?;
    for v in params.flat() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Returns the parameters and the embedded config hash.
pub fn read_params<R: Read>(mut r: R) -> Result<(ModelParams, String), ModelError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::BadFile("bad magic".into()));
    }
    let mut w4 = [0u8; 4];
    let mut u32_next = |r: &mut R| -> Result<u32, ModelError> {
        r.read_exact(&mut w4)?;
        Ok(u32::from_le_bytes(w4))
    };
    let version = u32_next(&mut r)?;
    if version != PARAMS_FORMAT_VERSION {
        return Err(ModelError::BadFile(format!("unsupported version {version}")));
    }
    let hash_len = u32_next(&mut r)? as usize;
    if hash_len > 1024 {
        return Err(ModelError::BadFile("oversized hash".into()));
    }
    let mut hash = vec![0u8; hash_len];
    r.read_exact(&mut hash)?;
    let hash = String::from_utf8(hash).map_err(|_| ModelError::BadFile("hash is not UTF-8".into()))?;
    let levels = u32_next(&mut r)? as usize;
    let channels = u32_next(&mut r)? as usize;
    let embed_dim = u32_next(&mut r)? as usize;
    let mut w8 = [0u8; 8];
    r.read_exact(&mut w8)?;
    let init_seed = u64::from_le_bytes(w8);
    r.read_exact(&mut w8)?;
    let count = u64::from_le_bytes(w8) as usize;
    if count != 2 * levels * channels * embed_dim {
        return Err(ModelError::BadFile(format!("parameter count {count} inconsistent with shape")));
    }
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut w8)?;
        data.push(f64::from_le_bytes(w8));
    }
    Ok((ModelParams::from_parts(levels, channels, embed_dim, init_seed, data)?, hash))
}

pub fn save_params(params: &ModelParams, config_hash: &str, path: &Path) -> Result<(), ModelError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_params(params, config_hash, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<(ModelParams, String), ModelError> {
    read_params(BufReader::new(fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let p = ModelParams::random(3, 5, 4, 42, 1.0).unwrap();
        let mut buf = Vec::new();
        write_params(&p, "abc123", &mut buf).unwrap();
        let (q, hash) = read_params(&buf[..]).unwrap();
        assert_eq!(p, q);
        assert_eq!(hash, "abc123");
    }

    #[test]
    fn rejects_corrupt_files() {
        let p = ModelParams::random(2, 2, 2, 1, 1.0).unwrap();
        let mut buf = Vec::new();
        write_params(&p, "h", &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'Y';
        assert!(matches!(read_params(&bad[..]), Err(ModelError::BadFile(_))));
        assert!(read_params(&buf[..buf.len() - 3]).is_err());
    }
}
