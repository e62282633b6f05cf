use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::params::ParamStore;
use super::tensor::{Scalar, Tensor2};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CMK1";
pub const FORMAT_VERSION: u32 = 1;

/// Model geometry stored in the checkpoint header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub descriptor_dim: u32,
    pub layers: u32,
    pub heads: u32,
}

/// Write header plus all parameters (sorted by name) as row-major 64-bit
/// little-endian values.
pub fn save_checkpoint(path: &Path, header: CheckpointHeader, store: &ParamStore) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&header.descriptor_dim.to_le_bytes())?;
    w.write_all(&header.layers.to_le_bytes())?;
    w.write_all(&header.heads.to_le_bytes())?;
    for (name, value) in store.iter() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(value.rows() as u32).to_le_bytes())?;
        w.write_all(&(value.cols() as u32).to_le_bytes())?;
        for &v in value.data() {
            w.write_all(&(v as f64).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint, rejecting wrong magic or version.
pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ParamStore)> {
    if !path.exists() {
        return Err(Error::NoCheckpoint(path.display().to_string()));
    }
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::InvalidData("checkpoint shorter than header".into()))?;
    if &magic != MAGIC {
        return Err(Error::InvalidData(format!(
            "bad checkpoint magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::InvalidData(format!(
            "unsupported checkpoint version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let header = CheckpointHeader {
        descriptor_dim: read_u32(&mut r)?,
        layers: read_u32(&mut r)?,
        heads: read_u32(&mut r)?,
    };
    let mut store = ParamStore::new(0);
    loop {
        let mut len_buf = [0u8; 4];
        match r.read(&mut len_buf)? {
            0 => break,
            4 => {}
            _ => return Err(Error::InvalidData("truncated parameter record".into())),
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| Error::InvalidData("truncated parameter name".into()))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::InvalidData("parameter name is not UTF-8".into()))?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut buf = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut buf)
                .map_err(|_| Error::InvalidData(format!("truncated values for {name:?}")))?;
            data.push(f64::from_le_bytes(buf) as Scalar);
        }
        store.insert(&name, Tensor2::from_vec(rows, cols, data)?)?;
    }
    Ok((header, store))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::InvalidData("truncated checkpoint header".into()))?;
    Ok(u32::from_le_bytes(buf))
}

/// SHA-256 of the file contents, hex-encoded.
pub fn file_content_hash(path: &Path) -> Result<String> {
    let mut f = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 8192];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex_string(&hasher.finalize()))
}

/// SHA-256 of an in-memory byte string, hex-encoded.
pub fn content_hash(bytes: &[u8]) -> String {
    hex_string(&Sha256::digest(bytes))
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_params() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cmk");
        let mut store = ParamStore::new(3);
        store.insert_uniform("a.w", 3, 5, 5).unwrap();
        store.insert_uniform("b.w", 2, 2, 2).unwrap();
        let header = CheckpointHeader {
            descriptor_dim: 64,
            layers: 9,
            heads: 4,
        };
        save_checkpoint(&path, header, &store).unwrap();
        let (h2, loaded) = load_checkpoint(&path).unwrap();
        assert_eq!(header, h2);
        assert_eq!(store.get("a.w").unwrap(), loaded.get("a.w").unwrap());
        assert_eq!(store.get("b.w").unwrap(), loaded.get("b.w").unwrap());
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cmk");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(load_checkpoint(&path).is_err());

        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"CMK1");
        bytes.extend_from_slice(&99u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 12]);
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn missing_file_is_no_checkpoint() {
        let err = load_checkpoint(Path::new("/nonexistent/x.cmk")).unwrap_err();
        assert!(err.to_string().contains("no-checkpoint"));
    }
}
