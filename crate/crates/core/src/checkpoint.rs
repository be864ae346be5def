//! Checkpoint container: binary, little-endian.
//!
//! Layout: magic `BFCK`, format version u32, then repeated records of
//! `{name length u32, name bytes, rank u32, dims u32×rank, payload
//! f64×product(dims)}`. Records are written in the order given, so a model
//! saved twice from the same state produces byte-identical files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BFCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub payload: Vec<f64>,
}

impl Record {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, payload: Vec<f64>) -> Record {
        let r = Record { name: name.into(), dims, payload };
        assert_eq!(
            r.dims.iter().product::<usize>(),
            r.payload.len(),
            "record {} dims/payload mismatch",
            r.name
        );
        r
    }

    /// Pack a UTF-8 string into an f64 payload (one byte per element); used
    /// for the config echo record.
    pub fn from_text(name: impl Into<String>, text: &str) -> Record {
        let payload: Vec<f64> = text.bytes().map(|b| b as f64).collect();
        let dims = vec![payload.len()];
        Record::new(name, dims, payload)
    }

    pub fn to_text(&self) -> Result<String> {
        let bytes: Vec<u8> = self.payload.iter().map(|&v| v as u8).collect();
        String::from_utf8(bytes).map_err(|_| Error::Checkpoint(format!("record {} is not text", self.name)))
    }
}

pub fn write_checkpoint(path: &Path, records: &[Record]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for r in records {
        let name = r.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(r.dims.len() as u32).to_le_bytes())?;
        for &d in &r.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &r.payload {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<Record>> {
    let mut r = BufReader::new(File::open(path)?);
    let bad = |reason: &str| Error::Format { path: path.display().to_string(), reason: reason.into() };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic (expected BFCK)"));
    }
    let version = read_u32(&mut r).map_err(|_| bad("truncated version"))?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let mut records = Vec::new();
    // read to clean EOF
    while let Ok(name_len) = read_u32(&mut r) {
        let name_len = name_len as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|_| bad("truncated record name"))?;
        let name = String::from_utf8(name).map_err(|_| bad("record name is not UTF-8"))?;
        let rank = read_u32(&mut r).map_err(|_| bad("truncated rank"))? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut r).map_err(|_| bad("truncated dims"))? as usize);
        }
        let count: usize = dims.iter().product();
        let mut payload = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut buf).map_err(|_| bad("truncated payload"))?;
            payload.push(f64::from_le_bytes(buf));
        }
        records.push(Record { name, dims, payload });
    }
    Ok(records)
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact() {
        let dir = std::env::temp_dir().join("bfa_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.bfck");
        let records = vec![
            Record::new("w", vec![2, 3], vec![1.0, -2.5, 3.0e-17, f64::MIN_POSITIVE, 0.0, 9.9]),
            Record::from_text("__meta__/config", "task = unzip\nepochs = 30\n"),
        ];
        write_checkpoint(&path, &records).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], records[0]);
        assert_eq!(back[1].to_text().unwrap(), "task = unzip\nepochs = 30\n");
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = std::env::temp_dir().join("bfa_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.bfck");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(read_checkpoint(&path).is_err());
        std::fs::remove_file(&path).unwrap();
    }
}
