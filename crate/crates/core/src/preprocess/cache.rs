//! `SFW1` window cache: magic, window id, then named tensor records.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{read_records, write_records, Tensor};

pub const CACHE_MAGIC: &[u8; 4] = b"SFW1";

pub fn write_window_cache(path: &Path, id: &str, records: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&(id.len() as u64).to_le_bytes())?;
    w.write_all(id.as_bytes())?;
    write_records(&mut w, records.iter().map(|(n, t)| (n.as_str(), t)))?;
    w.flush()?;
    Ok(())
}

pub fn read_window_cache(path: &Path) -> Result<(String, Vec<(String, Tensor)>)> {
    let label = path.display().to_string();
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::parse(&label, 0, "truncated header"))?;
    if &magic != CACHE_MAGIC {
        return Err(Error::parse(&label, 0, "bad magic"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 4096 {
        return Err(Error::parse(&label, 0, "implausible id length"));
    }
    let mut id = vec![0u8; len];
    r.read_exact(&mut id)?;
    let id = String::from_utf8(id).map_err(|_| Error::parse(&label, 0, "id is not utf-8"))?;
    Ok((id, read_records(&mut r)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.sfw");
        let records = vec![
            (
                "eye".to_string(),
                Tensor::from_fn(&[3, 2], |i| i as f64 * 0.1),
            ),
            (
                "label".to_string(),
                Tensor::new(&[2], vec![30.0, 2.5]).unwrap(),
            ),
        ];
        write_window_cache(&path, "p01_BeachCity_0030", &records).unwrap();
        let (id, back) = read_window_cache(&path).unwrap();
        assert_eq!(id, "p01_BeachCity_0030");
        assert_eq!(back, records);
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"SFW1");
    }
}
