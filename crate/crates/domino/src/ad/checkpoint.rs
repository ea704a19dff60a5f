//! Flat binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DMNO"  u32 version
//! repeated until EOF:
//!     u32 name_len, name bytes (UTF-8)
//!     u32 rank, rank x u32 extents
//!     product(extents) x f32 values
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DMNO";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, records: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format("missing header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut records = Vec::new();
    loop {
        let mut len_bytes = [0u8; 4];
        match r.read_exact(&mut len_bytes) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len_bytes) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|_| Error::Format("truncated name".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank).map(|_| read_u32(&mut r).map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| Error::Format(format!("truncated data for {name}")))?;
            data.push(f32::from_le_bytes(b) as f64);
        }
        records.push((name, Tensor::new(shape, data)?));
    }
    Ok(records)
}

pub fn save(path: impl AsRef<Path>, records: &[(String, Tensor)]) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), records)
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => Error::MissingPrerequisite(format!("checkpoint {} does not exist", path.display())),
        _ => e.into(),
    })?;
    read_checkpoint(BufReader::new(file))
}

/// Looks up a record by exact name.
pub fn find<'a>(records: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    records
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Format(format!("checkpoint lacks record {name}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_bit_exact() {
        let mut buf = Vec::new();
        let t = Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap();
        write_checkpoint(&mut buf, &[("ab".to_string(), t)]).unwrap();
        let expected: Vec<u8> = [
            b"DMNO".to_vec(),
            1u32.to_le_bytes().to_vec(),
            2u32.to_le_bytes().to_vec(),
            b"ab".to_vec(),
            2u32.to_le_bytes().to_vec(),
            1u32.to_le_bytes().to_vec(),
            2u32.to_le_bytes().to_vec(),
            1.0f32.to_le_bytes().to_vec(),
            (-2.0f32).to_le_bytes().to_vec(),
        ]
        .concat();
        assert_eq!(buf, expected);
    }

    #[test]
    fn bad_magic_and_truncation_are_format_errors() {
        assert!(matches!(read_checkpoint(&b"NOPE\x01\0\0\0"[..]), Err(Error::Format(_))));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("w".into(), Tensor::scalar(1.0))]).unwrap();
        buf.pop();
        assert!(matches!(read_checkpoint(&buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn missing_file_is_a_missing_prerequisite() {
        assert!(matches!(load("/nonexistent/dir/enc.dmno"), Err(Error::MissingPrerequisite(_))));
    }

    proptest! {
        #[test]
        fn round_trip_preserves_f32_values(
            shape in proptest::collection::vec(1usize..4, 1..4),
            seed in any::<u64>(),
            name in "[a-z.]{1,12}",
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| ((seed.wrapping_add(i as u64) % 1000) as f32 / 7.0 - 50.0) as f64).collect();
            let t = Tensor::new(shape, data).unwrap();
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &[(name.clone(), t.clone())]).unwrap();
            let back = read_checkpoint(&buf[..]).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(&back[0].0, &name);
            prop_assert_eq!(&back[0].1, &t);
        }
    }
}
