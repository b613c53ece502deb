//! Checkpoint serialization.
//!
//! Little-endian binary: the magic bytes "MFS1", then one record per
//! parameter in registry order: name length (u32), UTF-8 name bytes, rank
//! (u32), extents (u32 each), then the row-major float32 payload. Records
//! run to end of file. Writing the same parameters twice produces
//! byte-identical files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MFS1";

pub fn save<T: Scalar>(params: &ParamSet<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    for (name, tensor) in params.iter() {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
        for &e in tensor.shape() {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<ParamSet<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format("checkpoint shorter than magic"))?;
    if &magic != MAGIC {
        return Err(Error::format(format!("bad checkpoint magic {magic:?}")));
    }
    let mut params = ParamSet::new();
    loop {
        let mut len4 = [0u8; 4];
        match r.read_exact(&mut len4) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len4) as usize;
        if name_len > 4096 {
            return Err(Error::format(format!("implausible name length {name_len}")));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| Error::format("truncated parameter name"))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::format("parameter name is not UTF-8"))?;
        let rank = read_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(Error::format(format!("implausible rank {rank} for {name}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut buf)
                .map_err(|_| Error::format(format!("truncated payload for {name}")))?;
            data.push(T::from_f64(f32::from_le_bytes(buf) as f64));
        }
        params.insert(name, Tensor::from_vec(&shape, data)?);
    }
    Ok(params)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::format("truncated checkpoint header field"))?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.insert("enc.g1.k", Tensor::from_vec(&[2, 1, 2, 2], (0..8).map(|v| v as f32 * 0.5 - 1.0).collect()).unwrap());
        p.insert("head.bias", Tensor::from_vec(&[3], vec![1.5, -2.25, 0.0]).unwrap());
        p.insert("stats.mean", Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap());
        p
    }

    #[test]
    fn round_trip_preserves_names_shapes_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mfs");
        let p = sample();
        save(&p, &path).unwrap();
        let q: ParamSet<f32> = load(&path).unwrap();
        assert_eq!(q.len(), p.len());
        for (name, t) in p.iter() {
            let u = q.get(name).unwrap();
            assert_eq!(u.shape(), t.shape());
            assert_eq!(u.data(), t.data());
        }
    }

    #[test]
    fn writing_twice_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.mfs");
        let b = dir.path().join("b.mfs");
        let p = sample();
        save(&p, &a).unwrap();
        save(&p, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn magic_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.mfs");
        std::fs::write(&path, b"NOPE").unwrap();
        match load::<f32>(&path) {
            Err(Error::Format(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mfs");
        save(&sample(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match load::<f32>(&path) {
            Err(Error::Format(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn f64_values_round_through_f32_storage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mfs");
        let mut p = ParamSet::<f64>::new();
        p.insert("w", Tensor::from_vec(&[2], vec![0.25f64, -1.5]).unwrap());
        save(&p, &path).unwrap();
        let q: ParamSet<f64> = load(&path).unwrap();
        assert_eq!(q.get("w").unwrap().data(), &[0.25, -1.5]);
    }
}
