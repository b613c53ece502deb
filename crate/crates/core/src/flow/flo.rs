//! Middlebury `.flo` flow file I/O.
//!
//! Layout: 4-byte magic "PIEH", u32 width, u32 height (little endian),
//! then h rows of w interleaved (u, v) f32 pairs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::FlowField;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PIEH";

/// Writes `flow` to `path` in `.flo` format.
pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(flow.width as u32).to_le_bytes())?;
    w.write_all(&(flow.height as u32).to_le_bytes())?;
    for i in 0..flow.width * flow.height {
        w.write_all(&flow.u[i].to_le_bytes())?;
        w.write_all(&flow.v[i].to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a `.flo` file. Rejects wrong magic, implausible extents, and
/// truncated payloads.
pub fn read_flo(path: &Path) -> Result<FlowField> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format(format!("{}: file too short for header", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::format(format!(
            "{}: bad magic {:?}, expected \"PIEH\"",
            path.display(),
            magic
        )));
    }
    let mut ext = [0u8; 4];
    r.read_exact(&mut ext)
        .map_err(|_| Error::format(format!("{}: missing width", path.display())))?;
    let width = u32::from_le_bytes(ext) as usize;
    r.read_exact(&mut ext)
        .map_err(|_| Error::format(format!("{}: missing height", path.display())))?;
    let height = u32::from_le_bytes(ext) as usize;
    if width == 0 || height == 0 || width > 1 << 20 || height > 1 << 20 {
        return Err(Error::format(format!(
            "{}: implausible extents {width}x{height}",
            path.display()
        )));
    }
    let n = width * height;
    let mut payload = vec![0u8; n * 8];
    r.read_exact(&mut payload)
        .map_err(|_| Error::format(format!("{}: truncated flow payload", path.display())))?;
    let mut u = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for i in 0..n {
        let o = i * 8;
        u.push(f32::from_le_bytes(payload[o..o + 4].try_into().unwrap()));
        v.push(f32::from_le_bytes(payload[o + 4..o + 8].try_into().unwrap()));
    }
    FlowField::from_parts(width, height, u, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_flow() -> FlowField {
        let (w, h) = (5, 3);
        let mut u = Vec::new();
        let mut v = Vec::new();
        for y in 0..h {
            for x in 0..w {
                u.push(x as f32 * 0.25 - 0.5);
                v.push(y as f32 * -0.125 + 0.0625);
            }
        }
        FlowField::from_parts(w, h, u, v).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.flo");
        let flow = sample_flow();
        write_flo(&path, &flow).unwrap();
        let back = read_flo(&path).unwrap();
        assert_eq!(back.width, flow.width);
        assert_eq!(back.height, flow.height);
        for i in 0..flow.u.len() {
            assert_eq!(back.u[i].to_bits(), flow.u[i].to_bits());
            assert_eq!(back.v[i].to_bits(), flow.v[i].to_bits());
        }
    }

    #[test]
    fn header_layout_matches_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.flo");
        write_flo(&path, &sample_flow()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"PIEH");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 5);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 12 + 5 * 3 * 8);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.flo");
        write_flo(&path, &sample_flow()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        let err = read_flo(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.flo");
        write_flo(&path, &sample_flow()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(read_flo(&path).is_err());
    }
}
