//! Atomic file writes and the raw f32 raster format used for diagnostics.
//!
//! Raw layout, all little-endian: `u32 height`, `u32 width`, `u32 channels`,
//! then `height * width * channels` f32 samples, row-major and interleaved.
//! Offset fields use 2 channels `(dy, dx)`, fit-error maps use 3.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// A decoded raw raster.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRaster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

pub fn encode_raw(height: usize, width: usize, channels: usize, data: &[f32]) -> Result<Vec<u8>> {
    if data.len() != height * width * channels {
        return Err(Error::invalid("raw raster length does not match its header"));
    }
    let mut out = Vec::with_capacity(12 + data.len() * 4);
    for v in [height, width, channels] {
        let v = u32::try_from(v).map_err(|_| Error::invalid("raster dimension exceeds u32"))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_raw(bytes: &[u8]) -> Result<RawRaster> {
    if bytes.len() < 12 {
        return Err(Error::Format("raw raster shorter than its header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
    let (height, width, channels) = (word(0), word(1), word(2));
    let n = height
        .checked_mul(width)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| Error::Format("raw raster header overflows".into()))?;
    let payload = &bytes[12..];
    if payload.len() != n * 4 {
        return Err(Error::Format(format!(
            "raw raster payload is {} bytes, header declares {}",
            payload.len(),
            n * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(RawRaster {
        height,
        width,
        channels,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn raw_round_trip(h in 1usize..6, w in 1usize..6, c in 1usize..4, seed in any::<u32>()) {
            let data: Vec<f32> = (0..h * w * c).map(|i| (i as f32 + seed as f32).sin()).collect();
            let back = decode_raw(&encode_raw(h, w, c, &data).unwrap()).unwrap();
            prop_assert_eq!(back, RawRaster { height: h, width: w, channels: c, data });
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = encode_raw(2, 2, 2, &[0.0; 8]).unwrap();
        assert!(matches!(decode_raw(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        assert!(decode_raw(&bytes[..5]).is_err());
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("x.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
