//! `.vvol` volumes and 16-bit binary PGM images.
//!
//! `.vvol` layout (little-endian):
//!
//! | offset | size | field                                  |
//! |--------|------|----------------------------------------|
//! | 0      | 4    | magic `VVOL`                           |
//! | 4      | 4    | version `u32` = 1                      |
//! | 8      | 12   | dims, 3 × `u32`                        |
//! | 20     | 12   | spacing, 3 × `f32`                     |
//! | 32     | 1    | domain tag `u8`                        |
//! | 33     | 3    | reserved, zero                         |
//! | 36     | 4·n  | voxels as `f32`, x fastest             |

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{DomainTag, Projection, ViewTag, Volume};
use crate::error::{Error, Result};

const VVOL_MAGIC: [u8; 4] = *b"VVOL";
const VVOL_VERSION: u32 = 1;
const VVOL_HEADER: usize = 36;

pub fn write_vvol<W: Write>(v: &Volume, mut w: W) -> Result<()> {
    let mut buf = Vec::with_capacity(VVOL_HEADER + 4 * v.len());
    buf.extend_from_slice(&VVOL_MAGIC);
    buf.extend_from_slice(&VVOL_VERSION.to_le_bytes());
    for d in v.dims() {
        let d = u32::try_from(d).map_err(|_| Error::Format("dimension exceeds u32".into()))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for s in v.spacing() {
        buf.extend_from_slice(&(s as f32).to_le_bytes());
    }
    buf.push(v.domain().code());
    buf.extend_from_slice(&[0u8; 3]);
    for &x in v.data() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn save_vvol(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let f = fs::File::create(path)?;
    write_vvol(v, std::io::BufWriter::new(f))
}

pub fn read_vvol(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: VVOL_HEADER,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != VVOL_MAGIC {
        return Err(Error::BadMagic {
            expected: VVOL_MAGIC,
            found: magic,
        });
    }
    if bytes.len() < VVOL_HEADER {
        return Err(Error::Truncated {
            expected: VVOL_HEADER,
            found: bytes.len(),
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VVOL_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dims = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
    let spacing = [f32_at(20) as f64, f32_at(24) as f64, f32_at(28) as f64];
    let domain = DomainTag::from_code(bytes[32])?;
    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .ok_or_else(|| Error::Format("dims overflow".into()))?;
    let expected = VVOL_HEADER + 4 * n;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }
    let data = bytes[VVOL_HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Volume::from_data(dims, spacing, data, domain)
}

pub fn load_vvol(path: impl AsRef<Path>) -> Result<Volume> {
    read_vvol(&fs::read(path)?)
}

/// Encodes a projection as binary PGM (P5) with maxval 65535, min-max scaled.
/// A constant image encodes as all zeros.
pub fn encode_pgm16(p: &Projection) -> Result<Vec<u8>> {
    if p.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Domain("projection contains NaN".into()));
    }
    let (lo, hi) = p
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    let [w, h] = p.dims();
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    out.reserve(2 * w * h);
    for &v in p.data() {
        let q = if range > 0.0 {
            ((v - lo) / range * 65535.0).round() as u16
        } else {
            0
        };
        out.extend_from_slice(&q.to_be_bytes());
    }
    Ok(out)
}

pub fn save_pgm16(p: &Projection, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_pgm16(p)?)?;
    Ok(())
}

/// Decodes a 16-bit P5 image into values in `[0, 1]` (sample / 65535).
pub fn decode_pgm16(bytes: &[u8], pixel_spacing: f64, view: ViewTag) -> Result<Projection> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("incomplete PGM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format("non-ascii PGM header".into()))?);
    }
    // single whitespace byte separates header and raster
    pos += 1;
    if fields[0] != "P5" {
        let mut found = [0u8; 4];
        for (d, s) in found.iter_mut().zip(fields[0].bytes()) {
            *d = s;
        }
        return Err(Error::BadMagic {
            expected: *b"P5\0\0",
            found,
        });
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PGM header field {s:?}")))
    };
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 65535 {
        return Err(Error::Format(format!("expected maxval 65535, got {maxval}")));
    }
    let expected = pos + 2 * w * h;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes[pos..expected]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
        .collect();
    Projection::new([w, h], pixel_spacing, data, view)
}

pub fn load_pgm16(path: impl AsRef<Path>, pixel_spacing: f64, view: ViewTag) -> Result<Projection> {
    decode_pgm16(&fs::read(path)?, pixel_spacing, view)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxcore::{gaussian_volume, SeededRng};

    #[test]
    fn vvol_round_trip() {
        let v = gaussian_volume(&mut SeededRng::new(3, 0), [4, 4, 4])
            .unwrap()
            .with_spacing([0.5, 1.25, 2.0])
            .unwrap();
        let mut buf = Vec::new();
        write_vvol(&v, &mut buf).unwrap();
        assert_eq!(buf.len(), 36 + 4 * 64);
        let back = read_vvol(&buf).unwrap();
        assert_eq!(back.dims(), v.dims());
        assert_eq!(back.spacing(), v.spacing());
        assert_eq!(back.domain(), v.domain());
        for (a, b) in v.data().iter().zip(back.data()) {
            assert_eq!(*b, *a as f32 as f64);
            assert!((a - b).abs() <= a.abs() * 2f64.powi(-23));
        }
    }

    #[test]
    fn vvol_bad_magic() {
        let v = Volume::new([2, 2, 2], [1.0; 3], 1.0).unwrap();
        let mut buf = Vec::new();
        write_vvol(&v, &mut buf).unwrap();
        buf[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(read_vvol(&buf), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn vvol_truncated_and_version() {
        let v = Volume::new([2, 2, 2], [1.0; 3], 1.0).unwrap();
        let mut buf = Vec::new();
        write_vvol(&v, &mut buf).unwrap();
        let short = &buf[..buf.len() - 4];
        assert!(matches!(read_vvol(short), Err(Error::Truncated { .. })));
        let mut bumped = buf.clone();
        bumped[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            read_vvol(&bumped),
            Err(Error::UnsupportedVersion(2))
        ));
    }

    #[test]
    fn vvol_header_layout_is_fixed() {
        let v = Volume::new([1, 2, 3], [1.0, 2.0, 4.0], 0.0)
            .unwrap()
            .with_domain(DomainTag::Normalized01)
            .unwrap();
        let mut buf = Vec::new();
        write_vvol(&v, &mut buf).unwrap();
        assert_eq!(&buf[0..4], b"VVOL");
        assert_eq!(&buf[4..8], &[1, 0, 0, 0]);
        assert_eq!(&buf[8..20], &[1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&buf[20..24], &1.0f32.to_le_bytes());
        assert_eq!(&buf[28..32], &4.0f32.to_le_bytes());
        assert_eq!(&buf[32..36], &[2, 0, 0, 0]);
    }

    #[test]
    fn pgm_constant_maps_to_zero() {
        let p = Projection::filled([3, 2], 1.0, 7.0, ViewTag::Pa).unwrap();
        let bytes = encode_pgm16(&p).unwrap();
        let header = b"P5\n3 2\n65535\n";
        assert_eq!(&bytes[..header.len()], header);
        assert!(bytes[header.len()..].iter().all(|&b| b == 0));
    }

    #[test]
    fn pgm_two_pixels_span_full_range() {
        let p = Projection::new([2, 1], 1.0, vec![0.0, 1.0], ViewTag::Pa).unwrap();
        let bytes = encode_pgm16(&p).unwrap();
        let raster = &bytes[bytes.len() - 4..];
        assert_eq!(raster, &[0, 0, 0xff, 0xff]);
        let back = decode_pgm16(&bytes, 1.0, ViewTag::Pa).unwrap();
        assert_eq!(back.data(), &[0.0, 1.0]);
    }

    #[test]
    fn pgm_rejects_nan() {
        let mut p = Projection::filled([2, 1], 1.0, 0.0, ViewTag::Pa).unwrap();
        p.data_mut()[0] = f64::NAN;
        assert!(matches!(encode_pgm16(&p), Err(Error::Domain(_))));
    }

    #[test]
    fn pgm_is_deterministic() {
        let p = Projection::new([2, 2], 1.0, vec![0.1, 0.7, 0.3, 0.2], ViewTag::Lateral).unwrap();
        assert_eq!(encode_pgm16(&p).unwrap(), encode_pgm16(&p).unwrap());
    }
}
