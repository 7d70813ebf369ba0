//! PTB tensor files and 16-bit PGM import.
//!
//! Layout: the 8-byte magic `PTNSRB1\n`, one ASCII header line
//!
//! ```text
//! dtype=f32 c=<C> h=<H> w=<W> iso=<u32> black=<f32> white=<f32> sensor=<token> tag=<token>
//! ```
//!
//! terminated by `\n`, then `C*H*W` little-endian `f32` values, channel-major.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, ParseError, Result};
use crate::tensor::{FrameMeta, PlanarImage};

pub const MAGIC: &[u8; 8] = b"PTNSRB1\n";

fn check_token(name: &str, token: &str) -> Result<()> {
    if token.is_empty() || token.chars().any(|c| c.is_whitespace() || c.is_control()) {
        return Err(Error::InvalidInput(format!(
            "{name} must be a non-empty token without whitespace, got {token:?}"
        )));
    }
    Ok(())
}

/// Serializes an image and its metadata into PTB bytes.
pub fn encode_ptb(img: &PlanarImage, meta: &FrameMeta) -> Result<Vec<u8>> {
    check_token("sensor_id", &meta.sensor_id)?;
    check_token("exposure_tag", &meta.exposure_tag)?;
    let header = format!(
        "dtype=f32 c={} h={} w={} iso={} black={} white={} sensor={} tag={}\n",
        img.channels(),
        img.height(),
        img.width(),
        meta.iso,
        meta.black_level as f32,
        meta.white_level as f32,
        meta.sensor_id,
        meta.exposure_tag
    );
    let mut out = Vec::with_capacity(MAGIC.len() + header.len() + 4 * img.data().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(header.as_bytes());
    for &v in img.data() {
        let narrowed = v as f32;
        if !narrowed.is_finite() {
            return Err(Error::InvalidInput(format!("value {v} overflows f32 storage")));
        }
        out.extend_from_slice(&narrowed.to_le_bytes());
    }
    Ok(out)
}

fn header_field<'a>(fields: &'a [(&'a str, &'a str)], key: &str) -> std::result::Result<&'a str, ParseError> {
    fields
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| ParseError::BadHeader(format!("missing field {key:?}")))
}

fn parse_num<T: std::str::FromStr>(key: &str, raw: &str) -> std::result::Result<T, ParseError> {
    raw.parse()
        .map_err(|_| ParseError::BadHeader(format!("field {key:?} has invalid value {raw:?}")))
}

/// Parses PTB bytes produced by [`encode_ptb`].
pub fn decode_ptb(bytes: &[u8]) -> Result<(PlanarImage, FrameMeta)> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        let found = &bytes[..bytes.len().min(MAGIC.len())];
        return Err(ParseError::BadMagic {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        }
        .into());
    }
    let rest = &bytes[MAGIC.len()..];
    let nl = rest.iter().position(|&b| b == b'\n').ok_or(ParseError::TruncatedHeader)?;
    let line = std::str::from_utf8(&rest[..nl])
        .map_err(|_| ParseError::BadHeader("header is not ASCII".into()))?;
    let fields: Vec<(&str, &str)> = line
        .split(' ')
        .map(|kv| {
            kv.split_once('=')
                .ok_or_else(|| ParseError::BadHeader(format!("token {kv:?} is not key=value")))
        })
        .collect::<std::result::Result<_, _>>()?;

    let dtype = header_field(&fields, "dtype")?;
    if dtype != "f32" {
        return Err(ParseError::BadHeader(format!("unsupported dtype {dtype:?}")).into());
    }
    let c: usize = parse_num("c", header_field(&fields, "c")?)?;
    let h: usize = parse_num("h", header_field(&fields, "h")?)?;
    let w: usize = parse_num("w", header_field(&fields, "w")?)?;
    let meta = FrameMeta {
        iso: parse_num("iso", header_field(&fields, "iso")?)?,
        black_level: parse_num::<f32>("black", header_field(&fields, "black")?)? as f64,
        white_level: parse_num::<f32>("white", header_field(&fields, "white")?)? as f64,
        sensor_id: header_field(&fields, "sensor")?.to_string(),
        exposure_tag: header_field(&fields, "tag")?.to_string(),
    };

    let payload = &rest[nl + 1..];
    if !payload.len().is_multiple_of(4) {
        return Err(ParseError::TruncatedPayload {
            trailing: payload.len() % 4,
        }
        .into());
    }
    let expected = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| ParseError::BadHeader("dimensions overflow".into()))?;
    let found = payload.len() / 4;
    if found != expected {
        return Err(ParseError::SizeMismatch { expected, found }.into());
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok((PlanarImage::new(c, h, w, data)?, meta))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<(PlanarImage, FrameMeta)> {
    decode_ptb(&fs::read(path)?)
}

pub fn save_tensor(img: &PlanarImage, meta: &FrameMeta, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_ptb(img, meta)?)
}

/// Writes through a temporary sibling file and renames it into place, so a
/// failed write never leaves a partial file at `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => std::path::PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

fn pgm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> std::result::Result<&'a str, ParseError> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(ParseError::Pgm("unexpected end of header".into()));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| ParseError::Pgm("non-ASCII header".into()))
}

/// Decodes a binary (P5) PGM into `(height, width, samples)`. 16-bit samples
/// are big-endian as the format requires; 8-bit files are accepted too.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let mut pos = 0;
    let magic = pgm_token(bytes, &mut pos)?;
    if magic != "P5" {
        return Err(ParseError::Pgm(format!("expected P5 magic, found {magic:?}")).into());
    }
    let num = |tok: &str| -> std::result::Result<usize, ParseError> {
        tok.parse().map_err(|_| ParseError::Pgm(format!("bad number {tok:?}")))
    };
    let width = num(pgm_token(bytes, &mut pos)?)?;
    let height = num(pgm_token(bytes, &mut pos)?)?;
    let maxval = num(pgm_token(bytes, &mut pos)?)?;
    if maxval == 0 || maxval > 65535 {
        return Err(ParseError::Pgm(format!("maxval {maxval} out of range")).into());
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    let need = width * height * bytes_per;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() < need {
        return Err(ParseError::Pgm(format!(
            "raster holds {} bytes, {need} required",
            raster.len()
        ))
        .into());
    }
    let samples = if bytes_per == 2 {
        raster[..need]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64)
            .collect()
    } else {
        raster[..need].iter().map(|&b| b as f64).collect()
    };
    Ok((height, width, samples))
}

/// Stacks one PGM file per plane into a planar image.
pub fn import_pgm_planes<P: AsRef<Path>>(paths: &[P]) -> Result<PlanarImage> {
    if paths.is_empty() {
        return Err(Error::InvalidInput("no PGM planes given".into()));
    }
    let mut dims = None;
    let mut data = Vec::new();
    for p in paths {
        let (h, w, samples) = decode_pgm(&fs::read(p)?)?;
        match dims {
            None => dims = Some((h, w)),
            Some(d) if d != (h, w) => {
                return Err(Error::ShapeMismatch(format!(
                    "{} is {h}x{w}, expected {}x{}",
                    p.as_ref().display(),
                    d.0,
                    d.1
                )))
            }
            _ => {}
        }
        data.extend(samples);
    }
    let (h, w) = dims.unwrap_or((0, 0));
    PlanarImage::new(paths.len(), h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meta() -> FrameMeta {
        FrameMeta {
            iso: 1600,
            black_level: 512.0,
            white_level: 16383.0,
            sensor_id: "sim-a7s2".into(),
            exposure_tag: "normal".into(),
        }
    }

    #[test]
    fn round_trip_small() {
        let img = PlanarImage::new(4, 2, 2, (0..16).map(|v| v as f64 * 0.5 - 3.0).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ptb");
        save_tensor(&img, &meta(), &path).unwrap();
        let (back, m) = load_tensor(&path).unwrap();
        assert_eq!(back.data(), img.data());
        assert_eq!(back.shape(), (4, 2, 2));
        assert_eq!(m, meta());
    }

    #[test]
    fn exact_header_bytes() {
        let img = PlanarImage::new(1, 1, 2, vec![1.0, -2.5]).unwrap();
        let bytes = encode_ptb(&img, &meta()).unwrap();
        let expected_header =
            b"PTNSRB1\ndtype=f32 c=1 h=1 w=2 iso=1600 black=512 white=16383 sensor=sim-a7s2 tag=normal\n";
        assert_eq!(&bytes[..expected_header.len()], expected_header);
        assert_eq!(&bytes[expected_header.len()..], &[0, 0, 0x80, 0x3f, 0, 0, 0x20, 0xc0]);
    }

    #[test]
    fn wrong_magic_is_named() {
        let img = PlanarImage::filled(1, 1, 1, 0.0).unwrap();
        let mut bytes = encode_ptb(&img, &meta()).unwrap();
        bytes[0] = b'X';
        let err = decode_ptb(&bytes).unwrap_err();
        assert!(matches!(err, Error::Parse(ParseError::BadMagic { .. })));
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn size_mismatch_and_truncation() {
        let img = PlanarImage::filled(4, 100, 100, 1.0).unwrap();
        let bytes = encode_ptb(&img, &meta()).unwrap();
        let short = &bytes[..bytes.len() - 4];
        assert!(matches!(
            decode_ptb(short),
            Err(Error::Parse(ParseError::SizeMismatch {
                expected: 40000,
                found: 39999
            }))
        ));
        let ragged = &bytes[..bytes.len() - 1];
        assert!(matches!(
            decode_ptb(ragged),
            Err(Error::Parse(ParseError::TruncatedPayload { trailing: 3 }))
        ));
        assert!(matches!(
            decode_ptb(&bytes[..12]),
            Err(Error::Parse(ParseError::TruncatedHeader))
        ));
    }

    #[test]
    fn rejects_whitespace_tokens() {
        let img = PlanarImage::filled(1, 1, 1, 0.0).unwrap();
        let mut m = meta();
        m.sensor_id = "two words".into();
        assert!(encode_ptb(&img, &m).is_err());
    }

    #[test]
    fn failed_write_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("missing-subdir").join("x.ptb");
        let img = PlanarImage::filled(1, 1, 1, 0.0).unwrap();
        assert!(save_tensor(&img, &meta(), &path).is_err());
        assert!(!path.exists());
    }

    #[test]
    fn pgm_planes_import() {
        let dir = tempfile::tempdir().unwrap();
        let mut paths = Vec::new();
        for k in 0..2u16 {
            let mut bytes = b"P5\n# plane\n3 2\n65535\n".to_vec();
            for v in 0..6u16 {
                bytes.extend_from_slice(&(v * 1000 + k).to_be_bytes());
            }
            let p = dir.path().join(format!("p{k}.pgm"));
            fs::write(&p, bytes).unwrap();
            paths.push(p);
        }
        let img = import_pgm_planes(&paths).unwrap();
        assert_eq!(img.shape(), (2, 2, 3));
        assert_eq!(img.get(0, 1, 2), 5000.0);
        assert_eq!(img.get(1, 0, 1), 1001.0);
    }

    proptest! {
        #[test]
        fn ptb_round_trip_preserves_bits(
            c in 1usize..4, h in 1usize..5, w in 1usize..5,
            vals in proptest::collection::vec(-1e6f32..1e6, 64),
            iso in 1u32..100_000, black in 0f32..1000.0,
        ) {
            let data: Vec<f64> = (0..c * h * w).map(|i| vals[i % vals.len()] as f64).collect();
            let img = PlanarImage::new(c, h, w, data).unwrap();
            let m = FrameMeta { iso, black_level: black as f64, white_level: (black + 4095.0) as f64, sensor_id: "s".into(), exposure_tag: "hot".into() };
            let bytes = encode_ptb(&img, &m).unwrap();
            let (back, m2) = decode_ptb(&bytes).unwrap();
            prop_assert_eq!(back.data(), img.data());
            prop_assert_eq!(&m2, &m);
            prop_assert_eq!(encode_ptb(&back, &m2).unwrap(), bytes);
        }
    }
}
