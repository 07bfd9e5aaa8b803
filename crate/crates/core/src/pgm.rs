//! Binary PGM (P5, 8-bit) reading and writing.

use crate::error::{Error, Result};
use std::io::Write as _;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Pgm {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Contract(format!(
                "pgm payload holds {} bytes for {width}x{height}",
                data.len()
            )));
        }
        Ok(Pgm {
            width,
            height,
            data,
        })
    }

    /// Pixels as floats in [0,1], row-major.
    pub fn to_unit_floats<T: crate::real::Real>(&self) -> Vec<T> {
        self.data
            .iter()
            .map(|&b| T::from_f64(b as f64 / 255.0))
            .collect()
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    /// Skips whitespace and `#` comments, then reads one ASCII token,
    /// returning its byte offset alongside it.
    fn token(&mut self) -> Result<(usize, &'a [u8])> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.fail("unexpected end of header"));
        }
        Ok((start, &self.bytes[start..self.pos]))
    }

    fn number(&mut self, what: &str) -> Result<(usize, usize)> {
        let (start, tok) = self.token()?;
        let value = std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or(Error::Format {
                offset: start,
                msg: format!("bad {what}"),
            })?;
        Ok((start, value))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Pgm> {
    let mut cur = Cursor { bytes, pos: 0 };
    let (_, magic) = cur.token()?;
    if magic != b"P5" {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {:?}, want P5", String::from_utf8_lossy(magic)),
        });
    }
    let (_, width) = cur.number("width")?;
    let (_, height) = cur.number("height")?;
    let (maxval_at, maxval) = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Format {
            offset: maxval_at,
            msg: format!("unsupported maxval {maxval}, want 255"),
        });
    }
    // Exactly one whitespace byte separates the header from the raster.
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(cur.fail("missing raster separator"));
    }
    cur.pos += 1;
    let need = width * height;
    let rest = &bytes[cur.pos..];
    if rest.len() < need {
        return Err(Error::Integrity(format!(
            "raster truncated: {} of {need} bytes",
            rest.len()
        )));
    }
    Pgm::new(width, height, rest[..need].to_vec())
}

pub fn encode(pgm: &Pgm) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", pgm.width, pgm.height).into_bytes();
    out.extend_from_slice(&pgm.data);
    out
}

pub fn read(path: &Path) -> Result<Pgm> {
    decode(&std::fs::read(path)?)
}

pub fn write(path: &Path, pgm: &Pgm) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(pgm))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise_identical() {
        let pgm = Pgm::new(3, 2, vec![0, 10, 20, 250, 255, 128]).unwrap();
        let bytes = encode(&pgm);
        assert_eq!(decode(&bytes).unwrap(), pgm);
        assert_eq!(encode(&decode(&bytes).unwrap()), bytes);
    }

    #[test]
    fn two_by_two_example_scales_to_unit_range() {
        let bytes = b"P5\n2 2\n255\n\x00\x80\xff\x40";
        let pgm = decode(bytes).unwrap();
        assert_eq!(pgm.data, vec![0, 128, 255, 64]);
        let f: Vec<f32> = pgm.to_unit_floats();
        let want = [0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0];
        for (a, b) in f.iter().zip(want) {
            assert_eq!(*a, b as f32);
        }
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P5\n# made by hand\n2 1\n# another\n255\n\x01\x02";
        let pgm = decode(bytes).unwrap();
        assert_eq!((pgm.width, pgm.height), (2, 1));
        assert_eq!(pgm.data, vec![1, 2]);
    }

    #[test]
    fn bad_magic_and_maxval_report_offsets() {
        match decode(b"P2\n2 2\n255\n") {
            Err(Error::Format { offset, msg }) => {
                assert_eq!(offset, 0);
                assert!(msg.contains("P5"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        match decode(b"P5\n2 2\n65535\n") {
            Err(Error::Format { offset, msg }) => {
                assert_eq!(offset, 7);
                assert!(msg.contains("65535"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_raster_is_an_integrity_error() {
        assert!(matches!(
            decode(b"P5\n2 2\n255\n\x00\x01"),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn payload_length_is_checked() {
        assert!(matches!(Pgm::new(2, 2, vec![1, 2, 3]), Err(Error::Contract(_))));
    }
}
