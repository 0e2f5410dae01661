//! Minimal binary PGM (P5) reader and writer for 8- and 16-bit rasters.

use std::io::{Read, Write};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Row-major samples, `width * height` entries.
    pub data: Vec<u16>,
}

impl Pgm {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P5\n{} {}\n{}\n", self.width, self.height, self.maxval)?;
        if self.maxval < 256 {
            let bytes: Vec<u8> = self.data.iter().map(|&v| v as u8).collect();
            w.write_all(&bytes)?;
        } else {
            // 16-bit samples are big-endian per the netpbm format.
            let mut bytes = Vec::with_capacity(self.data.len() * 2);
            for v in &self.data {
                bytes.extend_from_slice(&v.to_be_bytes());
            }
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::parse(&buf)
    }

    pub fn parse(buf: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut tokens = Vec::with_capacity(4);
        while tokens.len() < 4 {
            // skip whitespace and comments
            while pos < buf.len() {
                if buf[pos].is_ascii_whitespace() {
                    pos += 1;
                } else if buf[pos] == b'#' {
                    while pos < buf.len() && buf[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    break;
                }
            }
            let start = pos;
            while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::format("PGM", "truncated header"));
            }
            tokens.push(String::from_utf8_lossy(&buf[start..pos]).into_owned());
        }
        // exactly one whitespace byte separates header and raster
        pos += 1;
        if tokens[0] != "P5" {
            return Err(Error::format("PGM", format!("unsupported magic {:?}", tokens[0])));
        }
        let parse = |s: &str, name: &str| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|_| Error::format("PGM", format!("bad {name} {s:?}")))
        };
        let width = parse(&tokens[1], "width")?;
        let height = parse(&tokens[2], "height")?;
        let maxval = parse(&tokens[3], "maxval")?;
        if maxval == 0 || maxval > u16::MAX as usize {
            return Err(Error::format("PGM", format!("bad maxval {maxval}")));
        }
        let n = width * height;
        let body = buf.get(pos..).unwrap_or(&[]);
        let data = if maxval < 256 {
            if body.len() < n {
                return Err(Error::format("PGM", "truncated raster"));
            }
            body[..n].iter().map(|&b| b as u16).collect()
        } else {
            if body.len() < 2 * n {
                return Err(Error::format("PGM", "truncated raster"));
            }
            body[..2 * n]
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]))
                .collect()
        };
        Ok(Pgm {
            width,
            height,
            maxval: maxval as u16,
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_8_and_16_bit() {
        for maxval in [255u16, 65535] {
            let img = Pgm {
                width: 3,
                height: 2,
                maxval,
                data: vec![0, 1, 2, 3, 4, maxval],
            };
            let back = Pgm::parse(&img.to_bytes()).unwrap();
            assert_eq!(back, img);
        }
    }

    #[test]
    fn rejects_truncated() {
        assert!(Pgm::parse(b"P5\n4 4\n255\n\x00\x01").is_err());
        assert!(Pgm::parse(b"P2\n1 1\n255\n0").is_err());
    }
}
