//! Binary PPM (P6) and PGM (P5) images with 8-bit samples.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// 1 (gray) or 3 (RGB), interleaved.
    pub channels: usize,
    pub pixels: Vec<u8>,
}

/// Largest width or height accepted by the decoder.
pub const MAX_DIM: usize = 1 << 14;

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Raster {
            width,
            height,
            channels,
            pixels: vec![0; width * height * channels],
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Raster> {
        let mut p = HeaderParser { bytes, pos: 0 };
        let channels = match p.token()? {
            b"P6" => 3,
            b"P5" => 1,
            other => {
                return Err(Error::format(
                    "PNM image",
                    format!("unsupported magic {:?}", String::from_utf8_lossy(other)),
                ))
            }
        };
        let width = p.number("width")?;
        let height = p.number("height")?;
        let maxval = p.number("maxval")?;
        if maxval != 255 {
            return Err(Error::format("PNM image", format!("only 8-bit images are supported (maxval {maxval})")));
        }
        if width == 0 || height == 0 || width > MAX_DIM || height > MAX_DIM {
            return Err(Error::format("PNM image", format!("bad dimensions {width}x{height}")));
        }
        // exactly one whitespace byte separates the header from the raster
        match bytes.get(p.pos) {
            Some(b) if b.is_ascii_whitespace() => p.pos += 1,
            _ => return Err(Error::format("PNM image", "missing separator after header")),
        }
        let need = width * height * channels;
        let rest = &bytes[p.pos..];
        if rest.len() != need {
            return Err(Error::format(
                "PNM image",
                format!("expected {need} raster bytes, found {}", rest.len()),
            ));
        }
        Ok(Raster {
            width,
            height,
            channels,
            pixels: rest.to_vec(),
        })
    }
}

struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderParser<'a> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#') {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format("PNM image", "truncated header"));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let tok = self.token()?;
        if tok.len() > 6 || !tok.iter().all(u8::is_ascii_digit) {
            return Err(Error::format("PNM image", format!("bad {what} {:?}", String::from_utf8_lossy(tok))));
        }
        Ok(std::str::from_utf8(tok).unwrap().parse().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode() {
        let mut r = Raster::new(3, 2, 3);
        r.pixels.iter_mut().enumerate().for_each(|(i, p)| *p = (i * 13) as u8);
        assert_eq!(Raster::decode(&r.encode()).unwrap(), r);
        let g = Raster::new(4, 4, 1);
        assert_eq!(Raster::decode(&g.encode()).unwrap(), g);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5 # gray\n# another\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[7, 9]);
        let r = Raster::decode(&bytes).unwrap();
        assert_eq!((r.width, r.height, r.pixels.clone()), (2, 1, vec![7, 9]));
    }

    #[test]
    fn rejects_malformed() {
        assert!(Raster::decode(b"P3\n1 1\n255\n").is_err());
        assert!(Raster::decode(b"P6\n1 1\n65535\n").is_err());
        assert!(Raster::decode(b"P6\n2 2\n255\n\x00\x01").is_err());
        assert!(Raster::decode(b"P6\n0 2\n255\n").is_err());
        assert!(Raster::decode(b"P6\n99999999 2\n255\n").is_err());
        assert!(Raster::decode(b"P6").is_err());
        assert!(Raster::decode(b"").is_err());
    }
}
