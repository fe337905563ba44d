//! 8-bit binary PGM (labels) and PPM (images).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Interleaved 8-bit raster with 1 or 3 channels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Format(format!(
                "{width}x{height}x{channels} raster needs {} bytes, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

fn encode(img: &Image, magic: &str, channels: usize) -> Result<Vec<u8>> {
    if img.channels != channels {
        return Err(Error::Format(format!(
            "{magic} needs {channels} channel(s), image has {}",
            img.channels
        )));
    }
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    Ok(out)
}

/// Parses the `P5`/`P6` header, skipping `#` comments; returns (width, height, data offset).
fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Format(format!(
            "expected {} raster",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("malformed raster header".into()))?;
    }
    if fields[2] != 255 {
        return Err(Error::Format(format!(
            "only 8-bit rasters are supported, maxval {}",
            fields[2]
        )));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("malformed raster header".into()));
    }
    Ok((fields[0], fields[1], pos + 1))
}

fn read(path: &Path, magic: &[u8; 2], channels: usize) -> Result<Image> {
    let bytes = std::fs::read(path)?;
    let (w, h, off) = parse_header(&bytes, magic)?;
    let need = w * h * channels;
    let data = bytes
        .get(off..off + need)
        .ok_or_else(|| Error::Format(format!("{} truncated", path.display())))?
        .to_vec();
    Image::new(w, h, channels, data)
}

pub fn write_pgm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    std::fs::write(path, encode(img, "P5", 1)?)?;
    Ok(())
}

pub fn write_ppm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    std::fs::write(path, encode(img, "P6", 3)?)?;
    Ok(())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Image> {
    read(path.as_ref(), b"P5", 1)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Image> {
    read(path.as_ref(), b"P6", 3)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_comments() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(3, 2, 3, (0..18).collect()).unwrap();
        let p = dir.path().join("a.ppm");
        write_ppm(&p, &img).unwrap();
        assert_eq!(read_ppm(&p).unwrap(), img);
        assert!(read_pgm(&p).is_err());
        assert!(write_pgm(&p, &img).is_err());

        let p = dir.path().join("b.pgm");
        std::fs::write(&p, b"P5\n# label map\n2 2\n255\n\x00\x01\x02\xff").unwrap();
        let l = read_pgm(&p).unwrap();
        assert_eq!((l.width, l.height, l.data), (2, 2, vec![0, 1, 2, 255]));
        std::fs::write(&p, b"P5\n2 2\n255\n\x00").unwrap();
        assert!(read_pgm(&p).is_err());
    }
}
