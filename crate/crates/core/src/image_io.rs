//! 8-bit image files: binary/plain PGM for grayscale, PNG for colour.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Pgm,
    Png,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Pgm => "pgm",
            ImageFormat::Png => "png",
        }
    }

    /// PGM for one channel, PNG otherwise.
    pub fn for_channels(channels: usize) -> Self {
        if channels == 1 {
            ImageFormat::Pgm
        } else {
            ImageFormat::Png
        }
    }
}

/// `floor(p * 255 + 0.5)`, so halves round up. Rejects values outside `[0, 1]`.
pub fn quantize(p: f32) -> Result<u8> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Format(format!("pixel value {p} outside [0, 1]")));
    }
    Ok((p * 255.0 + 0.5).floor() as u8)
}

/// Writes a planar `[c, h, w]` image. PGM requires `c == 1`; PNG takes 1 or 3.
pub fn write_image(path: &Path, channels: usize, height: usize, width: usize, pixels: &[f32], format: ImageFormat) -> Result<()> {
    if pixels.len() != channels * height * width {
        return Err(Error::Consistency(format!(
            "{} pixels for a {channels}x{height}x{width} image",
            pixels.len()
        )));
    }
    let plane = height * width;
    // interleave to HWC bytes
    let mut bytes = vec![0u8; pixels.len()];
    for c in 0..channels {
        for i in 0..plane {
            bytes[i * channels + c] = quantize(pixels[c * plane + i])?;
        }
    }
    match format {
        ImageFormat::Pgm => {
            if channels != 1 {
                return Err(Error::Format(format!("PGM holds one channel, got {channels}")));
            }
            let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
            out.extend_from_slice(&bytes);
            fs::write(path, out).map_err(io_err(path))
        }
        ImageFormat::Png => {
            let color = match channels {
                1 => png::ColorType::Grayscale,
                3 => png::ColorType::Rgb,
                c => return Err(Error::Format(format!("PNG output supports 1 or 3 channels, got {c}"))),
            };
            let file = fs::File::create(path).map_err(io_err(path))?;
            let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
            enc.set_color(color);
            enc.set_depth(png::BitDepth::Eight);
            let png_err = |e: png::EncodingError| Error::Format(format!("{}: {e}", path.display()));
            let mut writer = enc.write_header().map_err(png_err)?;
            writer.write_image_data(&bytes).map_err(png_err)?;
            writer.finish().map_err(png_err)
        }
    }
}

/// A decoded grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub bytes: Vec<u8>,
}

/// Reads a raw (P5) or plain (P2) PGM with maxval 255 or less. Comments are skipped.
pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let data = fs::read(path).map_err(io_err(path))?;
    parse_pgm(&data).map_err(|msg| Error::Format(format!("{}: {msg}", path.display())))
}

fn parse_pgm(data: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < data.len() && data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < data.len() && data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("unexpected end of header".into());
        }
        Ok(String::from_utf8_lossy(&data[start..pos]).into_owned())
    };
    let magic = token()?;
    let num = |s: String| s.parse::<usize>().map_err(|_| format!("bad header number {s:?}"));
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    let n = width * height;
    let bytes = match magic.as_str() {
        "P5" => {
            // exactly one whitespace byte separates the header from the raster
            let start = pos + 1;
            if data.len() < start + n {
                return Err(format!("raster holds {} bytes, expected {n}", data.len().saturating_sub(start)));
            }
            data[start..start + n].to_vec()
        }
        "P2" => (0..n)
            .map(|_| {
                let v = num(token()?)?;
                if v > maxval {
                    return Err(format!("sample {v} exceeds maxval {maxval}"));
                }
                Ok(v as u8)
            })
            .collect::<std::result::Result<_, String>>()?,
        m => return Err(format!("not a PGM file (magic {m:?})")),
    };
    Ok(GrayImage { width, height, bytes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rule() {
        assert_eq!(quantize(1.0).unwrap(), 255);
        assert_eq!(quantize(0.0).unwrap(), 0);
        assert_eq!(quantize(0.5).unwrap(), 128);
        assert_eq!(quantize(0.5 / 255.0).unwrap(), 1);
        assert!(quantize(1.0001).is_err());
        assert!(quantize(-0.01).is_err());
        assert!(quantize(f32::NAN).is_err());
    }

    #[test]
    fn pgm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let pixels: Vec<f32> = (0..6 * 4).map(|i| i as f32 / 23.0).collect();
        write_image(&path, 1, 4, 6, &pixels, ImageFormat::Pgm).unwrap();
        let img = read_pgm(&path).unwrap();
        assert_eq!((img.width, img.height), (6, 4));
        let expected: Vec<u8> = pixels.iter().map(|&p| quantize(p).unwrap()).collect();
        assert_eq!(img.bytes, expected);
    }

    #[test]
    fn plain_pgm_with_comments() {
        let img = parse_pgm(b"P2\n# hi\n3 1\n255\n0 128\n255\n").unwrap();
        assert_eq!(img.bytes, vec![0, 128, 255]);
        assert!(parse_pgm(b"P6\n1 1\n255\n\0\0\0").is_err());
        assert!(parse_pgm(b"P5\n4 4\n255\n\0").is_err());
    }

    #[test]
    fn png_colour_writes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        write_image(&path, 3, 2, 2, &[0.5; 12], ImageFormat::Png).unwrap();
        let decoder = png::Decoder::new(fs::File::open(&path).unwrap());
        let mut reader = decoder.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!(&buf[..info.buffer_size()], &[128u8; 12]);
        assert!(write_image(&path, 3, 2, 2, &[0.5; 12], ImageFormat::Pgm).is_err());
        assert!(write_image(&path, 1, 2, 2, &[2.0; 4], ImageFormat::Pgm).is_err());
    }
}
