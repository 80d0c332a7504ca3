//! 8-bit PNG reading and writing.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::{Error, Result};

/// Interleaved 8-bit pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Image8 {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height * channels, "pixel buffer size mismatch");
        Self {
            width,
            height,
            channels,
            pixels,
        }
    }

    /// Planar `[C, H, W]` copy of the interleaved pixels.
    pub fn to_planar(&self) -> Vec<u8> {
        let plane = self.width * self.height;
        let mut out = vec![0u8; plane * self.channels];
        for (p, px) in self.pixels.chunks_exact(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * plane + p] = v;
            }
        }
        out
    }

    pub fn from_planar(width: usize, height: usize, channels: usize, planar: &[u8]) -> Self {
        let plane = width * height;
        let mut pixels = vec![0u8; plane * channels];
        for c in 0..channels {
            for p in 0..plane {
                pixels[p * channels + c] = planar[c * plane + p];
            }
        }
        Self::new(width, height, channels, pixels)
    }
}

pub fn read_png(path: &Path) -> Result<Image8> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let bad = |e: png::DecodingError| Error::Data(format!("{}: {e}", path.display()));
    let mut reader = decoder.read_info().map_err(bad)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Data(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    buf.truncate(info.buffer_size());
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::Data(format!("{}: unexpanded palette image", path.display())));
        }
    };
    Ok(Image8::new(info.width as usize, info.height as usize, channels, buf))
}

pub fn write_png(path: &Path, image: &Image8) -> Result<()> {
    let color = match image.channels {
        1 => png::ColorType::Grayscale,
        2 => png::ColorType::GrayscaleAlpha,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        c => return Err(Error::Data(format!("cannot write a {c}-channel PNG"))),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), image.width as u32, image.height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let bad = |e: png::EncodingError| Error::Data(format!("{}: {e}", path.display()));
    let mut writer = encoder.write_header().map_err(bad)?;
    writer.write_image_data(&image.pixels).map_err(bad)?;
    writer.finish().map_err(bad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_and_gray_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = Image8::new(3, 2, 3, (0..18).map(|v| v as u8 * 13).collect());
        let p = dir.path().join("a.png");
        write_png(&p, &rgb).unwrap();
        assert_eq!(read_png(&p).unwrap(), rgb);
        let gray = Image8::new(2, 2, 1, vec![0, 1, 1, 0]);
        write_png(&p, &gray).unwrap();
        assert_eq!(read_png(&p).unwrap(), gray);
    }

    #[test]
    fn planar_conversion_inverts() {
        let img = Image8::new(2, 1, 3, vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(img.to_planar(), vec![1, 4, 2, 5, 3, 6]);
        assert_eq!(Image8::from_planar(2, 1, 3, &img.to_planar()), img);
    }
}
