//! Binary PPM/PGM image files and tiled grids. PNG is available with the
//! `png` feature.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::quantize;
use crate::numerics::{Real, Tensor};

/// Separator width between grid tiles, in pixels.
pub const GRID_GAP: usize = 2;

/// Integer image `[height, width, channels]` with `channels` 1 or 3.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub bits: u32,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, bits: u32, pixels: Vec<u8>) -> Result<Self> {
        if !(channels == 1 || channels == 3) {
            return Err(Error::format(
                "image",
                format!("only 1 or 3 channels are supported, got {channels}"),
            ));
        }
        if !(1..=8).contains(&bits) {
            return Err(Error::format("image", format!("bit depth must be 1..=8, got {bits}")));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::format(
                "image",
                format!("{} pixel values for a {width}x{height}x{channels} image", pixels.len()),
            ));
        }
        let max = Self::max_for(bits);
        if let Some(&p) = pixels.iter().find(|&&p| p > max) {
            return Err(Error::format(
                "image",
                format!("pixel value {p} exceeds {bits}-bit range"),
            ));
        }
        Ok(Image {
            width,
            height,
            channels,
            bits,
            pixels,
        })
    }

    fn max_for(bits: u32) -> u8 {
        ((1u32 << bits) - 1) as u8
    }

    pub fn max_value(&self) -> u8 {
        Self::max_for(self.bits)
    }

    /// Quantizes a continuous image `[h,w,c]` (or `[1,h,w,c]`) in `[0, 1)`.
    pub fn from_tensor<T: Real>(x: &Tensor<T>, bits: u32) -> Result<Self> {
        let (h, w, c) = match *x.shape() {
            [h, w, c] | [1, h, w, c] => (h, w, c),
            _ => return Err(Error::shape(format!("expected one image, got {:?}", x.shape()))),
        };
        Image::new(w, h, c, bits, quantize(x.data(), bits))
    }

    /// Binary PPM (`P6`) for three channels, PGM (`P5`) for one.
    pub fn to_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n{}\n", self.width, self.height, self.max_value()).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pnm(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::format("PNM file", msg.to_string());
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
        }
        // Exactly one whitespace byte separates the header from the data.
        pos += 1;
        let channels = match fields[0] {
            "P6" => 3,
            "P5" => 1,
            m => return Err(bad(&format!("unsupported magic {m:?}"))),
        };
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad number {s:?}")));
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval == 0 || maxval > 255 || !(maxval + 1).is_power_of_two() {
            return Err(bad(&format!("maxval {maxval} is not 2^b - 1 with b <= 8")));
        }
        let bits = (maxval + 1).trailing_zeros();
        let len = width * height * channels;
        let data = bytes.get(pos..pos + len).ok_or_else(|| bad("truncated pixel data"))?;
        Image::new(width, height, channels, bits, data.to_vec())
    }

    /// Writes PNM, or PNG when the path ends in `.png` and the feature is on.
    pub fn save(&self, path: &Path) -> Result<()> {
        if is_png(path) {
            return self.save_png(path);
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_pnm())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if is_png(path) {
            return Self::load_png(path);
        }
        Self::from_pnm(&fs::read(path)?)
    }

    #[cfg(feature = "png")]
    fn save_png(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path)?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(if self.channels == 3 {
            png::ColorType::Rgb
        } else {
            png::ColorType::Grayscale
        });
        enc.set_depth(png::BitDepth::Eight);
        let scale = 255.0 / f64::from(self.max_value());
        let data: Vec<u8> = self
            .pixels
            .iter()
            .map(|&p| (f64::from(p) * scale).round() as u8)
            .collect();
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::format("PNG file", e.to_string()))?;
        writer
            .write_image_data(&data)
            .map_err(|e| Error::format("PNG file", e.to_string()))?;
        Ok(())
    }

    #[cfg(not(feature = "png"))]
    fn save_png(&self, _path: &Path) -> Result<()> {
        Err(Error::format("image", "PNG support requires the `png` feature"))
    }

    #[cfg(feature = "png")]
    fn load_png(path: &Path) -> Result<Self> {
        let err = |e: png::DecodingError| Error::format("PNG file", e.to_string());
        let mut dec = png::Decoder::new(std::io::BufReader::new(fs::File::open(path)?));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(err)?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(err)?;
        let channels = match info.color_type {
            png::ColorType::Rgb => 3,
            png::ColorType::Grayscale => 1,
            other => return Err(Error::format("PNG file", format!("unsupported color type {other:?}"))),
        };
        buf.truncate(info.buffer_size());
        Image::new(info.width as usize, info.height as usize, channels, 8, buf)
    }

    #[cfg(not(feature = "png"))]
    fn load_png(_path: &Path) -> Result<Self> {
        Err(Error::format("image", "PNG support requires the `png` feature"))
    }
}

fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Tiles equally sized images row-major into `cols` columns, with
/// [`GRID_GAP`]-pixel white separators between tiles and no outer border.
pub fn grid(images: &[Image], cols: usize) -> Result<Image> {
    let first = images
        .first()
        .ok_or_else(|| Error::shape("grid needs at least one image"))?;
    if cols == 0 {
        return Err(Error::shape("grid needs at least one column"));
    }
    let (w, h, c, bits) = (first.width, first.height, first.channels, first.bits);
    if images
        .iter()
        .any(|im| (im.width, im.height, im.channels, im.bits) != (w, h, c, bits))
    {
        return Err(Error::shape("grid images must share size, channels and bit depth"));
    }
    let cols = cols.min(images.len());
    let rows = images.len().div_ceil(cols);
    let gw = cols * w + GRID_GAP * (cols - 1);
    let gh = rows * h + GRID_GAP * (rows - 1);
    let mut pixels = vec![first.max_value(); gw * gh * c];
    for (i, im) in images.iter().enumerate() {
        let (r, col) = (i / cols, i % cols);
        let (y0, x0) = (r * (h + GRID_GAP), col * (w + GRID_GAP));
        for y in 0..h {
            let dst = ((y0 + y) * gw + x0) * c;
            pixels[dst..dst + w * c].copy_from_slice(&im.pixels[y * w * c..(y + 1) * w * c]);
        }
    }
    Image::new(gw, gh, c, bits, pixels)
}

pub fn write_grid(images: &[Image], cols: usize, path: &Path) -> Result<()> {
    grid(images, cols)?.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(v: u8) -> Image {
        Image::new(3, 2, 3, 8, vec![v; 18]).unwrap()
    }

    #[test]
    fn pnm_roundtrip() {
        let im = Image::new(4, 3, 3, 5, (0..36).map(|i| (i % 32) as u8).collect()).unwrap();
        let bytes = im.to_pnm();
        assert!(bytes.starts_with(b"P6\n4 3\n31\n"));
        assert_eq!(Image::from_pnm(&bytes).unwrap(), im);
        let gray = Image::new(2, 2, 1, 8, vec![0, 50, 100, 255]).unwrap();
        assert_eq!(Image::from_pnm(&gray.to_pnm()).unwrap(), gray);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P6 # c\n# another\n1 1 255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        assert_eq!(Image::from_pnm(&bytes).unwrap().pixels, vec![1, 2, 3]);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(Image::from_pnm(b"P3\n1 1\n255\n").is_err());
        assert!(Image::from_pnm(b"P6\n2 2\n255\n\x00").is_err());
        assert!(Image::from_pnm(b"P6\n1 1\n100\n\x00\x00\x00").is_err());
        assert!(Image::new(1, 1, 3, 5, vec![40, 0, 0]).is_err());
    }

    #[test]
    fn grid_layout() {
        let g = grid(&[solid(0), solid(10), solid(20), solid(30)], 2).unwrap();
        assert_eq!((g.width, g.height), (2 * 3 + 2, 2 * 2 + 2));
        let px = |x: usize, y: usize| g.pixels[(y * g.width + x) * 3];
        assert_eq!(px(0, 0), 0);
        assert_eq!(px(3, 0), 255);
        assert_eq!(px(5, 0), 10);
        assert_eq!(px(0, 2), 255);
        assert_eq!(px(0, 4), 20);
        assert_eq!(px(7, 5), 30);
        let single = grid(&[solid(7)], 3).unwrap();
        assert_eq!(single, solid(7));
    }

    #[test]
    fn grid_rejects_mixed_sizes() {
        let other = Image::new(2, 2, 3, 8, vec![0; 12]).unwrap();
        assert!(grid(&[solid(0), other], 2).is_err());
        assert!(grid(&[], 2).is_err());
    }
}
