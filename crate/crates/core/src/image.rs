//! RGB images in `[0, 1]`, PNG and raw float-grid serialization.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;

/// Magic prefix of the float-grid dump: magic, then little-endian `u32`
/// width, height and channel count, then row-major `f32` values.
pub const FLOAT_GRID_MAGIC: &[u8; 8] = b"CRFGRID1";

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major interleaved RGB.
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape("image", format!("{width}x{height} needs {} values", width * height * 3)));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self {
            width,
            height,
            data: rgb.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, i: usize) -> [f64; 3] {
        [self.data[3 * i], self.data[3 * i + 1], self.data[3 * i + 2]]
    }

    pub fn set_pixel(&mut self, i: usize, rgb: [f64; 3]) {
        self.data[3 * i..3 * i + 3].copy_from_slice(&rgb);
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data.iter().zip(&other.data).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn psnr(&self, other: &Image) -> f64 {
        let mse = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            / self.data.len().max(1) as f64;
        if mse == 0.0 {
            f64::INFINITY
        } else {
            -10.0 * mse.log10()
        }
    }

    /// Box-filter downsample by an integer factor.
    pub fn downsample(&self, factor: usize) -> Result<Image> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot downsample {}x{} by {factor}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let norm = 1.0 / (factor * factor) as f64;
        let mut out = vec![0.0; w * h * 3];
        for y in 0..self.height {
            for x in 0..self.width {
                let dst = ((y / factor) * w + x / factor) * 3;
                let src = (y * self.width + x) * 3;
                for c in 0..3 {
                    out[dst + c] += self.data[src + c] * norm;
                }
            }
        }
        Image::new(w, h, out)
    }

    pub fn to_png_bytes(&self) -> Vec<u8> {
        self.to_png_bytes_with_text(&[])
    }

    /// PNG with `tEXt` metadata chunks.
    pub fn to_png_bytes_with_text(&self, text: &[(&str, &str)]) -> Vec<u8> {
        let bytes: Vec<u8> = self.data.iter().map(|v| quantize(*v)).collect();
        encode_png(self.width, self.height, png::ColorType::Rgb, &bytes, text)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_png_bytes())
    }

    pub fn from_png_bytes(bytes: &[u8], origin: &Path) -> Result<Image> {
        let (w, h, channels, raw) = decode_png(bytes, origin)?;
        let data = match channels {
            3 => raw.iter().map(|v| *v as f64 / 255.0).collect(),
            4 => raw
                .chunks_exact(4)
                .flat_map(|p| p[..3].iter().map(|v| *v as f64 / 255.0).collect::<Vec<_>>())
                .collect(),
            1 => raw.iter().flat_map(|v| [*v as f64 / 255.0; 3]).collect(),
            _ => return Err(Error::format(origin, format!("unsupported channel count {channels}"))),
        };
        Image::new(w, h, data)
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_png_bytes(&bytes, path)
    }

    pub fn to_float_grid(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.data.len());
        out.extend_from_slice(FLOAT_GRID_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&3u32.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_float_grid(bytes: &[u8], origin: &Path) -> Result<Image> {
        if bytes.len() < 20 || &bytes[..8] != FLOAT_GRID_MAGIC {
            return Err(Error::format(origin, "missing float grid magic"));
        }
        let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
        let (w, h, c) = (word(8), word(12), word(16));
        if c != 3 || bytes.len() != 20 + 4 * w * h * c {
            return Err(Error::format(origin, "float grid size mismatch"));
        }
        let data = bytes[20..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        Image::new(w, h, data)
    }
}

/// Binary single-channel mask, one byte per pixel (`255` = present).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let inter = self.data.iter().zip(&other.data).filter(|(a, b)| **a && **b).count();
        let union = self.data.iter().zip(&other.data).filter(|(a, b)| **a || **b).count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn downsample(&self, factor: usize) -> Result<Mask> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::InvalidArgument(format!("cannot downsample mask by {factor}")));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let mut votes = vec![0usize; w * h];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.data[y * self.width + x] {
                    votes[(y / factor) * w + x / factor] += 1;
                }
            }
        }
        let half = factor * factor / 2;
        Ok(Mask {
            width: w,
            height: h,
            data: votes.into_iter().map(|v| v > half).collect(),
        })
    }

    pub fn to_png_bytes(&self) -> Vec<u8> {
        let bytes: Vec<u8> = self.data.iter().map(|v| if *v { 255 } else { 0 }).collect();
        encode_png(self.width, self.height, png::ColorType::Grayscale, &bytes, &[])
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_png_bytes())
    }

    pub fn load_png(path: &Path) -> Result<Mask> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_png_bytes(&bytes, path)
    }

    pub fn from_png_bytes(bytes: &[u8], origin: &Path) -> Result<Mask> {
        let (w, h, channels, raw) = decode_png(bytes, origin)?;
        if channels != 1 {
            return Err(Error::format(origin, "mask must be single-channel"));
        }
        Ok(Mask {
            width: w,
            height: h,
            data: raw.iter().map(|v| *v >= 128).collect(),
        })
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_png(width: usize, height: usize, color: png::ColorType, bytes: &[u8], text: &[(&str, &str)]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        for (k, v) in text {
            enc.add_text_chunk(k.to_string(), v.to_string()).expect("latin-1 keyword");
        }
        let mut writer = enc.write_header().expect("in-memory png header");
        writer.write_image_data(bytes).expect("in-memory png data");
    }
    out
}

/// `tEXt` chunks of a PNG.
pub fn png_text(bytes: &[u8], origin: &Path) -> Result<Vec<(String, String)>> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let reader = decoder.read_info().map_err(|e| Error::format(origin, e.to_string()))?;
    Ok(reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .map(|t| (t.keyword.clone(), t.text.clone()))
        .collect())
}

fn decode_png(bytes: &[u8], origin: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::format(origin, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::format(origin, "png too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(origin, e.to_string()))?;
    buf.truncate(info.buffer_size());
    let channels = info.color_type.samples();
    Ok((info.width as usize, info.height as usize, channels, buf))
}
