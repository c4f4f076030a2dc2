//! Floating-point images and 8-bit PNG I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major, channel-interleaved image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::shape(format!(
                "{}x{}x{} image needs {} values, got {}",
                width,
                height,
                channels,
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.idx(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.idx(x, y, c);
        self.data[i] = v;
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn clamp01(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// `[0,1] -> [-1,1]`, the diffusion prior's working space.
    pub fn to_signed(&self) -> Image {
        self.map(|v| 2.0 * v - 1.0)
    }

    /// `[-1,1] -> [0,1]`.
    pub fn to_unit(&self) -> Image {
        self.map(|v| (v + 1.0) * 0.5)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Expands a single-channel image to RGB by replication.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let mut out = Image::new(self.width, self.height, 3);
        for p in 0..self.pixel_count() {
            let v = self.data[p * self.channels];
            out.data[p * 3..p * 3 + 3].fill(v);
        }
        out
    }

    /// Rec. 601 luma; single-channel images pass through.
    pub fn luminance(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let mut out = Image::new(self.width, self.height, 1);
        for p in 0..self.pixel_count() {
            let s = &self.data[p * self.channels..];
            out.data[p] = 0.299 * s[0] + 0.587 * s[1] + 0.114 * s[2];
        }
        out
    }

    /// Bilinear sample with edge clamping at continuous pixel coordinates
    /// (pixel centers at integer coordinates).
    pub fn sample_bilinear(&self, x: f64, y: f64, c: usize) -> f64 {
        let xm = (self.width - 1) as f64;
        let ym = (self.height - 1) as f64;
        let x = x.clamp(0.0, xm);
        let y = y.clamp(0.0, ym);
        let x0 = (x.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (y.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let a = self.get(x0, y0, c) * (1.0 - fx) + self.get(x1, y0, c) * fx;
        let b = self.get(x0, y1, c) * (1.0 - fx) + self.get(x1, y1, c) * fx;
        a * (1.0 - fy) + b * fy
    }

    /// Quantizes to 8 bits per channel, RGB.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.to_rgb()
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Image> {
        let data = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        Image::from_vec(width, height, 3, data)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
            w.write_image_data(&self.to_rgb8())
                .map_err(|e| Error::Image(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Image> {
        decode(png::Decoder::new(std::io::Cursor::new(bytes)))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
        w.write_image_data(&self.to_rgb8())
            .map_err(|e| Error::Image(e.to_string()))
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        decode(png::Decoder::new(BufReader::new(file)))
    }

    /// Concatenates equally sized images left to right.
    pub fn hstack(images: &[Image]) -> Result<Image> {
        let first = images.first().ok_or_else(|| Error::shape("hstack of zero images"))?;
        for im in images {
            first.check_same_shape(im)?;
        }
        let (w, h, c) = (first.width, first.height, first.channels);
        let mut out = Image::new(w * images.len(), h, c);
        for (k, im) in images.iter().enumerate() {
            for y in 0..h {
                let src = &im.data[y * w * c..(y + 1) * w * c];
                let start = (y * out.width + k * w) * c;
                out.data[start..start + w * c].copy_from_slice(src);
            }
        }
        Ok(out)
    }
}

fn decode<R: std::io::BufRead + std::io::Seek>(mut decoder: png::Decoder<R>) -> Result<Image> {
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::Image(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Image(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => bytes.to_vec(),
        png::ColorType::Rgba => bytes.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => bytes.iter().flat_map(|&v| [v, v, v]).collect(),
        png::ColorType::GrayscaleAlpha => bytes.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        other => return Err(Error::Image(format!("unsupported color type {other:?}"))),
    };
    Image::from_rgb8(w, h, &rgb)
}
