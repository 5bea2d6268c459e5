//! Generalized thermometer encoding of 8-bit pixels into low-bit codes.
//!
//! Each 8-bit channel value `x` maps to `k` codes
//! `z_i = clamp(floor(w_i·x + b_i), 0, 2^l − 1)` with `w_i = 1/(s·k)`,
//! `b_i = 1 − (i+1)/k` and bin width `s = max(1, floor(255/((2^l − 1)·k)))`.
//!
//! The affine form has an exact integer equivalent,
//! `floor(w_i·x + b_i) = floor((x + s·(k − 1 − i)) / (s·k))`, which is what
//! the encoder evaluates. Evaluating `w_i·x + b_i` in binary floating point
//! lands just below an integer for some `(k, i, x)` and would shift those
//! transition points by one input level.

use crate::error::{domain_err, shape_err, Result};
use crate::tensor::Act2Tensor;

/// Parameters of the thermometer encoder for one input channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ThermoParams {
    k: usize,
    bits: u32,
    bin_width: u32,
    slope: Vec<f64>,
    offset: Vec<f64>,
}

impl ThermoParams {
    /// Codes per input channel.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    /// The bin width `s`.
    pub fn bin_width(&self) -> u32 {
        self.bin_width
    }

    pub fn slope(&self) -> &[f64] {
        &self.slope
    }

    pub fn offset(&self) -> &[f64] {
        &self.offset
    }

    pub fn max_code(&self) -> u32 {
        (1u32 << self.bits) - 1
    }
}

pub fn thermo_params(k: usize, bits: u32) -> Result<ThermoParams> {
    if k == 0 {
        return Err(domain_err("thermometer length k must be >= 1"));
    }
    if !(1..=8).contains(&bits) {
        return Err(domain_err(format!("thermometer bits must be in 1..=8, got {bits}")));
    }
    let levels = (1u64 << bits) - 1;
    let bin_width = (255 / (levels * k as u64)).max(1) as u32;
    let sk = f64::from(bin_width) * k as f64;
    let slope = vec![1.0 / sk; k];
    let offset = (0..k).map(|i| 1.0 - (i + 1) as f64 / k as f64).collect();
    Ok(ThermoParams { k, bits, bin_width, slope, offset })
}

/// Encodes one 8-bit value into `k` codes, written to `out`.
pub fn encode_pixel_into(x: u8, p: &ThermoParams, out: &mut [u8]) {
    debug_assert_eq!(out.len(), p.k);
    let s = u64::from(p.bin_width);
    let k = p.k as u64;
    let max = u64::from(p.max_code());
    for (i, z) in out.iter_mut().enumerate() {
        let level = (u64::from(x) + s * (k - 1 - i as u64)) / (s * k);
        *z = level.min(max) as u8;
    }
}

pub fn encode_pixel(x: u8, p: &ThermoParams) -> Vec<u8> {
    let mut out = vec![0; p.k];
    encode_pixel_into(x, p, &mut out);
    out
}

/// 8-bit image in `(3, H, W)` channel-major layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || data.len() != channels * height * width {
            return Err(shape_err(format!("image ({channels}, {height}, {width}) with {} bytes", data.len())));
        }
        Ok(Self { channels, height, width, data })
    }

    /// Converts interleaved `RGBRGB...` rows (as in PPM) to channel-major.
    pub fn from_interleaved_rgb(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != 3 * height * width {
            return Err(shape_err(format!(
                "{height}x{width} RGB image needs {} bytes, got {}",
                3 * height * width,
                rgb.len()
            )));
        }
        let plane = height * width;
        let mut data = vec![0u8; 3 * plane];
        for (pix, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + pix] = px[c];
            }
        }
        Self::new(3, height, width, data)
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let plane = height * width;
        let data = rgb.iter().flat_map(|&v| std::iter::repeat_n(v, plane)).collect();
        Self { channels: 3, height, width, data }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    /// Copies the `height`×`width` window at `(top, left)`, optionally mirrored left-right.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize, mirror: bool) -> Result<Self> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(shape_err(format!(
                "crop {height}x{width} at ({top}, {left}) outside {}x{} image",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            for y in 0..height {
                for x in 0..width {
                    let sx = if mirror { left + width - 1 - x } else { left + x };
                    data.push(self.get(c, top + y, sx));
                }
            }
        }
        Self::new(self.channels, height, width, data)
    }
}

/// Embeds a 3-channel image as `3k` 2-bit channels, colour-major: output
/// channel `c·k + i` is code `i` of input channel `c`.
pub fn encode_image(img: &Image, p: &ThermoParams) -> Result<Act2Tensor> {
    if img.channels() != 3 {
        return Err(shape_err(format!("expected 3 image channels, got {}", img.channels())));
    }
    if p.bits() != 2 {
        return Err(domain_err(format!("2-bit activations required, encoder has {} bits", p.bits())));
    }
    let (h, w) = (img.height(), img.width());
    let plane = h * w;
    let k = p.k();
    let mut data = vec![0u8; 3 * k * plane];
    // 256-entry lookup table per code index
    let table: Vec<Vec<u8>> = (0..=255u8).map(|x| encode_pixel(x, p)).collect();
    for c in 0..3 {
        for pix in 0..plane {
            let codes = &table[img.as_slice()[c * plane + pix] as usize];
            for (i, &z) in codes.iter().enumerate() {
                data[(c * k + i) * plane + pix] = z;
            }
        }
    }
    Act2Tensor::new(3 * k, h, w, data)
}
