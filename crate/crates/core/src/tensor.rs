//! Tensor representations shared by every stage of the engine.
//!
//! Layout is channel-major `(C, H, W)`, row-major within a plane. The
//! canonical activation form is one byte per 2-bit code ([`Act2Tensor`]);
//! [`PackedPlanes`] is the derived bitplane form consumed by the popcount
//! kernel. Channels are packed 64 to a word, least-significant bit first,
//! and pad lanes always hold code 0.

use crate::error::{domain_err, shape_err, Result};

/// Number of channel lanes per packed word.
pub const LANES: usize = 64;

/// Largest 2-bit activation code.
pub const MAX_CODE: u8 = 3;

/// Number of 64-bit words needed to hold `channels` lanes.
pub fn channel_words(channels: usize) -> usize {
    channels.div_ceil(LANES)
}

/// `channels` rounded up to a multiple of 64.
pub fn padded_channels(channels: usize) -> usize {
    channel_words(channels) * LANES
}

/// Dense real-valued tensor used by the float oracle and by checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl FloatTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if shape.is_empty() || len != data.len() {
            return Err(shape_err(format!("shape {shape:?} needs {len} elements, got {}", data.len())));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(domain_err(format!("non-finite element at flat index {pos}")));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// 2-bit activation map, one byte per code.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Act2Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Act2Tensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(shape_err(format!("activation dims must be >= 1, got ({channels}, {height}, {width})")));
        }
        if data.len() != channels * height * width {
            return Err(shape_err(format!(
                "activation ({channels}, {height}, {width}) needs {} codes, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|&c| c > MAX_CODE) {
            return Err(domain_err(format!("activation code {} at flat index {pos} exceeds 3", data[pos])));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(channels, height, width, vec![0; channels * height * width])
    }

    /// Builds a tensor from `f(c, y, x)`; codes above 3 are rejected.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> u8,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data)
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

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[u8] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }
}

/// Two-bitplane packed form of an [`Act2Tensor`].
///
/// Storage is pixel-major: for pixel `(y, x)` the words
/// `[(y * W + x) * words .. + words]` hold channels `64·w .. 64·w + 63`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedPlanes {
    channels: usize,
    words: usize,
    height: usize,
    width: usize,
    hi: Vec<u64>,
    lo: Vec<u64>,
}

impl PackedPlanes {
    /// Logical (unpadded) channel count of the source tensor.
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn padded_channels(&self) -> usize {
        self.words * LANES
    }

    pub fn words(&self) -> usize {
        self.words
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn hi(&self) -> &[u64] {
        &self.hi
    }

    pub fn lo(&self) -> &[u64] {
        &self.lo
    }

    /// Words of the high plane at pixel `(y, x)`.
    #[inline]
    pub fn hi_at(&self, y: usize, x: usize) -> &[u64] {
        let base = (y * self.width + x) * self.words;
        &self.hi[base..base + self.words]
    }

    #[inline]
    pub fn lo_at(&self, y: usize, x: usize) -> &[u64] {
        let base = (y * self.width + x) * self.words;
        &self.lo[base..base + self.words]
    }
}

pub fn pack_activations(a: &Act2Tensor) -> PackedPlanes {
    let (channels, height, width) = a.shape();
    let words = channel_words(channels);
    let plane = height * width;
    let mut hi = vec![0u64; plane * words];
    let mut lo = vec![0u64; plane * words];
    for c in 0..channels {
        let (word, bit) = (c / LANES, c % LANES);
        for (pix, &code) in a.channel(c).iter().enumerate() {
            let idx = pix * words + word;
            hi[idx] |= u64::from(code >> 1) << bit;
            lo[idx] |= u64::from(code & 1) << bit;
        }
    }
    PackedPlanes { channels, words, height, width, hi, lo }
}

/// Inverse of [`pack_activations`], keeping the first `channels` lanes.
pub fn unpack_activations(p: &PackedPlanes, channels: usize) -> Result<Act2Tensor> {
    if channels > p.padded_channels() {
        return Err(shape_err(format!("cannot unpack {channels} channels from {} packed lanes", p.padded_channels())));
    }
    Act2Tensor::from_fn(channels, p.height, p.width, |c, y, x| {
        let idx = (y * p.width + x) * p.words + c / LANES;
        let bit = c % LANES;
        let h = (p.hi[idx] >> bit) & 1;
        let l = (p.lo[idx] >> bit) & 1;
        (2 * h + l) as u8
    })
}

/// Binary weights as ±1 bytes, shape `(out_ch, in_ch, kh, kw)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignTensor {
    out_ch: usize,
    in_ch: usize,
    kh: usize,
    kw: usize,
    data: Vec<i8>,
}

impl SignTensor {
    pub fn new(out_ch: usize, in_ch: usize, kh: usize, kw: usize, data: Vec<i8>) -> Result<Self> {
        let len = out_ch * in_ch * kh * kw;
        if len == 0 || data.len() != len {
            return Err(shape_err(format!(
                "sign tensor ({out_ch}, {in_ch}, {kh}, {kw}) needs {len} elements, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|&s| s != 1 && s != -1) {
            return Err(domain_err(format!("weight {} at flat index {pos} is not +1 or -1", data[pos])));
        }
        Ok(Self { out_ch, in_ch, kh, kw, data })
    }

    /// Accepts a 4-d float tensor whose elements are exactly +1.0 or -1.0.
    pub fn from_float(t: &FloatTensor) -> Result<Self> {
        let &[oc, ic, kh, kw] = t.shape() else {
            return Err(shape_err(format!("weights must be 4-d, got {:?}", t.shape())));
        };
        let mut data = Vec::with_capacity(t.len());
        for (pos, &v) in t.data().iter().enumerate() {
            data.push(match v {
                1.0 => 1,
                -1.0 => -1,
                _ => return Err(domain_err(format!("weight {v} at flat index {pos} is not +1 or -1"))),
            });
        }
        Self::new(oc, ic, kh, kw, data)
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.out_ch, self.in_ch, self.kh, self.kw)
    }

    pub fn out_ch(&self) -> usize {
        self.out_ch
    }

    pub fn in_ch(&self) -> usize {
        self.in_ch
    }

    #[inline]
    pub fn get(&self, o: usize, c: usize, i: usize, j: usize) -> i8 {
        self.data[((o * self.in_ch + c) * self.kh + i) * self.kw + j]
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.data
    }
}

/// Bit-packed binary conv weights (bit 1 ↔ +1) with per-output-channel scale.
///
/// Word layout is `[o][i][j][word]`; pad lanes beyond `in_ch` are fixed to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedWeights {
    out_ch: usize,
    in_ch: usize,
    kh: usize,
    kw: usize,
    words: usize,
    bits: Vec<u64>,
    alpha: Vec<f64>,
    const_scaled: bool,
}

pub fn pack_weights(signs: &SignTensor, alpha: Vec<f64>, const_scaled: bool) -> Result<PackedWeights> {
    let (out_ch, in_ch, kh, kw) = signs.shape();
    if alpha.len() != out_ch {
        return Err(shape_err(format!("{} scaling factors for {out_ch} output channels", alpha.len())));
    }
    if let Some(o) = alpha.iter().position(|a| !(a.is_finite() && *a > 0.0)) {
        return Err(domain_err(format!("scaling factor {} of output channel {o} must be positive", alpha[o])));
    }
    let words = channel_words(in_ch);
    let mut bits = vec![u64::MAX; out_ch * kh * kw * words];
    for o in 0..out_ch {
        for i in 0..kh {
            for j in 0..kw {
                let base = ((o * kh + i) * kw + j) * words;
                for c in 0..in_ch {
                    if signs.get(o, c, i, j) < 0 {
                        bits[base + c / LANES] &= !(1u64 << (c % LANES));
                    }
                }
            }
        }
    }
    Ok(PackedWeights { out_ch, in_ch, kh, kw, words, bits, alpha, const_scaled })
}

impl PackedWeights {
    /// Reassembles a model from stored parts; used by the file loader.
    pub fn from_raw(
        shape: (usize, usize, usize, usize),
        bits: Vec<u64>,
        alpha: Vec<f64>,
        const_scaled: bool,
    ) -> Result<Self> {
        let (out_ch, in_ch, kh, kw) = shape;
        let words = channel_words(in_ch);
        if out_ch == 0 || in_ch == 0 || kh == 0 || kw == 0 {
            return Err(shape_err(format!("empty weight shape {shape:?}")));
        }
        if bits.len() != out_ch * kh * kw * words {
            return Err(shape_err(format!(
                "weight shape {shape:?} needs {} words, got {}",
                out_ch * kh * kw * words,
                bits.len()
            )));
        }
        if alpha.len() != out_ch || alpha.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(domain_err("scaling factors must be positive, one per output channel"));
        }
        Ok(Self { out_ch, in_ch, kh, kw, words, bits, alpha, const_scaled })
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.out_ch, self.in_ch, self.kh, self.kw)
    }

    pub fn out_ch(&self) -> usize {
        self.out_ch
    }

    pub fn in_ch(&self) -> usize {
        self.in_ch
    }

    pub fn words(&self) -> usize {
        self.words
    }

    pub fn bits(&self) -> &[u64] {
        &self.bits
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn const_scaled(&self) -> bool {
        self.const_scaled
    }

    /// Words for output channel `o` at kernel tap `(i, j)`.
    #[inline]
    pub fn tap(&self, o: usize, i: usize, j: usize) -> &[u64] {
        let base = ((o * self.kh + i) * self.kw + j) * self.words;
        &self.bits[base..base + self.words]
    }

    pub fn unpack(&self) -> SignTensor {
        let mut data = Vec::with_capacity(self.out_ch * self.in_ch * self.kh * self.kw);
        for o in 0..self.out_ch {
            for c in 0..self.in_ch {
                for i in 0..self.kh {
                    for j in 0..self.kw {
                        let bit = (self.tap(o, i, j)[c / LANES] >> (c % LANES)) & 1;
                        data.push(if bit == 1 { 1 } else { -1 });
                    }
                }
            }
        }
        SignTensor { out_ch: self.out_ch, in_ch: self.in_ch, kh: self.kh, kw: self.kw, data }
    }
}

/// Signed 32-bit accumulator map produced by convolutions and residual adds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntAccTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<i32>,
}

impl IntAccTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<i32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || data.len() != channels * height * width {
            return Err(shape_err(format!("accumulator ({channels}, {height}, {width}) with {} elements", data.len())));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(channels, height, width, vec![0; channels * height * width])
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

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> i32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn as_slice(&self) -> &[i32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[i32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    /// Largest absolute element.
    pub fn max_abs(&self) -> u32 {
        self.data.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn code_table_packs_lsb_first() {
        let a = Act2Tensor::new(4, 1, 1, vec![0, 1, 2, 3]).unwrap();
        let p = pack_activations(&a);
        assert_eq!(p.hi(), &[0b1100]);
        assert_eq!(p.lo(), &[0b1010]);
    }

    #[test]
    fn zero_tensor_packs_to_zero_planes() {
        let a = Act2Tensor::zeros(130, 3, 2).unwrap();
        let p = pack_activations(&a);
        assert!(p.hi().iter().chain(p.lo()).all(|&w| w == 0));
        assert_eq!(p.words(), 3);
    }

    #[test]
    fn seventy_channels_pad_to_128() {
        let a = Act2Tensor::from_fn(70, 2, 3, |c, y, x| ((c + y + x) % 4) as u8).unwrap();
        let p = pack_activations(&a);
        assert_eq!(p.padded_channels(), 128);
        for y in 0..2 {
            for x in 0..3 {
                // lanes 70..127 live in bits 6..63 of the second word
                assert_eq!(p.hi_at(y, x)[1] >> 6, 0);
                assert_eq!(p.lo_at(y, x)[1] >> 6, 0);
            }
        }
        assert_eq!(unpack_activations(&p, 70).unwrap(), a);
        let wide = unpack_activations(&p, 128).unwrap();
        assert!((70..128).all(|c| wide.channel(c).iter().all(|&v| v == 0)));
    }

    #[test]
    fn unpack_decodes_plane_pairs() {
        let a = Act2Tensor::new(2, 1, 1, vec![3, 2]).unwrap();
        let p = pack_activations(&a);
        assert_eq!((p.hi()[0] & 1, p.lo()[0] & 1), (1, 1));
        assert_eq!((p.hi()[0] >> 1 & 1, p.lo()[0] >> 1 & 1), (1, 0));
        assert_eq!(unpack_activations(&p, 2).unwrap().as_slice(), &[3, 2]);
    }

    #[test]
    fn unpack_rejects_too_many_channels() {
        let p = pack_activations(&Act2Tensor::zeros(3, 1, 1).unwrap());
        assert!(matches!(unpack_activations(&p, 65), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn act2_rejects_code_four() {
        assert!(matches!(Act2Tensor::new(1, 1, 1, vec![4]), Err(crate::Error::Domain(_))));
        assert!(Act2Tensor::new(0, 1, 1, vec![]).is_err());
    }

    #[test]
    fn weights_pack_sign_bits() {
        let s = SignTensor::new(1, 3, 1, 1, vec![1, -1, 1]).unwrap();
        let w = pack_weights(&s, vec![1.0], false).unwrap();
        // bits 0..2 = 1,0,1 and every pad lane set
        assert_eq!(w.bits()[0], !0b010u64);
        assert_eq!(w.bits()[0] & 0b111, 0b101);
        assert_eq!(w.unpack(), s);
    }

    #[test]
    fn all_plus_one_weights_are_all_ones() {
        let s = SignTensor::new(2, 70, 3, 3, vec![1; 2 * 70 * 9]).unwrap();
        let w = pack_weights(&s, vec![0.5, 0.25], true).unwrap();
        assert_eq!(w.words(), 2);
        assert!(w.bits().iter().all(|&b| b == u64::MAX));
    }

    #[test]
    fn ic3_pads_to_64_with_ones() {
        let s = SignTensor::new(1, 3, 1, 1, vec![-1, -1, -1]).unwrap();
        let w = pack_weights(&s, vec![2.0], false).unwrap();
        assert_eq!(w.bits(), &[u64::MAX << 3]);
        assert_eq!(w.unpack(), s);
    }

    #[test]
    fn weight_domain_errors() {
        let t = FloatTensor::new(vec![1, 3, 1, 1], vec![1.0, 0.5, -1.0]).unwrap();
        assert!(matches!(SignTensor::from_float(&t), Err(crate::Error::Domain(_))));
        let t = FloatTensor::new(vec![1, 3, 1, 1], vec![1.0, -1.0, -1.0]).unwrap();
        let s = SignTensor::from_float(&t).unwrap();
        assert!(matches!(pack_weights(&s, vec![0.0], false), Err(crate::Error::Domain(_))));
        assert!(matches!(pack_weights(&s, vec![1.0, 1.0], false), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn float_tensor_rejects_nan() {
        assert!(FloatTensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(FloatTensor::new(vec![3], vec![1.0, 2.0]).is_err());
    }

    fn act2_strategy() -> impl Strategy<Value = Act2Tensor> {
        (1usize..200, 1usize..5, 1usize..5).prop_flat_map(|(c, h, w)| {
            proptest::collection::vec(0u8..4, c * h * w).prop_map(move |data| Act2Tensor::new(c, h, w, data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn pack_unpack_round_trip(a in act2_strategy()) {
            let p = pack_activations(&a);
            prop_assert_eq!(unpack_activations(&p, a.channels()).unwrap(), a.clone());
            // every code decomposes as 2·hi + lo and pad lanes are empty
            for c in 0..p.padded_channels() {
                for y in 0..a.height() {
                    for x in 0..a.width() {
                        let h = (p.hi_at(y, x)[c / 64] >> (c % 64)) & 1;
                        let l = (p.lo_at(y, x)[c / 64] >> (c % 64)) & 1;
                        let want = if c < a.channels() { a.get(c, y, x) as u64 } else { 0 };
                        prop_assert_eq!(2 * h + l, want);
                    }
                }
            }
        }
    }
}
