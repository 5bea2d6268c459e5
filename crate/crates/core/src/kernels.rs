//! Integer convolution, residual addition and the pooled output head.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::par::{self, Parallelism};
use crate::tensor::{Act2Tensor, IntAccTensor, PackedPlanes, PackedWeights, SignTensor, MAX_CODE};

/// Geometry of a binary-weight convolution. Padding inserts activation code 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvSpec {
    /// Square kernel with "same" padding `k / 2`.
    pub fn square(in_ch: usize, out_ch: usize, k: usize, stride: usize) -> Self {
        Self { in_ch, out_ch, kh: k, kw: k, stride: (stride, stride), padding: (k / 2, k / 2) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_ch == 0 || self.out_ch == 0 || self.kh == 0 || self.kw == 0 {
            return Err(shape_err(format!("conv has an empty dimension: {self:?}")));
        }
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(shape_err(format!("conv stride must be >= 1: {self:?}")));
        }
        Ok(())
    }

    pub fn fan_in(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    /// Largest possible |accumulator|: every code 3, every sign aligned.
    pub fn acc_bound(&self) -> i64 {
        i64::from(MAX_CODE) * self.fan_in() as i64
    }

    pub fn output_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let span_h = height + 2 * self.padding.0;
        let span_w = width + 2 * self.padding.1;
        if span_h < self.kh || span_w < self.kw {
            return Err(shape_err(format!(
                "{height}x{width} input too small for {}x{} kernel with padding {:?}",
                self.kh, self.kw, self.padding
            )));
        }
        Ok(((span_h - self.kh) / self.stride.0 + 1, (span_w - self.kw) / self.stride.1 + 1))
    }

    /// Input coordinate of output position `o` at tap `t` along one axis.
    #[inline]
    fn source(o: usize, t: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
        let pos = (o * stride + t).checked_sub(pad)?;
        (pos < len).then_some(pos)
    }
}

fn check_weights(spec: &ConvSpec, out_ch: usize, in_ch: usize, kh: usize, kw: usize) -> Result<()> {
    spec.validate()?;
    if (out_ch, in_ch, kh, kw) != (spec.out_ch, spec.in_ch, spec.kh, spec.kw) {
        return Err(shape_err(format!("weights ({out_ch}, {in_ch}, {kh}, {kw}) do not match conv {spec:?}")));
    }
    Ok(())
}

/// Direct ±1 × code convolution; the reference for the popcount path.
pub fn conv_w1a2_naive(x: &Act2Tensor, w: &SignTensor, spec: &ConvSpec) -> Result<IntAccTensor> {
    conv_w1a2_naive_with(x, w, spec, Parallelism::default())
}

pub fn conv_w1a2_naive_with(
    x: &Act2Tensor,
    w: &SignTensor,
    spec: &ConvSpec,
    policy: Parallelism,
) -> Result<IntAccTensor> {
    let (oc, ic, kh, kw) = w.shape();
    check_weights(spec, oc, ic, kh, kw)?;
    if x.channels() != spec.in_ch {
        return Err(shape_err(format!("conv expects {} input channels, got {}", spec.in_ch, x.channels())));
    }
    let (h, wd) = (x.height(), x.width());
    let (oh, ow) = spec.output_dims(h, wd)?;
    let mut out = vec![0i32; oc * oh * ow];
    par::for_each_chunk(&mut out, oh * ow, policy, |o, plane| {
        for c in 0..ic {
            let src = x.channel(c);
            for i in 0..kh {
                for j in 0..kw {
                    let sign = i32::from(w.get(o, c, i, j));
                    for oy in 0..oh {
                        let Some(iy) = ConvSpec::source(oy, i, spec.stride.0, spec.padding.0, h) else {
                            continue;
                        };
                        let row = &src[iy * wd..(iy + 1) * wd];
                        for ox in 0..ow {
                            if let Some(ix) = ConvSpec::source(ox, j, spec.stride.1, spec.padding.1, wd) {
                                plane[oy * ow + ox] += sign * i32::from(row[ix]);
                            }
                        }
                    }
                }
            }
        }
    });
    IntAccTensor::new(oc, oh, ow, out)
}

/// Bitplane convolution: per 64-lane word, a ±1 dot product with a binary
/// plane is `2·popcount(w & p) − popcount(p)`, and a 2-bit code is
/// `2·hi + lo`. The `popcount(p)` terms depend only on the input, so they
/// are summed once per output position and shared by all output channels.
pub fn conv_w1a2_popcount(x: &PackedPlanes, w: &PackedWeights, spec: &ConvSpec) -> Result<IntAccTensor> {
    conv_w1a2_popcount_with(x, w, spec, Parallelism::default())
}

pub fn conv_w1a2_popcount_with(
    x: &PackedPlanes,
    w: &PackedWeights,
    spec: &ConvSpec,
    policy: Parallelism,
) -> Result<IntAccTensor> {
    let (oc, ic, kh, kw) = w.shape();
    check_weights(spec, oc, ic, kh, kw)?;
    if x.channels() != spec.in_ch || x.words() != w.words() {
        return Err(shape_err(format!(
            "conv expects {} input channels ({} words), got {} ({} words)",
            spec.in_ch,
            w.words(),
            x.channels(),
            x.words()
        )));
    }
    let (h, wd) = (x.height(), x.width());
    let (oh, ow) = spec.output_dims(h, wd)?;
    let words = x.words();

    // Σ codes at each input pixel, then over each output window.
    let pixel_sum: Vec<i32> = x
        .hi()
        .chunks_exact(words)
        .zip(x.lo().chunks_exact(words))
        .map(|(hi, lo)| hi.iter().zip(lo).map(|(h, l)| 2 * h.count_ones() as i32 + l.count_ones() as i32).sum())
        .collect();
    let mut window_sum = vec![0i32; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut s = 0;
            for i in 0..kh {
                let Some(iy) = ConvSpec::source(oy, i, spec.stride.0, spec.padding.0, h) else { continue };
                for j in 0..kw {
                    if let Some(ix) = ConvSpec::source(ox, j, spec.stride.1, spec.padding.1, wd) {
                        s += pixel_sum[iy * wd + ix];
                    }
                }
            }
            window_sum[oy * ow + ox] = s;
        }
    }

    let mut out = vec![0i32; oc * oh * ow];
    par::for_each_chunk(&mut out, oh * ow, policy, |o, plane| {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut dot = 0u32;
                for i in 0..kh {
                    let Some(iy) = ConvSpec::source(oy, i, spec.stride.0, spec.padding.0, h) else { continue };
                    for j in 0..kw {
                        let Some(ix) = ConvSpec::source(ox, j, spec.stride.1, spec.padding.1, wd) else {
                            continue;
                        };
                        let wt = w.tap(o, i, j);
                        let hi = x.hi_at(iy, ix);
                        let lo = x.lo_at(iy, ix);
                        for ((wb, hb), lb) in wt.iter().zip(hi).zip(lo) {
                            dot += 2 * (wb & hb).count_ones() + (wb & lb).count_ones();
                        }
                    }
                }
                plane[oy * ow + ox] = 2 * dot as i32 - window_sum[oy * ow + ox];
            }
        }
    });
    IntAccTensor::new(oc, oh, ow, out)
}

/// Elementwise integer sum of two equally scaled accumulator maps.
pub fn residual_add(a: &IntAccTensor, b: &IntAccTensor) -> Result<IntAccTensor> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!("residual add of {:?} and {:?}", a.shape(), b.shape())));
    }
    let (c, h, w) = a.shape();
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| {
            debug_assert!(x.checked_add(y).is_some(), "accumulator overflow in residual add");
            x.wrapping_add(y)
        })
        .collect();
    IntAccTensor::new(c, h, w, data)
}

/// Global average pool followed by the per-channel output scale.
///
/// Sums stay integral; each logit costs one division and one multiply.
pub fn avgpool_and_scale(acc: &IntAccTensor, alpha: &[f64]) -> Result<Vec<f64>> {
    let (c, h, w) = acc.shape();
    if alpha.len() != c {
        return Err(shape_err(format!("{} output scales for {c} channels", alpha.len())));
    }
    let n = (h * w) as f64;
    Ok((0..c)
        .map(|ch| {
            let sum: i64 = acc.channel(ch).iter().map(|&v| i64::from(v)).sum();
            alpha[ch] * (sum as f64 / n)
        })
        .collect())
}
