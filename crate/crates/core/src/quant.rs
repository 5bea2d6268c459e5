//! Weight binarization, the 2-bit activation quantizer, and folding of
//! (scale ∘ batch-norm ∘ activation) into integer threshold tables.

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Result};
use crate::tensor::{Act2Tensor, FloatTensor, IntAccTensor, SignTensor, MAX_CODE};

/// Activation bit width used throughout the network.
pub const ACT_BITS: u32 = 2;

/// Relative distance to a quantization boundary below which the float and
/// integer paths are allowed to disagree.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// Per-layer batch-norm parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

/// Batch-norm parameters of a single channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BnChannel {
    pub gamma: f64,
    pub beta: f64,
    pub mean: f64,
    pub var: f64,
    pub eps: f64,
}

impl BnParams {
    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if c == 0 || self.beta.len() != c || self.mean.len() != c || self.var.len() != c {
            return Err(shape_err("batch-norm vectors must be non-empty and of equal length"));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(domain_err(format!("batch-norm epsilon must be positive, got {}", self.eps)));
        }
        let all = self.gamma.iter().chain(&self.beta).chain(&self.mean).chain(&self.var);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(domain_err("non-finite batch-norm parameter"));
        }
        if let Some(v) = self.var.iter().find(|v| **v < 0.0) {
            return Err(domain_err(format!("negative running variance {v}")));
        }
        Ok(())
    }

    pub fn channel(&self, c: usize) -> BnChannel {
        BnChannel { gamma: self.gamma[c], beta: self.beta[c], mean: self.mean[c], var: self.var[c], eps: self.eps }
    }
}

impl BnChannel {
    /// `γ·(x − μ)/sqrt(σ² + ε) + β`, evaluated in that order.
    pub fn apply(&self, x: f64) -> f64 {
        self.gamma * (x - self.mean) / (self.var + self.eps).sqrt() + self.beta
    }
}

/// Activation quantizer settings: an input scale per layer, or per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActParams {
    pub scale: ActScale,
    #[serde(default = "default_bits")]
    pub bits: u32,
}

fn default_bits() -> u32 {
    ACT_BITS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ActScale {
    PerLayer(f64),
    PerChannel(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActChannel {
    pub scale: f64,
    pub bits: u32,
}

impl ActParams {
    pub fn per_layer(scale: f64) -> Self {
        Self { scale: ActScale::PerLayer(scale), bits: ACT_BITS }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.bits != ACT_BITS {
            return Err(domain_err(format!("only 2-bit activations are supported, got {}", self.bits)));
        }
        let scales: &[f64] = match &self.scale {
            ActScale::PerLayer(s) => std::slice::from_ref(s),
            ActScale::PerChannel(v) => {
                if v.len() != channels {
                    return Err(shape_err(format!("{} activation scales for {channels} channels", v.len())));
                }
                v
            }
        };
        if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(domain_err(format!("activation scale must be positive, got {s}")));
        }
        Ok(())
    }

    pub fn channel(&self, c: usize) -> ActChannel {
        let scale = match &self.scale {
            ActScale::PerLayer(s) => *s,
            ActScale::PerChannel(v) => v[c],
        };
        ActChannel { scale, bits: self.bits }
    }
}

/// Sign-binarizes each output filter and returns its mean absolute value.
///
/// `sign(0) = +1`. An all-zero filter yields `alpha = 0`; callers that need
/// a positive scale must substitute one.
pub fn binarize_weights(w: &FloatTensor) -> Result<(SignTensor, Vec<f64>)> {
    let &[oc, ic, kh, kw] = w.shape() else {
        return Err(shape_err(format!("weights must be 4-d, got {:?}", w.shape())));
    };
    let per_filter = ic * kh * kw;
    let signs = w.data().iter().map(|&v| if v >= 0.0 { 1 } else { -1 }).collect();
    let alpha =
        w.data().chunks_exact(per_filter).map(|f| f.iter().map(|v| v.abs()).sum::<f64>() / per_filter as f64).collect();
    Ok((SignTensor::new(oc, ic, kh, kw, signs)?, alpha))
}

/// `clamp(floor(v / s_a), 0, 2^l − 1)`.
pub fn quantize_act_float(v: f64, act: ActChannel) -> u8 {
    let max = f64::from((1u32 << act.bits) - 1);
    (v / act.scale).floor().clamp(0.0, max) as u8
}

/// Whether `v / s_a` is within [`TIE_TOLERANCE`] of an integer.
pub fn is_boundary_tie(v: f64, act: ActChannel) -> bool {
    let r = v / act.scale;
    (r - r.round()).abs() < TIE_TOLERANCE
}

/// Fused activation for one channel, evaluated on integer accumulators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChannelThresholds {
    /// Code is `#{ j : acc ≥ t_j }`.
    Ascending([i64; 3]),
    /// Code is `#{ j : acc ≤ t_j }`.
    Descending([i64; 3]),
    /// Scale collapsed to zero; every accumulator maps to the same code.
    Constant(u8),
}

impl ChannelThresholds {
    #[inline]
    pub fn apply(&self, acc: i32) -> u8 {
        let acc = i64::from(acc);
        match self {
            Self::Ascending(t) => t.iter().filter(|&&t| acc >= t).count() as u8,
            Self::Descending(t) => t.iter().filter(|&&t| acc <= t).count() as u8,
            Self::Constant(code) => *code,
        }
    }

    /// The three thresholds in non-decreasing order (constant channels
    /// report their code three times).
    pub fn thresholds(&self) -> [i64; 3] {
        match *self {
            Self::Ascending(t) | Self::Descending(t) => t,
            Self::Constant(c) => [i64::from(c); 3],
        }
    }
}

/// Folds `alpha`, batch norm and the quantizer into integer thresholds.
///
/// The pre-activation is affine in the accumulator, `v = A·acc + B` with
/// `A = γ·α/sqrt(σ²+ε)` and `B = β − γ·μ/sqrt(σ²+ε)`. Code `u` is reached
/// when `A·acc + B ≥ u·s_a`. Thresholds beyond `±acc_bound` are clamped to
/// `±(acc_bound + 1)`, which preserves the outcome for every reachable
/// accumulator.
pub fn fuse_thresholds(alpha: f64, bn: &BnChannel, act: ActChannel, acc_bound: i64) -> Result<ChannelThresholds> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(domain_err(format!("scaling factor must be positive, got {alpha}")));
    }
    if !(act.scale.is_finite() && act.scale > 0.0) {
        return Err(domain_err(format!("activation scale must be positive, got {}", act.scale)));
    }
    if act.bits != ACT_BITS {
        return Err(domain_err(format!("only 2-bit activations are supported, got {}", act.bits)));
    }
    let denom = (bn.var + bn.eps).sqrt();
    let slope = bn.gamma * alpha / denom;
    let intercept = bn.beta - bn.gamma * bn.mean / denom;
    if slope == 0.0 {
        return Ok(ChannelThresholds::Constant(quantize_act_float(intercept, act)));
    }
    let limit = (acc_bound + 1) as f64;
    let mut t = [0i64; 3];
    for (u, slot) in t.iter_mut().enumerate() {
        let edge = ((u + 1) as f64 * act.scale - intercept) / slope;
        let rounded = if slope > 0.0 { edge.ceil() } else { edge.floor() };
        *slot = rounded.clamp(-limit, limit) as i64;
    }
    if slope > 0.0 {
        Ok(ChannelThresholds::Ascending(t))
    } else {
        t.reverse();
        Ok(ChannelThresholds::Descending(t))
    }
}

/// Per-channel threshold tables for one fused activation layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThresholdTable {
    channels: Vec<ChannelThresholds>,
}

impl ThresholdTable {
    pub fn new(channels: Vec<ChannelThresholds>) -> Result<Self> {
        for (c, ch) in channels.iter().enumerate() {
            match ch {
                ChannelThresholds::Ascending(t) | ChannelThresholds::Descending(t) => {
                    if !(t[0] <= t[1] && t[1] <= t[2]) {
                        return Err(domain_err(format!("channel {c}: thresholds {t:?} not ordered")));
                    }
                }
                ChannelThresholds::Constant(code) if *code > MAX_CODE => {
                    return Err(domain_err(format!("channel {c}: constant code {code} exceeds 3")));
                }
                ChannelThresholds::Constant(_) => {}
            }
        }
        Ok(Self { channels })
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn channels(&self) -> &[ChannelThresholds] {
        &self.channels
    }

    pub fn channels_mut(&mut self) -> &mut [ChannelThresholds] {
        &mut self.channels
    }
}

pub fn apply_thresholds(acc: &IntAccTensor, tbl: &ThresholdTable) -> Result<Act2Tensor> {
    let (c, h, w) = acc.shape();
    if tbl.len() != c {
        return Err(shape_err(format!("{} threshold channels for {c} accumulator channels", tbl.len())));
    }
    let mut data = Vec::with_capacity(c * h * w);
    for (ch, t) in tbl.channels().iter().enumerate() {
        data.extend(acc.channel(ch).iter().map(|&a| t.apply(a)));
    }
    Act2Tensor::new(c, h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_bn(gamma: f64) -> BnChannel {
        BnChannel { gamma, beta: 0.0, mean: 0.0, var: 1.0, eps: 0.0 }
    }

    fn act(scale: f64) -> ActChannel {
        ActChannel { scale, bits: 2 }
    }

    #[test]
    fn binarize_example() {
        let w = FloatTensor::new(vec![1, 4, 1, 1], vec![0.5, -0.25, 0.25, -1.0]).unwrap();
        let (s, a) = binarize_weights(&w).unwrap();
        assert_eq!(s.as_slice(), &[1, -1, 1, -1]);
        assert_eq!(a, vec![0.5]);
    }

    #[test]
    fn binarize_zero_and_single() {
        let w = FloatTensor::new(vec![1, 3, 1, 1], vec![0.0; 3]).unwrap();
        let (s, a) = binarize_weights(&w).unwrap();
        assert_eq!(s.as_slice(), &[1, 1, 1]);
        assert_eq!(a, vec![0.0]);
        let w = FloatTensor::new(vec![1, 1, 1, 1], vec![-3.0]).unwrap();
        let (s, a) = binarize_weights(&w).unwrap();
        assert_eq!((s.as_slice(), a), (&[-1i8][..], vec![3.0]));
        // sign(-0.0) follows x >= 0
        let w = FloatTensor::new(vec![1, 1, 1, 1], vec![-0.0]).unwrap();
        assert_eq!(binarize_weights(&w).unwrap().0.as_slice(), &[1]);
    }

    #[test]
    fn binarize_per_output_channel() {
        let w = FloatTensor::new(vec![2, 2, 1, 1], vec![1.0, -3.0, 0.5, 0.5]).unwrap();
        let (_, a) = binarize_weights(&w).unwrap();
        assert_eq!(a, vec![2.0, 0.5]);
    }

    /// Exhaustive search over sign patterns and a fine scalar grid.
    #[test]
    fn binarization_minimizes_l2_error() {
        let filters: [&[f64]; 3] = [&[0.3, -0.9, 0.1], &[-0.2, -0.4, 0.8, 0.05], &[1.0, 0.0, -0.5, 0.25, -0.75]];
        for f in filters {
            let n = f.len();
            let w = FloatTensor::new(vec![1, n, 1, 1], f.to_vec()).unwrap();
            let (s, a) = binarize_weights(&w).unwrap();
            let err = |alpha: f64, signs: &dyn Fn(usize) -> f64| -> f64 {
                (0..n).map(|i| (f[i] - alpha * signs(i)).powi(2)).sum()
            };
            let ours = err(a[0], &|i| f64::from(s.as_slice()[i]));
            let mut best = f64::INFINITY;
            for pattern in 0u32..(1 << n) {
                let sg = |i: usize| if pattern >> i & 1 == 1 { 1.0 } else { -1.0 };
                for step in 0..=2000 {
                    best = best.min(err(step as f64 * 0.001, &sg));
                }
            }
            assert!(ours <= best + 1e-12, "ours {ours} best {best}");
        }
    }

    #[test]
    fn quantizer_examples() {
        assert_eq!(quantize_act_float(2.5, act(1.0)), 2);
        assert_eq!(quantize_act_float(-7.0, act(1.0)), 0);
        assert_eq!(quantize_act_float(-7.0, act(0.3)), 0);
        assert_eq!(quantize_act_float(9.9, act(1.0)), 3);
        assert_eq!(quantize_act_float(1.0, act(0.5)), 2);
    }

    #[test]
    fn fuse_ascending_example() {
        let t = fuse_thresholds(0.5, &unit_bn(1.0), act(1.0), 100).unwrap();
        assert_eq!(t, ChannelThresholds::Ascending([2, 4, 6]));
        assert_eq!(t.apply(3), 1);
        assert_eq!(quantize_act_float(unit_bn(1.0).apply(0.5 * 3.0), act(1.0)), 1);
    }

    #[test]
    fn fuse_descending_example() {
        let bn = unit_bn(-1.0);
        let t = fuse_thresholds(0.5, &bn, act(1.0), 100).unwrap();
        assert_eq!(t, ChannelThresholds::Descending([-6, -4, -2]));
        assert_eq!(t.apply(-5), 2);
        assert_eq!(quantize_act_float(bn.apply(0.5 * -5.0), act(1.0)), 2);
    }

    #[test]
    fn fuse_degenerate_channel() {
        let bn = BnChannel { gamma: 0.0, beta: 3.7, mean: 0.4, var: 1.0, eps: 1e-5 };
        let t = fuse_thresholds(0.7, &bn, act(1.0), 100).unwrap();
        assert_eq!(t, ChannelThresholds::Constant(3));
        assert_eq!(t.apply(-100), 3);
    }

    #[test]
    fn fuse_rejects_bad_scales() {
        assert!(fuse_thresholds(0.0, &unit_bn(1.0), act(1.0), 10).is_err());
        assert!(fuse_thresholds(-1.0, &unit_bn(1.0), act(1.0), 10).is_err());
        assert!(fuse_thresholds(1.0, &unit_bn(1.0), act(0.0), 10).is_err());
    }

    #[test]
    fn far_thresholds_clamp_to_sentinels() {
        // A tiny slope pushes every edge far outside the reachable range
        let bn = BnChannel { gamma: 1e-6, beta: -0.5, mean: 0.0, var: 1.0, eps: 0.0 };
        let t = fuse_thresholds(1.0, &bn, act(1.0), 27).unwrap();
        assert_eq!(t, ChannelThresholds::Ascending([28, 28, 28]));
        assert!((-27..=27).all(|a| t.apply(a) == 0));
        let bn = BnChannel { beta: 10.0, ..bn };
        let t = fuse_thresholds(1.0, &bn, act(1.0), 27).unwrap();
        assert!((-27..=27).all(|a| t.apply(a) == 3));
    }

    #[test]
    fn apply_examples() {
        let tbl = ThresholdTable::new(vec![
            ChannelThresholds::Ascending([2, 4, 6]),
            ChannelThresholds::Constant(0),
            ChannelThresholds::Descending([-6, -4, -2]),
        ])
        .unwrap();
        let acc = IntAccTensor::new(3, 1, 5, vec![1, 2, 5, 6, 100, 1, 2, 5, 6, 100, -4, -7, -6, -2, 0]).unwrap();
        let out = apply_thresholds(&acc, &tbl).unwrap();
        assert_eq!(out.channel(0), &[0, 1, 2, 3, 3]);
        assert_eq!(out.channel(1), &[0; 5]);
        assert_eq!(out.channel(2), &[2, 3, 3, 1, 0]);
        let short = IntAccTensor::zeros(2, 1, 1).unwrap();
        assert!(matches!(apply_thresholds(&short, &tbl), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn table_rejects_unordered() {
        assert!(ThresholdTable::new(vec![ChannelThresholds::Ascending([3, 2, 4])]).is_err());
        assert!(ThresholdTable::new(vec![ChannelThresholds::Constant(4)]).is_err());
    }

    #[test]
    fn act_params_json_forms() {
        let a: ActParams = serde_json::from_str(r#"{"scale": 1.5}"#).unwrap();
        assert_eq!(a, ActParams::per_layer(1.5));
        let a: ActParams = serde_json::from_str(r#"{"scale": [1.0, 2.0], "bits": 2}"#).unwrap();
        assert_eq!(a.channel(1).scale, 2.0);
        assert!(a.validate(3).is_err());
        assert!(a.validate(2).is_ok());
    }

    proptest! {
        #[test]
        fn fused_path_matches_float_path(
            alpha in 1e-3f64..2.0,
            gamma in prop_oneof![-3.0f64..-0.01, 0.01f64..3.0],
            beta in -3.0f64..3.0,
            mean in -20.0f64..20.0,
            var in 0.01f64..10.0,
            scale in 0.1f64..3.0,
            fan_in in 1i64..200,
        ) {
            let bn = BnChannel { gamma, beta, mean, var, eps: 1e-5 };
            let a = act(scale);
            let bound = 3 * fan_in;
            let t = fuse_thresholds(alpha, &bn, a, bound).unwrap();
            let mut prev = None;
            for acc in -bound..=bound {
                let v = bn.apply(alpha * acc as f64);
                let got = t.apply(acc as i32);
                if got != quantize_act_float(v, a) {
                    prop_assert!(is_boundary_tie(v, a), "acc {acc}: v/s = {}", v / scale);
                }
                // monotone in the table's direction
                if let Some(p) = prev {
                    if gamma > 0.0 { prop_assert!(got >= p) } else { prop_assert!(got <= p) }
                }
                prev = Some(got);
            }
        }
    }
}
