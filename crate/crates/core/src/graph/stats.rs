use serde::Serialize;

use super::{build_model, ArchConfig, GraphDef, Node};
use crate::error::Result;
use crate::kernels::ConvSpec;
use crate::tensor::padded_channels;

/// Bytes per stored threshold channel: three i64 thresholds plus two flag bytes.
pub const THRESHOLD_RECORD_BYTES: u64 = 3 * 8 + 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerStats {
    pub params: u64,
    pub macs: u64,
    /// Output elements.
    pub activations: u64,
    pub out_height: usize,
    pub out_width: usize,
}

pub fn conv_stats(spec: &ConvSpec, height: usize, width: usize) -> Result<LayerStats> {
    spec.validate()?;
    let (oh, ow) = spec.output_dims(height, width)?;
    let params = (spec.out_ch * spec.fan_in()) as u64;
    let out = (spec.out_ch * oh * ow) as u64;
    Ok(LayerStats { params, macs: out * spec.fan_in() as u64, activations: out, out_height: oh, out_width: ow })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelStats {
    pub arch: String,
    pub resolution: usize,
    pub conv_layers: usize,
    pub param_count: u64,
    /// `ceil(params / 8)` over logical channels.
    pub binary_weight_bytes: u64,
    /// Bytes of packed words, with input and classifier lanes padded to 64.
    pub padded_weight_bytes: u64,
    pub threshold_bytes: u64,
    pub macs: u64,
    pub activations: u64,
    pub final_layer_params: u64,
    pub final_layer_bytes: u64,
}

impl ModelStats {
    pub fn binary_weight_mib(&self) -> f64 {
        self.binary_weight_bytes as f64 / (1024.0 * 1024.0)
    }
}

pub fn model_stats(cfg: &ArchConfig, thermo_k: usize, resolution: usize) -> Result<ModelStats> {
    graph_stats(&build_model(cfg, thermo_k)?, resolution)
}

pub fn graph_stats(g: &GraphDef, resolution: usize) -> Result<ModelStats> {
    let shapes = g.infer_shapes(resolution, resolution)?;
    let mut s = ModelStats {
        arch: g.config().variant.to_string(),
        resolution,
        conv_layers: 0,
        param_count: 0,
        binary_weight_bytes: 0,
        padded_weight_bytes: 0,
        threshold_bytes: 0,
        macs: 0,
        activations: 0,
        final_layer_params: 0,
        final_layer_bytes: 0,
    };
    for node in g.nodes() {
        match node {
            Node::Conv { spec, input, .. } | Node::FinalConv { spec, input, .. } => {
                let (_, h, w) = shapes[*input];
                let l = conv_stats(spec, h, w)?;
                s.conv_layers += 1;
                s.param_count += l.params;
                s.macs += l.macs;
                s.activations += l.activations;
                let padded = padded_channels(spec.out_ch) * padded_channels(spec.in_ch) * spec.kh * spec.kw;
                s.padded_weight_bytes += padded as u64 / 8;
                if matches!(node, Node::FinalConv { .. }) {
                    s.final_layer_params = l.params;
                    s.final_layer_bytes = l.params.div_ceil(8);
                }
            }
            Node::BnAct { channels, .. } => s.threshold_bytes += *channels as u64 * THRESHOLD_RECORD_BYTES,
            _ => {}
        }
    }
    s.binary_weight_bytes = s.param_count.div_ceil(8);
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_stem_macs() {
        let l = conv_stats(&ConvSpec::square(3, 64, 7, 2), 224, 224).unwrap();
        assert_eq!(l.macs, 7 * 7 * 3 * 64 * 112 * 112);
        assert_eq!(l.macs, 118_013_952);
        let l = conv_stats(&ConvSpec::square(30, 64, 7, 2), 224, 224).unwrap();
        assert_eq!(l.macs, 1_180_139_520);
    }

    #[test]
    fn final_layer_bytes() {
        let s = model_stats(&ArchConfig::by_name("erns18").unwrap(), 10, 256).unwrap();
        assert_eq!((s.final_layer_params, s.final_layer_bytes), (512_000, 64_000));
        let s = model_stats(&ArchConfig::by_name("erns50").unwrap(), 10, 256).unwrap();
        assert_eq!((s.final_layer_params, s.final_layer_bytes), (2_048_000, 256_000));
        assert_eq!(format!("{:.3}", 64_000.0 / 1048576.0), "0.061");
        assert_eq!(format!("{:.3}", 256_000.0 / 1048576.0), "0.244");
    }

    /// Hand count for erns18x075: stem, three 64..256 stages, a 384-wide
    /// last stage, and the 384x1000 classifier.
    #[test]
    fn erns18x075_param_count() {
        let stem = 30 * 64 * 9 + 3 * 64 * 64 * 9;
        let stage1 = 4 * 64 * 64 * 9;
        let stage2 = 64 * 128 * 9 + 3 * 128 * 128 * 9 + 64 * 128;
        let stage3 = 128 * 256 * 9 + 3 * 256 * 256 * 9 + 128 * 256;
        let stage4 = 256 * 384 * 9 + 3 * 384 * 384 * 9 + 256 * 384;
        let want = (stem + stage1 + stage2 + stage3 + stage4 + 384 * 1000) as u64;
        let s = model_stats(&ArchConfig::by_name("erns18x075").unwrap(), 10, 256).unwrap();
        assert_eq!(s.param_count, want);
        assert_eq!(s.binary_weight_bytes, want.div_ceil(8));
    }

    #[test]
    fn padded_bytes_cover_classifier_lanes() {
        let s = model_stats(&ArchConfig::by_name("erns18").unwrap(), 10, 256).unwrap();
        // the 30-channel stem input and 1000-class head are the only padded layers
        let extra = (64 - 30) * 64 * 9 + 24 * 512;
        assert_eq!(s.padded_weight_bytes * 8, s.param_count + extra as u64);
    }

    #[test]
    fn macs_scale_with_resolution() {
        let cfg = ArchConfig::by_name("erns18").unwrap();
        let a = model_stats(&cfg, 10, 256).unwrap();
        let c = model_stats(&cfg, 10, 512).unwrap();
        assert_eq!(c.macs, 4 * a.macs);
        assert_eq!(c.activations, 4 * a.activations);
    }
}
