//! Reference executor in `f64`.
//!
//! The oracle evaluates the quantized network literally: each conv output
//! is `alpha · Σ w·x` as a real number, batch norm and the activation
//! quantizer run in floating point, residual adds sum real tensors, and the
//! average pool divides at the end. [`cross_check`] runs it in lockstep
//! with the integer [`Engine`] and reports where, if anywhere, they part.

use serde::Serialize;

use crate::compiler::{resolve, Checkpoint, CompiledModel, ResolvedLayer};
use crate::error::{shape_err, Result};
use crate::graph::{AccScale, EdgeValue, Engine, ExecOptions, GraphDef, Node};
use crate::pixembed::{encode_image, thermo_params, Image};
use crate::quant::{is_boundary_tie, quantize_act_float, ACT_BITS};
use crate::tensor::{Act2Tensor, SignTensor};

/// Relative tolerance on logits.
pub const LOGIT_REL_TOL: f64 = 1e-6;
/// Relative tolerance when comparing a real feature map with `scale · acc`.
pub const ACC_REL_TOL: f64 = 1e-9;

pub fn logits_close(a: f64, b: f64) -> bool {
    (a - b).abs() <= LOGIT_REL_TOL * a.abs().max(b.abs()) + 1e-12
}

/// A real-valued `(channels, height, width)` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct RealMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl RealMap {
    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

#[derive(Debug, Clone)]
enum Value {
    Codes(Act2Tensor),
    Real(RealMap),
    Logits(Vec<f64>),
}

/// Float model built from the same checkpoint as the compiled one.
#[derive(Debug, Clone)]
pub struct OracleModel {
    graph: GraphDef,
    shared_const: f64,
    layers: Vec<Option<ResolvedLayer>>,
}

impl OracleModel {
    /// `shared_const` overrides the manifest constant exactly as it does for
    /// the compiler.
    pub fn from_checkpoint(ckpt: &Checkpoint, shared_const: Option<f64>) -> Result<Self> {
        let r = resolve(ckpt, shared_const)?;
        Ok(Self { graph: r.graph, shared_const: r.shared_const, layers: r.layers })
    }

    pub fn graph(&self) -> &GraphDef {
        &self.graph
    }

    pub fn shared_const(&self) -> f64 {
        self.shared_const
    }

    fn conv_params(&self, idx: usize) -> (&SignTensor, &[f64]) {
        match &self.layers[idx] {
            Some(ResolvedLayer::Conv { signs, alpha, .. }) => (signs, alpha),
            _ => unreachable!("conv node has conv parameters"),
        }
    }

    /// Real scale of each channel of an accumulator edge.
    fn edge_scale(&self, edge: usize) -> Vec<f64> {
        let e = self.graph.edge(edge);
        match e.scale {
            Some(AccScale::Shared) => vec![self.shared_const; e.channels],
            _ => self.conv_params(self.graph.producer(edge).expect("conv output")).1.to_vec(),
        }
    }
}

/// `alpha[o] · Σ w·x`, with the sum formed directly in `f64`.
fn conv_real(x: &Act2Tensor, signs: &SignTensor, alpha: &[f64], node: &Node) -> RealMap {
    let spec = node.conv_spec().expect("conv node");
    let (oc, ic, kh, kw) = signs.shape();
    let (h, w) = (x.height() as isize, x.width() as isize);
    let (oh, ow) = spec.output_dims(x.height(), x.width()).expect("shapes checked up front");
    let mut data = vec![0.0; oc * oh * ow];
    for o in 0..oc {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut sum = 0.0f64;
                for c in 0..ic {
                    for i in 0..kh {
                        let y = (oy * spec.stride.0 + i) as isize - spec.padding.0 as isize;
                        if y < 0 || y >= h {
                            continue;
                        }
                        for j in 0..kw {
                            let xx = (ox * spec.stride.1 + j) as isize - spec.padding.1 as isize;
                            if xx < 0 || xx >= w {
                                continue;
                            }
                            let code = f64::from(x.get(c, y as usize, xx as usize));
                            sum += f64::from(signs.get(o, c, i, j)) * code;
                        }
                    }
                }
                data[(o * oh + oy) * ow + ox] = alpha[o] * sum;
            }
        }
    }
    RealMap { channels: oc, height: oh, width: ow, data }
}

fn bn_act_real(v: &RealMap, layer: &ResolvedLayer) -> (Act2Tensor, Vec<f64>) {
    let ResolvedLayer::BnAct { bn, act, .. } = layer else { unreachable!("bn-act parameters") };
    let mut pre = Vec::with_capacity(v.data.len());
    let codes = Act2Tensor::from_fn(v.channels, v.height, v.width, |c, y, x| {
        let z = bn.channel(c).apply(v.at(c, y, x));
        pre.push(z);
        quantize_act_float(z, act.channel(c))
    });
    (codes.expect("quantizer emits 2-bit codes"), pre)
}

fn avgpool_real(v: &RealMap) -> Vec<f64> {
    let n = (v.height * v.width) as f64;
    (0..v.channels)
        .map(|c| v.data[c * v.height * v.width..(c + 1) * v.height * v.width].iter().sum::<f64>() / n)
        .collect()
}

fn step(m: &OracleModel, idx: usize, values: &[Option<Value>], img: &Image) -> Result<Value> {
    let node = &m.graph.nodes()[idx];
    let get = |e: usize| values[e].as_ref().expect("topological order");
    Ok(match node {
        Node::PixelEmbed { k, .. } => Value::Codes(encode_image(img, &thermo_params(*k, ACT_BITS)?)?),
        Node::Conv { input, .. } | Node::FinalConv { input, .. } => {
            let Value::Codes(x) = get(*input) else { unreachable!("conv reads codes") };
            let (signs, alpha) = m.conv_params(idx);
            Value::Real(conv_real(x, signs, alpha, node))
        }
        Node::BnAct { input, .. } => {
            let Value::Real(v) = get(*input) else { unreachable!("bn-act reads reals") };
            Value::Codes(bn_act_real(v, m.layers[idx].as_ref().expect("bn-act")).0)
        }
        Node::ResidualAdd { lhs, rhs, .. } => {
            let (Value::Real(a), Value::Real(b)) = (get(*lhs), get(*rhs)) else { unreachable!("adds reals") };
            let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
            Value::Real(RealMap { data, ..a.clone() })
        }
        Node::AvgPoolScale { input, .. } => {
            let Value::Real(v) = get(*input) else { unreachable!("pools reals") };
            Value::Logits(avgpool_real(v))
        }
    })
}

fn check_size(g: &GraphDef, img: &Image) -> Result<()> {
    g.infer_shapes(img.height(), img.width()).map(|_| ())?;
    if img.channels() != 3 {
        return Err(shape_err(format!("expected an RGB image, got {} channels", img.channels())));
    }
    Ok(())
}

/// Logits plus the code map emitted by every bn-act layer.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutput {
    pub logits: Vec<f64>,
    pub codes: Vec<(String, Act2Tensor)>,
}

/// Free-running float inference.
pub fn oracle_execute(m: &OracleModel, img: &Image) -> Result<OracleOutput> {
    check_size(&m.graph, img)?;
    let mut values: Vec<Option<Value>> = vec![None; m.graph.edges().len()];
    let mut codes = Vec::new();
    for (idx, node) in m.graph.nodes().iter().enumerate() {
        let v = step(m, idx, &values, img)?;
        if let (Node::BnAct { name, .. }, Value::Codes(c)) = (node, &v) {
            codes.push((name.clone(), c.clone()));
        }
        values[node.output()] = Some(v);
    }
    match values[m.graph.nodes().last().expect("non-empty").output()].take() {
        Some(Value::Logits(logits)) => Ok(OracleOutput { logits, codes }),
        _ => unreachable!("graph ends in logits"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCheck {
    pub name: String,
    pub elements: u64,
    /// Codes that differ where the float pre-activation is not a tie.
    pub mismatches: u64,
    /// Codes that differ at a quantizer boundary tie; the engine's code is adopted.
    pub ties: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossCheckReport {
    pub layers: Vec<LayerCheck>,
    /// First bn-act layer with a non-tie code mismatch.
    pub first_divergence: Option<String>,
    /// Accumulator elements compared against the real feature map.
    pub acc_checks: u64,
    pub acc_failures: u64,
    /// First accumulator edge that failed, if any.
    pub first_acc_failure: Option<String>,
    pub engine_logits: Vec<f64>,
    pub oracle_logits: Vec<f64>,
    pub max_logit_rel_err: f64,
    pub logits_ok: bool,
    pub float_ops_in_trunk: u64,
}

impl CrossCheckReport {
    pub fn passed(&self) -> bool {
        self.first_divergence.is_none() && self.acc_failures == 0 && self.logits_ok && self.float_ops_in_trunk == 0
    }

    pub fn total_ties(&self) -> u64 {
        self.layers.iter().map(|l| l.ties).sum()
    }

    pub fn total_mismatches(&self) -> u64 {
        self.layers.iter().map(|l| l.mismatches).sum()
    }
}

/// Runs engine and oracle side by side on one image.
///
/// After each bn-act layer the oracle continues from the engine's codes, so
/// a mismatch is attributed to the layer that caused it rather than to
/// everything downstream.
pub fn cross_check(
    model: &CompiledModel,
    oracle: &OracleModel,
    img: &Image,
    opts: ExecOptions,
) -> Result<CrossCheckReport> {
    if model.graph() != oracle.graph() {
        return Err(crate::Error::Config("engine and oracle were built for different graphs".into()));
    }
    check_size(oracle.graph(), img)?;
    let trace = Engine::new(model, opts)?.run_traced(img)?;
    let g = oracle.graph();
    let mut values: Vec<Option<Value>> = vec![None; g.edges().len()];
    let mut report = CrossCheckReport {
        layers: Vec::new(),
        first_divergence: None,
        acc_checks: 0,
        acc_failures: 0,
        first_acc_failure: None,
        engine_logits: trace.logits.clone(),
        oracle_logits: Vec::new(),
        max_logit_rel_err: 0.0,
        logits_ok: false,
        float_ops_in_trunk: trace.float_ops_between_embed_and_final(model),
    };

    for (idx, node) in g.nodes().iter().enumerate() {
        let out = node.output();
        let engine = trace.values[out].as_ref().expect("traced run keeps every edge");
        let value = match (node, engine) {
            (Node::BnAct { name, input, .. }, EdgeValue::Act2 { codes: eng, .. }) => {
                let Some(Value::Real(v)) = &values[*input] else { unreachable!("bn-act reads reals") };
                let layer = oracle.layers[idx].as_ref().expect("bn-act");
                let ResolvedLayer::BnAct { act, .. } = layer else { unreachable!() };
                let (ours, pre) = bn_act_real(v, layer);
                let mut check = LayerCheck { name: name.clone(), elements: pre.len() as u64, mismatches: 0, ties: 0 };
                let plane = v.height * v.width;
                for (i, (a, b)) in ours.as_slice().iter().zip(eng.as_slice()).enumerate() {
                    if a != b {
                        if is_boundary_tie(pre[i], act.channel(i / plane)) {
                            check.ties += 1;
                        } else {
                            check.mismatches += 1;
                        }
                    }
                }
                if check.mismatches > 0 && report.first_divergence.is_none() {
                    report.first_divergence = Some(name.clone());
                }
                report.layers.push(check);
                Value::Codes(eng.clone())
            }
            (_, EdgeValue::IntAcc(acc)) => {
                let Value::Real(real) = step(oracle, idx, &values, img)? else { unreachable!("accumulator edge") };
                let scale = oracle.edge_scale(out);
                let plane = real.height * real.width;
                let bad = real
                    .data
                    .iter()
                    .zip(acc.as_slice())
                    .enumerate()
                    .filter(|(i, (r, a))| {
                        let want = scale[i / plane] * f64::from(**a);
                        (**r - want).abs() > ACC_REL_TOL * r.abs().max(1.0)
                    })
                    .count() as u64;
                report.acc_checks += real.data.len() as u64;
                report.acc_failures += bad;
                if bad > 0 && report.first_acc_failure.is_none() {
                    report.first_acc_failure = Some(g.edge(out).name.clone());
                }
                Value::Real(real)
            }
            _ => step(oracle, idx, &values, img)?,
        };
        values[out] = Some(value);
    }

    let Some(Value::Logits(ours)) = values[g.nodes().last().expect("non-empty").output()].take() else {
        unreachable!("graph ends in logits")
    };
    report.logits_ok =
        ours.len() == trace.logits.len() && ours.iter().zip(&trace.logits).all(|(a, b)| logits_close(*a, *b));
    report.max_logit_rel_err = ours
        .iter()
        .zip(&trace.logits)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    report.oracle_logits = ours;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logit_tolerance() {
        assert!(logits_close(1.0, 1.0 + 5e-7));
        assert!(!logits_close(1.0, 1.0 + 2e-6));
        assert!(logits_close(0.0, 1e-13));
    }

    #[test]
    fn real_conv_matches_hand_sum() {
        let x = Act2Tensor::new(1, 2, 2, vec![1, 2, 3, 0]).unwrap();
        let w = SignTensor::new(1, 1, 2, 2, vec![1, -1, 1, 1]).unwrap();
        let node = Node::Conv {
            name: "c".into(),
            spec: crate::kernels::ConvSpec { in_ch: 1, out_ch: 1, kh: 2, kw: 2, stride: (1, 1), padding: (0, 0) },
            const_scaled: false,
            input: 0,
            output: 1,
        };
        let r = conv_real(&x, &w, &[0.5], &node);
        assert_eq!(r.data, vec![0.5 * (1.0 - 2.0 + 3.0 + 0.0)]);
    }
}
