//! Folds a float checkpoint into an integer-only [`CompiledModel`].
//!
//! Every conv is sign-binarized. Const-scaled convs take the shared
//! constant `c` as their scale, the others the per-output-channel mean
//! absolute weight. Each bn-act layer is then folded, together with the
//! scale of whatever produced its input, into a [`ThresholdTable`]. Only
//! the classifier keeps real-valued scales.

mod format;
mod manifest;

pub use format::{load, serialize, FORMAT_VERSION, MAGIC};
pub use manifest::{
    gen_random_checkpoint, Checkpoint, CheckpointManifest, LayerKind, LayerRecord, MANIFEST_FILE, MANIFEST_FORMAT,
    MANIFEST_VERSION,
};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{AccScale, GraphDef, Node};
use crate::quant::{binarize_weights, fuse_thresholds, ActParams, BnParams, ThresholdTable};
use crate::tensor::{pack_weights, PackedWeights, SignTensor};

/// Parameters attached to a graph node.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerData {
    Conv(PackedWeights),
    Thresholds(ThresholdTable),
}

/// A validated graph with packed weights and threshold tables.
///
/// Hidden convs carry unit scales: their real scales live in the
/// thresholds of the layer that consumes them.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledModel {
    graph: GraphDef,
    shared_const: f64,
    params: Vec<Option<LayerData>>,
}

impl CompiledModel {
    pub fn new(graph: GraphDef, shared_const: f64, params: Vec<Option<LayerData>>) -> Result<Self> {
        graph.validate()?;
        if params.len() != graph.nodes().len() {
            return Err(Error::Config("one parameter slot per node required".into()));
        }
        if !(shared_const.is_finite() && shared_const > 0.0) {
            return Err(Error::Config(format!("shared constant must be positive, got {shared_const}")));
        }
        for (node, p) in graph.nodes().iter().zip(&params) {
            let name = node.layer_name().unwrap_or("<unnamed>");
            let bad = |m: &str| Err(Error::Compile { layer: name.to_string(), reason: m.to_string() });
            match (node, p) {
                (Node::Conv { spec, const_scaled, .. }, Some(LayerData::Conv(w))) => {
                    if w.shape() != (spec.out_ch, spec.in_ch, spec.kh, spec.kw) || w.const_scaled() != *const_scaled {
                        return bad("packed weights do not match the conv");
                    }
                }
                (Node::FinalConv { spec, .. }, Some(LayerData::Conv(w))) => {
                    if w.shape() != (spec.out_ch, spec.in_ch, spec.kh, spec.kw) {
                        return bad("packed weights do not match the classifier");
                    }
                }
                (Node::BnAct { channels, .. }, Some(LayerData::Thresholds(t))) => {
                    if t.len() != *channels {
                        return bad("threshold table width does not match the layer");
                    }
                }
                (Node::Conv { .. } | Node::FinalConv { .. } | Node::BnAct { .. }, _) => {
                    return bad("missing or mistyped layer parameters");
                }
                (_, None) => {}
                (_, Some(_)) => return bad("unexpected parameters on a parameter-free node"),
            }
        }
        Ok(Self { graph, shared_const, params })
    }

    pub fn graph(&self) -> &GraphDef {
        &self.graph
    }

    pub fn shared_const(&self) -> f64 {
        self.shared_const
    }

    pub fn params(&self) -> &[Option<LayerData>] {
        &self.params
    }

    pub fn weights(&self, node: usize) -> Option<&PackedWeights> {
        match self.params.get(node)? {
            Some(LayerData::Conv(w)) => Some(w),
            _ => None,
        }
    }

    pub fn thresholds(&self, node: usize) -> Option<&ThresholdTable> {
        match self.params.get(node)? {
            Some(LayerData::Thresholds(t)) => Some(t),
            _ => None,
        }
    }

    /// Threshold table of the named bn-act layer, for inspection and fault injection.
    pub fn thresholds_by_name_mut(&mut self, name: &str) -> Option<&mut ThresholdTable> {
        let idx = self.graph.nodes().iter().position(|n| n.layer_name() == Some(name))?;
        match self.params.get_mut(idx)? {
            Some(LayerData::Thresholds(t)) => Some(t),
            _ => None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serialize(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        load(bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompileWarning {
    pub layer: String,
    pub message: String,
}

impl std::fmt::Display for CompileWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "layer `{}`: {}", self.layer, self.message)
    }
}

#[derive(Debug, Clone)]
pub struct Compilation {
    pub model: CompiledModel,
    pub warnings: Vec<CompileWarning>,
    /// Scale each conv was folded with, by layer name.
    pub conv_alphas: BTreeMap<String, Vec<f64>>,
}

/// Per-node view of a checkpoint after binarization and scale resolution;
/// shared by the compiler and the float oracle.
#[derive(Debug, Clone)]
pub enum ResolvedLayer {
    Conv { signs: SignTensor, alpha: Vec<f64>, const_scaled: bool },
    BnAct { bn: BnParams, act: ActParams, input_alpha: Vec<f64>, acc_bound: i64 },
}

#[derive(Debug, Clone)]
pub struct ResolvedCheckpoint {
    pub graph: GraphDef,
    pub shared_const: f64,
    pub layers: Vec<Option<ResolvedLayer>>,
    pub warnings: Vec<CompileWarning>,
}

/// Binarizes convs, assigns scales and validates bn/act parameters.
///
/// `shared_const` overrides the manifest constant. Batch-norm statistics of
/// layers reading shared-scale accumulators are re-expressed for the new
/// constant (`μ·r`, `σ²·r²`, `ε·r²` with `r = c_new / c_manifest`) so the
/// network computes the same function.
pub fn resolve(ckpt: &Checkpoint, shared_const: Option<f64>) -> Result<ResolvedCheckpoint> {
    let m = &ckpt.manifest;
    let graph = m.graph()?;
    let c = shared_const.unwrap_or(m.shared_const);
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::Config(format!("shared constant must be positive, got {c}")));
    }
    let ratio = c / m.shared_const;
    let records: BTreeMap<&str, &LayerRecord> = m.layers.iter().map(|r| (r.name.as_str(), r)).collect();
    let mut layers: Vec<Option<ResolvedLayer>> = vec![None; graph.nodes().len()];
    let mut warnings = Vec::new();

    for (idx, node) in graph.nodes().iter().enumerate() {
        let Some(name) = node.layer_name() else { continue };
        let rec = records[name];
        let wrap = |e: Error| match e {
            Error::Compile { .. } => e,
            other => Error::Compile { layer: name.to_string(), reason: other.to_string() },
        };
        layers[idx] = Some(match node {
            Node::Conv { const_scaled: true, .. } => {
                let (signs, _) = binarize_weights(&ckpt.weights(rec)?).map_err(wrap)?;
                let alpha = vec![c; signs.out_ch()];
                ResolvedLayer::Conv { signs, alpha, const_scaled: true }
            }
            Node::Conv { .. } | Node::FinalConv { .. } => {
                let (signs, mut alpha) = binarize_weights(&ckpt.weights(rec)?).map_err(wrap)?;
                for (o, a) in alpha.iter_mut().enumerate() {
                    if *a == 0.0 {
                        *a = 1.0;
                        let w = CompileWarning {
                            layer: name.to_string(),
                            message: format!("output channel {o} has an all-zero filter; using scale 1"),
                        };
                        log::warn!("{w}");
                        warnings.push(w);
                    }
                }
                ResolvedLayer::Conv { signs, alpha, const_scaled: false }
            }
            Node::BnAct { channels, input, .. } => {
                let missing =
                    |what: &str| Error::Compile { layer: name.to_string(), reason: format!("missing {what}") };
                let mut bn = rec.bn.clone().ok_or_else(|| missing("batch-norm parameters"))?;
                let act = rec.act.clone().ok_or_else(|| missing("activation parameters"))?;
                bn.validate().map_err(wrap)?;
                act.validate(*channels).map_err(wrap)?;
                if bn.channels() != *channels {
                    return Err(wrap(Error::Shape(format!("{} batch-norm channels for {channels}", bn.channels()))));
                }
                let edge = graph.edge(*input);
                let input_alpha = match edge.scale {
                    Some(AccScale::Shared) => {
                        if ratio != 1.0 {
                            bn.mean.iter_mut().for_each(|v| *v *= ratio);
                            bn.var.iter_mut().for_each(|v| *v *= ratio * ratio);
                            bn.eps *= ratio * ratio;
                        }
                        vec![c; *channels]
                    }
                    _ => {
                        let producer = graph.producer(*input).expect("validated graph");
                        match &layers[producer] {
                            Some(ResolvedLayer::Conv { alpha, .. }) => alpha.clone(),
                            _ => unreachable!("per-channel accumulators come from convs"),
                        }
                    }
                };
                ResolvedLayer::BnAct { bn, act, input_alpha, acc_bound: edge.acc_bound }
            }
            _ => unreachable!("only parameterised nodes"),
        });
    }
    Ok(ResolvedCheckpoint { graph, shared_const: c, layers, warnings })
}

/// Compiles a checkpoint; `shared_const` overrides the manifest constant.
pub fn compile(ckpt: &Checkpoint, shared_const: Option<f64>) -> Result<Compilation> {
    let resolved = resolve(ckpt, shared_const)?;
    let mut conv_alphas = BTreeMap::new();
    let mut params = Vec::with_capacity(resolved.layers.len());
    for (node, layer) in resolved.graph.nodes().iter().zip(&resolved.layers) {
        let name = node.layer_name().unwrap_or_default();
        let wrap = |e: Error| Error::Compile { layer: name.to_string(), reason: e.to_string() };
        params.push(match layer {
            None => None,
            Some(ResolvedLayer::Conv { signs, alpha, const_scaled }) => {
                conv_alphas.insert(name.to_string(), alpha.clone());
                let stored = match node {
                    Node::FinalConv { .. } => alpha.clone(),
                    _ => vec![1.0; alpha.len()],
                };
                Some(LayerData::Conv(pack_weights(signs, stored, *const_scaled).map_err(wrap)?))
            }
            Some(ResolvedLayer::BnAct { bn, act, input_alpha, acc_bound }) => {
                let table = (0..bn.channels())
                    .map(|ch| fuse_thresholds(input_alpha[ch], &bn.channel(ch), act.channel(ch), *acc_bound))
                    .collect::<Result<Vec<_>>>()
                    .map_err(wrap)?;
                Some(LayerData::Thresholds(ThresholdTable::new(table).map_err(wrap)?))
            }
        });
    }
    let model = CompiledModel::new(resolved.graph, resolved.shared_const, params)?;
    Ok(Compilation { model, warnings: resolved.warnings, conv_alphas })
}
