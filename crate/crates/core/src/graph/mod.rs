//! Network description: typed edges, nodes, and validation.
//!
//! A [`GraphDef`] is an ordered list of nodes wired by named edges. Every
//! edge has a declared kind, and integer accumulator edges additionally
//! carry how they are scaled and the largest magnitude they can reach.

mod build;
mod exec;
mod stats;

pub use build::{build_model, ArchConfig, BlockKind, GraphBuilder, Shortcut, Variant};
pub use exec::{execute, EdgeValue, Engine, ExecOptions, ExecTrace, KernelPath, NodeOps};
pub use stats::{conv_stats, graph_stats, model_stats, LayerStats, ModelStats, THRESHOLD_RECORD_BYTES};

use crate::error::{shape_err, Error, Result};
use crate::kernels::ConvSpec;
use crate::tensor::LANES;

pub type EdgeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EdgeKind {
    Image,
    Act2,
    IntAcc,
    Logits,
}

/// How an accumulator edge relates to real-valued feature maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccScale {
    /// Real value is `c · acc` for the model's shared constant `c`.
    Shared,
    /// Real value is `alpha[o] · acc` with the producing conv's own scales.
    PerChannel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edge {
    pub name: String,
    pub kind: EdgeKind,
    pub channels: usize,
    /// Set on `IntAcc` edges.
    pub scale: Option<AccScale>,
    /// Bound on |acc| for `IntAcc` edges, 0 otherwise.
    pub acc_bound: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    PixelEmbed { k: usize, bits: u32, input: EdgeId, output: EdgeId },
    Conv { name: String, spec: ConvSpec, const_scaled: bool, input: EdgeId, output: EdgeId },
    BnAct { name: String, channels: usize, input: EdgeId, output: EdgeId },
    ResidualAdd { lhs: EdgeId, rhs: EdgeId, output: EdgeId },
    FinalConv { name: String, spec: ConvSpec, input: EdgeId, output: EdgeId },
    AvgPoolScale { input: EdgeId, output: EdgeId },
}

impl Node {
    pub fn inputs(&self) -> Vec<EdgeId> {
        match self {
            Node::ResidualAdd { lhs, rhs, .. } => vec![*lhs, *rhs],
            Node::PixelEmbed { input, .. }
            | Node::Conv { input, .. }
            | Node::BnAct { input, .. }
            | Node::FinalConv { input, .. }
            | Node::AvgPoolScale { input, .. } => vec![*input],
        }
    }

    pub fn output(&self) -> EdgeId {
        match self {
            Node::PixelEmbed { output, .. }
            | Node::Conv { output, .. }
            | Node::BnAct { output, .. }
            | Node::ResidualAdd { output, .. }
            | Node::FinalConv { output, .. }
            | Node::AvgPoolScale { output, .. } => *output,
        }
    }

    /// Name of the parameterised layer, if this node has one.
    pub fn layer_name(&self) -> Option<&str> {
        match self {
            Node::Conv { name, .. } | Node::BnAct { name, .. } | Node::FinalConv { name, .. } => Some(name),
            _ => None,
        }
    }

    pub fn conv_spec(&self) -> Option<&ConvSpec> {
        match self {
            Node::Conv { spec, .. } | Node::FinalConv { spec, .. } => Some(spec),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphDef {
    config: ArchConfig,
    thermo_k: usize,
    edges: Vec<Edge>,
    nodes: Vec<Node>,
}

impl GraphDef {
    /// Assembles a graph from parts and validates it.
    pub fn from_parts(config: ArchConfig, thermo_k: usize, edges: Vec<Edge>, nodes: Vec<Node>) -> Result<Self> {
        let g = Self { config, thermo_k, edges, nodes };
        g.validate()?;
        Ok(g)
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn thermo_k(&self) -> usize {
        self.thermo_k
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, id: EdgeId) -> &Edge {
        &self.edges[id]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Node that writes `edge`, if any.
    pub fn producer(&self, edge: EdgeId) -> Option<usize> {
        self.nodes.iter().position(|n| n.output() == edge)
    }

    /// Parameterised layers in execution order.
    pub fn layers(&self) -> impl Iterator<Item = (usize, &Node)> {
        self.nodes.iter().enumerate().filter(|(_, n)| n.layer_name().is_some())
    }

    /// Smallest input side length: the product of strides along the trunk.
    pub fn min_input(&self) -> usize {
        self.config.total_stride()
    }

    /// Checks edge kinds, channel counts, scaling and ordering rules.
    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(Error::Config(msg));
        if self.edges.is_empty() || self.edges[0].kind != EdgeKind::Image {
            return invalid("edge 0 must be the input image".into());
        }
        let mut produced = vec![false; self.edges.len()];
        produced[0] = true;
        let n = self.nodes.len();
        for (idx, node) in self.nodes.iter().enumerate() {
            for &e in &node.inputs() {
                if e >= self.edges.len() || !produced[e] {
                    return invalid(format!("node {idx} reads edge {e} before it is produced"));
                }
            }
            let out = node.output();
            if out >= self.edges.len() || produced[out] {
                return invalid(format!("node {idx} writes edge {out} which is invalid or already written"));
            }
            produced[out] = true;
            let kind = |e: EdgeId| self.edges[e].kind;
            let chans = |e: EdgeId| self.edges[e].channels;
            let expect = |e: EdgeId, k: EdgeKind, what: &str| -> Result<()> {
                if kind(e) != k {
                    return Err(Error::Config(format!(
                        "node {idx} ({what}): edge `{}` is {:?}, expected {k:?}",
                        self.edges[e].name,
                        kind(e)
                    )));
                }
                Ok(())
            };
            match node {
                Node::PixelEmbed { k, bits, input, output } => {
                    if idx != 0 {
                        return invalid("pixel embedding must be the first node".into());
                    }
                    if *k != self.thermo_k || *bits != crate::quant::ACT_BITS {
                        return invalid(format!("pixel embedding k={k} l={bits} disagrees with graph"));
                    }
                    expect(*input, EdgeKind::Image, "embed")?;
                    expect(*output, EdgeKind::Act2, "embed")?;
                    if chans(*output) != 3 * k {
                        return invalid(format!("pixel embedding must emit {} channels", 3 * k));
                    }
                }
                Node::Conv { name, spec, const_scaled, input, output } => {
                    spec.validate()?;
                    expect(*input, EdgeKind::Act2, name)?;
                    expect(*output, EdgeKind::IntAcc, name)?;
                    if chans(*input) != spec.in_ch || chans(*output) != spec.out_ch {
                        return invalid(format!("conv `{name}` channel counts disagree with its edges"));
                    }
                    if !spec.out_ch.is_multiple_of(LANES) {
                        return invalid(format!(
                            "conv `{name}` has {} output channels; hidden convs need a multiple of 64",
                            spec.out_ch
                        ));
                    }
                    let want = if *const_scaled { AccScale::Shared } else { AccScale::PerChannel };
                    if self.edges[*output].scale != Some(want) {
                        return invalid(format!("conv `{name}` output scale does not match its const flag"));
                    }
                    if self.edges[*output].acc_bound != spec.acc_bound() {
                        return invalid(format!("conv `{name}` output bound is not 3·fan_in"));
                    }
                }
                Node::BnAct { name, channels, input, output } => {
                    expect(*input, EdgeKind::IntAcc, name)?;
                    expect(*output, EdgeKind::Act2, name)?;
                    if chans(*input) != *channels || chans(*output) != *channels {
                        return invalid(format!("bn-act `{name}` channel counts disagree with its edges"));
                    }
                }
                Node::ResidualAdd { lhs, rhs, output } => {
                    for e in [*lhs, *rhs, *output] {
                        expect(e, EdgeKind::IntAcc, "residual add")?;
                    }
                    for e in [*lhs, *rhs] {
                        if self.edges[e].scale != Some(AccScale::Shared) {
                            return invalid(format!(
                                "residual add input `{}` is not scaled by the shared constant",
                                self.edges[e].name
                            ));
                        }
                    }
                    if chans(*lhs) != chans(*rhs) || chans(*lhs) != chans(*output) {
                        return invalid("residual add channel mismatch".into());
                    }
                    let o = &self.edges[*output];
                    if o.scale != Some(AccScale::Shared)
                        || o.acc_bound != self.edges[*lhs].acc_bound + self.edges[*rhs].acc_bound
                    {
                        return invalid(format!("residual add output `{}` has wrong scale or bound", o.name));
                    }
                }
                Node::FinalConv { name, spec, input, output } => {
                    spec.validate()?;
                    expect(*input, EdgeKind::Act2, name)?;
                    expect(*output, EdgeKind::IntAcc, name)?;
                    if chans(*input) != spec.in_ch || chans(*output) != spec.out_ch {
                        return invalid(format!("final conv `{name}` channel counts disagree with its edges"));
                    }
                    if idx + 2 != n {
                        return invalid("final conv must be the second-to-last node".into());
                    }
                }
                Node::AvgPoolScale { input, output } => {
                    expect(*output, EdgeKind::Logits, "avgpool")?;
                    let from_final =
                        self.producer(*input).is_some_and(|p| matches!(self.nodes[p], Node::FinalConv { .. }));
                    if !from_final {
                        return invalid("average pooling may only consume the final conv".into());
                    }
                    if idx + 1 != n {
                        return invalid("average pooling must be the last node".into());
                    }
                }
            }
        }
        if !matches!(self.nodes.last(), Some(Node::AvgPoolScale { .. })) {
            return invalid("graph must end with average pooling".into());
        }
        if let Some(e) = self.edges.iter().find(|e| e.acc_bound > i64::from(i32::MAX)) {
            return invalid(format!("accumulator bound of `{}` overflows 32 bits", e.name));
        }
        Ok(())
    }

    /// `(channels, height, width)` of every edge for an `h`×`w` input.
    pub fn infer_shapes(&self, h: usize, w: usize) -> Result<Vec<(usize, usize, usize)>> {
        let min = self.min_input();
        if h < min || w < min {
            return Err(shape_err(format!("input {h}x{w} smaller than the minimum {min}x{min}")));
        }
        let mut shapes = vec![(0, 0, 0); self.edges.len()];
        shapes[0] = (3, h, w);
        for node in &self.nodes {
            let (_, ih, iw) = shapes[node.inputs()[0]];
            let out = match node {
                Node::PixelEmbed { k, .. } => (3 * k, ih, iw),
                Node::Conv { spec, .. } | Node::FinalConv { spec, .. } => {
                    let (oh, ow) = spec.output_dims(ih, iw)?;
                    (spec.out_ch, oh, ow)
                }
                Node::BnAct { channels, .. } => (*channels, ih, iw),
                Node::ResidualAdd { lhs, rhs, .. } => {
                    if shapes[*lhs] != shapes[*rhs] {
                        return Err(shape_err(format!("residual add of {:?} and {:?}", shapes[*lhs], shapes[*rhs])));
                    }
                    shapes[*lhs]
                }
                Node::AvgPoolScale { input, .. } => (self.edges[*input].channels, 1, 1),
            };
            shapes[node.output()] = out;
        }
        Ok(shapes)
    }
}
