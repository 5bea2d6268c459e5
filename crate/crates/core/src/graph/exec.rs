//! Integer-only executor for compiled models.
//!
//! Between the pixel embedding and the classifier conv every value is a
//! 2-bit code or a 32-bit accumulator. Each node reports the integer and
//! floating-point operations it performed so callers can audit that claim.

use super::{EdgeKind, Node};
use crate::compiler::CompiledModel;
use crate::error::{shape_err, Result};
use crate::kernels::{self, conv_w1a2_naive_with, conv_w1a2_popcount_with};
use crate::par::Parallelism;
use crate::pixembed::{encode_image, thermo_params, Image, ThermoParams};
use crate::quant::{apply_thresholds, ACT_BITS};
use crate::tensor::{pack_activations, Act2Tensor, IntAccTensor, PackedPlanes, SignTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelPath {
    Naive,
    #[default]
    Popcount,
}

impl std::str::FromStr for KernelPath {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(KernelPath::Naive),
            "popcount" => Ok(KernelPath::Popcount),
            _ => Err(crate::Error::Config(format!("unknown kernel `{s}` (naive|popcount)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ExecOptions {
    pub kernel: KernelPath,
    pub parallelism: Parallelism,
}

/// Value carried by an edge during execution.
#[derive(Debug, Clone)]
pub enum EdgeValue {
    Image(Image),
    Act2 { codes: Act2Tensor, packed: Option<PackedPlanes> },
    IntAcc(IntAccTensor),
    Logits(Vec<f64>),
}

impl EdgeValue {
    pub fn as_act2(&self) -> Option<&Act2Tensor> {
        match self {
            EdgeValue::Act2 { codes, .. } => Some(codes),
            _ => None,
        }
    }

    pub fn as_acc(&self) -> Option<&IntAccTensor> {
        match self {
            EdgeValue::IntAcc(a) => Some(a),
            _ => None,
        }
    }
}

/// Operation counts for one executed node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct NodeOps {
    pub node: usize,
    pub int_ops: u64,
    pub float_ops: u64,
}

#[derive(Debug, Clone)]
pub struct ExecTrace {
    /// Value of every edge, indexed by edge id.
    pub values: Vec<Option<EdgeValue>>,
    pub ops: Vec<NodeOps>,
    pub logits: Vec<f64>,
}

impl ExecTrace {
    /// Floating-point operations performed by nodes after the pixel
    /// embedding, up to and including the classifier conv.
    pub fn float_ops_between_embed_and_final(&self, model: &CompiledModel) -> u64 {
        let nodes = model.graph().nodes();
        self.ops
            .iter()
            .filter(|o| !matches!(nodes[o.node], Node::PixelEmbed { .. } | Node::AvgPoolScale { .. }))
            .map(|o| o.float_ops)
            .sum()
    }

    pub fn int_ops(&self) -> u64 {
        self.ops.iter().map(|o| o.int_ops).sum()
    }
}

/// A compiled model bound to a kernel path; reusable across inferences.
#[derive(Debug)]
pub struct Engine<'m> {
    model: &'m CompiledModel,
    opts: ExecOptions,
    thermo: ThermoParams,
    /// Unpacked ±1 weights per node, for the naive path only.
    signs: Vec<Option<SignTensor>>,
    /// Index of the last node reading each edge.
    last_use: Vec<usize>,
}

impl<'m> Engine<'m> {
    pub fn new(model: &'m CompiledModel, opts: ExecOptions) -> Result<Self> {
        let g = model.graph();
        let thermo = thermo_params(g.thermo_k(), ACT_BITS)?;
        let signs = g
            .nodes()
            .iter()
            .enumerate()
            .map(|(i, _)| match opts.kernel {
                KernelPath::Naive => model.weights(i).map(|w| w.unpack()),
                KernelPath::Popcount => None,
            })
            .collect();
        let mut last_use = vec![0; g.edges().len()];
        for (i, n) in g.nodes().iter().enumerate() {
            for e in n.inputs() {
                last_use[e] = i;
            }
        }
        Ok(Self { model, opts, thermo, signs, last_use })
    }

    pub fn options(&self) -> ExecOptions {
        self.opts
    }

    pub fn run(&self, img: &Image) -> Result<Vec<f64>> {
        Ok(self.run_inner(img, false)?.logits)
    }

    /// Runs and keeps every intermediate edge value.
    pub fn run_traced(&self, img: &Image) -> Result<ExecTrace> {
        self.run_inner(img, true)
    }

    fn act2(&self, codes: Act2Tensor) -> EdgeValue {
        let packed = (self.opts.kernel == KernelPath::Popcount).then(|| pack_activations(&codes));
        EdgeValue::Act2 { codes, packed }
    }

    fn run_inner(&self, img: &Image, keep: bool) -> Result<ExecTrace> {
        let g = self.model.graph();
        let min = g.min_input();
        if img.height() < min || img.width() < min {
            return Err(shape_err(format!(
                "input {}x{} is smaller than the model minimum {min}x{min}",
                img.height(),
                img.width()
            )));
        }
        let mut values: Vec<Option<EdgeValue>> = vec![None; g.edges().len()];
        values[0] = Some(EdgeValue::Image(img.clone()));
        let mut ops = Vec::with_capacity(g.nodes().len());
        let policy = self.opts.parallelism;

        for (idx, node) in g.nodes().iter().enumerate() {
            let get = |e: usize| values[e].as_ref().expect("edge value present in topological order");
            let mut count = NodeOps { node: idx, ..Default::default() };
            let out = match node {
                Node::PixelEmbed { input, .. } => {
                    let EdgeValue::Image(im) = get(*input) else { unreachable!("validated edge kind") };
                    let codes = encode_image(im, &self.thermo)?;
                    count.int_ops = codes.as_slice().len() as u64;
                    self.act2(codes)
                }
                Node::Conv { spec, input, .. } | Node::FinalConv { spec, input, .. } => {
                    let EdgeValue::Act2 { codes, packed } = get(*input) else { unreachable!("validated edge kind") };
                    let w = self.model.weights(idx).expect("conv weights");
                    let acc = match self.opts.kernel {
                        KernelPath::Naive => {
                            conv_w1a2_naive_with(codes, self.signs[idx].as_ref().expect("unpacked"), spec, policy)?
                        }
                        KernelPath::Popcount => {
                            conv_w1a2_popcount_with(packed.as_ref().expect("packed"), w, spec, policy)?
                        }
                    };
                    count.int_ops = acc.as_slice().len() as u64 * spec.fan_in() as u64;
                    EdgeValue::IntAcc(acc)
                }
                Node::BnAct { input, .. } => {
                    let acc = get(*input).as_acc().expect("validated edge kind");
                    let codes = apply_thresholds(acc, self.model.thresholds(idx).expect("thresholds"))?;
                    count.int_ops = 3 * codes.as_slice().len() as u64;
                    self.act2(codes)
                }
                Node::ResidualAdd { lhs, rhs, .. } => {
                    let a = get(*lhs).as_acc().expect("validated edge kind");
                    let b = get(*rhs).as_acc().expect("validated edge kind");
                    let sum = kernels::residual_add(a, b)?;
                    count.int_ops = sum.as_slice().len() as u64;
                    EdgeValue::IntAcc(sum)
                }
                Node::AvgPoolScale { input, .. } => {
                    let acc = get(*input).as_acc().expect("validated edge kind");
                    let producer = g.producer(*input).expect("pool input has a producer");
                    let alpha = self.model.weights(producer).expect("classifier weights").alpha();
                    let logits = kernels::avgpool_and_scale(acc, alpha)?;
                    count.int_ops = acc.as_slice().len() as u64;
                    count.float_ops = 2 * logits.len() as u64;
                    EdgeValue::Logits(logits)
                }
            };
            debug_assert_eq!(matches!(out, EdgeValue::Act2 { .. }), g.edge(node.output()).kind == EdgeKind::Act2);
            values[node.output()] = Some(out);
            ops.push(count);
            if !keep {
                for e in node.inputs() {
                    if self.last_use[e] == idx {
                        values[e] = None;
                    }
                }
            }
        }
        let out_edge = g.nodes().last().expect("non-empty graph").output();
        let logits = match &values[out_edge] {
            Some(EdgeValue::Logits(l)) => l.clone(),
            _ => unreachable!("graph ends in average pooling"),
        };
        Ok(ExecTrace { values, ops, logits })
    }
}

/// Runs `model` on `img` with the default (popcount, parallel) engine.
pub fn execute(model: &CompiledModel, img: &Image) -> Result<Vec<f64>> {
    Engine::new(model, ExecOptions::default())?.run(img)
}
