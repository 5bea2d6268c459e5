//! Float checkpoints: a JSON manifest plus one raw little-endian `f32`
//! blob per conv layer.

use std::collections::BTreeMap;
use std::fs;
use std::io::ErrorKind;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_model, ArchConfig, GraphDef, Node, Variant};
use crate::quant::{ActParams, BnParams};
use crate::tensor::FloatTensor;

pub const MANIFEST_FORMAT: &str = "ern-checkpoint";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    BnAct,
    FinalConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub name: String,
    pub kind: LayerKind,
    /// `[out, in, kh, kw]` for convs, `[channels]` for bn-act layers.
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blob: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bn: Option<BnParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub act: Option<ActParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub arch: String,
    /// Full layout; required when `arch` is `custom`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch_config: Option<ArchConfig>,
    pub thermo_k: usize,
    /// The constant every const-scaled conv was trained with.
    pub shared_const: f64,
    pub layers: Vec<LayerRecord>,
}

impl CheckpointManifest {
    pub fn arch_config(&self) -> Result<ArchConfig> {
        let variant: Variant = self.arch.parse()?;
        match (&self.arch_config, variant) {
            (Some(cfg), _) if cfg.variant == variant => Ok(cfg.clone()),
            (Some(cfg), _) => Err(Error::Config(format!(
                "manifest arch `{}` disagrees with arch_config variant `{}`",
                self.arch, cfg.variant
            ))),
            (None, Variant::Custom) => Err(Error::Config("custom architecture needs arch_config".into())),
            (None, v) => ArchConfig::preset(v),
        }
    }

    /// Builds the graph and checks the layer list against it exactly.
    pub fn graph(&self) -> Result<GraphDef> {
        if self.format != MANIFEST_FORMAT {
            return Err(Error::Config(format!("not an ERN checkpoint manifest (format `{}`)", self.format)));
        }
        if self.version != MANIFEST_VERSION {
            return Err(Error::Config(format!("unsupported manifest version {}", self.version)));
        }
        if !(self.shared_const.is_finite() && self.shared_const > 0.0) {
            return Err(Error::Config(format!("shared constant must be positive, got {}", self.shared_const)));
        }
        let g = build_model(&self.arch_config()?, self.thermo_k)?;
        let expected: Vec<_> = g.layers().map(|(_, n)| expected_record(n)).collect();
        if expected.len() != self.layers.len() {
            return Err(Error::Config(format!(
                "manifest lists {} layers, `{}` has {}",
                self.layers.len(),
                self.arch,
                expected.len()
            )));
        }
        for (got, (name, kind, shape)) in self.layers.iter().zip(expected) {
            let fail = |reason: String| Err(Error::Compile { layer: got.name.clone(), reason });
            if got.name != name {
                return fail(format!("expected layer `{name}` at this position"));
            }
            if got.kind != kind {
                return fail(format!("expected kind {kind:?}, found {:?}", got.kind));
            }
            if got.shape != shape {
                return fail(format!("shape {:?} does not match architecture shape {shape:?}", got.shape));
            }
        }
        Ok(g)
    }
}

fn expected_record(n: &Node) -> (String, LayerKind, Vec<usize>) {
    match n {
        Node::Conv { name, spec, .. } => {
            (name.clone(), LayerKind::Conv, vec![spec.out_ch, spec.in_ch, spec.kh, spec.kw])
        }
        Node::FinalConv { name, spec, .. } => {
            (name.clone(), LayerKind::FinalConv, vec![spec.out_ch, spec.in_ch, spec.kh, spec.kw])
        }
        Node::BnAct { name, channels, .. } => (name.clone(), LayerKind::BnAct, vec![*channels]),
        _ => unreachable!("only parameterised nodes"),
    }
}

/// A manifest together with its weight blobs, keyed by layer name.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub blobs: BTreeMap<String, Vec<f32>>,
}

impl Checkpoint {
    /// Reads `manifest.json` from `dir` and the blobs it references.
    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self> {
        Self::open(dir.as_ref().join(MANIFEST_FILE))
    }

    /// Reads a manifest, given either its path or the directory holding it.
    /// Blob paths resolve against the manifest's directory. Blobs that do
    /// not exist are left out; compiling such a checkpoint names the layer.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let mut path = path.as_ref().to_path_buf();
        if path.is_dir() {
            path.push(MANIFEST_FILE);
        }
        let dir = path.parent().unwrap_or(Path::new("."));
        let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(&path)?)?;
        let mut blobs = BTreeMap::new();
        for layer in &manifest.layers {
            let Some(rel) = &layer.blob else { continue };
            let bytes = match fs::read(dir.join(rel)) {
                Ok(b) => b,
                Err(e) if e.kind() == ErrorKind::NotFound => continue,
                Err(e) => return Err(e.into()),
            };
            if bytes.len() % 4 != 0 {
                return Err(Error::Compile {
                    layer: layer.name.clone(),
                    reason: format!("blob `{rel}` length {} is not a multiple of 4", bytes.len()),
                });
            }
            let values = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            blobs.insert(layer.name.clone(), values);
        }
        Ok(Self { manifest, blobs })
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut json = serde_json::to_vec_pretty(&self.manifest)?;
        json.push(b'\n');
        fs::write(dir.join(MANIFEST_FILE), json)?;
        for layer in &self.manifest.layers {
            if let (Some(rel), Some(values)) = (&layer.blob, self.blobs.get(&layer.name)) {
                let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
                fs::write(dir.join(rel), bytes)?;
            }
        }
        Ok(())
    }

    /// Float weights of a conv layer, widened to `f64`.
    pub fn weights(&self, layer: &LayerRecord) -> Result<FloatTensor> {
        let err = |reason: String| Error::Compile { layer: layer.name.clone(), reason };
        let values = self
            .blobs
            .get(&layer.name)
            .ok_or_else(|| err(format!("missing weight blob `{}`", layer.blob.as_deref().unwrap_or("<none>"))))?;
        let want: usize = layer.shape.iter().product();
        if values.len() != want {
            return Err(err(format!("blob has {} values, shape {:?} needs {want}", values.len(), layer.shape)));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(err(format!("non-finite weight at index {pos}")));
        }
        FloatTensor::new(layer.shape.clone(), values.iter().map(|&v| f64::from(v)).collect())
            .map_err(|e| err(e.to_string()))
    }
}

/// Seeded synthetic checkpoint: weights ~ N(0, 0.05), γ ∈ [0.5, 1.5],
/// β ∈ [−0.2, 0.2], μ ∈ [−1, 1], σ² ∈ [0.5, 2], ε = 1e−5, s_a ∈ [0.5, 2].
pub fn gen_random_checkpoint(cfg: &ArchConfig, thermo_k: usize, shared_const: f64, seed: u64) -> Result<Checkpoint> {
    let graph = build_model(cfg, thermo_k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 0.05).expect("valid std");
    let mut layers = Vec::new();
    let mut blobs = BTreeMap::new();
    for (_, node) in graph.layers() {
        let (name, kind, shape) = expected_record(node);
        let mut rec = LayerRecord { name: name.clone(), kind, shape: shape.clone(), blob: None, bn: None, act: None };
        match kind {
            LayerKind::Conv | LayerKind::FinalConv => {
                let n: usize = shape.iter().product();
                blobs.insert(name.clone(), (0..n).map(|_| normal.sample(&mut rng)).collect());
                rec.blob = Some(format!("{name}.f32"));
            }
            LayerKind::BnAct => {
                let c = shape[0];
                let mut draw = |lo: f64, hi: f64| (0..c).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
                let gamma = draw(0.5, 1.5);
                let beta = draw(-0.2, 0.2);
                let mean = draw(-1.0, 1.0);
                let var = draw(0.5, 2.0);
                rec.bn = Some(BnParams { gamma, beta, mean, var, eps: 1e-5 });
                rec.act = Some(ActParams::per_layer(rng.random_range(0.5..2.0)));
            }
        }
        layers.push(rec);
    }
    let manifest = CheckpointManifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        arch: cfg.variant.to_string(),
        arch_config: (cfg.variant == Variant::Custom).then(|| cfg.clone()),
        thermo_k,
        shared_const,
        layers,
    };
    Ok(Checkpoint { manifest, blobs })
}
