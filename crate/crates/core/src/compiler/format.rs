//! The `.ern` container.
//!
//! ```text
//! "ERN1" | u32 version | u64 body length | body | u32 crc32(body)
//! ```
//!
//! All integers are little-endian. The body holds the architecture header
//! followed by one record per parameterised layer in execution order.

use super::{CompiledModel, LayerData};
use crate::error::{Error, FormatError, Result};
use crate::graph::{build_model, ArchConfig, BlockKind, Node, Variant};
use crate::quant::{ChannelThresholds, ThresholdTable};
use crate::tensor::{PackedWeights, LANES};

pub const MAGIC: [u8; 4] = *b"ERN1";
pub const FORMAT_VERSION: u32 = 1;
const ENDIAN_TAG: u32 = 0x0102_0304;
const PREAMBLE: usize = 4 + 4 + 8;

const TAG_CONV: u8 = 1;
const TAG_BN_ACT: u8 = 2;
const TAG_FINAL: u8 = 3;

const DIR_ASCENDING: u8 = 0;
const DIR_DESCENDING: u8 = 1;

fn variant_id(v: Variant) -> u8 {
    match v {
        Variant::Erns18x075 => 0,
        Variant::Erns18 => 1,
        Variant::Erns34 => 2,
        Variant::Erns50 => 3,
        Variant::Erns101 => 4,
        Variant::Custom => 255,
    }
}

fn variant_from_id(id: u8) -> Option<Variant> {
    Some(match id {
        0 => Variant::Erns18x075,
        1 => Variant::Erns18,
        2 => Variant::Erns34,
        3 => Variant::Erns50,
        4 => Variant::Erns101,
        255 => Variant::Custom,
        _ => return None,
    })
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&u32::try_from(v).expect("dimension fits in u32").to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn name(&mut self, s: &str) {
        self.u16(u16::try_from(s.len()).expect("layer name fits in u16"));
        self.0.extend_from_slice(s.as_bytes());
    }
}

/// Encodes a compiled model as `.ern` bytes.
pub fn serialize(model: &CompiledModel) -> Vec<u8> {
    let g = model.graph();
    let cfg = g.config();
    let mut w = Writer(Vec::new());
    w.u8(variant_id(cfg.variant));
    w.u8(match cfg.block {
        BlockKind::ConvBlock => 0,
        BlockKind::Bottleneck => 1,
    });
    w.u8(u8::from(cfg.stride_on_conv1));
    w.u8(0);
    w.u32(cfg.stem_width);
    w.u32(cfg.stage_blocks.len());
    for (b, c) in cfg.stage_blocks.iter().zip(&cfg.stage_channels) {
        w.u32(*b);
        w.u32(*c);
    }
    w.u32(cfg.num_classes);
    w.u32(g.thermo_k());
    w.f64(model.shared_const());
    w.0.extend_from_slice(&ENDIAN_TAG.to_le_bytes());
    w.u32(g.layers().count());

    for (idx, node) in g.layers() {
        let name = node.layer_name().expect("layer");
        match (node, &model.params()[idx]) {
            (Node::Conv { spec, .. } | Node::FinalConv { spec, .. }, Some(LayerData::Conv(pw))) => {
                let fin = matches!(node, Node::FinalConv { .. });
                w.u8(if fin { TAG_FINAL } else { TAG_CONV });
                w.name(name);
                for d in [
                    spec.out_ch,
                    spec.in_ch,
                    spec.kh,
                    spec.kw,
                    spec.stride.0,
                    spec.stride.1,
                    spec.padding.0,
                    spec.padding.1,
                ] {
                    w.u32(d);
                }
                w.u8(u8::from(pw.const_scaled()));
                if fin {
                    pw.alpha().iter().for_each(|a| w.f64(*a));
                }
                w.u64(pw.bits().len() as u64);
                pw.bits().iter().for_each(|b| w.u64(*b));
            }
            (Node::BnAct { .. }, Some(LayerData::Thresholds(t))) => {
                w.u8(TAG_BN_ACT);
                w.name(name);
                w.u32(t.len());
                for ch in t.channels() {
                    let (dir, degenerate) = match ch {
                        ChannelThresholds::Ascending(_) => (DIR_ASCENDING, 0),
                        ChannelThresholds::Descending(_) => (DIR_DESCENDING, 0),
                        ChannelThresholds::Constant(_) => (DIR_ASCENDING, 1),
                    };
                    ch.thresholds().iter().for_each(|v| w.i64(*v));
                    w.u8(dir);
                    w.u8(degenerate);
                }
            }
            _ => unreachable!("validated model"),
        }
    }

    let body = w.0;
    let mut out = Vec::with_capacity(PREAMBLE + body.len() + 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated { needed: n as u64, available: available as u64 });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn arr<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }
    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.arr()?))
    }
    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.arr()?))
    }
    fn dim(&mut self) -> Result<usize, FormatError> {
        Ok(self.u32()? as usize)
    }
    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.arr()?))
    }
    fn i64(&mut self) -> Result<i64, FormatError> {
        Ok(i64::from_le_bytes(self.arr()?))
    }
    fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.arr()?))
    }
    fn name(&mut self) -> Result<String, FormatError> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| malformed("layer name is not UTF-8"))
    }
}

fn malformed(msg: impl Into<String>) -> FormatError {
    FormatError::Malformed(msg.into())
}

/// Decodes and validates `.ern` bytes.
pub fn load(bytes: &[u8]) -> Result<CompiledModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.arr()?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic).into());
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion { found: version, expected: FORMAT_VERSION }.into());
    }
    let body_len = r.u64()?;
    let available = (bytes.len() - PREAMBLE) as u64;
    if body_len.checked_add(4).is_none_or(|n| n > available) {
        return Err(FormatError::Truncated { needed: body_len.saturating_add(4), available }.into());
    }
    if body_len + 4 != available {
        return Err(malformed(format!("{} trailing bytes after checksum", available - body_len - 4)).into());
    }
    let body = r.take(body_len as usize)?;
    let stored = r.u32()?;
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(FormatError::ChecksumMismatch { stored, computed }.into());
    }
    let mut r = Reader { buf: body, pos: 0 };
    let model = decode_body(&mut r)?;
    if r.pos != body.len() {
        return Err(malformed(format!("{} unread bytes in body", body.len() - r.pos)).into());
    }
    Ok(model)
}

fn decode_body(r: &mut Reader<'_>) -> Result<CompiledModel> {
    let variant =
        r.u8().and_then(|id| variant_from_id(id).ok_or_else(|| malformed(format!("unknown architecture id {id}"))))?;
    let block = match r.u8()? {
        0 => BlockKind::ConvBlock,
        1 => BlockKind::Bottleneck,
        b => return Err(malformed(format!("unknown block kind {b}")).into()),
    };
    let stride_on_conv1 = match r.u8()? {
        0 => false,
        1 => true,
        b => return Err(malformed(format!("bad stride flag {b}")).into()),
    };
    r.u8()?;
    let stem_width = r.dim()?;
    let stages = r.dim()?;
    if stages == 0 || stages > 16 {
        return Err(malformed(format!("implausible stage count {stages}")).into());
    }
    let mut stage_blocks = Vec::with_capacity(stages);
    let mut stage_channels = Vec::with_capacity(stages);
    for _ in 0..stages {
        stage_blocks.push(r.dim()?);
        stage_channels.push(r.dim()?);
    }
    let num_classes = r.dim()?;
    let thermo_k = r.dim()?;
    let shared_const = r.f64()?;
    if r.u32()? != ENDIAN_TAG {
        return Err(malformed("endianness tag mismatch").into());
    }
    let count = r.dim()?;

    let cfg = ArchConfig { variant, block, stem_width, stage_blocks, stage_channels, num_classes, stride_on_conv1 };
    let graph = build_model(&cfg, thermo_k).map_err(|e| malformed(format!("invalid architecture header: {e}")))?;
    if count != graph.layers().count() {
        return Err(malformed(format!("{count} layer records, architecture has {}", graph.layers().count())).into());
    }

    let mut params: Vec<Option<LayerData>> = vec![None; graph.nodes().len()];
    for (idx, node) in graph.layers() {
        let tag = r.u8()?;
        let name = r.name()?;
        if Some(name.as_str()) != node.layer_name() {
            return Err(
                malformed(format!("record `{name}` where `{}` was expected", node.layer_name().unwrap_or(""))).into()
            );
        }
        let bad = |m: String| -> Error { malformed(format!("layer `{name}`: {m}")).into() };
        params[idx] = Some(match node {
            Node::Conv { spec, .. } | Node::FinalConv { spec, .. } => {
                let fin = matches!(node, Node::FinalConv { .. });
                if tag != if fin { TAG_FINAL } else { TAG_CONV } {
                    return Err(bad(format!("unexpected record tag {tag}")));
                }
                let mut dims = [0usize; 8];
                for d in &mut dims {
                    *d = r.dim()?;
                }
                let want = [
                    spec.out_ch,
                    spec.in_ch,
                    spec.kh,
                    spec.kw,
                    spec.stride.0,
                    spec.stride.1,
                    spec.padding.0,
                    spec.padding.1,
                ];
                if dims != want {
                    return Err(bad(format!("geometry {dims:?} differs from architecture {want:?}")));
                }
                let const_scaled = match r.u8()? {
                    0 => false,
                    1 => true,
                    b => return Err(bad(format!("bad const flag {b}"))),
                };
                let alpha = if fin {
                    (0..spec.out_ch).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?
                } else {
                    vec![1.0; spec.out_ch]
                };
                let n = r.u64()?;
                let words_per_tap = spec.in_ch.div_ceil(LANES);
                let expected = (spec.out_ch * spec.kh * spec.kw * words_per_tap) as u64;
                if n != expected {
                    return Err(bad(format!("{n} weight words, expected {expected}")));
                }
                let bits = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
                let tail = spec.in_ch % LANES;
                if tail != 0 {
                    let pad_mask = !0u64 << tail;
                    if bits.chunks(words_per_tap).any(|tap| tap[words_per_tap - 1] & pad_mask != pad_mask) {
                        return Err(bad("padding lanes must be set".into()));
                    }
                }
                let pw =
                    PackedWeights::from_raw((spec.out_ch, spec.in_ch, spec.kh, spec.kw), bits, alpha, const_scaled)
                        .map_err(|e| bad(e.to_string()))?;
                LayerData::Conv(pw)
            }
            Node::BnAct { channels, .. } => {
                if tag != TAG_BN_ACT {
                    return Err(bad(format!("unexpected record tag {tag}")));
                }
                let n = r.dim()?;
                if n != *channels {
                    return Err(bad(format!("{n} threshold channels, expected {channels}")));
                }
                let mut table = Vec::with_capacity(n);
                for _ in 0..n {
                    let t = [r.i64()?, r.i64()?, r.i64()?];
                    let dir = r.u8()?;
                    let degenerate = r.u8()?;
                    table.push(match (dir, degenerate) {
                        (_, 1) if t[0] == t[1] && t[1] == t[2] && (0..=3).contains(&t[0]) => {
                            ChannelThresholds::Constant(t[0] as u8)
                        }
                        (DIR_ASCENDING, 0) => ChannelThresholds::Ascending(t),
                        (DIR_DESCENDING, 0) => ChannelThresholds::Descending(t),
                        _ => return Err(bad(format!("bad threshold record {t:?} dir={dir} degenerate={degenerate}"))),
                    });
                }
                LayerData::Thresholds(ThresholdTable::new(table).map_err(|e| bad(e.to_string()))?)
            }
            _ => unreachable!("only parameterised nodes"),
        });
    }
    CompiledModel::new(graph, shared_const, params).map_err(|e| malformed(e.to_string()).into())
}
