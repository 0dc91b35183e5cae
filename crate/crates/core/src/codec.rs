//! Progressive on-disk format for layered models.
//!
//! ```text
//! file     = "VLQN" version:u16 manifest_len:u32 manifest basic_section enhance_section*
//! manifest = body crc32(body):u32
//! section  = level:u8 payload_len:u32 payload crc32(level ‖ payload_len ‖ payload):u32
//! ```
//!
//! All integers are little-endian, all reals IEEE-754 single precision. The
//! manifest body is
//!
//! ```text
//! basic_bits:u8 n:u8 flags:u8 reserved:u8  c:u32 h:u32 w:u32  layer_count:u32  record*
//! record = kind:u8 record_len:u32 payload
//! ```
//!
//! with flags bit 0 = positive compensation. Record payloads by kind:
//!
//! | kind | layer      | payload |
//! |------|------------|---------|
//! | 1    | conv       | geometry, weights `[out,in,kh,kw]` |
//! | 2    | qconv      | geometry, weight step `s_n`, activation steps for levels `0..=n` |
//! | 3    | linear     | in:u32 out:u32, weights `[out,in]`, bias `[out]` |
//! | 4    | qlinear    | in:u32 out:u32, weight step, activation steps |
//! | 5    | batch norm | channels:u32, then for each level: mean, var, scale, shift |
//! | 6    | relu       | empty |
//! | 7    | max pool   | size:u32 |
//! | 8    | flatten    | empty |
//!
//! Geometry is `in out kh kw stride pad` as six u32. The basic section (level
//! 0) concatenates every quantized layer's packed basic plane in layer order;
//! enhance section `i` concatenates the level-`i` planes the same way. Each
//! layer's plane is padded to a whole byte on its own.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{BnParams, ConvGeom, Layer, LayeredModel};
use crate::quant::QuantParams;
use crate::vertical::{pack_planes, packed_len, unpack_basic, unpack_plane, VerticalStack};

pub const MAGIC: &[u8; 4] = b"VLQN";
pub const VERSION: u16 = 1;
/// Bytes a section adds around its payload: level, length and CRC.
pub const SECTION_OVERHEAD: usize = 1 + 4 + 4;

const FLAG_COMPENSATION: u8 = 1;

mod kind {
    pub const CONV: u8 = 1;
    pub const QCONV: u8 = 2;
    pub const LINEAR: u8 = 3;
    pub const QLINEAR: u8 = 4;
    pub const BATCH_NORM: u8 = 5;
    pub const RELU: u8 = 6;
    pub const MAX_POOL: u8 = 7;
    pub const FLATTEN: u8 = 8;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct SectionSize {
    pub level: usize,
    pub payload: usize,
    pub total: usize,
}

/// A model split into its independently shippable pieces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedModel {
    /// Magic, version, manifest.
    pub header: Vec<u8>,
    pub basic: Vec<u8>,
    pub enhance: Vec<Vec<u8>>,
}

impl EncodedModel {
    /// The complete single-file form.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.prefix(self.enhance.len())
    }

    /// Header, basic section and enhance sections `1..=k`.
    pub fn prefix(&self, k: usize) -> Vec<u8> {
        let mut out = self.header.clone();
        out.extend_from_slice(&self.basic);
        for e in &self.enhance[..k.min(self.enhance.len())] {
            out.extend_from_slice(e);
        }
        out
    }

    pub fn sizes(&self) -> Vec<SectionSize> {
        std::iter::once(&self.basic)
            .chain(&self.enhance)
            .enumerate()
            .map(|(level, s)| SectionSize { level, payload: s.len() - SECTION_OVERHEAD, total: s.len() })
            .collect()
    }
}

struct ByteWriter(Vec<u8>);

impl ByteWriter {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, vs: &[f32]) {
        vs.iter().for_each(|&v| self.f32(v));
    }
    fn geom(&mut self, g: &ConvGeom) {
        for v in [g.in_ch, g.out_ch, g.kh, g.kw, g.stride, g.pad] {
            self.u32(v);
        }
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::corrupt(format!("truncated: need {n} bytes at offset {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        if self.remaining() < n.saturating_mul(4) {
            return Err(Error::corrupt("truncated real array"));
        }
        (0..n).map(|_| self.f32()).collect()
    }
    fn geom(&mut self) -> Result<ConvGeom> {
        let mut v = [0usize; 6];
        for x in v.iter_mut() {
            *x = self.u32()?;
        }
        Ok(ConvGeom { in_ch: v[0], out_ch: v[1], kh: v[2], kw: v[3], stride: v[4], pad: v[5] })
    }
}

fn write_section(level: usize, payload: &[u8]) -> Vec<u8> {
    let mut w = ByteWriter(Vec::with_capacity(payload.len() + SECTION_OVERHEAD));
    w.u8(level as u8);
    w.u32(payload.len());
    w.0.extend_from_slice(payload);
    let crc = crc32fast::hash(&w.0);
    w.0.extend_from_slice(&crc.to_le_bytes());
    w.0
}

fn read_section<'a>(r: &mut ByteReader<'a>, expect_level: usize) -> Result<&'a [u8]> {
    let start = r.pos;
    let level = r.u8()? as usize;
    let len = r.u32()?;
    let payload = r.take(len)?;
    let body = &r.buf[start..r.pos];
    let crc = r.u32()? as u32;
    if crc32fast::hash(body) != crc {
        return Err(Error::corrupt(format!("checksum mismatch in level-{level} section")));
    }
    if level != expect_level {
        return Err(Error::corrupt(format!("expected level-{expect_level} section, found level {level}")));
    }
    Ok(payload)
}

fn manifest_body(model: &LayeredModel) -> Vec<u8> {
    let mut w = ByteWriter(Vec::new());
    w.u8(model.basic_bits as u8);
    w.u8(model.n as u8);
    w.u8(if model.compensation { FLAG_COMPENSATION } else { 0 });
    w.u8(0);
    for d in model.input {
        w.u32(d);
    }
    w.u32(model.layers.len());
    for layer in &model.layers {
        let mut rec = ByteWriter(Vec::new());
        let k = match layer {
            Layer::Conv { geom, weight } => {
                rec.geom(geom);
                rec.f32s(weight);
                kind::CONV
            }
            Layer::QConv { geom, stack, act_steps } => {
                rec.geom(geom);
                rec.f32(stack.top_step as f32);
                rec.f32s(act_steps);
                kind::QCONV
            }
            Layer::Linear { geom, weight, bias } => {
                rec.u32(geom.in_ch);
                rec.u32(geom.out_ch);
                rec.f32s(weight);
                rec.f32s(bias);
                kind::LINEAR
            }
            Layer::QLinear { geom, stack, act_steps } => {
                rec.u32(geom.in_ch);
                rec.u32(geom.out_ch);
                rec.f32(stack.top_step as f32);
                rec.f32s(act_steps);
                kind::QLINEAR
            }
            Layer::BatchNorm { sets } => {
                rec.u32(sets.first().map_or(0, BnParams::channels));
                for s in sets {
                    rec.f32s(&s.mean);
                    rec.f32s(&s.var);
                    rec.f32s(&s.scale);
                    rec.f32s(&s.shift);
                }
                kind::BATCH_NORM
            }
            Layer::Relu => kind::RELU,
            Layer::MaxPool { size } => {
                rec.u32(*size);
                kind::MAX_POOL
            }
            Layer::Flatten => kind::FLATTEN,
        };
        w.u8(k);
        w.u32(rec.0.len());
        w.0.extend_from_slice(&rec.0);
    }
    w.0
}

/// Serialize into header, basic section and one section per enhance level.
pub fn encode_parts(model: &LayeredModel) -> Result<EncodedModel> {
    model.validate()?;
    if model.n > u8::MAX as usize || model.basic_bits > 16 {
        return Err(Error::validation("model depth does not fit the format"));
    }
    let body = manifest_body(model);
    let mut header = ByteWriter(Vec::with_capacity(body.len() + 14));
    header.0.extend_from_slice(MAGIC);
    header.u16(VERSION);
    header.u32(body.len() + 4);
    header.0.extend_from_slice(&body);
    header.0.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());

    let packed: Vec<_> = model.quantized_layers().map(|(_, s)| pack_planes(s)).collect();
    let basic: Vec<u8> = packed.iter().flat_map(|p| p.basic.iter().copied()).collect();
    let enhance = (0..model.n)
        .map(|i| {
            let payload: Vec<u8> = packed.iter().flat_map(|p| p.enhance[i].iter().copied()).collect();
            write_section(i + 1, &payload)
        })
        .collect();
    Ok(EncodedModel { header: header.0, basic: write_section(0, &basic), enhance })
}

/// Write the single-file form to `sink`, returning the section sizes.
pub fn encode_model(model: &LayeredModel, sink: &mut impl Write) -> Result<Vec<SectionSize>> {
    let enc = encode_parts(model)?;
    sink.write_all(&enc.to_bytes())?;
    Ok(enc.sizes())
}

pub fn encode_to_vec(model: &LayeredModel) -> Result<Vec<u8>> {
    Ok(encode_parts(model)?.to_bytes())
}

/// Exact section sizes implied by a model's layout, without packing anything.
pub fn section_sizes(model: &LayeredModel) -> Vec<SectionSize> {
    let sizes = |bits: u32| -> usize { model.quantized_layers().map(|(_, s)| packed_len(s.len(), bits)).sum() };
    let basic = sizes(model.basic_bits);
    let plane = sizes(1);
    std::iter::once(basic)
        .chain(std::iter::repeat_n(plane, model.n))
        .enumerate()
        .map(|(level, payload)| SectionSize { level, payload, total: payload + SECTION_OVERHEAD })
        .collect()
}

/// A model decoded up to the highest level whose sections were available.
/// Stacks hold `available` enhance planes while `model.n` keeps the
/// declared depth, and each stack's `top_step` is still `s_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedModel {
    pub model: LayeredModel,
    pub available: usize,
}

/// Bytes of a stored model: the main file plus any separately delivered
/// enhance sections keyed by level.
#[derive(Debug, Clone, Default)]
pub struct ModelSource {
    pub main: Vec<u8>,
    pub deltas: BTreeMap<usize, Vec<u8>>,
}

impl ModelSource {
    pub fn from_bytes(main: Vec<u8>) -> Self {
        ModelSource { main, deltas: BTreeMap::new() }
    }

    /// Read `path` and any `path.e<level>` delta files next to it.
    pub fn open(path: &Path) -> Result<Self> {
        let main = std::fs::read(path)?;
        let mut deltas = BTreeMap::new();
        for level in 1..=u8::MAX as usize {
            let p = delta_path(path, level);
            if p.exists() {
                deltas.insert(level, std::fs::read(p)?);
            }
        }
        Ok(ModelSource { main, deltas })
    }
}

pub fn delta_path(path: &Path, level: usize) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(format!(".e{level}"));
    PathBuf::from(s)
}

/// Write the basic file to `path` and each enhance level to `path.e<i>`.
pub fn write_split(model: &LayeredModel, path: &Path) -> Result<EncodedModel> {
    let enc = encode_parts(model)?;
    std::fs::write(path, enc.prefix(0))?;
    for (i, e) in enc.enhance.iter().enumerate() {
        std::fs::write(delta_path(path, i + 1), e)?;
    }
    Ok(enc)
}

struct LayerMeta {
    layer: Layer,
}

fn read_manifest(r: &mut ByteReader) -> Result<LayeredModel> {
    if r.take(4)? != MAGIC {
        return Err(Error::corrupt("bad magic"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::corrupt(format!("unsupported format version {version}")));
    }
    let len = r.u32()?;
    if len < 4 {
        return Err(Error::corrupt("manifest too short"));
    }
    let manifest = r.take(len)?;
    let (body, crc) = manifest.split_at(len - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(Error::corrupt("manifest checksum mismatch"));
    }
    let mut m = ByteReader::new(body);
    let basic_bits = m.u8()? as u32;
    let n = m.u8()? as usize;
    let flags = m.u8()?;
    let _reserved = m.u8()?;
    if !(2..=16).contains(&basic_bits) {
        return Err(Error::corrupt(format!("basic bit width {basic_bits}")));
    }
    let input = [m.u32()?, m.u32()?, m.u32()?];
    let count = m.u32()?;
    let levels = n + 1;
    let mut layers = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let k = m.u8()?;
        let rec_len = m.u32()?;
        let mut rec = ByteReader::new(m.take(rec_len)?);
        let meta =
            read_record(&mut rec, k, basic_bits, n, levels).map_err(|e| Error::corrupt(format!("layer {i}: {e}")))?;
        if rec.remaining() != 0 {
            return Err(Error::corrupt(format!("layer {i}: {} trailing record bytes", rec.remaining())));
        }
        layers.push(meta.layer);
    }
    if m.remaining() != 0 {
        return Err(Error::corrupt("trailing manifest bytes"));
    }
    Ok(LayeredModel { basic_bits, n, compensation: flags & FLAG_COMPENSATION != 0, input, layers })
}

fn empty_stack(geom: &ConvGeom, basic_bits: u32, n: usize, top_step: f32) -> Result<VerticalStack> {
    let step = top_step as f64;
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::corrupt(format!("weight step {top_step}")));
    }
    let params = QuantParams::new(step * (1u64 << n) as f64, basic_bits, true)?;
    let shape = vec![geom.out_ch, geom.in_ch, geom.kh, geom.kw];
    Ok(VerticalStack {
        basic: crate::quant::QTensor { data: Vec::new(), shape, params },
        enhance: Vec::new(),
        top_step: step,
    })
}

fn read_record(r: &mut ByteReader, k: u8, basic_bits: u32, n: usize, levels: usize) -> Result<LayerMeta> {
    let layer = match k {
        kind::CONV => {
            let geom = r.geom()?;
            let weight = r.f32s(geom.weight_len())?;
            Layer::Conv { geom, weight }
        }
        kind::QCONV => {
            let geom = r.geom()?;
            let step = r.f32()?;
            let act_steps = r.f32s(levels)?;
            Layer::QConv { stack: empty_stack(&geom, basic_bits, n, step)?, geom, act_steps }
        }
        kind::LINEAR => {
            let geom = ConvGeom::dense(r.u32()?, r.u32()?);
            let weight = r.f32s(geom.weight_len())?;
            let bias = r.f32s(geom.out_ch)?;
            Layer::Linear { geom, weight, bias }
        }
        kind::QLINEAR => {
            let geom = ConvGeom::dense(r.u32()?, r.u32()?);
            let step = r.f32()?;
            let act_steps = r.f32s(levels)?;
            Layer::QLinear { stack: empty_stack(&geom, basic_bits, n, step)?, geom, act_steps }
        }
        kind::BATCH_NORM => {
            let c = r.u32()?;
            let sets = (0..levels)
                .map(|_| Ok(BnParams { mean: r.f32s(c)?, var: r.f32s(c)?, scale: r.f32s(c)?, shift: r.f32s(c)? }))
                .collect::<Result<Vec<_>>>()?;
            Layer::BatchNorm { sets }
        }
        kind::RELU => Layer::Relu,
        kind::MAX_POOL => Layer::MaxPool { size: r.u32()? },
        kind::FLATTEN => Layer::Flatten,
        other => return Err(Error::corrupt(format!("unknown layer kind {other}"))),
    };
    Ok(LayerMeta { layer })
}

fn stacks_mut(model: &mut LayeredModel) -> impl Iterator<Item = &mut VerticalStack> {
    model.layers.iter_mut().filter_map(|l| match l {
        Layer::QConv { stack, .. } | Layer::QLinear { stack, .. } => Some(stack),
        _ => None,
    })
}

fn fill_basic(model: &mut LayeredModel, payload: &[u8]) -> Result<()> {
    let bits = model.basic_bits;
    let mut off = 0;
    for stack in stacks_mut(model) {
        let len: usize = stack.basic.shape.iter().product();
        let nbytes = packed_len(len, bits);
        let bytes = payload.get(off..off + nbytes).ok_or_else(|| Error::corrupt("basic section too short"))?;
        stack.basic = unpack_basic(bytes, &stack.basic.shape, bits, stack.basic.params.step)?;
        off += nbytes;
    }
    if off != payload.len() {
        return Err(Error::corrupt("basic section length mismatch"));
    }
    Ok(())
}

fn fill_plane(model: &mut LayeredModel, level: usize, payload: &[u8]) -> Result<()> {
    let mut off = 0;
    for stack in stacks_mut(model) {
        let len = stack.basic.len();
        let nbytes = packed_len(len, 1);
        let bytes =
            payload.get(off..off + nbytes).ok_or_else(|| Error::corrupt(format!("level-{level} section too short")))?;
        stack.enhance.push(unpack_plane(bytes, len, level)?);
        off += nbytes;
    }
    if off != payload.len() {
        return Err(Error::corrupt(format!("level-{level} section length mismatch")));
    }
    Ok(())
}

/// Decode the manifest, the basic section and enhance sections `1..=k`.
/// Bytes of later sections are never touched.
pub fn decode_levels(source: &ModelSource, k: usize) -> Result<DecodedModel> {
    let mut r = ByteReader::new(&source.main);
    let mut model = read_manifest(&mut r)?;
    if k > model.n {
        return Err(Error::invalid(format!("level {k} requested from a model with {} enhance layers", model.n)));
    }
    let basic = read_section(&mut r, 0)?;
    fill_basic(&mut model, basic)?;

    let mut available = 0;
    let mut missing = Vec::new();
    for level in 1..=k {
        let payload = if r.remaining() > 0 {
            Some(read_section(&mut r, level)?)
        } else if let Some(delta) = source.deltas.get(&level) {
            let mut dr = ByteReader::new(delta);
            let p = read_section(&mut dr, level)?;
            if dr.remaining() != 0 {
                return Err(Error::corrupt(format!("trailing bytes after level-{level} delta")));
            }
            Some(p)
        } else {
            None
        };
        match payload {
            Some(p) if missing.is_empty() => {
                fill_plane(&mut model, level, p)?;
                available = level;
            }
            Some(_) => {}
            None => missing.push(level),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingLayers { levels: missing });
    }
    if k == model.n && r.remaining() != 0 {
        return Err(Error::corrupt(format!("{} trailing bytes after the last section", r.remaining())));
    }
    Ok(DecodedModel { model, available })
}

/// Decode every level and check the result.
pub fn decode_full(source: &ModelSource) -> Result<LayeredModel> {
    let mut r = ByteReader::new(&source.main);
    let n = read_manifest(&mut r)?.n;
    let decoded = decode_levels(source, n)?;
    decoded.model.validate()?;
    Ok(decoded.model)
}

pub fn decode_bytes(bytes: &[u8]) -> Result<LayeredModel> {
    decode_full(&ModelSource::from_bytes(bytes.to_vec()))
}

/// Decode enough sections for level `k` and build the runnable model.
pub fn decode_at_precision(source: &ModelSource, k: usize) -> Result<crate::infer::AssembledModel> {
    let decoded = decode_levels(source, k)?;
    let levels = vec![k; decoded.model.quantized_layers().count()];
    crate::infer::AssembledModel::from_layered(&decoded.model, &levels)
}

/// Bytes consumed to reach level `k`: header plus sections `0..=k`.
pub fn bytes_for_level(model: &LayeredModel, k: usize) -> usize {
    let header = 4 + 2 + 4 + manifest_body(model).len() + 4;
    header + section_sizes(model).iter().take(k + 1).map(|s| s.total).sum::<usize>()
}

/// A single self-contained file holding the header and sections `0..=k`,
/// gathered from the main file and any delta files.
pub fn extract_levels(source: &ModelSource, k: usize) -> Result<Vec<u8>> {
    let decoded = decode_levels(source, k)?;
    let model = &decoded.model;
    let in_main = (0..=model.n).take_while(|&j| bytes_for_level(model, j) <= source.main.len()).last().unwrap_or(0);
    let mut out = source.main[..bytes_for_level(model, k.min(in_main))].to_vec();
    for level in in_main + 1..=k {
        out.extend_from_slice(&source.deltas[&level]);
    }
    Ok(out)
}
