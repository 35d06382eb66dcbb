//! Single-file model container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "TFMLPNET"
//! version    u32
//! doc_len    u32, then doc_len bytes of UTF-8 JSON (ContainerDoc)
//! count      u32, then `count` directory entries:
//!     name_len u16, name bytes
//!     dtype    u8 (0 f32, 1 bf16, 2 i8, 3 i16, 4 i32)
//!     ndim     u8, then ndim x u32 dims
//!     offset   u64 (from payload start), length u64
//!     quant    u8 flag; when 1: bits u8, symmetric u8, axis u8,
//!              zero_point i32, n u32, n x f32 scales
//! payload_len u64, then the payload
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::GATE_ORDER;
use crate::model::{Model, ModelConfig, ModelParams, NodeKey};
use crate::quant::{assemble, PrecisionPlan, Precision, QuantParams, QuantizedWeight};
use crate::tensor::{bf16_from_bits, bf16_to_bits, DType, Tensor};

pub const MAGIC: &[u8; 8] = b"TFMLPNET";
pub const FORMAT_VERSION: u32 = 1;

/// The JSON document stored after the header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerDoc {
    pub config: ModelConfig,
    pub preset: String,
    /// Packing order of the four LSTM gates in `w_x`, `w_h` and `bias`.
    pub gate_order: String,
    /// Per-node precision with calibrated activation parameters. Weight
    /// scales live in the tensor directory.
    pub plan: PrecisionPlan,
}

/// One directory entry.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    pub quant: Option<(QuantParams, usize)>,
}

/// Parsed header and directory of a container.
#[derive(Debug, Clone, PartialEq)]
pub struct ContainerInfo {
    pub version: u32,
    pub doc: ContainerDoc,
    pub tensors: Vec<TensorEntry>,
    pub payload_offset: u64,
    pub total_bytes: u64,
}

impl ContainerInfo {
    pub fn payload_bytes(&self) -> u64 {
        self.tensors.iter().map(|t| t.length).sum()
    }
}

enum Payload<'a> {
    F32(Tensor),
    Bf16(Tensor),
    I8(&'a QuantizedWeight),
}

fn encode_parts(
    cfg: &ModelConfig,
    params: &ModelParams,
    plan: &PrecisionPlan,
    quantized: &BTreeMap<String, QuantizedWeight>,
) -> Result<Vec<u8>> {
    let bf16: BTreeSet<String> = NodeKey::all(cfg)
        .into_iter()
        .filter(|n| plan.get(*n).is_some_and(|a| a.weight == Precision::Bf16))
        .filter_map(|n| n.weight_tensor())
        .collect();
    let mut tensors: Vec<(String, Payload)> = Vec::new();
    params.visit(&mut |name, t| {
        let p = match quantized.get(name) {
            Some(q) => Payload::I8(q),
            None if bf16.contains(name) => Payload::Bf16(t.clone()),
            None => Payload::F32(t.clone()),
        };
        tensors.push((name.to_string(), p));
    });
    let doc = ContainerDoc {
        config: cfg.clone(),
        preset: plan.preset_name().to_string(),
        gate_order: GATE_ORDER.to_string(),
        plan: plan.clone(),
    };
    let doc = serde_json::to_vec(&doc)?;

    let mut payload = Vec::new();
    let mut dir = Vec::new();
    dir.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, p) in &tensors {
        let offset = payload.len() as u64;
        let (dtype, shape, quant) = match p {
            Payload::F32(t) => {
                t.data().iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes()));
                (DType::F32, t.shape(), None)
            }
            Payload::Bf16(t) => {
                if t.data().iter().any(|&v| bf16_from_bits(bf16_to_bits(v)) != v) {
                    return Err(Error::Numeric(format!("tensor '{name}' is not on the bf16 grid")));
                }
                t.data().iter().for_each(|v| payload.extend_from_slice(&bf16_to_bits(*v).to_le_bytes()));
                (DType::Bf16, t.shape(), None)
            }
            Payload::I8(q) => {
                payload.extend(q.values.data().iter().map(|&v| v as u8));
                (DType::I8, q.values.shape(), Some((&q.params, q.axis)))
            }
        };
        let name_bytes = name.as_bytes();
        dir.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        dir.extend_from_slice(name_bytes);
        dir.push(dtype.code());
        dir.push(shape.len() as u8);
        for &d in shape {
            dir.extend_from_slice(&(d as u32).to_le_bytes());
        }
        dir.extend_from_slice(&offset.to_le_bytes());
        dir.extend_from_slice(&(payload.len() as u64 - offset).to_le_bytes());
        match quant {
            None => dir.push(0),
            Some((qp, axis)) => {
                dir.push(1);
                dir.push(qp.bits);
                dir.push(u8::from(qp.symmetric));
                dir.push(axis as u8);
                dir.extend_from_slice(&qp.zero_point.to_le_bytes());
                dir.extend_from_slice(&(qp.scale.len() as u32).to_le_bytes());
                qp.scale.iter().for_each(|s| dir.extend_from_slice(&s.to_le_bytes()));
            }
        }
    }

    let mut out = Vec::with_capacity(24 + doc.len() + dir.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(doc.len() as u32).to_le_bytes());
    out.extend_from_slice(&doc);
    out.extend_from_slice(&dir);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Serializes a model with its precision plan.
pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    encode_parts(model.config(), model.params(), model.plan(), model.quantized_weights())
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(model)?)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn i32(&mut self, what: &str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn fail<T>(&self, at: usize, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format { offset: at as u64, msg: msg.into() })
    }
}

/// Parses and checks the header, document and directory.
pub fn read_info(bytes: &[u8]) -> Result<ContainerInfo> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return r.fail(0, "bad magic, not a model container");
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return r.fail(8, format!("unsupported format version {version}, expected {FORMAT_VERSION}"));
    }
    let doc_len = r.u32("document length")? as usize;
    let doc_at = r.pos;
    let doc: ContainerDoc = serde_json::from_slice(r.take(doc_len, "config document")?)
        .or_else(|e| r.fail(doc_at, format!("config document: {e}")))?;
    if doc.gate_order != GATE_ORDER {
        return r.fail(doc_at, format!("gate order '{}' is not supported", doc.gate_order));
    }
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let entry_at = r.pos;
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .or_else(|_| r.fail(entry_at, "tensor name is not UTF-8"))?
            .to_string();
        let code_at = r.pos;
        let code = r.u8("dtype")?;
        let dtype = DType::from_code(code).map_or_else(|| r.fail(code_at, format!("unknown dtype code {code}")), Ok)?;
        let ndim = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dimension")? as usize);
        }
        let offset = r.u64("tensor offset")?;
        let length = r.u64("tensor length")?;
        let expected = shape.iter().product::<usize>() as u64 * dtype.size() as u64;
        if length != expected {
            return r.fail(entry_at, format!("tensor '{name}' declares {length} bytes, {dtype} {shape:?} needs {expected}"));
        }
        let quant = match r.u8("quant flag")? {
            0 => None,
            1 => {
                let q_at = r.pos;
                let bits = r.u8("quant bits")?;
                let symmetric = r.u8("quant symmetry")? != 0;
                let axis = r.u8("quant axis")? as usize;
                let zero_point = r.i32("zero point")?;
                let n = r.u32("scale count")? as usize;
                let mut scale = Vec::with_capacity(n.min(1 << 16));
                for _ in 0..n {
                    scale.push(r.f32("scale")?);
                }
                let qp = QuantParams { scale, zero_point, bits, symmetric };
                if let Err(e) = qp.validate() {
                    return r.fail(q_at, format!("tensor '{name}': {e}"));
                }
                Some((qp, axis))
            }
            f => return r.fail(r.pos - 1, format!("bad quant flag {f}")),
        };
        tensors.push(TensorEntry { name, dtype, shape, offset, length, quant });
    }
    let payload_len = r.u64("payload length")?;
    let payload_offset = r.pos as u64;
    if (bytes.len() as u64) < payload_offset + payload_len {
        return r.fail(bytes.len(), format!("truncated payload: {payload_len} bytes declared"));
    }
    if (bytes.len() as u64) > payload_offset + payload_len {
        return r.fail((payload_offset + payload_len) as usize, "trailing bytes after payload");
    }
    for t in &tensors {
        if t.offset.checked_add(t.length).is_none_or(|end| end > payload_len) {
            return r.fail(payload_offset as usize, format!("tensor '{}' lies outside the payload", t.name));
        }
    }
    Ok(ContainerInfo { version, doc, tensors, payload_offset, total_bytes: bytes.len() as u64 })
}

/// Loads a model. The result's forward pass is bit-identical to the saved
/// model's.
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let info = read_info(bytes)?;
    let cfg = info.doc.config.clone();
    cfg.validate()?;
    let mut params = ModelParams::zeros(&cfg)?;
    let schema: BTreeMap<String, Vec<usize>> = params.schema().into_iter().collect();
    let mut seen = BTreeSet::new();
    for t in &info.tensors {
        if !schema.contains_key(&t.name) {
            return Err(Error::Schema(format!("unknown tensor '{}'", t.name)));
        }
        if !seen.insert(t.name.clone()) {
            return Err(Error::Schema(format!("duplicate tensor '{}'", t.name)));
        }
    }
    for t in &info.tensors {
        let shape = &schema[&t.name];
        if &t.shape != shape {
            return Err(Error::Schema(format!("tensor '{}' has shape {:?}, expected {shape:?}", t.name, t.shape)));
        }
    }
    if let Some(missing) = schema.keys().find(|k| !seen.contains(*k)) {
        return Err(Error::Schema(format!("missing tensor '{missing}'")));
    }

    let base = info.payload_offset as usize;
    let mut quantized = BTreeMap::new();
    let mut decoded: BTreeMap<&str, Tensor> = BTreeMap::new();
    for t in &info.tensors {
        let raw = &bytes[base + t.offset as usize..base + (t.offset + t.length) as usize];
        let values = match t.dtype {
            DType::F32 => raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect(),
            DType::Bf16 => raw
                .chunks_exact(2)
                .map(|b| bf16_from_bits(u16::from_le_bytes(b.try_into().expect("2 bytes"))))
                .collect(),
            DType::I8 => {
                let (qp, axis) = t.quant.clone().ok_or_else(|| Error::Format {
                    offset: info.payload_offset + t.offset,
                    msg: format!("int8 tensor '{}' has no quantization parameters", t.name),
                })?;
                let q = QuantizedWeight {
                    values: Tensor::new(&t.shape, raw.iter().map(|&b| b as i8).collect())?,
                    params: qp,
                    axis,
                };
                let deq = q.dequantize().map_err(|e| Error::Schema(format!("tensor '{}': {e}", t.name)))?;
                quantized.insert(t.name.clone(), q);
                decoded.insert(&t.name, deq);
                continue;
            }
            other => {
                return Err(Error::Format {
                    offset: info.payload_offset + t.offset,
                    msg: format!("tensor '{}' has unsupported dtype {other}", t.name),
                })
            }
        };
        decoded.insert(&t.name, Tensor::new(&t.shape, values)?);
    }
    params.visit_mut(&mut |name, t| {
        if let Some(v) = decoded.remove(name) {
            *t = v;
        }
    });
    let plan = info.doc.plan;
    if plan.preset_name() != info.doc.preset {
        return Err(Error::Schema(format!(
            "document preset '{}' disagrees with plan preset '{}'",
            info.doc.preset,
            plan.preset_name()
        )));
    }
    if plan.is_float() && plan == PrecisionPlan::float(&cfg) {
        if !quantized.is_empty() {
            return Err(Error::Schema("f32 model container holds int8 tensors".into()));
        }
        return Model::new(cfg, params);
    }
    assemble(cfg, params, plan, quantized)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}

/// Exact container size of a model of `cfg` under `preset`, with weights
/// stored at the preset's precisions.
pub fn estimated_size(cfg: &ModelConfig, preset: &str) -> Result<usize> {
    let params = ModelParams::zeros(cfg)?;
    let mut plan = PrecisionPlan::preset(preset, cfg)?;
    let mut quantized = BTreeMap::new();
    for node in NodeKey::all(cfg) {
        let a = plan.get_mut(node).expect("preset covers the graph");
        if let Some(bits) = a.activation.bits() {
            let placeholder = QuantParams::per_tensor(1.0, 0, bits)?;
            if node.kind() == crate::model::NodeKind::Cell {
                a.state = Some(placeholder);
            } else {
                a.input = Some(placeholder.clone());
                a.output = a.requantize.then_some(placeholder);
            }
        }
        if a.weight == Precision::Int8 {
            let name = node.weight_tensor().expect("weighted node");
            let mut w = None;
            params.visit(&mut |n, t| {
                if n == name {
                    w = Some(t.clone());
                }
            });
            let w = w.ok_or_else(|| Error::Schema(format!("no tensor '{name}'")))?;
            quantized.insert(name, QuantizedWeight::quantize(&w, node.weight_channel_axis())?);
        }
    }
    Ok(encode_parts(cfg, &params, &plan, &quantized)?.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{apply_plan, calibrate, PRESETS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig { blocks: 2, channels: 8, hidden: 6, mixer_expansion: 1.5, ..Default::default() }
    }

    fn noise(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()
    }

    #[test]
    fn float_round_trip_is_bit_identical() {
        let m = Model::init_random(small(), 4).unwrap();
        let bytes = to_bytes(&m).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.params(), m.params());
        let x = noise(96 * 10, 1);
        assert_eq!(back.process(&x, None).unwrap(), m.process(&x, None).unwrap());
        assert_eq!(bytes.len(), estimated_size(&small(), "fp32").unwrap());
    }

    #[test]
    fn every_preset_round_trips() {
        for cfg in [small(), ModelConfig { compression: 2, film: true, speakers: 1, embed_dim: 5, ..small() }] {
            let m = Model::init_random(cfg.clone(), 5).unwrap();
            let emb = cfg.film.then(|| vec![0.3f32, -0.1, 0.7, 0.0, 1.0]);
            let x = noise(96 * 12, 2);
            for name in PRESETS {
                let plan = PrecisionPlan::preset(name, &cfg).unwrap();
                let plan = calibrate(&m, &[noise(2000, 3)], emb.as_deref(), plan).unwrap();
                let q = apply_plan(&m, plan).unwrap();
                let bytes = to_bytes(&q).unwrap();
                let back = from_bytes(&bytes).unwrap();
                assert_eq!(back.plan(), q.plan());
                assert_eq!(back.quantized_weights(), q.quantized_weights());
                assert_eq!(back.process(&x, emb.as_deref()).unwrap(), q.process(&x, emb.as_deref()).unwrap(), "{name}");
                // calibrated numbers change the JSON length, nothing else
                let est = estimated_size(&cfg, name).unwrap() as f64;
                assert!((bytes.len() as f64 - est).abs() < 0.1 * est, "{name}");
            }
        }
    }

    #[test]
    fn header_errors_carry_offsets() {
        let m = Model::init_random(small(), 6).unwrap();
        let good = to_bytes(&m).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Format { offset: 0, .. })));

        let mut bad = good.clone();
        bad[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(from_bytes(&bad), Err(Error::Format { offset: 8, .. })));

        for cut in [4, 10, 30, good.len() / 2, good.len() - 1] {
            match from_bytes(&good[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut as u64, "cut {cut}: offset {offset}"),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(from_bytes(&long), Err(Error::Format { .. })));
    }

    /// Overwrites the name of directory entry `index` of an f32 container.
    fn rename_tensor(bytes: &[u8], index: usize, new: &str) -> Vec<u8> {
        let info = read_info(bytes).unwrap();
        assert_eq!(info.tensors[index].name.len(), new.len());
        let doc_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let entry_len = |t: &TensorEntry| 2 + t.name.len() + 2 + 4 * t.shape.len() + 16 + 1;
        let name_at = 16 + doc_len + 4 + info.tensors[..index].iter().map(entry_len).sum::<usize>() + 2;
        let mut out = bytes.to_vec();
        out[name_at..name_at + new.len()].copy_from_slice(new.as_bytes());
        out
    }

    #[test]
    fn schema_errors() {
        let m = Model::init_random(small(), 7).unwrap();
        let good = to_bytes(&m).unwrap();
        let renamed = rename_tensor(&good, 0, "encoder.wXight");
        assert!(matches!(from_bytes(&renamed), Err(Error::Schema(msg)) if msg.contains("unknown tensor")));
        let info = read_info(&good).unwrap();
        let last = info.tensors.len() - 1;
        assert_eq!(info.tensors[last].name, "decoder.bias");
        let dup = rename_tensor(&good, 1, "decoder.bias");
        assert!(matches!(from_bytes(&dup), Err(Error::Schema(msg)) if msg.contains("duplicate")));
    }

    #[test]
    fn default_model_sizes() {
        let cfg = ModelConfig::default();
        let params = cfg.param_count() as f64;
        let f32_size = estimated_size(&cfg, "fp32").unwrap() as f64;
        assert!(f32_size >= 4.0 * params && f32_size <= 1.05 * 4.0 * params);
        assert!(estimated_size(&cfg, "int8").unwrap() <= 600_000);
        // only the float container exceeds the quantized size cap
        for name in PRESETS.iter().filter(|p| **p != "fp32") {
            assert!(estimated_size(&cfg, name).unwrap() <= 1_500_000, "{name}");
        }
    }
}
