//! 4-bit symmetric per-chunk quantization.
//!
//! Each chunk of `chunk_size` consecutive parameters shares one f32 scale
//! `≈ max|w| / 7`; each parameter becomes a signed code in `[-7, 7]` chosen by
//! round-half-to-even. Scales are rounded up to 21 significant bits so that
//! `code × scale` is exact in f32: dequantization never rounds, requantizing a
//! dequantized model is the identity, and the `scale / 2` error bound holds
//! without slack.
//!
//! Codes are packed two per byte, low nibble first, as two's-complement
//! nibbles. The serialized form (header, scales, packed nibbles) is what
//! `hashQuant4` commits to.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CodecError, Reader, Writer};
use crate::model::{Batch, Layout, Mlp, ModelError, ParamVector};
use crate::Hash256;

pub const MAX_CODE: i8 = 7;

#[derive(Debug, Error, PartialEq)]
pub enum QuantError {
    #[error("layout error: {0}")]
    Layout(String),
    #[error("codec error: {0}")]
    Codec(String),
    #[error("diff was built against {expected:?} but base hashes to {actual:?}")]
    WrongPredecessor { expected: Hash256, actual: Hash256 },
    #[error("chunk size must be at least 1")]
    ChunkSize,
    #[error("non-finite parameter at index {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<CodecError> for QuantError {
    fn from(e: CodecError) -> Self {
        QuantError::Codec(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantPolicy {
    /// Required decrement of the quantized loss on the verification subset.
    pub epsilon_quant: f32,
    /// Additive tolerance on leaf-versus-quant comparisons.
    #[serde(default)]
    pub consistency_slack: f32,
}

impl Default for QuantPolicy {
    fn default() -> Self {
        Self { epsilon_quant: 5e-4, consistency_slack: 0.0 }
    }
}

impl QuantPolicy {
    pub fn validate(&self) -> Result<(), QuantError> {
        if !(self.epsilon_quant.is_finite() && self.epsilon_quant > 0.0) {
            return Err(QuantError::Layout("epsilon_quant must be positive".into()));
        }
        if !(self.consistency_slack.is_finite() && self.consistency_slack >= 0.0) {
            return Err(QuantError::Layout("consistency_slack must be non-negative".into()));
        }
        Ok(())
    }
}

/// Smallest f32 ≥ `v` with at most 21 significant bits.
fn round_scale_up(v: f32) -> f32 {
    let bits = v.to_bits();
    if bits & 0b111 == 0 {
        v
    } else {
        f32::from_bits((bits | 0b111) + 1)
    }
}

fn chunk_scale(values: &[f32]) -> f32 {
    let max = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if max == 0.0 {
        0.0
    } else {
        round_scale_up(max / MAX_CODE as f32)
    }
}

fn encode_code(value: f32, scale: f32) -> i8 {
    if scale == 0.0 {
        return 0;
    }
    // f64 division resolves near-ties on the correct side.
    let q = (value as f64 / scale as f64).round_ties_even();
    q.clamp(-(MAX_CODE as f64), MAX_CODE as f64) as i8
}

fn nibble(code: i8) -> u8 {
    (code as u8) & 0x0f
}

fn from_nibble(n: u8) -> Option<i8> {
    let v = ((n << 4) as i8) >> 4;
    (v >= -MAX_CODE).then_some(v)
}

/// Codes and scale of one quantization chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantChunk {
    pub scale: f32,
    pub codes: Vec<i8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantModel {
    source_dim: usize,
    chunk_size: usize,
    scales: Vec<f32>,
    packed: Vec<u8>,
}

pub fn quantize(values: &[f32], chunk_size: usize) -> Result<QuantModel, QuantError> {
    if chunk_size == 0 {
        return Err(QuantError::ChunkSize);
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(QuantError::NonFinite(i));
    }
    let mut scales = Vec::with_capacity(values.len().div_ceil(chunk_size));
    let mut codes = Vec::with_capacity(values.len());
    for chunk in values.chunks(chunk_size) {
        let scale = chunk_scale(chunk);
        if !(scale * MAX_CODE as f32).is_finite() {
            return Err(QuantError::Layout("chunk magnitude too large to quantize".into()));
        }
        scales.push(scale);
        codes.extend(chunk.iter().map(|&v| encode_code(v, scale)));
    }
    Ok(QuantModel { source_dim: values.len(), chunk_size, scales, packed: pack(&codes) })
}

pub fn quantize_params(params: &ParamVector, chunk_size: usize) -> Result<QuantModel, QuantError> {
    quantize(params.values(), chunk_size)
}

fn pack(codes: &[i8]) -> Vec<u8> {
    codes
        .chunks(2)
        .map(|pair| nibble(pair[0]) | pair.get(1).map_or(0, |&c| nibble(c) << 4))
        .collect()
}

impl QuantModel {
    /// Validated construction from explicit codes.
    pub fn from_parts(source_dim: usize, chunk_size: usize, scales: Vec<f32>, codes: &[i8]) -> Result<Self, QuantError> {
        if chunk_size == 0 {
            return Err(QuantError::ChunkSize);
        }
        if codes.len() != source_dim {
            return Err(QuantError::Layout(format!("{} codes for dimension {source_dim}", codes.len())));
        }
        if codes.iter().any(|c| !(-MAX_CODE..=MAX_CODE).contains(c)) {
            return Err(QuantError::Codec("code outside [-7, 7]".into()));
        }
        let model = Self { source_dim, chunk_size, scales, packed: pack(codes) };
        model.validate_scales()?;
        Ok(model)
    }

    fn validate_scales(&self) -> Result<(), QuantError> {
        if self.scales.len() != self.source_dim.div_ceil(self.chunk_size) {
            return Err(QuantError::Layout(format!(
                "{} scales for {} chunks",
                self.scales.len(),
                self.source_dim.div_ceil(self.chunk_size)
            )));
        }
        if self.scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(QuantError::Codec("scale must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn source_dim(&self) -> usize {
        self.source_dim
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn num_chunks(&self) -> usize {
        self.scales.len()
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn code(&self, i: usize) -> i8 {
        let byte = self.packed[i / 2];
        let n = if i % 2 == 0 { byte & 0x0f } else { byte >> 4 };
        from_nibble(n).expect("packing validated at construction")
    }

    pub fn codes(&self) -> Vec<i8> {
        (0..self.source_dim).map(|i| self.code(i)).collect()
    }

    pub fn chunk_range(&self, chunk: usize) -> std::ops::Range<usize> {
        let start = chunk * self.chunk_size;
        start..(start + self.chunk_size).min(self.source_dim)
    }

    pub fn chunk(&self, chunk: usize) -> QuantChunk {
        QuantChunk {
            scale: self.scales[chunk],
            codes: self.chunk_range(chunk).map(|i| self.code(i)).collect(),
        }
    }

    /// `code × scale` per parameter. Exact in f32 by the scale rounding rule.
    pub fn dequantize_values(&self) -> Vec<f32> {
        (0..self.source_dim)
            .map(|i| self.code(i) as f32 * self.scales[i / self.chunk_size])
            .collect()
    }

    pub fn dequantize(&self, layout: &Layout) -> Result<ParamVector, QuantError> {
        if layout.dim() != self.source_dim {
            return Err(QuantError::Layout(format!(
                "layout has {} parameters, quantized model {}",
                layout.dim(),
                self.source_dim
            )));
        }
        Ok(ParamVector::new(self.dequantize_values(), layout.clone())?)
    }

    /// Header (`source_dim`, `chunk_size` as u64 LE), scales (f32 LE), then
    /// the packed nibbles.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(16 + 4 * self.scales.len() + self.packed.len());
        w.u64(self.source_dim as u64).u64(self.chunk_size as u64);
        for &s in &self.scales {
            w.f32(s);
        }
        w.raw(&self.packed);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, QuantError> {
        let mut r = Reader::new(bytes);
        let source_dim = r.len_u64(bytes.len() * 2)?;
        let chunk_size = r.len_u64(usize::MAX)?;
        if chunk_size == 0 {
            return Err(QuantError::ChunkSize);
        }
        let n_chunks = source_dim.div_ceil(chunk_size);
        let scales = (0..n_chunks).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
        let packed = r.take(source_dim.div_ceil(2))?.to_vec();
        r.finish()?;
        if source_dim % 2 == 1 && packed.last().is_some_and(|b| b >> 4 != 0) {
            return Err(QuantError::Codec("non-zero padding nibble".into()));
        }
        let model = Self { source_dim, chunk_size, scales, packed };
        model.validate_scales()?;
        if (0..source_dim).any(|i| {
            let b = model.packed[i / 2];
            from_nibble(if i % 2 == 0 { b & 0x0f } else { b >> 4 }).is_none()
        }) {
            return Err(QuantError::Codec("nibble -8 is not a valid code".into()));
        }
        Ok(model)
    }

    pub fn hash(&self) -> Hash256 {
        Hash256::of(&self.to_bytes())
    }

    /// Size of the serialized model in bytes.
    pub fn encoded_len(&self) -> usize {
        16 + 4 * self.scales.len() + self.packed.len()
    }
}

/// Mean loss of the dequantized model: definitionally `forward(dequantize(q))`.
pub fn quantized_loss(mlp: &Mlp, q: &QuantModel, batch: &Batch<'_>) -> Result<f32, QuantError> {
    let params = q.dequantize(mlp.layout())?;
    Ok(mlp.loss(&params, batch)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Consistency {
    Pass,
    /// First offending position within the compared slice.
    Fail { index: usize },
}

/// Whether full-precision values agree with a quantized chunk:
/// `|leaf[j] − code[j]·scale| ≤ scale/2 + slack` for every `j`, evaluated
/// exactly in f64.
pub fn check_consistency(leaf: &[f32], chunk: &QuantChunk, policy: &QuantPolicy) -> Result<Consistency, QuantError> {
    if leaf.len() != chunk.codes.len() {
        return Err(QuantError::Layout(format!(
            "leaf has {} values, chunk {} codes",
            leaf.len(),
            chunk.codes.len()
        )));
    }
    let scale = chunk.scale as f64;
    let bound = scale / 2.0 + policy.consistency_slack as f64;
    let bad = leaf.iter().zip(&chunk.codes).position(|(&w, &c)| {
        let err = (w as f64 - c as f64 * scale).abs();
        // NaN leaves never pass.
        let within = err <= bound;
        !within
    });
    Ok(bad.map_or(Consistency::Pass, |index| Consistency::Fail { index }))
}

/// Check a run of parameters starting at `first_param` against every quant
/// chunk it covers. `first_param` and the run length must align with chunk
/// boundaries (except for the final partial chunk).
pub fn check_region(values: &[f32], first_param: usize, q: &QuantModel, policy: &QuantPolicy) -> Result<Consistency, QuantError> {
    let cs = q.chunk_size();
    let end = first_param + values.len();
    if first_param % cs != 0 || end > q.source_dim() || (end % cs != 0 && end != q.source_dim()) {
        return Err(QuantError::Layout(format!(
            "region {first_param}..{end} does not align with chunk size {cs} over {} parameters",
            q.source_dim()
        )));
    }
    let mut offset = 0;
    for chunk in first_param / cs..end.div_ceil(cs) {
        let qc = q.chunk(chunk);
        let len = qc.codes.len();
        if let Consistency::Fail { index } = check_consistency(&values[offset..offset + len], &qc, policy)? {
            return Ok(Consistency::Fail { index: offset + index });
        }
        offset += len;
    }
    Ok(Consistency::Pass)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChunkPatch {
    pub index: usize,
    pub scale: f32,
    pub codes: Vec<i8>,
}

/// Changed chunks between two consecutive quantized models.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantDiff {
    pub base_hash: Hash256,
    pub changed: Vec<ChunkPatch>,
}

pub fn diff(base: &QuantModel, next: &QuantModel) -> Result<QuantDiff, QuantError> {
    if base.source_dim != next.source_dim || base.chunk_size != next.chunk_size {
        return Err(QuantError::Layout("models differ in dimension or chunking".into()));
    }
    let changed = (0..base.num_chunks())
        .filter_map(|c| {
            let (a, b) = (base.chunk(c), next.chunk(c));
            (a.scale.to_bits() != b.scale.to_bits() || a.codes != b.codes)
                .then_some(ChunkPatch { index: c, scale: b.scale, codes: b.codes })
        })
        .collect();
    Ok(QuantDiff { base_hash: base.hash(), changed })
}

pub fn apply(base: &QuantModel, patch: &QuantDiff) -> Result<QuantModel, QuantError> {
    let actual = base.hash();
    if actual != patch.base_hash {
        return Err(QuantError::WrongPredecessor { expected: patch.base_hash, actual });
    }
    let mut codes = base.codes();
    let mut scales = base.scales.clone();
    let mut last = None;
    for p in &patch.changed {
        if p.index >= base.num_chunks() || last.is_some_and(|l| p.index <= l) {
            return Err(QuantError::Layout(format!("chunk index {} out of order or range", p.index)));
        }
        let range = base.chunk_range(p.index);
        if p.codes.len() != range.len() {
            return Err(QuantError::Layout(format!("patch for chunk {} has wrong length", p.index)));
        }
        codes[range].copy_from_slice(&p.codes);
        scales[p.index] = p.scale;
        last = Some(p.index);
    }
    QuantModel::from_parts(base.source_dim, base.chunk_size, scales, &codes)
}

impl QuantDiff {
    /// Base hash, patch count (u64 LE), then per patch: chunk index (u64 LE),
    /// scale (f32 LE), code count (u64 LE) and packed codes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(self.base_hash.as_bytes()).u64(self.changed.len() as u64);
        for p in &self.changed {
            w.u64(p.index as u64).f32(p.scale).u64(p.codes.len() as u64).raw(&pack(&p.codes));
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, QuantError> {
        let mut r = Reader::new(bytes);
        let base_hash = r.hash()?;
        let n = r.len_u64(bytes.len())?;
        let mut changed = Vec::with_capacity(n);
        for _ in 0..n {
            let index = r.len_u64(usize::MAX)?;
            let scale = r.f32()?;
            let len = r.len_u64(bytes.len() * 2)?;
            let packed = r.take(len.div_ceil(2))?;
            let codes = (0..len)
                .map(|i| {
                    let b = packed[i / 2];
                    from_nibble(if i % 2 == 0 { b & 0x0f } else { b >> 4 })
                        .ok_or_else(|| QuantError::Codec("invalid nibble in diff".into()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            changed.push(ChunkPatch { index, scale, codes });
        }
        r.finish()?;
        Ok(Self { base_hash, changed })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_zero_params() {
        let q = quantize(&[0.0; 10], 4).unwrap();
        assert_eq!(q.num_chunks(), 3);
        assert!(q.codes().iter().all(|&c| c == 0));
        assert!(q.scales().iter().all(|&s| s == 0.0));
        assert_eq!(q.dequantize_values(), vec![0.0; 10]);
    }

    #[test]
    fn hand_example_with_ties_to_even() {
        let q = quantize(&[7.0, -3.5, 0.0], 3).unwrap();
        assert_eq!(q.scales(), &[1.0]);
        assert_eq!(q.codes(), vec![7, -4, 0]);
        assert_eq!(q.dequantize_values(), vec![7.0, -4.0, 0.0]);
        // 2.5 → 2 and -0.5 → 0 under ties-to-even.
        let q = quantize(&[7.0, 2.5, -0.5], 3).unwrap();
        assert_eq!(q.codes(), vec![7, 2, 0]);
    }

    #[test]
    fn packing_is_low_nibble_first_twos_complement() {
        let q = QuantModel::from_parts(3, 3, vec![1.0], &[7, -4, -1]).unwrap();
        let bytes = q.to_bytes();
        assert_eq!(&bytes[0..8], &3u64.to_le_bytes());
        assert_eq!(&bytes[8..16], &3u64.to_le_bytes());
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[20..], &[0xC7, 0x0F]);
        assert_eq!(QuantModel::from_bytes(&bytes).unwrap(), q);
        assert_eq!(q.encoded_len(), bytes.len());
    }

    #[test]
    fn corrupted_packing_is_rejected() {
        let q = QuantModel::from_parts(3, 3, vec![1.0], &[7, -4, -1]).unwrap();
        let mut bytes = q.to_bytes();
        *bytes.last_mut().unwrap() |= 0x30;
        assert!(matches!(QuantModel::from_bytes(&bytes), Err(QuantError::Codec(_))));
        let mut bytes = q.to_bytes();
        bytes[20] = 0x08;
        assert!(matches!(QuantModel::from_bytes(&bytes), Err(QuantError::Codec(_))));
        let bytes = q.to_bytes();
        assert!(QuantModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(QuantModel::from_parts(2, 2, vec![1.0], &[8, 0]).is_err());
        assert!(QuantModel::from_parts(2, 2, vec![f32::NAN], &[1, 0]).is_err());
    }

    #[test]
    fn scale_rounding_keeps_products_exact() {
        for v in [0.1f32, 1.0 / 3.0, 123.456, 1e-30, 3.4e37] {
            let s = round_scale_up(v);
            assert!(s >= v);
            for c in -7..=7 {
                assert_eq!((c as f32 * s) as f64, c as f64 * s as f64);
            }
        }
    }

    #[test]
    fn consistency_checks() {
        let policy = QuantPolicy::default();
        let leaf = [0.3f32, -0.2, 0.05, 0.7];
        let q = quantize(&leaf, 4).unwrap();
        assert_eq!(check_consistency(&leaf, &q.chunk(0), &policy).unwrap(), Consistency::Pass);

        let mut bad = leaf;
        bad[2] += 2.0 * q.scales()[0];
        assert_eq!(
            check_consistency(&bad, &q.chunk(0), &policy).unwrap(),
            Consistency::Fail { index: 2 }
        );

        let zero = QuantChunk { scale: 0.0, codes: vec![0; 4] };
        assert_eq!(check_consistency(&[0.0; 4], &zero, &policy).unwrap(), Consistency::Pass);
        assert!(matches!(check_consistency(&[0.0; 3], &zero, &policy), Err(QuantError::Layout(_))));

        let slack = QuantPolicy { consistency_slack: 2.0 * q.scales()[0], ..policy };
        assert_eq!(check_consistency(&bad, &q.chunk(0), &slack).unwrap(), Consistency::Pass);
    }

    #[test]
    fn region_check_spans_chunks_and_reports_offset() {
        let values: Vec<f32> = (0..10).map(|i| (i as f32 - 4.5) / 3.0).collect();
        let q = quantize(&values, 4).unwrap();
        let policy = QuantPolicy::default();
        assert_eq!(check_region(&values[4..10], 4, &q, &policy).unwrap(), Consistency::Pass);
        let mut tampered = values[4..10].to_vec();
        tampered[5] += 10.0;
        assert_eq!(check_region(&tampered, 4, &q, &policy).unwrap(), Consistency::Fail { index: 5 });
        assert!(check_region(&values[2..6], 2, &q, &policy).is_err());
    }

    #[test]
    fn diff_examples_and_wrong_predecessor() {
        let a = quantize(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2).unwrap();
        let d = diff(&a, &a).unwrap();
        assert!(d.changed.is_empty());
        assert_eq!(apply(&a, &d).unwrap(), a);

        let b = quantize(&[1.0, 2.0, 3.0, -4.0, 5.0, 6.0], 2).unwrap();
        let d = diff(&a, &b).unwrap();
        assert_eq!(d.changed.iter().map(|p| p.index).collect::<Vec<_>>(), vec![1]);
        assert_eq!(apply(&a, &d).unwrap(), b);
        assert_eq!(QuantDiff::from_bytes(&d.to_bytes()).unwrap(), d);

        assert!(matches!(apply(&b, &d), Err(QuantError::WrongPredecessor { .. })));
        let c = quantize(&[1.0; 6], 3).unwrap();
        assert!(diff(&a, &c).is_err());
    }

    #[test]
    fn quantized_loss_equals_forward_of_dequantized() {
        use crate::model::{Architecture, DatasetSpec, LossKind};
        use crate::randomness::SeedRng;
        let mlp = Mlp::new(Architecture { inputs: 8, hidden: vec![16], outputs: 2, loss: LossKind::Mse }).unwrap();
        let ds = DatasetSpec::toy_regression().generate().unwrap();
        let zero = quantize(&vec![0.0; mlp.layout().dim()], 16).unwrap();
        assert_eq!(
            quantized_loss(&mlp, &zero, &ds.full()).unwrap().to_bits(),
            mlp.loss(&ParamVector::zeros(mlp.layout().clone()), &ds.full()).unwrap().to_bits()
        );
        // Parameters already on the grid quantize losslessly.
        let p = mlp.init(&mut SeedRng::from_label(b"t", 0));
        let grid = quantize_params(&p, 16).unwrap().dequantize(mlp.layout()).unwrap();
        let q = quantize_params(&grid, 16).unwrap();
        assert_eq!(q.dequantize_values(), grid.values());
        assert_eq!(
            quantized_loss(&mlp, &q, &ds.full()).unwrap().to_bits(),
            mlp.loss(&grid, &ds.full()).unwrap().to_bits()
        );
    }
}
