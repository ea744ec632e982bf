use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::codec::{Reader, Writer};
use crate::Hash256;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpan {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl LayerSpan {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named, contiguous, non-overlapping spans covering the parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    spans: Vec<LayerSpan>,
}

impl Layout {
    pub fn new(spans: Vec<LayerSpan>) -> Result<Self, ModelError> {
        let mut expected = 0;
        for span in &spans {
            if span.offset != expected {
                return Err(ModelError::Layout(format!(
                    "span {} starts at {} but previous span ends at {expected}",
                    span.name, span.offset
                )));
            }
            expected += span.len();
        }
        Ok(Self { spans })
    }

    /// Single anonymous span of `dim` values.
    pub fn flat(dim: usize) -> Self {
        Self { spans: vec![LayerSpan { name: "flat".into(), offset: 0, shape: vec![dim] }] }
    }

    pub fn spans(&self) -> &[LayerSpan] {
        &self.spans
    }

    pub fn dim(&self) -> usize {
        self.spans.iter().map(LayerSpan::len).sum()
    }

    pub fn span(&self, name: &str) -> Option<&LayerSpan> {
        self.spans.iter().find(|s| s.name == name)
    }

    pub fn encode(&self, w: &mut Writer) {
        w.u64(self.spans.len() as u64);
        for span in &self.spans {
            w.str(&span.name).u64(span.offset as u64).u64(span.shape.len() as u64);
            for &d in &span.shape {
                w.u64(d as u64);
            }
        }
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, ModelError> {
        let n = r.len_u64(r.remaining())?;
        let mut spans = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let offset = r.len_u64(usize::MAX)?;
            let rank = r.len_u64(r.remaining() / 8)?;
            let shape = (0..rank).map(|_| r.len_u64(usize::MAX)).collect::<Result<Vec<_>, _>>()?;
            spans.push(LayerSpan { name, offset, shape });
        }
        Layout::new(spans)
    }
}

/// Full-precision model parameters together with their layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f32>,
    layout: Layout,
}

impl ParamVector {
    pub fn new(values: Vec<f32>, layout: Layout) -> Result<Self, ModelError> {
        if layout.dim() != values.len() {
            return Err(ModelError::Layout(format!(
                "layout covers {} values but {} were supplied",
                layout.dim(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite(i));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Layout) -> Self {
        Self { values: vec![0.0; layout.dim()], layout }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn span_values(&self, name: &str) -> Option<&[f32]> {
        self.layout.span(name).map(|s| &self.values[s.range()])
    }

    /// Replace the values, keeping the layout.
    pub fn with_values(&self, values: Vec<f32>) -> Result<Self, ModelError> {
        Self::new(values, self.layout.clone())
    }

    /// Raw little-endian f32 bytes in layout order. This is what the Merkle
    /// commitment chunks into leaves.
    pub fn value_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn values_from_bytes(bytes: &[u8]) -> Option<Vec<f32>> {
        if bytes.len() % 4 != 0 {
            return None;
        }
        Some(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    /// Canonical serialization: layout header followed by the values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(64 + self.values.len() * 4);
        self.layout.encode(&mut w);
        for &v in &self.values {
            w.f32(v);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader::new(bytes);
        let layout = Layout::decode(&mut r)?;
        if r.remaining() != layout.dim() * 4 {
            return Err(ModelError::Layout(format!(
                "expected {} value bytes, found {}",
                layout.dim() * 4,
                r.remaining()
            )));
        }
        let values = (0..layout.dim()).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
        r.finish()?;
        Self::new(values, layout)
    }

    pub fn content_hash(&self) -> Hash256 {
        Hash256::of(&self.to_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_span_layout() -> Layout {
        Layout::new(vec![
            LayerSpan { name: "w".into(), offset: 0, shape: vec![2, 3] },
            LayerSpan { name: "b".into(), offset: 6, shape: vec![2] },
        ])
        .unwrap()
    }

    #[test]
    fn layout_must_be_contiguous() {
        assert_eq!(two_span_layout().dim(), 8);
        let gap = Layout::new(vec![
            LayerSpan { name: "w".into(), offset: 0, shape: vec![2] },
            LayerSpan { name: "b".into(), offset: 3, shape: vec![1] },
        ]);
        assert!(matches!(gap, Err(ModelError::Layout(_))));
    }

    #[test]
    fn params_reject_nan_and_wrong_length() {
        let l = two_span_layout();
        assert!(matches!(ParamVector::new(vec![0.0; 7], l.clone()), Err(ModelError::Layout(_))));
        let mut v = vec![0.0; 8];
        v[5] = f32::NAN;
        assert_eq!(ParamVector::new(v, l), Err(ModelError::NonFinite(5)));
    }

    #[test]
    fn canonical_bytes_layout() {
        let p = ParamVector::new((0..8).map(|i| i as f32).collect(), two_span_layout()).unwrap();
        let bytes = p.to_bytes();
        // span count, then "w": name len, name, offset, rank, dims.
        assert_eq!(&bytes[0..8], &2u64.to_le_bytes());
        assert_eq!(&bytes[8..16], &1u64.to_le_bytes());
        assert_eq!(bytes[16], b'w');
        assert_eq!(&bytes[bytes.len() - 4..], &7.0f32.to_le_bytes());
        assert_eq!(ParamVector::from_bytes(&bytes).unwrap(), p);
        assert_eq!(p.span_values("b").unwrap(), &[6.0, 7.0]);
    }
}
