//! Parameter storage: checkpoint I/O, flat parameter vectors, task deltas
//! and the vector algebra everything else is built on.

pub mod checkpoint;
pub mod layout;
pub mod vecops;

use std::sync::Arc;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, DType, Tensor};
pub use layout::{LayerLayout, LayoutEntry};
pub use vecops::{add_scaled, add_scaled_in_place, compensated_sum, inner_product, norm};

use crate::error::{MdmError, Result};
use crate::hash::{self, hash_f64s};

/// Slices whose RMS falls below this are left unscaled by [`normalize_delta`].
pub const EPS_SCALE: f64 = 1e-12;

/// A flat model parameter vector together with the layer layout it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
    layout: Arc<LayerLayout>,
}

impl ParameterVector {
    pub fn new(values: Vec<f64>, layout: Arc<LayerLayout>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(MdmError::LengthMismatch {
                left: values.len(),
                right: layout.total_len(),
            });
        }
        check_finite(&values, &layout)?;
        Ok(Self { values, layout })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Arc<LayerLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slice(&self, layer: &str) -> Option<&[f64]> {
        self.layout.get(layer).map(|e| &self.values[e.range()])
    }

    /// FNV-1a over layer names, shapes and value bytes.
    pub fn content_hash(&self) -> u64 {
        let mut bytes = Vec::new();
        for e in self.layout.entries() {
            bytes.extend_from_slice(e.name.as_bytes());
            bytes.push(0);
            for d in &e.shape {
                bytes.extend_from_slice(&(*d as u64).to_le_bytes());
            }
        }
        bytes.extend_from_slice(&hash_f64s(&self.values).to_le_bytes());
        hash::fnv1a(&bytes)
    }
}

fn check_finite(values: &[f64], layout: &LayerLayout) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        let entry = layout.entries().iter().find(|e| e.range().contains(&i));
        return Err(MdmError::NonFinite {
            layer: entry.map(|e| e.name.clone()).unwrap_or_default(),
            index: entry.map(|e| i - e.offset).unwrap_or(i),
        });
    }
    Ok(())
}

/// Concatenates the tensors of `ckpt` in lexicographic layer-name order.
pub fn flatten(ckpt: &Checkpoint) -> Result<ParameterVector> {
    let layout = LayerLayout::from_shapes(
        ckpt.tensors
            .iter()
            .map(|(name, t)| (name.clone(), t.shape().to_vec())),
    )?;
    let mut values = Vec::with_capacity(layout.total_len());
    for t in ckpt.tensors.values() {
        values.extend_from_slice(t.data());
    }
    ParameterVector::new(values, Arc::new(layout))
}

/// Inverse of [`flatten`]. Tensors come back as `f64` with no metadata.
pub fn unflatten(pv: &ParameterVector) -> Result<Checkpoint> {
    values_to_checkpoint(&pv.values, &pv.layout)
}

pub(crate) fn values_to_checkpoint(values: &[f64], layout: &LayerLayout) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::new();
    for e in layout.entries() {
        ckpt.insert(
            e.name.clone(),
            Tensor::f64(&e.name, e.shape.clone(), values[e.range()].to_vec())?,
        );
    }
    Ok(ckpt)
}

/// A task delta, raw or orthogonalized.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaRecord {
    pub model_id: String,
    values: Vec<f64>,
    layout: Arc<LayerLayout>,
    /// One positive factor per layout entry, empty when unnormalized.
    pub scale_factors: Vec<f64>,
    pub orthogonalized: bool,
    pub source_hash: u64,
}

impl DeltaRecord {
    pub fn new(
        model_id: impl Into<String>,
        values: Vec<f64>,
        layout: Arc<LayerLayout>,
    ) -> Result<Self> {
        let model_id = model_id.into();
        if values.len() != layout.total_len() {
            return Err(MdmError::LengthMismatch {
                left: values.len(),
                right: layout.total_len(),
            });
        }
        check_finite(&values, &layout)?;
        Ok(Self {
            model_id,
            values,
            layout,
            scale_factors: Vec::new(),
            orthogonalized: false,
            source_hash: 0,
        })
    }

    /// Convenience constructor over a single anonymous layer.
    pub fn from_vec(model_id: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let layout = Arc::new(LayerLayout::single("delta", values.len()));
        Self::new(model_id, values, layout)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &Arc<LayerLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        vecops::norm(&self.values)
    }

    pub fn is_normalized(&self) -> bool {
        !self.scale_factors.is_empty()
    }

    /// FNV-1a over the value bytes; identifies the exact vector applied in a merge.
    pub fn content_hash(&self) -> u64 {
        hash_f64s(&self.values)
    }

    /// Same record with different values; scale factors and flags carry over.
    pub(crate) fn with_values(&self, values: Vec<f64>) -> Self {
        Self {
            model_id: self.model_id.clone(),
            values,
            layout: self.layout.clone(),
            scale_factors: self.scale_factors.clone(),
            orthogonalized: self.orthogonalized,
            source_hash: self.source_hash,
        }
    }

    #[cfg(test)]
    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = values_to_checkpoint(&self.values, &self.layout)?;
        ckpt.set_meta("kind", "delta");
        ckpt.set_meta("model_id", self.model_id.clone());
        ckpt.set_meta("orthogonalized", self.orthogonalized.to_string());
        ckpt.set_meta("source_hash", hash::to_hex(self.source_hash));
        if !self.scale_factors.is_empty() {
            let s: Vec<String> = self.scale_factors.iter().map(|f| f.to_string()).collect();
            ckpt.set_meta("scale_factors", s.join(","));
        }
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let pv = flatten(ckpt)?;
        let model_id = ckpt.require_meta("model_id")?.to_string();
        let orthogonalized = match ckpt.meta("orthogonalized") {
            None | Some("false") => false,
            Some("true") => true,
            Some(other) => {
                return Err(MdmError::Format(format!(
                    "bad `orthogonalized` value `{other}`"
                )))
            }
        };
        let source_hash = match ckpt.meta("source_hash") {
            None => 0,
            Some(s) => hash::from_hex(s)
                .ok_or_else(|| MdmError::Format(format!("bad source_hash `{s}`")))?,
        };
        let scale_factors = match ckpt.meta("scale_factors") {
            None | Some("") => Vec::new(),
            Some(s) => s
                .split(',')
                .map(|x| {
                    x.parse::<f64>()
                        .map_err(|_| MdmError::Format(format!("bad scale factor `{x}`")))
                })
                .collect::<Result<Vec<_>>>()?,
        };
        let ParameterVector { values, layout } = pv;
        let rec = DeltaRecord {
            model_id,
            values,
            layout,
            scale_factors,
            orthogonalized,
            source_hash,
        };
        rec.validate_scale_factors()?;
        Ok(rec)
    }

    fn validate_scale_factors(&self) -> Result<()> {
        if self.scale_factors.is_empty() {
            return Ok(());
        }
        if self.scale_factors.len() != self.layout.len() {
            return Err(MdmError::Format(format!(
                "delta `{}` has {} scale factors for {} layers",
                self.model_id,
                self.scale_factors.len(),
                self.layout.len()
            )));
        }
        if self.scale_factors.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(MdmError::Format(format!(
                "delta `{}` has a non-positive scale factor",
                self.model_id
            )));
        }
        Ok(())
    }
}

/// `theta_i - theta_base`, elementwise.
pub fn extract_delta(
    model_id: impl Into<String>,
    theta_i: &ParameterVector,
    theta_base: &ParameterVector,
) -> Result<DeltaRecord> {
    theta_i
        .layout
        .ensure_same(&theta_base.layout, "extract_delta")?;
    let values = theta_i
        .values
        .iter()
        .zip(&theta_base.values)
        .map(|(a, b)| a - b)
        .collect();
    let mut rec = DeltaRecord::new(model_id, values, theta_i.layout.clone())?;
    rec.source_hash = theta_i.content_hash();
    Ok(rec)
}

/// `theta_base + delta`; the inverse of [`extract_delta`].
pub fn apply_delta(theta_base: &ParameterVector, delta: &DeltaRecord) -> Result<ParameterVector> {
    theta_base.layout.ensure_same(&delta.layout, "apply_delta")?;
    let values = add_scaled(&theta_base.values, &delta.values, 1.0)?;
    ParameterVector::new(values, theta_base.layout.clone())
}

/// Divides each layer slice by its root-mean-square, recording the factors.
pub fn normalize_delta(d: &DeltaRecord) -> Result<DeltaRecord> {
    if d.is_normalized() {
        return Err(MdmError::invalid(format!(
            "delta `{}` is already normalized",
            d.model_id
        )));
    }
    let mut out = d.clone();
    let mut factors = Vec::with_capacity(d.layout.len());
    for e in d.layout.entries() {
        let slice = &mut out.values[e.range()];
        let rms = if slice.is_empty() {
            0.0
        } else {
            (vecops::dot(slice, slice) / slice.len() as f64).sqrt()
        };
        if rms < EPS_SCALE {
            factors.push(1.0);
        } else {
            slice.iter_mut().for_each(|v| *v /= rms);
            factors.push(rms);
        }
    }
    out.scale_factors = factors;
    Ok(out)
}

/// Multiplies each layer slice back by its stored factor.
pub fn denormalize_delta(d: &DeltaRecord) -> Result<DeltaRecord> {
    if !d.is_normalized() {
        return Err(MdmError::MissingScaleFactors(d.model_id.clone()));
    }
    d.validate_scale_factors()?;
    let mut out = d.clone();
    for (e, &f) in d.layout.entries().iter().zip(&d.scale_factors) {
        out.values[e.range()].iter_mut().for_each(|v| *v *= f);
    }
    out.scale_factors.clear();
    Ok(out)
}
