use std::collections::BTreeSet;
use std::ops::Range;

use crate::error::{MdmError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

impl LayoutEntry {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Ordered, contiguous map from layer names to slices of a flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct LayerLayout {
    entries: Vec<LayoutEntry>,
    total: usize,
}

pub(crate) fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

impl LayerLayout {
    /// Builds a layout from `(name, shape)` pairs in the given order,
    /// assigning contiguous offsets.
    pub fn from_shapes<I, S>(layers: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<usize>)>,
        S: Into<String>,
    {
        let mut seen = BTreeSet::new();
        let mut entries = Vec::new();
        let mut offset = 0usize;
        for (name, shape) in layers {
            let name = name.into();
            if !seen.insert(name.clone()) {
                return Err(MdmError::LayoutMismatch(format!(
                    "duplicate layer name `{name}`"
                )));
            }
            let len = element_count(&shape).ok_or_else(|| {
                MdmError::Format(format!("layer `{name}` element count overflows"))
            })?;
            entries.push(LayoutEntry {
                name,
                shape,
                offset,
                len,
            });
            offset = offset
                .checked_add(len)
                .ok_or_else(|| MdmError::Format("layout length overflows".into()))?;
        }
        Ok(Self {
            entries,
            total: offset,
        })
    }

    /// A one-layer layout named `name` with shape `[len]`.
    pub fn single(name: &str, len: usize) -> Self {
        Self {
            entries: vec![LayoutEntry {
                name: name.to_string(),
                shape: vec![len],
                offset: 0,
                len,
            }],
            total: len,
        }
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub(crate) fn ensure_same(&self, other: &LayerLayout, what: &str) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(MdmError::LayoutMismatch(format!(
                "{what}: layouts differ ({} layers/{} values vs {} layers/{} values)",
                self.len(),
                self.total,
                other.len(),
                other.total
            )))
        }
    }
}
