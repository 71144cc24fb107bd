//! Sequential modified Gram-Schmidt over task deltas.
//!
//! Members are stored unnormalized: each member is the residual of its raw
//! delta after removing the components along all earlier members, so it can
//! be added to or subtracted from a merged model with its natural scale.
//! The residual is updated after every single projection (modified form),
//! and a second sweep is run whenever the first one cancels more than half
//! of the vector's norm, which keeps pairwise cosines at rounding level even
//! for nearly dependent deltas.

use std::collections::BTreeSet;
use std::sync::Arc;

use crate::error::{MdmError, Result};
use crate::params::vecops::{axpy, dot, norm};
use crate::params::{DeltaRecord, LayerLayout};

/// Pairwise |cosine| bound every basis must satisfy.
pub const TOL_ORTH: f64 = 1e-8;
/// Relative residual norm at or below which a delta counts as degenerate.
pub const EPS_DROP: f64 = 1e-10;
/// Floor on squared norms in projection denominators.
pub const EPS_REG: f64 = 1e-30;

const REPROJECT_RATIO: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct DroppedDelta {
    pub model_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalBasis {
    members: Vec<DeltaRecord>,
    norms_sq: Vec<f64>,
    dropped: Vec<DroppedDelta>,
    eps_drop: f64,
    order_log: Vec<String>,
    layout: Option<Arc<LayerLayout>>,
}

impl Default for OrthogonalBasis {
    fn default() -> Self {
        Self::new(EPS_DROP)
    }
}

/// Result of projecting a delta onto the null space of a basis.
#[derive(Debug, Clone)]
pub enum Projection {
    Accepted {
        residual: DeltaRecord,
        /// Coefficient of each existing member removed from the delta, so that
        /// `delta = sum(coefficients[j] * member[j]) + residual`.
        coefficients: Vec<f64>,
    },
    Degenerate {
        model_id: String,
        residual_norm: f64,
        original_norm: f64,
    },
}

impl Projection {
    pub fn is_degenerate(&self) -> bool {
        matches!(self, Projection::Degenerate { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalityReport {
    pub max_abs_cosine: f64,
    pub worst_pair: Option<(String, String)>,
}

/// `<v,u> / max(|u|^2, EPS_REG) * u`.
pub fn project(v: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    crate::error::check_len(v.len(), u.len())?;
    let nu = dot(u, u);
    if nu.sqrt() <= EPS_DROP {
        return Err(MdmError::Degenerate(format!(
            "projection direction has norm {:.3e}",
            nu.sqrt()
        )));
    }
    let c = dot(v, u) / nu.max(EPS_REG);
    Ok(u.iter().map(|x| c * x).collect())
}

impl OrthogonalBasis {
    pub fn new(eps_drop: f64) -> Self {
        Self {
            members: Vec::new(),
            norms_sq: Vec::new(),
            dropped: Vec::new(),
            eps_drop,
            order_log: Vec::new(),
            layout: None,
        }
    }

    pub fn members(&self) -> &[DeltaRecord] {
        &self.members
    }

    pub fn dropped(&self) -> &[DroppedDelta] {
        &self.dropped
    }

    pub fn order_log(&self) -> &[String] {
        &self.order_log
    }

    pub fn eps_drop(&self) -> f64 {
        self.eps_drop
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn layout(&self) -> Option<&Arc<LayerLayout>> {
        self.layout.as_ref()
    }

    pub fn member(&self, model_id: &str) -> Option<&DeltaRecord> {
        self.members.iter().find(|m| m.model_id == model_id)
    }

    pub fn position(&self, model_id: &str) -> Option<usize> {
        self.members.iter().position(|m| m.model_id == model_id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.members.iter().map(|m| m.model_id.as_str())
    }

    /// True if `model_id` is a member or was dropped earlier.
    pub fn knows(&self, model_id: &str) -> bool {
        self.member(model_id).is_some() || self.dropped.iter().any(|d| d.model_id == model_id)
    }

    fn check_compatible(&self, delta: &DeltaRecord) -> Result<()> {
        if self.knows(&delta.model_id) {
            return Err(MdmError::DuplicateId(delta.model_id.clone()));
        }
        if let Some(layout) = &self.layout {
            layout.ensure_same(delta.layout(), &format!("delta `{}`", delta.model_id))?;
        }
        Ok(())
    }

    /// Projects `delta` onto the orthogonal complement of the current members.
    pub fn project_onto_null_space(&self, delta: &DeltaRecord) -> Result<Projection> {
        self.check_compatible(delta)?;
        Ok(self.residual_of(delta, self.members.len()))
    }

    /// MGS residual of `delta` against the first `upto` members.
    fn residual_of(&self, delta: &DeltaRecord, upto: usize) -> Projection {
        let original_norm = delta.norm();
        let mut r = delta.values().to_vec();
        let mut coefficients = vec![0.0; upto];
        let mut before = original_norm;
        for _sweep in 0..2 {
            for j in 0..upto {
                let c = dot(&r, self.members[j].values()) / self.norms_sq[j].max(EPS_REG);
                axpy(&mut r, self.members[j].values(), -c);
                coefficients[j] += c;
            }
            let after = norm(&r);
            if upto == 0 || after >= REPROJECT_RATIO * before {
                break;
            }
            before = after;
        }
        let residual_norm = norm(&r);
        if residual_norm <= self.eps_drop * original_norm || residual_norm == 0.0 {
            return Projection::Degenerate {
                model_id: delta.model_id.clone(),
                residual_norm,
                original_norm,
            };
        }
        let mut residual = delta.with_values(r);
        residual.orthogonalized = true;
        Projection::Accepted {
            residual,
            coefficients,
        }
    }

    /// Appends an already-orthogonalized residual. Callers obtain it from
    /// [`OrthogonalBasis::project_onto_null_space`] on this same basis.
    pub(crate) fn push_member(&mut self, residual: DeltaRecord) {
        if self.layout.is_none() {
            self.layout = Some(residual.layout().clone());
        }
        self.norms_sq.push(dot(residual.values(), residual.values()));
        self.order_log.push(residual.model_id.clone());
        self.members.push(residual);
    }

    pub(crate) fn push_dropped(&mut self, model_id: String, reason: impl Into<String>) {
        self.order_log.push(model_id.clone());
        self.dropped.push(DroppedDelta {
            model_id,
            reason: reason.into(),
        });
    }

    /// Projects and admits `delta`; degenerate residuals go to the drop log.
    pub fn admit(&mut self, delta: &DeltaRecord) -> Result<Projection> {
        if delta.orthogonalized {
            return Err(MdmError::invalid(format!(
                "delta `{}` is already orthogonalized",
                delta.model_id
            )));
        }
        let p = self.project_onto_null_space(delta)?;
        match &p {
            Projection::Accepted { residual, .. } => self.push_member(residual.clone()),
            Projection::Degenerate { model_id, .. } => {
                if self.layout.is_none() {
                    self.layout = Some(delta.layout().clone());
                }
                self.push_dropped(model_id.clone(), "degenerate residual")
            }
        }
        Ok(p)
    }

    /// Removes a member; the remaining members are left untouched.
    pub(crate) fn remove_member(&mut self, model_id: &str) -> Option<DeltaRecord> {
        let i = self.position(model_id)?;
        self.norms_sq.remove(i);
        self.order_log.retain(|id| id != model_id);
        Some(self.members.remove(i))
    }

    /// Clears a drop-log entry so the id can be offered again.
    pub(crate) fn forget_dropped(&mut self, model_id: &str) {
        let before = self.dropped.len();
        self.dropped.retain(|d| d.model_id != model_id);
        if self.dropped.len() != before {
            self.order_log.retain(|id| id != model_id);
        }
    }

    /// Rebuilds a basis from stored parts, checking its invariants.
    pub fn from_parts(
        members: Vec<DeltaRecord>,
        dropped: Vec<DroppedDelta>,
        eps_drop: f64,
        order_log: Vec<String>,
    ) -> Result<Self> {
        let mut basis = Self::new(eps_drop);
        let mut seen = BTreeSet::new();
        for m in members {
            if !seen.insert(m.model_id.clone()) {
                return Err(MdmError::DuplicateId(m.model_id));
            }
            if let Some(l) = &basis.layout {
                l.ensure_same(m.layout(), "basis member")?;
            }
            if !(m.norm() > eps_drop) {
                return Err(MdmError::Degenerate(format!(
                    "member `{}` has norm {:.3e}",
                    m.model_id,
                    m.norm()
                )));
            }
            let mut m = m;
            m.orthogonalized = true;
            basis.push_member(m);
        }
        for d in dropped {
            if !seen.insert(d.model_id.clone()) {
                return Err(MdmError::DuplicateId(d.model_id));
            }
            basis.dropped.push(d);
        }
        let logged: BTreeSet<&String> = order_log.iter().collect();
        if logged.len() != order_log.len() || logged.len() != seen.len() {
            return Err(MdmError::Format(
                "order log does not match members and drop log".into(),
            ));
        }
        if let Some(id) = order_log.iter().find(|id| !seen.contains(*id)) {
            return Err(MdmError::Format(format!("order log names unknown `{id}`")));
        }
        // members must appear in order-log order
        let member_order: Vec<&str> = order_log
            .iter()
            .map(String::as_str)
            .filter(|id| basis.member(id).is_some())
            .collect();
        if member_order != basis.ids().collect::<Vec<_>>() {
            return Err(MdmError::Format(
                "members are not stored in order-log order".into(),
            ));
        }
        basis.order_log = order_log;
        Ok(basis)
    }
}

/// Orthogonalizes `deltas` in order with modified Gram-Schmidt.
pub fn orthogonalize_sequence(deltas: &[DeltaRecord]) -> Result<OrthogonalBasis> {
    orthogonalize_sequence_with(deltas, EPS_DROP)
}

pub fn orthogonalize_sequence_with(
    deltas: &[DeltaRecord],
    eps_drop: f64,
) -> Result<OrthogonalBasis> {
    let mut basis = OrthogonalBasis::new(eps_drop);
    for d in deltas {
        basis.admit(d)?;
    }
    Ok(basis)
}

/// Projects `new_delta` onto the null space of `basis` without modifying it.
pub fn project_onto_null_space(
    new_delta: &DeltaRecord,
    basis: &OrthogonalBasis,
) -> Result<Projection> {
    basis.project_onto_null_space(new_delta)
}

/// One more MGS pass over the members in insertion order.
pub fn reorthogonalize(basis: &OrthogonalBasis) -> OrthogonalBasis {
    let mut out = OrthogonalBasis::new(basis.eps_drop);
    out.layout = basis.layout.clone();
    out.dropped = basis.dropped.clone();
    for m in &basis.members {
        let n = out.members.len();
        match out.residual_of(m, n) {
            Projection::Accepted { residual, .. } => out.push_member(residual),
            Projection::Degenerate { model_id, .. } => out.dropped.push(DroppedDelta {
                model_id,
                reason: "degenerate after reorthogonalization".into(),
            }),
        }
    }
    // keep the original interleaving of members and dropped ids
    out.order_log = basis
        .order_log
        .iter()
        .filter(|id| out.knows(id))
        .cloned()
        .collect();
    out
}

/// Exhaustive pairwise normalized inner products.
pub fn orthogonality_check(basis: &OrthogonalBasis) -> OrthogonalityReport {
    let mut report = OrthogonalityReport {
        max_abs_cosine: 0.0,
        worst_pair: None,
    };
    let m = &basis.members;
    for i in 0..m.len() {
        for j in (i + 1)..m.len() {
            let denom = (basis.norms_sq[i] * basis.norms_sq[j]).sqrt();
            let c = if denom > 0.0 {
                (dot(m[i].values(), m[j].values()) / denom).abs()
            } else {
                0.0
            };
            if c > report.max_abs_cosine || report.worst_pair.is_none() {
                report.max_abs_cosine = c;
                report.worst_pair = Some((m[i].model_id.clone(), m[j].model_id.clone()));
            }
        }
    }
    report
}
