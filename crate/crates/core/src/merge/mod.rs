//! Merged-model assembly, continual integration and reversible removal.

pub mod ledger;
mod store;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

pub use ledger::{Ledger, LedgerAction, LedgerEntry};
pub use store::{load_basis, save_basis};

use crate::error::{MdmError, Result};
use crate::hash::{hash_f64s, to_hex};
use crate::orthogonal::{orthogonality_check, reorthogonalize, OrthogonalBasis, Projection, TOL_ORTH};
use crate::params::vecops::{axpy, dot, norm};
use crate::params::{DeltaRecord, ParameterVector};

/// Coefficient given to a freshly integrated model before any optimization.
pub const DEFAULT_ALPHA: f64 = 1.0;
/// Integrations between orthogonality checks.
pub const DEFAULT_REORTH_EVERY: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub enum IntegrateOutcome {
    Accepted { residual_norm: f64, delta_hash: u64 },
    Rejected { reason: String },
}

impl IntegrateOutcome {
    pub fn is_accepted(&self) -> bool {
        matches!(self, IntegrateOutcome::Accepted { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemovalReport {
    pub verified: bool,
    pub reasons: Vec<String>,
    /// `|<merged - base, archived>| / (|merged - base| * |archived|)`.
    pub residual_cosine: f64,
}

/// What folding the ledger over the archived deltas produces.
#[derive(Debug, Clone)]
pub struct Replay {
    pub members: Vec<(String, u64)>,
    pub alphas: BTreeMap<String, f64>,
    pub merged: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MergeState {
    base: Arc<ParameterVector>,
    base_hash: u64,
    basis: OrthogonalBasis,
    alphas: BTreeMap<String, f64>,
    ledger: Ledger,
    merged: Vec<f64>,
    /// Every orthogonal delta ever admitted, by content hash.
    vault: BTreeMap<u64, DeltaRecord>,
    operator: String,
    reorth_every: usize,
    since_reorth: usize,
}

fn check_alpha(id: &str, a: f64) -> Result<()> {
    if a.is_finite() {
        Ok(())
    } else {
        Err(MdmError::invalid(format!("alpha for `{id}` is not finite")))
    }
}

fn relative_distance(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    diff / norm(b).max(f64::MIN_POSITIVE)
}

impl MergeState {
    /// `theta = base + sum(alpha_i * member_i)` with a fresh ledger.
    pub fn merge(
        base: ParameterVector,
        basis: OrthogonalBasis,
        alphas: &BTreeMap<String, f64>,
        operator: &str,
    ) -> Result<Self> {
        for m in basis.members() {
            let a = *alphas
                .get(&m.model_id)
                .ok_or_else(|| MdmError::invalid(format!("no alpha for member `{}`", m.model_id)))?;
            check_alpha(&m.model_id, a)?;
            base.layout()
                .ensure_same(m.layout(), &format!("member `{}`", m.model_id))?;
        }
        if let Some(extra) = alphas.keys().find(|id| basis.member(id).is_none()) {
            return Err(MdmError::invalid(format!("alpha given for non-member `{extra}`")));
        }
        let base_hash = base.content_hash();
        let mut state = Self {
            base: Arc::new(base),
            base_hash,
            basis,
            alphas: alphas.clone(),
            ledger: Ledger::new(),
            merged: Vec::new(),
            vault: BTreeMap::new(),
            operator: operator.to_string(),
            reorth_every: DEFAULT_REORTH_EVERY,
            since_reorth: 0,
        };
        state.merged = state.assemble();
        let dropped: BTreeMap<&str, &str> = state
            .basis
            .dropped()
            .iter()
            .map(|d| (d.model_id.as_str(), d.reason.as_str()))
            .collect();
        let order: Vec<String> = state.basis.order_log().to_vec();
        for id in &order {
            if let Some(reason) = dropped.get(id.as_str()) {
                let outcome = Some(format!("rejected:{reason}"));
                state
                    .ledger
                    .record(LedgerAction::Merge, Some(id), None, None, operator, outcome);
            } else {
                let m = state.basis.member(id).expect("order log names a member").clone();
                let h = m.content_hash();
                state.ledger.record(
                    LedgerAction::Merge,
                    Some(id),
                    Some(state.alphas[id]),
                    Some(h),
                    operator,
                    None,
                );
                state.vault.insert(h, m);
            }
        }
        Ok(state)
    }

    /// A state over `base` with no members.
    pub fn empty(base: ParameterVector, operator: &str) -> Self {
        Self::merge(base, OrthogonalBasis::default(), &BTreeMap::new(), operator)
            .expect("empty merge cannot fail")
    }

    pub fn base(&self) -> &ParameterVector {
        &self.base
    }

    pub fn base_hash(&self) -> u64 {
        self.base_hash
    }

    pub fn basis(&self) -> &OrthogonalBasis {
        &self.basis
    }

    pub fn alphas(&self) -> &BTreeMap<String, f64> {
        &self.alphas
    }

    /// Coefficients in basis-member order.
    pub fn alpha_vector(&self) -> Vec<f64> {
        self.basis.ids().map(|id| self.alphas[id]).collect()
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn operator(&self) -> &str {
        &self.operator
    }

    pub fn set_operator(&mut self, operator: &str) {
        self.operator = operator.to_string();
    }

    /// Integrations between orthogonality checks; 0 disables the check.
    pub fn set_reorth_every(&mut self, n: usize) {
        self.reorth_every = n;
    }

    pub fn reorth_every(&self) -> usize {
        self.reorth_every
    }

    pub fn merged_values(&self) -> &[f64] {
        &self.merged
    }

    pub fn merged(&self) -> ParameterVector {
        ParameterVector::new(self.merged.clone(), self.base.layout().clone())
            .expect("merged vector keeps the base layout")
    }

    pub fn archived(&self, delta_hash: u64) -> Option<&DeltaRecord> {
        self.vault.get(&delta_hash)
    }

    /// From-scratch `base + sum(alpha_i * member_i)` in member order.
    pub fn assemble(&self) -> Vec<f64> {
        assemble_with(&self.base, &self.basis, |id| self.alphas[id])
    }

    /// Candidate parameters for arbitrary coefficients (member order).
    pub fn assemble_alphas(&self, alphas: &[f64]) -> Result<Vec<f64>> {
        crate::error::check_len(alphas.len(), self.basis.len())?;
        let mut out = self.base.values().to_vec();
        for (m, a) in self.basis.members().iter().zip(alphas) {
            axpy(&mut out, m.values(), *a);
        }
        Ok(out)
    }

    /// Replaces the incrementally maintained vector with a fresh assembly and
    /// returns the relative drift that was removed.
    pub fn recompute(&mut self) -> f64 {
        let fresh = self.assemble();
        let drift = relative_distance(&self.merged, &fresh);
        self.merged = fresh;
        drift
    }

    /// Projects a raw delta onto the null space of the members and adds it
    /// with coefficient `alpha`. A degenerate residual leaves the state
    /// unchanged apart from a rejection entry.
    pub fn integrate(&mut self, delta: &DeltaRecord, alpha: f64) -> Result<IntegrateOutcome> {
        if delta.orthogonalized {
            return Err(MdmError::invalid(format!(
                "delta `{}` is already orthogonalized; integrate expects a raw delta",
                delta.model_id
            )));
        }
        if self.alphas.contains_key(&delta.model_id) {
            return Err(MdmError::DuplicateId(delta.model_id.clone()));
        }
        check_alpha(&delta.model_id, alpha)?;
        self.base
            .layout()
            .ensure_same(delta.layout(), &format!("delta `{}`", delta.model_id))?;
        // dropped ids from the original merge may be retried
        let probe = if self.basis.knows(&delta.model_id) {
            let mut b = self.basis.clone();
            b.forget_dropped(&delta.model_id);
            b.project_onto_null_space(delta)?
        } else {
            self.basis.project_onto_null_space(delta)?
        };
        match probe {
            Projection::Accepted { residual, .. } => {
                let h = residual.content_hash();
                let residual_norm = residual.norm();
                axpy(&mut self.merged, residual.values(), alpha);
                self.basis.forget_dropped(&delta.model_id);
                self.basis.push_member(residual.clone());
                self.alphas.insert(delta.model_id.clone(), alpha);
                self.vault.insert(h, residual);
                self.ledger.record(
                    LedgerAction::Integrate,
                    Some(&delta.model_id),
                    Some(alpha),
                    Some(h),
                    &self.operator,
                    None,
                );
                self.since_reorth += 1;
                if self.reorth_every > 0 && self.since_reorth >= self.reorth_every {
                    self.since_reorth = 0;
                    if orthogonality_check(&self.basis).max_abs_cosine > TOL_ORTH {
                        self.reorthogonalize();
                    }
                }
                Ok(IntegrateOutcome::Accepted {
                    residual_norm,
                    delta_hash: h,
                })
            }
            Projection::Degenerate {
                residual_norm,
                original_norm,
                ..
            } => {
                let reason = format!(
                    "degenerate residual {residual_norm:.3e} of norm {original_norm:.3e}"
                );
                self.ledger.record(
                    LedgerAction::Integrate,
                    Some(&delta.model_id),
                    Some(alpha),
                    Some(delta.content_hash()),
                    &self.operator,
                    Some(format!("rejected:{reason}")),
                );
                Ok(IntegrateOutcome::Rejected { reason })
            }
        }
    }

    /// Subtracts `alpha_k * member_k` and removes the member. The removed
    /// vector stays archived for [`MergeState::verify_removal`] unless
    /// `purge` is set, which deletes every archived vector of that model.
    pub fn unmerge(&mut self, model_id: &str, purge: bool) -> Result<()> {
        let alpha = *self
            .alphas
            .get(model_id)
            .ok_or_else(|| MdmError::UnknownId(model_id.to_string()))?;
        let member = self
            .basis
            .remove_member(model_id)
            .expect("alphas and basis hold the same ids");
        axpy(&mut self.merged, member.values(), -alpha);
        self.alphas.remove(model_id);
        let h = member.content_hash();
        if purge {
            for old in self.episode_hashes(model_id) {
                self.vault.remove(&old);
            }
            self.vault.remove(&h);
        }
        self.ledger.record(
            LedgerAction::Unmerge,
            Some(model_id),
            Some(alpha),
            Some(h),
            &self.operator,
            purge.then(|| ledger::OUTCOME_PURGED.to_string()),
        );
        Ok(())
    }

    /// Hashes recorded for `model_id` since its latest admission.
    fn episode_hashes(&self, model_id: &str) -> Vec<u64> {
        let mut hashes = Vec::new();
        for e in self.ledger.entries() {
            if e.model_id.as_deref() != Some(model_id) || e.is_rejected() {
                continue;
            }
            if e.action.admits() {
                hashes.clear();
            }
            if let Some(h) = e.delta_hash {
                hashes.push(h);
            }
        }
        hashes
    }

    /// Sets one coefficient, adjusting the merged vector by the difference.
    pub fn reweight(&mut self, model_id: &str, alpha: f64) -> Result<()> {
        let old = *self
            .alphas
            .get(model_id)
            .ok_or_else(|| MdmError::UnknownId(model_id.to_string()))?;
        check_alpha(model_id, alpha)?;
        if alpha == old {
            return Ok(());
        }
        let member = self.basis.member(model_id).expect("member exists");
        axpy(&mut self.merged, member.values(), alpha - old);
        let h = member.content_hash();
        self.alphas.insert(model_id.to_string(), alpha);
        self.ledger.record(
            LedgerAction::Reweight,
            Some(model_id),
            Some(alpha),
            Some(h),
            &self.operator,
            None,
        );
        Ok(())
    }

    /// Applies a full coefficient vector in member order.
    pub fn reweight_all(&mut self, alphas: &[f64]) -> Result<()> {
        crate::error::check_len(alphas.len(), self.basis.len())?;
        for (id, a) in self.basis.ids().collect::<Vec<_>>().into_iter().zip(alphas) {
            check_alpha(id, *a)?;
        }
        let ids: Vec<String> = self.basis.ids().map(str::to_string).collect();
        for (id, a) in ids.iter().zip(alphas) {
            self.reweight(id, *a)?;
        }
        Ok(())
    }

    /// Re-runs Gram-Schmidt over the members and reassembles the merged
    /// vector. Returns the ids whose vectors changed.
    pub fn reorthogonalize(&mut self) -> Vec<String> {
        let fresh = reorthogonalize(&self.basis);
        let mut changed = Vec::new();
        for old in self.basis.members() {
            let id = old.model_id.as_str();
            match fresh.member(id) {
                Some(m) if m.values() == old.values() => {}
                Some(m) => {
                    let h = m.content_hash();
                    self.vault.insert(h, m.clone());
                    self.ledger.record(
                        LedgerAction::Reorthogonalize,
                        Some(id),
                        Some(self.alphas[id]),
                        Some(h),
                        &self.operator,
                        None,
                    );
                    changed.push(id.to_string());
                }
                None => {
                    let a = self.alphas.remove(id);
                    self.ledger.record(
                        LedgerAction::Reorthogonalize,
                        Some(id),
                        a,
                        Some(old.content_hash()),
                        &self.operator,
                        Some("dropped:degenerate after reorthogonalization".into()),
                    );
                    changed.push(id.to_string());
                }
            }
        }
        self.basis = fresh;
        self.merged = self.assemble();
        self.since_reorth = 0;
        changed
    }

    /// Folds the ledger over the archive from the base alone.
    pub fn replay(&self) -> Result<Replay> {
        replay(&self.base, self.ledger.entries(), &self.vault)
    }

    /// Checks that replay reproduces the members, coefficients and the
    /// merged vector (within `rel_tol` relative).
    pub fn check_replay(&self, rel_tol: f64) -> Result<()> {
        let r = self.replay()?;
        let current: Vec<(String, u64)> = self
            .basis
            .members()
            .iter()
            .map(|m| (m.model_id.clone(), m.content_hash()))
            .collect();
        if r.members != current {
            return Err(MdmError::Format(
                "ledger replay yields a different member list".into(),
            ));
        }
        if r.alphas.len() != self.alphas.len()
            || r.alphas
                .iter()
                .any(|(k, v)| self.alphas.get(k).map(|a| a.to_bits()) != Some(v.to_bits()))
        {
            return Err(MdmError::Format("ledger replay yields different alphas".into()));
        }
        let dist = relative_distance(&r.merged, &self.merged);
        if dist > rel_tol {
            return Err(MdmError::Numerical(format!(
                "replayed merged vector differs by {dist:.3e} relative"
            )));
        }
        Ok(())
    }

    /// Audits the removal of `model_id`: the ledger must pair its admission
    /// and removal with a continuous hash chain starting at
    /// `original_delta_hash`, the archived vector must match its hash, and
    /// the merged model must carry no component along it.
    pub fn verify_removal(&self, model_id: &str, original_delta_hash: u64) -> Result<RemovalReport> {
        let entries: Vec<&LedgerEntry> = self
            .ledger
            .entries()
            .iter()
            .filter(|e| e.model_id.as_deref() == Some(model_id) && !e.is_rejected())
            .collect();
        if !entries.iter().any(|e| e.action.admits()) {
            return Err(MdmError::MissingLedgerEntry(format!(
                "`{model_id}` was never integrated"
            )));
        }
        let unmerge_pos = entries
            .iter()
            .rposition(|e| e.action == LedgerAction::Unmerge)
            .ok_or_else(|| MdmError::MissingLedgerEntry(format!("`{model_id}` was never unmerged")))?;
        let admit_pos = entries[..unmerge_pos]
            .iter()
            .rposition(|e| e.action.admits())
            .ok_or_else(|| {
                MdmError::MissingLedgerEntry(format!("unmerge of `{model_id}` has no admission"))
            })?;
        let unmerge = entries[unmerge_pos];
        let removed_hash = unmerge
            .delta_hash
            .ok_or_else(|| MdmError::Format("unmerge entry lacks a delta hash".into()))?;

        let mut reasons = Vec::new();
        if entries[admit_pos].delta_hash != Some(original_delta_hash) {
            reasons.push(format!(
                "admitted hash {} does not match expected {}",
                entries[admit_pos].delta_hash.map(to_hex).unwrap_or_default(),
                to_hex(original_delta_hash)
            ));
        }
        let mut current = entries[admit_pos].delta_hash;
        for e in &entries[admit_pos + 1..unmerge_pos] {
            if e.action == LedgerAction::Reorthogonalize && !e.is_dropped() {
                current = e.delta_hash;
            }
        }
        if current != Some(removed_hash) {
            reasons.push("hash chain from admission to removal is broken".into());
        }
        if self.alphas.contains_key(model_id) {
            reasons.push(format!("`{model_id}` is a member again"));
        }
        let archived = self
            .vault
            .get(&removed_hash)
            .ok_or_else(|| MdmError::MissingArchive(model_id.to_string()))?;
        if hash_f64s(archived.values()) != removed_hash {
            reasons.push("archived delta does not match its ledger hash".into());
        }
        let diff: Vec<f64> = self
            .merged
            .iter()
            .zip(self.base.values())
            .map(|(m, b)| m - b)
            .collect();
        let denom = norm(&diff) * archived.norm();
        let residual_cosine = if denom > 0.0 {
            dot(&diff, archived.values()).abs() / denom
        } else {
            0.0
        };
        if residual_cosine > TOL_ORTH {
            reasons.push(format!(
                "merged model retains a component along the removed delta (cosine {residual_cosine:.3e})"
            ));
        }
        Ok(RemovalReport {
            verified: reasons.is_empty(),
            reasons,
            residual_cosine,
        })
    }

    #[cfg(test)]
    pub(crate) fn vault_mut(&mut self) -> &mut BTreeMap<u64, DeltaRecord> {
        &mut self.vault
    }
}

fn assemble_with(
    base: &ParameterVector,
    basis: &OrthogonalBasis,
    alpha: impl Fn(&str) -> f64,
) -> Vec<f64> {
    let mut out = base.values().to_vec();
    for m in basis.members() {
        axpy(&mut out, m.values(), alpha(&m.model_id));
    }
    out
}

/// Folds ledger `entries` over `vault`. Admission-to-removal episodes that
/// ended in a purge contribute nothing and need no archive.
pub fn replay(
    base: &ParameterVector,
    entries: &[LedgerEntry],
    vault: &BTreeMap<u64, DeltaRecord>,
) -> Result<Replay> {
    let mut skip = BTreeSet::new();
    let mut open: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        let Some(id) = e.model_id.as_deref() else { continue };
        if e.is_rejected() {
            continue;
        }
        if e.action.admits() {
            open.insert(id, Vec::new());
        }
        if let Some(ep) = open.get_mut(id) {
            ep.push(i);
        }
        if e.action == LedgerAction::Unmerge {
            let ep = open.remove(id).unwrap_or_default();
            if e.is_purged() {
                skip.extend(ep);
            }
        }
    }

    let mut members: Vec<(String, u64)> = Vec::new();
    let mut alphas = BTreeMap::new();
    let unknown = |id: &str, what: &str| {
        MdmError::Format(format!("ledger {what} of `{id}`, which is not a member"))
    };
    for (i, e) in entries.iter().enumerate() {
        if skip.contains(&i) || e.is_rejected() {
            continue;
        }
        let Some(id) = e.model_id.clone() else { continue };
        let pos = members.iter().position(|(m, _)| *m == id);
        match e.action {
            LedgerAction::Merge | LedgerAction::Integrate => {
                if pos.is_some() {
                    return Err(MdmError::DuplicateId(id));
                }
                let (Some(h), Some(a)) = (e.delta_hash, e.alpha) else {
                    return Err(MdmError::Format(format!("admission of `{id}` lacks hash or alpha")));
                };
                members.push((id.clone(), h));
                alphas.insert(id, a);
            }
            LedgerAction::Unmerge => {
                let p = pos.ok_or_else(|| unknown(&id, "unmerge"))?;
                members.remove(p);
                alphas.remove(&id);
            }
            LedgerAction::Reweight => {
                pos.ok_or_else(|| unknown(&id, "reweight"))?;
                let a = e
                    .alpha
                    .ok_or_else(|| MdmError::Format(format!("reweight of `{id}` lacks alpha")))?;
                alphas.insert(id, a);
            }
            LedgerAction::Reorthogonalize => {
                let p = pos.ok_or_else(|| unknown(&id, "reorthogonalization"))?;
                if e.is_dropped() {
                    members.remove(p);
                    alphas.remove(&id);
                } else {
                    members[p].1 = e.delta_hash.ok_or_else(|| {
                        MdmError::Format(format!("reorthogonalization of `{id}` lacks hash"))
                    })?;
                }
            }
        }
    }
    let mut merged = base.values().to_vec();
    for (id, h) in &members {
        let v = vault
            .get(h)
            .ok_or_else(|| MdmError::MissingArchive(format!("{id} ({})", to_hex(*h))))?;
        crate::error::check_len(v.len(), merged.len())?;
        axpy(&mut merged, v.values(), alphas[id]);
    }
    Ok(Replay {
        members,
        alphas,
        merged,
    })
}
