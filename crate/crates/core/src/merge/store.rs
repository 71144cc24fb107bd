//! On-disk layout of merge states and basis archives.
//!
//! A state directory holds `base.mdmc`, `merged.mdmc`, `state.txt`,
//! `ledger.log` and `vault/<hash>.mdmc`, one file per archived orthogonal
//! delta. Vault files are content addressed and never rewritten, so every
//! other file can be replaced atomically on its own.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use super::ledger::{escape, unescape, Ledger};
use super::MergeState;
use crate::error::{MdmError, Result};
use crate::fsutil::{create_dir_all, read, write_atomic};
use crate::hash::{from_hex, hash_f64s, to_hex};
use crate::orthogonal::{DroppedDelta, OrthogonalBasis};
use crate::params::{
    flatten, load_checkpoint, save_checkpoint, unflatten, DeltaRecord, ParameterVector,
};

const STATE_HEADER: &str = "format=mdm-state 1";
const BASIS_HEADER: &str = "format=mdm-basis 1";

fn fmt_err(file: &Path, msg: impl std::fmt::Display) -> MdmError {
    MdmError::Format(format!("{}: {msg}", file.display()))
}

/// Splits `k=v k=v` into unescaped pairs.
fn fields(line: &str, file: &Path) -> Result<Vec<(String, String)>> {
    line.split(' ')
        .map(|f| {
            let (k, v) = f
                .split_once('=')
                .ok_or_else(|| fmt_err(file, format!("malformed field `{f}`")))?;
            let v = unescape(v).ok_or_else(|| fmt_err(file, format!("bad escape in `{f}`")))?;
            Ok((k.to_string(), v))
        })
        .collect()
}

fn parse_num<T: std::str::FromStr>(s: &str, file: &Path, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| fmt_err(file, format!("bad {what} `{s}`")))
}

fn parse_hash(s: &str, file: &Path) -> Result<u64> {
    from_hex(s).ok_or_else(|| fmt_err(file, format!("bad hash `{s}`")))
}

/// Writes `basis` as numbered member checkpoints plus `manifest.txt`.
pub fn save_basis(basis: &OrthogonalBasis, dir: &Path) -> Result<()> {
    create_dir_all(dir)?;
    let mut manifest = vec![
        BASIS_HEADER.to_string(),
        format!("eps_drop={:?}", basis.eps_drop()),
    ];
    for id in basis.order_log() {
        manifest.push(format!("order={}", escape(id)));
    }
    for (i, m) in basis.members().iter().enumerate() {
        let file = format!("member_{:04}.mdmc", i + 1);
        save_checkpoint(&m.to_checkpoint()?, &dir.join(&file))?;
        manifest.push(format!("member={} file={file}", escape(&m.model_id)));
    }
    for d in basis.dropped() {
        manifest.push(format!(
            "dropped={} reason={}",
            escape(&d.model_id),
            escape(&d.reason)
        ));
    }
    let mut text = manifest.join("\n");
    text.push('\n');
    write_atomic(&dir.join("manifest.txt"), text.as_bytes())
}

pub fn load_basis(dir: &Path) -> Result<OrthogonalBasis> {
    let path = dir.join("manifest.txt");
    let text = String::from_utf8(read(&path)?).map_err(|_| fmt_err(&path, "not UTF-8"))?;
    let mut lines = text.lines();
    if lines.next() != Some(BASIS_HEADER) {
        return Err(fmt_err(&path, "missing basis header"));
    }
    let mut eps_drop = None;
    let mut order = Vec::new();
    let mut members = Vec::new();
    let mut dropped = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let f = fields(line, &path)?;
        match (f[0].0.as_str(), f.get(1).map(|x| x.0.as_str())) {
            ("eps_drop", None) => eps_drop = Some(parse_num::<f64>(&f[0].1, &path, "eps_drop")?),
            ("order", None) => order.push(f[0].1.clone()),
            ("member", Some("file")) => {
                let file = &f[1].1;
                if file.contains('/') || file.contains('\\') || file.starts_with('.') {
                    return Err(fmt_err(&path, format!("unsafe member file `{file}`")));
                }
                let rec = DeltaRecord::from_checkpoint(&load_checkpoint(&dir.join(file))?)?;
                if rec.model_id != f[0].1 {
                    return Err(fmt_err(
                        &path,
                        format!("{file} holds `{}`, manifest says `{}`", rec.model_id, f[0].1),
                    ));
                }
                members.push(rec);
            }
            ("dropped", Some("reason")) => dropped.push(DroppedDelta {
                model_id: f[0].1.clone(),
                reason: f[1].1.clone(),
            }),
            _ => return Err(fmt_err(&path, format!("unexpected line `{line}`"))),
        }
    }
    let eps_drop = eps_drop.ok_or_else(|| fmt_err(&path, "missing eps_drop"))?;
    OrthogonalBasis::from_parts(members, dropped, eps_drop, order)
}

impl MergeState {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let vault_dir = dir.join("vault");
        create_dir_all(&vault_dir)?;
        let base_path = dir.join("base.mdmc");
        if !base_path.exists() {
            let mut ckpt = unflatten(&self.base)?;
            ckpt.set_meta("kind", "base");
            save_checkpoint(&ckpt, &base_path)?;
        }
        for (h, rec) in &self.vault {
            let p = vault_dir.join(format!("{}.mdmc", to_hex(*h)));
            if !p.exists() {
                save_checkpoint(&rec.to_checkpoint()?, &p)?;
            }
        }
        // purged archives
        for entry in fs::read_dir(&vault_dir).map_err(|e| MdmError::io(&vault_dir, e))? {
            let entry = entry.map_err(|e| MdmError::io(&vault_dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(h) = name.strip_suffix(".mdmc").and_then(from_hex) {
                if !self.vault.contains_key(&h) {
                    fs::remove_file(entry.path()).map_err(|e| MdmError::io(entry.path(), e))?;
                }
            }
        }

        let mut merged = unflatten(&self.merged())?;
        merged.set_meta("kind", "merged");
        save_checkpoint(&merged, &dir.join("merged.mdmc"))?;

        let mut lines = vec![
            STATE_HEADER.to_string(),
            format!("base_hash={}", to_hex(self.base_hash)),
            format!("operator={}", escape(&self.operator)),
            format!("reorth_every={}", self.reorth_every),
            format!("since_reorth={}", self.since_reorth),
            format!("eps_drop={:?}", self.basis.eps_drop()),
            format!("merged_hash={}", to_hex(hash_f64s(&self.merged))),
        ];
        for id in self.basis.order_log() {
            lines.push(format!("order={}", escape(id)));
        }
        for m in self.basis.members() {
            lines.push(format!(
                "member={} hash={} alpha={:?}",
                escape(&m.model_id),
                to_hex(m.content_hash()),
                self.alphas[&m.model_id]
            ));
        }
        for d in self.basis.dropped() {
            lines.push(format!(
                "dropped={} reason={}",
                escape(&d.model_id),
                escape(&d.reason)
            ));
        }
        let mut text = lines.join("\n");
        text.push('\n');
        write_atomic(&dir.join("state.txt"), text.as_bytes())?;
        write_atomic(&dir.join("ledger.log"), self.ledger.to_text().as_bytes())
    }

    /// Loads a state directory. The ledger must replay to the stored members
    /// and coefficients. The merged cache is reassembled when `recompute` is
    /// set or when it does not match its recorded hash.
    pub fn load(dir: &Path, recompute: bool) -> Result<Self> {
        let base_path = dir.join("base.mdmc");
        let base = flatten(&load_checkpoint(&base_path)?)?;

        let state_path = dir.join("state.txt");
        let text = String::from_utf8(read(&state_path)?)
            .map_err(|_| fmt_err(&state_path, "not UTF-8"))?;
        let mut lines = text.lines();
        if lines.next() != Some(STATE_HEADER) {
            return Err(fmt_err(&state_path, "missing state header"));
        }
        let mut scalars: BTreeMap<String, String> = BTreeMap::new();
        let mut order = Vec::new();
        let mut member_refs = Vec::new();
        let mut dropped = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f = fields(line, &state_path)?;
            match (f[0].0.as_str(), f.len()) {
                ("order", 1) => order.push(f[0].1.clone()),
                ("member", 3) if f[1].0 == "hash" && f[2].0 == "alpha" => {
                    let h = parse_hash(&f[1].1, &state_path)?;
                    let a: f64 = parse_num(&f[2].1, &state_path, "alpha")?;
                    member_refs.push((f[0].1.clone(), h, a));
                }
                ("dropped", 2) if f[1].0 == "reason" => dropped.push(DroppedDelta {
                    model_id: f[0].1.clone(),
                    reason: f[1].1.clone(),
                }),
                (k, 1) => {
                    scalars.insert(k.to_string(), f[0].1.clone());
                }
                _ => return Err(fmt_err(&state_path, format!("unexpected line `{line}`"))),
            }
        }
        let get = |k: &str| {
            scalars
                .get(k)
                .ok_or_else(|| fmt_err(&state_path, format!("missing `{k}`")))
        };
        let base_hash = parse_hash(get("base_hash")?, &state_path)?;
        if base_hash != base.content_hash() {
            return Err(MdmError::HashMismatch {
                stored: base_hash,
                computed: base.content_hash(),
            });
        }
        let operator = get("operator")?.clone();
        let reorth_every: usize = parse_num(get("reorth_every")?, &state_path, "reorth_every")?;
        let since_reorth: usize = parse_num(get("since_reorth")?, &state_path, "since_reorth")?;
        let eps_drop: f64 = parse_num(get("eps_drop")?, &state_path, "eps_drop")?;
        let merged_hash = parse_hash(get("merged_hash")?, &state_path)?;

        let vault = load_vault(&dir.join("vault"))?;
        let mut members = Vec::new();
        let mut alphas = BTreeMap::new();
        for (id, h, a) in member_refs {
            let rec = vault
                .get(&h)
                .ok_or_else(|| MdmError::MissingArchive(format!("{id} ({})", to_hex(h))))?;
            let computed = rec.content_hash();
            if computed != h {
                return Err(MdmError::HashMismatch { stored: h, computed });
            }
            if rec.model_id != id {
                return Err(fmt_err(&state_path, format!("archive {} is not `{id}`", to_hex(h))));
            }
            members.push(rec.clone());
            alphas.insert(id, a);
        }
        let basis = OrthogonalBasis::from_parts(members, dropped, eps_drop, order)?;
        if let Some(l) = basis.layout() {
            base.layout().ensure_same(l, "basis")?;
        }

        let ledger_path = dir.join("ledger.log");
        let ledger_text = String::from_utf8(read(&ledger_path)?)
            .map_err(|_| fmt_err(&ledger_path, "not UTF-8"))?;
        let ledger = Ledger::parse(&ledger_text)?;

        let mut state = MergeState {
            base: Arc::new(base),
            base_hash,
            basis,
            alphas,
            ledger,
            merged: Vec::new(),
            vault,
            operator,
            reorth_every,
            since_reorth,
        };
        let cached = if recompute {
            None
        } else {
            load_checkpoint(&dir.join("merged.mdmc"))
                .ok()
                .and_then(|c| flatten(&c).ok())
                .map(ParameterVector::into_values)
                .filter(|v| v.len() == state.base.len() && hash_f64s(v) == merged_hash)
        };
        state.merged = cached.unwrap_or_else(|| state.assemble());

        let replay = state.replay()?;
        let ids: Vec<(String, u64)> = state
            .basis
            .members()
            .iter()
            .map(|m| (m.model_id.clone(), m.content_hash()))
            .collect();
        if replay.members != ids || replay.alphas != state.alphas {
            return Err(fmt_err(&ledger_path, "ledger does not replay to the stored state"));
        }
        Ok(state)
    }
}

/// Loads every archive, keyed by the hash in its file name. A file whose
/// contents no longer match its name is kept so audits can report it.
fn load_vault(dir: &Path) -> Result<BTreeMap<u64, DeltaRecord>> {
    let mut vault = BTreeMap::new();
    if !dir.exists() {
        return Ok(vault);
    }
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| MdmError::io(dir, e))? {
        let entry = entry.map_err(|e| MdmError::io(dir, e))?;
        names.push(entry.file_name().to_string_lossy().into_owned());
    }
    names.sort();
    for name in names {
        if let Some(h) = name.strip_suffix(".mdmc").and_then(from_hex) {
            let rec = DeltaRecord::from_checkpoint(&load_checkpoint(&dir.join(&name))?)?;
            vault.insert(h, rec);
        }
    }
    Ok(vault)
}
