//! Append-only provenance ledger.
//!
//! One record per line, `key=value` fields separated by single spaces,
//! terminated by ` fnv1a=<16 hex>`. The digest covers the previous line's
//! digest followed by this line's body, so edits, deletions and reorderings
//! are all detected. Values escape `%`, space, `=`, `|`, CR and LF as `%XX`.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, Utc};

use crate::error::{MdmError, Result};
use crate::hash::{fnv1a, from_hex, to_hex};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LedgerAction {
    Merge,
    Integrate,
    Unmerge,
    Reweight,
    Reorthogonalize,
}

impl LedgerAction {
    pub fn as_str(self) -> &'static str {
        match self {
            LedgerAction::Merge => "merge",
            LedgerAction::Integrate => "integrate",
            LedgerAction::Unmerge => "unmerge",
            LedgerAction::Reweight => "reweight",
            LedgerAction::Reorthogonalize => "reorthogonalize",
        }
    }

    /// Merge and integrate both bring a model into the state.
    pub fn admits(self) -> bool {
        matches!(self, LedgerAction::Merge | LedgerAction::Integrate)
    }
}

impl fmt::Display for LedgerAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LedgerAction {
    type Err = MdmError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "merge" => LedgerAction::Merge,
            "integrate" => LedgerAction::Integrate,
            "unmerge" => LedgerAction::Unmerge,
            "reweight" => LedgerAction::Reweight,
            "reorthogonalize" => LedgerAction::Reorthogonalize,
            other => return Err(MdmError::Format(format!("unknown ledger action `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerEntry {
    pub seq: u64,
    pub action: LedgerAction,
    pub model_id: Option<String>,
    pub alpha: Option<f64>,
    pub delta_hash: Option<u64>,
    pub timestamp: DateTime<Utc>,
    pub operator: String,
    /// `None` when the action took effect; otherwise e.g. `rejected:...`,
    /// `dropped:...` or `purged`.
    pub outcome: Option<String>,
}

pub const OUTCOME_PURGED: &str = "purged";

impl LedgerEntry {
    pub fn is_rejected(&self) -> bool {
        self.outcome
            .as_deref()
            .is_some_and(|o| o.starts_with("rejected"))
    }

    pub fn is_dropped(&self) -> bool {
        self.outcome.as_deref().is_some_and(|o| o.starts_with("dropped"))
    }

    pub fn is_purged(&self) -> bool {
        self.outcome.as_deref() == Some(OUTCOME_PURGED)
    }

    fn body(&self) -> String {
        let mut fields = vec![
            format!("seq={}", self.seq),
            format!("action={}", self.action),
        ];
        if let Some(id) = &self.model_id {
            fields.push(format!("model_id={}", escape(id)));
        }
        if let Some(a) = self.alpha {
            fields.push(format!("alpha={a:?}"));
        }
        if let Some(h) = self.delta_hash {
            fields.push(format!("delta_hash={}", to_hex(h)));
        }
        fields.push(format!(
            "timestamp={}",
            self.timestamp.to_rfc3339_opts(SecondsFormat::Nanos, true)
        ));
        fields.push(format!("operator={}", escape(&self.operator)));
        if let Some(o) = &self.outcome {
            fields.push(format!("outcome={}", escape(o)));
        }
        fields.join(" ")
    }

    fn parse_body(body: &str, line: usize) -> Result<Self> {
        let bad = |what: &str| MdmError::Format(format!("ledger line {line}: {what}"));
        let mut seq = None;
        let mut action = None;
        let mut model_id = None;
        let mut alpha = None;
        let mut delta_hash = None;
        let mut timestamp = None;
        let mut operator = None;
        let mut outcome = None;
        for field in body.split(' ') {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| bad(&format!("malformed field `{field}`")))?;
            let slot_taken = match k {
                "seq" => seq
                    .replace(v.parse::<u64>().map_err(|_| bad("bad seq"))?)
                    .is_some(),
                "action" => action.replace(v.parse::<LedgerAction>()?).is_some(),
                "model_id" => model_id.replace(unescape(v).ok_or_else(|| bad("bad escape"))?).is_some(),
                "alpha" => {
                    let a = v.parse::<f64>().map_err(|_| bad("bad alpha"))?;
                    if !a.is_finite() {
                        return Err(bad("non-finite alpha"));
                    }
                    alpha.replace(a).is_some()
                }
                "delta_hash" => delta_hash
                    .replace(from_hex(v).ok_or_else(|| bad("bad delta_hash"))?)
                    .is_some(),
                "timestamp" => timestamp
                    .replace(
                        DateTime::parse_from_rfc3339(v)
                            .map_err(|_| bad("bad timestamp"))?
                            .with_timezone(&Utc),
                    )
                    .is_some(),
                "operator" => operator.replace(unescape(v).ok_or_else(|| bad("bad escape"))?).is_some(),
                "outcome" => outcome.replace(unescape(v).ok_or_else(|| bad("bad escape"))?).is_some(),
                other => return Err(bad(&format!("unknown field `{other}`"))),
            };
            if slot_taken {
                return Err(bad(&format!("repeated field `{k}`")));
            }
        }
        Ok(LedgerEntry {
            seq: seq.ok_or_else(|| bad("missing seq"))?,
            action: action.ok_or_else(|| bad("missing action"))?,
            model_id,
            alpha,
            delta_hash,
            timestamp: timestamp.ok_or_else(|| bad("missing timestamp"))?,
            operator: operator.ok_or_else(|| bad("missing operator"))?,
            outcome,
        })
    }
}

impl fmt::Display for LedgerEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.body())
    }
}

/// Escapes the characters that would break the line or field structure.
pub(crate) fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '%' => out.push_str("%25"),
            ' ' => out.push_str("%20"),
            '=' => out.push_str("%3D"),
            '|' => out.push_str("%7C"),
            '\n' => out.push_str("%0A"),
            '\r' => out.push_str("%0D"),
            c => out.push(c),
        }
    }
    out
}

pub(crate) fn unescape(s: &str) -> Option<String> {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = s.get(i + 1..i + 3)?;
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).ok()
}

fn line_digest(prev: u64, body: &str) -> u64 {
    let mut bytes = prev.to_le_bytes().to_vec();
    bytes.extend_from_slice(body.as_bytes());
    fnv1a(&bytes)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ledger {
    entries: Vec<LedgerEntry>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn next_seq(&self) -> u64 {
        self.entries.last().map_or(1, |e| e.seq + 1)
    }

    #[cfg(test)]
    pub(crate) fn push(&mut self, entry: LedgerEntry) {
        debug_assert!(entry.seq >= self.next_seq());
        self.entries.push(entry);
    }

    /// Builds and appends an entry stamped with the current time.
    pub(crate) fn record(
        &mut self,
        action: LedgerAction,
        model_id: Option<&str>,
        alpha: Option<f64>,
        delta_hash: Option<u64>,
        operator: &str,
        outcome: Option<String>,
    ) {
        let entry = LedgerEntry {
            seq: self.next_seq(),
            action,
            model_id: model_id.map(str::to_string),
            alpha,
            delta_hash,
            timestamp: Utc::now(),
            operator: operator.to_string(),
            outcome,
        };
        self.entries.push(entry);
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut prev = 0u64;
        for e in &self.entries {
            let body = e.body();
            prev = line_digest(prev, &body);
            out.push_str(&body);
            out.push_str(" fnv1a=");
            out.push_str(&to_hex(prev));
            out.push('\n');
        }
        out
    }

    /// Parses and checks every line digest and the seq ordering. Line
    /// numbers in errors are 1-based.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<LedgerEntry> = Vec::new();
        let mut prev = 0u64;
        if !text.is_empty() && !text.ends_with('\n') {
            let line = text.lines().count();
            return Err(MdmError::LedgerIntegrity { line });
        }
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let (body, digest) = raw
                .rsplit_once(" fnv1a=")
                .ok_or(MdmError::LedgerIntegrity { line })?;
            let stored = from_hex(digest).ok_or(MdmError::LedgerIntegrity { line })?;
            let computed = line_digest(prev, body);
            if stored != computed {
                return Err(MdmError::LedgerIntegrity { line });
            }
            prev = computed;
            let entry = LedgerEntry::parse_body(body, line)?;
            if let Some(last) = entries.last() {
                if entry.seq <= last.seq {
                    return Err(MdmError::LedgerIntegrity { line });
                }
            }
            entries.push(entry);
        }
        Ok(Self { entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn entry(seq: u64, action: LedgerAction, id: &str, alpha: f64) -> LedgerEntry {
        LedgerEntry {
            seq,
            action,
            model_id: Some(id.into()),
            alpha: Some(alpha),
            delta_hash: Some(0xdead_beef_0123_4567),
            timestamp: Utc.with_ymd_and_hms(2024, 5, 1, 12, 0, 0).unwrap(),
            operator: "ops team".into(),
            outcome: None,
        }
    }

    fn sample() -> Ledger {
        let mut l = Ledger::new();
        l.push(entry(1, LedgerAction::Merge, "a", 0.5));
        l.push(entry(2, LedgerAction::Integrate, "b=x y", 1.0));
        let mut u = entry(3, LedgerAction::Unmerge, "b=x y", 1.0);
        u.outcome = Some(OUTCOME_PURGED.into());
        l.push(u);
        l
    }

    #[test]
    fn line_layout() {
        let text = sample().to_text();
        let first = text.lines().next().unwrap();
        assert!(first.starts_with(
            "seq=1 action=merge model_id=a alpha=0.5 delta_hash=deadbeef01234567 \
             timestamp=2024-05-01T12:00:00.000000000Z operator=ops%20team fnv1a="
        ));
        assert!(text.contains("model_id=b%3Dx%20y"));
    }

    #[test]
    fn round_trip_is_bitwise() {
        let l = sample();
        let text = l.to_text();
        let back = Ledger::parse(&text).unwrap();
        assert_eq!(back, l);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn tampering_is_detected() {
        let text = sample().to_text();
        // alter alpha on line 2
        let edited = text.replacen("alpha=1.0", "alpha=2.0", 1);
        assert!(matches!(
            Ledger::parse(&edited),
            Err(MdmError::LedgerIntegrity { line: 2 })
        ));
        // delete line 2: line 3's chained digest no longer matches
        let lines: Vec<&str> = text.lines().collect();
        let deleted = format!("{}\n{}\n", lines[0], lines[2]);
        assert!(matches!(
            Ledger::parse(&deleted),
            Err(MdmError::LedgerIntegrity { line: 2 })
        ));
        // swap lines
        let swapped = format!("{}\n{}\n{}\n", lines[1], lines[0], lines[2]);
        assert!(Ledger::parse(&swapped).is_err());
        // truncated final line
        assert!(Ledger::parse(&text[..text.len() - 3]).is_err());
        assert!(Ledger::parse("").unwrap().is_empty());
    }

    #[test]
    fn alpha_round_trips_exactly() {
        for a in [0.1, 1.0 / 3.0, -2.5e-300, 1e300, 0.0, -0.0] {
            let mut l = Ledger::new();
            l.push(entry(1, LedgerAction::Reweight, "m", a));
            let back = Ledger::parse(&l.to_text()).unwrap();
            assert_eq!(back.entries()[0].alpha.unwrap().to_bits(), a.to_bits());
        }
    }

    #[test]
    fn optional_fields_may_be_absent() {
        let mut l = Ledger::new();
        let mut e = entry(7, LedgerAction::Reorthogonalize, "x", 0.0);
        e.model_id = None;
        e.alpha = None;
        e.delta_hash = None;
        l.push(e);
        assert_eq!(Ledger::parse(&l.to_text()).unwrap(), l);
    }

    proptest! {
        #[test]
        fn escape_round_trip(s in "\\PC{0,40}") {
            let e = escape(&s);
            prop_assert!(!e.contains(' ') && !e.contains('=') && !e.contains('\n'));
            prop_assert_eq!(unescape(&e).unwrap(), s);
        }
    }
}
