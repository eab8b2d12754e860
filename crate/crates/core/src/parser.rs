//! Robust extraction of label vectors from free-form model output.
//!
//! Extraction runs a three-stage cascade: parse the whole string, then scan
//! for an embedded balanced `{...}` region, then a conservative repair pass
//! (code-fence stripping, trailing-comma removal, truncation closure). Label
//! tokens are normalized case-insensitively against the schema classes;
//! off-template tokens fall back to `no` (strict) or go through a synonym map
//! first (lenient). [`parse_labels`] is total: it always returns a complete
//! vector plus diagnostics describing exactly what it had to do.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::schema::{FindingLabel, FindingSchema, LabelVector};

/// How the JSON object was obtained from the raw text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMethod {
    Direct,
    Embedded,
    Repaired,
    Failed,
}

/// One answer token that was not a schema class, with what it became.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OffTemplateToken {
    pub finding: String,
    pub raw: String,
    pub normalized: FindingLabel,
}

/// What the parser had to do to produce a vector for one response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseDiagnostics {
    pub extraction_method: ExtractionMethod,
    pub off_template_tokens: Vec<OffTemplateToken>,
    pub missing_findings: Vec<String>,
    pub extra_keys: Vec<String>,
    pub truncated: bool,
}

impl ParseDiagnostics {
    /// True when the response needed no fallback of any kind.
    pub fn is_clean(&self) -> bool {
        self.extraction_method != ExtractionMethod::Failed
            && self.off_template_tokens.is_empty()
            && self.missing_findings.is_empty()
            && self.extra_keys.is_empty()
            && !self.truncated
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    Strict,
    Lenient,
}

/// Off-template handling policy. Strict maps everything unknown to `no`;
/// lenient consults the synonym map first and falls back to `no`.
#[derive(Debug, Clone)]
pub struct NormalizationPolicy {
    pub mode: NormalizationMode,
    pub synonyms: BTreeMap<String, FindingLabel>,
}

impl NormalizationPolicy {
    pub fn strict() -> Self {
        NormalizationPolicy {
            mode: NormalizationMode::Strict,
            synonyms: BTreeMap::new(),
        }
    }

    pub fn lenient() -> Self {
        NormalizationPolicy {
            mode: NormalizationMode::Lenient,
            synonyms: default_synonyms(),
        }
    }

    pub fn from_mode(mode: NormalizationMode) -> Self {
        match mode {
            NormalizationMode::Strict => Self::strict(),
            NormalizationMode::Lenient => Self::lenient(),
        }
    }
}

/// Hedging tokens seen in the wild mapped to `maybe`, plus common phrasings
/// of the four canonical answers.
pub fn default_synonyms() -> BTreeMap<String, FindingLabel> {
    let entries: [(&str, FindingLabel); 17] = [
        ("possible", FindingLabel::Maybe),
        ("possibly", FindingLabel::Maybe),
        ("uncertain", FindingLabel::Maybe),
        ("suspect", FindingLabel::Maybe),
        ("suspected", FindingLabel::Maybe),
        ("probable", FindingLabel::Maybe),
        ("likely", FindingLabel::Maybe),
        ("questionable", FindingLabel::Maybe),
        ("present", FindingLabel::Yes),
        ("positive", FindingLabel::Yes),
        ("absent", FindingLabel::No),
        ("negative", FindingLabel::No),
        ("none", FindingLabel::No),
        ("no information", FindingLabel::NoInformation),
        ("no_information", FindingLabel::NoInformation),
        ("undefined", FindingLabel::NoInformation),
        ("not mentioned", FindingLabel::NoInformation),
    ];
    entries
        .into_iter()
        .map(|(token, label)| (token.to_string(), label))
        .collect()
}

/// Result of the extraction cascade.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Extraction {
    pub object: serde_json::Map<String, Value>,
    pub method: ExtractionMethod,
    /// True when the object only parsed after truncation closure.
    pub truncated: bool,
}

/// Pulls the first usable JSON object out of free-form text.
pub fn extract_json(raw: &str) -> Option<Extraction> {
    // stage 1: the whole string is the object
    if let Ok(Value::Object(object)) = serde_json::from_str::<Value>(raw.trim()) {
        return Some(Extraction {
            object,
            method: ExtractionMethod::Direct,
            truncated: false,
        });
    }

    // stage 2: first balanced {...} region that parses
    if let Some(object) = embedded_object(raw) {
        return Some(Extraction {
            object,
            method: ExtractionMethod::Embedded,
            truncated: false,
        });
    }

    // stage 3: conservative repair
    let defenced = strip_code_fences(raw);
    let base = defenced.as_deref().unwrap_or(raw);
    let brace = base.find('{')?;
    let candidate = &base[brace..];

    let cleaned = strip_trailing_commas(candidate);
    if let Ok(Value::Object(object)) = serde_json::from_str::<Value>(cleaned.trim()) {
        return Some(Extraction {
            object,
            method: ExtractionMethod::Repaired,
            truncated: false,
        });
    }
    if let Some(object) = embedded_object(&cleaned) {
        return Some(Extraction {
            object,
            method: ExtractionMethod::Repaired,
            truncated: false,
        });
    }

    let closed = close_truncated(&cleaned)?;
    if let Ok(Value::Object(object)) = serde_json::from_str::<Value>(&closed) {
        return Some(Extraction {
            object,
            method: ExtractionMethod::Repaired,
            truncated: true,
        });
    }
    None
}

/// Scans each `{` in turn and returns the first balanced region that parses
/// as a JSON object.
fn embedded_object(text: &str) -> Option<serde_json::Map<String, Value>> {
    let bytes = text.as_bytes();
    for (idx, &b) in bytes.iter().enumerate() {
        if b != b'{' {
            continue;
        }
        if let Some(end) = balanced_end(bytes, idx) {
            if let Ok(Value::Object(object)) = serde_json::from_str::<Value>(&text[idx..end]) {
                return Some(object);
            }
        }
    }
    None
}

/// Walks from an opening brace to its matching close, string-aware.
/// Returns the exclusive end index, or `None` if the region never closes.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (offset, &b) in bytes[start..].iter().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' | b'[' => depth += 1,
            b'}' | b']' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(start + offset + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// Content of the first ``` fence (language tag skipped), if any.
fn strip_code_fences(text: &str) -> Option<String> {
    let start = text.find("```")?;
    let after = &text[start + 3..];
    let tag_end = after
        .find(|c: char| !c.is_ascii_alphanumeric())
        .unwrap_or(after.len());
    let content = &after[tag_end..];
    let end = content.find("```").unwrap_or(content.len());
    Some(content[..end].trim().to_string())
}

/// Removes commas that directly precede a closing brace/bracket, outside strings.
fn strip_trailing_commas(text: &str) -> String {
    let bytes = text.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate() {
        if in_string {
            out.push(b);
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => {
                in_string = true;
                out.push(b);
            }
            b',' => {
                let next = bytes[i + 1..]
                    .iter()
                    .copied()
                    .find(|c| !c.is_ascii_whitespace());
                if !matches!(next, Some(b'}') | Some(b']')) {
                    out.push(b);
                }
            }
            _ => out.push(b),
        }
    }
    // only ASCII commas were removed, so the bytes are still valid UTF-8
    String::from_utf8(out).expect("comma removal preserves utf-8")
}

/// What the truncation scanner expects next inside the innermost container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Frame {
    ObjWantKeyOrEnd,
    ObjWantColon,
    ObjWantValue,
    ObjWantCommaOrEnd,
    ArrWantValueOrEnd,
    ArrWantCommaOrEnd,
}

impl Frame {
    fn closer(self) -> u8 {
        match self {
            Frame::ObjWantKeyOrEnd
            | Frame::ObjWantColon
            | Frame::ObjWantValue
            | Frame::ObjWantCommaOrEnd => b'}',
            Frame::ArrWantValueOrEnd | Frame::ArrWantCommaOrEnd => b']',
        }
    }
}

/// Closes truncated JSON by cutting back to the last complete value and
/// appending the closers for every container still open there. The text must
/// start at `{`. Incomplete trailing keys/values are dropped, never guessed.
fn close_truncated(text: &str) -> Option<String> {
    let bytes = text.as_bytes();
    if bytes.first() != Some(&b'{') {
        return None;
    }

    let mut stack: Vec<Frame> = Vec::new();
    let mut cut: Option<(usize, Vec<u8>)> = None;
    let mut i = 0usize;

    // records that a value just completed ending at `end` (exclusive)
    let complete_value = |stack: &mut Vec<Frame>, cut: &mut Option<(usize, Vec<u8>)>, end: usize| -> bool {
        match stack.last_mut() {
            Some(frame @ Frame::ObjWantValue) => *frame = Frame::ObjWantCommaOrEnd,
            Some(frame @ Frame::ArrWantValueOrEnd) => *frame = Frame::ArrWantCommaOrEnd,
            _ => return false,
        }
        let closers: Vec<u8> = stack.iter().rev().map(|f| f.closer()).collect();
        *cut = Some((end, closers));
        true
    };

    while i < bytes.len() {
        let b = bytes[i];
        if b.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        match b {
            b'{' | b'[' => {
                let ok = stack.is_empty() && i == 0
                    || matches!(
                        stack.last(),
                        Some(Frame::ObjWantValue) | Some(Frame::ArrWantValueOrEnd)
                    );
                if !ok {
                    return None;
                }
                stack.push(if b == b'{' {
                    Frame::ObjWantKeyOrEnd
                } else {
                    Frame::ArrWantValueOrEnd
                });
                i += 1;
            }
            b'}' | b']' => {
                let matches_frame = match stack.last() {
                    Some(Frame::ObjWantKeyOrEnd) | Some(Frame::ObjWantCommaOrEnd) => b == b'}',
                    Some(Frame::ArrWantValueOrEnd) | Some(Frame::ArrWantCommaOrEnd) => b == b']',
                    _ => false,
                };
                if !matches_frame {
                    return None;
                }
                stack.pop();
                i += 1;
                if stack.is_empty() {
                    // the region closes on its own; hand it back as-is
                    return Some(text[..i].to_string());
                }
                if !complete_value(&mut stack, &mut cut, i) {
                    return None;
                }
            }
            b'"' => {
                let mut escaped = false;
                let mut end = None;
                let mut j = i + 1;
                while j < bytes.len() {
                    let c = bytes[j];
                    if escaped {
                        escaped = false;
                    } else if c == b'\\' {
                        escaped = true;
                    } else if c == b'"' {
                        end = Some(j + 1);
                        break;
                    }
                    j += 1;
                }
                match (stack.last(), end) {
                    (Some(Frame::ObjWantKeyOrEnd), Some(close)) => {
                        *stack.last_mut().unwrap() = Frame::ObjWantColon;
                        i = close;
                    }
                    (Some(Frame::ObjWantValue) | Some(Frame::ArrWantValueOrEnd), Some(close)) => {
                        if !complete_value(&mut stack, &mut cut, close) {
                            return None;
                        }
                        i = close;
                    }
                    // unterminated string at end of input: fall back to the last cut
                    (_, None) => break,
                    _ => return None,
                }
            }
            b':' => {
                if stack.last() != Some(&Frame::ObjWantColon) {
                    return None;
                }
                *stack.last_mut().unwrap() = Frame::ObjWantValue;
                i += 1;
            }
            b',' => {
                match stack.last_mut() {
                    Some(frame @ Frame::ObjWantCommaOrEnd) => *frame = Frame::ObjWantKeyOrEnd,
                    Some(frame @ Frame::ArrWantCommaOrEnd) => *frame = Frame::ArrWantValueOrEnd,
                    _ => return None,
                }
                i += 1;
            }
            _ => {
                // bare token: number, true/false/null — or junk serde will reject
                if !matches!(
                    stack.last(),
                    Some(Frame::ObjWantValue) | Some(Frame::ArrWantValueOrEnd)
                ) {
                    return None;
                }
                let mut j = i;
                while j < bytes.len()
                    && !bytes[j].is_ascii_whitespace()
                    && !matches!(bytes[j], b',' | b'}' | b']')
                {
                    j += 1;
                }
                if j >= bytes.len() {
                    // the token itself may be cut short; not a safe cut point
                    break;
                }
                if !complete_value(&mut stack, &mut cut, j) {
                    return None;
                }
                i = j;
            }
        }
    }

    match cut {
        Some((end, closers)) => {
            let mut out = text[..end].to_string();
            out.extend(closers.into_iter().map(char::from));
            Some(out)
        }
        // nothing complete yet (e.g. `{"pleural_eff`): an empty object is the
        // most honest reading — every finding becomes missing
        None => Some("{}".to_string()),
    }
}

/// Normalizes one answer token against the schema classes. Returns the label
/// and whether the token was off-template.
pub fn normalize_label(
    token: &str,
    schema: &FindingSchema,
    policy: &NormalizationPolicy,
) -> (FindingLabel, bool) {
    let folded = token.trim().to_lowercase();
    if let Some(label) = FindingLabel::from_token(&folded) {
        if schema.classes.contains(label) {
            return (label, false);
        }
    }
    let label = match policy.mode {
        NormalizationMode::Strict => FindingLabel::No,
        NormalizationMode::Lenient => policy
            .synonyms
            .get(&folded)
            .copied()
            .unwrap_or(FindingLabel::No),
    };
    (label, true)
}

/// Lowercases a JSON key and folds punctuation/space runs to `_`, so
/// `"Pleural Effusion"` matches the finding `pleural_effusion`.
pub fn fold_key(key: &str) -> String {
    let mut out = String::with_capacity(key.len());
    let mut pending_sep = false;
    for c in key.chars() {
        if c.is_alphanumeric() {
            if pending_sep && !out.is_empty() {
                out.push('_');
            }
            pending_sep = false;
            out.extend(c.to_lowercase());
        } else {
            pending_sep = true;
        }
    }
    out
}

fn value_token(value: &Value) -> String {
    match value {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Turns raw model output into a complete label vector plus diagnostics.
///
/// Total: extraction failure yields an all-`no` vector with `failed`
/// diagnostics; missing findings default to `no` and are recorded.
pub fn parse_labels(
    raw: &str,
    schema: &FindingSchema,
    policy: &NormalizationPolicy,
) -> (LabelVector, ParseDiagnostics) {
    let Some(extraction) = extract_json(raw) else {
        return (
            LabelVector::uniform(schema, FindingLabel::No),
            ParseDiagnostics {
                extraction_method: ExtractionMethod::Failed,
                off_template_tokens: Vec::new(),
                missing_findings: schema.findings.clone(),
                extra_keys: Vec::new(),
                truncated: false,
            },
        );
    };

    let folded_schema: BTreeMap<String, &String> = schema
        .findings
        .iter()
        .map(|f| (fold_key(f), f))
        .collect();

    let mut by_finding: BTreeMap<&str, String> = BTreeMap::new();
    let mut extra_keys = Vec::new();
    for (key, value) in &extraction.object {
        match folded_schema.get(&fold_key(key)) {
            // later occurrences overwrite earlier ones: the model's last word wins
            Some(finding) => {
                by_finding.insert(finding.as_str(), value_token(value));
            }
            None => extra_keys.push(key.clone()),
        }
    }

    let mut off_template_tokens = Vec::new();
    let mut missing_findings = Vec::new();
    let vector = LabelVector::from_fn(schema, |finding| match by_finding.get(finding) {
        Some(token) => {
            let (label, off_template) = normalize_label(token, schema, policy);
            if off_template {
                off_template_tokens.push(OffTemplateToken {
                    finding: finding.to_string(),
                    raw: token.clone(),
                    normalized: label,
                });
            }
            label
        }
        None => {
            missing_findings.push(finding.to_string());
            FindingLabel::No
        }
    });

    let diagnostics = ParseDiagnostics {
        extraction_method: extraction.method,
        off_template_tokens,
        missing_findings,
        extra_keys,
        truncated: extraction.truncated,
    };
    (vector, diagnostics)
}
