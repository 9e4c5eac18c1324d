//! Parsing and emission of tagged model completions.
//!
//! A completion is expected to look like
//! `<think>...</think><answer>...</answer>`, where the answer body follows the
//! grammar of its task: a single box for REC, a JSON list of labeled boxes for
//! OVD and a JSON list of box/keypoint triples for GRES. JSON bodies may be
//! wrapped in a ```` ```json ```` fence; OVD and GRES also accept the literal
//! `None`.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::geometry::{BBox, Keypoint};

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Rec,
    Ovd,
    Gres,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Rec => "rec",
            Task::Ovd => "ovd",
            Task::Gres => "gres",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rec" => Ok(Task::Rec),
            "ovd" => Ok(Task::Ovd),
            "gres" => Ok(Task::Gres),
            other => Err(format!("unknown task {other:?}")),
        }
    }
}

/// Whether the format reward also requires the answer body to parse.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatMode {
    #[default]
    Strict,
    TagsOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReasonedResponse {
    pub think: String,
    pub answer: String,
    pub well_formed: bool,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("parse error at byte {position}: {message}")]
pub struct ParseError {
    pub position: usize,
    pub message: String,
}

impl ParseError {
    fn new(position: usize, message: impl Into<String>) -> Self {
        Self {
            position,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OvdItem {
    pub bbox: BBox,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GresItem {
    pub bbox: BBox,
    pub keypoint1: Keypoint,
    pub keypoint2: Keypoint,
    /// Set when a keypoint fell outside its box and was clamped onto it.
    #[serde(default)]
    pub clamped: bool,
}

/// The object set predicted by one completion.
#[derive(Debug, Clone, PartialEq)]
pub enum ParsedAnswer {
    Rec(BBox),
    Ovd { items: Vec<OvdItem>, is_none: bool },
    Gres { items: Vec<GresItem>, is_none: bool },
}

impl ParsedAnswer {
    pub fn task(&self) -> Task {
        match self {
            ParsedAnswer::Rec(_) => Task::Rec,
            ParsedAnswer::Ovd { .. } => Task::Ovd,
            ParsedAnswer::Gres { .. } => Task::Gres,
        }
    }

    /// Number of predicted objects.
    pub fn len(&self) -> usize {
        match self {
            ParsedAnswer::Rec(_) => 1,
            ParsedAnswer::Ovd { items, .. } => items.len(),
            ParsedAnswer::Gres { items, .. } => items.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn count(haystack: &str, needle: &str) -> usize {
    haystack.matches(needle).count()
}

/// Splits a completion into think and answer sections.
///
/// Never fails: malformed input yields `well_formed = false` and an empty answer.
pub fn extract_tagged(raw: &str) -> ReasonedResponse {
    let tags = [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE];
    let think_best_effort = || match (raw.find(THINK_OPEN), raw.find(THINK_CLOSE)) {
        (Some(o), Some(c)) if o + THINK_OPEN.len() <= c => raw[o + THINK_OPEN.len()..c].to_string(),
        _ => String::new(),
    };
    let malformed = || ReasonedResponse {
        think: think_best_effort(),
        answer: String::new(),
        well_formed: false,
    };
    if tags.iter().any(|t| count(raw, t) != 1) {
        return malformed();
    }
    // Counts are all one, so these finds succeed.
    let to = raw.find(THINK_OPEN).unwrap();
    let tc = raw.find(THINK_CLOSE).unwrap();
    let ao = raw.find(ANSWER_OPEN).unwrap();
    let ac = raw.find(ANSWER_CLOSE).unwrap();
    let ordered = to + THINK_OPEN.len() <= tc
        && tc + THINK_CLOSE.len() <= ao
        && ao + ANSWER_OPEN.len() <= ac;
    if !ordered {
        return malformed();
    }
    let outside = [
        &raw[..to],
        &raw[tc + THINK_CLOSE.len()..ao],
        &raw[ac + ANSWER_CLOSE.len()..],
    ];
    if outside.iter().any(|s| !s.trim().is_empty()) {
        return malformed();
    }
    ReasonedResponse {
        think: raw[to + THINK_OPEN.len()..tc].to_string(),
        answer: raw[ao + ANSWER_OPEN.len()..ac].to_string(),
        well_formed: true,
    }
}

/// Wraps rationale and answer text in the canonical tag layout.
pub fn wrap_completion(think: &str, answer: &str) -> String {
    format!("{THINK_OPEN}{think}{THINK_CLOSE}{ANSWER_OPEN}{answer}{ANSWER_CLOSE}")
}

/// Binary format reward: 1 when the tags are well formed and (in strict mode)
/// the answer parses under the task grammar.
pub fn format_reward(raw: &str, task: Task, mode: FormatMode) -> u8 {
    let resp = extract_tagged(raw);
    if !resp.well_formed {
        return 0;
    }
    match mode {
        FormatMode::TagsOnly => 1,
        FormatMode::Strict => u8::from(parse_answer(task, &resp.answer).is_ok()),
    }
}

/// Trims whitespace and an optional code fence. Returns the body and its byte
/// offset in `text`.
fn strip_fence(text: &str) -> Result<(&str, usize), ParseError> {
    let start = text.len() - text.trim_start().len();
    let trimmed = text.trim();
    let Some(rest) = trimmed.strip_prefix("```") else {
        return Ok((trimmed, start));
    };
    let lang_len = rest
        .find(|c: char| !c.is_ascii_alphanumeric())
        .unwrap_or(rest.len());
    let rest = &rest[lang_len..];
    let Some(body) = rest.strip_suffix("```") else {
        return Err(ParseError::new(text.len(), "unterminated code fence"));
    };
    let inner_start = start + 3 + lang_len;
    let lead = body.len() - body.trim_start().len();
    Ok((body.trim(), inner_start + lead))
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(text.len());
        }
        offset += l.len();
    }
    text.len()
}

fn parse_json(body: &str, base: usize) -> Result<Value, ParseError> {
    serde_json::from_str(body).map_err(|e| {
        ParseError::new(
            base + byte_offset(body, e.line(), e.column()),
            format!("invalid JSON: {e}"),
        )
    })
}

fn numbers<const N: usize>(v: &Value, what: &str, at: usize) -> Result<[f64; N], ParseError> {
    let arr = v
        .as_array()
        .filter(|a| a.len() == N)
        .ok_or_else(|| ParseError::new(at, format!("{what} must be an array of {N} numbers")))?;
    let mut out = [0.0; N];
    for (slot, item) in out.iter_mut().zip(arr) {
        *slot = item
            .as_f64()
            .ok_or_else(|| ParseError::new(at, format!("{what} holds a non-numeric value")))?;
    }
    Ok(out)
}

fn bbox_from(v: &Value, at: usize) -> Result<BBox, ParseError> {
    let [a, b, c, d] = numbers::<4>(v, "bbox_2d", at)?;
    BBox::from_corners(a, b, c, d).map_err(|e| ParseError::new(at, e.to_string()))
}

fn field<'a>(obj: &'a Value, key: &str, at: usize) -> Result<&'a Value, ParseError> {
    obj.get(key)
        .ok_or_else(|| ParseError::new(at, format!("missing field {key:?}")))
}

/// REC answer: `[x1, y1, x2, y2]`, `{"bbox_2d": [...]}` or a one-element list
/// holding such an object. Swapped corners are repaired.
pub fn parse_rec(answer: &str) -> Result<ParsedAnswer, ParseError> {
    let (body, at) = strip_fence(answer)?;
    if body.is_empty() {
        return Err(ParseError::new(at, "empty answer"));
    }
    let value = parse_json(body, at)?;
    let boxed = match &value {
        Value::Array(items) if items.len() == 1 && items[0].is_object() => {
            field(&items[0], "bbox_2d", at)?
        }
        Value::Array(_) => &value,
        Value::Object(_) => field(&value, "bbox_2d", at)?,
        _ => return Err(ParseError::new(at, "expected a bounding box")),
    };
    Ok(ParsedAnswer::Rec(bbox_from(boxed, at)?))
}

fn json_items(answer: &str) -> Result<Option<(Vec<Value>, usize)>, ParseError> {
    let (body, at) = strip_fence(answer)?;
    if body == "None" {
        return Ok(None);
    }
    match parse_json(body, at)? {
        Value::Array(items) => Ok(Some((items, at))),
        _ => Err(ParseError::new(at, "expected a JSON array of objects")),
    }
}

/// OVD answer: a JSON array of `{"bbox_2d", "label"}` objects, or `None`.
pub fn parse_ovd(answer: &str) -> Result<ParsedAnswer, ParseError> {
    let Some((values, at)) = json_items(answer)? else {
        return Ok(ParsedAnswer::Ovd {
            items: Vec::new(),
            is_none: true,
        });
    };
    let items = values
        .iter()
        .map(|v| {
            let bbox = bbox_from(field(v, "bbox_2d", at)?, at)?;
            let label = field(v, "label", at)?
                .as_str()
                .ok_or_else(|| ParseError::new(at, "label must be a string"))?
                .to_string();
            Ok(OvdItem { bbox, label })
        })
        .collect::<Result<Vec<_>, ParseError>>()?;
    Ok(ParsedAnswer::Ovd {
        items,
        is_none: false,
    })
}

fn keypoint_in(bbox: &BBox, v: &Value, what: &str, at: usize) -> Result<(Keypoint, bool), ParseError> {
    let [x, y] = numbers::<2>(v, what, at)?;
    let raw = Keypoint { x, y };
    let clamped = bbox.clamp_point(&raw);
    Ok((clamped, clamped != raw))
}

/// GRES answer: a JSON array of `{"bbox_2d", "keypoint1", "keypoint2"}`
/// objects, or `None`. Keypoints outside their box are clamped and flagged.
pub fn parse_gres(answer: &str) -> Result<ParsedAnswer, ParseError> {
    let Some((values, at)) = json_items(answer)? else {
        return Ok(ParsedAnswer::Gres {
            items: Vec::new(),
            is_none: true,
        });
    };
    let items = values
        .iter()
        .map(|v| {
            let bbox = bbox_from(field(v, "bbox_2d", at)?, at)?;
            let (keypoint1, c1) = keypoint_in(&bbox, field(v, "keypoint1", at)?, "keypoint1", at)?;
            let (keypoint2, c2) = keypoint_in(&bbox, field(v, "keypoint2", at)?, "keypoint2", at)?;
            Ok(GresItem {
                bbox,
                keypoint1,
                keypoint2,
                clamped: c1 || c2,
            })
        })
        .collect::<Result<Vec<_>, ParseError>>()?;
    Ok(ParsedAnswer::Gres {
        items,
        is_none: false,
    })
}

pub fn parse_answer(task: Task, answer: &str) -> Result<ParsedAnswer, ParseError> {
    match task {
        Task::Rec => parse_rec(answer),
        Task::Ovd => parse_ovd(answer),
        Task::Gres => parse_gres(answer),
    }
}

/// Parses a full completion: tags first, then the answer body.
pub fn parse_completion(raw: &str, task: Task) -> Result<ParsedAnswer, ParseError> {
    let resp = extract_tagged(raw);
    if !resp.well_formed {
        return Err(ParseError::new(0, "completion is not wrapped in think/answer tags"));
    }
    parse_answer(task, &resp.answer)
}

/// Shortest decimal that round-trips; integral values print without a fraction.
fn num(v: f64) -> String {
    format!("{}", v + 0.0)
}

fn emit_box(b: &BBox) -> String {
    format!("[{}, {}, {}, {}]", num(b.x1), num(b.y1), num(b.x2), num(b.y2))
}

fn emit_point(p: &Keypoint) -> String {
    format!("[{}, {}]", num(p.x), num(p.y))
}

/// Canonical answer text; `parse_answer` maps it back to an equal value.
pub fn emit(answer: &ParsedAnswer) -> String {
    match answer {
        ParsedAnswer::Rec(b) => emit_box(b),
        ParsedAnswer::Ovd { is_none: true, .. } | ParsedAnswer::Gres { is_none: true, .. } => {
            "None".to_string()
        }
        ParsedAnswer::Ovd { items, .. } => {
            let parts: Vec<String> = items
                .iter()
                .map(|it| {
                    let label = serde_json::to_string(&it.label).expect("string serialization");
                    format!("{{\"bbox_2d\": {}, \"label\": {}}}", emit_box(&it.bbox), label)
                })
                .collect();
            format!("[{}]", parts.join(", "))
        }
        ParsedAnswer::Gres { items, .. } => {
            let parts: Vec<String> = items
                .iter()
                .map(|it| {
                    format!(
                        "{{\"bbox_2d\": {}, \"keypoint1\": {}, \"keypoint2\": {}}}",
                        emit_box(&it.bbox),
                        emit_point(&it.keypoint1),
                        emit_point(&it.keypoint2)
                    )
                })
                .collect();
            format!("[{}]", parts.join(", "))
        }
    }
}
