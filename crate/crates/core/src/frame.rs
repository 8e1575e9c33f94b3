//! Verbs, roles, nouns, frames and groundings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// The location role. The location of an action is the whole image, so this
/// role is never grounded.
pub const PLACE_ROLE: &str = "Place";

/// Maximum number of roles a verb may define.
pub const MAX_ROLES: usize = 6;

/// Number of annotator frames per image.
pub const ANNOTATORS: usize = 3;

/// Axis-aligned box `[x1, y1, x2, y2]` in pixels, origin top-left.
///
/// Always satisfies `0 <= x1 < x2`, `0 <= y1 < y2` with finite coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let reject = |reason| Error::InvalidBox {
            x1,
            y1,
            x2,
            y2,
            reason,
        };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(reject("non-finite coordinate"));
        }
        if x1 < 0.0 || y1 < 0.0 {
            return Err(reject("negative coordinate"));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(reject("empty extent"));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Area of the overlap with `other`, 0 when the boxes do not meet.
    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        crate::geometry::iou(self, other)
    }

    /// Clamps raw coordinates into `[0, width] x [0, height]`.
    ///
    /// Returns the box and whether any coordinate moved. Fails when nothing
    /// of the box remains inside the image.
    pub fn clamped(raw: [f64; 4], width: f64, height: f64) -> Result<(Self, bool)> {
        let [x1, y1, x2, y2] = raw;
        let c = [
            x1.clamp(0.0, width),
            y1.clamp(0.0, height),
            x2.clamp(0.0, width),
            y2.clamp(0.0, height),
        ];
        let moved = c != raw;
        Ok((Self::new(c[0], c[1], c[2], c[3])?, moved))
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.coords()
    }
}

/// A verb and its ordered roles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerbEntry {
    pub verb: String,
    pub roles: Vec<String>,
}

impl VerbEntry {
    pub fn new(verb: impl Into<String>, roles: Vec<String>) -> Result<Self> {
        let verb = verb.into();
        if roles.is_empty() || roles.len() > MAX_ROLES {
            return Err(Error::InvalidLexicon(format!(
                "verb `{verb}` has {} roles, expected 1..={MAX_ROLES}",
                roles.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for r in &roles {
            if r.is_empty() {
                return Err(Error::InvalidLexicon(format!(
                    "verb `{verb}` has an empty role name"
                )));
            }
            if !seen.insert(r.as_str()) {
                return Err(Error::InvalidLexicon(format!(
                    "verb `{verb}` repeats role `{r}`"
                )));
            }
        }
        Ok(Self { verb, roles })
    }

    pub fn role_count(&self) -> usize {
        self.roles.len()
    }

    pub fn role_index(&self, role: &str) -> Option<usize> {
        self.roles.iter().position(|r| r == role)
    }
}

/// Verb catalog: verb id to ordered role list.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VerbLexicon {
    entries: BTreeMap<String, VerbEntry>,
}

impl VerbLexicon {
    /// Number of verbs in the full lexicon.
    pub const FULL_SIZE: usize = 504;

    pub fn from_entries(entries: impl IntoIterator<Item = VerbEntry>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for e in entries {
            if map.contains_key(&e.verb) {
                return Err(Error::InvalidLexicon(format!("duplicate verb `{}`", e.verb)));
            }
            map.insert(e.verb.clone(), e);
        }
        if map.is_empty() {
            return Err(Error::InvalidLexicon("no verbs".into()));
        }
        Ok(Self { entries: map })
    }

    /// Parses `{"verb": ["Role", ...], ...}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, Vec<String>> = serde_json::from_str(text)?;
        Self::from_entries(
            raw.into_iter()
                .map(|(verb, roles)| VerbEntry::new(verb, roles))
                .collect::<Result<Vec<_>>>()?,
        )
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        let map: BTreeMap<&str, &[String]> = self
            .entries
            .iter()
            .map(|(k, v)| (k.as_str(), v.roles.as_slice()))
            .collect();
        serde_json::to_value(map).expect("string map serializes")
    }

    pub fn get(&self, verb: &str) -> Option<&VerbEntry> {
        self.entries.get(verb)
    }

    pub fn entry(&self, verb: &str) -> Result<&VerbEntry> {
        self.get(verb).ok_or_else(|| Error::UnknownVerb(verb.to_owned()))
    }

    pub fn contains(&self, verb: &str) -> bool {
        self.entries.contains_key(verb)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &VerbEntry> {
        self.entries.values()
    }

    /// Number of distinct role names across all verbs.
    pub fn distinct_roles(&self) -> usize {
        self.entries
            .values()
            .flat_map(|e| e.roles.iter())
            .collect::<BTreeSet<_>>()
            .len()
    }
}

/// Noun ids with optional glosses. The null value is represented by `None`
/// wherever a noun appears and is never a member of the vocabulary.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NounVocabulary {
    entries: BTreeMap<String, Option<String>>,
}

impl NounVocabulary {
    /// Noun classes in the full vocabulary.
    pub const FULL_SIZE: usize = 11_538;

    pub fn new(entries: impl IntoIterator<Item = (String, Option<String>)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (id, gloss) in entries {
            if id.is_empty() {
                return Err(Error::InvalidVocabulary(
                    "the empty string is reserved for the null noun".into(),
                ));
            }
            map.insert(id, gloss);
        }
        Ok(Self { entries: map })
    }

    /// Accepts either `["n1", "n2", ...]` or `{"n1": gloss, ...}` where a
    /// gloss is a string, a list of strings (first one is kept), an object
    /// with a `gloss` field of either form, or null.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value {
            serde_json::Value::Array(items) => Self::new(
                items
                    .into_iter()
                    .map(|v| match v {
                        serde_json::Value::String(s) => Ok((s, None)),
                        other => Err(Error::InvalidVocabulary(format!(
                            "expected noun id string, got {other}"
                        ))),
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
            serde_json::Value::Object(map) => {
                Self::new(map.into_iter().map(|(k, v)| (k, gloss_of(&v))))
            }
            other => Err(Error::InvalidVocabulary(format!(
                "expected array or object, got {}",
                json_kind(&other)
            ))),
        }
    }

    pub fn contains(&self, noun: &str) -> bool {
        self.entries.contains_key(noun)
    }

    pub fn gloss(&self, noun: &str) -> Option<&str> {
        self.entries.get(noun).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

fn gloss_of(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Array(a) => a.first().and_then(|f| f.as_str()).map(str::to_owned),
        serde_json::Value::Object(o) => o.get("gloss").and_then(gloss_of),
        _ => None,
    }
}

pub(crate) fn json_kind(v: &serde_json::Value) -> &'static str {
    match v {
        serde_json::Value::Null => "null",
        serde_json::Value::Bool(_) => "bool",
        serde_json::Value::Number(_) => "number",
        serde_json::Value::String(_) => "string",
        serde_json::Value::Array(_) => "array",
        serde_json::Value::Object(_) => "object",
    }
}

/// One role of a frame: its noun (`None` is the null value) and grounding.
#[derive(Debug, Clone, PartialEq)]
pub struct RoleSlot {
    pub role: String,
    pub noun: Option<String>,
    pub grounding: Option<BoundingBox>,
}

impl RoleSlot {
    pub fn new(role: impl Into<String>, noun: Option<&str>, grounding: Option<BoundingBox>) -> Self {
        Self {
            role: role.into(),
            noun: noun.map(str::to_owned),
            grounding,
        }
    }

    pub fn is_place(&self) -> bool {
        self.role == PLACE_ROLE
    }
}

/// A verb with one slot per role, in lexicon order.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundedFrame {
    pub verb: String,
    pub slots: Vec<RoleSlot>,
}

impl GroundedFrame {
    pub fn new(verb: impl Into<String>, slots: Vec<RoleSlot>) -> Self {
        Self {
            verb: verb.into(),
            slots,
        }
    }

    /// Frame with every role null and ungrounded.
    pub fn empty(entry: &VerbEntry) -> Self {
        Self {
            verb: entry.verb.clone(),
            slots: entry
                .roles
                .iter()
                .map(|r| RoleSlot::new(r.clone(), None, None))
                .collect(),
        }
    }

    pub fn nouns(&self) -> impl Iterator<Item = Option<&str>> {
        self.slots.iter().map(|s| s.noun.as_deref())
    }

    pub fn groundings(&self) -> impl Iterator<Item = Option<&BoundingBox>> {
        self.slots.iter().map(|s| s.grounding.as_ref())
    }

    /// Per-role grounded/ungrounded decision.
    pub fn grounded_flags(&self) -> Vec<bool> {
        self.slots.iter().map(|s| s.grounding.is_some()).collect()
    }

    pub fn slot(&self, role: &str) -> Option<&RoleSlot> {
        self.slots.iter().find(|s| s.role == role)
    }
}

/// Structural rule a frame can break.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    UnknownVerb,
    RoleCountMismatch,
    RoleNameMismatch,
    PlaceGrounded,
    NullNounGrounded,
}

impl Rule {
    pub fn as_str(&self) -> &'static str {
        match self {
            Rule::UnknownVerb => "unknown-verb",
            Rule::RoleCountMismatch => "role-count-mismatch",
            Rule::RoleNameMismatch => "role-name-mismatch",
            Rule::PlaceGrounded => "place-grounded",
            Rule::NullNounGrounded => "null-noun-grounded",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// Index into the frame's slots, `None` for frame-level rules.
    pub role_index: Option<usize>,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.role_index {
            Some(i) => write!(f, "{} (role {i}): {}", self.rule, self.detail),
            None => write!(f, "{}: {}", self.rule, self.detail),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn push(&mut self, role_index: Option<usize>, rule: Rule, detail: impl Into<String>) {
        self.violations.push(Violation {
            role_index,
            rule,
            detail: detail.into(),
        });
    }

    pub fn rules(&self) -> Vec<Rule> {
        self.violations.iter().map(|v| v.rule).collect()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("valid");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Checks a frame against the lexicon. Violations are reported, never raised.
pub fn validate_frame(frame: &GroundedFrame, lexicon: &VerbLexicon) -> ValidationReport {
    let mut report = ValidationReport::default();
    let Some(entry) = lexicon.get(&frame.verb) else {
        report.push(None, Rule::UnknownVerb, format!("verb `{}`", frame.verb));
        return report;
    };
    if entry.roles.len() != frame.slots.len() {
        report.push(
            None,
            Rule::RoleCountMismatch,
            format!(
                "verb `{}` has {} roles, frame has {}",
                entry.verb,
                entry.roles.len(),
                frame.slots.len()
            ),
        );
    }
    for (i, slot) in frame.slots.iter().enumerate() {
        if let Some(expected) = entry.roles.get(i) {
            if *expected != slot.role {
                report.push(
                    Some(i),
                    Rule::RoleNameMismatch,
                    format!("expected `{expected}`, found `{}`", slot.role),
                );
            }
        }
        if slot.grounding.is_some() {
            if slot.is_place() {
                report.push(Some(i), Rule::PlaceGrounded, "Place carries a box");
            }
            if slot.noun.is_none() {
                report.push(
                    Some(i),
                    Rule::NullNounGrounded,
                    format!("role `{}` is null but grounded", slot.role),
                );
            }
        }
    }
    report
}

/// An annotated image: three annotator frames (nouns only) sharing the image
/// verb, and one merged ground-truth grounding per role.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub verb: String,
    pub annotator_frames: Vec<GroundedFrame>,
    pub gt_groundings: Vec<Option<BoundingBox>>,
}

impl AnnotatedImage {
    pub fn roles(&self) -> impl Iterator<Item = &str> {
        self.annotator_frames[0].slots.iter().map(|s| s.role.as_str())
    }

    pub fn role_count(&self) -> usize {
        self.gt_groundings.len()
    }

    /// The annotators' nouns for role `index`.
    pub fn annotator_nouns(&self, index: usize) -> impl Iterator<Item = Option<&str>> {
        self.annotator_frames
            .iter()
            .map(move |f| f.slots[index].noun.as_deref())
    }

    /// Annotator `k`'s nouns combined with the merged groundings.
    pub fn grounded_frame(&self, k: usize) -> GroundedFrame {
        let mut frame = self.annotator_frames[k].clone();
        for (slot, gt) in frame.slots.iter_mut().zip(&self.gt_groundings) {
            slot.grounding = *gt;
        }
        frame
    }

    /// Rules for the merged ground truth: Place is never grounded, and a
    /// role every annotator left null carries no box. Annotator frames must
    /// match the lexicon.
    pub fn validate(&self, lexicon: &VerbLexicon) -> ValidationReport {
        let mut report = ValidationReport::default();
        if self.annotator_frames.len() != ANNOTATORS {
            report.push(
                None,
                Rule::RoleCountMismatch,
                format!("expected {ANNOTATORS} annotator frames, found {}", self.annotator_frames.len()),
            );
        }
        for frame in &self.annotator_frames {
            let mut r = validate_frame(frame, lexicon);
            if frame.verb != self.verb {
                r.push(
                    None,
                    Rule::UnknownVerb,
                    format!("annotator verb `{}` differs from image verb `{}`", frame.verb, self.verb),
                );
            }
            report.violations.append(&mut r.violations);
        }
        if let Some(entry) = lexicon.get(&self.verb) {
            if entry.roles.len() != self.gt_groundings.len() {
                report.push(
                    None,
                    Rule::RoleCountMismatch,
                    format!("{} groundings for {} roles", self.gt_groundings.len(), entry.roles.len()),
                );
            }
            for (i, (role, gt)) in entry.roles.iter().zip(&self.gt_groundings).enumerate() {
                if gt.is_none() {
                    continue;
                }
                if role == PLACE_ROLE {
                    report.push(Some(i), Rule::PlaceGrounded, "Place carries a box");
                }
                if self.annotator_frames.iter().all(|f| {
                    f.slots.get(i).map(|s| s.noun.is_none()).unwrap_or(true)
                }) {
                    report.push(
                        Some(i),
                        Rule::NullNounGrounded,
                        format!("role `{role}` is null for every annotator but grounded"),
                    );
                }
            }
        }
        report
    }
}

/// A model's output for one image: ranked verbs and a frame per hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub image_id: String,
    pub verb_ranking: Vec<String>,
    pub frames: BTreeMap<String, GroundedFrame>,
}

impl PredictionRecord {
    pub fn top1(&self) -> &str {
        &self.verb_ranking[0]
    }

    pub fn frame(&self, verb: &str) -> Option<&GroundedFrame> {
        self.frames.get(verb)
    }

    /// Rank of `verb` counting from 0, if present.
    pub fn rank_of(&self, verb: &str) -> Option<usize> {
        self.verb_ranking.iter().position(|v| v == verb)
    }

    pub fn grounded_flags(&self, verb: &str) -> Option<Vec<bool>> {
        self.frames.get(verb).map(GroundedFrame::grounded_flags)
    }

    /// Structural checks: non-empty ranking, frames only for ranked verbs,
    /// and each frame valid for its verb.
    pub fn validate(&self, lexicon: &VerbLexicon) -> ValidationReport {
        let mut report = ValidationReport::default();
        if self.verb_ranking.is_empty() {
            report.push(None, Rule::RoleCountMismatch, "empty verb ranking");
        }
        for (verb, frame) in &self.frames {
            if !self.verb_ranking.contains(verb) {
                report.push(None, Rule::UnknownVerb, format!("frame for unranked verb `{verb}`"));
            }
            let mut r = validate_frame(frame, lexicon);
            report.violations.append(&mut r.violations);
        }
        report
    }
}
