//! Adapter from the publicly released annotation layout to the canonical
//! schema.
//!
//! The release keeps verbs and nouns in a single "space" file
//! (`{"verbs": {verb: {"order": [role, ...]}}, "nouns": {id: {"gloss": [...]}}}`)
//! and annotations in one object keyed by image file name, with a sentinel
//! box `[-1, -1, -1, -1]` for ungrounded roles and lowercase role names.
//! Role names are mapped to the canonical capitalized form (`place` becomes
//! `Place`).

use std::collections::BTreeMap;

use serde::Deserialize;
use serde_json::{json, Map, Value};

use crate::frame::{NounVocabulary, VerbEntry, VerbLexicon};
use crate::{Error, Result};

pub const SENTINEL_BOX: [f64; 4] = [-1.0, -1.0, -1.0, -1.0];

pub fn canonical_role(role: &str) -> String {
    let mut chars = role.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

#[derive(Deserialize)]
struct RawSpace {
    verbs: BTreeMap<String, RawVerb>,
    nouns: Map<String, Value>,
}

#[derive(Deserialize)]
struct RawVerb {
    order: Vec<String>,
}

/// Reads the release's space file into a lexicon and vocabulary.
pub fn convert_space(text: &str) -> Result<(VerbLexicon, NounVocabulary)> {
    let raw: RawSpace = serde_json::from_str(text)?;
    let lexicon = VerbLexicon::from_entries(
        raw.verbs
            .into_iter()
            .map(|(verb, v)| VerbEntry::new(verb, v.order.iter().map(|r| canonical_role(r)).collect()))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let vocabulary = NounVocabulary::from_json(&Value::Object(raw.nouns).to_string())?;
    Ok((lexicon, vocabulary))
}

#[derive(Deserialize)]
struct RawReleaseImage {
    width: u32,
    height: u32,
    verb: String,
    frames: Vec<BTreeMap<String, String>>,
    #[serde(default)]
    bb: BTreeMap<String, Vec<f64>>,
}

/// Converts release annotations to canonical records, ordered by image id.
pub fn convert_annotations(text: &str) -> Result<Vec<Value>> {
    let raw: BTreeMap<String, RawReleaseImage> = serde_json::from_str(text)?;
    raw.into_iter()
        .map(|(id, img)| {
            let roles: Vec<&String> = img.frames.first().map(|f| f.keys().collect()).unwrap_or_default();
            let frames: Vec<Value> = img
                .frames
                .iter()
                .map(|f| {
                    Value::Object(
                        f.iter()
                            .map(|(r, n)| (canonical_role(r), Value::String(n.clone())))
                            .collect(),
                    )
                })
                .collect();
            let mut boxes = Map::new();
            for role in roles {
                let value = match img.bb.get(role) {
                    None => Value::Null,
                    Some(b) if b.len() != 4 => {
                        return Err(Error::Record {
                            line: 0,
                            image_id: id.clone(),
                            field: format!("bb.{role}"),
                            message: format!("expected 4 coordinates, got {}", b.len()),
                        })
                    }
                    Some(b) if b.as_slice() == SENTINEL_BOX => Value::Null,
                    Some(b) => json!(b),
                };
                boxes.insert(canonical_role(role), value);
            }
            Ok(json!({
                "id": id,
                "width": img.width,
                "height": img.height,
                "verb": img.verb,
                "frames": frames,
                "boxes": boxes,
            }))
        })
        .collect()
}
