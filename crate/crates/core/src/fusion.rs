//! Late fusion of a situation recognizer's frame with detector boxes.
//!
//! Each non-null, non-Place role takes the box with the highest logit for
//! its noun, unless that logit falls below the threshold.

use std::collections::{BTreeMap, HashMap};

use serde::Deserialize;

use crate::frame::{BoundingBox, GroundedFrame};
use crate::{Error, Result};

/// Logit below which a noun's best box is rejected.
pub const DEFAULT_FUSION_THRESHOLD: f64 = -4.0;

/// Detector output for one image: `P` boxes and a `P x V` logit matrix over
/// the noun columns.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    boxes: Vec<BoundingBox>,
    columns: Vec<String>,
    column_index: HashMap<String, usize>,
    scores: Vec<f64>,
}

impl DetectionSet {
    /// `scores[p]` holds box `p`'s logits in `columns` order.
    pub fn new(boxes: Vec<BoundingBox>, columns: Vec<String>, scores: Vec<Vec<f64>>) -> Result<Self> {
        if scores.len() != boxes.len() {
            return Err(Error::LengthMismatch {
                left: boxes.len(),
                right: scores.len(),
            });
        }
        let mut flat = Vec::with_capacity(boxes.len() * columns.len());
        for row in &scores {
            if row.len() != columns.len() {
                return Err(Error::LengthMismatch {
                    left: columns.len(),
                    right: row.len(),
                });
            }
            if let Some(bad) = row.iter().find(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!("non-finite logit {bad}")));
            }
            flat.extend_from_slice(row);
        }
        let mut column_index = HashMap::with_capacity(columns.len());
        for (i, c) in columns.iter().enumerate() {
            if column_index.insert(c.clone(), i).is_some() {
                return Err(Error::InvalidParameter(format!("duplicate noun column `{c}`")));
            }
        }
        Ok(Self {
            boxes,
            columns,
            column_index,
            scores: flat,
        })
    }

    pub fn boxes(&self) -> &[BoundingBox] {
        &self.boxes
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn column(&self, noun: &str) -> Option<usize> {
        self.column_index.get(noun).copied()
    }

    pub fn logit(&self, row: usize, column: usize) -> f64 {
        self.scores[row * self.columns.len() + column]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let v = self.columns.len();
        &self.scores[row * v..(row + 1) * v]
    }

    /// Box with the highest logit for `noun` (lowest index on ties).
    pub fn best_box(&self, noun: &str) -> Result<Option<(usize, f64)>> {
        let col = self
            .column(noun)
            .ok_or_else(|| Error::UnknownNoun(noun.to_owned()))?;
        let mut best: Option<(usize, f64)> = None;
        for p in 0..self.boxes.len() {
            let s = self.logit(p, col);
            if best.map_or(true, |(_, b)| s > b) {
                best = Some((p, s));
            }
        }
        Ok(best)
    }
}

/// Grounds each non-null, non-Place role to the argmax box for its noun when
/// that logit is at least `threshold`. Existing groundings are replaced.
/// Several roles may share one box.
pub fn assign_groundings(
    frame: &GroundedFrame,
    detections: &DetectionSet,
    threshold: f64,
) -> Result<GroundedFrame> {
    let mut out = frame.clone();
    for slot in &mut out.slots {
        slot.grounding = None;
        let Some(noun) = slot.noun.as_deref() else {
            continue;
        };
        let best = detections.best_box(noun)?;
        if slot.is_place() {
            continue;
        }
        if let Some((p, score)) = best {
            if score >= threshold {
                slot.grounding = Some(detections.boxes[p]);
            }
        }
    }
    Ok(out)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDetectionFile {
    nouns: Vec<String>,
    images: BTreeMap<String, RawDetections>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDetections {
    boxes: Vec<BoundingBox>,
    scores: Vec<Vec<f64>>,
}

/// Reads `{"nouns": [...], "images": {id: {"boxes": [[x1,y1,x2,y2], ...],
/// "scores": [[logit per noun], ...]}}}`.
pub fn load_detections(text: &str) -> Result<BTreeMap<String, DetectionSet>> {
    let raw: RawDetectionFile = serde_json::from_str(text)?;
    raw.images
        .into_iter()
        .map(|(id, d)| {
            let set = DetectionSet::new(d.boxes, raw.nouns.clone(), d.scores).map_err(|e| Error::Record {
                line: 0,
                image_id: id.clone(),
                field: "scores".into(),
                message: e.to_string(),
            })?;
            Ok((id, set))
        })
        .collect()
}
