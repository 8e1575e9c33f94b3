//! Annotation, lexicon and prediction files, and corpus statistics.
//!
//! Annotation and prediction files hold one JSON object per image, either as
//! a top-level array or as JSON Lines. Errors carry the 1-based line on which
//! the offending record starts.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use serde_json::{json, Map, Value};

use crate::frame::{
    AnnotatedImage, BoundingBox, GroundedFrame, NounVocabulary, PredictionRecord, RoleSlot,
    VerbEntry, VerbLexicon, ANNOTATORS,
};
use crate::{Error, Result};

/// Worker boxes combined into each merged grounding.
pub const WORKERS_PER_ROLE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidParameter(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadOptions {
    pub split: Option<Split>,
    /// Accept any non-zero number of raw worker boxes instead of exactly 3.
    pub relax_worker_count: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            split: None,
            relax_worker_count: false,
        }
    }
}

/// Non-fatal observation made while loading, e.g. a clamped box.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadWarning {
    pub line: usize,
    pub image_id: String,
    pub role: String,
    pub message: String,
}

impl fmt::Display for LoadWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "line {}: image `{}`: role `{}`: {}",
            self.line, self.image_id, self.role, self.message
        )
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub lexicon: VerbLexicon,
    pub vocabulary: NounVocabulary,
    pub images: Vec<AnnotatedImage>,
    pub split: Option<Split>,
    pub warnings: Vec<LoadWarning>,
}

impl Dataset {
    pub fn image(&self, id: &str) -> Option<&AnnotatedImage> {
        self.images.iter().find(|i| i.image_id == id)
    }

    /// Image ids grouped by verb; ids keep file order within a verb.
    pub fn ids_by_verb(&self) -> BTreeMap<String, Vec<String>> {
        let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for img in &self.images {
            out.entry(img.verb.clone()).or_default().push(img.image_id.clone());
        }
        out
    }
}

/// Splits a JSON array or JSON Lines file into records, each with its
/// starting line.
pub fn json_records(text: &str) -> Result<Vec<(usize, &RawValue)>> {
    let trimmed = text.trim_start();
    let raws: Vec<&RawValue> = if trimmed.is_empty() {
        Vec::new()
    } else if trimmed.starts_with('[') {
        serde_json::from_str(text)?
    } else {
        serde_json::Deserializer::from_str(text)
            .into_iter::<&RawValue>()
            .collect::<std::result::Result<_, _>>()?
    };
    let base = text.as_ptr() as usize;
    Ok(raws
        .into_iter()
        .map(|raw| {
            let offset = raw.get().as_ptr() as usize - base;
            (line_of(text, offset), raw)
        })
        .collect())
}

fn line_of(text: &str, offset: usize) -> usize {
    text.as_bytes()[..offset].iter().filter(|&&b| b == b'\n').count() + 1
}

#[derive(Deserialize)]
struct IdOnly {
    id: Option<Value>,
}

/// The record's `id` field as text, or `?` when absent.
pub fn record_id(raw: &RawValue) -> String {
    serde_json::from_str::<IdOnly>(raw.get())
        .ok()
        .and_then(|r| r.id)
        .map(|v| match v {
            Value::String(s) => s,
            other => other.to_string(),
        })
        .unwrap_or_else(|| "?".into())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawImage {
    id: String,
    width: u32,
    height: u32,
    verb: String,
    frames: Vec<BTreeMap<String, String>>,
    boxes: BTreeMap<String, Option<RawBoxes>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawBoxes {
    Merged([f64; 4]),
    Workers(Vec<[f64; 4]>),
}

pub(crate) struct RecordCtx<'a> {
    pub(crate) line: usize,
    pub(crate) image_id: &'a str,
}

impl RecordCtx<'_> {
    pub(crate) fn err(&self, field: impl Into<String>, message: impl Into<String>) -> Error {
        Error::Record {
            line: self.line,
            image_id: self.image_id.to_owned(),
            field: field.into(),
            message: message.into(),
        }
    }
}

fn parse_noun(
    ctx: &RecordCtx<'_>,
    field: &str,
    noun: &str,
    vocabulary: Option<&NounVocabulary>,
) -> Result<Option<String>> {
    if noun.is_empty() {
        return Ok(None);
    }
    if let Some(v) = vocabulary {
        if !v.contains(noun) {
            return Err(ctx.err(field, format!("unknown noun `{noun}`")));
        }
    }
    Ok(Some(noun.to_owned()))
}

/// Checks that `keys` names exactly `roles`.
fn check_role_keys<'k>(
    ctx: &RecordCtx<'_>,
    field: &str,
    roles: &[String],
    keys: impl Iterator<Item = &'k String>,
    require_all: bool,
) -> Result<()> {
    let keys: BTreeSet<&str> = keys.map(String::as_str).collect();
    for k in &keys {
        if !roles.iter().any(|r| r == k) {
            return Err(ctx.err(format!("{field}.{k}"), "unknown role"));
        }
    }
    if require_all {
        for r in roles {
            if !keys.contains(r.as_str()) {
                return Err(ctx.err(format!("{field}.{r}"), "role missing"));
            }
        }
    }
    Ok(())
}

/// Coordinate-wise mean of the three worker boxes for one role.
pub fn merge_worker_boxes(boxes: &[BoundingBox]) -> Result<BoundingBox> {
    if boxes.len() != WORKERS_PER_ROLE {
        return Err(Error::WorkerCount {
            expected: WORKERS_PER_ROLE,
            got: boxes.len(),
        });
    }
    average_boxes(boxes)
}

/// Coordinate-wise mean of any non-empty set of boxes.
pub fn average_boxes(boxes: &[BoundingBox]) -> Result<BoundingBox> {
    let raw: Vec<[f64; 4]> = boxes.iter().map(BoundingBox::coords).collect();
    let m = average_raw(&raw).ok_or(Error::WorkerCount {
        expected: WORKERS_PER_ROLE,
        got: 0,
    })?;
    BoundingBox::try_from(m)
}

fn average_raw(boxes: &[[f64; 4]]) -> Option<[f64; 4]> {
    if boxes.is_empty() {
        return None;
    }
    let n = boxes.len() as f64;
    let mut sum = [0.0; 4];
    for b in boxes {
        for (s, v) in sum.iter_mut().zip(b) {
            *s += v;
        }
    }
    Some(sum.map(|s| s / n))
}

/// Annotation records with structure checked but frame rules not enforced.
#[derive(Debug, Clone, Default)]
pub struct ParsedAnnotations {
    pub images: Vec<(usize, AnnotatedImage)>,
    pub warnings: Vec<LoadWarning>,
}

/// Parses canonical annotation records. Structural problems (malformed JSON,
/// unknown verbs, nouns or roles, missing roles, bad boxes) are errors; frame
/// rules are left to [`AnnotatedImage::validate`].
pub fn parse_annotations(
    text: &str,
    lexicon: &VerbLexicon,
    vocabulary: Option<&NounVocabulary>,
    options: &LoadOptions,
) -> Result<ParsedAnnotations> {
    let mut out = ParsedAnnotations::default();
    for (line, raw) in json_records(text)? {
        let id = record_id(raw);
        let ctx = RecordCtx {
            line,
            image_id: &id,
        };
        let rec: RawImage = serde_json::from_str(raw.get()).map_err(|e| ctx.err("record", e.to_string()))?;
        let entry = lexicon
            .get(&rec.verb)
            .ok_or_else(|| ctx.err("verb", format!("unknown verb `{}`", rec.verb)))?;
        if rec.width == 0 || rec.height == 0 {
            return Err(ctx.err("width", "image dimensions must be positive"));
        }
        if rec.frames.len() != ANNOTATORS {
            return Err(ctx.err(
                "frames",
                format!("expected {ANNOTATORS} annotator frames, got {}", rec.frames.len()),
            ));
        }
        let mut frames = Vec::with_capacity(ANNOTATORS);
        for (k, raw_frame) in rec.frames.iter().enumerate() {
            let field = format!("frames[{k}]");
            check_role_keys(&ctx, &field, &entry.roles, raw_frame.keys(), true)?;
            let mut slots = Vec::with_capacity(entry.roles.len());
            for role in &entry.roles {
                let noun = parse_noun(&ctx, &format!("{field}.{role}"), &raw_frame[role], vocabulary)?;
                slots.push(RoleSlot {
                    role: role.clone(),
                    noun,
                    grounding: None,
                });
            }
            frames.push(GroundedFrame::new(entry.verb.clone(), slots));
        }

        check_role_keys(&ctx, "boxes", &entry.roles, rec.boxes.keys(), true)?;
        let (w, h) = (f64::from(rec.width), f64::from(rec.height));
        let mut gt = Vec::with_capacity(entry.roles.len());
        for role in &entry.roles {
            let field = format!("boxes.{role}");
            let raw_box = match &rec.boxes[role] {
                None => {
                    gt.push(None);
                    continue;
                }
                Some(RawBoxes::Merged(b)) => *b,
                Some(RawBoxes::Workers(list)) => {
                    if list.is_empty()
                        || (!options.relax_worker_count && list.len() != WORKERS_PER_ROLE)
                    {
                        return Err(ctx.err(
                            field,
                            format!("expected {WORKERS_PER_ROLE} worker boxes, got {}", list.len()),
                        ));
                    }
                    average_raw(list).expect("non-empty")
                }
            };
            let (b, moved) =
                BoundingBox::clamped(raw_box, w, h).map_err(|e| ctx.err(&field, e.to_string()))?;
            if moved {
                out.warnings.push(LoadWarning {
                    line,
                    image_id: rec.id.clone(),
                    role: role.clone(),
                    message: format!("box {raw_box:?} clamped to {:?}", b.coords()),
                });
            }
            gt.push(Some(b));
        }

        out.images.push((
            line,
            AnnotatedImage {
                image_id: rec.id,
                width: rec.width,
                height: rec.height,
                verb: rec.verb,
                annotator_frames: frames,
                gt_groundings: gt,
            },
        ));
    }
    Ok(out)
}

/// Loads and fully validates a dataset.
///
/// When `vocabulary_source` is `None` the vocabulary is the set of nouns the
/// annotations use.
pub fn load_dataset(
    annotation_source: &str,
    lexicon_source: &str,
    vocabulary_source: Option<&str>,
    options: &LoadOptions,
) -> Result<Dataset> {
    let lexicon = VerbLexicon::from_json(lexicon_source)?;
    let vocabulary = vocabulary_source.map(NounVocabulary::from_json).transpose()?;
    load_dataset_with(annotation_source, lexicon, vocabulary, options)
}

pub fn load_dataset_with(
    annotation_source: &str,
    lexicon: VerbLexicon,
    vocabulary: Option<NounVocabulary>,
    options: &LoadOptions,
) -> Result<Dataset> {
    let parsed = parse_annotations(annotation_source, &lexicon, vocabulary.as_ref(), options)?;
    let mut seen = HashSet::new();
    for (_, img) in &parsed.images {
        if !seen.insert(img.image_id.as_str()) {
            return Err(Error::DuplicateImage(img.image_id.clone()));
        }
        let report = img.validate(&lexicon);
        if !report.is_valid() {
            return Err(Error::InvalidFrame {
                image_id: img.image_id.clone(),
                report,
            });
        }
    }
    let images: Vec<AnnotatedImage> = parsed.images.into_iter().map(|(_, i)| i).collect();
    let vocabulary = match vocabulary {
        Some(v) => v,
        None => NounVocabulary::new(
            images
                .iter()
                .flat_map(|i| i.annotator_frames.iter())
                .flat_map(|f| f.slots.iter())
                .filter_map(|s| s.noun.clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .map(|n| (n, None)),
        )?,
    };
    Ok(Dataset {
        lexicon,
        vocabulary,
        images,
        split: options.split,
        warnings: parsed.warnings,
    })
}

fn box_value(b: Option<&BoundingBox>) -> Value {
    match b {
        Some(b) => json!(b.coords()),
        None => Value::Null,
    }
}

/// Canonical JSON for an annotated image (merged boxes).
pub fn image_to_json(image: &AnnotatedImage) -> Value {
    let frames: Vec<Value> = image
        .annotator_frames
        .iter()
        .map(|f| {
            Value::Object(
                f.slots
                    .iter()
                    .map(|s| (s.role.clone(), Value::String(s.noun.clone().unwrap_or_default())))
                    .collect::<Map<_, _>>(),
            )
        })
        .collect();
    let boxes: Map<String, Value> = image
        .roles()
        .zip(&image.gt_groundings)
        .map(|(r, b)| (r.to_owned(), box_value(b.as_ref())))
        .collect();
    json!({
        "id": image.image_id,
        "width": image.width,
        "height": image.height,
        "verb": image.verb,
        "frames": frames,
        "boxes": boxes,
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPrediction {
    id: String,
    verbs: Vec<String>,
    frames: BTreeMap<String, RawPredFrame>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPredFrame {
    nouns: BTreeMap<String, String>,
    #[serde(default)]
    boxes: BTreeMap<String, Option<[f64; 4]>>,
}

/// Builds a frame from role-keyed noun and box maps. Every role needs a
/// noun (`""` is the null value); missing box keys mean ungrounded.
pub(crate) fn build_frame(
    ctx: &RecordCtx<'_>,
    field: &str,
    entry: &VerbEntry,
    nouns: &BTreeMap<String, String>,
    boxes: &BTreeMap<String, Option<[f64; 4]>>,
) -> Result<GroundedFrame> {
    check_role_keys(ctx, &format!("{field}.nouns"), &entry.roles, nouns.keys(), true)?;
    check_role_keys(ctx, &format!("{field}.boxes"), &entry.roles, boxes.keys(), false)?;
    let mut slots = Vec::with_capacity(entry.roles.len());
    for role in &entry.roles {
        let noun = parse_noun(ctx, "", &nouns[role], None)?;
        let grounding = match boxes.get(role).copied().flatten() {
            Some(b) => Some(
                BoundingBox::try_from(b).map_err(|e| ctx.err(format!("{field}.boxes.{role}"), e.to_string()))?,
            ),
            None => None,
        };
        slots.push(RoleSlot {
            role: role.clone(),
            noun,
            grounding,
        });
    }
    Ok(GroundedFrame::new(entry.verb.clone(), slots))
}

/// Parses prediction records. Structure is checked, frame rules are not.
pub fn parse_predictions(
    text: &str,
    lexicon: &VerbLexicon,
) -> Result<Vec<(usize, PredictionRecord)>> {
    let mut out = Vec::new();
    for (line, raw) in json_records(text)? {
        let id = record_id(raw);
        let ctx = RecordCtx {
            line,
            image_id: &id,
        };
        let rec: RawPrediction =
            serde_json::from_str(raw.get()).map_err(|e| ctx.err("record", e.to_string()))?;
        if rec.verbs.is_empty() {
            return Err(ctx.err("verbs", "empty verb ranking"));
        }
        for v in &rec.verbs {
            if !lexicon.contains(v) {
                return Err(ctx.err("verbs", format!("unknown verb `{v}`")));
            }
        }
        let mut frames = BTreeMap::new();
        for (verb, raw_frame) in &rec.frames {
            let field = format!("frames.{verb}");
            let entry = lexicon
                .get(verb)
                .ok_or_else(|| ctx.err(&field, format!("unknown verb `{verb}`")))?;
            if !rec.verbs.contains(verb) {
                return Err(ctx.err(&field, "frame for a verb missing from the ranking"));
            }
            let frame = build_frame(&ctx, &field, entry, &raw_frame.nouns, &raw_frame.boxes)?;
            frames.insert(verb.clone(), frame);
        }
        out.push((
            line,
            PredictionRecord {
                image_id: rec.id,
                verb_ranking: rec.verbs,
                frames,
            },
        ));
    }
    Ok(out)
}

/// Parses and validates prediction records.
pub fn load_predictions(text: &str, lexicon: &VerbLexicon) -> Result<Vec<PredictionRecord>> {
    let mut seen = HashSet::new();
    parse_predictions(text, lexicon)?
        .into_iter()
        .map(|(_, rec)| {
            if !seen.insert(rec.image_id.clone()) {
                return Err(Error::DuplicateImage(rec.image_id));
            }
            let report = rec.validate(lexicon);
            if report.is_valid() {
                Ok(rec)
            } else {
                Err(Error::InvalidFrame {
                    image_id: rec.image_id,
                    report,
                })
            }
        })
        .collect()
}

pub fn frame_to_json(frame: &GroundedFrame) -> Value {
    let nouns: Map<String, Value> = frame
        .slots
        .iter()
        .map(|s| (s.role.clone(), Value::String(s.noun.clone().unwrap_or_default())))
        .collect();
    let boxes: Map<String, Value> = frame
        .slots
        .iter()
        .map(|s| (s.role.clone(), box_value(s.grounding.as_ref())))
        .collect();
    json!({ "nouns": nouns, "boxes": boxes })
}

pub fn prediction_to_json(record: &PredictionRecord) -> Value {
    let frames: Map<String, Value> = record
        .frames
        .iter()
        .map(|(v, f)| (v.clone(), frame_to_json(f)))
        .collect();
    json!({ "id": record.image_id, "verbs": record.verb_ranking, "frames": frames })
}

/// One grounded noun occurrence, for scale/aspect distributions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleAspectSample {
    pub image_id: String,
    pub noun: String,
    pub verb: String,
    pub role: String,
    /// Larger of the box's width and height relative to the image's.
    pub scale: f64,
    /// Box height over box width.
    pub aspect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsReport {
    pub images: usize,
    pub verbs: usize,
    pub mean_frame_length: f64,
    pub total_noun_slots: usize,
    pub non_null_slots: usize,
    pub grounded_slots: usize,
    pub grounded_fraction: f64,
    pub groundings_per_noun: BTreeMap<String, usize>,
    pub role_grounding_rate: BTreeMap<String, f64>,
    pub scale_aspect_samples: Vec<ScaleAspectSample>,
}

/// Scale and aspect of a box within a `width` x `height` image. `None` for a
/// zero-width box.
pub fn scale_aspect(b: &BoundingBox, width: f64, height: f64) -> Option<(f64, f64)> {
    if b.width() <= 0.0 {
        return None;
    }
    let scale = (b.width() / width).max(b.height() / height);
    Some((scale, b.height() / b.width()))
}

#[derive(Default)]
struct ImageTally {
    slots: usize,
    non_null: usize,
    grounded: usize,
    per_noun: BTreeMap<String, usize>,
    per_role: BTreeMap<String, (usize, usize)>,
    samples: Vec<ScaleAspectSample>,
}

fn tally_image(img: &AnnotatedImage) -> ImageTally {
    let mut t = ImageTally::default();
    let (w, h) = (f64::from(img.width), f64::from(img.height));
    for (i, role) in img.roles().enumerate() {
        let gt = img.gt_groundings[i];
        let mut sampled = BTreeSet::new();
        for noun in img.annotator_nouns(i) {
            t.slots += 1;
            let Some(noun) = noun else { continue };
            t.non_null += 1;
            let role_entry = t.per_role.entry(role.to_owned()).or_default();
            role_entry.0 += 1;
            let Some(b) = gt else { continue };
            t.grounded += 1;
            role_entry.1 += 1;
            *t.per_noun.entry(noun.to_owned()).or_default() += 1;
            if sampled.insert(noun) {
                if let Some((scale, aspect)) = scale_aspect(&b, w, h) {
                    t.samples.push(ScaleAspectSample {
                        image_id: img.image_id.clone(),
                        noun: noun.to_owned(),
                        verb: img.verb.clone(),
                        role: role.to_owned(),
                        scale,
                        aspect,
                    });
                }
            }
        }
    }
    t
}

/// Corpus statistics over every (image, annotator, role) slot.
///
/// A slot is grounded when its noun is non-null and the role's merged box
/// exists. One scale/aspect sample is emitted per distinct noun on each
/// grounded role.
pub fn compute_stats(dataset: &Dataset) -> StatsReport {
    let tallies: Vec<ImageTally> = dataset.images.par_iter().map(tally_image).collect();
    let mut slots = 0;
    let mut non_null = 0;
    let mut grounded = 0;
    let mut per_noun: BTreeMap<String, usize> = BTreeMap::new();
    let mut per_role: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut samples = Vec::new();
    for t in tallies {
        slots += t.slots;
        non_null += t.non_null;
        grounded += t.grounded;
        for (k, v) in t.per_noun {
            *per_noun.entry(k).or_default() += v;
        }
        for (k, (n, g)) in t.per_role {
            let e = per_role.entry(k).or_default();
            e.0 += n;
            e.1 += g;
        }
        samples.extend(t.samples);
    }
    let role_lengths: usize = dataset.images.iter().map(AnnotatedImage::role_count).sum();
    let verbs: BTreeSet<&str> = dataset.images.iter().map(|i| i.verb.as_str()).collect();
    StatsReport {
        images: dataset.images.len(),
        verbs: verbs.len(),
        mean_frame_length: ratio(role_lengths, dataset.images.len()),
        total_noun_slots: slots,
        non_null_slots: non_null,
        grounded_slots: grounded,
        grounded_fraction: ratio(grounded, non_null),
        groundings_per_noun: per_noun,
        role_grounding_rate: per_role
            .into_iter()
            .map(|(k, (n, g))| (k, ratio(g, n)))
            .collect(),
        scale_aspect_samples: samples,
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}
