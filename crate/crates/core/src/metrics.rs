//! The five-metric evaluation suite: verb, value, value-all, grounded-value
//! and grounded-value-all, each computed per verb and macro-averaged.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::Dataset;
use crate::frame::{AnnotatedImage, BoundingBox, GroundedFrame, PredictionRecord};
use crate::geometry::{iou, MATCH_IOU};
use crate::{Error, Result};

/// How many ranked verbs count in the top-5 setting.
pub const TOP_K_VERBS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerbSetting {
    Top1,
    Top5,
    GroundTruthVerb,
}

impl VerbSetting {
    pub const ALL: [VerbSetting; 3] = [VerbSetting::Top1, VerbSetting::Top5, VerbSetting::GroundTruthVerb];
}

impl FromStr for VerbSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top1" => Ok(VerbSetting::Top1),
            "top5" => Ok(VerbSetting::Top5),
            "gt" => Ok(VerbSetting::GroundTruthVerb),
            other => Err(Error::InvalidParameter(format!("unknown verb setting `{other}`"))),
        }
    }
}

impl fmt::Display for VerbSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VerbSetting::Top1 => "top-1 predicted verb",
            VerbSetting::Top5 => "top-5 predicted verbs",
            VerbSetting::GroundTruthVerb => "ground truth verbs",
        })
    }
}

/// What an image needs for value-all credit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValueAllMode {
    /// Every role passes the any-annotator noun rule on its own.
    #[default]
    AnyPerRole,
    /// Some single annotator agrees with the prediction on every role.
    SingleAnnotator,
}

impl FromStr for ValueAllMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "any-per-role" => Ok(ValueAllMode::AnyPerRole),
            "single-annotator" => Ok(ValueAllMode::SingleAnnotator),
            other => Err(Error::InvalidParameter(format!("unknown value-all mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalOptions {
    pub value_all_mode: ValueAllMode,
}

/// Metric values as fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct MetricRow {
    pub verb: f64,
    pub value: f64,
    pub value_all: f64,
    pub grounded_value: f64,
    pub grounded_value_all: f64,
}

impl MetricRow {
    pub fn values(&self) -> [f64; 5] {
        [self.verb, self.value, self.value_all, self.grounded_value, self.grounded_value_all]
    }
}

/// Integer numerators and denominators behind one verb's row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct VerbCounts {
    pub images: usize,
    pub role_slots: usize,
    pub verb_correct: usize,
    pub value: usize,
    pub grounded_value: usize,
    pub value_all: usize,
    pub grounded_value_all: usize,
}

impl VerbCounts {
    fn add(&mut self, o: &VerbCounts) {
        self.images += o.images;
        self.role_slots += o.role_slots;
        self.verb_correct += o.verb_correct;
        self.value += o.value;
        self.grounded_value += o.grounded_value;
        self.value_all += o.value_all;
        self.grounded_value_all += o.grounded_value_all;
    }

    pub fn row(&self) -> MetricRow {
        let frac = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        MetricRow {
            verb: frac(self.verb_correct, self.images),
            value: frac(self.value, self.role_slots),
            value_all: frac(self.value_all, self.images),
            grounded_value: frac(self.grounded_value, self.role_slots),
            grounded_value_all: frac(self.grounded_value_all, self.images),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub setting: VerbSetting,
    pub value_all_mode: ValueAllMode,
    pub per_verb: BTreeMap<String, MetricRow>,
    pub counts: BTreeMap<String, VerbCounts>,
    #[serde(rename = "macro")]
    pub macro_avg: MetricRow,
}

/// A predicted noun is correct when any annotator chose it; null matches null.
pub fn score_noun(predicted: Option<&str>, annotators: &[Option<&str>]) -> bool {
    annotators.iter().any(|a| *a == predicted)
}

/// Both absent, or both present with IoU of at least 0.5.
pub fn score_grounding(pred: Option<&BoundingBox>, gt: Option<&BoundingBox>) -> bool {
    match (pred, gt) {
        (None, None) => true,
        (Some(p), Some(g)) => iou(p, g) >= MATCH_IOU,
        _ => false,
    }
}

/// Unweighted mean of each metric over verbs.
pub fn macro_average<'a>(rows: impl IntoIterator<Item = &'a MetricRow>) -> Result<MetricRow> {
    let mut sum = [0.0; 5];
    let mut n = 0usize;
    for r in rows {
        for (s, v) in sum.iter_mut().zip(r.values()) {
            *s += v;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("no verbs to average"));
    }
    let m = sum.map(|s| s / n as f64);
    Ok(MetricRow {
        verb: m[0],
        value: m[1],
        value_all: m[2],
        grounded_value: m[3],
        grounded_value_all: m[4],
    })
}

/// The frame to score and whether the verb counts as correct.
fn scored_frame<'p>(
    image: &AnnotatedImage,
    pred: &'p PredictionRecord,
    setting: VerbSetting,
) -> (bool, Option<&'p GroundedFrame>) {
    let verb_correct = match setting {
        VerbSetting::Top1 => pred.verb_ranking.first() == Some(&image.verb),
        VerbSetting::Top5 => pred.verb_ranking.iter().take(TOP_K_VERBS).any(|v| *v == image.verb),
        VerbSetting::GroundTruthVerb => true,
    };
    let frame = if verb_correct { pred.frame(&image.verb) } else { None };
    (verb_correct, frame)
}

/// Scores one image in isolation.
pub fn score_image(
    image: &AnnotatedImage,
    pred: &PredictionRecord,
    setting: VerbSetting,
    options: &EvalOptions,
) -> VerbCounts {
    let roles = image.role_count();
    let mut c = VerbCounts {
        images: 1,
        role_slots: roles,
        ..VerbCounts::default()
    };
    let (verb_correct, frame) = scored_frame(image, pred, setting);
    c.verb_correct = usize::from(verb_correct);
    let Some(frame) = frame.filter(|f| f.slots.len() == roles) else {
        return c;
    };

    let mut all_nouns = true;
    let mut all_grounded = true;
    let mut grounding_ok = Vec::with_capacity(roles);
    for (i, slot) in frame.slots.iter().enumerate() {
        let annotators: Vec<Option<&str>> = image.annotator_nouns(i).collect();
        let noun_ok = score_noun(slot.noun.as_deref(), &annotators);
        let box_ok = score_grounding(slot.grounding.as_ref(), image.gt_groundings[i].as_ref());
        grounding_ok.push(box_ok);
        c.value += usize::from(noun_ok);
        c.grounded_value += usize::from(noun_ok && box_ok);
        all_nouns &= noun_ok;
        all_grounded &= noun_ok && box_ok;
    }
    let (value_all, grounded_all) = match options.value_all_mode {
        ValueAllMode::AnyPerRole => (all_nouns, all_grounded),
        ValueAllMode::SingleAnnotator => {
            let agrees = |k: usize| {
                frame
                    .slots
                    .iter()
                    .zip(&image.annotator_frames[k].slots)
                    .all(|(p, a)| p.noun == a.noun)
            };
            let any = (0..image.annotator_frames.len()).any(agrees);
            (any, any && grounding_ok.iter().all(|&b| b))
        }
    };
    c.value_all = usize::from(value_all);
    c.grounded_value_all = usize::from(grounded_all);
    c
}

/// Evaluates predictions against a dataset under one verb setting.
///
/// Every dataset image needs a prediction; extra predictions are ignored.
/// Per-verb values are ratios of integer counts, so the report does not
/// depend on image order or thread count.
pub fn evaluate(
    dataset: &Dataset,
    predictions: &[PredictionRecord],
    setting: VerbSetting,
    options: &EvalOptions,
) -> Result<MetricReport> {
    let by_id: HashMap<&str, &PredictionRecord> =
        predictions.iter().map(|p| (p.image_id.as_str(), p)).collect();
    let mut missing: Vec<String> = dataset
        .images
        .iter()
        .filter(|i| !by_id.contains_key(i.image_id.as_str()))
        .map(|i| i.image_id.clone())
        .collect();
    if !missing.is_empty() {
        missing.sort();
        return Err(Error::MissingPredictions(missing));
    }

    let scores: Vec<(&str, VerbCounts)> = dataset
        .images
        .par_iter()
        .map(|img| {
            let pred = by_id[img.image_id.as_str()];
            (img.verb.as_str(), score_image(img, pred, setting, options))
        })
        .collect();
    let mut counts: BTreeMap<String, VerbCounts> = BTreeMap::new();
    for (verb, c) in scores {
        counts.entry(verb.to_owned()).or_default().add(&c);
    }
    let per_verb: BTreeMap<String, MetricRow> =
        counts.iter().map(|(v, c)| (v.clone(), c.row())).collect();
    let macro_avg = macro_average(per_verb.values())?;
    Ok(MetricReport {
        setting,
        value_all_mode: options.value_all_mode,
        per_verb,
        counts,
        macro_avg,
    })
}

/// Fixed-width table, one row per report, columns in the order verb, value,
/// value-all, grounded-value, grounded-value-all, as percentages.
pub fn format_table(reports: &[MetricReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<24}{:>10}{:>10}{:>12}{:>14}{:>18}",
        "setting", "verb", "value", "value-all", "grnd-value", "grnd-value-all"
    );
    for r in reports {
        let m = r.macro_avg;
        let _ = writeln!(
            out,
            "{:<24}{:>10.2}{:>10.2}{:>12.2}{:>14.2}{:>18.2}",
            r.setting.to_string(),
            100.0 * m.verb,
            100.0 * m.value,
            100.0 * m.value_all,
            100.0 * m.grounded_value,
            100.0 * m.grounded_value_all
        );
    }
    out
}
