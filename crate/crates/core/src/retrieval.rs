//! Image retrieval with four similarity functions: embedding distance,
//! bag-of-detections overlap, situation agreement and grounded situation
//! agreement.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{Embedding, EmbeddingIndex};
use crate::frame::{BoundingBox, GroundedFrame, PredictionRecord, VerbLexicon};
use crate::fusion::DetectionSet;
use crate::geometry::{iou, nms, ScoredBox};
use crate::{Error, Result};

/// Verb hypotheses kept per image.
pub const SITUATION_VERBS: usize = 5;

/// Logit a box's best class must exceed to count as a detection.
pub const DETECTION_MIN_LOGIT: f64 = -1.0;

pub const DEFAULT_QUERY_PER_VERB: usize = 2;
pub const DEFAULT_SEARCH_PER_VERB: usize = 48;
pub const DEFAULT_TOP_K: usize = 5;

/// Negative Euclidean distance, accumulated in `f64`.
pub fn l2_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let sq: f64 = a
        .0
        .iter()
        .zip(&b.0)
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum();
    Ok(0.0 - sq.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub noun: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

pub type DetectionList = Vec<Detection>;

/// For each detection in `i`, the best `1 + IoU` against a same-class
/// detection in `j` (0 if none), averaged over `i`'s detections. An empty
/// `i` scores 0.
pub fn obj_sim(i: &[Detection], j: &[Detection]) -> f64 {
    if i.is_empty() {
        return 0.0;
    }
    let total: f64 = i
        .iter()
        .map(|di| {
            j.iter()
                .filter(|dj| dj.noun == di.noun)
                .map(|dj| 1.0 + iou(&di.bbox, &dj.bbox))
                .fold(0.0, f64::max)
        })
        .sum();
    total / i.len() as f64
}

/// Mean of [`obj_sim`] in both directions.
pub fn obj_sim_symmetric(i: &[Detection], j: &[Detection]) -> f64 {
    (obj_sim(i, j) + obj_sim(j, i)) / 2.0
}

/// Turns detector output into a detection list: each box takes its
/// highest-logit class, boxes whose best logit does not exceed `min_logit`
/// are dropped, and NMS at `nms_iou` runs within each class.
pub fn extract_detections(set: &DetectionSet, min_logit: f64, nms_iou: f64) -> Result<DetectionList> {
    let mut by_class: BTreeMap<usize, Vec<(usize, ScoredBox)>> = BTreeMap::new();
    for p in 0..set.len() {
        let row = set.row(p);
        let Some((c, &s)) = row
            .iter()
            .enumerate()
            .fold(None, |best: Option<(usize, &f64)>, (c, s)| match best {
                Some((_, b)) if *b >= *s => best,
                _ => Some((c, s)),
            })
        else {
            continue;
        };
        if s > min_logit {
            by_class
                .entry(c)
                .or_default()
                .push((p, ScoredBox::new(set.boxes()[p], s)?));
        }
    }
    let mut kept: Vec<(usize, Detection)> = Vec::new();
    for (c, members) in by_class {
        let cands: Vec<ScoredBox> = members.iter().map(|(_, b)| *b).collect();
        for k in nms(&cands, nms_iou, usize::MAX)? {
            kept.push((
                members[k].0,
                Detection {
                    noun: set.columns()[c].clone(),
                    bbox: members[k].1.bbox,
                },
            ));
        }
    }
    kept.sort_by_key(|(p, _)| *p);
    Ok(kept.into_iter().map(|(_, d)| d).collect())
}

/// Top-5 verbs with a predicted grounded frame for each.
#[derive(Debug, Clone, PartialEq)]
pub struct SituationPrediction {
    frames: Vec<GroundedFrame>,
}

impl SituationPrediction {
    pub fn new(frames: Vec<GroundedFrame>) -> Result<Self> {
        if frames.len() != SITUATION_VERBS {
            return Err(Error::InvalidParameter(format!(
                "expected {SITUATION_VERBS} verb hypotheses, got {}",
                frames.len()
            )));
        }
        Ok(Self { frames })
    }

    /// Takes the first five ranked verbs of a prediction record; each must
    /// have a frame whose length matches the lexicon.
    pub fn from_record(record: &PredictionRecord, lexicon: &VerbLexicon) -> Result<Self> {
        let frames = record
            .verb_ranking
            .iter()
            .take(SITUATION_VERBS)
            .map(|v| {
                let entry = lexicon.entry(v)?;
                let frame = record.frame(v).ok_or_else(|| {
                    Error::InvalidParameter(format!("image `{}` has no frame for `{v}`", record.image_id))
                })?;
                if frame.slots.len() != entry.role_count() {
                    return Err(Error::InvalidParameter(format!(
                        "image `{}`: frame for `{v}` has {} entities, verb has {} roles",
                        record.image_id,
                        frame.slots.len(),
                        entry.role_count()
                    )));
                }
                Ok(frame.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(frames)
    }

    pub fn frames(&self) -> &[GroundedFrame] {
        &self.frames
    }

    pub fn verbs(&self) -> impl Iterator<Item = &str> {
        self.frames.iter().map(|f| f.verb.as_str())
    }
}

/// Shared max over rank pairs `(i, j)` with equal verbs of
/// `term_sum / (i * j * N_v)`, ranks counted from 1.
fn situation_max(
    a: &SituationPrediction,
    b: &SituationPrediction,
    term: impl Fn(&crate::frame::RoleSlot, &crate::frame::RoleSlot) -> f64,
) -> f64 {
    let mut best = 0.0f64;
    for (i, fa) in a.frames.iter().enumerate() {
        for (j, fb) in b.frames.iter().enumerate() {
            if fa.verb != fb.verb {
                continue;
            }
            let n_v = fa.slots.len().min(fb.slots.len());
            if n_v == 0 {
                continue;
            }
            let sum: f64 = fa
                .slots
                .iter()
                .zip(&fb.slots)
                .filter(|(x, y)| x.noun == y.noun)
                .map(|(x, y)| term(x, y))
                .sum();
            let v = sum / ((i + 1) * (j + 1) * n_v) as f64;
            best = best.max(v);
        }
    }
    best
}

/// Situation similarity in `[0, 1]`; 1 iff both images share the top-1 verb
/// and agree on every entity for it.
pub fn sit_sim(a: &SituationPrediction, b: &SituationPrediction) -> f64 {
    situation_max(a, b, |_, _| 1.0)
}

/// Like [`sit_sim`], weighting each agreeing entity by `1 + IoU` of its two
/// boxes. Two missing boxes count as IoU 1, one missing box as IoU 0.
pub fn gr_sit_sim(a: &SituationPrediction, b: &SituationPrediction) -> f64 {
    situation_max(a, b, |x, y| {
        1.0 + match (&x.grounding, &y.grounding) {
            (Some(p), Some(q)) => iou(p, q),
            (None, None) => 1.0,
            _ => 0.0,
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityMode {
    L2,
    Obj,
    Sit,
    GrSit,
}

impl FromStr for SimilarityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(SimilarityMode::L2),
            "obj" => Ok(SimilarityMode::Obj),
            "sit" => Ok(SimilarityMode::Sit),
            "grsit" => Ok(SimilarityMode::GrSit),
            other => Err(Error::InvalidParameter(format!("unknown similarity `{other}`"))),
        }
    }
}

impl fmt::Display for SimilarityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimilarityMode::L2 => "l2",
            SimilarityMode::Obj => "obj",
            SimilarityMode::Sit => "sit",
            SimilarityMode::GrSit => "grsit",
        })
    }
}

/// Per-image features for every similarity mode.
#[derive(Debug, Clone, Default)]
pub struct FeatureStore {
    pub embeddings: EmbeddingIndex,
    pub detections: HashMap<String, DetectionList>,
    pub situations: HashMap<String, SituationPrediction>,
}

impl FeatureStore {
    pub fn similarity(&self, mode: SimilarityMode, query: &str, other: &str) -> Result<f64> {
        fn get<'a, T>(m: &'a HashMap<String, T>, id: &str) -> Result<&'a T> {
            m.get(id).ok_or_else(|| Error::MissingFeature(id.to_owned()))
        }
        match mode {
            SimilarityMode::L2 => {
                let e = |id: &str| {
                    self.embeddings
                        .get(id)
                        .ok_or_else(|| Error::MissingFeature(id.to_owned()))
                };
                l2_similarity(e(query)?, e(other)?)
            }
            SimilarityMode::Obj => Ok(obj_sim(get(&self.detections, query)?, get(&self.detections, other)?)),
            SimilarityMode::Sit => Ok(sit_sim(get(&self.situations, query)?, get(&self.situations, other)?)),
            SimilarityMode::GrSit => Ok(gr_sit_sim(get(&self.situations, query)?, get(&self.situations, other)?)),
        }
    }
}

/// Scores `query` against every search id and keeps the best `k`, ordered
/// by descending score then ascending id.
pub fn retrieve_topk(
    query: &str,
    search: &[String],
    store: &FeatureStore,
    mode: SimilarityMode,
    k: usize,
) -> Result<Vec<(String, f64)>> {
    let mut scored: Vec<(String, f64)> = search
        .par_iter()
        .map(|id| Ok((id.clone(), store.similarity(mode, query, id)?)))
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

/// Draws disjoint query and search sets with fixed counts per verb.
///
/// Ids are sorted within each verb and then shuffled by a generator seeded
/// with `seed`, so the split depends only on the id sets and the seed.
pub fn split_query_search(
    ids_by_verb: &BTreeMap<String, Vec<String>>,
    per_verb_query: usize,
    per_verb_search: usize,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    let need = per_verb_query + per_verb_search;
    if let Some((verb, ids)) = ids_by_verb.iter().find(|(_, ids)| ids.len() < need) {
        return Err(Error::UndersizedVerb {
            verb: verb.clone(),
            have: ids.len(),
            need,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut query = Vec::with_capacity(ids_by_verb.len() * per_verb_query);
    let mut search = Vec::with_capacity(ids_by_verb.len() * per_verb_search);
    for ids in ids_by_verb.values() {
        let mut ids = ids.clone();
        ids.sort();
        ids.dedup();
        if ids.len() < need {
            return Err(Error::InvalidParameter("duplicate ids within a verb".into()));
        }
        ids.shuffle(&mut rng);
        query.extend_from_slice(&ids[..per_verb_query]);
        search.extend_from_slice(&ids[per_verb_query..need]);
    }
    Ok((query, search))
}
