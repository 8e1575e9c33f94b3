//! Links several grounded situations of one image through overlapping
//! groundings and shared nouns.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::BTreeMap;

use crate::dataset::{build_frame, frame_to_json, json_records, record_id, RecordCtx};
use crate::frame::{validate_frame, BoundingBox, GroundedFrame, VerbLexicon};
use crate::geometry::iou;
use crate::{Error, Result};

pub const DEFAULT_SPATIAL_IOU: f64 = 0.4;

/// One situation, optionally conditioned on a query box.
#[derive(Debug, Clone, PartialEq)]
pub struct SituationNode {
    pub query_box: Option<BoundingBox>,
    pub frame: GroundedFrame,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkType {
    Spatial,
    Semantic,
}

/// Undirected edge between role `role_a` of node `node_i` and role
/// `role_b` of node `node_j`, with `node_i < node_j`. Roles are slot
/// indices.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainEdge {
    pub node_i: usize,
    pub role_a: usize,
    pub node_j: usize,
    pub role_b: usize,
    pub link: LinkType,
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainGraph {
    pub nodes: Vec<SituationNode>,
    pub edges: Vec<ChainEdge>,
}

fn pair_edges(
    i: usize,
    a: &GroundedFrame,
    j: usize,
    b: &GroundedFrame,
    spatial_iou: f64,
    require_noun_match: bool,
) -> Vec<ChainEdge> {
    let mut out = Vec::new();
    for (ra, sa) in a.slots.iter().enumerate() {
        for (rb, sb) in b.slots.iter().enumerate() {
            let same_noun = sa.noun.is_some() && sa.noun == sb.noun;
            if let (Some(ba), Some(bb)) = (&sa.grounding, &sb.grounding) {
                let overlap = iou(ba, bb);
                if !sa.is_place() && !sb.is_place() && overlap >= spatial_iou && (same_noun || !require_noun_match) {
                    out.push(ChainEdge {
                        node_i: i,
                        role_a: ra,
                        node_j: j,
                        role_b: rb,
                        link: LinkType::Spatial,
                        strength: 1.0 + overlap,
                    });
                }
            }
            if same_noun {
                out.push(ChainEdge {
                    node_i: i,
                    role_a: ra,
                    node_j: j,
                    role_b: rb,
                    link: LinkType::Semantic,
                    strength: 1.0,
                });
            }
        }
    }
    out
}

/// Connects every pair of roles in distinct nodes that overlap spatially
/// (both grounded, IoU at least `spatial_iou`, neither a Place role) or
/// share a non-null noun. With `require_noun_match`, spatial edges also
/// need equal nouns. Edges are ordered by node pair, then role pair, spatial
/// before semantic.
pub fn chain(nodes: Vec<SituationNode>, spatial_iou: f64, require_noun_match: bool) -> ChainGraph {
    let n = nodes.len();
    let edges = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let nodes = &nodes;
            (i + 1..n).flat_map(move |j| {
                pair_edges(i, &nodes[i].frame, j, &nodes[j].frame, spatial_iou, require_noun_match)
            })
        })
        .collect();
    ChainGraph { nodes, edges }
}

impl ChainGraph {
    /// Edges touching `node`, each seen from that node's side as
    /// `(own role, other node, other role, edge)`.
    pub fn neighbors(&self, node: usize) -> Vec<(usize, usize, usize, &ChainEdge)> {
        self.edges
            .iter()
            .filter_map(|e| {
                if e.node_i == node {
                    Some((e.role_a, e.node_j, e.role_b, e))
                } else if e.node_j == node {
                    Some((e.role_b, e.node_i, e.role_a, e))
                } else {
                    None
                }
            })
            .collect()
    }

    /// Adjacency-list JSON: every node with its frame and the links leaving
    /// each of its roles. Each edge is listed under both endpoints.
    pub fn to_json(&self) -> Value {
        let nodes: Vec<Value> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(k, node)| {
                let links: Vec<Value> = self
                    .neighbors(k)
                    .into_iter()
                    .map(|(own, other, other_role, e)| {
                        json!({
                            "role": node.frame.slots[own].role,
                            "node": other,
                            "other_role": self.nodes[other].frame.slots[other_role].role,
                            "link": e.link,
                            "strength": e.strength,
                        })
                    })
                    .collect();
                let mut frame = frame_to_json(&node.frame);
                frame["verb"] = json!(node.frame.verb);
                json!({
                    "index": k,
                    "query_box": node.query_box.map(|b| b.coords()),
                    "frame": frame,
                    "links": links,
                })
            })
            .collect();
        json!({ "nodes": nodes, "edge_count": self.edges.len() })
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    #[serde(default)]
    query_box: Option<[f64; 4]>,
    verb: String,
    nouns: BTreeMap<String, String>,
    #[serde(default)]
    boxes: BTreeMap<String, Option<[f64; 4]>>,
}

/// Reads situation nodes from a JSON array or JSON Lines of
/// `{"query_box", "verb", "nouns", "boxes"}` objects and validates each frame.
pub fn load_situations(text: &str, lexicon: &VerbLexicon) -> Result<Vec<SituationNode>> {
    json_records(text)?
        .into_iter()
        .enumerate()
        .map(|(k, (line, raw))| {
            let label = format!("node {k}");
            let id = match record_id(raw).as_str() {
                "?" => label,
                id => id.to_owned(),
            };
            let ctx = RecordCtx { line, image_id: &id };
            let node: RawNode = serde_json::from_str(raw.get()).map_err(|e| ctx.err("record", e.to_string()))?;
            let entry = lexicon
                .get(&node.verb)
                .ok_or_else(|| ctx.err("verb", format!("unknown verb `{}`", node.verb)))?;
            let frame = build_frame(&ctx, "", entry, &node.nouns, &node.boxes)?;
            let report = validate_frame(&frame, lexicon);
            if !report.is_valid() {
                return Err(Error::InvalidFrame { image_id: id, report });
            }
            let query_box = node
                .query_box
                .map(BoundingBox::try_from)
                .transpose()
                .map_err(|e| ctx.err("query_box", e.to_string()))?;
            Ok(SituationNode { query_box, frame })
        })
        .collect()
}
