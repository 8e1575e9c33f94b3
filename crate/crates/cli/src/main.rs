use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use swig_core::chaining::{chain, load_situations, DEFAULT_SPATIAL_IOU};
use swig_core::dataset::{
    compute_stats, json_records, load_dataset_with, load_predictions, parse_annotations,
    parse_predictions, prediction_to_json, LoadOptions, Split,
};
use swig_core::embedding::EmbeddingIndex;
use swig_core::fusion::{assign_groundings, load_detections, DEFAULT_FUSION_THRESHOLD};
use swig_core::geometry::{cluster_aspect_ratios, kmeans_objective, DEFAULT_NMS_IOU};
use swig_core::loss::gradient_suite;
use swig_core::metrics::{evaluate, format_table, EvalOptions, ValueAllMode, VerbSetting};
use swig_core::retrieval::{
    extract_detections, retrieve_topk, split_query_search, FeatureStore, SimilarityMode, SituationPrediction,
    DEFAULT_QUERY_PER_VERB, DEFAULT_SEARCH_PER_VERB, DEFAULT_TOP_K, DETECTION_MIN_LOGIT,
};
use swig_core::swig_release::{convert_annotations, convert_space};
use swig_core::{BoundingBox, NounVocabulary, VerbLexicon, SCHEMA_VERSION};

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (schema 1)");

#[derive(Parser)]
#[command(name = "swig", version = VERSION, about = "Grounded situation recognition toolkit")]
struct Cli {
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Suppress diagnostics on standard error.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Vocab {
    /// Verb lexicon: {"verb": [role, ...]}.
    #[arg(long)]
    lexicon: PathBuf,

    /// Noun vocabulary; without it nouns are not checked.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args)]
struct Output {
    /// Output path, `-` for standard output.
    #[arg(long, default_value = "-")]
    out: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Auto,
    Dataset,
    Predictions,
}

#[derive(Clone, Copy, ValueEnum)]
enum SettingArg {
    Top1,
    Top5,
    Gt,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    L2,
    Obj,
    Sit,
    Grsit,
}

#[derive(Clone, Copy, ValueEnum)]
enum ValueAllArg {
    AnyPerRole,
    SingleAnnotator,
}

#[derive(Subcommand)]
enum Command {
    /// Check annotation or prediction files against the frame rules.
    Validate {
        files: Vec<PathBuf>,
        #[command(flatten)]
        vocab: Vocab,
        #[arg(long, value_enum, default_value = "auto")]
        kind: Kind,
        #[command(flatten)]
        output: Output,
    },
    /// Dataset statistics.
    Stats {
        dataset: PathBuf,
        #[command(flatten)]
        vocab: Vocab,
        #[arg(long)]
        split: Option<Split>,
        /// Accept any non-zero number of worker boxes per role.
        #[arg(long)]
        relax_worker_count: bool,
        #[command(flatten)]
        output: Output,
    },
    /// Score predictions with the five metrics.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        preds: PathBuf,
        #[command(flatten)]
        vocab: Vocab,
        #[arg(long, value_enum, default_value = "all")]
        setting: SettingArg,
        #[arg(long, value_enum, default_value = "any-per-role")]
        value_all_mode: ValueAllArg,
        #[command(flatten)]
        output: Output,
    },
    /// Ground predicted frames with detector boxes.
    Fuse {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long, default_value_t = DEFAULT_FUSION_THRESHOLD, allow_hyphen_values = true)]
        fusion_threshold: f64,
        #[command(flatten)]
        output: Output,
    },
    /// Rank search images for each query image.
    Retrieve {
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Query ids, one per line.
        #[arg(long)]
        query: PathBuf,
        /// Search ids, one per line.
        #[arg(long)]
        search: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TOP_K)]
        k: usize,
        /// Binary embedding file (l2).
        #[arg(long, requires = "manifest")]
        embeddings: Option<PathBuf>,
        /// Id manifest for the embedding file.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Detector output (obj).
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long, default_value_t = DETECTION_MIN_LOGIT, allow_hyphen_values = true)]
        min_logit: f64,
        #[arg(long, default_value_t = DEFAULT_NMS_IOU)]
        nms_iou: f64,
        /// Predictions with top-5 frames (sit, grsit).
        #[arg(long, requires = "lexicon")]
        preds: Option<PathBuf>,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
    /// Link situations of one image by shared groundings and nouns.
    Chain {
        #[arg(long)]
        situations: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SPATIAL_IOU)]
        iou: f64,
        /// Spatial links also need equal nouns.
        #[arg(long)]
        require_noun_match: bool,
        #[command(flatten)]
        output: Output,
    },
    /// Cluster box aspect ratios into anchor ratios.
    Anchors {
        /// JSON array of [x1, y1, x2, y2] boxes.
        #[arg(long, required_unless_present = "dataset", conflicts_with = "dataset")]
        boxes: Option<PathBuf>,
        /// Use the ground-truth boxes of a dataset instead.
        #[arg(long, requires = "lexicon")]
        dataset: Option<PathBuf>,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        output: Output,
    },
    /// Finite-difference check of the loss gradients.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[command(flatten)]
        output: Output,
    },
    /// Convert the public release layout to the canonical schema.
    Convert {
        /// Release space file with verbs and nouns.
        #[arg(long)]
        space: PathBuf,
        /// Release annotation file.
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        lexicon_out: PathBuf,
        #[arg(long)]
        vocab_out: PathBuf,
        #[command(flatten)]
        output: Output,
    },
    /// Draw disjoint retrieval query and search sets.
    Split {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        vocab: Vocab,
        #[arg(long, default_value_t = DEFAULT_QUERY_PER_VERB)]
        query_per_verb: usize,
        #[arg(long, default_value_t = DEFAULT_SEARCH_PER_VERB)]
        search_per_verb: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write query ids, one per line.
        #[arg(long)]
        query_ids: Option<PathBuf>,
        /// Also write search ids, one per line.
        #[arg(long)]
        search_ids: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
}

/// Exit status for a completed run.
enum Status {
    Ok,
    Failed,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let quiet = cli.quiet;
    match run(cli.command, quiet) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Writes `bytes` to standard output or atomically to a file.
fn write_to(out: &str, bytes: &[u8]) -> Result<()> {
    if out == "-" {
        let mut stdout = std::io::stdout().lock();
        stdout.write_all(bytes)?;
        stdout.flush()?;
        return Ok(());
    }
    let path = Path::new(out);
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating temp file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.persist(path).with_context(|| format!("writing {out}"))?;
    Ok(())
}

fn write_json(out: &str, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_to(out, text.as_bytes())
}

/// Human-readable text goes to stdout unless stdout carries the JSON.
fn print_human(out: &str, text: &str) {
    if out == "-" {
        eprint!("{text}");
    } else {
        print!("{text}");
    }
}

fn read_lexicon(path: &Path) -> Result<VerbLexicon> {
    VerbLexicon::from_json(&read(path)?).with_context(|| format!("lexicon {}", path.display()))
}

fn read_vocab(vocab: &Vocab) -> Result<(VerbLexicon, Option<NounVocabulary>)> {
    let lexicon = read_lexicon(&vocab.lexicon)?;
    let nouns = match &vocab.vocab {
        Some(p) => Some(NounVocabulary::from_json(&read(p)?).with_context(|| format!("vocabulary {}", p.display()))?),
        None => None,
    };
    Ok((lexicon, nouns))
}

fn read_ids(path: &Path) -> Result<Vec<String>> {
    Ok(read(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

fn run(command: Command, quiet: bool) -> Result<Status> {
    let warn = |msg: &str| {
        if !quiet {
            eprintln!("{msg}");
        }
    };
    match command {
        Command::Validate {
            files,
            vocab,
            kind,
            output,
        } => {
            if files.is_empty() {
                bail!("no files to validate");
            }
            let (lexicon, nouns) = read_vocab(&vocab)?;
            let mut reports = Vec::new();
            let mut failed = false;
            for path in &files {
                let text = read(path)?;
                let (kind_name, problems, records) = validate_file(&text, kind, &lexicon, nouns.as_ref())?;
                for p in &problems {
                    warn(&format!(
                        "{}:{}: image `{}`: {}: {}",
                        path.display(),
                        p["line"],
                        p["image_id"].as_str().unwrap_or("?"),
                        p["rule"].as_str().unwrap_or("?"),
                        p["detail"].as_str().unwrap_or("")
                    ));
                }
                failed |= !problems.is_empty();
                reports.push(json!({
                    "file": path.display().to_string(),
                    "kind": kind_name,
                    "records": records,
                    "valid": problems.is_empty(),
                    "problems": problems,
                }));
            }
            write_json(&output.out, &json!({ "schema_version": SCHEMA_VERSION, "files": reports }))?;
            Ok(if failed { Status::Failed } else { Status::Ok })
        }

        Command::Stats {
            dataset,
            vocab,
            split,
            relax_worker_count,
            output,
        } => {
            let (lexicon, nouns) = read_vocab(&vocab)?;
            let opts = LoadOptions {
                split,
                relax_worker_count,
            };
            let ds = load_dataset_with(&read(&dataset)?, lexicon, nouns, &opts)
                .with_context(|| format!("dataset {}", dataset.display()))?;
            for w in &ds.warnings {
                warn(&format!("warning: {w}"));
            }
            let report = compute_stats(&ds);
            let mut v = serde_json::to_value(&report)?;
            v["schema_version"] = json!(SCHEMA_VERSION);
            write_json(&output.out, &v)?;
            Ok(Status::Ok)
        }

        Command::Eval {
            dataset,
            preds,
            vocab,
            setting,
            value_all_mode,
            output,
        } => {
            let (lexicon, nouns) = read_vocab(&vocab)?;
            let ds = load_dataset_with(&read(&dataset)?, lexicon, nouns, &LoadOptions::default())
                .with_context(|| format!("dataset {}", dataset.display()))?;
            let predictions = load_predictions(&read(&preds)?, &ds.lexicon)
                .with_context(|| format!("predictions {}", preds.display()))?;
            let settings: Vec<VerbSetting> = match setting {
                SettingArg::Top1 => vec![VerbSetting::Top1],
                SettingArg::Top5 => vec![VerbSetting::Top5],
                SettingArg::Gt => vec![VerbSetting::GroundTruthVerb],
                SettingArg::All => VerbSetting::ALL.to_vec(),
            };
            let options = EvalOptions {
                value_all_mode: match value_all_mode {
                    ValueAllArg::AnyPerRole => ValueAllMode::AnyPerRole,
                    ValueAllArg::SingleAnnotator => ValueAllMode::SingleAnnotator,
                },
            };
            let reports = settings
                .into_iter()
                .map(|s| evaluate(&ds, &predictions, s, &options))
                .collect::<swig_core::Result<Vec<_>>>()?;
            write_json(
                &output.out,
                &json!({ "schema_version": SCHEMA_VERSION, "reports": reports }),
            )?;
            print_human(&output.out, &format_table(&reports));
            Ok(Status::Ok)
        }

        Command::Fuse {
            frames,
            detections,
            lexicon,
            fusion_threshold,
            output,
        } => {
            let lexicon = read_lexicon(&lexicon)?;
            let records = parse_predictions(&read(&frames)?, &lexicon)
                .with_context(|| format!("predictions {}", frames.display()))?;
            let dets = load_detections(&read(&detections)?)
                .with_context(|| format!("detections {}", detections.display()))?;
            let mut out = Vec::with_capacity(records.len());
            for (_, mut rec) in records {
                let set = dets
                    .get(&rec.image_id)
                    .with_context(|| format!("no detections for image `{}`", rec.image_id))?;
                for frame in rec.frames.values_mut() {
                    *frame = assign_groundings(frame, set, fusion_threshold)
                        .with_context(|| format!("image `{}`", rec.image_id))?;
                }
                out.push(prediction_to_json(&rec));
            }
            write_json(&output.out, &Value::Array(out))?;
            Ok(Status::Ok)
        }

        Command::Retrieve {
            mode,
            query,
            search,
            k,
            embeddings,
            manifest,
            detections,
            min_logit,
            nms_iou,
            preds,
            lexicon,
            output,
        } => {
            let mode = match mode {
                ModeArg::L2 => SimilarityMode::L2,
                ModeArg::Obj => SimilarityMode::Obj,
                ModeArg::Sit => SimilarityMode::Sit,
                ModeArg::Grsit => SimilarityMode::GrSit,
            };
            let queries = read_ids(&query)?;
            let search = read_ids(&search)?;
            let mut store = FeatureStore::default();
            match mode {
                SimilarityMode::L2 => {
                    let (Some(e), Some(m)) = (embeddings, manifest) else {
                        bail!("--mode l2 needs --embeddings and --manifest");
                    };
                    let bytes = fs::read(&e).with_context(|| format!("reading {}", e.display()))?;
                    store.embeddings = EmbeddingIndex::read(&bytes, &read(&m)?)
                        .with_context(|| format!("embeddings {}", e.display()))?;
                }
                SimilarityMode::Obj => {
                    let Some(d) = detections else {
                        bail!("--mode obj needs --detections");
                    };
                    for (id, set) in load_detections(&read(&d)?)? {
                        let list = extract_detections(&set, min_logit, nms_iou)?;
                        store.detections.insert(id, list);
                    }
                }
                SimilarityMode::Sit | SimilarityMode::GrSit => {
                    let (Some(p), Some(l)) = (preds, lexicon) else {
                        bail!("--mode {mode} needs --preds and --lexicon");
                    };
                    let lexicon = read_lexicon(&l)?;
                    for rec in load_predictions(&read(&p)?, &lexicon)? {
                        let sit = SituationPrediction::from_record(&rec, &lexicon)?;
                        store.situations.insert(rec.image_id, sit);
                    }
                }
            }
            let results = queries
                .iter()
                .map(|q| {
                    let hits = retrieve_topk(q, &search, &store, mode, k)?;
                    Ok(json!({
                        "query": q,
                        "hits": hits.into_iter().map(|(id, s)| json!({"id": id, "score": s})).collect::<Vec<_>>(),
                    }))
                })
                .collect::<swig_core::Result<Vec<_>>>()?;
            write_json(
                &output.out,
                &json!({ "schema_version": SCHEMA_VERSION, "mode": mode, "k": k, "results": results }),
            )?;
            Ok(Status::Ok)
        }

        Command::Chain {
            situations,
            lexicon,
            iou,
            require_noun_match,
            output,
        } => {
            let lexicon = read_lexicon(&lexicon)?;
            let nodes = load_situations(&read(&situations)?, &lexicon)
                .with_context(|| format!("situations {}", situations.display()))?;
            let graph = chain(nodes, iou, require_noun_match);
            let mut v = graph.to_json();
            v["schema_version"] = json!(SCHEMA_VERSION);
            v["spatial_iou"] = json!(iou);
            write_json(&output.out, &v)?;
            Ok(Status::Ok)
        }

        Command::Anchors {
            boxes,
            dataset,
            lexicon,
            k,
            seed,
            output,
        } => {
            let list: Vec<BoundingBox> = match (boxes, dataset, lexicon) {
                (Some(b), _, _) => serde_json::from_str(&read(&b)?).with_context(|| format!("boxes {}", b.display()))?,
                (None, Some(d), Some(l)) => {
                    let ds = load_dataset_with(&read(&d)?, read_lexicon(&l)?, None, &LoadOptions::default())?;
                    ds.images.iter().flat_map(|i| i.gt_groundings.iter().flatten().copied()).collect()
                }
                _ => bail!("need --boxes or --dataset with --lexicon"),
            };
            let ratios = cluster_aspect_ratios(&list, k, seed)?;
            let points: Vec<f64> = list.iter().map(|b| (b.height() / b.width()).ln()).collect();
            let centroids: Vec<f64> = ratios.iter().map(|r| r.ln()).collect();
            write_json(
                &output.out,
                &json!({
                    "k": k,
                    "seed": seed,
                    "boxes": list.len(),
                    "aspect_ratios": ratios,
                    "log_aspect_objective": kmeans_objective(&points, &centroids),
                }),
            )?;
            Ok(Status::Ok)
        }

        Command::Gradcheck {
            instances,
            seed,
            tolerance,
            output,
        } => {
            let results = gradient_suite(instances, seed)?;
            let mut table = String::new();
            let mut ok = true;
            for r in &results {
                let pass = r.max_rel_error <= tolerance;
                ok &= pass;
                let _ = writeln!(
                    table,
                    "{:<12} {:>6} instances  max rel error {:.3e}  {}",
                    r.kernel,
                    r.instances,
                    r.max_rel_error,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            write_json(
                &output.out,
                &json!({ "seed": seed, "tolerance": tolerance, "kernels": results }),
            )?;
            print_human(&output.out, &table);
            Ok(if ok { Status::Ok } else { Status::Failed })
        }

        Command::Convert {
            space,
            annotations,
            lexicon_out,
            vocab_out,
            output,
        } => {
            let (lexicon, nouns) = convert_space(&read(&space)?).with_context(|| format!("space {}", space.display()))?;
            let records = convert_annotations(&read(&annotations)?)
                .with_context(|| format!("annotations {}", annotations.display()))?;
            write_json(&lexicon_out.display().to_string(), &lexicon.to_json_value())?;
            let vocab: serde_json::Map<String, Value> = nouns
                .ids()
                .map(|id| (id.to_owned(), nouns.gloss(id).map_or(Value::Null, |g| json!(g))))
                .collect();
            write_json(&vocab_out.display().to_string(), &Value::Object(vocab))?;
            write_json(&output.out, &Value::Array(records))?;
            Ok(Status::Ok)
        }

        Command::Split {
            dataset,
            vocab,
            query_per_verb,
            search_per_verb,
            seed,
            query_ids,
            search_ids,
            output,
        } => {
            let (lexicon, nouns) = read_vocab(&vocab)?;
            let ds = load_dataset_with(&read(&dataset)?, lexicon, nouns, &LoadOptions::default())?;
            let (query, search) = split_query_search(&ds.ids_by_verb(), query_per_verb, search_per_verb, seed)?;
            let lines = |ids: &[String]| ids.iter().map(|i| format!("{i}\n")).collect::<String>();
            if let Some(p) = query_ids {
                write_to(&p.display().to_string(), lines(&query).as_bytes())?;
            }
            if let Some(p) = search_ids {
                write_to(&p.display().to_string(), lines(&search).as_bytes())?;
            }
            write_json(
                &output.out,
                &json!({ "seed": seed, "query": query, "search": search }),
            )?;
            Ok(Status::Ok)
        }
    }
}

/// Returns the detected kind, every problem found, and the record count.
fn validate_file(
    text: &str,
    kind: Kind,
    lexicon: &VerbLexicon,
    nouns: Option<&NounVocabulary>,
) -> Result<(&'static str, Vec<Value>, usize)> {
    let kind = match kind {
        Kind::Auto => {
            let first = json_records(text)?.into_iter().next();
            let is_pred = first
                .and_then(|(_, raw)| serde_json::from_str::<Value>(raw.get()).ok())
                .is_some_and(|v| v.get("verbs").is_some());
            if is_pred {
                Kind::Predictions
            } else {
                Kind::Dataset
            }
        }
        k => k,
    };
    let problem = |line: usize, id: &str, rule: &str, role: Option<usize>, detail: String| {
        json!({ "line": line, "image_id": id, "rule": rule, "role_index": role, "detail": detail })
    };
    let mut problems = Vec::new();
    let mut seen = HashSet::new();
    match kind {
        Kind::Predictions => {
            let records = match parse_predictions(text, lexicon) {
                Ok(r) => r,
                Err(e) => return Ok(("predictions", vec![structural(e)], 0)),
            };
            for (line, rec) in &records {
                if !seen.insert(rec.image_id.clone()) {
                    problems.push(problem(*line, &rec.image_id, "duplicate-image", None, "repeated id".into()));
                }
                for v in rec.validate(lexicon).violations {
                    problems.push(problem(*line, &rec.image_id, v.rule.as_str(), v.role_index, v.detail));
                }
            }
            Ok(("predictions", problems, records.len()))
        }
        _ => {
            let parsed = match parse_annotations(text, lexicon, nouns, &LoadOptions::default()) {
                Ok(p) => p,
                Err(e) => return Ok(("dataset", vec![structural(e)], 0)),
            };
            for (line, img) in &parsed.images {
                if !seen.insert(img.image_id.clone()) {
                    problems.push(problem(*line, &img.image_id, "duplicate-image", None, "repeated id".into()));
                }
                for v in img.validate(lexicon).violations {
                    problems.push(problem(*line, &img.image_id, v.rule.as_str(), v.role_index, v.detail));
                }
            }
            Ok(("dataset", problems, parsed.images.len()))
        }
    }
}

fn structural(e: swig_core::Error) -> Value {
    match e {
        swig_core::Error::Record {
            line,
            image_id,
            field,
            message,
        } => json!({
            "line": line,
            "image_id": image_id,
            "rule": "malformed-record",
            "role_index": null,
            "detail": format!("{field}: {message}"),
        }),
        other => json!({
            "line": 0,
            "image_id": "?",
            "rule": "malformed-file",
            "role_index": null,
            "detail": other.to_string(),
        }),
    }
}
