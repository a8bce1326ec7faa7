//! Inference and evaluation: track/query embedding with feature averaging,
//! cosine ranking, MRR, score ensembling, and submission files.

mod report;

pub use report::{write_report, ReportSummary};

use crate::image::Image;
use crate::model::{ForwardPass, Model, ModelError, ModelMode, EMBED_DIM};
use crate::text::tokenize;
use crate::train::batch_from_images;
use ndarray::{Array1, Array2, Ix2};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("track {track_id} has no crops to embed")]
    NoCrops { track_id: String },
    #[error("query {query_id} has no ground-truth track")]
    MissingGroundTruth { query_id: String },
    #[error("query {query_id}: ground-truth track {track_id} absent from its ranked list")]
    GroundTruthNotRanked { query_id: String, track_id: String },
    #[error("score matrices disagree in shape or id ordering: {0}")]
    MatrixMismatch(String),
    #[error("ensemble weights must be non-negative with a positive sum")]
    BadEnsembleWeights,
    #[error("embedding archive {path}: {msg}")]
    Archive { path: PathBuf, msg: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// L2-normalized 512-dim track embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryEmbedding {
    pub track_id: String,
    pub vector: Vec<f64>,
}

/// L2-normalized 512-dim query embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEmbedding {
    pub query_id: String,
    pub vector: Vec<f64>,
}

/// Full gallery ordering for one query, best first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub track_ids: Vec<String>,
}

fn l2_normalize(v: &mut Array1<f64>) {
    let norm = v.dot(v).sqrt();
    if norm > 1e-12 {
        *v /= norm;
    }
}

/// Up to `num_frames` evenly spaced indices over `n` items (all on None).
pub fn evenly_spaced_indices(n: usize, num_frames: Option<usize>) -> Vec<usize> {
    match num_frames {
        None => (0..n).collect(),
        Some(k) if k == 0 || n <= k => (0..n).collect(),
        Some(k) => {
            let mut idx: Vec<usize> = (0..k)
                .map(|i| (i as f64 * (n - 1) as f64 / (k - 1) as f64).round() as usize)
                .collect();
            idx.dedup();
            idx
        }
    }
}

/// Embed one track: mean of the retrieval-level embedding over evenly spaced
/// frame crops (the per-track motion image repeats across frames), then
/// L2-normalized.
pub fn embed_track(
    model: &Model,
    track_id: &str,
    crops: &[Image],
    motion: &Image,
    num_frames: Option<usize>,
) -> Result<GalleryEmbedding, EvalError> {
    if crops.is_empty() {
        return Err(EvalError::NoCrops {
            track_id: track_id.to_string(),
        });
    }
    let indices = evenly_spaced_indices(crops.len(), num_frames);
    let selected: Vec<&Image> = indices.iter().map(|&i| &crops[i]).collect();
    let motions: Vec<&Image> = indices.iter().map(|_| motion).collect();
    let crop_batch = batch_from_images(&selected);
    let motion_batch = batch_from_images(&motions);

    let mut pass = ForwardPass::new(model, false);
    let streams = model.dual_stream_forward(&mut pass, &crop_batch, &motion_batch)?;
    let z = pass
        .tape
        .value(streams.retrieval_z())
        .view()
        .into_dimensionality::<Ix2>()
        .expect("2-D embeddings")
        .to_owned();
    let mut mean = z.mean_axis(ndarray::Axis(0)).expect("nonempty");
    l2_normalize(&mut mean);
    Ok(GalleryEmbedding {
        track_id: track_id.to_string(),
        vector: mean.to_vec(),
    })
}

/// Embed one query: mean of the three sentence embeddings, L2-normalized.
/// Conflicting sentences are not filtered; the mean is always used.
pub fn embed_query(
    model: &Model,
    query_id: &str,
    sentences: &[String; 3],
) -> Result<QueryEmbedding, EvalError> {
    let token_ids: Vec<Vec<usize>> = sentences
        .iter()
        .map(|s| tokenize(s, &model.vocab, model.config.max_text_len).0)
        .collect();
    let mut pass = ForwardPass::new(model, false);
    let (_h, z) = model.text_forward(&mut pass, &token_ids)?;
    let z = pass
        .tape
        .value(z)
        .view()
        .into_dimensionality::<Ix2>()
        .expect("2-D embeddings")
        .to_owned();
    let mut mean = z.mean_axis(ndarray::Axis(0)).expect("nonempty");
    l2_normalize(&mut mean);
    Ok(QueryEmbedding {
        query_id: query_id.to_string(),
        vector: mean.to_vec(),
    })
}

/// Rank the gallery by descending cosine similarity (embeddings are unit
/// vectors, so the dot product is the cosine); ties break on ascending
/// track id for byte-stable output.
pub fn rank(query: &QueryEmbedding, gallery: &[GalleryEmbedding]) -> Result<RankedList, EvalError> {
    if gallery.is_empty() {
        return Err(EvalError::EmptyGallery);
    }
    let mut scored: Vec<(f64, &str)> = gallery
        .iter()
        .map(|g| {
            let dot: f64 = query
                .vector
                .iter()
                .zip(g.vector.iter())
                .map(|(a, b)| a * b)
                .sum();
            (dot, g.track_id.as_str())
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    Ok(RankedList {
        query_id: query.query_id.clone(),
        track_ids: scored.into_iter().map(|(_, id)| id.to_string()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrrReport {
    pub mrr: f64,
    /// 1-based rank of the ground-truth track per query, sorted by query id.
    pub per_query_ranks: BTreeMap<String, usize>,
}

/// Mean reciprocal rank: `(1/|Q|) * sum(1/rank_i)` with 1-based ranks.
pub fn mrr(
    ranked_lists: &[RankedList],
    ground_truth: &BTreeMap<String, String>,
) -> Result<MrrReport, EvalError> {
    let mut per_query_ranks = BTreeMap::new();
    let mut total = 0.0;
    for list in ranked_lists {
        let truth = ground_truth
            .get(&list.query_id)
            .ok_or_else(|| EvalError::MissingGroundTruth {
                query_id: list.query_id.clone(),
            })?;
        let rank = list
            .track_ids
            .iter()
            .position(|id| id == truth)
            .ok_or_else(|| EvalError::GroundTruthNotRanked {
                query_id: list.query_id.clone(),
                track_id: truth.clone(),
            })?
            + 1;
        per_query_ranks.insert(list.query_id.clone(), rank);
        total += 1.0 / rank as f64;
    }
    Ok(MrrReport {
        mrr: total / ranked_lists.len().max(1) as f64,
        per_query_ranks,
    })
}

/// Query-by-track score matrix with explicit id orderings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub query_ids: Vec<String>,
    pub track_ids: Vec<String>,
    pub scores: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    pub fn from_embeddings(queries: &[QueryEmbedding], gallery: &[GalleryEmbedding]) -> Self {
        let scores = queries
            .iter()
            .map(|q| {
                gallery
                    .iter()
                    .map(|g| {
                        q.vector
                            .iter()
                            .zip(g.vector.iter())
                            .map(|(a, b)| a * b)
                            .sum()
                    })
                    .collect()
            })
            .collect();
        Self {
            query_ids: queries.iter().map(|q| q.query_id.clone()).collect(),
            track_ids: gallery.iter().map(|g| g.track_id.clone()).collect(),
            scores,
        }
    }

    /// Ranked lists per row with the ascending-track-id tie-break.
    pub fn to_ranked_lists(&self) -> Vec<RankedList> {
        self.query_ids
            .iter()
            .zip(self.scores.iter())
            .map(|(qid, row)| {
                let mut scored: Vec<(f64, &str)> = row
                    .iter()
                    .copied()
                    .zip(self.track_ids.iter().map(String::as_str))
                    .collect();
                scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
                RankedList {
                    query_id: qid.clone(),
                    track_ids: scored.into_iter().map(|(_, id)| id.to_string()).collect(),
                }
            })
            .collect()
    }
}

/// Ensemble rule: per-matrix row-wise min-max normalization, then the
/// weighted mean. Constant rows normalize to all zeros.
pub fn ensemble_scores(
    matrices: &[ScoreMatrix],
    weights: &[f64],
) -> Result<ScoreMatrix, EvalError> {
    if matrices.is_empty() || matrices.len() != weights.len() {
        return Err(EvalError::MatrixMismatch(format!(
            "{} matrices vs {} weights",
            matrices.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| w < 0.0) || weights.iter().sum::<f64>() <= 0.0 {
        return Err(EvalError::BadEnsembleWeights);
    }
    let first = &matrices[0];
    for m in matrices.iter().skip(1) {
        if m.query_ids != first.query_ids || m.track_ids != first.track_ids {
            return Err(EvalError::MatrixMismatch(
                "id orderings differ between matrices".into(),
            ));
        }
    }
    let (q, g) = (first.query_ids.len(), first.track_ids.len());
    let wsum: f64 = weights.iter().sum();
    let mut out = vec![vec![0.0; g]; q];
    for (m, &w) in matrices.iter().zip(weights) {
        if m.scores.len() != q || m.scores.iter().any(|r| r.len() != g) {
            return Err(EvalError::MatrixMismatch("ragged score matrix".into()));
        }
        for (qi, row) in m.scores.iter().enumerate() {
            let min = row.iter().copied().fold(f64::INFINITY, f64::min);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = max - min;
            for (gi, &s) in row.iter().enumerate() {
                let normed = if span > 0.0 { (s - min) / span } else { 0.0 };
                out[qi][gi] += w / wsum * normed;
            }
        }
    }
    Ok(ScoreMatrix {
        query_ids: first.query_ids.clone(),
        track_ids: first.track_ids.clone(),
        scores: out,
    })
}

/// Submission file: JSON mapping query id -> full ordered track-id array,
/// keys sorted, byte-stable.
pub fn write_submission(ranked_lists: &[RankedList], path: &Path) -> Result<(), EvalError> {
    let map: BTreeMap<&str, &Vec<String>> = ranked_lists
        .iter()
        .map(|r| (r.query_id.as_str(), &r.track_ids))
        .collect();
    let io_err = |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err)?;
    }
    let json = serde_json::to_string_pretty(&map).expect("serializable");
    std::fs::write(path, json).map_err(io_err)
}

pub fn read_submission(path: &Path) -> Result<Vec<RankedList>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let map: BTreeMap<String, Vec<String>> =
        serde_json::from_str(&text).map_err(|e| EvalError::Archive {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    Ok(map
        .into_iter()
        .map(|(query_id, track_ids)| RankedList {
            query_id,
            track_ids,
        })
        .collect())
}

pub const ARCHIVE_SCHEMA_VERSION: u32 = 1;

/// Id-indexed embedding archive with a header recording the dimension and
/// normalization contract.
#[derive(Debug, Serialize, Deserialize)]
pub struct EmbeddingArchive {
    pub schema_version: u32,
    pub dim: usize,
    pub normalized: bool,
    pub gallery: Vec<GalleryEmbedding>,
    pub queries: Vec<QueryEmbedding>,
}

impl EmbeddingArchive {
    pub fn new(mut gallery: Vec<GalleryEmbedding>, mut queries: Vec<QueryEmbedding>) -> Self {
        gallery.sort_by(|a, b| a.track_id.cmp(&b.track_id));
        queries.sort_by(|a, b| a.query_id.cmp(&b.query_id));
        Self {
            schema_version: ARCHIVE_SCHEMA_VERSION,
            dim: EMBED_DIM,
            normalized: true,
            gallery,
            queries,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let io_err = |source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
        std::fs::write(path, serde_json::to_string(self).expect("serializable")).map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let archive: Self = serde_json::from_str(&text).map_err(|e| EvalError::Archive {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        if archive.schema_version != ARCHIVE_SCHEMA_VERSION {
            return Err(EvalError::Archive {
                path: path.to_path_buf(),
                msg: format!("unsupported schema version {}", archive.schema_version),
            });
        }
        if archive.dim != EMBED_DIM {
            return Err(EvalError::Archive {
                path: path.to_path_buf(),
                msg: format!("dim {} != {EMBED_DIM}", archive.dim),
            });
        }
        Ok(archive)
    }
}

/// Convenience: the retrieval feature of a model under its mode, needed by
/// callers deciding how to label outputs.
pub fn retrieval_feature_name(model: &Model) -> &'static str {
    match model.config.mode {
        ModelMode::Dual => "fusion",
        ModelMode::LocalOnly => "local",
    }
}

/// Cosine-similarity matrix between row-normalized embedding sets, computed
/// in one pass for ranking pipelines.
pub fn score_all(queries: &[QueryEmbedding], gallery: &[GalleryEmbedding]) -> Array2<f64> {
    let mut out = Array2::zeros((queries.len(), gallery.len()));
    for (i, q) in queries.iter().enumerate() {
        for (j, g) in gallery.iter().enumerate() {
            out[[i, j]] = q
                .vector
                .iter()
                .zip(g.vector.iter())
                .map(|(a, b)| a * b)
                .sum();
        }
    }
    out
}
