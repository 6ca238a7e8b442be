//! Text-to-image retrieval metrics.
//!
//! Each caption is a query; the gallery is every image of the evaluated
//! split. A gallery item is relevant when it shares the query's identity.
//! R@k is the fraction of queries with a relevant item in the top k, and AP
//! averages precision over the ranks of all relevant items.

use std::collections::{BTreeMap, HashSet};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::encoder::{encode, EncoderParams, Modality};
use crate::mining::ranking;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub map: f64,
}

/// Queries (captions) and gallery (images) of one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalRun {
    pub queries: Array2<f64>,
    pub query_ids: Vec<u64>,
    pub gallery: Array2<f64>,
    pub gallery_ids: Vec<u64>,
    /// Source dataset of every gallery item.
    pub gallery_sources: Vec<String>,
}

/// Foreign gallery images appended during distractor evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct DistractorGallery {
    pub source: String,
    pub embeddings: Array2<f64>,
    pub identities: Vec<u64>,
}

impl RetrievalRun {
    fn validate(&self) -> Result<()> {
        if self.queries.nrows() != self.query_ids.len() {
            return Err(Error::Shape(format!(
                "{} queries with {} identities",
                self.queries.nrows(),
                self.query_ids.len()
            )));
        }
        if self.gallery.nrows() != self.gallery_ids.len()
            || self.gallery.nrows() != self.gallery_sources.len()
        {
            return Err(Error::Shape(format!(
                "{} gallery items with {} identities and {} sources",
                self.gallery.nrows(),
                self.gallery_ids.len(),
                self.gallery_sources.len()
            )));
        }
        if self.queries.ncols() != self.gallery.ncols() {
            return Err(Error::Dimension {
                expected: self.queries.ncols(),
                found: self.gallery.ncols(),
            });
        }
        if self.queries.nrows() == 0 {
            return Err(Error::malformed("retrieval run", "no queries"));
        }
        let present: HashSet<u64> = self.gallery_ids.iter().copied().collect();
        if let Some(&identity) = self.query_ids.iter().find(|id| !present.contains(id)) {
            return Err(Error::MissingIdentity { identity });
        }
        Ok(())
    }

    pub fn similarity(&self) -> Array2<f64> {
        self.queries.dot(&self.gallery.t())
    }

    /// Distinct gallery sources in first-seen order.
    pub fn sources(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.gallery_sources {
            if !out.contains(s) {
                out.push(s.clone());
            }
        }
        out
    }
}

/// Per-query ranking statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryResult {
    /// 1-based rank of the first relevant gallery item.
    pub first_hit: usize,
    pub average_precision: f64,
}

fn score_row(order: &[usize], query_id: u64, gallery_ids: &[u64]) -> QueryResult {
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    let mut first_hit = 0;
    for (pos, &g) in order.iter().enumerate() {
        if gallery_ids[g] == query_id {
            hits += 1;
            precision_sum += hits as f64 / (pos + 1) as f64;
            if first_hit == 0 {
                first_hit = pos + 1;
            }
        }
    }
    QueryResult {
        first_hit,
        average_precision: precision_sum / hits as f64,
    }
}

pub fn per_query(run: &RetrievalRun) -> Result<Vec<QueryResult>> {
    run.validate()?;
    let sim = run.similarity();
    Ok(sim
        .rows()
        .into_iter()
        .zip(&run.query_ids)
        .map(|(row, &qid)| score_row(&ranking(row), qid, &run.gallery_ids))
        .collect())
}

pub fn summarize(results: &[QueryResult]) -> Metrics {
    let n = results.len() as f64;
    let recall = |k: usize| results.iter().filter(|r| r.first_hit <= k).count() as f64 / n;
    Metrics {
        r1: recall(1),
        r5: recall(5),
        r10: recall(10),
        map: results.iter().map(|r| r.average_precision).sum::<f64>() / n,
    }
}

pub fn evaluate(run: &RetrievalRun) -> Result<Metrics> {
    per_query(run).map(|r| summarize(&r))
}

/// Appends distractor galleries, remapping their identities past every
/// identity already present so they can never count as relevant.
pub fn with_distractors(primary: &RetrievalRun, distractors: &[DistractorGallery]) -> Result<RetrievalRun> {
    let mut run = primary.clone();
    let mut owner: BTreeMap<u64, String> = BTreeMap::new();
    for (id, src) in run.query_ids.iter().map(|id| (id, "queries")).chain(
        run.gallery_ids
            .iter()
            .zip(&run.gallery_sources)
            .map(|(id, s)| (id, s.as_str())),
    ) {
        owner.entry(*id).or_insert_with(|| src.to_string());
    }
    let mut next = owner.keys().next_back().map_or(0, |m| m + 1);
    for d in distractors {
        if d.embeddings.nrows() != d.identities.len() {
            return Err(Error::Shape(format!(
                "distractor {} has {} rows and {} identities",
                d.source,
                d.embeddings.nrows(),
                d.identities.len()
            )));
        }
        if d.embeddings.ncols() != run.gallery.ncols() {
            return Err(Error::Dimension {
                expected: run.gallery.ncols(),
                found: d.embeddings.ncols(),
            });
        }
        let mut remap: BTreeMap<u64, u64> = BTreeMap::new();
        for id in &d.identities {
            remap.entry(*id).or_insert_with(|| {
                next += 1;
                next - 1
            });
        }
        for &new_id in remap.values() {
            if let Some(first) = owner.insert(new_id, d.source.clone()) {
                return Err(Error::IdentityCollision {
                    identity: new_id,
                    first,
                    second: d.source.clone(),
                });
            }
        }
        run.gallery = ndarray::concatenate(ndarray::Axis(0), &[run.gallery.view(), d.embeddings.view()])
            .map_err(|e| Error::Shape(e.to_string()))?;
        run.gallery_ids.extend(d.identities.iter().map(|id| remap[id]));
        run.gallery_sources
            .extend(std::iter::repeat_n(d.source.clone(), d.identities.len()));
    }
    Ok(run)
}

pub fn evaluate_with_distractors(
    primary: &RetrievalRun,
    distractors: &[DistractorGallery],
) -> Result<Metrics> {
    evaluate(&with_distractors(primary, distractors)?)
}

/// Caption and image embeddings of a whole split.
pub fn encode_split(params: &EncoderParams, dataset: &Dataset) -> Result<RetrievalRun> {
    check_feature_dims(params, dataset)?;
    let texts = dataset.gather_texts(dataset.samples().iter().map(|s| s.text_row));
    let queries = encode(params, texts.view(), Modality::Text)?.into_values();
    let gallery = encode(params, dataset.image_matrix().view(), Modality::Image)?.into_values();
    Ok(RetrievalRun {
        queries,
        query_ids: dataset.samples().iter().map(|s| s.identity).collect(),
        gallery,
        gallery_ids: dataset.image_identities(),
        gallery_sources: vec![dataset.name().to_string(); dataset.n_images()],
    })
}

/// Image embeddings of a split, for use as a distractor gallery.
pub fn encode_distractor(params: &EncoderParams, dataset: &Dataset) -> Result<DistractorGallery> {
    check_feature_dims(params, dataset)?;
    let embeddings = encode(params, dataset.image_matrix().view(), Modality::Image)?.into_values();
    Ok(DistractorGallery {
        source: dataset.name().to_string(),
        embeddings,
        identities: dataset.image_identities(),
    })
}

fn check_feature_dims(params: &EncoderParams, dataset: &Dataset) -> Result<()> {
    let dims = params.dims();
    if dims.p_img != dataset.p_img() || dims.p_txt != dataset.p_txt() {
        return Err(Error::Shape(format!(
            "encoder expects p_img={} p_txt={}, dataset {} has p_img={} p_txt={}",
            dims.p_img,
            dims.p_txt,
            dataset.name(),
            dataset.p_img(),
            dataset.p_txt()
        )));
    }
    Ok(())
}

/// Evaluates a frozen encoder on another corpus's split.
pub fn cross_dataset_eval(params: &EncoderParams, other: &Dataset) -> Result<Metrics> {
    evaluate(&encode_split(params, other)?)
}

/// Contents of `eval.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub map: f64,
    pub n_queries: usize,
    pub n_gallery: usize,
    pub distractor_sources: Vec<String>,
}

impl EvalReport {
    pub fn new(metrics: Metrics, run: &RetrievalRun, distractor_sources: Vec<String>) -> Self {
        Self {
            r1: metrics.r1,
            r5: metrics.r5,
            r10: metrics.r10,
            map: metrics.map,
            n_queries: run.queries.nrows(),
            n_gallery: run.gallery.nrows(),
            distractor_sources,
        }
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            r1: self.r1,
            r5: self.r5,
            r10: self.r10,
            map: self.map,
        }
    }
}

/// Builds a run from raw query and gallery embeddings (single source).
pub fn run_from_embeddings(
    queries: ArrayView2<'_, f64>,
    query_ids: Vec<u64>,
    gallery: ArrayView2<'_, f64>,
    gallery_ids: Vec<u64>,
) -> RetrievalRun {
    RetrievalRun {
        queries: queries.to_owned(),
        query_ids,
        gallery_sources: vec!["primary".to_string(); gallery.nrows()],
        gallery: gallery.to_owned(),
        gallery_ids,
    }
}
