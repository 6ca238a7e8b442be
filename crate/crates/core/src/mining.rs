//! Weak-positive mining.
//!
//! For every text query the gallery of images is ranked by cosine
//! similarity (ties broken by ascending gallery index). A query enters the
//! rank-`k` set when its own annotated image sits at exactly rank `k` and the
//! rank-1 image belongs to a different identity. Mined pairs, and in the
//! augmented variant also pairs already correct at rank 1, receive weight
//! `exp_alpha`; every other pair keeps weight 1.

use std::cmp::Ordering;
use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet};
use std::hash::{Hash, Hasher};

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::encoder::EmbeddingMatrix;
use crate::{Error, Result};

/// Query x gallery cosine similarities with the pair ids behind each index.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: Array2<f64>,
    query_pair_ids: Vec<u64>,
    gallery_pair_ids: Vec<u64>,
}

impl SimilarityMatrix {
    pub fn new(values: Array2<f64>, query_pair_ids: Vec<u64>, gallery_pair_ids: Vec<u64>) -> Result<Self> {
        if values.nrows() != query_pair_ids.len() || values.ncols() != gallery_pair_ids.len() {
            return Err(Error::Shape(format!(
                "similarity {:?} with {} query and {} gallery ids",
                values.dim(),
                query_pair_ids.len(),
                gallery_pair_ids.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::malformed("similarity matrix", "non-finite entry"));
        }
        Ok(Self {
            values,
            query_pair_ids,
            gallery_pair_ids,
        })
    }

    /// Wraps raw values, labelling rows and columns by their index.
    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        let q = (0..values.nrows() as u64).collect();
        let g = (0..values.ncols() as u64).collect();
        Self::new(values, q, g)
    }

    pub fn with_pair_ids(self, query_pair_ids: Vec<u64>, gallery_pair_ids: Vec<u64>) -> Result<Self> {
        Self::new(self.values, query_pair_ids, gallery_pair_ids)
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn row(&self, query: usize) -> ArrayView1<'_, f64> {
        self.values.row(query)
    }

    pub fn n_queries(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_gallery(&self) -> usize {
        self.values.ncols()
    }

    pub fn query_pair_ids(&self) -> &[u64] {
        &self.query_pair_ids
    }

    pub fn gallery_pair_ids(&self) -> &[u64] {
        &self.gallery_pair_ids
    }
}

/// `values[i][j] = <q_i, g_j>`; both inputs are already unit-norm.
pub fn compute_similarity(queries: &EmbeddingMatrix, gallery: &EmbeddingMatrix) -> Result<SimilarityMatrix> {
    if queries.dim() != gallery.dim() {
        return Err(Error::Dimension {
            expected: queries.dim(),
            found: gallery.dim(),
        });
    }
    SimilarityMatrix::from_values(queries.values().dot(&gallery.values().t()))
}

/// Gallery order for one row: descending similarity, ascending index on ties.
pub(crate) fn rank_order(a: usize, b: usize, row: &ArrayView1<'_, f64>) -> Ordering {
    row[b]
        .partial_cmp(&row[a])
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

/// Gallery indices of one row, best first.
pub fn ranking(row: ArrayView1<'_, f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| rank_order(a, b, &row));
    order
}

/// 1-based rank of `gallery` within row `query`.
pub fn rank_of(sim: &SimilarityMatrix, query: usize, gallery: usize) -> usize {
    rank_in_row(sim.row(query), gallery)
}

pub(crate) fn rank_in_row(row: ArrayView1<'_, f64>, gallery: usize) -> usize {
    let target = row[gallery];
    1 + row
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > target || (s == target && j < gallery))
        .count()
}

/// Index of the rank-1 gallery item.
pub fn top1(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (j, &s) in row.iter().enumerate().skip(1) {
        if s > row[best] {
            best = j;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WeakPositive {
    pub query_index: usize,
    pub pair_id: u64,
    pub paired_gallery_index: usize,
    pub rank_of_pair: usize,
    pub rank1_gallery_index: usize,
}

/// The rank-`k` weak-positive set, ordered by query index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeakPositiveSet {
    pub k: usize,
    pub entries: Vec<WeakPositive>,
}

impl WeakPositiveSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn pair_ids(&self) -> BTreeSet<u64> {
        self.entries.iter().map(|e| e.pair_id).collect()
    }
}

fn check_mining_inputs(
    sim: &SimilarityMatrix,
    query_ids: &[u64],
    gallery_ids: &[u64],
    paired: &[usize],
) -> Result<()> {
    if query_ids.len() != sim.n_queries() || paired.len() != sim.n_queries() {
        return Err(Error::Shape(format!(
            "{} queries but {} identities and {} pairings",
            sim.n_queries(),
            query_ids.len(),
            paired.len()
        )));
    }
    if gallery_ids.len() != sim.n_gallery() {
        return Err(Error::Shape(format!(
            "{} gallery items but {} identities",
            sim.n_gallery(),
            gallery_ids.len()
        )));
    }
    if let Some(&g) = paired.iter().find(|&&g| g >= sim.n_gallery()) {
        return Err(Error::Shape(format!(
            "paired gallery index {g} out of range for {} items",
            sim.n_gallery()
        )));
    }
    Ok(())
}

/// Builds the rank-`k` weak-positive set (`k >= 2`).
///
/// `paired[q]` is the gallery index of query `q`'s annotated match.
pub fn mine(
    sim: &SimilarityMatrix,
    query_ids: &[u64],
    gallery_ids: &[u64],
    paired: &[usize],
    k: usize,
) -> Result<WeakPositiveSet> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!(
            "mining rank must be at least 2, got {k}"
        )));
    }
    check_mining_inputs(sim, query_ids, gallery_ids, paired)?;
    let mut entries = Vec::new();
    for (q, &g) in paired.iter().enumerate() {
        let row = sim.row(q);
        if rank_in_row(row, g) != k {
            continue;
        }
        let first = top1(row);
        if gallery_ids[first] != query_ids[q] {
            entries.push(WeakPositive {
                query_index: q,
                pair_id: sim.query_pair_ids[q],
                paired_gallery_index: g,
                rank_of_pair: k,
                rank1_gallery_index: first,
            });
        }
    }
    Ok(WeakPositiveSet { k, entries })
}

/// Pair ids of queries whose annotated match is already at rank 1.
pub fn rank1_correct(sim: &SimilarityMatrix, paired: &[usize]) -> Result<BTreeSet<u64>> {
    if paired.len() != sim.n_queries() {
        return Err(Error::Shape(format!(
            "{} queries but {} pairings",
            sim.n_queries(),
            paired.len()
        )));
    }
    Ok(paired
        .iter()
        .enumerate()
        .filter(|&(q, &g)| g < sim.n_gallery() && top1(sim.row(q)) == g)
        .map(|(q, _)| sim.query_pair_ids[q])
        .collect())
}

fn default_k() -> usize {
    2
}

fn default_exp_alpha() -> f64 {
    1.6
}

fn default_period() -> usize {
    4
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoostConfig {
    /// `false` disables mining entirely (the unboosted baseline).
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_exp_alpha")]
    pub exp_alpha: f64,
    #[serde(default = "default_period")]
    pub refresh_period: usize,
    #[serde(default = "default_period")]
    pub warmup_epochs: usize,
    /// Also boost pairs already matched at rank 1.
    #[serde(default = "default_true")]
    pub augmented: bool,
    /// Additionally mine image queries against the text gallery.
    #[serde(default)]
    pub mine_i2t: bool,
}

impl Default for BoostConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            k: default_k(),
            exp_alpha: default_exp_alpha(),
            refresh_period: default_period(),
            warmup_epochs: default_period(),
            augmented: true,
            mine_i2t: false,
        }
    }
}

impl BoostConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidConfig(format!(
                "boost k must be at least 2, got {}",
                self.k
            )));
        }
        if !(self.exp_alpha.is_finite() && self.exp_alpha > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "boost weight must be positive, got {}",
                self.exp_alpha
            )));
        }
        if self.refresh_period == 0 {
            return Err(Error::InvalidConfig("refresh period must be at least 1".into()));
        }
        Ok(())
    }

    /// Whether the weight table is rebuilt before training epoch `epoch`
    /// (0-based count of completed epochs).
    pub fn is_refresh_epoch(&self, epoch: usize) -> bool {
        self.enabled
            && epoch >= self.warmup_epochs
            && (epoch - self.warmup_epochs).is_multiple_of(self.refresh_period)
    }
}

/// Per-pair boosting weights. Pairs absent from the table weigh 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTable {
    pub weights: BTreeMap<u64, f64>,
    pub exp_alpha: f64,
    pub epoch_computed: usize,
}

impl WeightTable {
    pub fn ones(exp_alpha: f64) -> Self {
        Self {
            weights: BTreeMap::new(),
            exp_alpha,
            epoch_computed: 0,
        }
    }

    pub fn weight(&self, pair_id: u64) -> f64 {
        self.weights.get(&pair_id).copied().unwrap_or(1.0)
    }

    /// Number of pairs whose weight exceeds 1.
    pub fn n_boosted(&self) -> usize {
        self.weights.values().filter(|w| **w > 1.0).count()
    }

    /// Order-stable hash of the table contents.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.exp_alpha.to_bits().hash(&mut h);
        self.epoch_computed.hash(&mut h);
        for (id, w) in &self.weights {
            id.hash(&mut h);
            w.to_bits().hash(&mut h);
        }
        h.finish()
    }

    /// `{pair_id: weight}` as a JSON object.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.weights)?)
    }

    pub fn from_json(text: &str, exp_alpha: f64, epoch_computed: usize) -> Result<Self> {
        let weights: BTreeMap<u64, f64> = serde_json::from_str(text)?;
        if let Some((id, w)) = weights.iter().find(|(_, w)| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::malformed(
                "weight table",
                format!("pair {id} has weight {w}"),
            ));
        }
        Ok(Self {
            weights,
            exp_alpha,
            epoch_computed,
        })
    }
}

/// Materializes the weight table: `exp_alpha` for mined pairs (and, when
/// augmented, for `rank1_correct` pairs), 1 for every other pair id. Weights
/// are assigned afresh; nothing carries over from a previous table.
pub fn build_weights(
    mined: &WeakPositiveSet,
    all_pair_ids: &[u64],
    config: &BoostConfig,
    rank1_correct: &BTreeSet<u64>,
    epoch: usize,
) -> WeightTable {
    let mut boosted = mined.pair_ids();
    if config.augmented {
        boosted.extend(rank1_correct.iter().copied());
    }
    let weights = all_pair_ids
        .iter()
        .chain(&boosted)
        .map(|&id| {
            (
                id,
                if boosted.contains(&id) {
                    config.exp_alpha
                } else {
                    1.0
                },
            )
        })
        .collect();
    WeightTable {
        weights,
        exp_alpha: config.exp_alpha,
        epoch_computed: epoch,
    }
}

/// Weights of the given batch, in batch order.
pub fn batch_weights(table: &WeightTable, batch_pair_ids: &[u64]) -> Vec<f64> {
    batch_pair_ids.iter().map(|&id| table.weight(id)).collect()
}
