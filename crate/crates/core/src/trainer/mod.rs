//! Training loop with periodic weak-positive refresh.
//!
//! Epochs are counted from 0. Before training epoch `e` the weight table is
//! rebuilt when `e >= warmup` and `(e - warmup) % refresh_period == 0`; until
//! the first refresh every pair weighs 1. A refresh encodes the whole
//! training split with the current parameters, mines the rank-`k` set over
//! all captions against all images, and replaces the table.

pub mod checkpoint;
pub mod history;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binfmt;
use crate::dataset::{Corpus, Dataset};
use crate::encoder::{
    adam_step, backward, encode, forward, AdamConfig, AdamState, EncoderDims, EncoderParams, Modality,
};
use crate::eval::{encode_split, evaluate, EvalReport, Metrics};
use crate::losses::{
    boosted_id, boosted_itc, boosted_sdm_directed, combined_objective, LossKind, LossTerm, SdmDirection,
    DEFAULT_SDM_EPS,
};
use crate::mining::{
    batch_weights, build_weights, mine, rank1_correct, rank_in_row, BoostConfig, SimilarityMatrix,
    WeakPositiveSet, WeightTable,
};
use crate::{Error, Result};

pub use history::{MetricsRow, RefreshRecord};

pub const CONFIG_FILE: &str = "config.json";
pub const EVAL_FILE: &str = "eval.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Named loss/boosting combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossPreset {
    /// Contrastive loss only, no boosting.
    #[serde(rename = "clip")]
    Clip,
    /// Boosted contrastive loss.
    #[serde(rename = "clip+b")]
    ClipBoosted,
    /// Contrastive + SDM + ID, no boosting.
    #[serde(rename = "irra")]
    Irra,
    /// Boosted contrastive + SDM + ID.
    #[serde(rename = "irra+b")]
    IrraBoosted,
}

impl LossPreset {
    pub fn losses(self) -> Vec<LossTerm> {
        let term = |loss| LossTerm {
            loss,
            coefficient: 1.0,
        };
        match self {
            LossPreset::Clip | LossPreset::ClipBoosted => vec![term(LossKind::Itc)],
            LossPreset::Irra | LossPreset::IrraBoosted => {
                vec![term(LossKind::Itc), term(LossKind::Sdm), term(LossKind::Id)]
            }
        }
    }

    pub fn boosted(self) -> bool {
        matches!(self, LossPreset::ClipBoosted | LossPreset::IrraBoosted)
    }

    pub fn name(self) -> &'static str {
        match self {
            LossPreset::Clip => "clip",
            LossPreset::ClipBoosted => "clip+b",
            LossPreset::Irra => "irra",
            LossPreset::IrraBoosted => "irra+b",
        }
    }
}

impl fmt::Display for LossPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clip" => Ok(LossPreset::Clip),
            "clip+b" => Ok(LossPreset::ClipBoosted),
            "irra" => Ok(LossPreset::Irra),
            "irra+b" => Ok(LossPreset::IrraBoosted),
            other => Err(Error::InvalidConfig(format!(
                "unknown loss preset `{other}` (expected clip, clip+b, irra, irra+b)"
            ))),
        }
    }
}

mod defaults {
    use crate::losses::{LossKind, LossTerm};

    pub fn epochs() -> usize {
        60
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn lr() -> f64 {
        1e-3
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn adam_eps() -> f64 {
        1e-8
    }
    pub fn seed() -> u64 {
        1
    }
    pub fn hidden() -> usize {
        64
    }
    pub fn embed_dim() -> usize {
        32
    }
    pub fn tau() -> f64 {
        0.05
    }
    pub fn losses() -> Vec<LossTerm> {
        vec![LossTerm {
            loss: LossKind::Itc,
            coefficient: 1.0,
        }]
    }
    pub fn eval_every() -> usize {
        5
    }
    pub fn sdm_eps() -> f64 {
        crate::losses::DEFAULT_SDM_EPS
    }
}

/// Run configuration; the on-disk run config is this struct as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    #[serde(default = "defaults::hidden")]
    pub hidden: usize,
    #[serde(default = "defaults::embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "defaults::tau")]
    pub tau: f64,
    #[serde(default = "defaults::losses")]
    pub losses: Vec<LossTerm>,
    #[serde(default)]
    pub boost: BoostConfig,
    /// Validation cadence in epochs; 0 disables.
    #[serde(default = "defaults::eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    #[serde(default = "defaults::sdm_eps")]
    pub sdm_eps: f64,
    #[serde(default = "SdmDirection::both")]
    pub sdm_direction: SdmDirection,
}

impl SdmDirection {
    fn both() -> Self {
        SdmDirection::Both
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            lr: defaults::lr(),
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            adam_eps: defaults::adam_eps(),
            seed: defaults::seed(),
            hidden: defaults::hidden(),
            embed_dim: defaults::embed_dim(),
            tau: defaults::tau(),
            losses: defaults::losses(),
            boost: BoostConfig::default(),
            eval_every: defaults::eval_every(),
            checkpoint_dir: None,
            sdm_eps: DEFAULT_SDM_EPS,
            sdm_direction: SdmDirection::Both,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&binfmt::read_string(path)?)
    }

    pub fn with_preset(mut self, preset: LossPreset) -> Self {
        self.losses = preset.losses();
        self.boost.enabled = preset.boosted();
        self
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.losses.is_empty() {
            return Err(Error::InvalidConfig("at least one loss term is required".into()));
        }
        let contrastive = self
            .losses
            .iter()
            .any(|t| matches!(t.loss, LossKind::Itc | LossKind::Sdm));
        if contrastive && self.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "contrastive losses need batch_size >= 2".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Temperature(self.tau));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidConfig(format!("invalid learning rate {}", self.lr)));
        }
        if self.hidden == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidConfig(
                "hidden and embed_dim must be positive".into(),
            ));
        }
        if let Some(t) = self.losses.iter().find(|t| !t.coefficient.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "non-finite coefficient for {:?}",
                t.loss
            )));
        }
        self.boost.validate()
    }
}

/// Per-epoch record kept in memory for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub weights_fingerprint: u64,
    pub n_boosted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub params: EncoderParams,
    pub adam: AdamState,
    pub weights: WeightTable,
    /// Pair ids mined at the most recent refresh.
    pub last_mined: Option<BTreeSet<u64>>,
    /// Identity label of each classifier row.
    pub class_labels: Vec<u64>,
    pub history: Vec<MetricsRow>,
    pub refreshes: Vec<RefreshRecord>,
    pub epoch_log: Vec<EpochLog>,
}

impl TrainState {
    pub fn new(config: &TrainConfig, train: &Dataset) -> Result<Self> {
        config.validate()?;
        let class_labels = train.identities();
        let dims = EncoderDims {
            p_img: train.p_img(),
            p_txt: train.p_txt(),
            hidden: config.hidden,
            embed: config.embed_dim,
            n_classes: class_labels.len(),
        };
        let params = EncoderParams::init(&dims, config.tau, config.seed)?;
        Ok(Self {
            epoch: 0,
            adam: AdamState::new(&params),
            params,
            weights: WeightTable::ones(config.boost.exp_alpha),
            last_mined: None,
            class_labels,
            history: Vec::new(),
            refreshes: Vec::new(),
            epoch_log: Vec::new(),
        })
    }
}

/// Training split prepared for batching.
pub struct TrainData<'a> {
    dataset: &'a Dataset,
    labels: Vec<usize>,
}

impl<'a> TrainData<'a> {
    pub fn new(dataset: &'a Dataset, class_labels: &[u64]) -> Result<Self> {
        let index: HashMap<u64, usize> = class_labels.iter().enumerate().map(|(i, &l)| (l, i)).collect();
        let labels = dataset
            .samples()
            .iter()
            .map(|s| {
                index.get(&s.identity).copied().ok_or(Error::LabelOutOfRange {
                    label: s.identity as usize,
                    classes: class_labels.len(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { dataset, labels })
    }

    pub fn dataset(&self) -> &Dataset {
        self.dataset
    }
}

/// Outcome of one refresh: the new table, the mined set and its log record.
#[derive(Debug, Clone, PartialEq)]
pub struct Refresh {
    pub table: WeightTable,
    pub mined: WeakPositiveSet,
    pub record: RefreshRecord,
}

/// Re-mines the training split with the current parameters and builds a
/// fresh weight table.
pub fn refresh_weights(state: &TrainState, data: &TrainData<'_>, boost: &BoostConfig) -> Result<Refresh> {
    mine_split(
        &state.params,
        data.dataset,
        boost,
        state.epoch,
        state.last_mined.as_ref(),
    )
}

/// Mines `ds` with frozen `params`. `previous` is the pair-id set of the
/// preceding refresh, used for the promotion count.
pub fn mine_split(
    params: &EncoderParams,
    ds: &Dataset,
    boost: &BoostConfig,
    epoch: usize,
    previous: Option<&BTreeSet<u64>>,
) -> Result<Refresh> {
    let samples = ds.samples();
    let texts = ds.gather_texts(samples.iter().map(|s| s.text_row));
    let text_emb = encode(params, texts.view(), Modality::Text)?;
    let image_emb = encode(params, ds.image_matrix().view(), Modality::Image)?;
    let image_identities = ds.image_identities();

    let pair_ids = ds.pair_ids();
    let sim = SimilarityMatrix::new(
        text_emb.values().dot(&image_emb.values().t()),
        pair_ids.clone(),
        ds.image_pair_ids(),
    )?;
    let query_ids: Vec<u64> = samples.iter().map(|s| s.identity).collect();
    let paired: Vec<usize> = samples.iter().map(|s| s.image_row).collect();
    let mut mined = mine(&sim, &query_ids, &image_identities, &paired, boost.k)?;
    let rank1 = rank1_correct(&sim, &paired)?;

    if boost.mine_i2t {
        let image_queries = image_emb.values().select(ndarray::Axis(0), &paired);
        let i2t = SimilarityMatrix::new(
            image_queries.dot(&text_emb.values().t()),
            pair_ids.clone(),
            pair_ids.clone(),
        )?;
        let own_text: Vec<usize> = (0..samples.len()).collect();
        let extra = mine(&i2t, &query_ids, &query_ids, &own_text, boost.k)?;
        let known = mined.pair_ids();
        mined
            .entries
            .extend(extra.entries.into_iter().filter(|e| !known.contains(&e.pair_id)));
    }

    let table = build_weights(&mined, &pair_ids, boost, &rank1, epoch);

    let (n_prev_mined, n_promoted) = match previous {
        Some(prev) => {
            let promoted = samples
                .iter()
                .enumerate()
                .filter(|(_, s)| prev.contains(&s.pair_id))
                .filter(|(q, s)| rank_in_row(sim.row(*q), s.image_row) == 1)
                .count();
            (prev.len(), promoted)
        }
        None => (0, 0),
    };
    let record = RefreshRecord {
        epoch,
        k: boost.k,
        n_mined: mined.len(),
        n_rank1: rank1.len(),
        n_boosted: table.n_boosted(),
        n_prev_mined,
        n_promoted,
    };
    Ok(Refresh { table, mined, record })
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Loss and gradients of one batch given by sample indices.
fn batch_objective(
    state: &TrainState,
    data: &TrainData<'_>,
    config: &TrainConfig,
    batch: &[usize],
) -> Result<(f64, crate::encoder::GradientSet)> {
    let ds = data.dataset;
    let samples: Vec<_> = batch.iter().map(|&i| ds.samples()[i]).collect();
    let img_raw = ds.gather_images(samples.iter().map(|s| s.image_row));
    let txt_raw = ds.gather_texts(samples.iter().map(|s| s.text_row));
    let (img, img_cache) = forward(&state.params, img_raw.view(), Modality::Image)?;
    let (txt, txt_cache) = forward(&state.params, txt_raw.view(), Modality::Text)?;
    let pair_ids: Vec<u64> = samples.iter().map(|s| s.pair_id).collect();
    let weights = batch_weights(&state.weights, &pair_ids);
    let tau = state.params.tau;

    let mut terms = Vec::with_capacity(config.losses.len());
    for term in &config.losses {
        let out = match term.loss {
            LossKind::Itc => boosted_itc(img.values(), txt.values(), &weights, tau)?,
            LossKind::Id => {
                let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
                boosted_id(
                    img.values(),
                    txt.values(),
                    &labels,
                    &weights,
                    state.params.classifier.view(),
                )?
            }
            LossKind::Sdm => {
                let ids: Vec<u64> = samples.iter().map(|s| s.identity).collect();
                boosted_sdm_directed(
                    img.values(),
                    txt.values(),
                    &ids,
                    &weights,
                    tau,
                    config.sdm_eps,
                    config.sdm_direction,
                )?
            }
        };
        terms.push((out, term.coefficient));
    }
    let total = combined_objective(&terms)?;

    let mut grads = state.params.zero_grad();
    grads.image = backward(&state.params, &img_cache, total.grad_img.view())?;
    grads.text = backward(&state.params, &txt_cache, total.grad_txt.view())?;
    if let Some(g) = total.grad_classifier {
        grads.classifier = g;
    }
    Ok((total.value, grads))
}

/// Shuffles the training pairs with the epoch's generator and takes one Adam
/// step per batch. Returns the mean batch loss. A trailing batch of a single
/// pair is dropped.
pub fn train_epoch(state: &mut TrainState, data: &TrainData<'_>, config: &TrainConfig) -> Result<f64> {
    let mut order: Vec<usize> = (0..data.dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(config.seed, state.epoch));
    order.shuffle(&mut rng);
    let adam = config.adam();
    let mut total = 0.0;
    let mut n_batches = 0usize;
    for (b, batch) in order.chunks(config.batch_size).enumerate() {
        if batch.len() < 2 && config.batch_size >= 2 {
            continue;
        }
        let (value, grads) = batch_objective(state, data, config, batch)?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: state.epoch,
                batch: b,
                value,
            });
        }
        adam_step(&mut state.params, &grads, &mut state.adam, &adam)?;
        total += value;
        n_batches += 1;
    }
    state.epoch_log.push(EpochLog {
        epoch: state.epoch,
        loss: total / n_batches.max(1) as f64,
        weights_fingerprint: state.weights.fingerprint(),
        n_boosted: state.weights.n_boosted(),
    });
    state.epoch += 1;
    Ok(total / n_batches.max(1) as f64)
}

/// Applies a refresh if the schedule calls for one before the next epoch.
pub fn maybe_refresh(
    state: &mut TrainState,
    data: &TrainData<'_>,
    config: &TrainConfig,
) -> Result<Option<Refresh>> {
    if !config.boost.is_refresh_epoch(state.epoch) {
        return Ok(None);
    }
    let refresh = refresh_weights(state, data, &config.boost)?;
    state.weights = refresh.table.clone();
    state.last_mined = Some(refresh.mined.pair_ids());
    state.refreshes.push(refresh.record.clone());
    Ok(Some(refresh))
}

/// Final state and test metrics of a run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: TrainState,
    pub test: Metrics,
    pub eval: EvalReport,
}

/// Trains from scratch. With `out_dir`, writes `config.json`,
/// `metrics.csv`, `refresh.jsonl`, `eval.json` and `checkpoint/` there.
pub fn run(config: &TrainConfig, corpus: &Corpus, out_dir: Option<&Path>) -> Result<RunOutcome> {
    let state = TrainState::new(config, &corpus.train)?;
    drive(config, corpus, out_dir, state)
}

/// Continues the run stored in `out_dir` up to `config.epochs`.
pub fn resume(config: &TrainConfig, corpus: &Corpus, out_dir: &Path) -> Result<RunOutcome> {
    config.validate()?;
    let (mut state, _) = checkpoint::load_state(&out_dir.join(CHECKPOINT_DIR))?;
    let done = state.epoch;
    let metrics_path = out_dir.join(history::METRICS_FILE);
    if metrics_path.exists() {
        state.history = history::read_metrics(out_dir)?
            .into_iter()
            .filter(|r| r.epoch <= done && r.split != "test")
            .collect();
    }
    let refresh_path = out_dir.join(history::REFRESH_FILE);
    if refresh_path.exists() {
        state.refreshes = history::parse_refresh_jsonl(&binfmt::read_string(&refresh_path)?)?
            .into_iter()
            .filter(|r| r.epoch < done)
            .collect();
    }
    drive(config, corpus, Some(out_dir), state)
}

fn write_artifacts(dir: &Path, state: &TrainState, config: &TrainConfig) -> Result<()> {
    history::write_metrics(dir, &state.history)?;
    binfmt::write_file(
        &dir.join(history::REFRESH_FILE),
        history::refresh_jsonl(&state.refreshes)?,
    )?;
    checkpoint::save(&dir.join(CHECKPOINT_DIR), state, config)
}

fn drive(
    config: &TrainConfig,
    corpus: &Corpus,
    out_dir: Option<&Path>,
    mut state: TrainState,
) -> Result<RunOutcome> {
    config.validate()?;
    let data = TrainData::new(&corpus.train, &state.class_labels)?;
    if let Some(dir) = out_dir {
        binfmt::create_dir(dir)?;
        binfmt::write_file(&dir.join(CONFIG_FILE), serde_json::to_string_pretty(config)?)?;
        write_artifacts(dir, &state, config)?;
    }

    while state.epoch < config.epochs {
        maybe_refresh(&mut state, &data, config)?;
        let loss = train_epoch(&mut state, &data, config)?;
        let n_boosted = state.weights.n_boosted();
        state
            .history
            .push(MetricsRow::train(state.epoch, loss, n_boosted));
        if config.eval_every > 0 && state.epoch.is_multiple_of(config.eval_every) {
            if let Some(val) = &corpus.val {
                let m = evaluate(&encode_split(&state.params, val)?)?;
                state
                    .history
                    .push(MetricsRow::eval(state.epoch, "val", m, Some(loss), n_boosted));
            }
        }
        if let Some(dir) = out_dir {
            write_artifacts(dir, &state, config)?;
        }
    }

    let test_run = encode_split(&state.params, &corpus.test)?;
    let test = evaluate(&test_run)?;
    let last_loss = state
        .history
        .iter()
        .rev()
        .find(|r| r.split == "train")
        .and_then(|r| r.loss);
    state.history.push(MetricsRow::eval(
        state.epoch,
        "test",
        test,
        last_loss,
        state.weights.n_boosted(),
    ));
    let eval = EvalReport::new(test, &test_run, Vec::new());
    if let Some(dir) = out_dir {
        history::write_metrics(dir, &state.history)?;
        binfmt::write_file(&dir.join(EVAL_FILE), serde_json::to_string_pretty(&eval)?)?;
    }
    Ok(RunOutcome { state, test, eval })
}

/// Encoded caption/image similarity of a split (captions as rows).
pub fn split_similarity(params: &EncoderParams, ds: &Dataset) -> Result<Array2<f64>> {
    let texts = ds.gather_texts(ds.samples().iter().map(|s| s.text_row));
    let t = encode(params, texts.view(), Modality::Text)?;
    let i = encode(params, ds.image_matrix().view(), Modality::Image)?;
    Ok(t.values().dot(&i.values().t()))
}
