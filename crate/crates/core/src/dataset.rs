//! Synthetic two-modality identity corpora.
//!
//! Every identity owns a latent prototype. Images and captions are noisy
//! random projections of that prototype, one projection matrix per modality.
//! A fraction of identities is blended toward another identity's prototype,
//! which makes their captions retrieve the wrong person at rank 1 and leaves
//! the correct image a few ranks down: the weak positives the trainer boosts.
//!
//! On disk a [`Dataset`] is a directory holding `manifest.jsonl`,
//! `images.f32`, `texts.f32` and `meta.json`. A [`Corpus`] is a directory with
//! one such subdirectory per split.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::binfmt;
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const IMAGES_FILE: &str = "images.f32";
pub const TEXTS_FILE: &str = "texts.f32";
pub const META_FILE: &str = "meta.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One annotated image-caption pair. Feature rows index into the owning
/// dataset's image and text matrices; captions of the same image share an
/// `image_row`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub pair_id: u64,
    pub identity: u64,
    pub image_row: usize,
    pub text_row: usize,
}

/// Missing JSON fields take their values from the reference corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_identities: usize,
    pub images_per_id: usize,
    pub texts_per_image: usize,
    pub p_latent: usize,
    pub p_img: usize,
    pub p_txt: usize,
    pub noise_img: f64,
    pub noise_txt: f64,
    pub confusion_rate: f64,
    pub confusion_lambda: f64,
    pub seed: u64,
    /// Fraction of identities held out for validation (identity-disjoint).
    pub val_fraction: f64,
    /// Fraction of identities held out for testing (identity-disjoint).
    pub test_fraction: f64,
    pub name: Option<String>,
}

impl Default for SynthConfig {
    /// The reference desk-scale corpus: 200 identities, four images each,
    /// 30% of identities blended 45% toward a confuser.
    fn default() -> Self {
        Self {
            n_identities: 200,
            images_per_id: 4,
            texts_per_image: 1,
            p_latent: 16,
            p_img: 48,
            p_txt: 32,
            noise_img: 0.6,
            noise_txt: 0.6,
            confusion_rate: 0.3,
            confusion_lambda: 0.45,
            seed: 1,
            val_fraction: 0.1,
            test_fraction: 0.2,
            name: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_identities", self.n_identities),
            ("images_per_id", self.images_per_id),
            ("texts_per_image", self.texts_per_image),
            ("p_latent", self.p_latent),
            ("p_img", self.p_img),
            ("p_txt", self.p_txt),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [("noise_img", self.noise_img), ("noise_txt", self.noise_txt)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be a non-negative real, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.confusion_rate) {
            return Err(Error::InvalidConfig(format!(
                "confusion_rate must lie in [0, 1], got {}",
                self.confusion_rate
            )));
        }
        if !(0.0..1.0).contains(&self.confusion_lambda) {
            return Err(Error::InvalidConfig(format!(
                "confusion_lambda must lie in [0, 1), got {}",
                self.confusion_lambda
            )));
        }
        for (name, v) in [
            ("val_fraction", self.val_fraction),
            ("test_fraction", self.test_fraction),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must lie in [0, 1), got {v}"
                )));
            }
        }
        self.split_sizes().map(|_| ())
    }

    /// Identity counts per split as (train, val, test).
    pub fn split_sizes(&self) -> Result<(usize, usize, usize)> {
        let n = self.n_identities;
        let count = |f: f64| {
            if f > 0.0 {
                ((n as f64 * f).round() as usize).max(1)
            } else {
                0
            }
        };
        let test = count(self.test_fraction);
        let val = count(self.val_fraction);
        if test == 0 {
            return Err(Error::InvalidConfig("test_fraction must be positive".into()));
        }
        if test + val >= n {
            return Err(Error::InvalidConfig(format!(
                "{n} identities leave no training identities after {val} val and {test} test"
            )));
        }
        Ok((n - val - test, val, test))
    }

    fn corpus_name(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| format!("synth-s{}", self.seed))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    split: Split,
    samples: Vec<Sample>,
    images: Array2<f32>,
    texts: Array2<f32>,
    config: Option<SynthConfig>,
}

impl Dataset {
    /// Validates the structural invariants and builds a dataset.
    pub fn new(
        name: impl Into<String>,
        split: Split,
        samples: Vec<Sample>,
        images: Array2<f32>,
        texts: Array2<f32>,
        config: Option<SynthConfig>,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::malformed("dataset", "no samples"));
        }
        if images.ncols() == 0 || texts.ncols() == 0 {
            return Err(Error::malformed("dataset", "zero-width feature matrix"));
        }
        let mut seen = HashSet::with_capacity(samples.len());
        let mut image_identity: Vec<Option<u64>> = vec![None; images.nrows()];
        for s in &samples {
            if !seen.insert(s.pair_id) {
                return Err(Error::malformed(
                    "manifest",
                    format!("duplicate pair_id {}", s.pair_id),
                ));
            }
            if s.image_row >= images.nrows() {
                return Err(Error::malformed(
                    "manifest",
                    format!(
                        "pair_id {} references image row {} but {} has {} rows",
                        s.pair_id,
                        s.image_row,
                        IMAGES_FILE,
                        images.nrows()
                    ),
                ));
            }
            if s.text_row >= texts.nrows() {
                return Err(Error::malformed(
                    "manifest",
                    format!(
                        "pair_id {} references text row {} but {} has {} rows",
                        s.pair_id,
                        s.text_row,
                        TEXTS_FILE,
                        texts.nrows()
                    ),
                ));
            }
            match image_identity[s.image_row] {
                None => image_identity[s.image_row] = Some(s.identity),
                Some(id) if id != s.identity => {
                    return Err(Error::malformed(
                        "manifest",
                        format!(
                            "image row {} labelled with identities {id} and {}",
                            s.image_row, s.identity
                        ),
                    ))
                }
                Some(_) => {}
            }
        }
        if let Some(row) = image_identity.iter().position(Option::is_none) {
            return Err(Error::malformed(
                "manifest",
                format!("image row {row} is not referenced by any pair"),
            ));
        }
        if images.iter().chain(texts.iter()).any(|v| !v.is_finite()) {
            return Err(Error::malformed("features", "non-finite value"));
        }
        Ok(Self {
            name: name.into(),
            split,
            samples,
            images,
            texts,
            config,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn images(&self) -> ArrayView2<'_, f32> {
        self.images.view()
    }

    pub fn texts(&self) -> ArrayView2<'_, f32> {
        self.texts.view()
    }

    pub fn config(&self) -> Option<&SynthConfig> {
        self.config.as_ref()
    }

    pub fn p_img(&self) -> usize {
        self.images.ncols()
    }

    pub fn p_txt(&self) -> usize {
        self.texts.ncols()
    }

    pub fn n_images(&self) -> usize {
        self.images.nrows()
    }

    pub fn pair_ids(&self) -> Vec<u64> {
        self.samples.iter().map(|s| s.pair_id).collect()
    }

    /// Sorted distinct identity labels.
    pub fn identities(&self) -> Vec<u64> {
        self.samples
            .iter()
            .map(|s| s.identity)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Identity of every image row (the retrieval gallery).
    pub fn image_identities(&self) -> Vec<u64> {
        let mut out = vec![0; self.images.nrows()];
        for s in &self.samples {
            out[s.image_row] = s.identity;
        }
        out
    }

    /// First pair id owning each image row.
    pub fn image_pair_ids(&self) -> Vec<u64> {
        let mut out: Vec<Option<u64>> = vec![None; self.images.nrows()];
        for s in &self.samples {
            out[s.image_row].get_or_insert(s.pair_id);
        }
        out.into_iter().map(|p| p.unwrap_or_default()).collect()
    }

    /// All image rows as f64, in row order.
    pub fn image_matrix(&self) -> Array2<f64> {
        self.images.mapv(f64::from)
    }

    /// Image features of the given rows, as f64.
    pub fn gather_images(&self, rows: impl IntoIterator<Item = usize>) -> Array2<f64> {
        gather(&self.images, rows)
    }

    /// Text features of the given rows, as f64.
    pub fn gather_texts(&self, rows: impl IntoIterator<Item = usize>) -> Array2<f64> {
        gather(&self.texts, rows)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        binfmt::create_dir(dir)?;
        let mut manifest = String::new();
        for s in &self.samples {
            manifest.push_str(&serde_json::to_string(s)?);
            manifest.push('\n');
        }
        binfmt::write_file(&dir.join(MANIFEST_FILE), manifest)?;
        binfmt::write_file(&dir.join(IMAGES_FILE), binfmt::encode_f32(&self.images)?)?;
        binfmt::write_file(&dir.join(TEXTS_FILE), binfmt::encode_f32(&self.texts)?)?;
        let meta = DatasetMeta {
            format_version: FORMAT_VERSION,
            name: self.name.clone(),
            split: self.split,
            p_img: self.p_img(),
            p_txt: self.p_txt(),
            n_samples: self.samples.len(),
            config: self.config.clone(),
        };
        binfmt::write_file(&dir.join(META_FILE), serde_json::to_string_pretty(&meta)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta = binfmt::read_string(&dir.join(META_FILE))?;
        let manifest = binfmt::read_string(&dir.join(MANIFEST_FILE))?;
        let images = binfmt::read_file(&dir.join(IMAGES_FILE))?;
        let texts = binfmt::read_file(&dir.join(TEXTS_FILE))?;
        Self::from_parts(&meta, &manifest, &images, &texts)
    }

    /// Assembles a dataset from the raw contents of its four files.
    pub fn from_parts(meta: &str, manifest: &str, images: &[u8], texts: &[u8]) -> Result<Self> {
        let meta: DatasetMeta = serde_json::from_str(meta)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::UnknownVersion(meta.format_version));
        }
        let samples = parse_manifest(manifest)?;
        if samples.len() != meta.n_samples {
            return Err(Error::malformed(
                "manifest",
                format!("{} rows but meta.json declares {}", samples.len(), meta.n_samples),
            ));
        }
        let images = binfmt::decode_f32(images)?;
        let texts = binfmt::decode_f32(texts)?;
        if images.ncols() != meta.p_img {
            return Err(Error::Dimension {
                expected: meta.p_img,
                found: images.ncols(),
            });
        }
        if texts.ncols() != meta.p_txt {
            return Err(Error::Dimension {
                expected: meta.p_txt,
                found: texts.ncols(),
            });
        }
        Self::new(meta.name, meta.split, samples, images, texts, meta.config)
    }
}

fn gather(m: &Array2<f32>, rows: impl IntoIterator<Item = usize>) -> Array2<f64> {
    let rows: Vec<usize> = rows.into_iter().collect();
    let mut out = Array2::zeros((rows.len(), m.ncols()));
    for (dst, &r) in out.rows_mut().into_iter().zip(&rows) {
        for (d, s) in dst.into_iter().zip(m.row(r)) {
            *d = f64::from(*s);
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetMeta {
    format_version: u32,
    name: String,
    split: Split,
    p_img: usize,
    p_txt: usize,
    n_samples: usize,
    config: Option<SynthConfig>,
}

/// Parses `manifest.jsonl`. Blank lines are skipped; anything else must be
/// a complete sample record.
pub fn parse_manifest(text: &str) -> Result<Vec<Sample>> {
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(n, line)| {
            serde_json::from_str::<Sample>(line)
                .map_err(|e| Error::malformed("manifest", format!("line {}: {e}", n + 1)))
        })
        .collect()
}

/// An identity blended toward another identity's prototype at generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Confusion {
    pub identity: u64,
    pub confuser: u64,
}

/// Identity-disjoint train/val/test splits drawn from one generator run.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Dataset,
    /// Which identities were blended (not persisted).
    pub confusions: Vec<Confusion>,
}

impl Corpus {
    pub fn splits(&self) -> impl Iterator<Item = &Dataset> {
        std::iter::once(&self.train)
            .chain(self.val.as_ref())
            .chain(std::iter::once(&self.test))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for ds in self.splits() {
            ds.save(&dir.join(ds.split().as_str()))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let train = Dataset::load(&dir.join("train"))?;
        let val_dir = dir.join("val");
        let val = if val_dir.exists() {
            Some(Dataset::load(&val_dir)?)
        } else {
            None
        };
        let test = Dataset::load(&dir.join("test"))?;
        for (ds, want) in [(&train, Split::Train), (&test, Split::Test)] {
            if ds.split() != want {
                return Err(Error::malformed(
                    "corpus",
                    format!("{want} directory holds a {} split", ds.split()),
                ));
            }
        }
        Ok(Self {
            train,
            val,
            test,
            confusions: Vec::new(),
        })
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || scale * rng.sample::<f64, _>(StandardNormal))
}

/// Draws a corpus. Pure function of `config` (including its seed).
///
/// Identities `0..n_train` form the training split, the next `n_val` the
/// validation split and the rest the test split. Confusers are drawn from
/// the same split so that test-time galleries contain them.
pub fn generate(config: &SynthConfig) -> Result<Corpus> {
    config.validate()?;
    let (n_train, n_val, n_test) = config.split_sizes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let latent_scale = 1.0 / (config.p_latent as f64).sqrt();
    let proj_img = normal_matrix(&mut rng, config.p_img, config.p_latent, latent_scale);
    let proj_txt = normal_matrix(&mut rng, config.p_txt, config.p_latent, latent_scale);
    let base = normal_matrix(&mut rng, config.n_identities, config.p_latent, 1.0);
    let mut prototypes = base.clone();

    let ranges = [
        (Split::Train, 0..n_train),
        (Split::Val, n_train..n_train + n_val),
        (Split::Test, n_train + n_val..config.n_identities),
    ];

    let mut confusions = Vec::new();
    let lambda = config.confusion_lambda;
    for (_, range) in &ranges {
        let mut members: Vec<usize> = range.clone().collect();
        if members.len() < 2 {
            continue;
        }
        let n_confused = (config.confusion_rate * members.len() as f64).round() as usize;
        members.shuffle(&mut rng);
        for &id in members.iter().take(n_confused) {
            let mut other = rng.random_range(range.start..range.end - 1);
            if other >= id {
                other += 1;
            }
            let blended = &base.row(id) * (1.0 - lambda) + &base.row(other) * lambda;
            prototypes.row_mut(id).assign(&blended);
            confusions.push(Confusion {
                identity: id as u64,
                confuser: other as u64,
            });
        }
    }
    confusions.sort_by_key(|c| c.identity);

    let name = config.corpus_name();
    let mut next_pair_id = 0u64;
    let mut build = |split: Split, range: std::ops::Range<usize>, rng: &mut ChaCha8Rng| {
        let n_images = range.len() * config.images_per_id;
        let n_texts = n_images * config.texts_per_image;
        let mut images = Array2::<f32>::zeros((n_images, config.p_img));
        let mut texts = Array2::<f32>::zeros((n_texts, config.p_txt));
        let mut samples = Vec::with_capacity(n_texts);
        let mut image_row = 0;
        let mut text_row = 0;
        for id in range {
            let z = prototypes.row(id);
            let clean_img = proj_img.dot(&z);
            let clean_txt = proj_txt.dot(&z);
            for _ in 0..config.images_per_id {
                for (dst, c) in images.row_mut(image_row).iter_mut().zip(&clean_img) {
                    *dst = (c + config.noise_img * rng.sample::<f64, _>(StandardNormal)) as f32;
                }
                for _ in 0..config.texts_per_image {
                    for (dst, c) in texts.row_mut(text_row).iter_mut().zip(&clean_txt) {
                        *dst = (c + config.noise_txt * rng.sample::<f64, _>(StandardNormal)) as f32;
                    }
                    samples.push(Sample {
                        pair_id: next_pair_id,
                        identity: id as u64,
                        image_row,
                        text_row,
                    });
                    next_pair_id += 1;
                    text_row += 1;
                }
                image_row += 1;
            }
        }
        Dataset::new(name.clone(), split, samples, images, texts, Some(config.clone()))
    };

    let [(_, train_ids), (_, val_ids), (_, test_ids)] = ranges;
    let train = build(Split::Train, train_ids, &mut rng)?;
    let val = if n_val > 0 {
        Some(build(Split::Val, val_ids, &mut rng)?)
    } else {
        None
    };
    let test = build(Split::Test, test_ids, &mut rng)?;
    debug_assert_eq!(test.identities().len(), n_test);
    Ok(Corpus {
        train,
        val,
        test,
        confusions,
    })
}

/// Per-identity mean image feature, keyed by identity.
pub fn identity_centroids(ds: &Dataset) -> HashMap<u64, Vec<f64>> {
    let mut sums: HashMap<u64, (Vec<f64>, usize)> = HashMap::new();
    let ids = ds.image_identities();
    for (row, id) in ids.iter().enumerate() {
        let entry = sums.entry(*id).or_insert_with(|| (vec![0.0; ds.p_img()], 0));
        for (acc, v) in entry.0.iter_mut().zip(ds.images.row(row)) {
            *acc += f64::from(*v);
        }
        entry.1 += 1;
    }
    sums.into_iter()
        .map(|(id, (sum, n))| (id, sum.into_iter().map(|v| v / n as f64).collect()))
        .collect()
}
