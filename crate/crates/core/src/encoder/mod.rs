//! Two-layer MLP towers mapping raw modality features onto the unit sphere,
//! plus the identity classifier shared by both modalities.
//!
//! `forward` computes `normalize(W2 · relu(W1 · x + b1) + b2)` row by row and
//! keeps the intermediate activations; `backward` turns a gradient with
//! respect to the normalized embeddings into gradients for one tower.

mod adam;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use adam::{adam_step, AdamConfig, AdamState};

/// Tolerance on unit row norms.
pub const NORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

/// One modality's MLP. Also used, shape for shape, to hold its gradient and
/// Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Tower {
    /// hidden x input
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// embed x hidden
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Tower {
    pub fn zeros(input: usize, hidden: usize, embed: usize) -> Self {
        Self {
            w1: Array2::zeros((hidden, input)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((embed, hidden)),
            b2: Array1::zeros(embed),
        }
    }

    fn random(rng: &mut ChaCha8Rng, input: usize, hidden: usize, embed: usize) -> Self {
        let s1 = (2.0 / input as f64).sqrt();
        let s2 = (1.0 / hidden as f64).sqrt();
        Self {
            w1: Array2::from_shape_simple_fn((hidden, input), || s1 * rng.sample::<f64, _>(StandardNormal)),
            // A small positive bias keeps units alive, and a random output
            // bias keeps rows with every unit off away from the origin.
            b1: Array1::from_elem(hidden, 0.1),
            w2: Array2::from_shape_simple_fn((embed, hidden), || s2 * rng.sample::<f64, _>(StandardNormal)),
            b2: Array1::from_shape_simple_fn(embed, || 0.1 * rng.sample::<f64, _>(StandardNormal)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.w2.nrows()
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.hidden_dim(), self.embed_dim())
    }
}

/// Trainable state of the dual encoder. `tau` is a fixed hyperparameter and
/// is carried here so that a checkpoint is self-describing.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub image: Tower,
    pub text: Tower,
    /// n_classes x embed
    pub classifier: Array2<f64>,
    pub tau: f64,
}

/// Gradient (or optimizer moment) for every array in [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub image: Tower,
    pub text: Tower,
    pub classifier: Array2<f64>,
}

/// Parameter names in serialization order.
pub const PARAM_NAMES: [&str; 9] = [
    "image.w1",
    "image.b1",
    "image.w2",
    "image.b2",
    "text.w1",
    "text.b1",
    "text.w2",
    "text.b2",
    "classifier",
];

fn slice<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("parameters are kept in standard layout")
}

fn slice_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are kept in standard layout")
}

macro_rules! tensor_views {
    () => {
        /// Flat views of every array, in [`PARAM_NAMES`] order.
        pub fn tensors(&self) -> [&[f64]; 9] {
            [
                slice(&self.image.w1),
                slice(&self.image.b1),
                slice(&self.image.w2),
                slice(&self.image.b2),
                slice(&self.text.w1),
                slice(&self.text.b1),
                slice(&self.text.w2),
                slice(&self.text.b2),
                slice(&self.classifier),
            ]
        }

        pub fn tensors_mut(&mut self) -> [&mut [f64]; 9] {
            [
                slice_mut(&mut self.image.w1),
                slice_mut(&mut self.image.b1),
                slice_mut(&mut self.image.w2),
                slice_mut(&mut self.image.b2),
                slice_mut(&mut self.text.w1),
                slice_mut(&mut self.text.b1),
                slice_mut(&mut self.text.w2),
                slice_mut(&mut self.text.b2),
                slice_mut(&mut self.classifier),
            ]
        }

        pub fn shapes(&self) -> [Vec<usize>; 9] {
            [
                self.image.w1.shape().to_vec(),
                self.image.b1.shape().to_vec(),
                self.image.w2.shape().to_vec(),
                self.image.b2.shape().to_vec(),
                self.text.w1.shape().to_vec(),
                self.text.b1.shape().to_vec(),
                self.text.w2.shape().to_vec(),
                self.text.b2.shape().to_vec(),
                self.classifier.shape().to_vec(),
            ]
        }

        pub fn n_values(&self) -> usize {
            self.tensors().iter().map(|t| t.len()).sum()
        }

        /// All values concatenated in [`PARAM_NAMES`] order.
        pub fn flatten(&self) -> Vec<f64> {
            self.tensors().concat()
        }

        /// Overwrites every array from a flat buffer in [`PARAM_NAMES`] order.
        pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
            if flat.len() != self.n_values() {
                return Err(Error::Shape(format!(
                    "expected {} parameter values, found {}",
                    self.n_values(),
                    flat.len()
                )));
            }
            let mut at = 0;
            for t in self.tensors_mut() {
                let n = t.len();
                t.copy_from_slice(&flat[at..at + n]);
                at += n;
            }
            Ok(())
        }
    };
}

impl EncoderParams {
    /// Randomly initialized encoder (He-scaled first layer).
    pub fn init(dims: &EncoderDims, tau: f64, seed: u64) -> Result<Self> {
        dims.validate()?;
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::Temperature(tau));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = Tower::random(&mut rng, dims.p_img, dims.hidden, dims.embed);
        let text = Tower::random(&mut rng, dims.p_txt, dims.hidden, dims.embed);
        let sc = (1.0 / dims.embed as f64).sqrt();
        let classifier = Array2::from_shape_simple_fn((dims.n_classes, dims.embed), || {
            sc * rng.sample::<f64, _>(StandardNormal)
        });
        Ok(Self {
            image,
            text,
            classifier,
            tau,
        })
    }

    pub fn zeros(dims: &EncoderDims, tau: f64) -> Self {
        Self {
            image: Tower::zeros(dims.p_img, dims.hidden, dims.embed),
            text: Tower::zeros(dims.p_txt, dims.hidden, dims.embed),
            classifier: Array2::zeros((dims.n_classes, dims.embed)),
            tau,
        }
    }

    pub fn dims(&self) -> EncoderDims {
        EncoderDims {
            p_img: self.image.input_dim(),
            p_txt: self.text.input_dim(),
            hidden: self.image.hidden_dim(),
            embed: self.image.embed_dim(),
            n_classes: self.classifier.nrows(),
        }
    }

    pub fn tower(&self, modality: Modality) -> &Tower {
        match modality {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }

    pub fn tower_mut(&mut self, modality: Modality) -> &mut Tower {
        match modality {
            Modality::Image => &mut self.image,
            Modality::Text => &mut self.text,
        }
    }

    pub fn zero_grad(&self) -> GradientSet {
        GradientSet {
            image: self.image.zeros_like(),
            text: self.text.zeros_like(),
            classifier: Array2::zeros(self.classifier.raw_dim()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    tensor_views!();
}

impl GradientSet {
    pub fn tower_mut(&mut self, modality: Modality) -> &mut Tower {
        match modality {
            Modality::Image => &mut self.image,
            Modality::Text => &mut self.text,
        }
    }

    tensor_views!();
}

/// Architecture sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub p_img: usize,
    pub p_txt: usize,
    pub hidden: usize,
    pub embed: usize,
    pub n_classes: usize,
}

impl EncoderDims {
    pub fn validate(&self) -> Result<()> {
        if [self.p_img, self.p_txt, self.hidden, self.embed, self.n_classes].contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "encoder dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Row-normalized embeddings of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    values: Array2<f64>,
    modality: Modality,
}

impl EmbeddingMatrix {
    /// L2-normalizes every row of `values`.
    pub fn normalize(mut values: Array2<f64>, modality: Modality) -> Result<Self> {
        for (i, mut row) in values.rows_mut().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if !(norm.is_finite() && norm > 0.0) {
                return Err(Error::DegenerateEmbedding { row: i });
            }
            row /= norm;
        }
        Ok(Self { values, modality })
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// Rows concatenated with `other`'s (same modality and width required).
    pub fn concat(&self, other: &EmbeddingMatrix) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        let values = ndarray::concatenate(Axis(0), &[self.values.view(), other.values.view()])
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(Self {
            values,
            modality: self.modality,
        })
    }
}

/// Activations kept by [`forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    modality: Modality,
    input: Array2<f64>,
    pre_hidden: Array2<f64>,
    hidden: Array2<f64>,
    norms: Array1<f64>,
    output: Array2<f64>,
}

impl ForwardCache {
    pub fn modality(&self) -> Modality {
        self.modality
    }
}

pub fn forward(
    params: &EncoderParams,
    raw: ArrayView2<'_, f64>,
    modality: Modality,
) -> Result<(EmbeddingMatrix, ForwardCache)> {
    let tower = params.tower(modality);
    if raw.ncols() != tower.input_dim() {
        return Err(Error::Dimension {
            expected: tower.input_dim(),
            found: raw.ncols(),
        });
    }
    let pre_hidden = raw.dot(&tower.w1.t()) + &tower.b1;
    let hidden = pre_hidden.mapv(|v| v.max(0.0));
    let projected = hidden.dot(&tower.w2.t()) + &tower.b2;
    let mut norms = Array1::zeros(projected.nrows());
    let mut output = projected;
    for (i, mut row) in output.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::DegenerateEmbedding { row: i });
        }
        row /= norm;
        norms[i] = norm;
    }
    let embedding = EmbeddingMatrix {
        values: output.clone(),
        modality,
    };
    let cache = ForwardCache {
        modality,
        input: raw.to_owned(),
        pre_hidden,
        hidden,
        norms,
        output,
    };
    Ok((embedding, cache))
}

/// Embeds without keeping activations.
pub fn encode(
    params: &EncoderParams,
    raw: ArrayView2<'_, f64>,
    modality: Modality,
) -> Result<EmbeddingMatrix> {
    forward(params, raw, modality).map(|(e, _)| e)
}

/// Gradient of one tower given `d loss / d embeddings`.
///
/// The normalization Jacobian is `(I - phi phi^T) / |h|`, so any component of
/// `upstream` along the embedding itself contributes nothing.
pub fn backward(
    params: &EncoderParams,
    cache: &ForwardCache,
    upstream: ArrayView2<'_, f64>,
) -> Result<Tower> {
    let tower = params.tower(cache.modality);
    if upstream.dim() != cache.output.dim() {
        return Err(Error::Shape(format!(
            "upstream gradient is {:?}, cached embeddings are {:?}",
            upstream.dim(),
            cache.output.dim()
        )));
    }
    if cache.input.ncols() != tower.input_dim()
        || cache.hidden.ncols() != tower.hidden_dim()
        || cache.output.ncols() != tower.embed_dim()
    {
        return Err(Error::Shape(
            "forward cache does not match encoder parameters".into(),
        ));
    }

    let mut d_projected = upstream.to_owned();
    for ((mut g, phi), norm) in d_projected
        .rows_mut()
        .into_iter()
        .zip(cache.output.rows())
        .zip(&cache.norms)
    {
        let radial = g.dot(&phi);
        g.scaled_add(-radial, &phi);
        g /= *norm;
    }

    let w2 = d_projected.t().dot(&cache.hidden);
    let b2 = d_projected.sum_axis(Axis(0));
    let mut d_pre = d_projected.dot(&tower.w2);
    d_pre.zip_mut_with(&cache.pre_hidden, |g, &z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
    let w1 = d_pre.t().dot(&cache.input);
    let b1 = d_pre.sum_axis(Axis(0));
    Ok(Tower { w1, b1, w2, b2 })
}
