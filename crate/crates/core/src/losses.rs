//! Boosting-aware training objectives.
//!
//! Every loss takes row-normalized image and text embeddings of one batch
//! (row `i` of each is the annotated pair `i`) and a per-pair weight vector,
//! and returns the scalar loss with its exact gradient. A weight of 1
//! everywhere reproduces the unweighted loss bit for bit: the weight only
//! ever enters as a multiplicative factor on a row's term.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// `log(q + eps)` guard for the zero entries of the SDM label distribution.
pub const DEFAULT_SDM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_img: Array2<f64>,
    pub grad_txt: Array2<f64>,
    /// Present for losses that read the identity classifier.
    pub grad_classifier: Option<Array2<f64>>,
}

impl LossOutput {
    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.grad_img.iter().all(|v| v.is_finite())
            && self.grad_txt.iter().all(|v| v.is_finite())
            && self
                .grad_classifier
                .as_ref()
                .is_none_or(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Itc,
    Id,
    Sdm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub loss: LossKind,
    pub coefficient: f64,
}

fn log_softmax(row: ArrayView1<'_, f64>) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = row.iter().map(|v| v - max).collect();
    let lse = shifted.iter().map(|v| v.exp()).sum::<f64>().ln();
    shifted.into_iter().map(|v| v - lse).collect()
}

/// Weighted cross-entropy over logit rows: `sum_i w_i * -log softmax(row_i)[target_i]`.
///
/// Returns the sum (no batch normalization) and its gradient with respect
/// to the logits, `w_i * (softmax(row_i) - onehot(target_i))`.
pub fn weighted_cross_entropy(
    logits: ArrayView2<'_, f64>,
    targets: &[usize],
    weights: &[f64],
) -> (f64, Array2<f64>) {
    debug_assert_eq!(logits.nrows(), targets.len());
    debug_assert_eq!(logits.nrows(), weights.len());
    let mut value = 0.0;
    let mut grad = Array2::zeros(logits.raw_dim());
    for (i, row) in logits.rows().into_iter().enumerate() {
        let logp = log_softmax(row);
        let w = weights[i];
        value += w * -logp[targets[i]];
        let mut g = grad.row_mut(i);
        for (j, lp) in logp.iter().enumerate() {
            g[j] = w * lp.exp();
        }
        g[targets[i]] -= w;
    }
    (value, grad)
}

/// Weighted row-wise KL divergence `sum_i w_i sum_j p_ij (log p_ij - log(q_ij + eps))`
/// where `p_i = softmax(logits_i)`. Terms with `p_ij == 0` contribute 0.
///
/// Returns the sum and its gradient with respect to the logits.
pub fn weighted_kl(
    logits: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    weights: &[f64],
    eps: f64,
) -> (f64, Array2<f64>) {
    debug_assert_eq!(logits.dim(), target.dim());
    let mut value = 0.0;
    let mut grad = Array2::zeros(logits.raw_dim());
    for (i, row) in logits.rows().into_iter().enumerate() {
        let logp = log_softmax(row);
        let w = weights[i];
        let p: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
        let ratio: Vec<f64> = logp
            .iter()
            .zip(target.row(i))
            .zip(&p)
            .map(|((lp, q), p)| if *p == 0.0 { 0.0 } else { lp - (q + eps).ln() })
            .collect();
        let row_kl: f64 = p.iter().zip(&ratio).map(|(p, r)| p * r).sum();
        value += w * row_kl;
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            *g = w * p[j] * (ratio[j] - row_kl);
        }
    }
    (value, grad)
}

fn check_batch(img: ArrayView2<'_, f64>, txt: ArrayView2<'_, f64>, weights: &[f64]) -> Result<usize> {
    if img.dim() != txt.dim() {
        return Err(Error::Shape(format!(
            "image batch {:?} vs text batch {:?}",
            img.dim(),
            txt.dim()
        )));
    }
    let b = img.nrows();
    if weights.len() != b {
        return Err(Error::Shape(format!(
            "{} weights for a batch of {b}",
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::InvalidConfig(format!("invalid pair weight {w}")));
    }
    Ok(b)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(Error::Temperature(tau))
    }
}

/// Splits a gradient on the similarity-logit matrix `S[i][j] = sim(I_i, T_j) / tau`
/// into gradients on the image and text embeddings.
fn similarity_backward(
    grad_logits: &Array2<f64>,
    img: ArrayView2<'_, f64>,
    txt: ArrayView2<'_, f64>,
    tau: f64,
) -> (Array2<f64>, Array2<f64>) {
    let g = grad_logits / tau;
    (g.dot(&txt), g.t().dot(&img))
}

/// Bidirectional image-text contrastive loss with per-pair boosting weights.
///
/// `L_t2i = -(1/B) sum_i w_i log softmax_j(sim(I_j, T_i)/tau)[i]`, `L_i2t`
/// likewise over texts, and the result is their mean.
pub fn boosted_itc(
    img: ArrayView2<'_, f64>,
    txt: ArrayView2<'_, f64>,
    weights: &[f64],
    tau: f64,
) -> Result<LossOutput> {
    check_tau(tau)?;
    let b = check_batch(img, txt, weights)?;
    let logits = img.dot(&txt.t()) / tau;
    let diagonal: Vec<usize> = (0..b).collect();
    let (i2t, g_i2t) = weighted_cross_entropy(logits.view(), &diagonal, weights);
    let (t2i, g_t2i) = weighted_cross_entropy(logits.t(), &diagonal, weights);
    let n = b as f64;
    let value = (t2i / n + i2t / n) / 2.0;
    let grad_logits = (g_i2t + g_t2i.t()) * (0.5 / n);
    let (grad_img, grad_txt) = similarity_backward(&grad_logits, img, txt, tau);
    Ok(LossOutput {
        value,
        grad_img,
        grad_txt,
        grad_classifier: None,
    })
}

/// Identity-classification loss on both modalities through the shared
/// classifier: `sum_i w_i * -log softmax(W phi_i)[y_i]`, image side plus text side.
pub fn boosted_id(
    img: ArrayView2<'_, f64>,
    txt: ArrayView2<'_, f64>,
    labels: &[usize],
    weights: &[f64],
    classifier: ArrayView2<'_, f64>,
) -> Result<LossOutput> {
    let b = check_batch(img, txt, weights)?;
    if labels.len() != b {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    if classifier.ncols() != img.ncols() {
        return Err(Error::Dimension {
            expected: img.ncols(),
            found: classifier.ncols(),
        });
    }
    let classes = classifier.nrows();
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let (v_img, g_img) = weighted_cross_entropy(img.dot(&classifier.t()).view(), labels, weights);
    let (v_txt, g_txt) = weighted_cross_entropy(txt.dot(&classifier.t()).view(), labels, weights);
    let grad_classifier = g_img.t().dot(&img) + g_txt.t().dot(&txt);
    Ok(LossOutput {
        value: v_img + v_txt,
        grad_img: g_img.dot(&classifier),
        grad_txt: g_txt.dot(&classifier),
        grad_classifier: Some(grad_classifier),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SdmDirection {
    /// Mean of image-to-text and text-to-image matching.
    Both,
    ImageToText,
}

/// Row-normalized identity-match matrix `q_ij = 1[y_i = y_j] / #{n : y_n = y_i}`.
pub fn label_distribution(identities: &[u64]) -> Array2<f64> {
    let b = identities.len();
    let mut q = Array2::zeros((b, b));
    for (i, yi) in identities.iter().enumerate() {
        let count = identities.iter().filter(|y| *y == yi).count() as f64;
        for (j, yj) in identities.iter().enumerate() {
            if yi == yj {
                q[[i, j]] = 1.0 / count;
            }
        }
    }
    q
}

/// Similarity-distribution matching with per-pair boosting weights, in both
/// directions and averaged.
pub fn boosted_sdm(
    img: ArrayView2<'_, f64>,
    txt: ArrayView2<'_, f64>,
    identities: &[u64],
    weights: &[f64],
    tau: f64,
    eps: f64,
) -> Result<LossOutput> {
    boosted_sdm_directed(img, txt, identities, weights, tau, eps, SdmDirection::Both)
}

pub fn boosted_sdm_directed(
    img: ArrayView2<'_, f64>,
    txt: ArrayView2<'_, f64>,
    identities: &[u64],
    weights: &[f64],
    tau: f64,
    eps: f64,
    direction: SdmDirection,
) -> Result<LossOutput> {
    check_tau(tau)?;
    let b = check_batch(img, txt, weights)?;
    if identities.len() != b {
        return Err(Error::Shape(format!(
            "{} identities for a batch of {b}",
            identities.len()
        )));
    }
    if !(eps.is_finite() && eps >= 0.0) {
        return Err(Error::InvalidConfig(format!("invalid SDM eps {eps}")));
    }
    // Every row's own pair shares its identity, so no row of q is empty.
    let q = label_distribution(identities);
    let logits = img.dot(&txt.t()) / tau;
    let (i2t, g_i2t) = weighted_kl(logits.view(), q.view(), weights, eps);
    let (value, grad_logits) = match direction {
        SdmDirection::ImageToText => (i2t, g_i2t),
        SdmDirection::Both => {
            let (t2i, g_t2i) = weighted_kl(logits.t(), q.view(), weights, eps);
            ((i2t + t2i) / 2.0, (g_i2t + g_t2i.t()) * 0.5)
        }
    };
    let (grad_img, grad_txt) = similarity_backward(&grad_logits, img, txt, tau);
    Ok(LossOutput {
        value,
        grad_img,
        grad_txt,
        grad_classifier: None,
    })
}

/// Coefficient-weighted sum of loss values and gradients.
pub fn combined_objective(terms: &[(LossOutput, f64)]) -> Result<LossOutput> {
    let (first, _) = terms
        .first()
        .ok_or_else(|| Error::InvalidConfig("objective has no loss terms".into()))?;
    let mut out = LossOutput {
        value: 0.0,
        grad_img: Array2::zeros(first.grad_img.raw_dim()),
        grad_txt: Array2::zeros(first.grad_txt.raw_dim()),
        grad_classifier: None,
    };
    for (term, c) in terms {
        if term.grad_img.dim() != out.grad_img.dim() || term.grad_txt.dim() != out.grad_txt.dim() {
            return Err(Error::Shape(format!(
                "loss term gradients {:?}/{:?} vs {:?}/{:?}",
                term.grad_img.dim(),
                term.grad_txt.dim(),
                out.grad_img.dim(),
                out.grad_txt.dim()
            )));
        }
        out.value += c * term.value;
        out.grad_img.scaled_add(*c, &term.grad_img);
        out.grad_txt.scaled_add(*c, &term.grad_txt);
        if let Some(g) = &term.grad_classifier {
            match &mut out.grad_classifier {
                Some(acc) if acc.dim() == g.dim() => acc.scaled_add(*c, g),
                Some(acc) => {
                    return Err(Error::Shape(format!(
                        "classifier gradients {:?} vs {:?}",
                        g.dim(),
                        acc.dim()
                    )))
                }
                None => out.grad_classifier = Some(g * *c),
            }
        }
    }
    Ok(out)
}
