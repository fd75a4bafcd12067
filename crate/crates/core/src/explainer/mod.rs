//! Per-class concept explainers.
//!
//! Each class `k` owns a bias-free pointwise encoder (`D → Q`), a bias-free
//! pointwise transpose-convolution decoder (`Q → D`) and a bank of `C`
//! concept vectors in the `Q`-dimensional embedding space. A feature map is
//! encoded, every location is compared with every concept by inverse
//! Euclidean distance, locations close to a concept's best match are
//! replaced by that concept, and the decoded map is pushed through the rest
//! of the black-box. Zeroing a concept's locations and re-scoring gives its
//! signed relevance.

mod loss;
mod train;

pub use loss::{
    loss_ce, loss_diversity, loss_relevance_terms, loss_triplet, objective, total_loss, Batch, LossScope, LossTerms,
    ModuleGrad, Objective, TripletOutcome,
};
pub use train::{batch_kind, train_explainer, train_on_features, BatchKind, EpochLog, ExplainerConfig, TrainLog};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::blackbox::BlackBox;
use crate::container::{Reader, Writer};
use crate::error::{Error, Result};
use crate::layers::{self, LayerKind, LayerParams};
use crate::seeding;
use crate::tensor::{argmax, squared_distance, Tensor};

pub const MAGIC: &[u8; 8] = b"PACEEXP1";

/// Hyperparameters shared by all class modules.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Hyper {
    /// Presence threshold in percent of the per-concept maximum similarity.
    pub tau: f64,
    /// Stabilizer in `1 / (epsilon + distance)`.
    pub epsilon: f64,
    /// Triplet margin.
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub omega: f64,
    /// Pure batches per mixed batch.
    pub rho: usize,
    /// Use the one-hot black-box label instead of its soft probabilities as
    /// the cross-entropy target.
    pub one_hot_targets: bool,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            tau: 95.0,
            epsilon: 1e-6,
            alpha: 1.0,
            beta: 100.0,
            gamma: 1000.0,
            delta: 1.0,
            omega: 1.0,
            rho: 5,
            one_hot_targets: false,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.tau > 0.0 && self.tau <= 100.0, "tau must lie in (0, 100]"),
            (self.epsilon > 0.0, "epsilon must be positive"),
            (self.alpha >= 0.0, "alpha must be non-negative"),
            (self.beta >= 0.0 && self.gamma >= 0.0, "loss weights must be non-negative"),
            (self.delta >= 0.0 && self.omega >= 0.0, "loss weights must be non-negative"),
            (self.rho >= 1, "rho must be at least 1"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config((*msg).to_string())),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassExplainer {
    pub encoder: LayerParams,
    pub decoder: LayerParams,
    /// `(C, Q)`, one concept per row.
    pub concepts: Tensor,
}

impl ClassExplainer {
    pub fn new(encoder: LayerParams, decoder: LayerParams, concepts: Tensor) -> Result<Self> {
        let (d, q) = match encoder.kind {
            LayerKind::PointwiseConv { in_channels, out_channels } => (in_channels, out_channels),
            other => return Err(Error::Shape(format!("encoder must be a pointwise conv, got {other:?}"))),
        };
        if decoder.kind != (LayerKind::PointwiseTransposeConv { in_channels: q, out_channels: d }) {
            return Err(Error::Shape(format!("decoder {:?} does not invert a {d}→{q} encoder", decoder.kind)));
        }
        match concepts.shape() {
            &[c, qq] if qq == q && c > 0 => {}
            s => return Err(Error::Shape(format!("concepts must be (C, {q}), got {s:?}"))),
        }
        Ok(ClassExplainer { encoder, decoder, concepts })
    }

    /// Fan-in scaled normal encoder/decoder weights and concept vectors drawn
    /// from `N(0, 0.1²)`.
    pub fn init<R: Rng + ?Sized>(channels: usize, dim: usize, num_concepts: usize, rng: &mut R) -> Result<Self> {
        let encoder =
            LayerParams::init(LayerKind::PointwiseConv { in_channels: channels, out_channels: dim }, 1.0, rng)?;
        let decoder = LayerParams::init(
            LayerKind::PointwiseTransposeConv { in_channels: dim, out_channels: channels },
            1.0,
            rng,
        )?;
        let normal = Normal::new(0.0, 0.1).expect("positive std");
        let data = (0..num_concepts * dim).map(|_| normal.sample(rng)).collect();
        ClassExplainer::new(encoder, decoder, Tensor::new(vec![num_concepts, dim], data)?)
    }

    pub fn num_concepts(&self) -> usize {
        self.concepts.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.concepts.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.encoder.weights.shape()[0]
    }

    pub fn concept(&self, j: usize) -> &[f64] {
        self.concepts.row(j, self.dim())
    }
}

/// The `K` class modules plus their shared hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ExplainerBank {
    pub modules: Vec<ClassExplainer>,
    pub hyper: Hyper,
}

impl ExplainerBank {
    pub fn init(
        num_classes: usize,
        channels: usize,
        dim: usize,
        num_concepts: usize,
        hyper: Hyper,
        seed: u64,
    ) -> Result<Self> {
        hyper.validate()?;
        let mut rng = seeding::rng(seed);
        let modules = (0..num_classes)
            .map(|_| ClassExplainer::init(channels, dim, num_concepts, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(ExplainerBank { modules, hyper })
    }

    pub fn num_classes(&self) -> usize {
        self.modules.len()
    }

    /// Explainer probabilities `P`: entry `k` is `p_k` from module `k`.
    pub fn predict_probs(&self, model: &BlackBox, fmap: &Tensor) -> Result<Vec<f64>> {
        self.modules
            .iter()
            .enumerate()
            .map(|(k, exp)| {
                let e = encode(exp, fmap)?;
                let stack = similarity(exp, &e, &self.hyper)?;
                let cmap = concept_map(exp, &e, &stack)?;
                Ok(reconstruct_and_score(model, exp, &cmap.map, k)?.1)
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.modules
            .iter_mut()
            .flat_map(|m| [&mut m.encoder.weights, &mut m.decoder.weights, &mut m.concepts])
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC);
        let first = &self.modules[0];
        for v in [self.num_classes(), first.num_concepts(), first.dim(), first.channels()] {
            w.u32(v as u32);
        }
        let h = &self.hyper;
        for v in [h.tau, h.epsilon, h.alpha, h.beta, h.gamma, h.delta, h.omega] {
            w.f64(v);
        }
        w.u32(h.rho as u32);
        w.u32(u32::from(h.one_hot_targets));
        for m in &self.modules {
            w.tensor(&m.encoder.weights);
            w.tensor(&m.decoder.weights);
            w.tensor(&m.concepts);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, MAGIC)?;
        let k = r.u32()? as usize;
        let c = r.u32()? as usize;
        let q = r.u32()? as usize;
        let d = r.u32()? as usize;
        let hyper = Hyper {
            tau: r.f64()?,
            epsilon: r.f64()?,
            alpha: r.f64()?,
            beta: r.f64()?,
            gamma: r.f64()?,
            delta: r.f64()?,
            omega: r.f64()?,
            rho: r.u32()? as usize,
            one_hot_targets: r.u32()? != 0,
        };
        hyper.validate().map_err(|e| Error::Format(e.to_string()))?;
        let mut modules = Vec::with_capacity(k.min(1024));
        for _ in 0..k {
            let enc = LayerParams::new(
                LayerKind::PointwiseConv { in_channels: d, out_channels: q },
                r.tensor()?,
                Tensor::empty(),
            );
            let dec = LayerParams::new(
                LayerKind::PointwiseTransposeConv { in_channels: q, out_channels: d },
                r.tensor()?,
                Tensor::empty(),
            );
            let concepts = r.tensor()?;
            if concepts.shape() != [c, q] {
                return Err(Error::Format(format!("concept bank shape {:?}", concepts.shape())));
            }
            let module = ClassExplainer::new(enc?, dec?, concepts).map_err(|e| Error::Format(e.to_string()))?;
            modules.push(module);
        }
        r.finish()?;
        if modules.is_empty() {
            return Err(Error::Format("explainer bank without modules".into()));
        }
        Ok(ExplainerBank { modules, hyper })
    }
}

/// Per-concept similarity maps and presence masks over the `H × W` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityStack {
    pub height: usize,
    pub width: usize,
    /// `similarity[j][l * width + m]`.
    pub similarity: Vec<Vec<f64>>,
    pub presence: Vec<Vec<bool>>,
}

impl SimilarityStack {
    pub fn is_present_anywhere(&self, j: usize) -> bool {
        self.presence[j].iter().any(|&p| p)
    }
}

/// A concept map together with which concept (if any) replaced each location.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptMap {
    pub map: Tensor,
    pub assignment: Vec<Option<usize>>,
}

pub fn encode(exp: &ClassExplainer, fmap: &Tensor) -> Result<Tensor> {
    layers::apply(&exp.encoder, fmap)
}

pub fn decode(exp: &ClassExplainer, embedding: &Tensor) -> Result<Tensor> {
    layers::apply(&exp.decoder, embedding)
}

/// `S_j[n] = 1 / (ε + ‖E[n] − c_j‖)`; concept `j` is present at `n` when
/// `S_j[n] ≥ (τ / 100) · max_n S_j[n]`.
pub fn similarity(exp: &ClassExplainer, embedding: &Tensor, hyper: &Hyper) -> Result<SimilarityStack> {
    let (h, w, q) = embedding.spatial_dims()?;
    if q != exp.dim() {
        return Err(Error::Shape(format!("embedding depth {q}, concepts have {}", exp.dim())));
    }
    let n = h * w;
    let mut sims = Vec::with_capacity(exp.num_concepts());
    let mut presence = Vec::with_capacity(exp.num_concepts());
    for j in 0..exp.num_concepts() {
        let c = exp.concept(j);
        let s: Vec<f64> =
            (0..n).map(|i| 1.0 / (hyper.epsilon + squared_distance(embedding.row(i, q), c).sqrt())).collect();
        let threshold = hyper.tau / 100.0 * s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        presence.push(s.iter().map(|&v| v >= threshold).collect());
        sims.push(s);
    }
    Ok(SimilarityStack { height: h, width: w, similarity: sims, presence })
}

/// Replaces every location where at least one concept is present by the
/// present concept of highest similarity (lowest index on ties).
pub fn concept_map(exp: &ClassExplainer, embedding: &Tensor, stack: &SimilarityStack) -> Result<ConceptMap> {
    let (h, w, q) = embedding.spatial_dims()?;
    if (h, w) != (stack.height, stack.width) || stack.similarity.len() != exp.num_concepts() || q != exp.dim() {
        return Err(Error::Shape("similarity stack does not match the embedding".into()));
    }
    let mut map = embedding.clone();
    let mut assignment = vec![None; h * w];
    for (n, slot) in assignment.iter_mut().enumerate() {
        let mut best: Option<usize> = None;
        for j in 0..exp.num_concepts() {
            if stack.presence[j][n] && best.is_none_or(|b| stack.similarity[j][n] > stack.similarity[b][n]) {
                best = Some(j);
            }
        }
        if let Some(j) = best {
            map.row_mut(n, q).copy_from_slice(exp.concept(j));
            *slot = Some(j);
        }
    }
    Ok(ConceptMap { map, assignment })
}

/// Decodes a concept map and scores it with the rest of the black-box;
/// returns the reconstruction and `p_k`.
pub fn reconstruct_and_score(model: &BlackBox, exp: &ClassExplainer, cmap: &Tensor, k: usize) -> Result<(Tensor, f64)> {
    if k >= model.num_classes {
        return Err(Error::Index(format!("class {k} of {}", model.num_classes)));
    }
    let recon = decode(exp, cmap)?;
    let p = model.resume_forward(&recon)?;
    Ok((recon, p.data()[k]))
}

/// `cmap` with every location where concept `j` is present set to zero.
pub fn mask_concept(cmap: &Tensor, stack: &SimilarityStack, j: usize) -> Tensor {
    let q = cmap.shape()[2];
    let mut masked = cmap.clone();
    for (n, &present) in stack.presence[j].iter().enumerate() {
        if present {
            masked.row_mut(n, q).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    masked
}

/// `r_j = p_k − p_k^j` for every concept `j` of module `k`.
pub fn relevance(
    model: &BlackBox,
    exp: &ClassExplainer,
    cmap: &Tensor,
    stack: &SimilarityStack,
    k: usize,
) -> Result<Vec<f64>> {
    let (_, p_k) = reconstruct_and_score(model, exp, cmap, k)?;
    (0..exp.num_concepts())
        .map(|j| {
            if !stack.is_present_anywhere(j) {
                return Ok(0.0);
            }
            let (_, p_kj) = reconstruct_and_score(model, exp, &mask_concept(cmap, stack, j), k)?;
            Ok(p_k - p_kj)
        })
        .collect()
}

/// Result of explaining one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Explanation {
    pub predicted_label: usize,
    pub explainer_probs: Vec<f64>,
    pub black_box_probs: Vec<f64>,
    /// Relevance of each concept of the predicted class.
    pub relevances: Vec<f64>,
    /// `100 · r_j / Σ r`, present only when `Σ r > 1e-6`.
    pub percentages: Option<Vec<f64>>,
    /// Similarity maps of the predicted class, bilinearly upsampled to image
    /// resolution.
    pub heatmaps: Vec<Tensor>,
    /// Presence masks at image resolution, values in {0, 1}.
    pub masks: Vec<Tensor>,
    pub stack: SimilarityStack,
}

impl Explanation {
    pub fn is_degenerate(&self) -> bool {
        self.percentages.is_none()
    }
}

/// Percentage contributions, or `None` when the relevances do not sum to a
/// positive total.
pub fn percentages(relevances: &[f64]) -> Option<Vec<f64>> {
    let total: f64 = relevances.iter().sum();
    (total > 1e-6).then(|| relevances.iter().map(|r| 100.0 * r / total).collect())
}

pub fn explain(model: &BlackBox, bank: &ExplainerBank, image: &Tensor) -> Result<Explanation> {
    if bank.num_classes() != model.num_classes {
        return Err(Error::Shape(format!(
            "bank explains {} classes, black-box has {}",
            bank.num_classes(),
            model.num_classes
        )));
    }
    let fmap = model.feature_map(image)?;
    let black_box_probs = model.resume_forward(&fmap)?.into_data();
    let passes = bank
        .modules
        .par_iter()
        .enumerate()
        .map(|(k, exp)| {
            let e = encode(exp, &fmap)?;
            let stack = similarity(exp, &e, &bank.hyper)?;
            let cmap = concept_map(exp, &e, &stack)?;
            let (_, p) = reconstruct_and_score(model, exp, &cmap.map, k)?;
            Ok((p, stack, cmap))
        })
        .collect::<Result<Vec<_>>>()?;
    let explainer_probs: Vec<f64> = passes.iter().map(|p| p.0).collect();
    let predicted_label = argmax(&explainer_probs);
    let (_, stack, cmap) = passes.into_iter().nth(predicted_label).expect("non-empty bank");
    let exp = &bank.modules[predicted_label];
    let relevances = relevance(model, exp, &cmap.map, &stack, predicted_label)?;
    let (ih, iw) = (image.shape()[0], image.shape()[1]);
    let heatmaps = stack.similarity.iter().map(|s| upsample_bilinear(s, stack.height, stack.width, ih, iw)).collect();
    let masks = (0..exp.num_concepts()).map(|j| upsample_presence(&stack, j, ih, iw)).collect();
    Ok(Explanation {
        predicted_label,
        percentages: percentages(&relevances),
        explainer_probs,
        black_box_probs,
        relevances,
        heatmaps,
        masks,
        stack,
    })
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn upsample_bilinear(values: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Tensor {
    let sample = |coord: usize, scale: f64, size: usize| {
        let src = ((coord as f64 + 0.5) / scale - 0.5).clamp(0.0, (size - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(size - 1);
        (lo, hi, src - lo as f64)
    };
    let (sy, sx) = (out_h as f64 / h as f64, out_w as f64 / w as f64);
    let mut out = vec![0.0; out_h * out_w];
    for y in 0..out_h {
        let (y0, y1, fy) = sample(y, sy, h);
        for x in 0..out_w {
            let (x0, x1, fx) = sample(x, sx, w);
            let top = values[y0 * w + x0] * (1.0 - fx) + values[y0 * w + x1] * fx;
            let bottom = values[y1 * w + x0] * (1.0 - fx) + values[y1 * w + x1] * fx;
            out[y * out_w + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    Tensor::new(vec![out_h, out_w], out).expect("sized above")
}

/// Presence mask of concept `j` at image resolution: bilinear upsampling of
/// the indicator, thresholded at one half.
pub fn upsample_presence(stack: &SimilarityStack, j: usize, out_h: usize, out_w: usize) -> Tensor {
    let indicator: Vec<f64> = stack.presence[j].iter().map(|&p| f64::from(u8::from(p))).collect();
    upsample_bilinear(&indicator, stack.height, stack.width, out_h, out_w).map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
}
