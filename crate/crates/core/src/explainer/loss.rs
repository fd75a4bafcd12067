//! The training objective and its analytic gradient.
//!
//! `L = β·L_C + γ·L_R − δ·L_D + ω·L_T` where
//! - `L_C` is the cross-entropy between the explainer probabilities `P`
//!   (unnormalized) and the black-box output, averaged over the batch;
//! - `L_R = Σ_k Σ_j (r_k^j − p_k)²`, averaged over the batch;
//! - `L_D = Σ_k Σ_j Σ_j' ‖c_k^j − c_k^j'‖²`;
//! - `L_T` sums the triplet hinge over images, classes and concepts.
//!
//! Presence masks and the nearest-concept choice are piecewise-constant
//! selectors: gradients flow through the selected values only.

use rayon::prelude::*;

use super::{
    concept_map, encode, mask_concept, similarity, ClassExplainer, ConceptMap, ExplainerBank, SimilarityStack,
};
use crate::blackbox::BlackBox;
use crate::error::{Error, Result};
use crate::layers::{self, GradientTape};
use crate::tensor::{squared_distance, Tensor};

/// A training batch: feature maps with their black-box probabilities.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub fmaps: Vec<&'a Tensor>,
    /// `b(x)` for every image.
    pub targets: Vec<&'a Tensor>,
    /// `argmax b(x)` for every image.
    pub predicted: Vec<usize>,
}

impl<'a> Batch<'a> {
    pub fn new(fmaps: Vec<&'a Tensor>, targets: Vec<&'a Tensor>) -> Result<Self> {
        if fmaps.len() != targets.len() {
            return Err(Error::Shape("one target per feature map".into()));
        }
        let predicted = targets.iter().map(|t| t.argmax()).collect();
        Ok(Batch { fmaps, targets, predicted })
    }

    pub fn len(&self) -> usize {
        self.fmaps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fmaps.is_empty()
    }
}

/// Which modules receive the relevance, diversity and triplet terms.
/// Cross-entropy always covers every module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossScope {
    All,
    /// A pure batch of one predicted class: only that module gets the full
    /// objective.
    Class(usize),
}

impl LossScope {
    fn covers(&self, k: usize) -> bool {
        match *self {
            LossScope::All => true,
            LossScope::Class(c) => c == k,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub ce: f64,
    pub relevance: f64,
    pub diversity: f64,
    pub triplet: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModuleGrad {
    pub encoder: Tensor,
    pub decoder: Tensor,
    pub concepts: Tensor,
}

impl ModuleGrad {
    fn zeros(exp: &ClassExplainer) -> Self {
        ModuleGrad {
            encoder: Tensor::zeros(exp.encoder.weights.shape()),
            decoder: Tensor::zeros(exp.decoder.weights.shape()),
            concepts: Tensor::zeros(exp.concepts.shape()),
        }
    }

    fn add(&mut self, other: &ModuleGrad) -> Result<()> {
        self.encoder.axpy(1.0, &other.encoder)?;
        self.decoder.axpy(1.0, &other.decoder)?;
        self.concepts.axpy(1.0, &other.concepts)
    }
}

#[derive(Clone, Debug)]
pub struct Objective {
    pub terms: LossTerms,
    pub grads: Vec<ModuleGrad>,
}

/// `−Σ_k target_k · ln P_k` with `P` used as given (no renormalization).
pub fn loss_ce(probs: &[f64], target: &[f64]) -> f64 {
    -probs.iter().zip(target).map(|(&p, &t)| if t == 0.0 { 0.0 } else { t * p.ln() }).sum::<f64>()
}

/// Sum over classes of all ordered pairwise squared distances between the
/// class's concept vectors.
pub fn loss_diversity(bank: &ExplainerBank) -> f64 {
    bank.modules.iter().map(|m| diversity_of(&m.concepts)).sum()
}

fn diversity_of(concepts: &Tensor) -> f64 {
    let (c, q) = (concepts.shape()[0], concepts.shape()[1]);
    // Σ_j Σ_j' ‖a_j − a_j'‖² = 2C Σ_j ‖a_j‖² − 2 ‖Σ_j a_j‖²
    let mut norms = 0.0;
    let mut total = vec![0.0; q];
    for j in 0..c {
        let row = concepts.row(j, q);
        norms += row.iter().map(|v| v * v).sum::<f64>();
        total.iter_mut().zip(row).for_each(|(t, v)| *t += v);
    }
    2.0 * c as f64 * norms - 2.0 * total.iter().map(|v| v * v).sum::<f64>()
}

/// `∂ diversity / ∂ a_j = 4 Σ_j' (a_j − a_j') = 4 (C a_j − Σ a)`.
fn diversity_grad(concepts: &Tensor) -> Tensor {
    let (c, q) = (concepts.shape()[0], concepts.shape()[1]);
    let mut total = vec![0.0; q];
    for j in 0..c {
        total.iter_mut().zip(concepts.row(j, q)).for_each(|(t, v)| *t += v);
    }
    let mut g = Tensor::zeros(concepts.shape());
    for j in 0..c {
        let row = concepts.row(j, q).to_vec();
        for (i, v) in g.row_mut(j, q).iter_mut().enumerate() {
            *v = 4.0 * (c as f64 * row[i] - total[i]);
        }
    }
    g
}

/// Relevance loss of one image: `Σ_k Σ_j (r_k^j − p_k)²` with
/// `r_k^j = p_k − p_k^j`, given `p[k]` and `masked[k][j] = p_k^j`.
pub fn loss_relevance_terms(p: &[f64], masked: &[Vec<f64>]) -> f64 {
    p.iter().zip(masked).map(|(&pk, row)| row.iter().map(|&pkj| ((pk - pkj) - pk).powi(2)).sum::<f64>()).sum()
}

/// Triplet loss of one class module over its batch embeddings together with
/// gradients with respect to each embedding map.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletOutcome {
    pub loss: f64,
    /// Per image: `(location, gradient row)` pairs.
    pub grads: Vec<Vec<(usize, Vec<f64>)>>,
}

/// For every image `i` and concept `j`, the anchor is the embedding in `i`
/// nearest to concept `j`; the positives are the same concept's anchors in
/// the other images; the negatives are the anchors of every other concept
/// across all images. Each anchor-positive pair is matched with the
/// semi-hard negative of smallest distance
/// (`d_ap < d_an < d_ap + α`), or with the hardest negative when none is
/// semi-hard, and contributes `max(0, d_ap − d_an + α)` with squared
/// Euclidean distances.
pub fn loss_triplet(concepts: &Tensor, embeddings: &[&Tensor], alpha: f64) -> Result<TripletOutcome> {
    let mut grads: Vec<Vec<(usize, Vec<f64>)>> = vec![Vec::new(); embeddings.len()];
    if embeddings.len() < 2 {
        return Ok(TripletOutcome { loss: 0.0, grads });
    }
    let (c, q) = (concepts.shape()[0], concepts.shape()[1]);
    // anchors[i][j] = location index of image i nearest to concept j
    let mut anchors = Vec::with_capacity(embeddings.len());
    for e in embeddings {
        let (h, w, qq) = e.spatial_dims()?;
        if qq != q {
            return Err(Error::Shape(format!("embedding depth {qq}, concepts have {q}")));
        }
        let per_concept: Vec<usize> = (0..c)
            .map(|j| {
                let cj = concepts.row(j, q);
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for n in 0..h * w {
                    let d = squared_distance(e.row(n, q), cj);
                    if d < best_d {
                        best_d = d;
                        best = n;
                    }
                }
                best
            })
            .collect();
        anchors.push(per_concept);
    }
    let vec_at = |i: usize, j: usize| embeddings[i].row(anchors[i][j], q);
    let mut acc: Vec<std::collections::BTreeMap<usize, Vec<f64>>> = vec![Default::default(); embeddings.len()];
    let mut add = |i: usize, loc: usize, g: Vec<f64>| {
        let slot = acc[i].entry(loc).or_insert_with(|| vec![0.0; q]);
        slot.iter_mut().zip(g).for_each(|(s, v)| *s += v);
    };
    let mut loss = 0.0;
    let n_img = embeddings.len();
    for i in 0..n_img {
        for j in 0..c {
            let a = vec_at(i, j);
            for ip in (0..n_img).filter(|&ip| ip != i) {
                let p = vec_at(ip, j);
                let d_ap = squared_distance(a, p);
                let mut semi: Option<(f64, usize, usize)> = None;
                let mut hard: Option<(f64, usize, usize)> = None;
                for inn in 0..n_img {
                    for jn in (0..c).filter(|&jn| jn != j) {
                        let d_an = squared_distance(a, vec_at(inn, jn));
                        if hard.is_none_or(|(d, _, _)| d_an < d) {
                            hard = Some((d_an, inn, jn));
                        }
                        let in_window = d_an > d_ap && d_an < d_ap + alpha;
                        if in_window && semi.is_none_or(|(d, _, _)| d_an < d) {
                            semi = Some((d_an, inn, jn));
                        }
                    }
                }
                let Some((d_an, inn, jn)) = semi.or(hard) else { continue };
                let term = d_ap - d_an + alpha;
                if term <= 0.0 {
                    continue;
                }
                loss += term;
                let n = vec_at(inn, jn);
                add(i, anchors[i][j], (0..q).map(|t| 2.0 * (n[t] - p[t])).collect());
                add(ip, anchors[ip][j], (0..q).map(|t| -2.0 * (a[t] - p[t])).collect());
                add(inn, anchors[inn][jn], (0..q).map(|t| 2.0 * (a[t] - n[t])).collect());
            }
        }
    }
    for (i, map) in acc.into_iter().enumerate() {
        grads[i] = map.into_iter().collect();
    }
    Ok(TripletOutcome { loss, grads })
}

/// Forward quantities of one class module on one image.
struct ModulePass {
    embedding: Tensor,
    stack: SimilarityStack,
    cmap: ConceptMap,
    recon: Tensor,
    p: f64,
    /// Masked concept maps, their reconstructions and `p_k^j`; empty when the
    /// module is outside the relevance scope.
    masked: Vec<(Tensor, Tensor, f64)>,
}

fn module_forward(
    model: &BlackBox,
    exp: &ClassExplainer,
    bank: &ExplainerBank,
    fmap: &Tensor,
    k: usize,
    with_relevance: bool,
) -> Result<ModulePass> {
    let embedding = encode(exp, fmap)?;
    let stack = similarity(exp, &embedding, &bank.hyper)?;
    let cmap = concept_map(exp, &embedding, &stack)?;
    let recon = layers::apply(&exp.decoder, &cmap.map)?;
    let p = model.resume_forward(&recon)?.data()[k];
    let masked = if with_relevance {
        (0..exp.num_concepts())
            .map(|j| {
                let m = mask_concept(&cmap.map, &stack, j);
                let r = layers::apply(&exp.decoder, &m)?;
                let pj = model.resume_forward(&r)?.data()[k];
                Ok((m, r, pj))
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    Ok(ModulePass { embedding, stack, cmap, recon, p, masked })
}

fn target_of(batch: &Batch, i: usize, one_hot: bool) -> Vec<f64> {
    if one_hot {
        let mut t = vec![0.0; batch.targets[i].len()];
        t[batch.predicted[i]] = 1.0;
        t
    } else {
        batch.targets[i].data().to_vec()
    }
}

/// Gradient of `weight · p_k(decoder(input))` pushed back to the decoder
/// weights and the decoder input.
fn decoder_backward(
    model: &BlackBox,
    exp: &ClassExplainer,
    input: &Tensor,
    recon: &Tensor,
    k: usize,
    weight: f64,
) -> Result<(Tensor, Tensor)> {
    let mut out_grad = Tensor::zeros(&[model.num_classes]);
    out_grad.data_mut()[k] = weight;
    let d_recon = model.resume_backward(recon, &out_grad)?;
    let mut tape = GradientTape::new();
    layers::forward(&exp.decoder, input, &mut tape)?;
    let g = layers::backward(&exp.decoder, &d_recon, &mut tape)?;
    Ok((g.weights, g.input))
}

/// Evaluates the objective on a batch and differentiates it with respect to
/// every encoder, decoder and concept bank.
pub fn objective(model: &BlackBox, bank: &ExplainerBank, batch: &Batch, scope: LossScope) -> Result<Objective> {
    let k_count = bank.num_classes();
    if k_count != model.num_classes {
        return Err(Error::Shape(format!("bank has {k_count} modules for {} classes", model.num_classes)));
    }
    if batch.is_empty() {
        return Err(Error::Empty("objective over an empty batch".into()));
    }
    let h = bank.hyper;
    let b = batch.len() as f64;

    let passes: Vec<Vec<ModulePass>> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            bank.modules
                .iter()
                .enumerate()
                .map(|(k, exp)| module_forward(model, exp, bank, batch.fmaps[i], k, scope.covers(k)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut ce = 0.0;
    let mut rel = 0.0;
    for (i, per_module) in passes.iter().enumerate() {
        let probs: Vec<f64> = per_module.iter().map(|m| m.p).collect();
        ce += loss_ce(&probs, &target_of(batch, i, h.one_hot_targets));
        let (p_in, masked): (Vec<f64>, Vec<Vec<f64>>) = per_module
            .iter()
            .enumerate()
            .filter(|(k, _)| scope.covers(*k))
            .map(|(_, m)| (m.p, m.masked.iter().map(|x| x.2).collect()))
            .unzip();
        rel += loss_relevance_terms(&p_in, &masked);
    }
    ce /= b;
    rel /= b;

    let mut diversity = 0.0;
    let mut triplet = 0.0;
    let mut triplet_grads: Vec<Vec<Vec<(usize, Vec<f64>)>>> = vec![vec![Vec::new(); k_count]; batch.len()];
    for (k, exp) in bank.modules.iter().enumerate().filter(|(k, _)| scope.covers(*k)) {
        diversity += diversity_of(&exp.concepts);
        let members: Vec<usize> = (0..batch.len()).filter(|&i| batch.predicted[i] == k).collect();
        let embeddings: Vec<&Tensor> = members.iter().map(|&i| &passes[i][k].embedding).collect();
        let out = loss_triplet(&exp.concepts, &embeddings, h.alpha)?;
        triplet += out.loss;
        for (slot, g) in members.iter().zip(out.grads) {
            triplet_grads[*slot][k] = g;
        }
    }

    let total = h.beta * ce + h.gamma * rel - h.delta * diversity + h.omega * triplet;
    let terms = LossTerms { ce, relevance: rel, diversity, triplet, total };
    if !total.is_finite() {
        let named = [("cross-entropy", ce), ("relevance", rel), ("diversity", diversity), ("triplet", triplet)];
        let worst = named
            .iter()
            .find(|(_, v)| !v.is_finite())
            .or_else(|| named.iter().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())))
            .map(|(n, _)| *n)
            .unwrap_or("total");
        return Err(Error::NonFinite(format!("objective (dominated by the {worst} term)")));
    }

    let per_image: Vec<Vec<ModuleGrad>> = passes
        .par_iter()
        .enumerate()
        .map(|(i, per_module)| {
            let target = target_of(batch, i, h.one_hot_targets);
            per_module
                .iter()
                .enumerate()
                .map(|(k, pass)| {
                    image_module_backward(
                        model,
                        &bank.modules[k],
                        batch.fmaps[i],
                        pass,
                        k,
                        &target,
                        &triplet_grads[i][k],
                        b,
                        &h,
                    )
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut grads: Vec<ModuleGrad> = bank.modules.iter().map(ModuleGrad::zeros).collect();
    for image in &per_image {
        for (acc, g) in grads.iter_mut().zip(image) {
            acc.add(g)?;
        }
    }
    for (k, (acc, exp)) in grads.iter_mut().zip(&bank.modules).enumerate() {
        if scope.covers(k) {
            acc.concepts.axpy(-h.delta, &diversity_grad(&exp.concepts))?;
        }
    }
    Ok(Objective { terms, grads })
}

#[allow(clippy::too_many_arguments)]
fn image_module_backward(
    model: &BlackBox,
    exp: &ClassExplainer,
    fmap: &Tensor,
    pass: &ModulePass,
    k: usize,
    target: &[f64],
    triplet: &[(usize, Vec<f64>)],
    batch_size: f64,
    h: &super::Hyper,
) -> Result<ModuleGrad> {
    let q = exp.dim();
    let mut grad = ModuleGrad::zeros(exp);

    // dL/dp_k and dL/dp_k^j
    let d_p = if target[k] == 0.0 { 0.0 } else { -h.beta * target[k] / pass.p / batch_size };
    let mut d_masked = Vec::with_capacity(pass.masked.len());
    for (_, _, pkj) in &pass.masked {
        let r = pass.p - pkj;
        let common = h.gamma * 2.0 * (r - pass.p) / batch_size;
        // r − p_k = −p_k^j, so only p_k^j carries gradient
        d_masked.push(-common);
    }

    let mut d_cmap = Tensor::zeros(pass.cmap.map.shape());
    if d_p != 0.0 {
        let (dw, dx) = decoder_backward(model, exp, &pass.cmap.map, &pass.recon, k, d_p)?;
        grad.decoder.axpy(1.0, &dw)?;
        d_cmap.axpy(1.0, &dx)?;
    }
    for (j, ((masked, recon, _), &weight)) in pass.masked.iter().zip(&d_masked).enumerate() {
        if weight == 0.0 {
            continue;
        }
        let (dw, mut dx) = decoder_backward(model, exp, masked, recon, k, weight)?;
        grad.decoder.axpy(1.0, &dw)?;
        for (n, &present) in pass.stack.presence[j].iter().enumerate() {
            if present {
                dx.row_mut(n, q).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        d_cmap.axpy(1.0, &dx)?;
    }

    // route the concept-map gradient to concepts or to the embedding
    let mut d_embed = Tensor::zeros(pass.embedding.shape());
    for (n, slot) in pass.cmap.assignment.iter().enumerate() {
        let row = d_cmap.row(n, q).to_vec();
        let dst = match slot {
            Some(j) => grad.concepts.row_mut(*j, q),
            None => d_embed.row_mut(n, q),
        };
        dst.iter_mut().zip(&row).for_each(|(d, v)| *d += v);
    }
    for (n, g) in triplet {
        d_embed.row_mut(*n, q).iter_mut().zip(g).for_each(|(d, v)| *d += h.omega * v);
    }
    if d_embed.max_abs() > 0.0 {
        let mut tape = GradientTape::new();
        layers::forward(&exp.encoder, fmap, &mut tape)?;
        grad.encoder = layers::backward(&exp.encoder, &d_embed, &mut tape)?.weights;
    }
    Ok(grad)
}

/// `β·L_C + γ·L_R − δ·L_D + ω·L_T` over the batch with every module in scope.
pub fn total_loss(model: &BlackBox, bank: &ExplainerBank, batch: &Batch) -> Result<f64> {
    Ok(objective(model, bank, batch, LossScope::All)?.terms.total)
}
