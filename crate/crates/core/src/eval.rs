//! Agreement accuracy, the localization proxy and misclassification digests.

use rayon::prelude::*;
use serde::Serialize;

use crate::baseline::BaselineBank;
use crate::blackbox::BlackBox;
use crate::error::{Error, Result};
use crate::explainer::{concept_map, encode, explain, relevance, similarity, ExplainerBank};
use crate::seeding;
use crate::synthparts::{LabeledDataset, Split, CANVAS};
use crate::tensor::{argmax, Tensor};

pub const NULL_PERMUTATIONS: usize = 100;

/// Note attached to every localization output.
pub const PROXY_NOTE: &str =
    "localization IoU against synthetic part masks is a programmatic proxy for human interpretability, not a human study";

/// Anything that produces one score per class from a black-box feature map.
pub trait LabelExplainer: Sync {
    fn name(&self) -> &str;
    fn class_scores(&self, model: &BlackBox, fmap: &Tensor) -> Result<Vec<f64>>;
}

impl LabelExplainer for ExplainerBank {
    fn name(&self) -> &str {
        "pace"
    }

    fn class_scores(&self, model: &BlackBox, fmap: &Tensor) -> Result<Vec<f64>> {
        self.predict_probs(model, fmap)
    }
}

impl LabelExplainer for BaselineBank {
    fn name(&self) -> &str {
        "pca-kmeans"
    }

    fn class_scores(&self, model: &BlackBox, fmap: &Tensor) -> Result<Vec<f64>> {
        self.predict_probs(model, fmap)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassAgreement {
    /// Black-box predicted class.
    pub class: usize,
    pub n_test: usize,
    pub n_agree: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AgreementReport {
    pub explainer: String,
    pub n_test: usize,
    pub n_agree: usize,
    /// Percent.
    pub accuracy: f64,
    pub per_class: Vec<ClassAgreement>,
}

fn percent(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Share of `images` on which the explainer's argmax matches the black-box's.
pub fn agreement_accuracy<E: LabelExplainer + ?Sized>(
    model: &BlackBox,
    explainer: &E,
    images: &[&Tensor],
) -> Result<AgreementReport> {
    if images.is_empty() {
        return Err(Error::Empty("no test images".into()));
    }
    let pairs: Vec<(usize, usize)> = images
        .par_iter()
        .map(|x| {
            let f = model.feature_map(x)?;
            let bb = model.resume_forward(&f)?.argmax();
            Ok((bb, argmax(&explainer.class_scores(model, &f)?)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut per_class: Vec<ClassAgreement> =
        (0..model.num_classes).map(|class| ClassAgreement { class, n_test: 0, n_agree: 0, accuracy: 0.0 }).collect();
    for &(bb, ex) in &pairs {
        per_class[bb].n_test += 1;
        per_class[bb].n_agree += usize::from(bb == ex);
    }
    for c in &mut per_class {
        c.accuracy = percent(c.n_agree, c.n_test);
    }
    let n_agree = per_class.iter().map(|c| c.n_agree).sum();
    Ok(AgreementReport {
        explainer: explainer.name().to_string(),
        n_test: pairs.len(),
        n_agree,
        accuracy: percent(n_agree, pairs.len()),
        per_class,
    })
}

/// Intersection over union of two binary masks; 0 when both are empty.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    assert_eq!(a.len(), b.len(), "masks differ in size");
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// `mask` (side × side) translated by `(dy, dx)` with wrap-around.
pub fn cyclic_shift(mask: &[bool], side: usize, dy: usize, dx: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for y in 0..side {
        for x in 0..side {
            out[((y + dy) % side) * side + (x + dx) % side] = mask[y * side + x];
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConceptLocalization {
    pub class: usize,
    pub concept: usize,
    /// Images explained as `class`.
    pub n_images: usize,
    pub best_part: Option<usize>,
    pub mean_iou: f64,
    pub null_mean: f64,
    pub null_p95: f64,
    pub exceeds_null: bool,
    pub mean_relevance: f64,
    /// 1 for the most relevant concept of the class.
    pub relevance_rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LocalizationReport {
    pub note: String,
    pub permutations: usize,
    pub concepts: Vec<ConceptLocalization>,
    /// Share of concepts whose mean IoU beats the null's 95th percentile.
    pub fraction_exceeding: f64,
}

/// Nearest-rank percentile of a sample.
pub fn percentile(values: &[f64], pct: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank - 1]
}

struct ImageView {
    class: usize,
    concept_masks: Vec<Vec<bool>>,
    relevances: Vec<f64>,
    parts: Vec<(usize, Vec<bool>)>,
}

/// For each `(class, concept)`: mean IoU with the best-matching part, where
/// `parts_of(image)` supplies the ground-truth masks.
fn best_mean_iou<F>(
    views: &[ImageView],
    num_classes: usize,
    num_concepts: usize,
    num_parts: usize,
    parts_of: F,
) -> Vec<(Option<usize>, f64)>
where
    F: Fn(usize) -> Vec<(usize, Vec<bool>)>,
{
    let mut sums = vec![vec![vec![0.0; num_parts]; num_concepts]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (i, v) in views.iter().enumerate() {
        counts[v.class] += 1;
        for (p, gt) in parts_of(i) {
            for (j, m) in v.concept_masks.iter().enumerate() {
                sums[v.class][j][p] += iou(m, &gt);
            }
        }
    }
    let mut out = Vec::with_capacity(num_classes * num_concepts);
    for k in 0..num_classes {
        for j in 0..num_concepts {
            if counts[k] == 0 {
                out.push((None, 0.0));
                continue;
            }
            let means: Vec<f64> = sums[k][j].iter().map(|s| s / counts[k] as f64).collect();
            let p = argmax(&means);
            out.push((Some(p), means[p]));
        }
    }
    out
}

/// Scores every concept's presence masks on the test split against the
/// ground-truth part masks, and against a null of randomly translated part
/// masks.
pub fn localization_iou(
    model: &BlackBox,
    bank: &ExplainerBank,
    dataset: &LabeledDataset,
    seed: u64,
) -> Result<LocalizationReport> {
    let test = dataset.indices(Split::Test);
    if test.is_empty() {
        return Err(Error::Empty("no test images".into()));
    }
    let num_concepts = bank.modules[0].num_concepts();
    let num_classes = bank.num_classes();
    let views: Vec<ImageView> = test
        .par_iter()
        .map(|&i| {
            let ex = explain(model, bank, &dataset.images[i])?;
            let concept_masks = ex.masks.iter().map(|m| m.data().iter().map(|&v| v > 0.5).collect()).collect();
            let parts = dataset.instances[i]
                .iter()
                .map(|inst| (inst.part_id, inst.mask.iter().map(|&v| v > 0).collect()))
                .collect();
            Ok(ImageView { class: ex.predicted_label, concept_masks, relevances: ex.relevances, parts })
        })
        .collect::<Result<Vec<_>>>()?;

    let num_parts = dataset.num_parts();
    let observed = best_mean_iou(&views, num_classes, num_concepts, num_parts, |i| views[i].parts.clone());
    let null_seed = seeding::derive(seed, "null");
    let null: Vec<Vec<f64>> = (0..NULL_PERMUTATIONS)
        .into_par_iter()
        .map(|t| {
            let mut rng = seeding::rng(seeding::derive_index(null_seed, t as u64));
            let shifts: Vec<(usize, usize)> = views
                .iter()
                .map(|_| {
                    use rand::Rng;
                    (rng.random_range(0..CANVAS), rng.random_range(0..CANVAS))
                })
                .collect();
            best_mean_iou(&views, num_classes, num_concepts, num_parts, |i| {
                let (dy, dx) = shifts[i];
                views[i].parts.iter().map(|(p, m)| (*p, cyclic_shift(m, CANVAS, dy, dx))).collect()
            })
            .into_iter()
            .map(|(_, v)| v)
            .collect()
        })
        .collect();

    let mut concepts = Vec::new();
    for k in 0..num_classes {
        let members: Vec<&ImageView> = views.iter().filter(|v| v.class == k).collect();
        let mean_rel: Vec<f64> = (0..num_concepts)
            .map(|j| {
                if members.is_empty() {
                    0.0
                } else {
                    members.iter().map(|v| v.relevances[j]).sum::<f64>() / members.len() as f64
                }
            })
            .collect();
        for j in 0..num_concepts {
            let slot = k * num_concepts + j;
            let samples: Vec<f64> = null.iter().map(|perm| perm[slot]).collect();
            let null_p95 = percentile(&samples, 95.0);
            let (best_part, mean_iou) = observed[slot];
            let rank = 1
                + (0..num_concepts)
                    .filter(|&o| mean_rel[o] > mean_rel[j] || (mean_rel[o] == mean_rel[j] && o < j))
                    .count();
            concepts.push(ConceptLocalization {
                class: k,
                concept: j,
                n_images: members.len(),
                best_part,
                mean_iou,
                null_mean: samples.iter().sum::<f64>() / samples.len() as f64,
                null_p95,
                exceeds_null: !members.is_empty() && mean_iou > null_p95,
                mean_relevance: mean_rel[j],
                relevance_rank: rank,
            });
        }
    }
    let exceeding = concepts.iter().filter(|c| c.exceeds_null).count();
    Ok(LocalizationReport {
        note: PROXY_NOTE.to_string(),
        permutations: NULL_PERMUTATIONS,
        fraction_exceeding: exceeding as f64 / concepts.len() as f64,
        concepts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DigestEntry {
    pub index: usize,
    pub true_label: usize,
    pub predicted_label: usize,
    pub top_concept: usize,
    pub relevances: Vec<f64>,
}

/// Relevances of every concept of class `k`'s module for one feature map.
pub fn class_relevances(model: &BlackBox, bank: &ExplainerBank, fmap: &Tensor, k: usize) -> Result<Vec<f64>> {
    let exp = bank.modules.get(k).ok_or_else(|| Error::Index(format!("class {k} of {}", bank.num_classes())))?;
    let e = encode(exp, fmap)?;
    let stack = similarity(exp, &e, &bank.hyper)?;
    let cmap = concept_map(exp, &e, &stack)?;
    relevance(model, exp, &cmap.map, &stack, k)
}

/// Test images the black-box gets wrong, with the concepts of the wrongly
/// predicted class ranked by relevance.
pub fn misclassification_digest(
    model: &BlackBox,
    bank: &ExplainerBank,
    dataset: &LabeledDataset,
) -> Result<Vec<DigestEntry>> {
    let entries: Vec<Option<DigestEntry>> = dataset
        .indices(Split::Test)
        .par_iter()
        .map(|&i| {
            let f = model.feature_map(&dataset.images[i])?;
            let predicted = model.resume_forward(&f)?.argmax();
            if predicted == dataset.labels[i] {
                return Ok(None);
            }
            let relevances = class_relevances(model, bank, &f, predicted)?;
            Ok(Some(DigestEntry {
                index: i,
                true_label: dataset.labels[i],
                predicted_label: predicted,
                top_concept: argmax(&relevances),
                relevances,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(entries.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub black_box_test_accuracy: f64,
    pub pace: AgreementReport,
    pub baseline: Option<AgreementReport>,
    pub localization: LocalizationReport,
    pub misclassified: Vec<DigestEntry>,
}

impl EvalReport {
    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("black-box test accuracy   {:6.2}%\n", self.black_box_test_accuracy));
        s.push_str("explainer    n_test  n_agree  agreement\n");
        for r in std::iter::once(&self.pace).chain(self.baseline.as_ref()) {
            s.push_str(&format!("{:<12} {:>6}  {:>7}  {:8.2}%\n", r.explainer, r.n_test, r.n_agree, r.accuracy));
        }
        s.push_str(&format!("\nlocalization proxy ({})\n", self.localization.note));
        s.push_str("class concept images best_part mean_iou null_p95 beats_null relevance rank\n");
        for c in &self.localization.concepts {
            let part = c.best_part.map_or("-".to_string(), |p| p.to_string());
            s.push_str(&format!(
                "{:>5} {:>7} {:>6} {:>9} {:8.4} {:8.4} {:>10} {:9.4} {:>4}\n",
                c.class,
                c.concept,
                c.n_images,
                part,
                c.mean_iou,
                c.null_p95,
                c.exceeds_null,
                c.mean_relevance,
                c.relevance_rank
            ));
        }
        s.push_str(&format!("concepts beating the null: {:.1}%\n", 100.0 * self.localization.fraction_exceeding));
        s.push_str(&format!("misclassified test images: {}\n", self.misclassified.len()));
        s
    }
}
