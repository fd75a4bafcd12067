//! The stages behind the command-line tool, each reading and writing the
//! work directory laid out by [`RunConfig`].
//!
//! ```text
//! dataset_dir/      meta.json, images/, masks/
//! checkpoint_dir/   blackbox.ckpt, explainer.ckpt, baseline.ckpt
//! report_dir/       blackbox.json, explainer_log.json, baseline.json,
//!                   eval.json, eval.txt, explain/<image>/
//! ```

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::baseline::{fit_baseline, BaselineBank};
use crate::blackbox::{train_blackbox, BlackBox, TrainReport};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{agreement_accuracy, localization_iou, misclassification_digest, EvalReport};
use crate::explainer::{explain, train_explainer, ExplainerBank, Explanation, TrainLog};
use crate::netpbm;
use crate::seeding;
use crate::synthparts::{generate, LabeledDataset, Split};
use crate::tensor::Tensor;

pub fn blackbox_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint_dir.join("blackbox.ckpt")
}

pub fn explainer_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint_dir.join("explainer.ckpt")
}

pub fn baseline_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint_dir.join("baseline.ckpt")
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::io(format!("reading {}", path.display()), e),
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push(b'\n');
    write(path, &text)
}

pub fn load_dataset(cfg: &RunConfig) -> Result<LabeledDataset> {
    LabeledDataset::load(&cfg.dataset_dir)
}

pub fn load_blackbox(cfg: &RunConfig) -> Result<BlackBox> {
    BlackBox::from_bytes(&read(&blackbox_path(cfg))?)
}

pub fn load_explainer(cfg: &RunConfig) -> Result<ExplainerBank> {
    ExplainerBank::from_bytes(&read(&explainer_path(cfg))?)
}

pub fn load_baseline(cfg: &RunConfig) -> Result<BaselineBank> {
    BaselineBank::from_bytes(&read(&baseline_path(cfg))?)
}

fn split_refs(dataset: &LabeledDataset, split: Split) -> (Vec<&Tensor>, Vec<usize>) {
    let idx = dataset.indices(split);
    (idx.iter().map(|&i| &dataset.images[i]).collect(), idx.iter().map(|&i| dataset.labels[i]).collect())
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<LabeledDataset> {
    let dataset = generate(seeding::derive(cfg.seed, "dataset"), cfg.classes, cfg.images_per_class)?;
    dataset.save(&cfg.dataset_dir)?;
    Ok(dataset)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlackBoxSummary {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

pub fn cmd_train_bb(cfg: &RunConfig) -> Result<(BlackBox, BlackBoxSummary)> {
    let dataset = load_dataset(cfg)?;
    let (model, TrainReport { epoch_losses, train_accuracy, steps }) = train_blackbox(&dataset, &cfg.blackbox)?;
    let (images, labels) = split_refs(&dataset, Split::Test);
    let test_accuracy = if images.is_empty() { 0.0 } else { model.accuracy(&images, &labels)? };
    let summary = BlackBoxSummary { epoch_losses, steps, train_accuracy, test_accuracy };
    write(&blackbox_path(cfg), &model.to_bytes())?;
    write_json(&cfg.report_dir.join("blackbox.json"), &summary)?;
    Ok((model, summary))
}

pub fn cmd_train_pace(cfg: &RunConfig) -> Result<(ExplainerBank, TrainLog)> {
    let dataset = load_dataset(cfg)?;
    let model = load_blackbox(cfg)?;
    let (bank, log) = train_explainer(&model, &dataset, &cfg.explainer)?;
    write(&explainer_path(cfg), &bank.to_bytes())?;
    write_json(&cfg.report_dir.join("explainer_log.json"), &log)?;
    Ok((bank, log))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BaselineSummary {
    /// Classes the black-box never predicted on the training split.
    pub missing_classes: Vec<usize>,
    /// Classes whose PCA kept fewer than `Q` non-degenerate components.
    pub rank_deficient_classes: Vec<usize>,
    pub kmeans_iterations: Vec<Option<usize>>,
}

pub fn cmd_baseline(cfg: &RunConfig) -> Result<(BaselineBank, BaselineSummary)> {
    let dataset = load_dataset(cfg)?;
    let model = load_blackbox(cfg)?;
    let bank = fit_baseline(&model, &dataset, cfg.explainer.num_concepts, cfg.explainer.dim, cfg.seed)?;
    let summary = BaselineSummary {
        missing_classes: bank.missing_classes(),
        rank_deficient_classes: (0..bank.modules.len())
            .filter(|&k| bank.modules[k].as_ref().is_some_and(|m| m.pca.rank_deficient()))
            .collect(),
        kmeans_iterations: bank.modules.iter().map(|m| m.as_ref().map(|m| m.kmeans.iterations)).collect(),
    };
    write(&baseline_path(cfg), &bank.to_bytes())?;
    write_json(&cfg.report_dir.join("baseline.json"), &summary)?;
    Ok((bank, summary))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConceptEntry {
    pub index: usize,
    pub relevance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub percent: Option<f64>,
    pub mask_file: String,
    pub heatmap_file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExplanationReport {
    pub predicted_label: usize,
    pub explainer_probs: Vec<f64>,
    pub black_box_probs: Vec<f64>,
    /// Set when the relevances do not sum to a positive total and no
    /// percentages are given.
    pub degenerate: bool,
    pub concepts: Vec<ConceptEntry>,
}

/// Min-max scaling to 0..=255; a constant map becomes all zeros.
pub fn to_gray(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values.iter().map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 }).collect()
}

/// Writes the explanation JSON and per-concept PGMs into `out` and returns
/// the report.
pub fn write_explanation(ex: &Explanation, out: &Path) -> Result<ExplanationReport> {
    let mut concepts = Vec::new();
    for (j, r) in ex.relevances.iter().enumerate() {
        let (h, w) = (ex.masks[j].shape()[0], ex.masks[j].shape()[1]);
        let mask_file = format!("concept_{j}_mask.pgm");
        let heatmap_file = format!("concept_{j}_heatmap.pgm");
        let mask: Vec<u8> = ex.masks[j].data().iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect();
        write(&out.join(&mask_file), &netpbm::encode_pgm(w, h, &mask)?)?;
        write(&out.join(&heatmap_file), &netpbm::encode_pgm(w, h, &to_gray(ex.heatmaps[j].data()))?)?;
        concepts.push(ConceptEntry {
            index: j,
            relevance: *r,
            percent: ex.percentages.as_ref().map(|p| p[j]),
            mask_file,
            heatmap_file,
        });
    }
    let report = ExplanationReport {
        predicted_label: ex.predicted_label,
        explainer_probs: ex.explainer_probs.clone(),
        black_box_probs: ex.black_box_probs.clone(),
        degenerate: ex.is_degenerate(),
        concepts,
    };
    write_json(&out.join("explanation.json"), &report)?;
    Ok(report)
}

/// Explains the PPM image at `image`, writing into `out` or, by default,
/// `report_dir/explain/<file stem>`.
pub fn cmd_explain(cfg: &RunConfig, image: &Path, out: Option<&Path>) -> Result<ExplanationReport> {
    let model = load_blackbox(cfg)?;
    let bank = load_explainer(cfg)?;
    let pixels = netpbm::decode_ppm(&read(image)?)?;
    if pixels.shape() != model.input_shape.as_slice() {
        return Err(Error::Shape(format!(
            "image is {:?}, the black-box expects {:?}",
            pixels.shape(),
            model.input_shape
        )));
    }
    let ex = explain(&model, &bank, &pixels)?;
    let default_out;
    let out = match out {
        Some(o) => o,
        None => {
            let stem = image.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
            default_out = cfg.report_dir.join("explain").join(stem);
            &default_out
        }
    };
    write_explanation(&ex, out)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let dataset = load_dataset(cfg)?;
    let model = load_blackbox(cfg)?;
    let bank = load_explainer(cfg)?;
    let baseline = load_baseline(cfg)?;
    let (images, labels) = split_refs(&dataset, Split::Test);
    let report = EvalReport {
        black_box_test_accuracy: model.accuracy(&images, &labels)?,
        pace: agreement_accuracy(&model, &bank, &images)?,
        baseline: Some(agreement_accuracy(&model, &baseline, &images)?),
        localization: localization_iou(&model, &bank, &dataset, cfg.seed)?,
        misclassified: misclassification_digest(&model, &bank, &dataset)?,
    };
    write_json(&cfg.report_dir.join("eval.json"), &report)?;
    write(&cfg.report_dir.join("eval.txt"), report.summary_text().as_bytes())?;
    Ok(report)
}

/// Every stage in order: generate, train the black-box, train the explainer,
/// fit the baseline, evaluate.
pub fn run_all(cfg: &RunConfig) -> Result<EvalReport> {
    cmd_gen(cfg)?;
    cmd_train_bb(cfg)?;
    cmd_train_pace(cfg)?;
    cmd_baseline(cfg)?;
    cmd_eval(cfg)
}
