//! The CNN classifier being explained.
//!
//! The network is a flat list of layers ending in softmax. `split_index`
//! names the layer whose output is the feature map handed to the explainers;
//! everything after it is "the rest of the network" that [`BlackBox::resume_forward`]
//! and [`BlackBox::resume_backward`] evaluate.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::container::{Reader, Writer};
use crate::error::{Error, Result};
use crate::layers::{self, cross_entropy, GradientTape, LayerGrad, LayerKind, LayerParams};
use crate::optim::{Adam, AdamConfig};
use crate::seeding;
use crate::synthparts::{LabeledDataset, Split};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PACEBBX1";

#[derive(Clone, Debug, PartialEq)]
pub struct BlackBox {
    pub layers: Vec<LayerParams>,
    pub split_index: usize,
    pub num_classes: usize,
    pub input_shape: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 20, batch_size: 64, learning_rate: 1e-3, weight_decay: 5e-5, seed: 42 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid black-box training config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub steps: usize,
}

impl BlackBox {
    pub fn new(layers: Vec<LayerParams>, split_index: usize, input_shape: Vec<usize>) -> Result<Self> {
        if layers.len() < 2 || split_index + 1 >= layers.len() {
            return Err(Error::Shape(format!(
                "split index {split_index} leaves no rest-of-network in {} layers",
                layers.len()
            )));
        }
        if layers.last().map(|l| l.kind) != Some(LayerKind::Softmax) {
            return Err(Error::Shape("the output layer must be softmax".into()));
        }
        let mut shape = input_shape.clone();
        for layer in &layers {
            shape = layer.output_shape(&shape)?;
        }
        let num_classes = shape[0];
        Ok(BlackBox { layers, split_index, num_classes, input_shape })
    }

    /// `Conv3×3(16) ReLU MaxPool2 Conv3×3(32) ReLU MaxPool2 Conv3×3(64) ReLU
    /// | GlobalAvgPool Dense(K) Softmax`, split after the third ReLU.
    pub fn desk(num_classes: usize, input_shape: &[usize], seed: u64) -> Result<Self> {
        let channels = *input_shape.last().ok_or_else(|| Error::Shape("empty input shape".into()))?;
        let mut rng = seeding::rng(seed);
        let conv = |i, o| LayerKind::Conv2D { kernel: 3, stride: 1, in_channels: i, out_channels: o };
        let kinds = [
            conv(channels, 16),
            LayerKind::ReLU,
            LayerKind::MaxPool2D { size: 2 },
            conv(16, 32),
            LayerKind::ReLU,
            LayerKind::MaxPool2D { size: 2 },
            conv(32, 64),
            LayerKind::ReLU,
            LayerKind::GlobalAvgPool,
            LayerKind::Dense { in_features: 64, out_features: num_classes },
            LayerKind::Softmax,
        ];
        let layers = kinds.into_iter().map(|k| LayerParams::init(k, 2.0, &mut rng)).collect::<Result<Vec<_>>>()?;
        BlackBox::new(layers, 7, input_shape.to_vec())
    }

    pub fn feature_shape(&self) -> Vec<usize> {
        let mut shape = self.input_shape.clone();
        for layer in &self.layers[..=self.split_index] {
            shape = layer.output_shape(&shape).expect("validated at construction");
        }
        shape
    }

    fn run(&self, range: std::ops::Range<usize>, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        for layer in &self.layers[range] {
            x = layers::apply(layer, &x)?;
        }
        Ok(x)
    }

    /// Class probabilities `b(x)`.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        image.expect_shape(&self.input_shape, "black-box input")?;
        self.run(0..self.layers.len(), image)
    }

    pub fn feature_map(&self, image: &Tensor) -> Result<Tensor> {
        image.expect_shape(&self.input_shape, "black-box input")?;
        self.run(0..self.split_index + 1, image)
    }

    /// Probabilities from a feature map, through the layers after the split.
    pub fn resume_forward(&self, fmap: &Tensor) -> Result<Tensor> {
        fmap.expect_shape(&self.feature_shape(), "feature map")?;
        self.run(self.split_index + 1..self.layers.len(), fmap)
    }

    /// Gradient of `output_grad · resume_forward(fmap)` with respect to `fmap`.
    pub fn resume_backward(&self, fmap: &Tensor, output_grad: &Tensor) -> Result<Tensor> {
        fmap.expect_shape(&self.feature_shape(), "feature map")?;
        output_grad.expect_shape(&[self.num_classes], "output gradient")?;
        let rest = &self.layers[self.split_index + 1..];
        let mut tape = GradientTape::new();
        let mut x = fmap.clone();
        for layer in rest {
            x = layers::forward(layer, &x, &mut tape)?;
        }
        let mut g = output_grad.clone();
        for layer in rest.iter().rev() {
            g = layers::backward(layer, &g, &mut tape)?.input;
        }
        Ok(g)
    }

    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        Ok(self.forward(image)?.argmax())
    }

    /// Cross-entropy against `label` and gradients for every layer (in layer
    /// order).
    pub fn loss_and_grads(&self, image: &Tensor, label: usize) -> Result<(f64, Vec<LayerGrad>)> {
        image.expect_shape(&self.input_shape, "black-box input")?;
        if label >= self.num_classes {
            return Err(Error::Index(format!("label {label} with {} classes", self.num_classes)));
        }
        let mut tape = GradientTape::new();
        let mut x = image.clone();
        for layer in &self.layers {
            x = layers::forward(layer, &x, &mut tape)?;
        }
        let mut target = Tensor::zeros(&[self.num_classes]);
        target.data_mut()[label] = 1.0;
        let loss = cross_entropy(x.data(), target.data());
        let last = self.layers.len() - 1;
        tape.discard(LayerKind::Softmax)?;
        let mut g = layers::softmax_cross_entropy_grad(&x, &target)?;
        let mut grads = vec![None; self.layers.len()];
        grads[last] = Some(LayerGrad { input: g.clone(), weights: Tensor::empty(), bias: Tensor::empty() });
        for i in (0..last).rev() {
            let lg = layers::backward(&self.layers[i], &g, &mut tape)?;
            g = lg.input.clone();
            grads[i] = Some(lg);
        }
        Ok((loss, grads.into_iter().map(|g| g.expect("every layer visited")).collect()))
    }

    pub fn accuracy(&self, images: &[&Tensor], labels: &[usize]) -> Result<f64> {
        if images.is_empty() {
            return Err(Error::Empty("accuracy over no images".into()));
        }
        let preds = images.par_iter().map(|img| self.predict(img)).collect::<Result<Vec<_>>>()?;
        let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(100.0 * correct as f64 / images.len() as f64)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weights, &mut l.bias]).filter(|t| !t.is_empty()).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC);
        w.u32(self.num_classes as u32);
        w.u32(self.split_index as u32);
        write_layers(&mut w, &self.input_shape, &self.layers);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, MAGIC)?;
        let num_classes = r.u32()? as usize;
        let split_index = r.u32()? as usize;
        let (input_shape, layers) = read_layers(&mut r)?;
        r.finish()?;
        let model = BlackBox::new(layers, split_index, input_shape)?;
        if model.num_classes != num_classes {
            return Err(Error::Format("class count disagrees with the output layer".into()));
        }
        Ok(model)
    }
}

fn write_layers(w: &mut Writer, input_shape: &[usize], layers: &[LayerParams]) {
    w.u32(input_shape.len() as u32);
    for &d in input_shape {
        w.u32(d as u32);
    }
    w.u32(layers.len() as u32);
    for l in layers {
        w.u32(l.kind.tag());
        for h in l.kind.hyper() {
            w.u32(h);
        }
        w.tensor(&l.weights);
        w.tensor(&l.bias);
    }
}

fn read_layers(r: &mut Reader) -> Result<(Vec<usize>, Vec<LayerParams>)> {
    let rank = r.u32()? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("implausible input rank {rank}")));
    }
    let input_shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let tag = r.u32()?;
        let hyper = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        let kind = LayerKind::from_tag(tag, hyper)?;
        let weights = r.tensor()?;
        let bias = r.tensor()?;
        layers.push(LayerParams::new(kind, weights, bias).map_err(|e| Error::Format(e.to_string()))?);
    }
    Ok((input_shape, layers))
}

/// Trains the desk architecture from scratch on the training split.
pub fn train_blackbox(dataset: &LabeledDataset, cfg: &TrainConfig) -> Result<(BlackBox, TrainReport)> {
    let first = dataset.images.first().ok_or_else(|| Error::Empty("dataset has no images".into()))?;
    let model = BlackBox::desk(dataset.num_classes, first.shape(), seeding::derive(cfg.seed, "bb-init"))?;
    let train = dataset.indices(Split::Train);
    let images: Vec<&Tensor> = train.iter().map(|&i| &dataset.images[i]).collect();
    let labels: Vec<usize> = train.iter().map(|&i| dataset.labels[i]).collect();
    train_model(model, &images, &labels, cfg)
}

/// Minibatch Adam on cross-entropy for an arbitrary architecture.
pub fn train_model(
    mut model: BlackBox,
    images: &[&Tensor],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(BlackBox, TrainReport)> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Empty("no training images".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= model.num_classes) {
        return Err(Error::Index(format!("label {bad} with {} classes", model.num_classes)));
    }
    let mut order_rng = seeding::rng(seeding::derive(cfg.seed, "bb-order"));
    let mut adam = Adam::new(AdamConfig::new(cfg.learning_rate, cfg.weight_decay));
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut report = TrainReport::default();
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let per_sample = batch
                .par_iter()
                .map(|&i| model.loss_and_grads(images[i], labels[i]))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::Divergence { step: report.steps, detail: e.to_string() })?;
            let scale = 1.0 / batch.len() as f64;
            let mut loss = 0.0;
            let mut sum: Vec<Tensor> = Vec::new();
            for (l, grads) in per_sample {
                loss += l;
                let flat = grads.into_iter().flat_map(|g| [g.weights, g.bias]).filter(|t| !t.is_empty());
                if sum.is_empty() {
                    sum = flat.collect();
                } else {
                    for (s, g) in sum.iter_mut().zip(flat) {
                        s.axpy(1.0, &g)?;
                    }
                }
            }
            let loss = loss * scale;
            if !loss.is_finite() {
                return Err(Error::Divergence { step: report.steps, detail: format!("loss {loss}") });
            }
            let grads: Vec<Tensor> = sum.into_iter().map(|g| g.scale(scale)).collect();
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            adam.step(&mut model.params_mut(), &grad_refs);
            report.steps += 1;
            epoch_loss += loss * batch.len() as f64;
        }
        report.epoch_losses.push(epoch_loss / images.len() as f64);
    }
    report.train_accuracy = model.accuracy(images, labels)?;
    Ok((model, report))
}
