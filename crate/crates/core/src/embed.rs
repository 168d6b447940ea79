//! Pretrained auxiliary networks: the multi-label attribute classifier and
//! the per-pixel segmenter. Both are frozen once inpainting training starts.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use semfill_nn::{
    sigmoid, AdamConfig, AdamState, Backprop, ConvSpec, Layer, Param, Scalar, Sequential, Tensor,
};

use crate::domain::{apply_mask, images_to_tensor, AttributeVector, Grid, Image, SegmentationMap};
use crate::error::{rejected, Result};
use crate::nets::{Arch, ParamSet};
use crate::seed;
use crate::synth::{sample_mask, Dataset, Split};
use semfill_nn::exec;

/// Largest batch pushed through a network at once during inference.
pub const INFER_CHUNK: usize = 64;

/// Multi-label attribute classifier: four stride-2 blocks, global average
/// pool, linear layer to one logit per attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeNet<T = f32> {
    pub trunk: Sequential<T>,
    pub head: Sequential<T>,
    pub n_attr: usize,
}

impl<T: Scalar> AttributeNet<T> {
    pub fn new(arch: &Arch, seed: u64) -> Self {
        let mut rng = seed::rng(seed::derive(seed, "attr-net"));
        let w = arch.attr_width;
        let trunk = Sequential::new("attr.trunk")
            .conv_act(ConvSpec::new(3, w, 3).stride(2), &mut rng)
            .conv_act(ConvSpec::new(w, 2 * w, 3).stride(2), &mut rng)
            .conv_act(ConvSpec::new(2 * w, 4 * w, 3).stride(2), &mut rng)
            .conv_act(ConvSpec::new(4 * w, 8 * w, 3).stride(2), &mut rng)
            .push(Layer::GlobalAvgPool);
        let head = Sequential::new("attr.head").dense(8 * w, arch.n_attr, &mut rng);
        Self {
            trunk,
            head,
            n_attr: arch.n_attr,
        }
    }

    pub fn feature_len(&self) -> usize {
        match self.head.layers().first() {
            Some(Layer::Dense(d)) => d.inputs,
            _ => 0,
        }
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.head.infer(&self.trunk.infer(x)?)?)
    }

    /// Mean binary cross-entropy over batch and attributes; accumulates
    /// parameter gradients.
    pub fn loss_and_grad(&mut self, x: &Tensor<T>, targets: &[Vec<f32>]) -> Result<f64> {
        let t_trace = self.trunk.forward(x)?;
        let h_trace = self.head.forward(t_trace.output())?;
        let logits = h_trace.output();
        let (n, k) = (logits.n(), self.n_attr);
        let scale = 1.0 / (n * k) as f64;
        let mut grad = Tensor::zeros(n, k, 1, 1);
        let mut loss = 0.0;
        for (i, row) in targets.iter().enumerate().take(n) {
            for (j, &t) in row.iter().enumerate().take(k) {
                let l = logits.sample(i)[j].as_f64();
                let t = t as f64;
                loss += (softplus(l) - t * l) * scale;
                grad.sample_mut(i)[j] = T::from_f64((sigmoid(l) - t) * scale);
            }
        }
        let dfeat = self
            .head
            .backward(&h_trace, grad, Backprop::FULL)
            .expect("input gradient requested");
        self.trunk.backward(&t_trace, dfeat, Backprop::PARAMS);
        Ok(loss)
    }
}

impl<T: Scalar> ParamSet<T> for AttributeNet<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.trunk.params();
        v.extend(self.head.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.trunk.params_mut();
        v.extend(self.head.params_mut());
        v
    }
}

fn check_attr_input(x: &Image) -> Result<()> {
    if !x.height().is_multiple_of(16) || !x.width().is_multiple_of(16) {
        return Err(rejected(format!(
            "attribute network needs sides divisible by 16, got {}x{}",
            x.height(),
            x.width()
        )));
    }
    Ok(())
}

impl AttributeNet<f32> {
    /// Sigmoid probabilities, one vector per image.
    pub fn predict_batch(&self, images: &[&Image]) -> Result<Vec<AttributeVector>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_CHUNK) {
            for img in chunk {
                check_attr_input(img)?;
            }
            let logits = self.logits(&images_to_tensor(chunk)?)?;
            for i in 0..logits.n() {
                let v = logits.sample(i).iter().map(|&l| sigmoid(l)).collect();
                out.push(AttributeVector::new(v)?);
            }
        }
        Ok(out)
    }

    pub fn predict(&self, x: &Image) -> Result<AttributeVector> {
        Ok(self.predict_batch(&[x])?.remove(0))
    }

    /// Pooled penultimate activations, used as retrieval descriptors.
    pub fn features_batch(&self, images: &[&Image]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_CHUNK) {
            for img in chunk {
                check_attr_input(img)?;
            }
            let f = self.trunk.infer(&images_to_tensor(chunk)?)?;
            out.extend((0..f.n()).map(|i| f.sample(i).to_vec()));
        }
        Ok(out)
    }

    pub fn extract_features(&self, x: &Image) -> Result<Vec<f32>> {
        Ok(self.features_batch(&[x])?.remove(0))
    }
}

/// Encoder, dilated middle, decoder; one logit per class and pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationNet<T = f32> {
    pub body: Sequential<T>,
    pub n_classes: usize,
}

impl<T: Scalar> SegmentationNet<T> {
    pub fn new(arch: &Arch, seed: u64) -> Self {
        let mut rng = seed::rng(seed::derive(seed, "seg-net"));
        let w = arch.seg_width;
        let body = Sequential::new("seg")
            .conv_act(ConvSpec::new(3, w, 3).stride(2), &mut rng)
            .conv_act(ConvSpec::new(w, 2 * w, 3).stride(2), &mut rng)
            .conv_act(ConvSpec::new(2 * w, 2 * w, 3).dilation(2), &mut rng)
            .conv_act(ConvSpec::new(2 * w, 2 * w, 3).dilation(4), &mut rng)
            .conv_act(ConvSpec::new(2 * w, 2 * w, 3).dilation(8), &mut rng)
            .push(Layer::Upsample2)
            .conv_act(ConvSpec::new(2 * w, w, 3), &mut rng)
            .push(Layer::Upsample2)
            .conv_act(ConvSpec::new(w, w, 3), &mut rng)
            .conv(ConvSpec::new(w, arch.n_classes, 1), &mut rng);
        Self {
            body,
            n_classes: arch.n_classes,
        }
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.body.infer(x)?)
    }

    /// Mean per-pixel cross-entropy; accumulates parameter gradients.
    pub fn loss_and_grad(&mut self, x: &Tensor<T>, targets: &[&[u8]]) -> Result<f64> {
        let trace = self.body.forward(x)?;
        let logits = trace.output();
        let [n, c, h, w] = logits.shape();
        let plane = h * w;
        let scale = 1.0 / (n * plane) as f64;
        let mut grad = Tensor::zeros(n, c, h, w);
        let mut loss = 0.0;
        for (i, labels) in targets.iter().enumerate().take(n) {
            let l = logits.sample(i);
            let g = grad.sample_mut(i);
            for p in 0..plane {
                let probs = softmax_at(l, c, plane, p);
                let t = labels[p] as usize;
                loss -= probs[t].max(1e-300).ln() * scale;
                for k in 0..c {
                    let ind = if k == t { 1.0 } else { 0.0 };
                    g[k * plane + p] = T::from_f64((probs[k] - ind) * scale);
                }
            }
        }
        self.body.backward(&trace, grad, Backprop::PARAMS);
        Ok(loss)
    }
}

impl<T: Scalar> ParamSet<T> for SegmentationNet<T> {
    fn params(&self) -> Vec<&Param<T>> {
        self.body.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.body.params_mut()
    }
}

/// Softmax over the class channels at one pixel.
fn softmax_at<T: Scalar>(logits: &[T], classes: usize, plane: usize, p: usize) -> Vec<f64> {
    let vals: Vec<f64> = (0..classes)
        .map(|k| logits[k * plane + p].as_f64())
        .collect();
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = vals.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Argmax labels plus the per-pixel class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationPrediction {
    pub map: SegmentationMap,
    pub probabilities: Grid,
}

impl SegmentationNet<f32> {
    pub fn predict_batch(&self, images: &[&Image]) -> Result<Vec<SegmentationPrediction>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_CHUNK) {
            let logits = self.logits(&images_to_tensor(chunk)?)?;
            let [_, c, h, w] = logits.shape();
            let plane = h * w;
            for i in 0..logits.n() {
                let l = logits.sample(i);
                let mut probs = vec![0.0f32; c * plane];
                let mut labels = vec![0u8; plane];
                for p in 0..plane {
                    let pr = softmax_at(l, c, plane, p);
                    let mut best = 0;
                    for k in 0..c {
                        probs[k * plane + p] = pr[k] as f32;
                        if pr[k] > pr[best] {
                            best = k;
                        }
                    }
                    labels[p] = best as u8;
                }
                out.push(SegmentationPrediction {
                    map: SegmentationMap::new(h, w, c, labels)?,
                    probabilities: Grid {
                        channels: c,
                        height: h,
                        width: w,
                        data: probs,
                    },
                });
            }
        }
        Ok(out)
    }

    pub fn predict(&self, x: &Image) -> Result<SegmentationPrediction> {
        Ok(self.predict_batch(&[x])?.remove(0))
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Share of training samples that are shown with a random hole.
    pub masked_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 32,
            lr: 1e-3,
            seed: 0,
            masked_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributeReport {
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
    /// Held-out accuracy per attribute on clean images.
    pub per_attribute_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    /// Same on randomly masked copies of the held-out images.
    pub mean_accuracy_masked: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentationReport {
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
    pub pixel_accuracy: f64,
    /// Mean over classes present in the held-out ground truth.
    pub mean_class_accuracy: f64,
    pub pixel_accuracy_masked: f64,
}

/// Clean or masked version of sample `i` for a given epoch.
fn training_view(ds: &Dataset, i: usize, epoch: usize, cfg: &PretrainConfig) -> Result<Image> {
    let s = seed::derive_index(seed::derive_index(cfg.seed, epoch as u64), i as u64);
    let mut rng = seed::rng(s);
    if rng.random::<f64>() < cfg.masked_fraction {
        let mask = sample_mask(seed::derive(s, "mask"), ds.canvas)?;
        apply_mask(&ds.samples[i].image, &mask)
    } else {
        Ok(ds.samples[i].image.clone())
    }
}

fn held_out(ds: &Dataset) -> Vec<usize> {
    let mut idx = ds.split_indices(Split::Val);
    idx.extend(ds.split_indices(Split::Test));
    idx
}

/// Masked copies of the held-out images, one fixed hole per image.
pub fn masked_views(ds: &Dataset, indices: &[usize], seed: u64) -> Result<Vec<Image>> {
    exec::map(indices.len(), |k| {
        let i = indices[k];
        let mask = sample_mask(seed::derive_index(seed, i as u64), ds.canvas)?;
        apply_mask(&ds.samples[i].image, &mask)
    })
    .into_iter()
    .collect()
}

fn run_epochs<N, F>(
    net: &mut N,
    ds: &Dataset,
    cfg: &PretrainConfig,
    mut batch_loss: F,
) -> Result<Vec<f64>>
where
    N: ParamSet<f32>,
    F: FnMut(&mut N, &Tensor<f32>, &[usize]) -> Result<f64>,
{
    let train = ds.split_indices(Split::Train);
    if train.is_empty() || cfg.batch == 0 {
        return Err(rejected("pretraining needs a non-empty training split"));
    }
    let adam_cfg = AdamConfig::new(cfg.lr, 0.9, 0.999);
    let mut adam = AdamState::for_params(&net.params());
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order = train.clone();
        order.shuffle(&mut seed::rng(seed::derive_index(
            seed::derive(cfg.seed, "order"),
            epoch as u64,
        )));
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch) {
            let views = exec::map(chunk.len(), |k| training_view(ds, chunk[k], epoch, cfg))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Image> = views.iter().collect();
            let x = images_to_tensor(&refs)?;
            net.zero_grad();
            total += batch_loss(net, &x, chunk)?;
            batches += 1;
            adam.step(&adam_cfg, &mut net.params_mut());
        }
        losses.push(total / batches as f64);
    }
    Ok(losses)
}

/// Trains the attribute classifier on `ds` with per-attribute binary
/// cross-entropy and reports held-out accuracy.
pub fn pretrain_attribute(
    ds: &Dataset,
    arch: &Arch,
    cfg: &PretrainConfig,
) -> Result<(AttributeNet, AttributeReport)> {
    let mut net = AttributeNet::<f32>::new(arch, cfg.seed);
    let epoch_losses = run_epochs(&mut net, ds, cfg, |net, x, idx| {
        let targets: Vec<Vec<f32>> = idx
            .iter()
            .map(|&i| ds.samples[i].attributes.values().to_vec())
            .collect();
        net.loss_and_grad(x, &targets)
    })?;
    let report = evaluate_attribute(&net, ds, cfg.seed, epoch_losses)?;
    Ok((net, report))
}

fn attribute_accuracy(
    net: &AttributeNet,
    ds: &Dataset,
    idx: &[usize],
    images: &[&Image],
) -> Result<Vec<f64>> {
    let preds = net.predict_batch(images)?;
    let mut correct = vec![0usize; net.n_attr];
    for (p, &i) in preds.iter().zip(idx) {
        for ((c, a), b) in correct
            .iter_mut()
            .zip(p.bits())
            .zip(ds.samples[i].attributes.bits())
        {
            *c += (a == b) as usize;
        }
    }
    Ok(correct
        .iter()
        .map(|&c| c as f64 / idx.len().max(1) as f64)
        .collect())
}

pub fn evaluate_attribute(
    net: &AttributeNet,
    ds: &Dataset,
    seed: u64,
    epoch_losses: Vec<f64>,
) -> Result<AttributeReport> {
    let idx = held_out(ds);
    let clean: Vec<&Image> = idx.iter().map(|&i| &ds.samples[i].image).collect();
    let per_attribute_accuracy = attribute_accuracy(net, ds, &idx, &clean)?;
    let masked = masked_views(ds, &idx, seed::derive(seed, "holdout-mask"))?;
    let masked_refs: Vec<&Image> = masked.iter().collect();
    let masked_acc = attribute_accuracy(net, ds, &idx, &masked_refs)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok(AttributeReport {
        final_loss: epoch_losses.last().copied().unwrap_or(f64::NAN),
        epoch_losses,
        mean_accuracy: mean(&per_attribute_accuracy),
        mean_accuracy_masked: mean(&masked_acc),
        per_attribute_accuracy,
    })
}

/// Trains the segmenter on `ds` with per-pixel cross-entropy.
pub fn pretrain_segmentation(
    ds: &Dataset,
    arch: &Arch,
    cfg: &PretrainConfig,
) -> Result<(SegmentationNet, SegmentationReport)> {
    let mut net = SegmentationNet::<f32>::new(arch, cfg.seed);
    let epoch_losses = run_epochs(&mut net, ds, cfg, |net, x, idx| {
        let targets: Vec<&[u8]> = idx
            .iter()
            .map(|&i| ds.samples[i].segmentation.labels())
            .collect();
        net.loss_and_grad(x, &targets)
    })?;
    let report = evaluate_segmentation(&net, ds, cfg.seed, epoch_losses)?;
    Ok((net, report))
}

/// Overall pixel accuracy and mean per-class accuracy.
pub fn segmentation_accuracy(preds: &[SegmentationMap], truth: &[&SegmentationMap]) -> (f64, f64) {
    let classes = truth.first().map_or(0, |t| t.classes());
    let mut hit = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for (p, t) in preds.iter().zip(truth) {
        for (&a, &b) in p.labels().iter().zip(t.labels()) {
            total[b as usize] += 1;
            hit[b as usize] += (a == b) as usize;
        }
    }
    let all: usize = total.iter().sum();
    let pixel = hit.iter().sum::<usize>() as f64 / all.max(1) as f64;
    let present: Vec<f64> = (0..classes)
        .filter(|&k| total[k] > 0)
        .map(|k| hit[k] as f64 / total[k] as f64)
        .collect();
    let mean_class = present.iter().sum::<f64>() / present.len().max(1) as f64;
    (pixel, mean_class)
}

pub fn evaluate_segmentation(
    net: &SegmentationNet,
    ds: &Dataset,
    seed: u64,
    epoch_losses: Vec<f64>,
) -> Result<SegmentationReport> {
    let idx = held_out(ds);
    let truth: Vec<&SegmentationMap> = idx.iter().map(|&i| &ds.samples[i].segmentation).collect();
    let clean: Vec<&Image> = idx.iter().map(|&i| &ds.samples[i].image).collect();
    let preds: Vec<SegmentationMap> = net
        .predict_batch(&clean)?
        .into_iter()
        .map(|p| p.map)
        .collect();
    let (pixel_accuracy, mean_class_accuracy) = segmentation_accuracy(&preds, &truth);
    let masked = masked_views(ds, &idx, seed::derive(seed, "holdout-mask"))?;
    let masked_refs: Vec<&Image> = masked.iter().collect();
    let mpreds: Vec<SegmentationMap> = net
        .predict_batch(&masked_refs)?
        .into_iter()
        .map(|p| p.map)
        .collect();
    let (pixel_accuracy_masked, _) = segmentation_accuracy(&mpreds, &truth);
    Ok(SegmentationReport {
        final_loss: epoch_losses.last().copied().unwrap_or(f64::NAN),
        epoch_losses,
        pixel_accuracy,
        mean_class_accuracy,
        pixel_accuracy_masked,
    })
}
