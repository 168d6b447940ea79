//! Joint training of the generator and the three discriminators.
//!
//! Each step draws a batch, updates Dg, Da and Ds on the combined
//! discriminator objective, then updates the generator against the freshly
//! updated discriminators. The attribute and segmentation networks stay
//! frozen throughout.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use semfill_nn::{exec, AdamConfig, AdamState, Backprop, Scalar, Tensor};

use crate::checkpoint::{restore_vec, CheckpointKind, Container, Header};
use crate::config::ExperimentConfig;
use crate::disc::{sample_mismatched, Condition, DiscKind, Discriminator, Mismatch};
use crate::domain::{
    apply_mask, grids_to_tensor, images_to_tensor, one_hot, AttributeVector, Image, SegmentationMap,
};
use crate::embed::{AttributeNet, SegmentationNet};
use crate::error::{io_err, rejected, Error, Result};
use crate::generator::GeneratorNet;
use crate::losses::{fake_term, mean_term, real_term, LossWeights};
use crate::nets::{vectors_to_tensor, Arch, FusedTrace, ParamSet};
use crate::seed;
use crate::synth::{sample_mask, Dataset, Split};

/// Header line of the loss log.
pub const LOSS_LOG_HEADER: &str = "step,loss_Dg,loss_Da,loss_Ds,loss_D,loss_I,recon,adv";

/// Smoothing factor of the running loss averages.
const RUNNING_RATE: f64 = 0.02;

/// Generator and discriminators trained together.
#[derive(Debug, Clone, PartialEq)]
pub struct Networks<T = f32> {
    pub g: GeneratorNet<T>,
    pub dg: Discriminator<T>,
    pub da: Discriminator<T>,
    pub ds: Discriminator<T>,
}

impl<T: Scalar> Networks<T> {
    pub fn new(arch: &Arch, seed: u64) -> Self {
        Self {
            g: GeneratorNet::new(arch, seed),
            dg: Discriminator::new(DiscKind::Global, arch, seed),
            da: Discriminator::new(DiscKind::Attribute, arch, seed),
            ds: Discriminator::new(DiscKind::Segmentation, arch, seed),
        }
    }
}

/// One batch in tensor form.
///
/// `x`, `seg_x` and `attr_x` feed the generator (masked image and the
/// frozen networks' predictions on it); `attr_y` and `seg_y` are the frozen
/// predictions on the clean image, used as matched conditions; the `_bar`
/// tensors are the mismatched conditions, absent for a degenerate batch.
#[derive(Debug, Clone)]
pub struct BatchTensors<T> {
    pub y: Tensor<T>,
    pub x: Tensor<T>,
    pub seg_x: Tensor<T>,
    pub attr_x: Tensor<T>,
    pub attr_y: Tensor<T>,
    pub seg_y: Tensor<T>,
    pub attr_bar: Option<Tensor<T>>,
    pub seg_bar: Option<Tensor<T>>,
}

/// Untensorized batch contents.
#[derive(Debug, Clone, Copy)]
pub struct BatchParts<'a> {
    pub y: &'a [&'a Image],
    pub x: &'a [&'a Image],
    pub seg_x: &'a [&'a SegmentationMap],
    pub attr_x: &'a [&'a AttributeVector],
    pub seg_y: &'a [&'a SegmentationMap],
    pub attr_y: &'a [&'a AttributeVector],
}

fn seg_tensor<T: Scalar>(maps: &[&SegmentationMap], classes: usize) -> Result<Tensor<T>> {
    let hots = maps
        .iter()
        .map(|m| one_hot(m, classes))
        .collect::<Result<Vec<_>>>()?;
    grids_to_tensor(&hots.iter().collect::<Vec<_>>())
}

fn attr_tensor<T: Scalar>(attrs: &[&AttributeVector]) -> Result<Tensor<T>> {
    vectors_to_tensor(&attrs.iter().map(|a| a.values()).collect::<Vec<_>>())
}

impl<T: Scalar> BatchTensors<T> {
    pub fn build(parts: BatchParts<'_>, mismatch: &Mismatch, classes: usize) -> Result<Self> {
        let n = parts.y.len();
        if [
            parts.x.len(),
            parts.seg_x.len(),
            parts.attr_x.len(),
            parts.seg_y.len(),
            parts.attr_y.len(),
        ]
        .iter()
        .any(|&l| l != n)
            || mismatch.source.len() != n
        {
            return Err(rejected("batch parts differ in length"));
        }
        let (attr_bar, seg_bar) = if mismatch.degenerate {
            (None, None)
        } else {
            (
                Some(attr_tensor(&mismatch.apply(parts.attr_y))?),
                Some(seg_tensor(&mismatch.apply(parts.seg_y), classes)?),
            )
        };
        Ok(Self {
            y: images_to_tensor(parts.y)?,
            x: images_to_tensor(parts.x)?,
            seg_x: seg_tensor(parts.seg_x, classes)?,
            attr_x: attr_tensor(parts.attr_x)?,
            attr_y: attr_tensor(parts.attr_y)?,
            seg_y: seg_tensor(parts.seg_y, classes)?,
            attr_bar,
            seg_bar,
        })
    }

    pub fn len(&self) -> usize {
        self.y.n()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Discriminator-side losses of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscLosses {
    pub dg: f64,
    pub da: f64,
    pub ds: f64,
}

/// Generator-side losses of one batch; `total = recon + beta * adv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenLosses {
    pub recon: f64,
    pub adv: f64,
    pub total: f64,
}

fn logits_of<T: Scalar>(t: &FusedTrace<T>, what: &'static str) -> Result<Vec<f64>> {
    let v: Vec<f64> = t.output().data().iter().map(|x| x.as_f64()).collect();
    match v.iter().position(|l| !l.is_finite()) {
        Some(i) => Err(Error::NonFinite { what, index: i }),
        None => Ok(v),
    }
}

/// Scores `[real; fake; (mismatch)]` stacked along the batch and returns the
/// mean loss and per-logit gradient of the discriminator objective.
fn stacked_loss(logits: &[f64], n: usize, weight: f64) -> (f64, Vec<f64>) {
    let (real, rg) = mean_term(&logits[..n], real_term, weight);
    let mut loss = real;
    let mut grad = rg;
    for chunk in logits[n..].chunks(n) {
        let (l, g) = mean_term(chunk, fake_term, weight);
        loss += l;
        grad.extend(g);
    }
    (loss, grad)
}

fn disc_pass<T: Scalar>(
    d: &mut Discriminator<T>,
    images: &Tensor<T>,
    cond: Condition<'_, T>,
    n: usize,
    weight: f64,
    what: &'static str,
) -> Result<f64> {
    let trace = d.forward(images, cond)?;
    let logits = logits_of(&trace, what)?;
    let (loss, grad) = stacked_loss(&logits, n, weight);
    if weight != 0.0 {
        d.backward(&trace, &grad, Backprop::PARAMS);
    }
    Ok(loss)
}

/// Combined discriminator objective on real `b.y` and generated `z`.
///
/// Accumulates gradients of `loss_Dg + lambda_a loss_Da + lambda_s loss_Ds`
/// into the discriminator parameters. A discriminator whose weight is zero
/// is evaluated for reporting but receives no gradient.
pub fn discriminator_objective<T: Scalar>(
    nets: &mut Networks<T>,
    b: &BatchTensors<T>,
    z: &Tensor<T>,
    w: &LossWeights,
) -> Result<DiscLosses> {
    let n = b.len();
    let yz = Tensor::concat_batch(&[&b.y, z])?;
    let dg = disc_pass(&mut nets.dg, &yz, Condition::None, n, 1.0, "global logit")?;

    let (imgs, attrs) = match &b.attr_bar {
        Some(bar) => (
            Tensor::concat_batch(&[&b.y, z, &b.y])?,
            Tensor::concat_batch(&[&b.attr_y, &b.attr_y, bar])?,
        ),
        None => (yz.clone(), Tensor::concat_batch(&[&b.attr_y, &b.attr_y])?),
    };
    let da = disc_pass(
        &mut nets.da,
        &imgs,
        Condition::Attributes(&attrs),
        n,
        w.lambda_a,
        "attribute logit",
    )?;

    let (imgs, segs) = match &b.seg_bar {
        Some(bar) => (
            Tensor::concat_batch(&[&b.y, z, &b.y])?,
            Tensor::concat_batch(&[&b.seg_y, &b.seg_y, bar])?,
        ),
        None => (yz, Tensor::concat_batch(&[&b.seg_y, &b.seg_y])?),
    };
    let ds = disc_pass(
        &mut nets.ds,
        &imgs,
        Condition::Segmentation(&segs),
        n,
        w.lambda_s,
        "segmentation logit",
    )?;
    Ok(DiscLosses { dg, da, ds })
}

/// Per-sample reconstruction distances and the gradient of their batch mean.
pub fn reconstruction<T: Scalar>(
    z: &Tensor<T>,
    y: &Tensor<T>,
    squared: bool,
) -> Result<(Vec<f64>, Tensor<T>)> {
    if z.shape() != y.shape() {
        return Err(rejected(format!(
            "output {:?} and target {:?} differ",
            z.shape(),
            y.shape()
        )));
    }
    let n = z.n();
    let mut grad = Tensor::zeros(n, z.c(), z.h(), z.w());
    let mut dists = Vec::with_capacity(n);
    for i in 0..n {
        let (zs, ys) = (z.sample(i), y.sample(i));
        let sq: f64 = zs
            .iter()
            .zip(ys)
            .map(|(&a, &b)| {
                let d = a.as_f64() - b.as_f64();
                d * d
            })
            .sum();
        let norm = sq.sqrt();
        let (dist, scale) = if squared {
            (sq, 2.0 / n as f64)
        } else if norm > 0.0 {
            (norm, 1.0 / (norm * n as f64))
        } else {
            (0.0, 0.0)
        };
        for ((g, &a), &b) in grad.sample_mut(i).iter_mut().zip(zs).zip(ys) {
            *g = T::from_f64((a.as_f64() - b.as_f64()) * scale);
        }
        dists.push(dist);
    }
    Ok((dists, grad))
}

/// Generator objective for the output recorded in `trace`.
///
/// Accumulates `d loss_I / d theta_G` into the generator parameters. The
/// discriminators only pass gradients through to their input.
pub fn generator_objective<T: Scalar>(
    nets: &mut Networks<T>,
    b: &BatchTensors<T>,
    trace: &FusedTrace<T>,
    w: &LossWeights,
    squared: bool,
) -> Result<GenLosses> {
    let z = trace.output();
    let n = b.len();
    let (dists, mut dz) = reconstruction(z, &b.y, squared)?;
    let recon = dists.iter().sum::<f64>() / n as f64;

    let mut adv = 0.0;
    let parts: [(&mut Discriminator<T>, Condition<'_, T>, f64, &'static str); 3] = [
        (&mut nets.dg, Condition::None, 1.0, "global logit"),
        (
            &mut nets.da,
            Condition::Attributes(&b.attr_y),
            w.lambda_a,
            "attribute logit",
        ),
        (
            &mut nets.ds,
            Condition::Segmentation(&b.seg_y),
            w.lambda_s,
            "segmentation logit",
        ),
    ];
    for (d, cond, weight, what) in parts {
        if weight == 0.0 {
            continue;
        }
        let t = d.forward(z, cond)?;
        let logits = logits_of(&t, what)?;
        let (l, g) = mean_term(&logits, real_term, w.beta * weight);
        adv += weight * l;
        if w.beta != 0.0 {
            let dx = d
                .backward(&t, &g, Backprop::INPUT)
                .expect("input gradient requested");
            dz.add_assign(&dx);
        }
    }
    let total = recon + w.beta * adv;
    nets.g.backward(trace, dz);
    Ok(GenLosses { recon, adv, total })
}

/// Losses reported for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: u64,
    pub loss_dg: f64,
    pub loss_da: f64,
    pub loss_ds: f64,
    pub loss_d: f64,
    pub loss_i: f64,
    pub recon: f64,
    pub adv: f64,
}

impl StepLosses {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.loss_dg,
            self.loss_da,
            self.loss_ds,
            self.loss_d,
            self.loss_i,
            self.recon,
            self.adv
        )
    }

    fn values(&self) -> [f64; 7] {
        [
            self.loss_dg,
            self.loss_da,
            self.loss_ds,
            self.loss_d,
            self.loss_i,
            self.recon,
            self.adv,
        ]
    }
}

/// Exponential moving averages of the step losses.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RunningLosses {
    pub count: u64,
    pub loss_dg: f64,
    pub loss_da: f64,
    pub loss_ds: f64,
    pub loss_d: f64,
    pub loss_i: f64,
    pub recon: f64,
    pub adv: f64,
}

impl RunningLosses {
    fn update(&mut self, l: &StepLosses) {
        let rate = if self.count == 0 { 1.0 } else { RUNNING_RATE };
        let fields = [
            &mut self.loss_dg,
            &mut self.loss_da,
            &mut self.loss_ds,
            &mut self.loss_d,
            &mut self.loss_i,
            &mut self.recon,
            &mut self.adv,
        ];
        for (f, v) in fields.into_iter().zip(l.values()) {
            *f += rate * (v - *f);
        }
        self.count += 1;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizers {
    pub g: AdamState<f32>,
    pub dg: AdamState<f32>,
    pub da: AdamState<f32>,
    pub ds: AdamState<f32>,
}

impl Optimizers {
    fn new(nets: &Networks<f32>) -> Self {
        Self {
            g: AdamState::for_params(&nets.g.params()),
            dg: AdamState::for_params(&nets.dg.params()),
            da: AdamState::for_params(&nets.da.params()),
            ds: AdamState::for_params(&nets.ds.params()),
        }
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: ExperimentConfig,
    /// Completed steps.
    pub step: u64,
    pub nets: Networks<f32>,
    pub attr_net: AttributeNet,
    pub seg_net: SegmentationNet,
    pub opt: Optimizers,
    pub running: RunningLosses,
}

impl TrainState {
    /// Fresh networks for `config`, with the given frozen auxiliary nets.
    pub fn new(
        config: ExperimentConfig,
        attr_net: AttributeNet,
        seg_net: SegmentationNet,
    ) -> Result<Self> {
        config.validate()?;
        if attr_net.n_attr != config.n_attr {
            return Err(Error::Config(format!(
                "attribute network predicts {} attributes, config has n_attr = {}",
                attr_net.n_attr, config.n_attr
            )));
        }
        if seg_net.n_classes != config.n_classes {
            return Err(Error::Config(format!(
                "segmentation network predicts {} classes, config has n_classes = {}",
                seg_net.n_classes, config.n_classes
            )));
        }
        let nets = Networks::new(&config.arch(), seed::derive(config.seed, "networks"));
        let opt = Optimizers::new(&nets);
        Ok(Self {
            config,
            step: 0,
            nets,
            attr_net,
            seg_net,
            opt,
            running: RunningLosses::default(),
        })
    }

    pub fn weights(&self) -> LossWeights {
        self.config.weights
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig::new(
            self.config.lr,
            self.config.adam_beta1,
            self.config.adam_beta2,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut h = Header::new(
            CheckpointKind::Train,
            &self.config,
            self.config.arch(),
            self.step,
        );
        h.extra.insert(
            "running".into(),
            serde_json::to_value(self.running).expect("serializable"),
        );
        h.extra.insert(
            "adam_t".into(),
            serde_json::json!({
                "g": self.opt.g.t, "dg": self.opt.dg.t, "da": self.opt.da.t, "ds": self.opt.ds.t,
            }),
        );
        h.extra.insert(
            "attr_arch".into(),
            serde_json::to_value(aux_arch(&self.attr_net, &self.config)).expect("serializable"),
        );
        h.extra.insert(
            "seg_arch".into(),
            serde_json::to_value(seg_arch(&self.seg_net, &self.config)).expect("serializable"),
        );
        let mut c = Container::new(h);
        c.push_params(&self.nets.g);
        c.push_params(&self.nets.dg);
        c.push_params(&self.nets.da);
        c.push_params(&self.nets.ds);
        c.push_params(&self.attr_net);
        c.push_params(&self.seg_net);
        for (tag, net, st) in self.optimizer_views() {
            for (k, p) in net.iter().enumerate() {
                c.push(
                    format!("opt.{tag}.m.{}", p),
                    vec![st.m[k].len()],
                    st.m[k].clone(),
                );
                c.push(
                    format!("opt.{tag}.v.{}", p),
                    vec![st.v[k].len()],
                    st.v[k].clone(),
                );
            }
        }
        c.write(path)
    }

    fn optimizer_views(&self) -> [(&'static str, Vec<String>, &AdamState<f32>); 4] {
        let names = |ps: Vec<&semfill_nn::Param<f32>>| {
            ps.iter().map(|p| p.name.clone()).collect::<Vec<_>>()
        };
        [
            ("g", names(self.nets.g.params()), &self.opt.g),
            ("dg", names(self.nets.dg.params()), &self.opt.dg),
            ("da", names(self.nets.da.params()), &self.opt.da),
            ("ds", names(self.nets.ds.params()), &self.opt.ds),
        ]
    }

    /// Loads a training checkpoint. With `expected`, the stored config
    /// fingerprint must match it.
    pub fn load(path: &Path, expected: Option<&ExperimentConfig>) -> Result<Self> {
        let c = Container::read(path)?;
        if c.header.kind != CheckpointKind::Train {
            return Err(Error::IncompatibleCheckpoint(format!(
                "expected a training checkpoint, found {:?}",
                c.header.kind
            )));
        }
        if let Some(cfg) = expected {
            if cfg.fingerprint() != c.header.fingerprint {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "config fingerprint {} does not match checkpoint {}",
                    cfg.fingerprint(),
                    c.header.fingerprint
                )));
            }
        }
        let config = c.header.experiment_config()?;
        let extra = |key: &str| {
            c.header
                .extra
                .get(key)
                .cloned()
                .ok_or_else(|| Error::IncompatibleCheckpoint(format!("header lacks {key:?}")))
        };
        let parse_err = |e: serde_json::Error| Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        };
        let attr_arch: Arch = serde_json::from_value(extra("attr_arch")?).map_err(parse_err)?;
        let seg_arch: Arch = serde_json::from_value(extra("seg_arch")?).map_err(parse_err)?;
        let running: RunningLosses =
            serde_json::from_value(extra("running")?).map_err(parse_err)?;
        let adam_t: std::collections::BTreeMap<String, u64> =
            serde_json::from_value(extra("adam_t")?).map_err(parse_err)?;

        let mut attr_net = AttributeNet::new(&attr_arch, 0);
        c.restore_params(&mut attr_net)?;
        let mut seg_net = SegmentationNet::new(&seg_arch, 0);
        c.restore_params(&mut seg_net)?;
        let mut state = Self::new(config, attr_net, seg_net)?;
        c.restore_params(&mut state.nets.g)?;
        c.restore_params(&mut state.nets.dg)?;
        c.restore_params(&mut state.nets.da)?;
        c.restore_params(&mut state.nets.ds)?;
        let names: Vec<(&str, Vec<String>)> = state
            .optimizer_views()
            .into_iter()
            .map(|(tag, names, _)| (tag, names))
            .collect();
        for (tag, names) in names {
            let st = match tag {
                "g" => &mut state.opt.g,
                "dg" => &mut state.opt.dg,
                "da" => &mut state.opt.da,
                _ => &mut state.opt.ds,
            };
            st.t = adam_t.get(tag).copied().unwrap_or(0);
            for (k, name) in names.iter().enumerate() {
                restore_vec(&c, &format!("opt.{tag}.m.{name}"), &mut st.m[k])?;
                restore_vec(&c, &format!("opt.{tag}.v.{name}"), &mut st.v[k])?;
            }
        }
        state.step = c.header.step;
        state.running = running;
        Ok(state)
    }
}

fn aux_arch(net: &AttributeNet, cfg: &ExperimentConfig) -> Arch {
    let mut a = cfg.arch();
    a.n_attr = net.n_attr;
    a.attr_width = net.feature_len() / 8;
    a
}

fn seg_arch(net: &SegmentationNet, cfg: &ExperimentConfig) -> Arch {
    let mut a = cfg.arch();
    a.n_classes = net.n_classes;
    a.seg_width = match net.body.layers().first() {
        Some(semfill_nn::Layer::Conv(c)) => c.spec.out_channels,
        _ => a.seg_width,
    };
    a
}

/// Training split of the inpainting dataset with the frozen networks'
/// predictions on the clean images, computed once.
#[derive(Debug, Clone)]
pub struct TrainData<'a> {
    pub dataset: &'a Dataset,
    pub indices: Vec<usize>,
    pub attr_y: Vec<AttributeVector>,
    pub seg_y: Vec<SegmentationMap>,
}

impl<'a> TrainData<'a> {
    pub fn prepare(
        dataset: &'a Dataset,
        attr_net: &AttributeNet,
        seg_net: &SegmentationNet,
    ) -> Result<Self> {
        Self::from_indices(
            dataset,
            dataset.split_indices(Split::Train),
            attr_net,
            seg_net,
        )
    }

    pub fn from_indices(
        dataset: &'a Dataset,
        indices: Vec<usize>,
        attr_net: &AttributeNet,
        seg_net: &SegmentationNet,
    ) -> Result<Self> {
        if indices.len() < 2 {
            return Err(Error::Config(
                "training needs at least two training samples".into(),
            ));
        }
        let clean: Vec<&Image> = indices.iter().map(|&i| &dataset.samples[i].image).collect();
        let attr_y = attr_net.predict_batch(&clean)?;
        let seg_y = seg_net
            .predict_batch(&clean)?
            .into_iter()
            .map(|p| p.map)
            .collect();
        Ok(Self {
            dataset,
            indices,
            attr_y,
            seg_y,
        })
    }
}

/// Positions (into the training list) and hole seeds of the samples in a
/// step's batch. Samples are visited epoch by epoch in a seeded order.
pub fn batch_plan(seed: u64, train_len: usize, batch: usize, step: u64) -> Vec<(usize, u64)> {
    let order_seed = seed::derive(seed, "batch-order");
    let mask_seed = seed::derive(seed, "batch-mask");
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch)
        .map(|k| {
            let p = step * batch as u64 + k as u64;
            let epoch = p / train_len as u64;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut order: Vec<usize> = (0..train_len).collect();
                order.shuffle(&mut seed::rng(seed::derive_index(order_seed, epoch)));
                cached = Some((epoch, order));
            }
            let order = &cached.as_ref().expect("just filled").1;
            (
                order[(p % train_len as u64) as usize],
                seed::derive_index(mask_seed, p),
            )
        })
        .collect()
}

/// Assembles the batch of step `step`: clean targets, random holes, the
/// frozen predictions on the masked inputs, and mismatched conditions.
pub fn prepare_batch(
    state: &TrainState,
    data: &TrainData<'_>,
    step: u64,
) -> Result<BatchTensors<f32>> {
    let cfg = &state.config;
    let plan = batch_plan(cfg.seed, data.indices.len(), cfg.batch, step);
    let canvas = data.dataset.canvas;
    let masked = exec::map(plan.len(), |k| {
        let (pos, mseed) = plan[k];
        let mask = sample_mask(mseed, canvas)?;
        apply_mask(&data.dataset.samples[data.indices[pos]].image, &mask)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let x: Vec<&Image> = masked.iter().collect();
    let attr_x = state.attr_net.predict_batch(&x)?;
    let seg_x: Vec<SegmentationMap> = state
        .seg_net
        .predict_batch(&x)?
        .into_iter()
        .map(|p| p.map)
        .collect();

    let y: Vec<&Image> = plan
        .iter()
        .map(|&(p, _)| &data.dataset.samples[data.indices[p]].image)
        .collect();
    let attr_y: Vec<&AttributeVector> = plan.iter().map(|&(p, _)| &data.attr_y[p]).collect();
    let seg_y: Vec<&SegmentationMap> = plan.iter().map(|&(p, _)| &data.seg_y[p]).collect();
    let labels: Vec<Vec<bool>> = attr_y.iter().map(|a| a.bits()).collect();
    let mismatch = sample_mismatched(
        &labels,
        seed::derive_index(seed::derive(cfg.seed, "mismatch"), step),
    )?;
    BatchTensors::build(
        BatchParts {
            y: &y,
            x: &x,
            seg_x: &seg_x.iter().collect::<Vec<_>>(),
            attr_x: &attr_x.iter().collect::<Vec<_>>(),
            seg_y: &seg_y,
            attr_y: &attr_y,
        },
        &mismatch,
        cfg.n_classes,
    )
}

fn diverged(step: u64, parts: &[(&str, f64)]) -> Error {
    Error::Diverged {
        step,
        losses: parts
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(", "),
    }
}

/// One discriminator update followed by one generator update.
///
/// On a non-finite loss the state is left as it was before the call.
pub fn train_step(state: &mut TrainState, data: &TrainData<'_>) -> Result<StepLosses> {
    let step = state.step;
    let batch = prepare_batch(state, data, step)?;
    let w = state.weights();
    let adam = state.adam();

    let trace = state
        .nets
        .g
        .forward(&batch.x, &batch.seg_x, &batch.attr_x)?;
    let z = trace.output().clone();

    let backup = (
        state.nets.dg.clone(),
        state.nets.da.clone(),
        state.nets.ds.clone(),
        state.opt.clone(),
    );
    state.nets.dg.zero_grad();
    state.nets.da.zero_grad();
    state.nets.ds.zero_grad();
    let d = match discriminator_objective(&mut state.nets, &batch, &z, &w) {
        Ok(d) => d,
        Err(Error::NonFinite { what, index }) => {
            return Err(diverged(
                step,
                &[(what, f64::NAN), ("batch_index", index as f64)],
            ))
        }
        Err(e) => return Err(e),
    };
    let loss_d = crate::losses::loss_d(d.dg, d.da, d.ds, &w);
    let d_parts = [
        ("loss_Dg", d.dg),
        ("loss_Da", d.da),
        ("loss_Ds", d.ds),
        ("loss_D", loss_d),
    ];
    if d_parts.iter().any(|(_, v)| !v.is_finite()) {
        return Err(diverged(step, &d_parts));
    }
    state.opt.dg.step(&adam, &mut state.nets.dg.params_mut());
    state.opt.da.step(&adam, &mut state.nets.da.params_mut());
    state.opt.ds.step(&adam, &mut state.nets.ds.params_mut());

    state.nets.g.zero_grad();
    let gen = generator_objective(
        &mut state.nets,
        &batch,
        &trace,
        &w,
        state.config.squared_recon,
    );
    let gen = match gen {
        Ok(g) if g.total.is_finite() && g.recon.is_finite() && g.adv.is_finite() => g,
        other => {
            (state.nets.dg, state.nets.da, state.nets.ds, state.opt) = backup;
            let mut parts = d_parts.to_vec();
            match other {
                Ok(g) => parts.extend([("loss_I", g.total), ("recon", g.recon), ("adv", g.adv)]),
                Err(Error::NonFinite { index, .. }) => {
                    parts.push(("non_finite_batch_index", index as f64))
                }
                Err(e) => return Err(e),
            }
            return Err(diverged(step, &parts));
        }
    };
    state.opt.g.step(&adam, &mut state.nets.g.params_mut());
    state.step += 1;

    let losses = StepLosses {
        step: state.step,
        loss_dg: d.dg,
        loss_da: d.da,
        loss_ds: d.ds,
        loss_d,
        loss_i: gen.total,
        recon: gen.recon,
        adv: gen.adv,
    };
    state.running.update(&losses);
    Ok(losses)
}

/// Paths written by [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutputs {
    pub final_checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

/// Runs steps until `config.steps`, appending to `out/losses.csv` and
/// writing `out/step_{n}.ckpt` every `checkpoint_every` steps plus
/// `out/final.ckpt` at the end. Resumes from `state.step`.
pub fn train(
    state: &mut TrainState,
    data: &TrainData<'_>,
    out: &Path,
    mut on_step: impl FnMut(&StepLosses),
) -> Result<TrainOutputs> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let loss_log = out.join("losses.csv");
    let mut kept = vec![LOSS_LOG_HEADER.to_string()];
    if state.step > 0 {
        if let Ok(text) = fs::read_to_string(&loss_log) {
            kept.extend(
                text.lines()
                    .skip(1)
                    .filter(|l| {
                        l.split(',')
                            .next()
                            .and_then(|s| s.parse::<u64>().ok())
                            .is_some_and(|s| s <= state.step)
                    })
                    .map(str::to_string),
            );
        }
    }
    let mut log = fs::File::create(&loss_log).map_err(io_err(&loss_log))?;
    for line in &kept {
        writeln!(log, "{line}").map_err(io_err(&loss_log))?;
    }
    while state.step < state.config.steps {
        let l = train_step(state, data)?;
        writeln!(log, "{}", l.csv_row()).map_err(io_err(&loss_log))?;
        on_step(&l);
        if state.step.is_multiple_of(state.config.checkpoint_every) {
            log.flush().map_err(io_err(&loss_log))?;
            state.save(&out.join(format!("step_{:07}.ckpt", state.step)))?;
        }
    }
    log.flush().map_err(io_err(&loss_log))?;
    let final_checkpoint = out.join("final.ckpt");
    state.save(&final_checkpoint)?;
    Ok(TrainOutputs {
        final_checkpoint,
        loss_log,
    })
}
