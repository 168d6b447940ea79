//! The three-level discriminative network: global realness, attribute
//! matching and segmentation matching. All three output a single logit per
//! sample; scores in (0, 1) are the sigmoid of that logit.

use rand::seq::SliceRandom;
use rand::Rng;

use semfill_nn::{sigmoid, Backprop, ConvSpec, Param, Scalar, Sequential, Tensor};

use crate::domain::{
    grids_to_tensor, images_to_tensor, one_hot, AttributeVector, Image, SegmentationMap,
};
use crate::error::{rejected, Result};
use crate::nets::{vectors_to_tensor, Arch, FusedNet, FusedTrace, ParamSet};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscKind {
    /// Dg: image only.
    Global,
    /// Da: image plus attribute vector fused at the M2 x M2 map.
    Attribute,
    /// Ds: image concatenated with a one-hot segmentation map.
    Segmentation,
}

/// Conditioning input of a discriminator call.
#[derive(Debug, Clone, Copy)]
pub enum Condition<'a, T> {
    None,
    /// `N x N1 x 1 x 1`
    Attributes(&'a Tensor<T>),
    /// One-hot `N x C x H x W`
    Segmentation(&'a Tensor<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<T = f32> {
    pub kind: DiscKind,
    pub net: FusedNet<T>,
    pub n_attr: usize,
    pub n_classes: usize,
}

fn trunk<T: Scalar, R: Rng>(prefix: &str, in_c: usize, w: usize, rng: &mut R) -> Sequential<T> {
    Sequential::new(prefix)
        .conv_act(ConvSpec::new(in_c, w, 3).stride(2), rng)
        .conv_act(ConvSpec::new(w, 2 * w, 3).stride(2), rng)
        .conv_act(ConvSpec::new(2 * w, 4 * w, 3).stride(2), rng)
        .conv_act(ConvSpec::new(4 * w, 8 * w, 3).stride(2), rng)
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(kind: DiscKind, arch: &Arch, seed: u64) -> Self {
        let w = arch.d_width;
        let (mh, mw) = arch.m2();
        let flat = 8 * w * mh * mw;
        let net = match kind {
            DiscKind::Global => {
                let mut rng = seed::rng(seed::derive(seed, "disc-global"));
                let pre = trunk("dg.trunk", 3, w, &mut rng);
                let post = Sequential::new("dg.head").dense(flat, 1, &mut rng);
                FusedNet::new(pre, post, 0)
            }
            DiscKind::Attribute => {
                let mut rng = seed::rng(seed::derive(seed, "disc-attribute"));
                let pre = trunk("da.trunk", 3, w, &mut rng);
                let post = Sequential::new("da.head")
                    .conv_act(ConvSpec::new(8 * w + arch.n_attr, 8 * w, 1), &mut rng)
                    .conv_act(ConvSpec::new(8 * w, 8 * w, 3), &mut rng)
                    .dense(flat, 1, &mut rng);
                FusedNet::new(pre, post, arch.n_attr)
            }
            DiscKind::Segmentation => {
                let mut rng = seed::rng(seed::derive(seed, "disc-segmentation"));
                let pre = trunk("ds.trunk", 3 + arch.n_classes, w, &mut rng);
                let post = Sequential::new("ds.head").dense(flat, 1, &mut rng);
                FusedNet::new(pre, post, 0)
            }
        };
        Self {
            kind,
            net,
            n_attr: arch.n_attr,
            n_classes: arch.n_classes,
        }
    }

    fn inputs<'a>(
        &self,
        images: &'a Tensor<T>,
        cond: Condition<'a, T>,
    ) -> Result<(Tensor<T>, Option<&'a Tensor<T>>)> {
        if images.c() != 3 {
            return Err(rejected(format!(
                "discriminator image has {} channels, expected 3",
                images.c()
            )));
        }
        match (self.kind, cond) {
            (DiscKind::Global, Condition::None) => Ok((images.clone(), None)),
            (DiscKind::Attribute, Condition::Attributes(a)) => {
                if a.sample_len() != self.n_attr || a.n() != images.n() {
                    return Err(rejected(format!(
                        "attribute condition {:?} does not match {} x {}",
                        a.shape(),
                        images.n(),
                        self.n_attr
                    )));
                }
                Ok((images.clone(), Some(a)))
            }
            (DiscKind::Segmentation, Condition::Segmentation(s)) => {
                if s.c() != self.n_classes {
                    return Err(rejected(format!(
                        "segmentation condition has {} channels, expected {}",
                        s.c(),
                        self.n_classes
                    )));
                }
                Ok((images.concat_channels(s)?, None))
            }
            (kind, _) => Err(rejected(format!(
                "wrong condition kind for {kind:?} discriminator"
            ))),
        }
    }

    pub fn forward(&self, images: &Tensor<T>, cond: Condition<'_, T>) -> Result<FusedTrace<T>> {
        let (x, c) = self.inputs(images, cond)?;
        self.net.forward(&x, c)
    }

    /// One logit per sample.
    pub fn logits(&self, images: &Tensor<T>, cond: Condition<'_, T>) -> Result<Vec<f64>> {
        let (x, c) = self.inputs(images, cond)?;
        Ok(self
            .net
            .infer(&x, c)?
            .data()
            .iter()
            .map(|v| v.as_f64())
            .collect())
    }

    /// Backpropagates per-sample logit gradients. Returns the gradient with
    /// respect to the image channels when `mode.input` is set.
    pub fn backward(
        &mut self,
        trace: &FusedTrace<T>,
        dlogits: &[f64],
        mode: Backprop,
    ) -> Option<Tensor<T>> {
        let grad = Tensor::from_vec(
            [dlogits.len(), 1, 1, 1],
            dlogits.iter().map(|&g| T::from_f64(g)).collect(),
        )
        .expect("one gradient per sample");
        let dx = self.net.backward(trace, grad, mode)?;
        Some(match self.kind {
            DiscKind::Segmentation => dx.slice_channels(0, 3).expect("image channels come first"),
            _ => dx,
        })
    }
}

impl<T: Scalar> ParamSet<T> for Discriminator<T> {
    fn params(&self) -> Vec<&Param<T>> {
        self.net.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.net.params_mut()
    }
}

fn expect_kind<T>(d: &Discriminator<T>, kind: DiscKind) -> Result<()> {
    if d.kind != kind {
        return Err(rejected(format!(
            "expected a {kind:?} discriminator, got {:?}",
            d.kind
        )));
    }
    Ok(())
}

/// Dg(image).
pub fn score_global(d: &Discriminator, image: &Image) -> Result<f64> {
    expect_kind(d, DiscKind::Global)?;
    let x = images_to_tensor(&[image])?;
    Ok(sigmoid(d.logits(&x, Condition::None)?[0]))
}

/// Da(image, attr).
pub fn score_attribute(d: &Discriminator, image: &Image, attr: &AttributeVector) -> Result<f64> {
    expect_kind(d, DiscKind::Attribute)?;
    let x = images_to_tensor(&[image])?;
    let a = vectors_to_tensor(&[attr.values()])?;
    Ok(sigmoid(d.logits(&x, Condition::Attributes(&a))?[0]))
}

/// Ds(image, seg).
pub fn score_segmentation(d: &Discriminator, image: &Image, seg: &SegmentationMap) -> Result<f64> {
    expect_kind(d, DiscKind::Segmentation)?;
    let x = images_to_tensor(&[image])?;
    let s = grids_to_tensor(&[&one_hot(seg, d.n_classes)?])?;
    Ok(sigmoid(d.logits(&x, Condition::Segmentation(&s))?[0]))
}

/// Source index of each sample's mismatched label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mismatch {
    pub source: Vec<usize>,
    /// Every label in the batch is identical, so no mismatch exists and the
    /// mismatch terms must be skipped.
    pub degenerate: bool,
}

impl Mismatch {
    pub fn apply<L: Clone>(&self, labels: &[L]) -> Vec<L> {
        self.source.iter().map(|&j| labels[j].clone()).collect()
    }
}

/// Seeded derangement-like reassignment of labels within a batch.
///
/// Starts from a random single cycle over the batch (a derangement of
/// indices) and redirects any sample whose assigned label equals its own to
/// a random peer with a different label.
pub fn sample_mismatched<L: PartialEq>(labels: &[L], seed: u64) -> Result<Mismatch> {
    let n = labels.len();
    if n < 2 {
        return Err(rejected("mismatch sampling needs at least two samples"));
    }
    if labels.iter().all(|l| *l == labels[0]) {
        return Ok(Mismatch {
            source: (0..n).collect(),
            degenerate: true,
        });
    }
    let mut rng = seed::rng(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut source = vec![0; n];
    for k in 0..n {
        source[order[k]] = order[(k + 1) % n];
    }
    for i in 0..n {
        if labels[source[i]] == labels[i] {
            let peers: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[i]).collect();
            source[i] = peers[rng.random_range(0..peers.len())];
        }
    }
    Ok(Mismatch {
        source,
        degenerate: false,
    })
}
