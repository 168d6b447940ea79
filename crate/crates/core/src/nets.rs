//! Shared network plumbing: the two-stage conditioned stack used by the
//! generator and the discriminators, parameter enumeration and checksums.

use sha2::{Digest, Sha256};

use semfill_nn::{Backprop, Layer, Param, Scalar, Sequential, Tensor, Trace};

use crate::error::{rejected, Result};

/// Anything that owns an ordered list of named parameters.
pub trait ParamSet<T: Scalar> {
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// SHA-256 over parameter names and values (as little-endian f64).
    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            h.update(p.name.as_bytes());
            for v in &p.value {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `pre -> concat(replicated condition) -> post`.
///
/// With `cond_channels == 0` this is a plain stack split in two.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedNet<T> {
    pub pre: Sequential<T>,
    pub post: Sequential<T>,
    pub cond_channels: usize,
}

#[derive(Debug, Clone)]
pub struct FusedTrace<T> {
    pub pre: Trace<T>,
    pub post: Trace<T>,
    feature_channels: usize,
}

impl<T> FusedTrace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.post.output()
    }

    /// Activations right before the condition is appended.
    pub fn feature(&self) -> &Tensor<T> {
        self.pre.output()
    }
}

/// Tiles an `N x K x 1 x 1` condition over `h x w`.
pub fn replicate_condition<T: Scalar>(cond: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (n, k) = (cond.n(), cond.sample_len());
    let mut out = Tensor::zeros(n, k, h, w);
    for i in 0..n {
        let src = cond.sample(i);
        for (c, plane) in out.sample_mut(i).chunks_mut(h * w).enumerate() {
            plane.fill(src[c]);
        }
    }
    out
}

impl<T: Scalar> FusedNet<T> {
    pub fn new(pre: Sequential<T>, post: Sequential<T>, cond_channels: usize) -> Self {
        Self {
            pre,
            post,
            cond_channels,
        }
    }

    fn fuse(&self, feature: &Tensor<T>, cond: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        match (self.cond_channels, cond) {
            (0, None) => Ok(feature.clone()),
            (k, Some(c)) if k > 0 => {
                if c.n() != feature.n() || c.sample_len() != k {
                    return Err(rejected(format!(
                        "condition has shape {:?}, expected {} x {k}",
                        c.shape(),
                        feature.n()
                    )));
                }
                let grid = replicate_condition(c, feature.h(), feature.w());
                Ok(feature.concat_channels(&grid)?)
            }
            (k, _) => Err(rejected(format!(
                "network expects {k} condition channels, got {}",
                cond.map_or(0, |c| c.sample_len())
            ))),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, cond: Option<&Tensor<T>>) -> Result<FusedTrace<T>> {
        let pre = self.pre.forward(x)?;
        let fused = self.fuse(pre.output(), cond)?;
        let post = self.post.forward(&fused)?;
        Ok(FusedTrace {
            feature_channels: pre.output().c(),
            pre,
            post,
        })
    }

    pub fn infer(&self, x: &Tensor<T>, cond: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let feature = self.pre.infer(x)?;
        let fused = self.fuse(&feature, cond)?;
        Ok(self.post.infer(&fused)?)
    }

    /// Backpropagates into both stages; the condition gets no gradient.
    pub fn backward(
        &mut self,
        trace: &FusedTrace<T>,
        grad: Tensor<T>,
        mode: Backprop,
    ) -> Option<Tensor<T>> {
        let post_mode = Backprop {
            params: mode.params,
            input: true,
        };
        let dfused = self
            .post
            .backward(&trace.post, grad, post_mode)
            .expect("input gradient requested");
        let dfeature = if self.cond_channels == 0 {
            dfused
        } else {
            dfused
                .slice_channels(0, trace.feature_channels)
                .expect("fused tensor holds the feature channels")
        };
        self.pre.backward(&trace.pre, dfeature, mode)
    }

    /// Zeroes the weights that read the condition channels in the first
    /// layer after fusion, cutting the condition path.
    pub fn zero_condition_weights(&mut self) {
        if self.cond_channels == 0 {
            return;
        }
        if let Some(Layer::Conv(conv)) = self.post.layers_mut().first_mut() {
            let spec = conv.spec;
            let kk = spec.kernel * spec.kernel;
            let first = spec.in_channels - self.cond_channels;
            for o in 0..spec.out_channels {
                for ci in first..spec.in_channels {
                    let at = (o * spec.in_channels + ci) * kk;
                    conv.weight.value[at..at + kk].fill(T::zero());
                }
            }
        }
    }
}

impl<T: Scalar> ParamSet<T> for FusedNet<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.pre.params();
        v.extend(self.post.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.pre.params_mut();
        v.extend(self.post.params_mut());
        v
    }
}

impl<T: Scalar> ParamSet<T> for Sequential<T> {
    fn params(&self) -> Vec<&Param<T>> {
        Sequential::params(self)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        Sequential::params_mut(self)
    }
}

/// Stacks per-sample vectors into an `N x K x 1 x 1` tensor.
pub fn vectors_to_tensor<T: Scalar>(rows: &[&[f32]]) -> Result<Tensor<T>> {
    let k = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != k) {
        return Err(rejected("condition vectors differ in length"));
    }
    let data = rows
        .iter()
        .flat_map(|r| r.iter().map(|&v| T::from_f64(v as f64)))
        .collect();
    Ok(Tensor::from_vec([rows.len(), k, 1, 1], data)?)
}

/// Sizes shared by all networks of one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Arch {
    pub height: usize,
    pub width: usize,
    /// Attribute count (N1).
    pub n_attr: usize,
    /// Segmentation classes including background (C).
    pub n_classes: usize,
    /// Base channel width of the generator (encoder widths w, 2w, 4w).
    pub g_width: usize,
    /// Base width of the discriminator trunks (w, 2w, 4w, 8w).
    pub d_width: usize,
    pub attr_width: usize,
    pub seg_width: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            n_attr: crate::synth::NUM_ATTRIBUTES,
            n_classes: crate::synth::NUM_CLASSES,
            g_width: 48,
            d_width: 32,
            attr_width: 32,
            seg_width: 32,
        }
    }
}

impl Arch {
    /// Side of the generator bottleneck (M1).
    pub fn m1(&self) -> (usize, usize) {
        (self.height.div_ceil(4), self.width.div_ceil(4))
    }

    /// Side of the attribute discriminator fusion map (M2).
    pub fn m2(&self) -> (usize, usize) {
        let down = |s: usize| (0..4).fold(s, |s, _| s.div_ceil(2));
        (down(self.height), down(self.width))
    }
}
