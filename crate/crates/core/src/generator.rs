//! Encoder-decoder inpainting generator conditioned on a segmentation map
//! (concatenated with the input image) and an attribute vector (tiled over
//! the bottleneck and concatenated with the encoder features).

use semfill_nn::{Backprop, ConvSpec, Layer, Param, Scalar, Sequential, Tensor};

use crate::domain::{
    grids_to_tensor, images_to_tensor, one_hot, spatial_replicate, tensor_to_images,
    AttributeVector, Grid, Image, SegmentationMap,
};
use crate::error::{rejected, Result};
use crate::nets::{vectors_to_tensor, Arch, FusedNet, FusedTrace, ParamSet};
use crate::seed;

/// Dilation rates of the middle blocks.
pub const MID_DILATIONS: [usize; 4] = [2, 4, 8, 16];

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorNet<T = f32> {
    pub net: FusedNet<T>,
    pub n_attr: usize,
    pub n_classes: usize,
}

impl<T: Scalar> GeneratorNet<T> {
    pub fn new(arch: &Arch, seed: u64) -> Self {
        let mut rng = seed::rng(seed::derive(seed, "generator"));
        let w = arch.g_width;
        let encoder = Sequential::new("g.enc")
            .conv_act(ConvSpec::new(3 + arch.n_classes, w, 3), &mut rng)
            .conv_act(ConvSpec::new(w, 2 * w, 3).stride(2), &mut rng)
            .conv_act(ConvSpec::new(2 * w, 4 * w, 3).stride(2), &mut rng);
        let mut body = Sequential::new("g.body")
            .conv_act(ConvSpec::new(4 * w + arch.n_attr, 4 * w, 1), &mut rng);
        for d in MID_DILATIONS {
            body = body.conv_act(ConvSpec::new(4 * w, 4 * w, 3).dilation(d), &mut rng);
        }
        let body = body
            .push(Layer::Upsample2)
            .conv_act(ConvSpec::new(4 * w, 2 * w, 3), &mut rng)
            .push(Layer::Upsample2)
            .conv_act(ConvSpec::new(2 * w, w, 3), &mut rng)
            .conv(ConvSpec::new(w, 3, 3), &mut rng)
            .push(Layer::Sigmoid);
        Self {
            net: FusedNet::new(encoder, body, arch.n_attr),
            n_attr: arch.n_attr,
            n_classes: arch.n_classes,
        }
    }

    /// `x` is `N x 3 x H x W`, `seg` the one-hot `N x C x H x W` labels and
    /// `attr` the `N x N1 x 1 x 1` attribute probabilities.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        seg: &Tensor<T>,
        attr: &Tensor<T>,
    ) -> Result<FusedTrace<T>> {
        let input = self.input(x, seg, attr)?;
        self.net.forward(&input, Some(attr))
    }

    pub fn infer(&self, x: &Tensor<T>, seg: &Tensor<T>, attr: &Tensor<T>) -> Result<Tensor<T>> {
        let input = self.input(x, seg, attr)?;
        self.net.infer(&input, Some(attr))
    }

    fn input(&self, x: &Tensor<T>, seg: &Tensor<T>, attr: &Tensor<T>) -> Result<Tensor<T>> {
        if x.c() != 3 {
            return Err(rejected(format!(
                "generator image input has {} channels, expected 3",
                x.c()
            )));
        }
        if seg.c() != self.n_classes {
            return Err(rejected(format!(
                "generator segmentation input has {} channels, expected {}",
                seg.c(),
                self.n_classes
            )));
        }
        if attr.sample_len() != self.n_attr {
            return Err(rejected(format!(
                "generator attribute input has length {}, expected {}",
                attr.sample_len(),
                self.n_attr
            )));
        }
        if !x.h().is_multiple_of(4)
            || !x.w().is_multiple_of(4)
            || (seg.h(), seg.w()) != (x.h(), x.w())
        {
            return Err(rejected(format!(
                "generator spatial sizes {}x{} (image) and {}x{} (segmentation) must match and be divisible by 4",
                x.h(),
                x.w(),
                seg.h(),
                seg.w()
            )));
        }
        Ok(x.concat_channels(seg)?)
    }

    /// Accumulates parameter gradients for `d(loss)/d(output) = grad`.
    pub fn backward(&mut self, trace: &FusedTrace<T>, grad: Tensor<T>) {
        self.net.backward(trace, grad, Backprop::PARAMS);
    }
}

impl<T: Scalar> ParamSet<T> for GeneratorNet<T> {
    fn params(&self) -> Vec<&Param<T>> {
        self.net.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.net.params_mut()
    }
}

impl GeneratorNet<f32> {
    /// Restores a batch of masked images given their predicted semantics.
    pub fn inpaint_batch(
        &self,
        xs: &[&Image],
        segs: &[&SegmentationMap],
        attrs: &[&AttributeVector],
    ) -> Result<Vec<Image>> {
        if xs.len() != segs.len() || xs.len() != attrs.len() {
            return Err(rejected("inpaint batch inputs differ in length"));
        }
        let mut out = Vec::with_capacity(xs.len());
        for start in (0..xs.len()).step_by(crate::embed::INFER_CHUNK) {
            let end = (start + crate::embed::INFER_CHUNK).min(xs.len());
            let x = images_to_tensor(&xs[start..end])?;
            let hots = segs[start..end]
                .iter()
                .map(|s| one_hot(s, self.n_classes))
                .collect::<Result<Vec<_>>>()?;
            let hot_refs: Vec<&Grid> = hots.iter().collect();
            let seg = grids_to_tensor(&hot_refs)?;
            let rows: Vec<&[f32]> = attrs[start..end].iter().map(|a| a.values()).collect();
            let attr = vectors_to_tensor(&rows)?;
            out.extend(tensor_to_images(&self.infer(&x, &seg, &attr)?)?);
        }
        Ok(out)
    }

    /// `z = G(x, Ws(x), Wa(x))` for one image.
    pub fn inpaint(
        &self,
        x: &Image,
        seg: &SegmentationMap,
        attr: &AttributeVector,
    ) -> Result<Image> {
        Ok(self.inpaint_batch(&[x], &[seg], &[attr])?.remove(0))
    }
}

/// Appends the attribute vector, tiled over the feature grid, after the
/// feature channels.
pub fn condition_fuse(feature: &Grid, attr: &AttributeVector) -> Result<Grid> {
    if feature.height != feature.width {
        return Err(rejected(format!(
            "fusion expects a square feature map, got {}x{}",
            feature.height, feature.width
        )));
    }
    let tiled = spatial_replicate(attr, feature.height)?;
    let mut data = feature.data.clone();
    data.extend_from_slice(&tiled.data);
    Ok(Grid {
        channels: feature.channels + attr.len(),
        height: feature.height,
        width: feature.width,
        data,
    })
}
