//! Finite-difference gradient checks in f64 at miniature scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semfill::disc::{sample_mismatched, Condition, DiscKind, Discriminator};
use semfill::domain::{apply_mask, Image};
use semfill::embed::{AttributeNet, SegmentationNet};
use semfill::generator::GeneratorNet;
use semfill::losses::LossWeights;
use semfill::nets::{Arch, ParamSet};
use semfill::nn::{Backprop, Param, Tensor};
use semfill::synth::{center_mask, generate_scene, LabeledSample};
use semfill::train::{
    discriminator_objective, generator_objective, BatchParts, BatchTensors, Networks,
};

const EPS: f64 = 1e-6;
const SAMPLES: usize = 100;
const REL_TOL: f64 = 1e-3;
pub const PASS_SHARE: f64 = 0.95;

pub struct Outcome {
    pub name: String,
    pub passed: usize,
    pub total: usize,
    /// Description of the worst failing entry, empty if all passed.
    pub worst: String,
}

impl Outcome {
    pub fn ok(&self) -> bool {
        self.passed as f64 >= PASS_SHARE * self.total as f64
    }

    pub fn describe(&self) -> String {
        let mut s = format!(
            "{}: {}/{} within {REL_TOL}",
            self.name, self.passed, self.total
        );
        if !self.worst.is_empty() {
            s.push_str(&format!("; worst {}", self.worst));
        }
        s
    }
}

fn arch(side: usize) -> Arch {
    Arch {
        height: side,
        width: side,
        n_attr: 18,
        n_classes: 4,
        g_width: 2,
        d_width: 2,
        attr_width: 2,
        seg_width: 2,
    }
}

fn random(shape: [usize; 4], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Compares accumulated gradients with central differences of `loss` on a
/// seeded sample of parameter entries. `loss` must accumulate gradients
/// into the parameters returned by `params`.
fn check<S>(
    name: &str,
    state: &mut S,
    params: impl Fn(&mut S) -> Vec<&mut Param<f64>>,
    mut loss: impl FnMut(&mut S) -> f64,
) -> Outcome {
    for p in params(state) {
        p.zero_grad();
    }
    loss(state);
    let sizes: Vec<usize> = params(state).iter().map(|p| p.len()).collect();
    let analytic: Vec<Vec<f64>> = params(state).iter().map(|p| p.grad.clone()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64);
    let mut passed = 0;
    let mut worst = (0.0f64, String::new());
    for _ in 0..SAMPLES {
        let mut flat = rng.random_range(0..total);
        let mut pi = 0;
        while flat >= sizes[pi] {
            flat -= sizes[pi];
            pi += 1;
        }
        let original = params(state)[pi].value[flat];
        params(state)[pi].value[flat] = original + EPS;
        let up = loss(state);
        params(state)[pi].value[flat] = original - EPS;
        let down = loss(state);
        params(state)[pi].value[flat] = original;
        let numeric = (up - down) / (2.0 * EPS);
        let a = analytic[pi][flat];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel <= REL_TOL {
            passed += 1;
        } else if rel > worst.0 {
            let pname = params(state)[pi].name.clone();
            worst = (
                rel,
                format!("{pname}[{flat}] analytic {a:e} numeric {numeric:e} (rel {rel:.2e})"),
            );
        }
    }
    Outcome {
        name: name.to_string(),
        passed,
        total: SAMPLES,
        worst: worst.1,
    }
}

fn all_params<N: ParamSet<f64>>(n: &mut N) -> Vec<&mut Param<f64>> {
    n.params_mut()
}

pub fn generator() -> Outcome {
    let a = arch(16);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random([2, 3, 16, 16], &mut rng, 0.0, 1.0);
    let seg = random([2, 4, 16, 16], &mut rng, 0.0, 1.0);
    let attr = random([2, 18, 1, 1], &mut rng, 0.0, 1.0);
    let r = random([2, 3, 16, 16], &mut rng, -1.0, 1.0);
    let mut g = GeneratorNet::<f64>::new(&a, 3);
    check("generator", &mut g, all_params, |g| {
        let t = g.forward(&x, &seg, &attr).unwrap();
        let l = dot(t.output(), &r);
        g.backward(&t, r.clone());
        l
    })
}

pub fn discriminator(kind: DiscKind) -> Outcome {
    let name = match kind {
        DiscKind::Global => "global discriminator",
        DiscKind::Attribute => "attribute discriminator",
        DiscKind::Segmentation => "segmentation discriminator",
    };
    let a = arch(16);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random([3, 3, 16, 16], &mut rng, 0.0, 1.0);
    let attr = random([3, 18, 1, 1], &mut rng, 0.0, 1.0);
    let seg = random([3, 4, 16, 16], &mut rng, 0.0, 1.0);
    let r = [0.7, -1.3, 0.4];
    let mut d = Discriminator::<f64>::new(kind, &a, 5);
    check(name, &mut d, all_params, |d| {
        let cond = match kind {
            DiscKind::Global => Condition::None,
            DiscKind::Attribute => Condition::Attributes(&attr),
            DiscKind::Segmentation => Condition::Segmentation(&seg),
        };
        let t = d.forward(&x, cond).unwrap();
        let l: f64 = t.output().data().iter().zip(r).map(|(o, w)| o * w).sum();
        d.backward(&t, &r, Backprop::PARAMS);
        l
    })
}

pub fn attribute_net() -> Outcome {
    let a = arch(16);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random([3, 3, 16, 16], &mut rng, 0.0, 1.0);
    let targets: Vec<Vec<f32>> = (0..3)
        .map(|_| (0..18).map(|_| rng.random_range(0..2) as f32).collect())
        .collect();
    let mut net = AttributeNet::<f64>::new(&a, 7);
    check("attribute net", &mut net, all_params, |n| {
        n.loss_and_grad(&x, &targets).unwrap()
    })
}

pub fn segmentation_net() -> Outcome {
    let a = arch(16);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random([2, 3, 16, 16], &mut rng, 0.0, 1.0);
    let labels: Vec<Vec<u8>> = (0..2)
        .map(|_| (0..256).map(|_| rng.random_range(0..4)).collect())
        .collect();
    let targets: Vec<&[u8]> = labels.iter().map(|l| l.as_slice()).collect();
    let mut net = SegmentationNet::<f64>::new(&a, 8);
    check("segmentation net", &mut net, all_params, |n| {
        n.loss_and_grad(&x, &targets).unwrap()
    })
}

fn scene_batch() -> (Vec<LabeledSample>, Vec<Image>) {
    let samples: Vec<LabeledSample> = (0..3)
        .map(|i| generate_scene(100 + i, (32, 32)).unwrap())
        .collect();
    let mask = center_mask((32, 32), 0.5).unwrap();
    let masked = samples
        .iter()
        .map(|s| apply_mask(&s.image, &mask).unwrap())
        .collect();
    (samples, masked)
}

fn batch_tensors(samples: &[LabeledSample], masked: &[Image]) -> BatchTensors<f64> {
    let y: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let x: Vec<&Image> = masked.iter().collect();
    let seg: Vec<_> = samples.iter().map(|s| &s.segmentation).collect();
    let attr: Vec<_> = samples.iter().map(|s| &s.attributes).collect();
    let bits: Vec<_> = samples.iter().map(|s| s.attributes.bits()).collect();
    let mismatch = sample_mismatched(&bits, 9).unwrap();
    assert!(!mismatch.degenerate);
    let parts = BatchParts {
        y: &y,
        x: &x,
        seg_x: &seg,
        attr_x: &attr,
        seg_y: &seg,
        attr_y: &attr,
    };
    BatchTensors::build(parts, &mismatch, 4).unwrap()
}

fn weights() -> LossWeights {
    LossWeights::new(0.3, 0.7, 0.4).unwrap()
}

fn disc_params(n: &mut Networks<f64>) -> Vec<&mut Param<f64>> {
    let mut v = n.dg.params_mut();
    v.extend(n.da.params_mut());
    v.extend(n.ds.params_mut());
    v
}

fn gen_params(n: &mut Networks<f64>) -> Vec<&mut Param<f64>> {
    n.g.params_mut()
}

pub fn discriminator_objective_check() -> Outcome {
    let (samples, masked) = scene_batch();
    let b = batch_tensors(&samples, &masked);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = random([3, 3, 32, 32], &mut rng, 0.0, 1.0);
    let w = weights();
    let mut nets = Networks::<f64>::new(&arch(32), 11);
    check("discriminator objective", &mut nets, disc_params, |n| {
        let l = discriminator_objective(n, &b, &z, &w).unwrap();
        l.dg + w.lambda_a * l.da + w.lambda_s * l.ds
    })
}

pub fn generator_objective_check(squared: bool) -> Outcome {
    let (samples, masked) = scene_batch();
    let b = batch_tensors(&samples, &masked);
    let w = weights();
    let mut nets = Networks::<f64>::new(&arch(32), 12);
    check(
        if squared {
            "generator objective (squared)"
        } else {
            "generator objective"
        },
        &mut nets,
        gen_params,
        |n| {
            let t = n.g.forward(&b.x, &b.seg_x, &b.attr_x).unwrap();
            generator_objective(n, &b, &t, &w, squared).unwrap().total
        },
    )
}

/// Every check, in a fixed order.
pub fn all() -> Vec<Outcome> {
    vec![
        generator(),
        discriminator(DiscKind::Global),
        discriminator(DiscKind::Attribute),
        discriminator(DiscKind::Segmentation),
        attribute_net(),
        segmentation_net(),
        discriminator_objective_check(),
        generator_objective_check(false),
        generator_objective_check(true),
    ]
}
