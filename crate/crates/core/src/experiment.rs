//! End-to-end runs: restoring held-out images with a trained model,
//! scoring them, and the trade-off sweep over the two semantic weights.

use std::collections::BTreeMap;

use serde::Serialize;

use semfill_nn::exec;

use crate::config::ExperimentConfig;
use crate::domain::{apply_mask, composite, AttributeVector, Image, Mask};
use crate::embed::{AttributeNet, SegmentationNet};
use crate::error::{rejected, Result};
use crate::generator::GeneratorNet;
use crate::metrics::{evaluate, MetricReport, PixelEvaluation, Variant};
use crate::seed;
use crate::synth::{sample_id, sample_mask, Dataset};
use crate::train::{train_step, StepLosses, TrainData, TrainState};

/// Generator plus the frozen networks that condition it.
#[derive(Debug, Clone, Copy)]
pub struct Pipeline<'a> {
    pub g: &'a GeneratorNet,
    pub attr_net: &'a AttributeNet,
    pub seg_net: &'a SegmentationNet,
}

impl<'a> Pipeline<'a> {
    pub fn from_state(state: &'a TrainState) -> Self {
        Self {
            g: &state.nets.g,
            attr_net: &state.attr_net,
            seg_net: &state.seg_net,
        }
    }

    /// Raw generator output `G(x, Ws(x), Wa(x))` for masked inputs.
    pub fn restore(&self, masked: &[&Image]) -> Result<Vec<Image>> {
        let attrs = self.attr_net.predict_batch(masked)?;
        let segs: Vec<_> = self
            .seg_net
            .predict_batch(masked)?
            .into_iter()
            .map(|p| p.map)
            .collect();
        self.g.inpaint_batch(
            masked,
            &segs.iter().collect::<Vec<_>>(),
            &attrs.iter().collect::<Vec<_>>(),
        )
    }

    /// Output inside each hole, input context elsewhere.
    pub fn restore_composited(&self, masked: &[Image], masks: &[Mask]) -> Result<Vec<Image>> {
        if masked.len() != masks.len() {
            return Err(rejected("images and masks differ in count"));
        }
        let raw = self.restore(&masked.iter().collect::<Vec<_>>())?;
        raw.iter()
            .zip(masked)
            .zip(masks)
            .map(|((z, x), m)| composite(z, x, m))
            .collect()
    }
}

/// Share of attribute bits of `Wa(z)` that agree with the ground-truth bits,
/// averaged over images and attributes.
pub fn attribute_consistency(
    z: &[&Image],
    truth: &[&AttributeVector],
    attr_net: &AttributeNet,
) -> Result<f64> {
    if z.len() != truth.len() || z.is_empty() {
        return Err(rejected(
            "attribute consistency needs equally many non-zero images and labels",
        ));
    }
    let preds = attr_net.predict_batch(z)?;
    let mut agree = 0usize;
    let mut total = 0usize;
    for (p, t) in preds.iter().zip(truth) {
        if p.len() != t.len() {
            return Err(rejected(
                "predicted and true attribute vectors differ in length",
            ));
        }
        agree += p
            .bits()
            .iter()
            .zip(t.bits())
            .filter(|(a, b)| **a == *b)
            .count();
        total += p.len();
    }
    Ok(agree as f64 / total as f64)
}

/// Fixed evaluation hole for sample `index`.
pub fn eval_mask(seed: u64, canvas: (usize, usize), index: usize) -> Result<Mask> {
    sample_mask(
        seed::derive_index(seed::derive(seed, "eval-mask"), index as u64),
        canvas,
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct PixelRow {
    pub id: String,
    #[serde(flatten)]
    pub metrics: PixelEvaluation,
    pub attr_consistency: f64,
}

/// Per-image metrics and their means over an evaluation set.
#[derive(Debug, Clone, Serialize)]
pub struct PixelSummary {
    pub ssim_window: usize,
    pub raw: MetricReport,
    pub composited: MetricReport,
    pub hole: MetricReport,
    pub masked: MetricReport,
    /// Attribute agreement of the composited outputs.
    pub attr_consistency: f64,
    /// Same for the masked inputs.
    pub attr_consistency_masked: f64,
    pub rows: Vec<PixelRow>,
}

/// Masks each selected sample with its evaluation hole, restores it and
/// scores raw, composited, hole-only and masked-input variants.
pub fn evaluate_pixels(
    pipeline: &Pipeline<'_>,
    ds: &Dataset,
    indices: &[usize],
    mask_seed: u64,
) -> Result<PixelSummary> {
    if indices.is_empty() {
        return Err(rejected("evaluation set is empty"));
    }
    let masks = indices
        .iter()
        .map(|&i| eval_mask(mask_seed, ds.canvas, i))
        .collect::<Result<Vec<_>>>()?;
    let masked = indices
        .iter()
        .zip(&masks)
        .map(|(&i, m)| apply_mask(&ds.samples[i].image, m))
        .collect::<Result<Vec<_>>>()?;
    let raw = pipeline.restore(&masked.iter().collect::<Vec<_>>())?;
    let evals = exec::map(indices.len(), |k| {
        evaluate(
            &raw[k],
            &masked[k],
            &ds.samples[indices[k]].image,
            &masks[k],
        )
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let comps = raw
        .iter()
        .zip(&masked)
        .zip(&masks)
        .map(|((z, x), m)| composite(z, x, m))
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<&AttributeVector> = indices.iter().map(|&i| &ds.samples[i].attributes).collect();
    let comp_refs: Vec<&Image> = comps.iter().collect();
    let per_image = pipeline.attr_net.predict_batch(&comp_refs)?;
    let rows: Vec<PixelRow> = indices
        .iter()
        .zip(&evals)
        .zip(&per_image)
        .map(|((&i, e), p)| {
            let t = ds.samples[i].attributes.bits();
            let agree = p.bits().iter().zip(&t).filter(|(a, b)| a == b).count();
            PixelRow {
                id: sample_id(i),
                metrics: *e,
                attr_consistency: agree as f64 / t.len() as f64,
            }
        })
        .collect();
    let pick = |f: fn(&PixelEvaluation) -> MetricReport| evals.iter().map(f).collect::<Vec<_>>();
    Ok(PixelSummary {
        ssim_window: crate::metrics::SSIM_WINDOW,
        raw: MetricReport::mean(Variant::Raw, &pick(|e| e.raw)),
        composited: MetricReport::mean(Variant::Composited, &pick(|e| e.composited)),
        hole: MetricReport::mean(Variant::Hole, &pick(|e| e.hole)),
        masked: MetricReport::mean(Variant::Masked, &pick(|e| e.masked)),
        attr_consistency: attribute_consistency(&comp_refs, &truth, pipeline.attr_net)?,
        attr_consistency_masked: attribute_consistency(
            &masked.iter().collect::<Vec<_>>(),
            &truth,
            pipeline.attr_net,
        )?,
        rows,
    })
}

/// Outcome of one training run followed by evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub fingerprint: String,
    pub lambda_a: f64,
    pub lambda_s: f64,
    pub seed: u64,
    pub last_losses: Option<StepLosses>,
    pub psnr: f64,
    pub ssim: f64,
    pub masked_psnr: f64,
    pub attr_consistency: f64,
}

/// Trains a fresh model for `cfg.steps` steps in memory and evaluates it on
/// `eval` with holes derived from `eval_seed`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    data: &TrainData<'_>,
    attr_net: &AttributeNet,
    seg_net: &SegmentationNet,
    eval: &[usize],
    eval_seed: u64,
) -> Result<(TrainState, RunResult)> {
    run_experiment_observed(cfg, data, attr_net, seg_net, eval, eval_seed, |_| {})
}

/// [`run_experiment`] with a callback receiving every step's losses.
pub fn run_experiment_observed(
    cfg: &ExperimentConfig,
    data: &TrainData<'_>,
    attr_net: &AttributeNet,
    seg_net: &SegmentationNet,
    eval: &[usize],
    eval_seed: u64,
    mut on_step: impl FnMut(&StepLosses),
) -> Result<(TrainState, RunResult)> {
    let mut state = TrainState::new(cfg.clone(), attr_net.clone(), seg_net.clone())?;
    let mut last = None;
    while state.step < cfg.steps {
        let l = train_step(&mut state, data)?;
        on_step(&l);
        last = Some(l);
    }
    let summary = evaluate_pixels(&Pipeline::from_state(&state), data.dataset, eval, eval_seed)?;
    let result = RunResult {
        fingerprint: cfg.fingerprint(),
        lambda_a: cfg.weights.lambda_a,
        lambda_s: cfg.weights.lambda_s,
        seed: cfg.seed,
        last_losses: last,
        psnr: summary.composited.psnr,
        ssim: summary.composited.ssim,
        masked_psnr: summary.masked.psnr,
        attr_consistency: summary.attr_consistency,
    };
    Ok((state, result))
}

/// The trade-off values swept for the varying weight.
pub const SWEEP_VALUES: [f64; 3] = [0.01, 0.1, 1.0];

/// One of the four one-dimensional sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Sweep {
    /// `"lambda_a"` or `"lambda_s"`: the weight held fixed.
    pub fixed: &'static str,
    pub fixed_value: f64,
}

impl Sweep {
    pub const ALL: [Sweep; 4] = [
        Sweep {
            fixed: "lambda_a",
            fixed_value: 0.0,
        },
        Sweep {
            fixed: "lambda_s",
            fixed_value: 0.0,
        },
        Sweep {
            fixed: "lambda_a",
            fixed_value: 0.1,
        },
        Sweep {
            fixed: "lambda_s",
            fixed_value: 0.1,
        },
    ];

    /// `(lambda_a, lambda_s)` for a value of the varying weight.
    pub fn point(&self, v: f64) -> (f64, f64) {
        if self.fixed == "lambda_a" {
            (self.fixed_value, v)
        } else {
            (v, self.fixed_value)
        }
    }
}

/// Distinct `(lambda_a, lambda_s)` points of the four sweeps plus the
/// unregularized baseline, baseline first.
pub fn ablation_grid() -> Vec<(f64, f64)> {
    let mut pts = vec![(0.0, 0.0)];
    for s in Sweep::ALL {
        for v in SWEEP_VALUES {
            let p = s.point(v);
            if !pts.contains(&p) {
                pts.push(p);
            }
        }
    }
    pts
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationCell {
    pub lambda_a: f64,
    pub lambda_s: f64,
    /// Set for the `lambda_a = lambda_s = 0` cell.
    pub label: Option<&'static str>,
    pub runs: Vec<RunResult>,
    pub failures: Vec<String>,
    pub median_psnr: Option<f64>,
    pub median_ssim: Option<f64>,
    pub median_attr_consistency: Option<f64>,
}

/// Median PSNR, SSIM and attribute consistency of one cell.
pub type CellMedians = (Option<f64>, Option<f64>, Option<f64>);

type CellColumn = fn(&AblationCell) -> Option<f64>;

#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub base_fingerprint: String,
    pub seeds: Vec<u64>,
    pub cells: Vec<AblationCell>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    })
}

pub const BASELINE_LABEL: &str = "no-regularization baseline";

/// Runs `runner` for every grid point and seed. Failed runs are recorded in
/// their cell and the table is still produced.
pub fn run_ablation(
    base: &ExperimentConfig,
    grid: &[(f64, f64)],
    seeds: &[u64],
    mut runner: impl FnMut(&ExperimentConfig) -> Result<RunResult>,
) -> Result<AblationTable> {
    base.validate()?;
    let mut cells = Vec::with_capacity(grid.len());
    for &(la, ls) in grid {
        let mut runs = Vec::new();
        let mut failures = Vec::new();
        for &s in seeds {
            let mut cfg = base.clone();
            cfg.weights.lambda_a = la;
            cfg.weights.lambda_s = ls;
            cfg.seed = s;
            match cfg.validate().and_then(|_| runner(&cfg)) {
                Ok(r) => runs.push(r),
                Err(e) => failures.push(format!("seed {s}: {e}")),
            }
        }
        let col = |f: fn(&RunResult) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
        cells.push(AblationCell {
            lambda_a: la,
            lambda_s: ls,
            label: (la == 0.0 && ls == 0.0).then_some(BASELINE_LABEL),
            median_psnr: col(|r| r.psnr),
            median_ssim: col(|r| r.ssim),
            median_attr_consistency: col(|r| r.attr_consistency),
            runs,
            failures,
        });
    }
    Ok(AblationTable {
        base_fingerprint: base.fingerprint(),
        seeds: seeds.to_vec(),
        cells,
    })
}

impl AblationTable {
    pub fn cell(&self, lambda_a: f64, lambda_s: f64) -> Option<&AblationCell> {
        self.cells
            .iter()
            .find(|c| c.lambda_a == lambda_a && c.lambda_s == lambda_s)
    }

    /// For each sweep and seed, the swept value with the highest PSNR.
    pub fn best_psnr_values(&self) -> Vec<(Sweep, u64, f64)> {
        let mut out = Vec::new();
        for sweep in Sweep::ALL {
            for &seed in &self.seeds {
                let mut best: Option<(f64, f64)> = None;
                for v in SWEEP_VALUES {
                    let (la, ls) = sweep.point(v);
                    let psnr = self
                        .cell(la, ls)
                        .and_then(|c| c.runs.iter().find(|r| r.seed == seed))
                        .map(|r| r.psnr);
                    if let Some(p) = psnr {
                        if best.is_none_or(|(bp, _)| p > bp) {
                            best = Some((p, v));
                        }
                    }
                }
                if let Some((_, v)) = best {
                    out.push((sweep, seed, v));
                }
            }
        }
        out
    }

    /// Text table: one block per sweep with PSNR, SSIM and attribute
    /// consistency rows over the swept values, then the baseline.
    pub fn render(&self) -> String {
        let fmt =
            |v: Option<f64>, digits: usize| v.map_or("-".to_string(), |x| format!("{x:.digits$}"));
        let mut s = String::new();
        for sweep in Sweep::ALL {
            let varying = if sweep.fixed == "lambda_a" {
                "lambda_s"
            } else {
                "lambda_a"
            };
            s.push_str(&format!("{} = {}\n", sweep.fixed, sweep.fixed_value));
            s.push_str(&format!("{varying:<18}"));
            for v in SWEEP_VALUES {
                s.push_str(&format!("{v:>10}"));
            }
            s.push('\n');
            let rows: [(&str, CellColumn, usize); 3] = [
                ("PSNR", |c| c.median_psnr, 2),
                ("SSIM", |c| c.median_ssim, 3),
                ("attr-consistency", |c| c.median_attr_consistency, 3),
            ];
            for (name, f, digits) in rows {
                s.push_str(&format!("{name:<18}"));
                for v in SWEEP_VALUES {
                    let (la, ls) = sweep.point(v);
                    s.push_str(&format!(
                        "{:>10}",
                        fmt(self.cell(la, ls).and_then(f), digits)
                    ));
                }
                s.push('\n');
            }
            s.push('\n');
        }
        if let Some(c) = self.cell(0.0, 0.0) {
            s.push_str(&format!(
                "{BASELINE_LABEL} (lambda_a = lambda_s = 0): PSNR {} SSIM {} attr-consistency {}\n",
                fmt(c.median_psnr, 2),
                fmt(c.median_ssim, 3),
                fmt(c.median_attr_consistency, 3)
            ));
        }
        let failed: usize = self.cells.iter().map(|c| c.failures.len()).sum();
        if failed > 0 {
            s.push_str(&format!(
                "{failed} run(s) failed; their cells show '-' or use the remaining seeds\n"
            ));
        }
        s
    }

    /// Medians keyed by `"lambda_a,lambda_s"`.
    pub fn summary(&self) -> BTreeMap<String, CellMedians> {
        self.cells
            .iter()
            .map(|c| {
                (
                    format!("{},{}", c.lambda_a, c.lambda_s),
                    (c.median_psnr, c.median_ssim, c.median_attr_consistency),
                )
            })
            .collect()
    }
}
