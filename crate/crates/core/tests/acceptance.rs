//! Acceptance runner: one PASS/FAIL line per criterion.
//!
//! Set `ACCEPTANCE_ONLY=1,4,9` to run a subset. Exits nonzero if any hard
//! criterion fails; soft criteria are reported but never fail the run.

mod support;

use std::collections::HashSet;
use std::process::ExitCode;
use std::time::Instant;

use semfill::config::ExperimentConfig;
use semfill::disc::{sample_mismatched, score_attribute, score_segmentation};
use semfill::domain::{Image, Mask};
use semfill::embed::{pretrain_attribute, pretrain_segmentation, AttributeNet, SegmentationNet};
use semfill::experiment::{
    ablation_grid, median, run_ablation, run_experiment, run_experiment_observed, Pipeline,
    RunResult, BASELINE_LABEL,
};
use semfill::losses::{loss_d, loss_da, loss_dg, loss_i, FakeScores, LossWeights};
use semfill::metrics::{mean_l1, mean_l2, psnr, ssim};
use semfill::retrieval::{average_precision, semantic_map_protocol, RetrievalCorpus};
use semfill::synth::{center_mask, sample_id, Dataset, DatasetRole, Split};
use semfill::train::{train_step, StepLosses, TrainData, TrainState};

struct Outcome {
    id: u8,
    title: &'static str,
    pass: bool,
    hard: bool,
    detail: String,
}

struct Runner {
    only: Option<HashSet<u8>>,
    outcomes: Vec<Outcome>,
}

impl Runner {
    fn wants(&self, ids: &[u8]) -> bool {
        self.only
            .as_ref()
            .is_none_or(|o| ids.iter().any(|i| o.contains(i)))
    }

    fn record(&mut self, id: u8, title: &'static str, pass: bool, hard: bool, detail: String) {
        let tag = match (pass, hard) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "SOFT-FAIL",
        };
        println!("{tag} [{id}] {title}: {detail}");
        self.outcomes.push(Outcome {
            id,
            title,
            pass,
            hard,
            detail,
        });
    }
}

fn set(cfg: &mut ExperimentConfig, pairs: &[(&str, &str)]) {
    for (k, v) in pairs {
        cfg.set(k, v).expect("valid acceptance setting");
    }
}

fn criterion_1(r: &mut Runner) {
    let t = Instant::now();
    let w = LossWeights::default();
    let dg = loss_dg(&[0.5], &[0.5]).unwrap();
    let da = loss_da(&[0.5], &[0.5], Some(&[0.5])).unwrap();
    let d = loss_d(1.0, 1.0, 1.0, &w);
    let y = Image::new(4, 4, (0..48).map(|i| i as f32 / 48.0).collect()).unwrap();
    let half = [0.5];
    let scores = FakeScores {
        global: &half,
        attribute: &half,
        segmentation: &half,
    };
    let li = loss_i(
        std::slice::from_ref(&y),
        std::slice::from_ref(&y),
        scores,
        &w,
    )
    .unwrap();
    let secs = t.elapsed().as_secs_f64();
    let pass = (dg - 1.3863).abs() <= 1e-4
        && (da - 2.0794).abs() <= 1e-4
        && d == 1.2
        && (li - 0.008318).abs() <= 1e-5
        && secs < 1.0;
    r.record(
        1,
        "loss oracles",
        pass,
        true,
        format!("Dg {dg:.6}, Da {da:.6}, D {d:?}, I {li:.7}, {secs:.3} s"),
    );
}

fn criterion_2(r: &mut Runner) {
    let t = Instant::now();
    let outcomes = support::gradcheck::all();
    let secs = t.elapsed().as_secs_f64();
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.ok())
        .map(|o| o.describe())
        .collect();
    let worst = outcomes
        .iter()
        .map(|o| o.passed as f64 / o.total as f64)
        .fold(1.0, f64::min);
    let pass = failed.is_empty() && secs < 120.0;
    let mut detail = format!(
        "{} checks, lowest pass share {:.2} (need {:.2}), {secs:.1} s",
        outcomes.len(),
        worst,
        support::gradcheck::PASS_SHARE
    );
    for f in failed {
        detail.push_str(&format!("; {f}"));
    }
    r.record(2, "finite-difference gradient checks", pass, true, detail);
}

fn criterion_3(r: &mut Runner) {
    use support::oracles::{pairs, ref_l1, ref_l2, ref_psnr, ref_ssim};
    let t = Instant::now();
    let mut worst = [0.0f64; 4];
    let mut identity = true;
    for (z, y) in pairs() {
        let l2 = mean_l2(&z, &y).unwrap();
        let p = psnr(&z, &y).unwrap();
        let errs = [
            (mean_l1(&z, &y).unwrap() - ref_l1(&z, &y)).abs(),
            (l2 - ref_l2(&z, &y)).abs(),
            (p - ref_psnr(&z, &y)).abs(),
            (ssim(&z, &y).unwrap() - ref_ssim(&z, &y)).abs(),
        ];
        for (w, e) in worst.iter_mut().zip(errs) {
            *w = w.max(e);
        }
        identity &= p == -10.0 * l2.log10();
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = worst.iter().all(|&e| e <= 1e-6) && identity && secs < 60.0;
    r.record(
        3,
        "metric oracles (50 pairs)",
        pass,
        true,
        format!(
            "max |err| l1 {:.1e}, l2 {:.1e}, psnr {:.1e}, ssim {:.1e}; psnr/mse identity {}; {secs:.2} s",
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            if identity { "exact" } else { "broken" }
        ),
    );
}

fn criterion_4(r: &mut Runner, attr: &AttributeNet, corpus_ds: &Dataset, queries: &[&Image]) {
    let rel: HashSet<&str> = ["a", "b"].into_iter().collect();
    let ap1 = average_precision(&["a", "x", "b", "y"], &rel).unwrap();
    let ap2 = average_precision(&["x", "y", "a", "b"], &rel).unwrap();
    let corpus = build_corpus(corpus_ds, attr);
    let originals: Vec<Image> = queries.iter().map(|q| (*q).clone()).collect();
    let identity = |_: &[Image], _: &[Mask]| Ok(originals.clone());
    let masker = |im: &Image| center_mask((im.height(), im.width()), 0.5);
    let res = semantic_map_protocol(queries, &corpus, attr, &identity, &masker, 10).unwrap();
    let pass =
        (ap1 - 5.0 / 6.0).abs() <= 1e-9 && (ap2 - 5.0 / 12.0).abs() <= 1e-9 && res.map == 1.0;
    r.record(
        4,
        "average precision oracle",
        pass,
        true,
        format!(
            "AP {ap1:.10}, {ap2:.10}; identity-inpainter mAP {:?}",
            res.map
        ),
    );
}

fn build_corpus(ds: &Dataset, attr: &AttributeNet) -> RetrievalCorpus {
    let imgs: Vec<&Image> = ds.samples.iter().map(|s| &s.image).collect();
    RetrievalCorpus::build(
        (0..ds.len()).map(sample_id).collect(),
        &imgs,
        attr,
        format!("corpus seed {} n {}", ds.seed, ds.len()),
    )
    .unwrap()
}

fn tiny_state(seed: u64) -> (ExperimentConfig, Dataset) {
    let mut cfg = ExperimentConfig::default();
    let s = seed.to_string();
    set(
        &mut cfg,
        &[
            ("canvas", "32"),
            ("g_width", "4"),
            ("d_width", "4"),
            ("attr_width", "4"),
            ("seg_width", "4"),
            ("batch", "4"),
            ("steps", "10"),
            ("seed", &s),
        ],
    );
    let ds = Dataset::generate(64, 11, (32, 32), DatasetRole::Inpainting).unwrap();
    (cfg, ds)
}

fn losses_bits(l: &StepLosses) -> Vec<u64> {
    [
        l.loss_dg, l.loss_da, l.loss_ds, l.loss_d, l.loss_i, l.recon, l.adv,
    ]
    .iter()
    .map(|v| v.to_bits())
    .collect()
}

fn criterion_9(r: &mut Runner) {
    let (cfg, ds) = tiny_state(5);
    let arch = cfg.arch();
    let attr = AttributeNet::new(&arch, 1);
    let seg = SegmentationNet::new(&arch, 2);
    let data = TrainData::prepare(&ds, &attr, &seg).unwrap();
    let run = |steps: u64, state: &mut TrainState| -> Vec<Vec<u64>> {
        (0..steps)
            .map(|_| losses_bits(&train_step(state, &data).unwrap()))
            .collect()
    };
    let mut a = TrainState::new(cfg.clone(), attr.clone(), seg.clone()).unwrap();
    let mut b = TrainState::new(cfg.clone(), attr.clone(), seg.clone()).unwrap();
    let ta = run(10, &mut a);
    let tb = run(10, &mut b);
    let repeat = ta == tb;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    let mut c = TrainState::new(cfg.clone(), attr, seg).unwrap();
    let mut tc = run(5, &mut c);
    c.save(&path).unwrap();
    drop(c);
    let mut resumed = TrainState::load(&path, Some(&cfg)).unwrap();
    tc.extend(run(5, &mut resumed));
    let resume = tc == ta && resumed.nets == a.nets;
    r.record(
        9,
        "determinism and persistence",
        repeat && resume,
        true,
        format!(
            "repeat run identical: {repeat}; save at step 5 + load reproduces 10-step trajectory and weights: {resume}"
        ),
    );
}

/// Shared setup of the 64x64 criteria.
struct Desk {
    cfg: ExperimentConfig,
    ds: Dataset,
    corpus: Dataset,
    attr: AttributeNet,
    seg: SegmentationNet,
    pretrain_secs: f64,
}

const DESK_SEEDS: [u64; 3] = [1, 2, 3];
const EVAL_SEED: u64 = 77;
/// Steps averaged at each end of the run for the loss_I trend.
const TREND_WINDOW: usize = 200;

fn desk() -> Desk {
    let t = Instant::now();
    let mut cfg = ExperimentConfig::default();
    set(
        &mut cfg,
        &[
            ("canvas", "64"),
            ("g_width", "16"),
            ("d_width", "8"),
            ("attr_width", "16"),
            ("seg_width", "16"),
            ("batch", "8"),
            ("steps", "2000"),
            ("pretrain_batch", "32"),
        ],
    );
    let arch = cfg.arch();
    let attr_ds = Dataset::generate(4000, 21, (64, 64), DatasetRole::Attributes).unwrap();
    let mut pre = cfg.pretrain(101);
    pre.epochs = 10;
    let (attr, ar) = pretrain_attribute(&attr_ds, &arch, &pre).unwrap();
    drop(attr_ds);
    let seg_ds = Dataset::generate(2000, 22, (64, 64), DatasetRole::Segmentation).unwrap();
    pre.epochs = 4;
    pre.seed = 102;
    let (seg, sr) = pretrain_segmentation(&seg_ds, &arch, &pre).unwrap();
    drop(seg_ds);
    println!(
        "       pretraining: attribute accuracy {:.3} (masked {:.3}), segmentation pixel accuracy {:.3}, {:.0} s",
        ar.mean_accuracy,
        ar.mean_accuracy_masked,
        sr.pixel_accuracy,
        t.elapsed().as_secs_f64()
    );
    Desk {
        cfg,
        ds: Dataset::generate(3000, 23, (64, 64), DatasetRole::Inpainting).unwrap(),
        corpus: Dataset::generate(500, 24, (64, 64), DatasetRole::Inpainting).unwrap(),
        attr,
        seg,
        pretrain_secs: t.elapsed().as_secs_f64(),
    }
}

struct SeedRun {
    da_match: f64,
    da_mismatch: f64,
    ds_match: f64,
    ds_mismatch: f64,
    psnr: f64,
    masked_psnr: f64,
    map: f64,
    masked_map: f64,
    early_loss_i: f64,
    late_loss_i: f64,
    secs: f64,
}

fn desk_run(d: &Desk, seed: u64) -> SeedRun {
    let t = Instant::now();
    let mut cfg = d.cfg.clone();
    cfg.seed = seed;
    let data = TrainData::prepare(&d.ds, &d.attr, &d.seg).unwrap();
    let test = d.ds.split_indices(Split::Test);
    let mut loss_i = Vec::with_capacity(cfg.steps as usize);
    let (state, result) =
        run_experiment_observed(&cfg, &data, &d.attr, &d.seg, &test, EVAL_SEED, |l| {
            loss_i.push(l.loss_i)
        })
        .unwrap();
    let window = TREND_WINDOW.min(loss_i.len());
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let early_loss_i = avg(&loss_i[..window]);
    let late_loss_i = avg(&loss_i[loss_i.len() - window..]);
    let train_secs = t.elapsed().as_secs_f64();

    // Matching awareness on 256 held-out clean images.
    let held: Vec<usize> = test.iter().copied().take(256).collect();
    let frozen = TrainData::from_indices(&d.ds, held.clone(), &d.attr, &d.seg).unwrap();
    let bits: Vec<Vec<bool>> = frozen.attr_y.iter().map(|a| a.bits()).collect();
    let mm = sample_mismatched(&bits, seed ^ 0x5eed).unwrap();
    let attr_bar = mm.apply(&frozen.attr_y);
    let seg_bar = mm.apply(&frozen.seg_y);
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let img = |k: usize| &d.ds.samples[held[k]].image;
    let n = held.len();
    let da_match = mean(
        (0..n)
            .map(|k| score_attribute(&state.nets.da, img(k), &frozen.attr_y[k]).unwrap())
            .collect(),
    );
    let da_mismatch = mean(
        (0..n)
            .map(|k| score_attribute(&state.nets.da, img(k), &attr_bar[k]).unwrap())
            .collect(),
    );
    let ds_match = mean(
        (0..n)
            .map(|k| score_segmentation(&state.nets.ds, img(k), &frozen.seg_y[k]).unwrap())
            .collect(),
    );
    let ds_mismatch = mean(
        (0..n)
            .map(|k| score_segmentation(&state.nets.ds, img(k), &seg_bar[k]).unwrap())
            .collect(),
    );

    // Retrieval: 500-item corpus, 50 held-out queries, K = 10.
    let corpus = build_corpus(&d.corpus, &d.attr);
    let queries: Vec<&Image> = test
        .iter()
        .take(50)
        .map(|&i| &d.ds.samples[i].image)
        .collect();
    let pipeline = Pipeline::from_state(&state);
    let inpainter = |m: &[Image], masks: &[Mask]| pipeline.restore_composited(m, masks);
    let masker = |im: &Image| center_mask((im.height(), im.width()), 0.5);
    let proto = semantic_map_protocol(&queries, &corpus, &d.attr, &inpainter, &masker, 10).unwrap();

    let run = SeedRun {
        da_match,
        da_mismatch,
        ds_match,
        ds_mismatch,
        psnr: result.psnr,
        masked_psnr: result.masked_psnr,
        map: proto.map,
        masked_map: proto.masked_map,
        early_loss_i,
        late_loss_i,
        secs: train_secs,
    };
    println!(
        "       seed {seed}: {:.0} s training; Da {:.3}/{:.3}, Ds {:.3}/{:.3}, PSNR {:.2} vs masked {:.2}, mAP {:.3} vs masked {:.3}",
        run.secs, run.da_match, run.da_mismatch, run.ds_match, run.ds_mismatch, run.psnr, run.masked_psnr, run.map, run.masked_map
    );
    run
}

fn desk_criteria(r: &mut Runner) {
    let t = Instant::now();
    let d = desk();
    if r.wants(&[4]) {
        let test = d.ds.split_indices(Split::Test);
        let queries: Vec<&Image> = test
            .iter()
            .take(50)
            .map(|&i| &d.ds.samples[i].image)
            .collect();
        criterion_4(r, &d.attr, &d.corpus, &queries);
    }
    if !r.wants(&[5, 6, 8]) {
        return;
    }
    let runs: Vec<SeedRun> = DESK_SEEDS.iter().map(|&s| desk_run(&d, s)).collect();
    let med = |f: fn(&SeedRun) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>()).unwrap();
    // The runtime budget covers pretraining and one seed's run.
    let per_seed = d.pretrain_secs + runs.iter().map(|s| s.secs).fold(0.0, f64::max);
    let total = t.elapsed().as_secs_f64();

    if r.wants(&[5]) {
        let (am, amm, sm, smm) = (
            med(|s| s.da_match),
            med(|s| s.da_mismatch),
            med(|s| s.ds_match),
            med(|s| s.ds_mismatch),
        );
        r.record(
            5,
            "matching awareness (64x64, 2000 steps, 256 held-out, median of 3 seeds)",
            am > amm && sm > smm && per_seed <= 1800.0,
            true,
            format!(
                "Da matched {am:.4} vs mismatched {amm:.4}; Ds matched {sm:.4} vs mismatched {smm:.4}; \
                 {per_seed:.0} s per seed incl. pretraining ({total:.0} s for all seeds)"
            ),
        );
    }
    if r.wants(&[6]) {
        let gain = med(|s| s.psnr - s.masked_psnr);
        r.record(
            6,
            "inpainting beats masking",
            gain >= 3.0,
            true,
            format!(
                "median composited-minus-masked PSNR {gain:.2} dB (composited {:.2}, masked {:.2})",
                med(|s| s.psnr),
                med(|s| s.masked_psnr)
            ),
        );
    }
    if r.wants(&[6]) {
        let drop = med(|s| s.early_loss_i - s.late_loss_i);
        r.record(
            6,
            "loss_I trend: mean of last 200 steps below first 200 (soft)",
            drop > 0.0,
            false,
            format!(
                "median decrease {drop:.4} (first {:.4}, last {:.4})",
                med(|s| s.early_loss_i),
                med(|s| s.late_loss_i)
            ),
        );
    }
    if r.wants(&[8]) {
        let gain = med(|s| s.map - s.masked_map);
        r.record(
            8,
            "semantic mAP ordering (500 items, 50 queries, K=10)",
            gain >= 0.05,
            true,
            format!(
                "median mAP gain {gain:.4} (inpainted {:.4}, masked {:.4})",
                med(|s| s.map),
                med(|s| s.masked_map)
            ),
        );
    }
}

fn criterion_7(r: &mut Runner) {
    let t = Instant::now();
    let mut cfg = ExperimentConfig::default();
    set(
        &mut cfg,
        &[
            ("canvas", "32"),
            ("g_width", "8"),
            ("d_width", "8"),
            ("attr_width", "16"),
            ("seg_width", "16"),
            ("batch", "8"),
            ("steps", "600"),
        ],
    );
    let arch = cfg.arch();
    let mut pre = cfg.pretrain(201);
    pre.epochs = 8;
    let attr_ds = Dataset::generate(4000, 31, (32, 32), DatasetRole::Attributes).unwrap();
    let (attr, _) = pretrain_attribute(&attr_ds, &arch, &pre).unwrap();
    drop(attr_ds);
    pre.epochs = 6;
    pre.seed = 202;
    let seg_ds = Dataset::generate(2000, 32, (32, 32), DatasetRole::Segmentation).unwrap();
    let (seg, _) = pretrain_segmentation(&seg_ds, &arch, &pre).unwrap();
    drop(seg_ds);
    let ds = Dataset::generate(2000, 33, (32, 32), DatasetRole::Inpainting).unwrap();
    let data = TrainData::prepare(&ds, &attr, &seg).unwrap();
    let eval = ds.split_indices(Split::Val);
    let table = run_ablation(
        &cfg,
        &ablation_grid(),
        &DESK_SEEDS,
        |c: &ExperimentConfig| -> semfill::Result<RunResult> {
            Ok(run_experiment(c, &data, &attr, &seg, &eval, EVAL_SEED)?.1)
        },
    )
    .unwrap();
    for line in table.render().lines() {
        println!("       {line}");
    }
    let full = table.cell(0.1, 0.1).and_then(|c| c.median_attr_consistency);
    let base_cell = table.cell(0.0, 0.0);
    let base = base_cell.and_then(|c| c.median_attr_consistency);
    let labeled = base_cell.is_some_and(|c| c.label == Some(BASELINE_LABEL));
    let (hard, detail) = match (full, base) {
        (Some(f), Some(b)) => (
            f >= b && labeled,
            format!("median attribute consistency full {f:.4} vs baseline {b:.4}"),
        ),
        _ => (false, "missing cells".to_string()),
    };
    let secs = t.elapsed().as_secs_f64();
    r.record(
        7,
        "regularization trend: full >= no-regularization on attribute consistency (32x32, 600 steps, 3 seeds)",
        hard,
        true,
        format!("{detail}; {secs:.0} s"),
    );
    let best = table.best_psnr_values();
    let at = |v: f64| best.iter().filter(|b| b.2 == v).count();
    let (n01, n1) = (at(0.1), at(1.0));
    r.record(
        7,
        "regularization trend: best sweep PSNR at 0.1 more often than at 1 (soft)",
        n01 > n1,
        false,
        format!(
            "best at 0.01: {}, at 0.1: {n01}, at 1: {n1} over {} sweep-seed pairs",
            at(0.01),
            best.len()
        ),
    );
}

fn main() -> ExitCode {
    let only = std::env::var("ACCEPTANCE_ONLY").ok().map(|s| {
        s.split(',')
            .filter_map(|p| p.trim().parse::<u8>().ok())
            .collect::<HashSet<_>>()
    });
    let mut r = Runner {
        only,
        outcomes: Vec::new(),
    };
    let t = Instant::now();
    if r.wants(&[1]) {
        criterion_1(&mut r);
    }
    if r.wants(&[2]) {
        criterion_2(&mut r);
    }
    if r.wants(&[3]) {
        criterion_3(&mut r);
    }
    if r.wants(&[9]) {
        criterion_9(&mut r);
    }
    if r.wants(&[4, 5, 6, 8]) {
        desk_criteria(&mut r);
    }
    if r.wants(&[7]) {
        criterion_7(&mut r);
    }

    r.outcomes.sort_by_key(|o| o.id);
    println!("\nacceptance summary ({:.0} s):", t.elapsed().as_secs_f64());
    for o in &r.outcomes {
        let tag = match (o.pass, o.hard) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "SOFT-FAIL",
        };
        println!("{tag} [{}] {}: {}", o.id, o.title, o.detail);
    }
    if r.outcomes.iter().any(|o| o.hard && !o.pass) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
