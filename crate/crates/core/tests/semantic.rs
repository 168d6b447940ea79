use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semfill::config::ExperimentConfig;
use semfill::domain::{apply_mask, Image, Mask};
use semfill::embed::{pretrain_attribute, AttributeNet, AttributeReport};
use semfill::experiment::{attribute_consistency, eval_mask};
use semfill::retrieval::{semantic_map_protocol, FeatureExtractor, RetrievalCorpus};
use semfill::synth::{center_mask, sample_id, Dataset, DatasetRole, Split};

fn trained() -> (Dataset, AttributeNet, AttributeReport) {
    let mut cfg = ExperimentConfig::default();
    for (k, v) in [
        ("canvas", "32"),
        ("attr_width", "8"),
        ("pretrain_epochs", "4"),
        ("pretrain_batch", "16"),
    ] {
        cfg.set(k, v).unwrap();
    }
    let ds = Dataset::generate(800, 5, (32, 32), DatasetRole::Attributes).unwrap();
    let (net, report) = pretrain_attribute(&ds, &cfg.arch(), &cfg.pretrain(3)).unwrap();
    (ds, net, report)
}

fn held_out(ds: &Dataset) -> Vec<usize> {
    let mut idx = ds.split_indices(Split::Val);
    idx.extend(ds.split_indices(Split::Test));
    idx
}

#[test]
fn attribute_consistency_reference_points() {
    let (ds, net, report) = trained();
    let idx = held_out(&ds);
    let truth: Vec<_> = idx.iter().map(|&i| &ds.samples[i].attributes).collect();
    let clean: Vec<&Image> = idx.iter().map(|&i| &ds.samples[i].image).collect();

    let own = attribute_consistency(&clean, &truth, &net).unwrap();
    assert!(
        (own - report.mean_accuracy).abs() < 1e-12,
        "{own} vs {}",
        report.mean_accuracy
    );

    let masked: Vec<Image> = idx
        .iter()
        .map(|&i| apply_mask(&ds.samples[i].image, &eval_mask(9, ds.canvas, i).unwrap()).unwrap())
        .collect();
    let masked_score =
        attribute_consistency(&masked.iter().collect::<Vec<_>>(), &truth, &net).unwrap();
    assert!(masked_score < own, "masked {masked_score} vs clean {own}");

    // Predictions on noise carry no information about the labels, so the
    // agreement rate is fixed by the two marginal rates per attribute.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noise: Vec<Image> = (0..idx.len())
        .map(|_| {
            Image::new(
                32,
                32,
                (0..3 * 32 * 32).map(|_| rng.random::<f32>()).collect(),
            )
            .unwrap()
        })
        .collect();
    let noise_refs: Vec<&Image> = noise.iter().collect();
    let preds = net.predict_batch(&noise_refs).unwrap();
    let n = idx.len() as f64;
    let k = net.n_attr;
    let expected = (0..k)
        .map(|j| {
            let p = preds.iter().filter(|v| v.bits()[j]).count() as f64 / n;
            let q = truth.iter().filter(|v| v.bits()[j]).count() as f64 / n;
            p * q + (1.0 - p) * (1.0 - q)
        })
        .sum::<f64>()
        / k as f64;
    let noise_score = attribute_consistency(&noise_refs, &truth, &net).unwrap();
    assert!(
        (noise_score - expected).abs() < 0.03,
        "noise {noise_score} vs chance {expected}"
    );
    assert!(noise_score < own);
}

#[test]
fn protocol_is_deterministic_and_ordered_with_attribute_features() {
    let (ds, net, _) = trained();
    assert_eq!(net.feature_len(), 64);
    let corpus_idx = ds.split_indices(Split::Train);
    let imgs: Vec<&Image> = corpus_idx.iter().map(|&i| &ds.samples[i].image).collect();
    let corpus = RetrievalCorpus::build(
        corpus_idx.iter().map(|&i| sample_id(i)).collect(),
        &imgs,
        &net,
        "train",
    )
    .unwrap();
    assert!(corpus.features.iter().all(|f| f.len() == 64));
    let queries: Vec<&Image> = ds
        .split_indices(Split::Test)
        .iter()
        .take(30)
        .map(|&i| &ds.samples[i].image)
        .collect();
    let masker = |im: &Image| center_mask((im.height(), im.width()), 0.5);
    let originals: Vec<Image> = queries.iter().map(|q| (*q).clone()).collect();
    // Puts the original content back inside the hole.
    let oracle = |_: &[Image], _: &[Mask]| Ok(originals.clone());
    let a = semantic_map_protocol(&queries, &corpus, &net, &oracle, &masker, 10).unwrap();
    assert_eq!(a.map, 1.0);
    assert!(a.masked_map < 1.0);
    assert_eq!(a.extractor_fingerprint, net.fingerprint());

    let passthrough = |m: &[Image], _: &[Mask]| Ok(m.to_vec());
    let b1 = semantic_map_protocol(&queries, &corpus, &net, &passthrough, &masker, 10).unwrap();
    let b2 = semantic_map_protocol(&queries, &corpus, &net, &passthrough, &masker, 10).unwrap();
    assert_eq!(b1, b2);
    assert_eq!(b1.map, b1.masked_map);
    assert_eq!(b1.masked_map, a.masked_map);
    assert!(b1.per_query_ap.iter().all(|&ap| (0.0..=1.0).contains(&ap)));
}
