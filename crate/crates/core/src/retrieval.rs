//! Retrieval-based semantic evaluation.
//!
//! A query's ground truth is the top-K of its own retrieval results; the
//! query is then masked, restored, and its retrieval re-scored against that
//! ground truth with average precision.

use std::collections::HashSet;
use std::hash::Hash;

use serde::Serialize;

use semfill_nn::exec;

use crate::domain::{apply_mask, Image, Mask};
use crate::embed::AttributeNet;
use crate::error::{rejected, Result};
use crate::nets::ParamSet;

/// Maps images to fixed-length descriptors.
pub trait FeatureExtractor: Sync {
    fn features(&self, images: &[&Image]) -> Result<Vec<Vec<f32>>>;
    /// Identifies the extractor's weights.
    fn fingerprint(&self) -> String;
}

impl FeatureExtractor for AttributeNet {
    fn features(&self, images: &[&Image]) -> Result<Vec<Vec<f32>>> {
        self.features_batch(images)
    }
    fn fingerprint(&self) -> String {
        self.checksum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalCorpus {
    pub ids: Vec<String>,
    #[serde(skip)]
    pub features: Vec<Vec<f32>>,
    /// Identifies the data the corpus was built from.
    pub source_fingerprint: String,
}

impl RetrievalCorpus {
    pub fn new(
        ids: Vec<String>,
        features: Vec<Vec<f32>>,
        source_fingerprint: impl Into<String>,
    ) -> Result<Self> {
        if ids.len() != features.len() {
            return Err(rejected("corpus ids and features differ in count"));
        }
        if let Some(first) = features.first() {
            if features.iter().any(|f| f.len() != first.len()) {
                return Err(rejected("corpus feature lengths are not uniform"));
            }
        }
        let unique: HashSet<&String> = ids.iter().collect();
        if unique.len() != ids.len() {
            return Err(rejected("corpus ids are not unique"));
        }
        Ok(Self {
            ids,
            features,
            source_fingerprint: source_fingerprint.into(),
        })
    }

    /// Extracts features for `images` in order.
    pub fn build(
        ids: Vec<String>,
        images: &[&Image],
        extractor: &dyn FeatureExtractor,
        source_fingerprint: impl Into<String>,
    ) -> Result<Self> {
        Self::new(ids, extractor.features(images)?, source_fingerprint)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn feature_len(&self) -> usize {
        self.features.first().map_or(0, |f| f.len())
    }
}

/// Corpus positions sorted by ascending Euclidean distance to `query`,
/// ties broken by ascending id.
pub fn retrieve_positions(query: &[f32], corpus: &RetrievalCorpus) -> Result<Vec<usize>> {
    if corpus.is_empty() {
        return Err(rejected("empty retrieval corpus"));
    }
    if query.len() != corpus.feature_len() {
        return Err(rejected(format!(
            "query has {} features, corpus items have {}",
            query.len(),
            corpus.feature_len()
        )));
    }
    let dist: Vec<f64> = corpus
        .features
        .iter()
        .map(|f| {
            f.iter()
                .zip(query)
                .map(|(&a, &b)| {
                    let d = a as f64 - b as f64;
                    d * d
                })
                .sum::<f64>()
        })
        .collect();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.sort_by(|&a, &b| {
        dist[a]
            .total_cmp(&dist[b])
            .then_with(|| corpus.ids[a].cmp(&corpus.ids[b]))
    });
    Ok(order)
}

/// Ranked corpus ids for `query`.
pub fn retrieve(query: &[f32], corpus: &RetrievalCorpus) -> Result<Vec<String>> {
    Ok(retrieve_positions(query, corpus)?
        .into_iter()
        .map(|i| corpus.ids[i].clone())
        .collect())
}

/// Mean over relevant items of the precision at each one's rank.
pub fn average_precision<T: Eq + Hash>(ranking: &[T], relevant: &HashSet<T>) -> Result<f64> {
    if relevant.is_empty() {
        return Err(rejected("average precision needs a non-empty relevant set"));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, item) in ranking.iter().enumerate() {
        if relevant.contains(item) {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    if hits != relevant.len() {
        return Err(rejected("relevant set is not contained in the ranking"));
    }
    Ok(sum / relevant.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryRow {
    pub query: usize,
    pub ap: f64,
    pub masked_ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProtocolResult {
    pub per_query_ap: Vec<f64>,
    /// Mean AP of the restored queries.
    pub map: f64,
    /// Mean AP of the masked queries used directly.
    pub masked_map: f64,
    pub k: usize,
    pub extractor_fingerprint: String,
    pub rows: Vec<QueryRow>,
}

/// Restores a batch of masked images given their holes.
pub type Inpainter<'a> = dyn Fn(&[Image], &[Mask]) -> Result<Vec<Image>> + 'a;

/// Runs the masked-query retrieval protocol.
///
/// `masker` chooses the hole for each query; `inpainter` restores the
/// masked queries.
pub fn semantic_map_protocol(
    queries: &[&Image],
    corpus: &RetrievalCorpus,
    extractor: &dyn FeatureExtractor,
    inpainter: &Inpainter<'_>,
    masker: &(dyn Fn(&Image) -> Result<Mask> + Sync),
    k: usize,
) -> Result<ProtocolResult> {
    if queries.is_empty() {
        return Err(rejected("no queries"));
    }
    if k == 0 || k > corpus.len() {
        return Err(rejected(format!(
            "k must lie in 1..={}, got {k}",
            corpus.len()
        )));
    }
    let original = extractor.features(queries)?;
    let truth = original
        .iter()
        .map(|f| {
            Ok(retrieve_positions(f, corpus)?
                .into_iter()
                .take(k)
                .collect::<HashSet<_>>())
        })
        .collect::<Result<Vec<_>>>()?;

    let masks = queries
        .iter()
        .map(|q| masker(q))
        .collect::<Result<Vec<_>>>()?;
    let masked = queries
        .iter()
        .zip(&masks)
        .map(|(q, m)| apply_mask(q, m))
        .collect::<Result<Vec<_>>>()?;
    let restored = inpainter(&masked, &masks)?;
    if restored.len() != queries.len() {
        return Err(rejected("inpainter returned the wrong number of images"));
    }
    let restored_f = extractor.features(&restored.iter().collect::<Vec<_>>())?;
    let masked_f = extractor.features(&masked.iter().collect::<Vec<_>>())?;

    let rows = exec::map(queries.len(), |i| -> Result<QueryRow> {
        Ok(QueryRow {
            query: i,
            ap: average_precision(&retrieve_positions(&restored_f[i], corpus)?, &truth[i])?,
            masked_ap: average_precision(&retrieve_positions(&masked_f[i], corpus)?, &truth[i])?,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    Ok(ProtocolResult {
        per_query_ap: rows.iter().map(|r| r.ap).collect(),
        map: rows.iter().map(|r| r.ap).sum::<f64>() / n,
        masked_map: rows.iter().map(|r| r.masked_ap).sum::<f64>() / n,
        k,
        extractor_fingerprint: extractor.fingerprint(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::center_mask;

    fn set(items: &[&'static str]) -> HashSet<&'static str> {
        items.iter().copied().collect()
    }

    #[test]
    fn hand_computed_average_precision() {
        let ap = average_precision(&["a", "x", "b", "y"], &set(&["a", "b"])).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        let ap = average_precision(&["x", "y", "a", "b"], &set(&["a", "b"])).unwrap();
        assert!((ap - (1.0 / 3.0 + 2.0 / 4.0) / 2.0).abs() < 1e-12);
        assert_eq!(
            average_precision(&["a", "b", "x"], &set(&["a", "b"])).unwrap(),
            1.0
        );
        assert!(average_precision(&["a"], &set(&[])).is_err());
        assert!(average_precision(&["a"], &set(&["q"])).is_err());
    }

    #[test]
    fn retrieval_orders_by_distance_then_id() {
        let c = RetrievalCorpus::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![vec![0.0, 0.0], vec![3.0, 4.0], vec![1.0, 0.0]],
            "t",
        )
        .unwrap();
        assert_eq!(retrieve(&[0.0, 0.0], &c).unwrap(), vec!["a", "c", "b"]);
        let dup = RetrievalCorpus::new(
            vec!["z".into(), "m".into()],
            vec![vec![1.0], vec![1.0]],
            "t",
        )
        .unwrap();
        assert_eq!(retrieve(&[0.0], &dup).unwrap(), vec!["m", "z"]);
        let empty = RetrievalCorpus::new(vec![], vec![], "t").unwrap();
        assert!(retrieve(&[0.0], &empty).is_err());
        assert!(RetrievalCorpus::new(
            vec!["a".into(), "a".into()],
            vec![vec![0.0], vec![1.0]],
            "t"
        )
        .is_err());
    }

    struct MeanColor;
    impl FeatureExtractor for MeanColor {
        fn features(&self, images: &[&Image]) -> Result<Vec<Vec<f32>>> {
            Ok(images
                .iter()
                .map(|im| {
                    let plane = im.height() * im.width();
                    (0..3)
                        .map(|c| {
                            im.pixels()[c * plane..(c + 1) * plane].iter().sum::<f32>()
                                / plane as f32
                        })
                        .collect()
                })
                .collect())
        }
        fn fingerprint(&self) -> String {
            "mean-color".into()
        }
    }

    #[test]
    fn identity_and_passthrough_inpainters() {
        let scenes: Vec<Image> = (0..30)
            .map(|i| crate::synth::generate_scene(i, (32, 32)).unwrap().image)
            .collect();
        let refs: Vec<&Image> = scenes.iter().collect();
        let corpus = RetrievalCorpus::build(
            (0..30).map(crate::synth::sample_id).collect(),
            &refs,
            &MeanColor,
            "scenes",
        )
        .unwrap();
        let queries: Vec<&Image> = refs[..6].to_vec();
        let masker = |im: &Image| center_mask((im.height(), im.width()), 0.5);
        let originals: Vec<Image> = queries.iter().map(|q| (*q).clone()).collect();
        let identity = |_: &[Image], _: &[Mask]| Ok(originals.clone());
        let r =
            semantic_map_protocol(&queries, &corpus, &MeanColor, &identity, &masker, 5).unwrap();
        assert_eq!(r.map, 1.0);
        let passthrough = |m: &[Image], _: &[Mask]| Ok(m.to_vec());
        let r =
            semantic_map_protocol(&queries, &corpus, &MeanColor, &passthrough, &masker, 5).unwrap();
        assert_eq!(r.map, r.masked_map);
        assert_eq!(
            r,
            semantic_map_protocol(&queries, &corpus, &MeanColor, &passthrough, &masker, 5).unwrap()
        );
        assert!(
            semantic_map_protocol(&queries, &corpus, &MeanColor, &passthrough, &masker, 0).is_err()
        );
    }
}
