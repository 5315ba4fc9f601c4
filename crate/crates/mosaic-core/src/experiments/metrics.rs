//! Retrieval metrics: average precision, mAP and CMC rank-1 under the
//! standard cross-camera protocol.
//!
//! Ranking is by cosine similarity on L2-normalized embeddings, descending,
//! with ties broken by gallery index. Gallery items sharing both identity
//! and camera with the query are filtered out before ranking; a query left
//! without any relevant gallery item is dropped from the metrics (the drop
//! count is reported, and losing every query is a protocol error).

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::experiments::synthetic::{SyntheticDataset, SyntheticImage};
use crate::mosaic::route;

use alloc::vec::Vec;

/// Average precision of a ranked relevance list: the mean over relevant
/// positions `i` (1-based) of `(relevant in top-i) / i`.
pub fn average_precision(ranked_relevance: &[bool]) -> Result<f64> {
    let total_relevant = ranked_relevance.iter().filter(|r| **r).count();
    if total_relevant == 0 {
        return Err(Error::Protocol("no relevant item for this query".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / total_relevant as f64)
}

/// Evaluation outcome; metrics are percentages.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalResult {
    pub map: f64,
    pub rank1: f64,
    /// Queries dropped because the cross-camera filter left them without a
    /// single relevant gallery item.
    pub dropped_queries: usize,
}

fn normalized_embedding(
    encoder: &Encoder,
    image: &SyntheticImage,
    inclusion: &[bool],
) -> Result<Vec<f64>> {
    let active = route(&image.annotation, inclusion, &encoder.schema)?;
    let emb = encoder.encode_routed(&image.tokens, &active)?;
    Ok(emb.normalized()?.data().to_vec())
}

/// Embed query and gallery under the inclusion mask and compute mAP / rank-1
/// with the cross-camera filter.
pub fn evaluate(encoder: &Encoder, dataset: &SyntheticDataset, inclusion: &[bool]) -> Result<EvalResult> {
    if dataset.query.is_empty() || dataset.gallery.is_empty() {
        return Err(Error::Dataset("evaluation needs a query and a gallery split".into()));
    }
    let queries: Vec<Vec<f64>> = dataset
        .query
        .iter()
        .map(|img| normalized_embedding(encoder, img, inclusion))
        .collect::<Result<_>>()?;
    let gallery: Vec<Vec<f64>> = dataset
        .gallery
        .iter()
        .map(|img| normalized_embedding(encoder, img, inclusion))
        .collect::<Result<_>>()?;

    let mut ap_sum = 0.0;
    let mut rank1_hits = 0usize;
    let mut kept = 0usize;
    let mut dropped = 0usize;
    for (q_img, q_emb) in dataset.query.iter().zip(&queries) {
        // cross-camera rule: drop gallery items that share identity AND camera
        let surviving: Vec<(usize, f64, bool)> = dataset
            .gallery
            .iter()
            .zip(&gallery)
            .enumerate()
            .filter(|(_, (g_img, _))| {
                !(g_img.identity == q_img.identity && g_img.camera == q_img.camera)
            })
            .map(|(idx, (g_img, g_emb))| {
                let sim: f64 = q_emb.iter().zip(g_emb).map(|(a, b)| a * b).sum();
                (idx, sim, g_img.identity == q_img.identity)
            })
            .collect();
        if !surviving.iter().any(|(_, _, rel)| *rel) {
            dropped += 1;
            continue;
        }
        let mut ranked = surviving;
        // descending similarity, ties by gallery index
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(core::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
        let relevance: Vec<bool> = ranked.iter().map(|(_, _, rel)| *rel).collect();
        ap_sum += average_precision(&relevance)?;
        if relevance[0] {
            rank1_hits += 1;
        }
        kept += 1;
    }
    if kept == 0 {
        return Err(Error::Protocol(
            "every query was dropped by the cross-camera filter".into(),
        ));
    }
    Ok(EvalResult {
        map: 100.0 * ap_sum / kept as f64,
        rank1: 100.0 * rank1_hits as f64 / kept as f64,
        dropped_queries: dropped,
    })
}
