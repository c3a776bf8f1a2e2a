//! Attention diagnostics: head-wise entropy (multi-head collapse), dominant
//! head per key patch, and positional bias heatmaps.

use ndarray::Array4;

use crate::attention::{project_keys, HeadAnchorAssignment, MultiviewLayout, SegmentRotator, TokenPosition};
use crate::error::{Error, Result};
use crate::geometry::ProjectedPixel;
use crate::rope::RopeConfig;
use crate::scene::Scene;

/// Shannon entropy of `scores / sum(scores)` divided by `ln H`.
///
/// Returns `None` when the scores sum to zero. Equal scores give exactly
/// 1.0, and a single head gives 1.0 by convention. `0 ln 0 = 0`.
pub fn normalized_entropy(scores: &[f64]) -> Option<f64> {
    let total: f64 = scores.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return None;
    }
    if scores.len() == 1 || scores.iter().all(|&s| s == scores[0]) {
        return Some(1.0);
    }
    let h: f64 = scores
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| {
            let p = s / total;
            -p * p.ln()
        })
        .sum();
    Some((h / (scores.len() as f64).ln()).clamp(0.0, 1.0))
}

/// Which pseudo-batch entries, queries and keys enter the statistics.
/// `None` selects everything.
#[derive(Debug, Clone, Default)]
pub struct EntropySelection {
    pub batches: Option<Vec<usize>>,
    pub queries: Option<Vec<usize>>,
    pub keys: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenEntropy {
    pub batch: usize,
    pub key: usize,
    pub entropy: f64,
}

/// Entropy statistics for one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadEntropyReport {
    /// Per (batch entry, key token) entropies.
    pub tokens: Vec<TokenEntropy>,
    /// (batch, key) pairs with zero attention mass in every head.
    pub skipped: Vec<(usize, usize)>,
    /// Mean of the per-sample entropies.
    pub mean: f64,
    /// Mean over keys of the entropy of scores pooled across samples.
    pub pooled_mean: f64,
}

fn resolve(sel: &Option<Vec<usize>>, len: usize, what: &str) -> Result<Vec<usize>> {
    match sel {
        None => Ok((0..len).collect()),
        Some(idx) => {
            if let Some(bad) = idx.iter().find(|&&i| i >= len) {
                return Err(Error::InvalidArgument(format!("{what} index {bad} out of range {len}")));
            }
            if idx.is_empty() {
                return Err(Error::InvalidArgument(format!("empty {what} selection")));
            }
            Ok(idx.clone())
        }
    }
}

fn check_weights(weights: &Array4<f64>) -> Result<()> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidArgument("attention weights must be finite and non-negative".into()));
    }
    Ok(())
}

/// Normalized head entropy of every selected key token, with weights shaped
/// `(batch, heads, queries, keys)`.
pub fn head_entropy(weights: &Array4<f64>, keys: Option<&[usize]>) -> Result<HeadEntropyReport> {
    let sel = EntropySelection { keys: keys.map(<[usize]>::to_vec), ..Default::default() };
    head_entropy_selected(weights, &sel)
}

pub fn head_entropy_selected(weights: &Array4<f64>, sel: &EntropySelection) -> Result<HeadEntropyReport> {
    check_weights(weights)?;
    let (nb, heads, nq, nk) = weights.dim();
    let batches = resolve(&sel.batches, nb, "batch")?;
    let queries = resolve(&sel.queries, nq, "query")?;
    let keys = resolve(&sel.keys, nk, "key")?;

    let mut tokens = Vec::new();
    let mut skipped = Vec::new();
    let mut pooled = vec![vec![0.0; heads]; keys.len()];
    let mut s = vec![0.0; heads];
    for &b in &batches {
        for (ki, &key) in keys.iter().enumerate() {
            for (h, slot) in s.iter_mut().enumerate() {
                let sum: f64 = queries.iter().map(|&i| weights[(b, h, i, key)]).sum();
                *slot = sum / queries.len() as f64;
                pooled[ki][h] += *slot;
            }
            match normalized_entropy(&s) {
                Some(entropy) => tokens.push(TokenEntropy { batch: b, key, entropy }),
                None => skipped.push((b, key)),
            }
        }
    }
    let mean = if tokens.is_empty() {
        f64::NAN
    } else {
        tokens.iter().map(|t| t.entropy).sum::<f64>() / tokens.len() as f64
    };
    let pooled: Vec<f64> = pooled.iter().filter_map(|s| normalized_entropy(s)).collect();
    let pooled_mean =
        if pooled.is_empty() { f64::NAN } else { pooled.iter().sum::<f64>() / pooled.len() as f64 };
    Ok(HeadEntropyReport { tokens, skipped, mean, pooled_mean })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Most-attended head for each key patch, grid-shaped per view.
#[derive(Debug, Clone, PartialEq)]
pub struct DominantHeadMap {
    /// (columns, rows) of each view's grid.
    pub grid: (usize, usize),
    /// Head index per patch, row-major, one list per view.
    pub per_view: Vec<Vec<usize>>,
}

/// Argmax over heads of each key's mean attention (over batch entries and
/// queries).
pub fn dominant_head_map(weights: &Array4<f64>, layout: &MultiviewLayout) -> Result<DominantHeadMap> {
    check_weights(weights)?;
    let (nb, heads, nq, nk) = weights.dim();
    if nk != layout.len() {
        return Err(Error::ShapeMismatch(format!(
            "weights cover {nk} keys, layout has {} tokens",
            layout.len()
        )));
    }
    let mut per_view = vec![Vec::with_capacity(layout.tokens_per_view()); layout.n_views()];
    let mut s = vec![0.0; heads];
    for (key, tok) in layout.tokens().iter().enumerate() {
        for (h, slot) in s.iter_mut().enumerate() {
            let mut sum = 0.0;
            for b in 0..nb {
                for i in 0..nq {
                    sum += weights[(b, h, i, key)];
                }
            }
            *slot = sum / (nb * nq) as f64;
        }
        per_view[tok.view].push(argmax_lowest(&s));
    }
    Ok(DominantHeadMap { grid: layout.grid(), per_view })
}

/// Positional bias seen by one query patch over a key view's patches.
#[derive(Debug, Clone)]
pub struct BiasHeatmap {
    pub query: TokenPosition,
    pub key_view: usize,
    pub grid: (usize, usize),
    /// Depths per head (one per channel segment).
    pub anchors: Vec<Vec<f64>>,
    /// `scores[h][patch]` in [-1, 1], row-major patches.
    pub scores: Vec<Vec<f64>>,
    /// `projections[h][patch]` of the first segment.
    pub projections: Vec<Vec<ProjectedPixel>>,
}

/// Probe vector: unit mass on the lowest-frequency channel pair of every
/// axis block, so the score is the mean of `cos(w_min * du)` and
/// `cos(w_min * dv)` over segments.
pub fn probe_vector(cfg: &RopeConfig, segments: usize) -> Result<Vec<f64>> {
    if segments == 0 || !cfg.per_head_dim.is_multiple_of(4 * segments) {
        return Err(Error::InvalidArgument(format!(
            "per-head dim {} does not split into {segments} 2D segments",
            cfg.per_head_dim
        )));
    }
    let seg = cfg.per_head_dim / segments;
    let block = seg / 2;
    let mut e = vec![0.0; cfg.per_head_dim];
    for s in 0..segments {
        for axis in 0..2 {
            e[s * seg + axis * block + block - 2] = 1.0;
        }
    }
    Ok(e)
}

/// `<R_q e, R_k(h) e> / |e|^2` for every key patch of `key_view` and head.
pub fn bias_heatmap(
    query: TokenPosition,
    key_view: usize,
    scene: &Scene,
    assignment: &HeadAnchorAssignment,
    cfg: &RopeConfig,
    eps: f64,
) -> Result<BiasHeatmap> {
    let layout = scene.layout()?;
    if query.view >= layout.n_views() || key_view >= layout.n_views() {
        return Err(Error::InvalidArgument(format!(
            "view index out of range (scene has {} views)",
            layout.n_views()
        )));
    }
    let segs = assignment.segments();
    let rot = SegmentRotator::new(cfg, segs, 2)?;
    let e = probe_vector(cfg, segs)?;
    let norm2: f64 = e.iter().map(|x| x * x).sum();
    let mut qe = e.clone();
    let qpos: Vec<f64> = (0..segs).flat_map(|_| [query.u, query.v]).collect();
    rot.apply(&mut qe, &qpos, 1.0);

    let keys = layout.view_tokens(key_view);
    let proj = project_keys(keys, layout.cameras(), &layout.cameras()[query.view], assignment, eps)?;
    let heads = assignment.heads();
    let mut scores = vec![Vec::with_capacity(keys.len()); heads];
    let mut projections = vec![Vec::with_capacity(keys.len()); heads];
    let mut ke = vec![0.0; e.len()];
    for l in 0..keys.len() {
        for h in 0..heads {
            let pos = proj.positions.get(l, h);
            ke.copy_from_slice(&e);
            rot.apply(&mut ke, pos, 1.0);
            scores[h].push(qe.iter().zip(&ke).map(|(a, b)| a * b).sum::<f64>() / norm2);
            projections[h].push(ProjectedPixel {
                u: pos[0],
                v: pos[1],
                w_tilde: f64::NAN,
                valid: proj.valid[(l * heads + h) * segs],
            });
        }
    }
    Ok(BiasHeatmap {
        query,
        key_view,
        grid: scene.grid_dims(key_view),
        anchors: (0..heads).map(|h| assignment.head_depths(h).to_vec()).collect(),
        scores,
        projections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn entropy_examples() {
        assert_eq!(normalized_entropy(&[0.3, 0.3]), Some(1.0));
        assert_eq!(normalized_entropy(&[0.0, 0.7, 0.0]), Some(0.0));
        assert_eq!(normalized_entropy(&[0.0, 0.0]), None);
        assert_eq!(normalized_entropy(&[0.2]), Some(1.0));
        // p = [0.1 x 5, 0.5]: -(5 * 0.1 ln 0.1 + 0.5 ln 0.5) / ln 6
        let expected = -(5.0 * 0.1 * 0.1f64.ln() + 0.5 * 0.5f64.ln()) / 6f64.ln();
        assert_abs_diff_eq!(
            normalized_entropy(&[1.0, 1.0, 1.0, 1.0, 1.0, 5.0]).unwrap(),
            expected,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(expected, 0.8359750080865052, epsilon = 1e-15);
    }

    #[test]
    fn report_skips_dead_keys() {
        let mut w = Array4::<f64>::zeros((1, 2, 2, 3));
        for h in 0..2 {
            for i in 0..2 {
                w[(0, h, i, 0)] = 0.5;
                w[(0, h, i, 1)] = 0.5;
            }
        }
        let r = head_entropy(&w, None).unwrap();
        assert_eq!(r.skipped, vec![(0, 2)]);
        assert_eq!(r.tokens.len(), 2);
        assert_eq!(r.mean, 1.0);
        assert_eq!(r.pooled_mean, 1.0);
        assert!(head_entropy(&w, Some(&[3])).is_err());
        let r = head_entropy(&w, Some(&[1])).unwrap();
        assert_eq!(r.tokens[0].key, 1);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_lowest(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax_lowest(&[0.0]), 0);
    }

    #[test]
    fn probe_lays_out_lowest_pair() {
        let cfg = RopeConfig::new(16).unwrap();
        let e = probe_vector(&cfg, 1).unwrap();
        assert_eq!(e[6], 1.0);
        assert_eq!(e[14], 1.0);
        assert_eq!(e.iter().sum::<f64>(), 2.0);
        assert!(probe_vector(&RopeConfig::new(6).unwrap(), 1).is_err());
    }
}
