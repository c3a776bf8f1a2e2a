//! Slow reference implementations used by the test suites and `selftest`.
//!
//! Nothing here shares code with the view-batched pipeline: every
//! (query, key, head) pair is rotated independently through the public
//! rope and geometry functions, and softmax is written out per row.

use ndarray::{s, Array4};

use crate::attention::{AttentionOptions, HeadAnchorAssignment, MultiviewLayout};
use crate::error::Result;
use crate::geometry::{lift_along_ray, pixel_ray, project_cross_view_eps};
use crate::rope::{rope_rotate_2d, rope_rotate_3d, RopeConfig};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![0.0; logits.len()];
    }
    let e: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Rotates each of `positions.len() / 2` equal channel segments of `x`
/// with 2D rope at its own `(u, v)`.
fn rotate_segments_2d(x: &[f64], positions: &[(f64, f64)], cfg: &RopeConfig) -> Result<Vec<f64>> {
    let seg = x.len() / positions.len();
    let seg_cfg = RopeConfig { per_head_dim: seg, ..*cfg };
    let mut out = Vec::with_capacity(x.len());
    for (chunk, &(u, v)) in x.chunks(seg).zip(positions) {
        out.extend(rope_rotate_2d(chunk, u, v, &seg_cfg)?);
    }
    Ok(out)
}

fn inverse_segments_2d(x: &[f64], positions: &[(f64, f64)], cfg: &RopeConfig) -> Result<Vec<f64>> {
    let neg: Vec<(f64, f64)> = positions.iter().map(|&(u, v)| (-u, -v)).collect();
    rotate_segments_2d(x, &neg, cfg)
}

fn rotate_segments_3d(x: &[f64], positions: &[[f64; 3]], cfg: &RopeConfig) -> Result<Vec<f64>> {
    let seg = x.len() / positions.len();
    let seg_cfg = RopeConfig { per_head_dim: seg, ..*cfg };
    let mut out = Vec::with_capacity(x.len());
    for (chunk, p) in x.chunks(seg).zip(positions) {
        out.extend(rope_rotate_3d(chunk, *p, &seg_cfg)?);
    }
    Ok(out)
}

fn lane(x: &Array4<f64>, b: usize, l: usize, h: usize) -> Vec<f64> {
    x.slice(s![b, l, h, ..]).to_vec()
}

/// Triple-loop SDPA. Returns `(out, weights)` with weights shaped
/// `(batch, heads, queries, keys)`.
pub fn naive_sdpa(
    q: &Array4<f64>,
    k: &Array4<f64>,
    v: &Array4<f64>,
    scale: f64,
) -> (Array4<f64>, Array4<f64>) {
    let (nb, lq, heads, c) = q.dim();
    let lk = k.dim().1;
    let mut out = Array4::zeros((nb, lq, heads, c));
    let mut weights = Array4::zeros((nb, heads, lq, lk));
    for b in 0..nb {
        for h in 0..heads {
            for i in 0..lq {
                let logits: Vec<f64> = (0..lk)
                    .map(|j| {
                        let mut acc = 0.0;
                        for t in 0..c {
                            acc += q[(b, i, h, t)] * k[(b, j, h, t)];
                        }
                        acc * scale
                    })
                    .collect();
                let p = softmax(&logits);
                for j in 0..lk {
                    weights[(b, h, i, j)] = p[j];
                    for t in 0..c {
                        out[(b, i, h, t)] += p[j] * v[(b, j, h, t)];
                    }
                }
            }
        }
    }
    (out, weights)
}

/// Plain single-image 2D rope attention at the given pixels.
pub fn plain_rope2d_attention(
    q: &Array4<f64>,
    k: &Array4<f64>,
    v: &Array4<f64>,
    pixels: &[(f64, f64)],
    cfg: &RopeConfig,
    scale: f64,
) -> Result<Array4<f64>> {
    let mut qr = q.clone();
    let mut kr = k.clone();
    let (nb, _, heads, _) = q.dim();
    for b in 0..nb {
        for (t, &(u, vv)) in pixels.iter().enumerate() {
            for h in 0..heads {
                let rq = rope_rotate_2d(&lane(q, b, t, h), u, vv, cfg)?;
                qr.slice_mut(s![b, t, h, ..]).assign(&ndarray::Array1::from(rq));
                let rk = rope_rotate_2d(&lane(k, b, t, h), u, vv, cfg)?;
                kr.slice_mut(s![b, t, h, ..]).assign(&ndarray::Array1::from(rk));
            }
        }
    }
    Ok(naive_sdpa(&qr, &kr, v, scale).0)
}

/// Pairwise reference for multiview attention with separate query/key
/// layouts. Weights are returned in sequence order:
/// `(batch, heads, L_q, L_k)`.
#[allow(clippy::too_many_arguments)]
pub fn pairwise_urope_attention(
    q: &Array4<f64>,
    q_layout: &MultiviewLayout,
    k: &Array4<f64>,
    v: &Array4<f64>,
    k_layout: &MultiviewLayout,
    assignment: &HeadAnchorAssignment,
    cfg: &RopeConfig,
    opts: &AttentionOptions,
) -> Result<(Array4<f64>, Array4<f64>)> {
    let (nb, lq, heads, c) = q.dim();
    let lk = k.dim().1;
    let scale = opts.scale.unwrap_or(1.0 / (c as f64).sqrt());
    let mut out = Array4::zeros((nb, lq, heads, c));
    let mut weights = Array4::zeros((nb, heads, lq, lk));
    for b in 0..nb {
        for (i, qt) in q_layout.tokens().iter().enumerate() {
            let qcam = &q_layout.cameras()[qt.view];
            for h in 0..heads {
                let depths = assignment.head_depths(h);
                let qpos = vec![(qt.u, qt.v); depths.len()];
                let qrot = rotate_segments_2d(&lane(q, b, i, h), &qpos, cfg)?;
                let mut logits = Vec::with_capacity(lk);
                let mut values = Vec::with_capacity(lk);
                for (j, kt) in k_layout.tokens().iter().enumerate() {
                    let kcam = &k_layout.cameras()[kt.view];
                    let mut kpos = Vec::with_capacity(depths.len());
                    let mut valid = true;
                    for &d in depths {
                        if kcam == qcam {
                            kpos.push((kt.u, kt.v));
                        } else {
                            let p = project_cross_view_eps(kcam, qcam, kt.u, kt.v, &[d], opts.proj_eps)?[0];
                            valid &= p.valid;
                            kpos.push((p.u, p.v));
                        }
                    }
                    let krot = rotate_segments_2d(&lane(k, b, j, h), &kpos, cfg)?;
                    logits.push(if opts.mask_invalid && !valid {
                        f64::NEG_INFINITY
                    } else {
                        scale * dot(&qrot, &krot)
                    });
                    values.push(if opts.rotate_vo {
                        rotate_segments_2d(&lane(v, b, j, h), &kpos, cfg)?
                    } else {
                        lane(v, b, j, h)
                    });
                }
                let p = softmax(&logits);
                let mut o = vec![0.0; c];
                for (j, pj) in p.iter().enumerate() {
                    weights[(b, h, i, j)] = *pj;
                    for t in 0..c {
                        o[t] += pj * values[j][t];
                    }
                }
                if opts.rotate_vo {
                    o = inverse_segments_2d(&o, &qpos, cfg)?;
                }
                for t in 0..c {
                    out[(b, i, h, t)] = o[t];
                }
            }
        }
    }
    Ok((out, weights))
}

/// Pairwise reference for 3D queries attending to lifted image tokens.
#[allow(clippy::too_many_arguments)]
pub fn pairwise_cross_3d(
    q: &Array4<f64>,
    query_points: &[[f64; 3]],
    k: &Array4<f64>,
    v: &Array4<f64>,
    k_layout: &MultiviewLayout,
    assignment: &HeadAnchorAssignment,
    cfg: &RopeConfig,
) -> Result<Array4<f64>> {
    let (nb, lq, heads, c) = q.dim();
    let scale = 1.0 / (c as f64).sqrt();
    let mut out = Array4::zeros((nb, lq, heads, c));
    for b in 0..nb {
        for i in 0..lq {
            for h in 0..heads {
                let depths = assignment.head_depths(h);
                let qrot = rotate_segments_3d(&lane(q, b, i, h), &vec![query_points[i]; depths.len()], cfg)?;
                let mut logits = Vec::new();
                for (j, kt) in k_layout.tokens().iter().enumerate() {
                    let ray = pixel_ray(&k_layout.cameras()[kt.view], kt.u, kt.v);
                    let pts: Vec<[f64; 3]> = depths
                        .iter()
                        .map(|&d| {
                            let p = lift_along_ray(&ray, &[d]).unwrap()[0];
                            [p.x, p.y, p.z]
                        })
                        .collect();
                    let krot = rotate_segments_3d(&lane(k, b, j, h), &pts, cfg)?;
                    logits.push(scale * dot(&qrot, &krot));
                }
                let p = softmax(&logits);
                for (j, pj) in p.iter().enumerate() {
                    for t in 0..c {
                        out[(b, i, h, t)] += pj * v[(b, j, h, t)];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Central finite-difference gradients of `sum(d_out * f(q, k, v))`.
pub fn finite_difference_grads<F>(
    f: F,
    q: &Array4<f64>,
    k: &Array4<f64>,
    v: &Array4<f64>,
    d_out: &Array4<f64>,
    step: f64,
) -> [Array4<f64>; 3]
where
    F: Fn(&Array4<f64>, &Array4<f64>, &Array4<f64>) -> Array4<f64>,
{
    let loss = |q: &Array4<f64>, k: &Array4<f64>, v: &Array4<f64>| -> f64 {
        f(q, k, v).iter().zip(d_out.iter()).map(|(a, b)| a * b).sum()
    };
    let mut grads = [Array4::zeros(q.dim()), Array4::zeros(k.dim()), Array4::zeros(v.dim())];
    let inputs = [q, k, v];
    for (which, g) in grads.iter_mut().enumerate() {
        let base = inputs[which];
        for (idx, slot) in g.indexed_iter_mut() {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[idx] += step;
            minus[idx] -= step;
            let mut args_p = [q.clone(), k.clone(), v.clone()];
            let mut args_m = [q.clone(), k.clone(), v.clone()];
            args_p[which] = plus;
            args_m[which] = minus;
            *slot = (loss(&args_p[0], &args_p[1], &args_p[2]) - loss(&args_m[0], &args_m[1], &args_m[2]))
                / (2.0 * step);
        }
    }
    grads
}
