//! Multi-head scaled dot-product attention with depth-anchored cross-view
//! rotary embeddings.
//!
//! Tensors are `ndarray::Array4<f64>` shaped `(batch, sequence, heads,
//! per_head_dim)`. Attention weights are shaped `(batch, heads, queries,
//! keys)`.
//!
//! The multiview pipeline moves the query view into the batch axis: pseudo
//! batch entry `b * N + j` holds the queries of view `j` from sample `b`,
//! and a copy of every key/value token of sample `b` rotated for view `j`.
//! All rotations are applied before the kernel, so the kernel itself is an
//! ordinary SDPA.

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    pixel_ray, project_point_eps, Camera, ProjectedPixel, DEFAULT_PROJ_EPS,
};
use crate::rope::{AnchorSchedule, BlockRotator, RopeConfig};

/// Query, key and value tensors for one attention call.
#[derive(Debug, Clone)]
pub struct AttentionTensors {
    pub q: Array4<f64>,
    pub k: Array4<f64>,
    pub v: Array4<f64>,
}

impl AttentionTensors {
    pub fn new(q: Array4<f64>, k: Array4<f64>, v: Array4<f64>) -> Result<Self> {
        check_qkv(&q, &k, &v)?;
        Ok(Self { q, k, v })
    }
}

fn check_finite(name: &str, x: &Array4<f64>) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{name} contains NaN or infinite values")));
    }
    Ok(())
}

fn check_qkv(q: &Array4<f64>, k: &Array4<f64>, v: &Array4<f64>) -> Result<()> {
    let (qs, ks, vs) = (q.dim(), k.dim(), v.dim());
    if ks != vs {
        return Err(Error::ShapeMismatch(format!("k shape {ks:?} != v shape {vs:?}")));
    }
    if qs.0 != ks.0 || qs.2 != ks.2 || qs.3 != ks.3 {
        return Err(Error::ShapeMismatch(format!(
            "q shape {qs:?} incompatible with k shape {ks:?} (batch, heads and channels must agree)"
        )));
    }
    check_finite("q", q)?;
    check_finite("k", k)?;
    check_finite("v", v)
}

/// A token's source view and pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenPosition {
    pub view: usize,
    pub u: f64,
    pub v: f64,
}

/// View-major token layout over `N` cameras with `L_v` tokens each.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiviewLayout {
    cameras: Vec<Camera>,
    tokens_per_view: usize,
    tokens: Vec<TokenPosition>,
    /// Patch grid as (columns, rows); `(L_v, 1)` when unknown.
    grid: (usize, usize),
}

impl MultiviewLayout {
    /// Builds a layout from per-view pixel lists, which must all have the
    /// same length.
    pub fn new(cameras: Vec<Camera>, pixels: &[Vec<(f64, f64)>]) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::InvalidArgument("layout needs at least one view".into()));
        }
        if pixels.len() != cameras.len() {
            return Err(Error::InvalidArgument(format!(
                "{} cameras but {} pixel lists",
                cameras.len(),
                pixels.len()
            )));
        }
        let tokens_per_view = pixels[0].len();
        if tokens_per_view == 0 || pixels.iter().any(|p| p.len() != tokens_per_view) {
            return Err(Error::InvalidArgument(
                "every view must contribute the same non-zero number of tokens".into(),
            ));
        }
        let tokens = pixels
            .iter()
            .enumerate()
            .flat_map(|(view, px)| px.iter().map(move |&(u, v)| TokenPosition { view, u, v }))
            .collect();
        Ok(Self { cameras, tokens_per_view, tokens, grid: (tokens_per_view, 1) })
    }

    /// Records the patch-grid shape used by grid-shaped diagnostics.
    pub fn with_grid(mut self, cols: usize, rows: usize) -> Result<Self> {
        if cols * rows != self.tokens_per_view {
            return Err(Error::InvalidArgument(format!(
                "grid {cols}x{rows} does not hold {} tokens",
                self.tokens_per_view
            )));
        }
        self.grid = (cols, rows);
        Ok(self)
    }

    pub fn n_views(&self) -> usize {
        self.cameras.len()
    }

    pub fn tokens_per_view(&self) -> usize {
        self.tokens_per_view
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    pub fn tokens(&self) -> &[TokenPosition] {
        &self.tokens
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn view_tokens(&self, view: usize) -> &[TokenPosition] {
        let n = self.tokens_per_view;
        &self.tokens[view * n..(view + 1) * n]
    }

    /// Same layout with every camera replaced through `f`.
    pub fn map_cameras(&self, f: impl Fn(&Camera) -> Camera) -> Self {
        Self { cameras: self.cameras.iter().map(f).collect(), ..self.clone() }
    }

    /// Reorders views: new view `i` is old view `order[i]`.
    pub fn permute_views(&self, order: &[usize]) -> Result<Self> {
        let n = self.n_views();
        let mut seen = vec![false; n];
        if order.len() != n || order.iter().any(|&o| o >= n || std::mem::replace(&mut seen[o], true)) {
            return Err(Error::InvalidArgument("view order is not a permutation".into()));
        }
        let cameras = order.iter().map(|&o| self.cameras[o].clone()).collect();
        let pixels: Vec<Vec<(f64, f64)>> = order
            .iter()
            .map(|&o| self.view_tokens(o).iter().map(|t| (t.u, t.v)).collect())
            .collect();
        Self::new(cameras, &pixels)?.with_grid(self.grid.0, self.grid.1)
    }
}

/// How anchors are spread over the per-head channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Splitting {
    /// One anchor per head; heads grouped contiguously when `K < H`.
    HeadWise,
    /// Every head carries all `K` anchors, one per contiguous channel
    /// segment of width `C / K`.
    ChannelWise,
}

/// Per-head depth anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadAnchorAssignment {
    splitting: Splitting,
    /// `heads x segments` depths, row-major.
    depths: Vec<f64>,
    heads: usize,
    segments: usize,
}

impl HeadAnchorAssignment {
    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Anchors per head: 1 for head-wise, `K` for channel-wise.
    pub fn segments(&self) -> usize {
        self.segments
    }

    pub fn splitting(&self) -> Splitting {
        self.splitting
    }

    /// The depths used by head `h`, one per channel segment.
    pub fn head_depths(&self, h: usize) -> &[f64] {
        &self.depths[h * self.segments..(h + 1) * self.segments]
    }

    /// One depth per head, head-wise assignments only.
    pub fn per_head_depth(&self) -> Option<&[f64]> {
        (self.segments == 1).then_some(&self.depths[..])
    }

    /// Every head at a single depth. Useful for tests and heatmaps.
    pub fn uniform(depth: f64, heads: usize) -> Result<Self> {
        if heads == 0 || !(depth.is_finite() && depth > 0.0) {
            return Err(Error::InvalidArgument("need heads >= 1 and a positive depth".into()));
        }
        Ok(Self { splitting: Splitting::HeadWise, depths: vec![depth; heads], heads, segments: 1 })
    }
}

/// Head-wise assignment: heads are split into `K` contiguous groups of
/// `H / K` heads; group `g` uses `depths[g]`.
pub fn assign_anchors(schedule: &AnchorSchedule, heads: usize) -> Result<HeadAnchorAssignment> {
    let k = schedule.count();
    if heads == 0 {
        return Err(Error::InvalidArgument("head count must be at least 1".into()));
    }
    if k > heads || !heads.is_multiple_of(k) {
        return Err(Error::InvalidArgument(format!(
            "{heads} heads cannot be split into {k} equal anchor groups"
        )));
    }
    let group = heads / k;
    let depths = (0..heads).map(|h| schedule.depths()[h / group]).collect();
    Ok(HeadAnchorAssignment { splitting: Splitting::HeadWise, depths, heads, segments: 1 })
}

/// Channel-wise assignment: each head holds all anchors.
pub fn assign_anchors_channelwise(
    schedule: &AnchorSchedule,
    heads: usize,
) -> Result<HeadAnchorAssignment> {
    if heads == 0 {
        return Err(Error::InvalidArgument("head count must be at least 1".into()));
    }
    let k = schedule.count();
    let depths = (0..heads).flat_map(|_| schedule.depths().iter().copied()).collect();
    Ok(HeadAnchorAssignment { splitting: Splitting::ChannelWise, depths, heads, segments: k })
}

/// Positions per (token, head, segment, axis), flat.
#[derive(Debug, Clone)]
pub struct PositionField {
    tokens: usize,
    heads: usize,
    segments: usize,
    axes: usize,
    data: Vec<f64>,
}

impl PositionField {
    fn zeros(tokens: usize, heads: usize, segments: usize, axes: usize) -> Self {
        Self { tokens, heads, segments, axes, data: vec![0.0; tokens * heads * segments * axes] }
    }

    fn stride(&self) -> usize {
        self.segments * self.axes
    }

    /// All segment positions of token `l`, head `h`.
    pub fn get(&self, l: usize, h: usize) -> &[f64] {
        let s = self.stride();
        let i = (l * self.heads + h) * s;
        &self.data[i..i + s]
    }

    fn get_mut(&mut self, l: usize, h: usize) -> &mut [f64] {
        let s = self.stride();
        let i = (l * self.heads + h) * s;
        &mut self.data[i..i + s]
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }
}

/// Projected key coordinates for one query view.
#[derive(Debug, Clone)]
pub struct KeyProjection {
    pub positions: PositionField,
    /// Per (token, head, segment): whether the projective divide was valid.
    pub valid: Vec<bool>,
}

impl KeyProjection {
    /// True when every segment of token `l`, head `h` projected validly.
    pub fn head_valid(&self, l: usize, h: usize) -> bool {
        let s = self.positions.segments;
        let i = (l * self.positions.heads + h) * s;
        self.valid[i..i + s].iter().all(|&v| v)
    }
}

/// Projects every key token, head and segment into `query_cam`.
///
/// Tokens whose camera equals the query camera keep their pixel exactly.
pub fn project_keys(
    key_tokens: &[TokenPosition],
    key_cameras: &[Camera],
    query_cam: &Camera,
    assignment: &HeadAnchorAssignment,
    eps: f64,
) -> Result<KeyProjection> {
    let (heads, segs) = (assignment.heads(), assignment.segments());
    let mut positions = PositionField::zeros(key_tokens.len(), heads, segs, 2);
    let mut valid = vec![true; key_tokens.len() * heads * segs];
    for (l, tok) in key_tokens.iter().enumerate() {
        let cam = key_cameras.get(tok.view).ok_or_else(|| {
            Error::InvalidArgument(format!("no camera for key view {}", tok.view))
        })?;
        let same = cam == query_cam;
        let ray = pixel_ray(cam, tok.u, tok.v);
        for h in 0..heads {
            for (s, &d) in assignment.head_depths(h).iter().enumerate() {
                let p = if same {
                    ProjectedPixel { u: tok.u, v: tok.v, w_tilde: d, valid: true }
                } else {
                    project_point_eps(query_cam, &ray.at(d), eps)
                };
                let slot = positions.get_mut(l, h);
                slot[2 * s] = p.u;
                slot[2 * s + 1] = p.v;
                valid[(l * heads + h) * segs + s] = p.valid;
            }
        }
    }
    Ok(KeyProjection { positions, valid })
}

/// Query positions: the token's own pixel for every head and segment.
fn query_field(tokens: &[TokenPosition], heads: usize, segments: usize) -> PositionField {
    let mut f = PositionField::zeros(tokens.len(), heads, segments, 2);
    for (l, t) in tokens.iter().enumerate() {
        for h in 0..heads {
            for pair in f.get_mut(l, h).chunks_exact_mut(2) {
                pair[0] = t.u;
                pair[1] = t.v;
            }
        }
    }
    f
}

/// Rotator for `segments` equal channel segments, each an `axes`-block
/// rotary embedding with its own ladder of width `C / (segments * axes)`.
#[derive(Debug, Clone)]
pub struct SegmentRotator {
    block: BlockRotator,
    segments: usize,
}

impl SegmentRotator {
    pub fn new(cfg: &RopeConfig, segments: usize, axes: usize) -> Result<Self> {
        cfg.validate()?;
        if segments == 0 || !cfg.per_head_dim.is_multiple_of(segments) {
            return Err(Error::InvalidArgument(format!(
                "per-head dim {} does not split into {segments} segments",
                cfg.per_head_dim
            )));
        }
        let seg_cfg = RopeConfig { per_head_dim: cfg.per_head_dim / segments, ..*cfg };
        let block = BlockRotator::new(&seg_cfg, axes)?;
        Ok(Self { block, segments })
    }

    /// Rotates one head vector; `positions` holds `segments * axes` values.
    pub fn apply(&self, x: &mut [f64], positions: &[f64], sign: f64) {
        let a = self.block.axes();
        for (s, seg) in x.chunks_exact_mut(self.block.dim()).enumerate() {
            self.block.apply(seg, &positions[s * a..(s + 1) * a], sign);
        }
        debug_assert_eq!(positions.len(), self.segments * a);
    }
}

/// Rotates `x` (any batch, `field.tokens` tokens) in place.
fn rotate_tensor(x: &mut Array4<f64>, field: &PositionField, rot: &SegmentRotator, sign: f64) {
    let (_, l_len, heads, c) = x.dim();
    debug_assert_eq!(l_len, field.tokens);
    let data = x.as_slice_mut().expect("standard layout");
    for (i, lane) in data.chunks_exact_mut(c).enumerate() {
        let h = i % heads;
        let l = (i / heads) % l_len;
        rot.apply(lane, field.get(l, h), sign);
    }
}

fn standard(x: &Array4<f64>) -> Array4<f64> {
    x.as_standard_layout().into_owned()
}

fn check_query_view(tokens: &[TokenPosition], query_view: usize) -> Result<()> {
    if let Some(t) = tokens.iter().find(|t| t.view != query_view) {
        return Err(Error::InvalidArgument(format!(
            "query batch mixes views {} and {query_view}; split queries per view first",
            t.view
        )));
    }
    Ok(())
}

fn check_heads(x: &Array4<f64>, cfg: &RopeConfig, what: &str) -> Result<()> {
    if x.dim().3 != cfg.per_head_dim {
        return Err(Error::ShapeMismatch(format!(
            "{what} has {} channels per head, config says {}",
            x.dim().3,
            cfg.per_head_dim
        )));
    }
    Ok(())
}

/// Rotates every query token at its own pixel, identically for all heads.
pub fn encode_query_rope(
    q: &Array4<f64>,
    tokens: &[TokenPosition],
    query_view: usize,
    cfg: &RopeConfig,
) -> Result<Array4<f64>> {
    encode_query_rope_segmented(q, tokens, query_view, 1, cfg)
}

/// Query rotation for a `segments`-way channel split (channel-wise anchors).
pub fn encode_query_rope_segmented(
    q: &Array4<f64>,
    tokens: &[TokenPosition],
    query_view: usize,
    segments: usize,
    cfg: &RopeConfig,
) -> Result<Array4<f64>> {
    check_heads(q, cfg, "q")?;
    check_query_view(tokens, query_view)?;
    if q.dim().1 != tokens.len() {
        return Err(Error::ShapeMismatch(format!(
            "q has {} tokens, {} positions given",
            q.dim().1,
            tokens.len()
        )));
    }
    let rot = SegmentRotator::new(cfg, segments, 2)?;
    let mut out = standard(q);
    rotate_tensor(&mut out, &query_field(tokens, q.dim().2, segments), &rot, 1.0);
    Ok(out)
}

/// Rotates each key head at its projection into `query_view` of `layout`.
pub fn encode_key_rope(
    k: &Array4<f64>,
    layout: &MultiviewLayout,
    query_view: usize,
    assignment: &HeadAnchorAssignment,
    cfg: &RopeConfig,
) -> Result<Array4<f64>> {
    let query_cam = layout.cameras().get(query_view).ok_or_else(|| {
        Error::InvalidArgument(format!("no camera for query view {query_view}"))
    })?;
    let (rotated, _) =
        encode_key_rope_with(k, layout, query_cam, assignment, cfg, DEFAULT_PROJ_EPS)?;
    Ok(rotated)
}

/// [`encode_key_rope`] against an explicit query camera; also returns the
/// projections.
pub fn encode_key_rope_with(
    k: &Array4<f64>,
    key_layout: &MultiviewLayout,
    query_cam: &Camera,
    assignment: &HeadAnchorAssignment,
    cfg: &RopeConfig,
    eps: f64,
) -> Result<(Array4<f64>, KeyProjection)> {
    check_heads(k, cfg, "k")?;
    if k.dim().1 != key_layout.len() {
        return Err(Error::ShapeMismatch(format!(
            "k has {} tokens, layout has {}",
            k.dim().1,
            key_layout.len()
        )));
    }
    if k.dim().2 != assignment.heads() {
        return Err(Error::ShapeMismatch(format!(
            "k has {} heads, anchor assignment has {}",
            k.dim().2,
            assignment.heads()
        )));
    }
    let proj = project_keys(key_layout.tokens(), key_layout.cameras(), query_cam, assignment, eps)?;
    let rot = SegmentRotator::new(cfg, assignment.segments(), 2)?;
    let mut out = standard(k);
    rotate_tensor(&mut out, &proj.positions, &rot, 1.0);
    Ok((out, proj))
}

/// Default softmax scale `1 / sqrt(C)`.
pub fn default_scale(per_head_dim: usize) -> f64 {
    1.0 / (per_head_dim as f64).sqrt()
}

/// Kernel output; `weights` is `(batch, heads, queries, keys)`.
#[derive(Debug, Clone)]
pub struct SdpaOutput {
    pub out: Array4<f64>,
    pub weights: Array4<f64>,
}

/// `softmax(q k^T * scale) v` per batch entry and head.
pub fn sdpa_forward(
    q: &Array4<f64>,
    k: &Array4<f64>,
    v: &Array4<f64>,
    scale: f64,
) -> Result<SdpaOutput> {
    sdpa_forward_masked(q, k, v, scale, None)
}

fn check_mask(mask: Option<&Array3<bool>>, k: &Array4<f64>) -> Result<()> {
    if let Some(m) = mask {
        let (b, l, h, _) = k.dim();
        if m.dim() != (b, l, h) {
            return Err(Error::ShapeMismatch(format!(
                "key mask shape {:?} != (batch, keys, heads) = {:?}",
                m.dim(),
                (b, l, h)
            )));
        }
    }
    Ok(())
}

/// Softmax probabilities for one (batch, head, query) row, written into
/// `row`. Masked keys (mask false) get probability zero; a fully masked row
/// is all zeros.
#[allow(clippy::too_many_arguments)]
fn softmax_row(
    q: &[f64],
    k: &[f64],
    mask: Option<&[bool]>,
    b: usize,
    i: usize,
    h: usize,
    dims: (usize, usize, usize, usize),
    scale: f64,
    row: &mut [f64],
) {
    let (lq, lk, heads, c) = dims;
    let qo = ((b * lq + i) * heads + h) * c;
    let qv = &q[qo..qo + c];
    let mut max = f64::NEG_INFINITY;
    for (j, r) in row.iter_mut().enumerate() {
        let keep = mask.is_none_or(|m| m[(b * lk + j) * heads + h]);
        *r = if keep {
            let ko = ((b * lk + j) * heads + h) * c;
            scale * qv.iter().zip(&k[ko..ko + c]).map(|(a, b)| a * b).sum::<f64>()
        } else {
            f64::NEG_INFINITY
        };
        max = max.max(*r);
    }
    if max == f64::NEG_INFINITY {
        row.fill(0.0);
        return;
    }
    let mut total = 0.0;
    for r in row.iter_mut() {
        *r = (*r - max).exp();
        total += *r;
    }
    for r in row.iter_mut() {
        *r /= total;
    }
}

/// [`sdpa_forward`] with an optional `(batch, keys, heads)` keep-mask.
pub fn sdpa_forward_masked(
    q: &Array4<f64>,
    k: &Array4<f64>,
    v: &Array4<f64>,
    scale: f64,
    key_mask: Option<&Array3<bool>>,
) -> Result<SdpaOutput> {
    check_qkv(q, k, v)?;
    check_mask(key_mask, k)?;
    let (batch, lq, heads, c) = q.dim();
    let lk = k.dim().1;
    let (q, k, v) = (standard(q), standard(k), standard(v));
    let mask = key_mask.map(|m| m.as_standard_layout().into_owned());
    let (qs, ks, vs) = (q.as_slice().unwrap(), k.as_slice().unwrap(), v.as_slice().unwrap());
    let ms = mask.as_ref().map(|m| m.as_slice().unwrap());

    let mut out = Array4::<f64>::zeros((batch, lq, heads, c));
    let mut weights = Array4::<f64>::zeros((batch, heads, lq, lk));
    let os = out.as_slice_mut().unwrap();
    let ws = weights.as_slice_mut().unwrap();
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..lq {
                let wo = ((b * heads + h) * lq + i) * lk;
                let row = &mut ws[wo..wo + lk];
                softmax_row(qs, ks, ms, b, i, h, (lq, lk, heads, c), scale, row);
                let oo = ((b * lq + i) * heads + h) * c;
                let orow = &mut os[oo..oo + c];
                for (j, &p) in row.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let vo = ((b * lk + j) * heads + h) * c;
                    for (o, x) in orow.iter_mut().zip(&vs[vo..vo + c]) {
                        *o += p * x;
                    }
                }
            }
        }
    }
    Ok(SdpaOutput { out, weights })
}

/// Gradients of the SDPA forward map.
#[derive(Debug, Clone)]
pub struct SdpaGrads {
    pub dq: Array4<f64>,
    pub dk: Array4<f64>,
    pub dv: Array4<f64>,
}

pub fn sdpa_backward(
    q: &Array4<f64>,
    k: &Array4<f64>,
    v: &Array4<f64>,
    d_out: &Array4<f64>,
    scale: f64,
) -> Result<SdpaGrads> {
    sdpa_backward_masked(q, k, v, d_out, scale, None)
}

/// Analytic backward: with `P = softmax(S)`, `dV = P^T dO`,
/// `dS = P * (dO V^T - rowsum(P * dO V^T))`, `dQ = scale dS K`,
/// `dK = scale dS^T Q`.
pub fn sdpa_backward_masked(
    q: &Array4<f64>,
    k: &Array4<f64>,
    v: &Array4<f64>,
    d_out: &Array4<f64>,
    scale: f64,
    key_mask: Option<&Array3<bool>>,
) -> Result<SdpaGrads> {
    check_qkv(q, k, v)?;
    check_mask(key_mask, k)?;
    if d_out.dim() != q.dim() {
        return Err(Error::ShapeMismatch(format!(
            "d_out shape {:?} != output shape {:?}",
            d_out.dim(),
            q.dim()
        )));
    }
    check_finite("d_out", d_out)?;
    let (batch, lq, heads, c) = q.dim();
    let lk = k.dim().1;
    let (q, k, v, d_out) = (standard(q), standard(k), standard(v), standard(d_out));
    let mask = key_mask.map(|m| m.as_standard_layout().into_owned());
    let (qs, ks, vs, dos) = (
        q.as_slice().unwrap(),
        k.as_slice().unwrap(),
        v.as_slice().unwrap(),
        d_out.as_slice().unwrap(),
    );
    let ms = mask.as_ref().map(|m| m.as_slice().unwrap());

    let mut dq = Array4::<f64>::zeros(q.dim());
    let mut dk = Array4::<f64>::zeros(k.dim());
    let mut dv = Array4::<f64>::zeros(v.dim());
    let (dqs, dks, dvs) =
        (dq.as_slice_mut().unwrap(), dk.as_slice_mut().unwrap(), dv.as_slice_mut().unwrap());
    let mut p = vec![0.0; lk];
    let mut dp = vec![0.0; lk];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..lq {
                softmax_row(qs, ks, ms, b, i, h, (lq, lk, heads, c), scale, &mut p);
                let oo = ((b * lq + i) * heads + h) * c;
                let dorow = &dos[oo..oo + c];
                let mut weighted = 0.0;
                for j in 0..lk {
                    let vo = ((b * lk + j) * heads + h) * c;
                    dp[j] = dorow.iter().zip(&vs[vo..vo + c]).map(|(a, b)| a * b).sum();
                    weighted += p[j] * dp[j];
                    for (g, d) in dvs[vo..vo + c].iter_mut().zip(dorow) {
                        *g += p[j] * d;
                    }
                }
                for j in 0..lk {
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let ko = ((b * lk + j) * heads + h) * c;
                    for t in 0..c {
                        dqs[oo + t] += ds * ks[ko + t];
                        dks[ko + t] += ds * qs[oo + t];
                    }
                }
            }
        }
    }
    Ok(SdpaGrads { dq, dk, dv })
}

/// Pipeline switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionOptions {
    /// Near-plane epsilon for key projection.
    pub proj_eps: f64,
    /// Mask (key, head) pairs whose projection was invalid. Off by default:
    /// clamped coordinates flow into the rotation unchanged.
    pub mask_invalid: bool,
    /// Also rotate V with the key rotation and counter-rotate the output
    /// with the inverse query rotation.
    pub rotate_vo: bool,
    /// Softmax scale; `None` means `1 / sqrt(C)`.
    pub scale: Option<f64>,
}

impl Default for AttentionOptions {
    fn default() -> Self {
        Self { proj_eps: DEFAULT_PROJ_EPS, mask_invalid: false, rotate_vo: false, scale: None }
    }
}

/// Pipeline output. `weights` are per pseudo-batch entry `b * N + j`,
/// shaped `(B * N, H, L_v, L_k)`.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub out: Array4<f64>,
    pub weights: Array4<f64>,
}

/// Everything the forward and backward passes share.
struct Prepared {
    q: Array4<f64>,
    k: Array4<f64>,
    v: Array4<f64>,
    mask: Option<Array3<bool>>,
    query_fields: Vec<PositionField>,
    key_fields: Vec<PositionField>,
    rot: SegmentRotator,
    scale: f64,
}

#[allow(clippy::too_many_arguments)]
fn prepare(
    q: &Array4<f64>,
    q_layout: &MultiviewLayout,
    k: &Array4<f64>,
    v: &Array4<f64>,
    k_layout: &MultiviewLayout,
    assignment: &HeadAnchorAssignment,
    cfg: &RopeConfig,
    opts: &AttentionOptions,
) -> Result<Prepared> {
    check_qkv(q, k, v)?;
    check_heads(q, cfg, "q")?;
    let (batch, l, heads, c) = q.dim();
    let (n, lv) = (q_layout.n_views(), q_layout.tokens_per_view());
    if l != n * lv {
        return Err(Error::ShapeMismatch(format!(
            "q has {l} tokens but layout has {n} views x {lv} tokens"
        )));
    }
    let lk = k.dim().1;
    if lk != k_layout.len() {
        return Err(Error::ShapeMismatch(format!(
            "k has {lk} tokens but key layout has {}",
            k_layout.len()
        )));
    }
    if heads != assignment.heads() {
        return Err(Error::ShapeMismatch(format!(
            "tensors have {heads} heads, anchor assignment has {}",
            assignment.heads()
        )));
    }
    let segs = assignment.segments();
    let rot = SegmentRotator::new(cfg, segs, 2)?;
    let (q, k, v) = (standard(q), standard(k), standard(v));

    let mut qt = Array4::<f64>::zeros((batch * n, lv, heads, c));
    let mut kt = Array4::<f64>::zeros((batch * n, lk, heads, c));
    let mut vt = Array4::<f64>::zeros((batch * n, lk, heads, c));
    let mut mask = opts.mask_invalid.then(|| Array3::from_elem((batch * n, lk, heads), true));
    let mut query_fields = Vec::with_capacity(n);
    let mut key_fields = Vec::with_capacity(n);

    let (q_len, k_len) = (lv * heads * c, lk * heads * c);
    let (qsrc, ksrc, vsrc) = (q.as_slice().unwrap(), k.as_slice().unwrap(), v.as_slice().unwrap());
    for j in 0..n {
        let qf = query_field(q_layout.view_tokens(j), heads, segs);
        let proj = project_keys(
            k_layout.tokens(),
            k_layout.cameras(),
            &q_layout.cameras()[j],
            assignment,
            opts.proj_eps,
        )?;
        for b in 0..batch {
            let pb = b * n + j;
            let qdst = &mut qt.as_slice_mut().unwrap()[pb * q_len..(pb + 1) * q_len];
            let qo = (b * l + j * lv) * heads * c;
            qdst.copy_from_slice(&qsrc[qo..qo + q_len]);
            for (i, lane) in qdst.chunks_exact_mut(c).enumerate() {
                rot.apply(lane, qf.get(i / heads, i % heads), 1.0);
            }
            let kdst = &mut kt.as_slice_mut().unwrap()[pb * k_len..(pb + 1) * k_len];
            kdst.copy_from_slice(&ksrc[b * k_len..(b + 1) * k_len]);
            for (i, lane) in kdst.chunks_exact_mut(c).enumerate() {
                rot.apply(lane, proj.positions.get(i / heads, i % heads), 1.0);
            }
            let vdst = &mut vt.as_slice_mut().unwrap()[pb * k_len..(pb + 1) * k_len];
            vdst.copy_from_slice(&vsrc[b * k_len..(b + 1) * k_len]);
            if opts.rotate_vo {
                for (i, lane) in vdst.chunks_exact_mut(c).enumerate() {
                    rot.apply(lane, proj.positions.get(i / heads, i % heads), 1.0);
                }
            }
            if let Some(m) = mask.as_mut() {
                for t in 0..lk {
                    for h in 0..heads {
                        m[(pb, t, h)] = proj.head_valid(t, h);
                    }
                }
            }
        }
        query_fields.push(qf);
        key_fields.push(proj.positions);
    }
    Ok(Prepared {
        q: qt,
        k: kt,
        v: vt,
        mask,
        query_fields,
        key_fields,
        rot,
        scale: opts.scale.unwrap_or_else(|| default_scale(c)),
    })
}

/// Cross-view attention with separate query and key layouts. Queries are
/// grouped by view into the batch axis; keys and values are replicated per
/// query view and rotated at their projections into that view.
#[allow(clippy::too_many_arguments)]
pub fn urope_attention(
    q: &Array4<f64>,
    q_layout: &MultiviewLayout,
    k: &Array4<f64>,
    v: &Array4<f64>,
    k_layout: &MultiviewLayout,
    assignment: &HeadAnchorAssignment,
    cfg: &RopeConfig,
    opts: &AttentionOptions,
) -> Result<AttentionOutput> {
    let prep = prepare(q, q_layout, k, v, k_layout, assignment, cfg, opts)?;
    let sdpa = sdpa_forward_masked(&prep.q, &prep.k, &prep.v, prep.scale, prep.mask.as_ref())?;
    let (batch, l, heads, c) = q.dim();
    let (n, lv) = (q_layout.n_views(), q_layout.tokens_per_view());
    let mut pseudo = sdpa.out;
    if opts.rotate_vo {
        counter_rotate(&mut pseudo, &prep, n, heads, c, -1.0);
    }
    Ok(AttentionOutput { out: unbatch(&pseudo, batch, l, n, lv), weights: sdpa.weights })
}

/// Applies the query rotation of each pseudo-batch entry's view.
fn counter_rotate(x: &mut Array4<f64>, prep: &Prepared, n: usize, heads: usize, c: usize, sign: f64) {
    let per = x.dim().1 * heads * c;
    for (pb, chunk) in x.as_slice_mut().unwrap().chunks_exact_mut(per).enumerate() {
        let qf = &prep.query_fields[pb % n];
        for (i, lane) in chunk.chunks_exact_mut(c).enumerate() {
            prep.rot.apply(lane, qf.get(i / heads, i % heads), sign);
        }
    }
}

/// `(B * N, L_v, H, C)` back to `(B, N * L_v, H, C)`.
fn unbatch(x: &Array4<f64>, batch: usize, l: usize, n: usize, lv: usize) -> Array4<f64> {
    let (_, _, heads, c) = x.dim();
    debug_assert_eq!(l, n * lv);
    // pseudo entry b*N + j holds tokens j*L_v.. of sample b, so the memory
    // order already matches (B, N, L_v, H, C).
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((batch, l, heads, c))
        .expect("pseudo-batch is view-major")
}

/// Self-attention over a multiview token sequence (keys are the queries'
/// own tokens).
pub fn urope_self_attention(
    q: &Array4<f64>,
    k: &Array4<f64>,
    v: &Array4<f64>,
    layout: &MultiviewLayout,
    assignment: &HeadAnchorAssignment,
    cfg: &RopeConfig,
    opts: &AttentionOptions,
) -> Result<AttentionOutput> {
    urope_attention(q, layout, k, v, layout, assignment, cfg, opts)
}

/// Gradients of [`urope_attention`] with respect to the unrotated inputs.
#[allow(clippy::too_many_arguments)]
pub fn urope_attention_backward(
    q: &Array4<f64>,
    q_layout: &MultiviewLayout,
    k: &Array4<f64>,
    v: &Array4<f64>,
    k_layout: &MultiviewLayout,
    d_out: &Array4<f64>,
    assignment: &HeadAnchorAssignment,
    cfg: &RopeConfig,
    opts: &AttentionOptions,
) -> Result<SdpaGrads> {
    if d_out.dim() != q.dim() {
        return Err(Error::ShapeMismatch(format!(
            "d_out shape {:?} != q shape {:?}",
            d_out.dim(),
            q.dim()
        )));
    }
    let prep = prepare(q, q_layout, k, v, k_layout, assignment, cfg, opts)?;
    let (batch, l, heads, c) = q.dim();
    let (n, lv) = (q_layout.n_views(), q_layout.tokens_per_view());
    let lk = k.dim().1;

    // (B, L, H, C) -> (B * N, L_v, H, C) is a pure reshape (view-major).
    let mut d_pseudo = standard(d_out)
        .into_shape_with_order((batch * n, lv, heads, c))
        .expect("view-major reshape");
    if opts.rotate_vo {
        // out = R_q^T o  =>  d o = R_q d out
        counter_rotate(&mut d_pseudo, &prep, n, heads, c, 1.0);
    }
    let g = sdpa_backward_masked(&prep.q, &prep.k, &prep.v, &d_pseudo, prep.scale, prep.mask.as_ref())?;

    let mut dq_pseudo = g.dq;
    counter_rotate(&mut dq_pseudo, &prep, n, heads, c, -1.0);
    let dq = unbatch(&dq_pseudo, batch, l, n, lv);

    let mut dk = Array4::<f64>::zeros((batch, lk, heads, c));
    let mut dv = Array4::<f64>::zeros((batch, lk, heads, c));
    let k_len = lk * heads * c;
    let (gk, gv) = (g.dk.as_slice().unwrap(), g.dv.as_slice().unwrap());
    let mut lane = vec![0.0; c];
    for b in 0..batch {
        for j in 0..n {
            let pb = b * n + j;
            let kf = &prep.key_fields[j];
            let dks = &mut dk.as_slice_mut().unwrap()[b * k_len..(b + 1) * k_len];
            for (i, acc) in dks.chunks_exact_mut(c).enumerate() {
                let src = pb * k_len + i * c;
                lane.copy_from_slice(&gk[src..src + c]);
                prep.rot.apply(&mut lane, kf.get(i / heads, i % heads), -1.0);
                acc.iter_mut().zip(&lane).for_each(|(a, x)| *a += x);
            }
            let dvs = &mut dv.as_slice_mut().unwrap()[b * k_len..(b + 1) * k_len];
            for (i, acc) in dvs.chunks_exact_mut(c).enumerate() {
                let src = pb * k_len + i * c;
                lane.copy_from_slice(&gv[src..src + c]);
                if opts.rotate_vo {
                    prep.rot.apply(&mut lane, kf.get(i / heads, i % heads), -1.0);
                }
                acc.iter_mut().zip(&lane).for_each(|(a, x)| *a += x);
            }
        }
    }
    Ok(SdpaGrads { dq, dk, dv })
}

#[allow(clippy::too_many_arguments)]
pub fn urope_self_attention_backward(
    q: &Array4<f64>,
    k: &Array4<f64>,
    v: &Array4<f64>,
    d_out: &Array4<f64>,
    layout: &MultiviewLayout,
    assignment: &HeadAnchorAssignment,
    cfg: &RopeConfig,
    opts: &AttentionOptions,
) -> Result<SdpaGrads> {
    urope_attention_backward(q, layout, k, v, layout, d_out, assignment, cfg, opts)
}

/// Rearranges pseudo-batch weights `(B * N, H, L_v, L_k)` into sequence
/// order `(B, H, N * L_v, L_k)`.
pub fn sequence_weights(weights: &Array4<f64>, batch: usize, n_views: usize) -> Result<Array4<f64>> {
    let (pb, heads, lv, lk) = weights.dim();
    if pb != batch * n_views {
        return Err(Error::ShapeMismatch(format!(
            "{pb} pseudo-batch entries, expected {batch} x {n_views}"
        )));
    }
    Ok(Array4::from_shape_fn((batch, heads, n_views * lv, lk), |(b, h, i, j)| {
        weights[(b * n_views + i / lv, h, i % lv, j)]
    }))
}

/// World-frame lifted key points per (token, head, segment).
pub fn lifted_key_points(
    key_layout: &MultiviewLayout,
    assignment: &HeadAnchorAssignment,
) -> PositionField {
    let (heads, segs) = (assignment.heads(), assignment.segments());
    let mut f = PositionField::zeros(key_layout.len(), heads, segs, 3);
    for (l, tok) in key_layout.tokens().iter().enumerate() {
        let ray = pixel_ray(&key_layout.cameras()[tok.view], tok.u, tok.v);
        for h in 0..heads {
            for (s, &d) in assignment.head_depths(h).iter().enumerate() {
                let p = ray.at(d);
                f.get_mut(l, h)[3 * s..3 * s + 3].copy_from_slice(&[p.x, p.y, p.z]);
            }
        }
    }
    f
}

/// 3D queries attending to image tokens: queries rotate at their world
/// position, key head `h` at its lifted point for anchor `d^h`.
#[allow(clippy::too_many_arguments)]
pub fn urope_cross_attention_3d(
    q: &Array4<f64>,
    query_points: &[[f64; 3]],
    k: &Array4<f64>,
    v: &Array4<f64>,
    key_layout: &MultiviewLayout,
    assignment: &HeadAnchorAssignment,
    cfg: &RopeConfig,
    opts: &AttentionOptions,
) -> Result<AttentionOutput> {
    check_qkv(q, k, v)?;
    check_heads(q, cfg, "q")?;
    let (_, lq, heads, c) = q.dim();
    if query_points.len() != lq {
        return Err(Error::ShapeMismatch(format!(
            "{lq} query tokens but {} query points",
            query_points.len()
        )));
    }
    if k.dim().1 != key_layout.len() {
        return Err(Error::ShapeMismatch(format!(
            "k has {} tokens, key layout has {}",
            k.dim().1,
            key_layout.len()
        )));
    }
    if heads != assignment.heads() {
        return Err(Error::ShapeMismatch(format!(
            "tensors have {heads} heads, anchor assignment has {}",
            assignment.heads()
        )));
    }
    let segs = assignment.segments();
    let rot = SegmentRotator::new(cfg, segs, 3)?;
    let mut qf = PositionField::zeros(lq, heads, segs, 3);
    for (l, p) in query_points.iter().enumerate() {
        for h in 0..heads {
            for chunk in qf.get_mut(l, h).chunks_exact_mut(3) {
                chunk.copy_from_slice(p);
            }
        }
    }
    let kf = lifted_key_points(key_layout, assignment);
    let mut qr = standard(q);
    rotate_tensor(&mut qr, &qf, &rot, 1.0);
    let mut kr = standard(k);
    rotate_tensor(&mut kr, &kf, &rot, 1.0);
    let mut vr = standard(v);
    if opts.rotate_vo {
        rotate_tensor(&mut vr, &kf, &rot, 1.0);
    }
    let scale = opts.scale.unwrap_or_else(|| default_scale(c));
    let mut res = sdpa_forward(&qr, &kr, &vr, scale)?;
    if opts.rotate_vo {
        rotate_tensor(&mut res.out, &qf, &rot, -1.0);
    }
    Ok(AttentionOutput { out: res.out, weights: res.weights })
}

/// Multiply-accumulate count of the view-batched pipeline: QK^T and AV each
/// cost `B N H L_v L C` multiply-adds (two flops each), with `L = N L_v`.
pub fn flop_estimate(batch: u64, n_views: u64, tokens_per_view: u64, heads: u64, c: u64) -> u128 {
    let l = n_views as u128 * tokens_per_view as u128;
    2 * batch as u128 * n_views as u128 * heads as u128 * tokens_per_view as u128 * l * c as u128 * 2
}

/// Same count for ordinary attention over `L` tokens: `4 B H L^2 C`.
pub fn standard_attention_flops(batch: u64, heads: u64, l: u64, c: u64) -> u128 {
    4 * batch as u128 * heads as u128 * (l as u128) * (l as u128) * c as u128
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{axis_angle, Mat3, Vec3};
    use crate::rope::{make_anchor_schedule, rope_rotate_2d, SamplingKind};
    use approx::assert_abs_diff_eq;

    fn uniform_schedule(k: usize) -> AnchorSchedule {
        make_anchor_schedule(SamplingKind::Uniform, 2.0, 20.0, k).unwrap()
    }

    fn filled(shape: (usize, usize, usize, usize), phase: f64) -> Array4<f64> {
        let mut i = 0.0;
        Array4::from_shape_fn(shape, |_| {
            i += 1.0;
            (0.37 * i + phase).sin()
        })
    }

    #[test]
    fn anchor_groups() {
        let a = assign_anchors(&uniform_schedule(4), 8).unwrap();
        assert_eq!(a.per_head_depth().unwrap(), &[2.0, 2.0, 8.0, 8.0, 14.0, 14.0, 20.0, 20.0]);
        let a = assign_anchors(&uniform_schedule(4), 4).unwrap();
        assert_eq!(a.per_head_depth().unwrap(), &[2.0, 8.0, 14.0, 20.0]);
        let a = assign_anchors(&uniform_schedule(1), 6).unwrap();
        assert_eq!(a.per_head_depth().unwrap(), &[11.0; 6]);
        assert!(assign_anchors(&uniform_schedule(4), 6).is_err());
        assert!(assign_anchors(&uniform_schedule(4), 2).is_err());
        assert!(assign_anchors(&uniform_schedule(4), 0).is_err());
        let cw = assign_anchors_channelwise(&uniform_schedule(2), 3).unwrap();
        assert_eq!(cw.segments(), 2);
        assert_eq!(cw.head_depths(2), &[2.0, 20.0]);
        assert!(cw.per_head_depth().is_none());
    }

    fn cam(r: Mat3, t: Vec3) -> Camera {
        Camera::from_params(20.0, 20.0, 7.5, 7.5, 0.0, r, t, (16, 16)).unwrap()
    }

    fn two_view_layout() -> MultiviewLayout {
        let c0 = cam(Mat3::identity(), Vec3::new(0.0, 0.0, 4.0));
        let c1 = cam(axis_angle(Vec3::y(), -0.3), Vec3::new(1.0, 0.1, 4.2));
        let px = vec![(3.5, 3.5), (11.5, 3.5)];
        MultiviewLayout::new(vec![c0, c1], &[px.clone(), px]).unwrap()
    }

    #[test]
    fn layout_validation() {
        let c = cam(Mat3::identity(), Vec3::zeros());
        assert!(MultiviewLayout::new(vec![c.clone()], &[vec![]]).is_err());
        assert!(MultiviewLayout::new(vec![c.clone(), c.clone()], &[vec![(0.0, 0.0)], vec![]]).is_err());
        assert!(MultiviewLayout::new(vec![c.clone()], &[vec![(0.0, 0.0)], vec![(0.0, 0.0)]]).is_err());
        let l = two_view_layout();
        assert_eq!((l.n_views(), l.tokens_per_view(), l.len()), (2, 2, 4));
        assert_eq!(l.view_tokens(1)[0].view, 1);
        assert!(l.clone().with_grid(2, 1).is_ok());
        assert!(l.with_grid(3, 1).is_err());
    }

    #[test]
    fn query_rope_rejects_mixed_views_and_matches_direct() {
        let layout = two_view_layout();
        let cfg = RopeConfig::new(8).unwrap();
        let q = filled((1, 4, 2, 8), 0.0);
        assert!(encode_query_rope(&q, layout.tokens(), 0, &cfg).is_err());
        let q1 = filled((1, 1, 2, 8), 0.3);
        let tok = [TokenPosition { view: 0, u: 3.0, v: 5.0 }];
        let out = encode_query_rope(&q1, &tok, 0, &cfg).unwrap();
        for h in 0..2 {
            let x: Vec<f64> = q1.slice(ndarray::s![0, 0, h, ..]).to_vec();
            let direct = rope_rotate_2d(&x, 3.0, 5.0, &cfg).unwrap();
            for (c, d) in direct.iter().enumerate() {
                assert_abs_diff_eq!(out[(0, 0, h, c)], *d, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn query_rope_identity_at_origin() {
        let cfg = RopeConfig::new(8).unwrap();
        let q = filled((2, 3, 2, 8), 1.0);
        let toks = [TokenPosition { view: 0, u: 0.0, v: 0.0 }; 3];
        assert_eq!(encode_query_rope(&q, &toks, 0, &cfg).unwrap(), q);
    }

    #[test]
    fn key_rope_same_view_matches_query_rope() {
        let c0 = cam(Mat3::identity(), Vec3::new(0.0, 0.0, 4.0));
        let layout = MultiviewLayout::new(vec![c0], &[vec![(3.5, 3.5), (11.5, 7.0), (1.0, 15.0)]]).unwrap();
        let cfg = RopeConfig::new(8).unwrap();
        let k = filled((2, 3, 4, 8), 0.5);
        let a = assign_anchors(&uniform_schedule(4), 4).unwrap();
        let kr = encode_key_rope(&k, &layout, 0, &a, &cfg).unwrap();
        let qr = encode_query_rope(&k, layout.tokens(), 0, &cfg).unwrap();
        assert_eq!(kr, qr);
        assert!(encode_key_rope(&k, &layout, 3, &a, &cfg).is_err());
    }

    #[test]
    fn key_rope_single_anchor_shares_coordinates() {
        let layout = two_view_layout();
        let a = assign_anchors(&uniform_schedule(1), 3).unwrap();
        let proj = project_keys(layout.tokens(), layout.cameras(), &layout.cameras()[1], &a, 1e-6).unwrap();
        for l in 0..layout.len() {
            assert_eq!(proj.positions.get(l, 0), proj.positions.get(l, 2));
        }
    }

    #[test]
    fn sdpa_trivial_cases() {
        let q = filled((1, 1, 2, 4), 0.0);
        let k = filled((1, 1, 2, 4), 1.0);
        let v = filled((1, 1, 2, 4), 2.0);
        let r = sdpa_forward(&q, &k, &v, 0.5).unwrap();
        assert_eq!(r.out, v);
        let q = filled((1, 3, 2, 4), 0.0);
        let k = filled((1, 5, 2, 4), 1.0);
        let z = Array4::zeros((1, 5, 2, 4));
        assert!(sdpa_forward(&q, &k, &z, 0.5).unwrap().out.iter().all(|&x| x == 0.0));
        let mut bad = q.clone();
        bad[(0, 0, 0, 0)] = f64::NAN;
        assert!(matches!(sdpa_forward(&bad, &k, &z, 0.5), Err(Error::NonFinite(_))));
        assert!(sdpa_forward(&q, &filled((1, 5, 3, 4), 0.0), &filled((1, 5, 3, 4), 0.0), 0.5).is_err());
    }

    #[test]
    fn fully_masked_row_is_zero() {
        let q = filled((1, 2, 1, 4), 0.0);
        let k = filled((1, 3, 1, 4), 1.0);
        let v = filled((1, 3, 1, 4), 2.0);
        let mask = Array3::from_elem((1, 3, 1), false);
        let r = sdpa_forward_masked(&q, &k, &v, 0.5, Some(&mask)).unwrap();
        assert!(r.out.iter().all(|&x| x == 0.0));
        assert!(r.weights.iter().all(|&x| x == 0.0));
        let g = sdpa_backward_masked(&q, &k, &v, &filled((1, 2, 1, 4), 3.0), 0.5, Some(&mask)).unwrap();
        assert!(g.dq.iter().chain(g.dk.iter()).chain(g.dv.iter()).all(|&x| x == 0.0));
    }

    #[test]
    fn sdpa_backward_trivial_cases() {
        let q = filled((1, 1, 2, 4), 0.0);
        let k = filled((1, 1, 2, 4), 1.0);
        let v = filled((1, 1, 2, 4), 2.0);
        let d = filled((1, 1, 2, 4), 3.0);
        let g = sdpa_backward(&q, &k, &v, &d, 0.5).unwrap();
        assert_eq!(g.dv, d);
        assert!(g.dq.iter().chain(g.dk.iter()).all(|&x| x.abs() < 1e-15));
        let g = sdpa_backward(&q, &k, &v, &Array4::zeros((1, 1, 2, 4)), 0.5).unwrap();
        assert!(g.dq.iter().chain(g.dk.iter()).chain(g.dv.iter()).all(|&x| x == 0.0));
        assert!(sdpa_backward(&q, &k, &v, &Array4::zeros((1, 2, 2, 4)), 0.5).is_err());
    }

    #[test]
    fn flop_examples() {
        assert_eq!(flop_estimate(1, 2, 2, 2, 4), 512);
        assert_eq!(flop_estimate(3, 1, 7, 4, 8), standard_attention_flops(3, 4, 7, 8));
        assert_eq!(flop_estimate(1, 1, 4, 2, 4), standard_attention_flops(1, 2, 4, 4));
        assert_eq!(flop_estimate(2, 4, 3, 2, 4), standard_attention_flops(2, 2, 12, 4));
    }

    #[test]
    fn pipeline_shapes_and_rows() {
        let layout = two_view_layout();
        let cfg = RopeConfig::new(8).unwrap();
        let a = assign_anchors(&uniform_schedule(2), 2).unwrap();
        let (q, k, v) = (filled((2, 4, 2, 8), 0.0), filled((2, 4, 2, 8), 1.0), filled((2, 4, 2, 8), 2.0));
        let r = urope_self_attention(&q, &k, &v, &layout, &a, &cfg, &AttentionOptions::default()).unwrap();
        assert_eq!(r.out.dim(), (2, 4, 2, 8));
        assert_eq!(r.weights.dim(), (4, 2, 2, 4));
        for row in r.weights.rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
        let short = filled((2, 3, 2, 8), 0.0);
        assert!(urope_self_attention(&short, &k, &v, &layout, &a, &cfg, &AttentionOptions::default()).is_err());
        let a3 = assign_anchors(&uniform_schedule(1), 3).unwrap();
        assert!(urope_self_attention(&q, &k, &v, &layout, &a3, &cfg, &AttentionOptions::default()).is_err());
    }

    #[test]
    fn cross_3d_zero_positions_is_plain_attention() {
        let layout = two_view_layout();
        let cfg = RopeConfig::new(12).unwrap();
        let a = assign_anchors(&uniform_schedule(2), 2).unwrap();
        let (q, k, v) = (filled((1, 3, 2, 12), 0.0), filled((1, 4, 2, 12), 1.0), filled((1, 4, 2, 12), 2.0));
        let pts = [[0.1, 0.2, 0.3]; 3];
        let r = urope_cross_attention_3d(&q, &pts, &k, &v, &layout, &a, &cfg, &AttentionOptions::default())
            .unwrap();
        assert_eq!(r.out.dim(), (1, 3, 2, 12));
        assert!(urope_cross_attention_3d(&q, &pts[..2], &k, &v, &layout, &a, &cfg, &AttentionOptions::default())
            .is_err());
        let cfg8 = RopeConfig::new(8).unwrap();
        let (q8, k8, v8) = (filled((1, 3, 2, 8), 0.0), filled((1, 4, 2, 8), 1.0), filled((1, 4, 2, 8), 2.0));
        assert!(urope_cross_attention_3d(&q8, &pts, &k8, &v8, &layout, &a, &cfg8, &AttentionOptions::default())
            .is_err());
    }
}
