#!/usr/bin/env python3
"""Independent numpy reference for the committed golden files.

Reads the fixture scene written by `urope gen-scene` and recomputes every
golden output from first principles (explicit matrices, per-pair rotations,
per-row softmax). Shares no code with the Rust crate.

    python3 scripts/gen_goldens.py crates/core/golden
"""

import argparse
import hashlib
import json
import math
import pathlib

import numpy as np

BASE = 100.0
HEADS = 8
DIM = 16
ANCHORS = [2.0, 8.0, 14.0, 20.0]  # uniform on [2, 20], K = 4
EPS = 1e-6
PHASES = {"q": 0.0, "k": 1.0, "v": 2.0}
PROJ_PIXEL = (11.5, 3.5)
QUERY_VIEW, KEY_VIEW = 0, 1


class Camera:
    def __init__(self, rec):
        self.K = np.array(
            [[rec["fx"], rec["skew"], rec["cx"]], [0.0, rec["fy"], rec["cy"]], [0.0, 0.0, 1.0]]
        )
        self.R = np.array(rec["R"], dtype=float).reshape(3, 3)
        self.t = np.array(rec["t"], dtype=float)
        self.size = (rec["width"], rec["height"])

    def ray(self, u, v):
        origin = -self.R.T @ self.t
        direction = self.R.T @ np.linalg.solve(self.K, np.array([u, v, 1.0]))
        return origin, direction

    def project(self, p):
        h = self.K @ (self.R @ p + self.t)
        w = h[2]
        valid = w >= EPS
        denom = math.copysign(max(abs(w), EPS), w if w != 0 else 1.0)
        return h[0] / denom, h[1] / denom, w, valid


def cross_view(src, dst, u, v, depth):
    o, r = src.ray(u, v)
    return dst.project(o + depth * r)


def patch_centers(size, patch):
    w, h = size
    return [
        ((col + 0.5) * patch - 0.5, (row + 0.5) * patch - 0.5)
        for row in range(h // patch)
        for col in range(w // patch)
    ]


def rope2d(x, u, v):
    """Rotates adjacent pairs; first half of the channels by u, second by v."""
    half = len(x) // 2
    out = np.array(x, dtype=float)
    for block, pos in ((0, u), (1, v)):
        for m in range(half // 2):
            w = BASE ** (-2.0 * m / half)
            a = pos * w
            i = block * half + 2 * m
            c, s = math.cos(a), math.sin(a)
            x0, x1 = out[i], out[i + 1]
            out[i], out[i + 1] = c * x0 - s * x1, s * x0 + c * x1
    return out


def fixture(shape, phase):
    n = int(np.prod(shape))
    return np.sin(0.37 * (np.arange(n) + 1.0) + phase).reshape(shape)


def softmax(z):
    z = np.asarray(z) - np.max(z)
    e = np.exp(z)
    return e / e.sum()


def head_depth(h):
    return ANCHORS[h // (HEADS // len(ANCHORS))]


def pairwise_attention(q, k, v, tokens, cams):
    """tokens: list of (view, u, v); weights returned as (B, H, L, L)."""
    b_, L, H, C = q.shape
    out = np.zeros_like(q)
    weights = np.zeros((b_, H, L, L))
    scale = 1.0 / math.sqrt(C)
    for b in range(b_):
        for i, (qv, qu, qvv) in enumerate(tokens):
            for h in range(H):
                qr = rope2d(q[b, i, h], qu, qvv)
                logits = []
                for j, (kv, ku, kvv) in enumerate(tokens):
                    if kv == qv:
                        pu, pv = ku, kvv
                    else:
                        pu, pv, _, _ = cross_view(cams[kv], cams[qv], ku, kvv, head_depth(h))
                    logits.append(scale * np.dot(qr, rope2d(k[b, j, h], pu, pv)))
                p = softmax(logits)
                weights[b, h, i] = p
                out[b, i, h] = p @ v[b, :, h, :]
    return out, weights


def entropy(scores):
    scores = np.asarray(scores, dtype=float)
    total = scores.sum()
    if total <= 0:
        return None
    if len(scores) == 1 or np.all(scores == scores[0]):
        return 1.0
    p = scores[scores > 0] / total
    return float(min(max(-(p * np.log(p)).sum() / math.log(len(scores)), 0.0), 1.0))


def tensor_csv(x):
    lines = ["b,l,h,c,value"]
    for idx in np.ndindex(x.shape):
        lines.append(",".join(str(i) for i in idx) + f",{float(x[idx])!r}")
    return "\n".join(lines) + "\n"


def write_tensor(path, x):
    side = {"shape": list(x.shape), "dtype": "f64", "order": "row-major", "endianness": "little"}
    path.write_text(json.dumps(side, indent=2) + "\n")
    path.with_suffix(".bin").write_bytes(np.ascontiguousarray(x, dtype="<f8").tobytes())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("golden", type=pathlib.Path)
    args = ap.parse_args()
    g = args.golden
    scene = json.loads((g / "scene.json").read_text())
    cams = [Camera(c) for c in scene["cameras"]]
    patch = scene["patch_size"]
    grid = [patch_centers(c.size, patch) for c in cams]
    tokens = [(view, u, v) for view, pts in enumerate(grid) for (u, v) in pts]
    lv = len(grid[0])
    cols = cams[0].size[0] // patch

    rows = ["depth,u,v,w_tilde,valid"]
    for d in ANCHORS:
        u, v, w, ok = cross_view(cams[0], cams[1], *PROJ_PIXEL, d)
        rows.append(f"{d!r},{float(u)!r},{float(v)!r},{float(w)!r},{str(bool(ok)).lower()}")
    (g / "projection.csv").write_text("\n".join(rows) + "\n")

    inputs = g / "inputs"
    inputs.mkdir(exist_ok=True)
    shape = (1, len(tokens), HEADS, DIM)
    qkv = {name: fixture(shape, ph) for name, ph in PHASES.items()}
    for name, x in qkv.items():
        write_tensor(inputs / f"{name}.json", x)
    out, weights = pairwise_attention(qkv["q"], qkv["k"], qkv["v"], tokens, cams)
    (g / "attention.csv").write_text(tensor_csv(out))

    single = {name: fixture((1, lv, HEADS, DIM), ph) for name, ph in PHASES.items()}
    out1, _ = pairwise_attention(single["q"], single["k"], single["v"], tokens[:lv], cams[:1])
    (g / "attention_single_view.csv").write_text(tensor_csv(out1))

    queries = list(range(QUERY_VIEW * lv, (QUERY_VIEW + 1) * lv))
    sel = weights[:, :, queries, :]
    ent = ["layer,batch,token,metric,value"]
    per_token = []
    for key in range(len(tokens)):
        e = entropy(sel[0, :, :, key].mean(axis=1))
        per_token.append(e)
        ent.append(f"0,0,{key},entropy,{float(e)!r}")
    mean = sum(per_token) / len(per_token)
    ent.append(f"0,all,all,mean,{mean!r}")
    ent.append(f"0,all,all,pooled_mean,{mean!r}")
    (g / "entropy.csv").write_text("\n".join(ent) + "\n")

    dom = ["layer,view,row,col,head"]
    for key, (view, _, _) in enumerate(tokens):
        s = sel[:, :, :, key].mean(axis=(0, 2))
        head = int(np.argmax(s))  # first maximum, i.e. lowest index on ties
        i = key - view * lv
        dom.append(f"0,{view},{i // cols},{i % cols},{head}")
    (g / "dominant.csv").write_text("\n".join(dom) + "\n")

    qpatch = lv // 2 + cols // 2
    qu, qv = grid[QUERY_VIEW][qpatch]
    half = DIM // 2
    w_min = BASE ** (-2.0 * (half // 2 - 1) / half)
    for h in range(HEADS):
        scores = []
        for (ku, kv) in grid[KEY_VIEW]:
            pu, pv, _, _ = cross_view(cams[KEY_VIEW], cams[QUERY_VIEW], ku, kv, head_depth(h))
            scores.append(float(0.5 * (math.cos(w_min * (pu - qu)) + math.cos(w_min * (pv - qv)))))
        lines = [",".join(repr(s) for s in scores[r * cols:(r + 1) * cols]) for r in range(lv // cols)]
        (g / f"heatmap_h{h}.csv").write_text("\n".join(lines) + "\n")

    files = sorted(p for p in g.rglob("*") if p.is_file() and p.name != "SHA256SUMS")
    sums = [f"{hashlib.sha256(p.read_bytes()).hexdigest()}  {p.relative_to(g)}" for p in files]
    (g / "SHA256SUMS").write_text("\n".join(sums) + "\n")


if __name__ == "__main__":
    main()
