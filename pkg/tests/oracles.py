"""Independent oracles used by the test suite.

Everything in this file is written definitionally (plain loops, selection
sort, O(n^2) scans) and deliberately shares no code with the package under
test. Keep it that way: the value of these checks is that the two routes
to each number are different.
"""

import numpy as np


# ---------------------------------------------------------------------------
# dense linear algebra, loop style
# ---------------------------------------------------------------------------

def matmul_loops(a, b):
    """Batched matrix product with explicit index loops."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    lead = a.shape[:-2]
    m, k = a.shape[-2], a.shape[-1]
    n = b.shape[-1]
    a2 = a.reshape(-1, m, k)
    b2 = b.reshape(-1, k, n)
    out = np.zeros((a2.shape[0], m, n))
    for t in range(a2.shape[0]):
        for i in range(m):
            for j in range(n):
                s = 0.0
                for p in range(k):
                    s += a2[t, i, p] * b2[t, p, j]
                out[t, i, j] = s
    return out.reshape(lead + (m, n))


def conv2d_loops(x, w, b=None, stride=1, padding=0, groups=1):
    """Direct 7-loop convolution over zero-padded input. Small shapes only."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    bsz, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    xp = np.zeros((bsz, cin, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    out = np.zeros((bsz, cout, ho, wo))
    per_g = cout // groups
    for n in range(bsz):
        for o in range(cout):
            g = o // per_g
            for i in range(ho):
                for j in range(wo):
                    s = 0.0
                    for c in range(cin_g):
                        for u in range(kh):
                            for v in range(kw):
                                s += (xp[n, g * cin_g + c, i * stride + u, j * stride + v]
                                      * w[o, c, u, v])
                    if b is not None:
                        s += b[o]
                    out[n, o, i, j] = s
    return out


# ---------------------------------------------------------------------------
# detection-metric oracle
# ---------------------------------------------------------------------------

def oracle_iou(a, b):
    """Intersection over union from raw corner arithmetic. a/b: (x0,y0,x1,y1)."""
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return inter / union


def _rank_stable(items, key):
    """Selection sort returning indices, stable for equal keys."""
    idx = list(range(len(items)))
    order = []
    remaining = idx[:]
    while remaining:
        best = remaining[0]
        for i in remaining[1:]:
            if key(items[i]) < key(items[best]):
                best = i
        order.append(best)
        remaining.remove(best)
    return order

def oracle_match_one(preds, gts, iou_thr):
    """Greedy per-image/per-class matching.

    preds: list of (conf, box) already restricted to one image+class,
    in input order. gts: list of boxes. Returns list of tp flags aligned
    with the confidence-descending ranking, plus that ranking.
    """
    order = _rank_stable(preds, key=lambda p: (-p[0],))
    claimed = [False] * len(gts)
    flags = []
    for i in order:
        _, box = preds[i]
        best_j = -1
        best_iou = -1.0
        for j, g in enumerate(gts):
            if claimed[j]:
                continue
            v = oracle_iou(box, g)
            if v > best_iou:
                best_iou = v
                best_j = j
        if best_j >= 0 and best_iou >= iou_thr:
            claimed[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags, order


def oracle_ap(points):
    """Area under the monotone precision envelope, by direct scan.

    points: ranked list of (recall, precision). Envelope at recall r is
    the max precision over points with recall >= r; integrate over the
    distinct recall levels.
    """
    if not points:
        return 0.0
    levels = sorted(set(r for r, _ in points))
    ap = 0.0
    prev = 0.0
    for r in levels:
        env = 0.0
        for r2, p2 in points:
            if r2 >= r and p2 > env:
                env = p2
        ap += (r - prev) * env
        prev = r
    return ap


def oracle_evaluate(preds, gts, num_classes, iou_thr=0.5, conf_thr=0.25):
    """Full evaluation: per-class AP, mAP, micro P/R at conf_thr, F1.

    preds: {image_id: [(class_id, conf, (x0,y0,x1,y1)), ...]}
    gts:   {image_id: [(class_id, (x0,y0,x1,y1)), ...]}
    """
    images = sorted(set(preds) | set(gts))
    ap_per_class = {}
    micro_tp = micro_fp = 0
    total_gt = 0
    for c in range(num_classes):
        gt_count = 0
        scored = []  # (conf, image_id, input_idx, tp)
        tp_at_thr = fp_at_thr = 0
        for img in images:
            gts_c = [g[1] for g in gts.get(img, []) if g[0] == c]
            gt_count += len(gts_c)
            preds_c = [(p[1], p[2]) for p in preds.get(img, []) if p[0] == c]
            idx_c = [i for i, p in enumerate(preds.get(img, [])) if p[0] == c]
            flags, order = oracle_match_one(preds_c, gts_c, iou_thr)
            for rank_pos, i in enumerate(order):
                conf = preds_c[i][0]
                scored.append((conf, img, idx_c[i], flags[rank_pos]))
            # operating point: same greedy matching on the thresholded subset
            kept = [(p, i) for p, i in zip(preds_c, idx_c) if p[0] >= conf_thr]
            f2, _ = oracle_match_one([p for p, _ in kept], gts_c, iou_thr)
            tp_at_thr += sum(1 for f in f2 if f)
            fp_at_thr += sum(1 for f in f2 if not f)
        micro_tp += tp_at_thr
        micro_fp += fp_at_thr
        total_gt += gt_count
        if gt_count == 0:
            continue
        ranked = _rank_stable(scored, key=lambda s: (-s[0], s[1], s[2]))
        points = []
        tp = fp = 0
        for i in ranked:
            if scored[i][3]:
                tp += 1
            else:
                fp += 1
            points.append((tp / gt_count, tp / (tp + fp)))
        ap_per_class[c] = oracle_ap(points)
    m_ap = (sum(ap_per_class.values()) / len(ap_per_class)) if ap_per_class else 0.0
    p = micro_tp / (micro_tp + micro_fp) if (micro_tp + micro_fp) > 0 else 0.0
    r = micro_tp / total_gt if total_gt > 0 else 0.0
    f1 = 2 * p * r / (p + r) if (p + r) > 0 else 0.0
    return {"ap": ap_per_class, "map50": m_ap, "precision": p, "recall": r, "f1": f1}


# ---------------------------------------------------------------------------
# FLOPs hand count, default toy configuration
# ---------------------------------------------------------------------------
# Conventions: FLOPs = 2 x multiply-accumulates.
#   conv            2*Cout*(Cin/g)*kh*kw*H'*W'  (+ H'*W'*Cout when biased)
#   batchnorm       2*C*H*W
#   activation      2*C*H*W
#   attn scores     2*M*key_dim*N^2
#   attn softmax    5*M*N^2
#   attn weighting  2*M*D*N^2
# Default config: input 64x64, channels 16/32/64 (stride-2 each), one
# attention-over-half-channels block after the last stage (ratio 0.5),
# 7 classes -> 12 head channels, head conv biased, all other convs
# BN-normalized and bias-free; the positional conv is biased, BN-free.

def _conv_flops(cout, cin_g, k, hw, bias=False):
    f = 2 * cout * cin_g * k * k * hw
    if bias:
        f += hw * cout
    return f


def flops_hand_count_default():
    total = 0
    # stem 3->16, k3 s2, out 32x32, BN+SiLU
    total += _conv_flops(16, 3, 3, 32 * 32) + 2 * 16 * 32 * 32 + 2 * 16 * 32 * 32
    # stage1 16->32, k3 s2, out 16x16, BN+SiLU
    total += _conv_flops(32, 16, 3, 16 * 16) + 2 * 32 * 16 * 16 + 2 * 32 * 16 * 16
    # stage2 32->64, k3 s2, out 8x8, BN+SiLU
    total += _conv_flops(64, 32, 3, 8 * 8) + 2 * 64 * 8 * 8 + 2 * 64 * 8 * 8
    # partial-attention block on 64 channels at 8x8 (N=64); branch width 32,
    # one head, head dim 32, key dim 16
    hw = 8 * 8
    n = 64
    total += _conv_flops(64, 64, 1, hw) + 2 * 64 * hw + 2 * 64 * hw      # entry + BN + SiLU
    total += _conv_flops(64, 32, 1, hw) + 2 * 64 * hw                    # qkv + BN
    total += 2 * 1 * 16 * n * n                                          # scores
    total += 5 * 1 * n * n                                               # softmax
    total += 2 * 1 * 32 * n * n                                          # weighted sum
    total += _conv_flops(32, 1, 3, hw, bias=True)                        # positional dw conv
    total += _conv_flops(32, 32, 1, hw) + 2 * 32 * hw                    # proj + BN
    total += _conv_flops(64, 32, 1, hw) + 2 * 64 * hw + 2 * 64 * hw      # ffn expand + BN + SiLU
    total += _conv_flops(32, 64, 1, hw) + 2 * 32 * hw                    # ffn reduce + BN
    total += _conv_flops(64, 64, 1, hw) + 2 * 64 * hw + 2 * 64 * hw      # exit + BN + SiLU
    # head 64->12, 1x1, biased, no BN, no activation
    total += _conv_flops(12, 64, 1, hw, bias=True)
    return total


if __name__ == "__main__":
    print("default toy config FLOPs:", flops_hand_count_default())
