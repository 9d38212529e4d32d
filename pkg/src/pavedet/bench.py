"""Phase-resolved inference timing.

FPS is defined as 1/(t_pre + t_inference + t_post) over per-phase means.
Phase boundaries: preprocessing ends when the input tensor is ready,
inference covers the forward pass and decoding, post covers NMS and
result marshaling. The timed loop is single-threaded; means are taken
over the measured iterations after discarding warmup runs.
"""

import time
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .boxes import nms
from .data import load_image_ppm
from .tensor import Tensor
from .toynet import ToyNet, decode, forward


@dataclass(frozen=True)
class TimingBreakdown:
    t_pre: float
    t_inference: float
    t_post: float
    iters: int = 1
    warmup: int = 0

    def __post_init__(self):
        for name in ("t_pre", "t_inference", "t_post"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.iters < 1:
            raise ValueError(f"iters must be >= 1, got {self.iters}")

    @property
    def total(self) -> float:
        return self.t_pre + self.t_inference + self.t_post

    @property
    def fps(self) -> float:
        return 1.0 / self.total if self.total > 0 else float("inf")


def measure_fps(model: ToyNet, images: Sequence, warmup: int = 10,
                iters: int = 100, conf_threshold: float = 0.25,
                nms_iou: float = 0.45) -> TimingBreakdown:
    """Time single-image inference, cycling through the given images.

    Each image may be a (3, S, S) Tensor (preprocessing then only wraps
    it into a batch) or a PPM path, in which case preprocessing includes
    the load and normalization. Warmup runs are discarded.
    """
    if not images:
        raise ValueError("empty image list")
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    sums = [0.0, 0.0, 0.0]
    with T.no_grad():
        for k in range(warmup + iters):
            item = images[k % len(images)]
            t0 = time.perf_counter()
            if isinstance(item, (str, Path)):
                img = load_image_ppm(item)
            else:
                img = item
            x = Tensor(img.data[None])
            t1 = time.perf_counter()
            raw = forward(model, x, training=False)
            dets = decode(raw.data[0], conf_threshold)
            t2 = time.perf_counter()
            kept = nms(dets, nms_iou)
            _ = [(b.class_id, b.confidence, b.x_min, b.y_min,
                  b.x_max, b.y_max) for b in kept]
            t3 = time.perf_counter()
            if k >= warmup:
                sums[0] += t1 - t0
                sums[1] += t2 - t1
                sums[2] += t3 - t2
    return TimingBreakdown(sums[0] / iters, sums[1] / iters, sums[2] / iters,
                           iters=iters, warmup=warmup)


def bench_report(breakdowns: Sequence[TimingBreakdown],
                 labels: Sequence[str],
                 params: Optional[Sequence[int]] = None,
                 flops: Optional[Sequence[int]] = None,
                 sort_by_fps: bool = False):
    """Build (text table, JSON rows) from aligned measurement lists.

    Times are reported in microsecond resolution, FPS in hundredths; the
    text table and the JSON rows carry identical numeric values.
    """
    n = len(breakdowns)
    if len(labels) != n:
        raise ValueError(f"{len(labels)} labels for {n} breakdowns")
    if params is None:
        params = [0] * n
    if flops is None:
        flops = [0] * n
    if len(params) != n or len(flops) != n:
        raise ValueError("params and flops must align with breakdowns")
    rows: List[dict] = []
    for bd, label, p, f in zip(breakdowns, labels, params, flops):
        rows.append({
            "label": label,
            "params": int(p),
            "flops": int(f),
            "t_pre": round(bd.t_pre, 6),
            "t_inference": round(bd.t_inference, 6),
            "t_post": round(bd.t_post, 6),
            "fps": round(bd.fps, 2),
        })
    if sort_by_fps:
        rows.sort(key=lambda r: -r["fps"])
    width = max(5, max((len(r["label"]) for r in rows), default=5))
    lines = [f"{'Label':<{width}}  {'Params':>10}  {'FLOPs':>12}  {'FPS':>10}"]
    for r in rows:
        lines.append(f"{r['label']:<{width}}  {r['params']:>10}  "
                     f"{r['flops']:>12}  {r['fps']:>10.2f}")
    return "\n".join(lines) + "\n", rows
