"""A small single-scale detector with attention blocks at chosen depths.

The network is a stack of stride-2 3x3 conv units (downsampling capped at
1/8) with optional partial self-attention after configured stages, and a
1x1 head predicting per-cell objectness, class logits, and box parameters.
"""

import dataclasses
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import blocks as B
from . import tensor as T
from .blocks import AttentionConfig, ConvUnit, PsaParams, heads_from_channels
from .boxes import DetectionBox, GroundTruthBox, nms
from .evaluation import map50
from .tensor import Tensor, _sigmoid


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    stage_channels: Tuple[int, ...] = (16, 32, 64)
    psa_placements: frozenset = frozenset({2})
    attn_ratio: float = 0.5
    num_classes: int = 7

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        object.__setattr__(self, "psa_placements",
                           frozenset(self.psa_placements))
        n = len(self.stage_channels)
        if n < 1:
            raise ValueError("at least one stage is required")
        if self.input_size % (1 << n):
            raise ValueError(
                f"input_size {self.input_size} not divisible by {1 << n}"
            )
        for i in self.psa_placements:
            if not 0 <= i < n:
                raise ValueError(f"placement {i} outside stages [0, {n})")
            if self.stage_channels[i] % 2:
                raise ValueError(
                    f"stage {i} has odd width {self.stage_channels[i]}, "
                    "attention needs an even split"
                )
        if not 0.0 < self.attn_ratio <= 1.0:
            raise ValueError(f"attn_ratio must be in (0, 1], got {self.attn_ratio}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")

    @property
    def head_channels(self) -> int:
        return 1 + self.num_classes + 4

    @property
    def strides(self) -> Tuple[int, ...]:
        # downsampling is capped at 1/8 regardless of depth
        return tuple(2 if i < 3 else 1 for i in range(len(self.stage_channels)))

    @property
    def grid(self) -> int:
        g = self.input_size
        for s in self.strides:
            g //= s
        return g


class ToyNet:
    """Parameter bundle: stage conv units, attention blocks, head conv."""

    def __init__(self, cfg: ModelConfig, stages: List[ConvUnit],
                 psa: Dict[int, PsaParams], head: ConvUnit):
        self.cfg = cfg
        self.stages = stages
        self.psa = psa
        self.head = head

    def _stage_name(self, i: int) -> str:
        return "stem" if i == 0 else f"stage{i}"

    def named_tensors(self) -> list:
        out = []
        for i, unit in enumerate(self.stages):
            out += unit.named_tensors(self._stage_name(i))
            if i in self.psa:
                out += self.psa[i].named_tensors(f"psa{i}")
        out += self.head.named_tensors("head")
        return out

    def trainable(self) -> list:
        return B.trainable(self.named_tensors())

    def param_count(self) -> int:
        return sum(t.size for t in self.trainable())


def build_toy_net(cfg: ModelConfig, seed: int = 0) -> ToyNet:
    rng = np.random.default_rng(seed)
    stages = []
    psa = {}
    for i, ch in enumerate(cfg.stage_channels):
        cin = 3 if i == 0 else cfg.stage_channels[i - 1]
        stages.append(B.init_conv_unit(cin, ch, 3, rng, stride=cfg.strides[i],
                                       padding=1, norm=True, act="silu"))
        if i in cfg.psa_placements:
            psa[i] = B.init_psa_params(ch, cfg.attn_ratio, rng)
    head = B.init_conv_unit(cfg.stage_channels[-1], cfg.head_channels, 1, rng,
                            norm=False, act="none", bias=True)
    return ToyNet(cfg, stages, psa, head)


def forward(model: ToyNet, images: Tensor, training: bool = False,
            collect: Optional[dict] = None) -> Tensor:
    """Run the network; returns (B, head_channels, G, G) raw logits.

    When collect is a dict, feature maps around each attention block are
    stored under "stage{i}.pre_psa" and "stage{i}.post_psa".
    """
    cfg = model.cfg
    if images.data.ndim != 4 or images.shape[1] != 3:
        raise ValueError(f"expected (B, 3, S, S) input, got {images.shape}")
    if images.shape[2] != cfg.input_size or images.shape[3] != cfg.input_size:
        raise ValueError(
            f"input size {images.shape[2]}x{images.shape[3]} does not match "
            f"configured {cfg.input_size}"
        )
    x = images
    for i, unit in enumerate(model.stages):
        x = unit(x, training=training)
        if i in model.psa:
            if collect is not None:
                collect[f"stage{i}.pre_psa"] = x
            x = B.psa_forward(x, model.psa[i], training=training)
            if collect is not None:
                collect[f"stage{i}.post_psa"] = x
    return model.head(x, training=training)


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def decode(pred, conf_threshold: float = 0.25, image_id=0) -> List[DetectionBox]:
    """Turn one image's raw head output into thresholded detection boxes.

    Accepts a (head, G, G) array/Tensor or a batch of one. Confidence is
    sigmoid(objectness) times the best class probability; centers are cell
    offsets, sizes are plain sigmoids; boxes are clamped to [0, 1].
    """
    if not 0.0 <= conf_threshold <= 1.0:
        raise ValueError(f"conf_threshold must be in [0, 1], got {conf_threshold}")
    arr = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError(f"decode expects one image, got batch {arr.shape[0]}")
        arr = arr[0]
    ch, g, _ = arr.shape
    nc = ch - 5
    obj = _sigmoid(arr[0])
    cls = _sigmoid(arr[1:1 + nc])
    best_c = cls.argmax(axis=0)
    conf = obj * cls.max(axis=0)
    tx, ty, tw, th = (_sigmoid(arr[k]) for k in range(nc + 1, nc + 5))
    out = []
    for i, j in np.argwhere(conf >= conf_threshold):
        cx = (j + tx[i, j]) / g
        cy = (i + ty[i, j]) / g
        w = tw[i, j]
        h = th[i, j]
        out.append(DetectionBox(
            int(best_c[i, j]), float(conf[i, j]),
            max(0.0, cx - w / 2), max(0.0, cy - h / 2),
            min(1.0, cx + w / 2), min(1.0, cy + h / 2),
            image_id=image_id,
        ))
    return out


def predict(model: ToyNet, images: Sequence[Tensor],
            conf_threshold: float = 0.25, nms_iou: float = 0.45,
            batch_size: int = 16, image_ids: Optional[Sequence] = None
            ) -> List[DetectionBox]:
    """Batched inference: forward, decode, class-wise NMS per image."""
    out = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images[start:start + batch_size]
            x = Tensor(np.stack([im.data for im in chunk]))
            raw = forward(model, x, training=False)
            for bi in range(len(chunk)):
                img_id = (image_ids[start + bi] if image_ids is not None
                          else start + bi)
                out.extend(nms(decode(raw.data[bi], conf_threshold, img_id),
                               nms_iou))
    return out


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def loss(pred: Tensor, targets, num_classes: Optional[int] = None) -> Tensor:
    """Objectness BCE over all cells plus class BCE and box squared error
    over cells containing a target center (later targets win a cell).

    targets: GroundTruthBox list for a single image, or one list per batch
    element. The three terms are unweighted; each is a mean over its own
    entries.
    """
    bsz, ch, g, _ = pred.shape
    nc = ch - 5 if num_classes is None else num_classes
    if targets and isinstance(targets[0], GroundTruthBox):
        targets = [list(targets)]
    elif not targets:
        targets = [[] for _ in range(bsz)]
    if len(targets) != bsz:
        raise ValueError(f"{len(targets)} target lists for batch of {bsz}")

    obj_t = np.zeros((bsz, 1, g, g))
    cls_t = np.zeros((bsz, nc, g, g))
    box_t = np.zeros((bsz, 4, g, g))
    for bi, boxes in enumerate(targets):
        for gtb in boxes:
            if not (0.0 <= gtb.x_min and gtb.x_max <= 1.0
                    and 0.0 <= gtb.y_min and gtb.y_max <= 1.0):
                raise ValueError(f"target box outside [0, 1]: {gtb}")
            cx = (gtb.x_min + gtb.x_max) / 2
            cy = (gtb.y_min + gtb.y_max) / 2
            j = min(g - 1, int(cx * g))
            i = min(g - 1, int(cy * g))
            obj_t[bi, 0, i, j] = 1.0
            cls_t[bi, :, i, j] = 0.0
            cls_t[bi, gtb.class_id, i, j] = 1.0
            box_t[bi, :, i, j] = (cx * g - j, cy * g - i,
                                  gtb.x_max - gtb.x_min, gtb.y_max - gtb.y_min)

    obj_z, cls_z, box_z = T.split(pred, (1, nc, 4), axis=1)
    total = T.bce_with_logits(obj_z, obj_t).mean()
    npos = int(obj_t.sum())
    if npos > 0:
        pos = np.repeat(obj_t, nc, axis=1)
        cls_term = T.mul(T.bce_with_logits(cls_z, cls_t), Tensor(pos)).sum()
        total = total + T.mul_scalar(cls_term, 1.0 / (npos * nc))
        pos4 = np.repeat(obj_t, 4, axis=1)
        diff = T.sub(box_z.sigmoid(), Tensor(box_t))
        box_term = T.mul(T.mul(diff, diff), Tensor(pos4)).sum()
        total = total + T.mul_scalar(box_term, 1.0 / (npos * 4))
    return total


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Sgd:
    """Momentum SGD over a fixed tensor list; BN buffers are not included."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros(p.shape) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= lr * v


def sgd_step(params: Sequence[Tensor], velocities: Sequence[np.ndarray],
             lr: float, momentum: float) -> None:
    """One in-place step: v <- momentum*v + g; p <- p - lr*v."""
    for p, v in zip(params, velocities):
        if p.grad is None:
            continue
        v *= momentum
        v += p.grad
        p.data -= lr * v


# ---------------------------------------------------------------------------
# FLOPs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FlopsReport:
    entries: Tuple[Tuple[str, int], ...]

    @property
    def total(self) -> int:
        return sum(f for _, f in self.entries)

    def by_name(self) -> dict:
        return dict(self.entries)


def _conv_flops(cout: int, cin_g: int, k: int, hw: int, bias: bool = False,
                bn: bool = False, act: bool = False) -> int:
    f = 2 * cout * cin_g * k * k * hw
    if bias:
        f += hw * cout
    if bn:
        f += 2 * cout * hw
    if act:
        f += 2 * cout * hw
    return f


def flops_estimate(cfg: ModelConfig) -> FlopsReport:
    """Analytic per-layer FLOPs (2 x multiply-accumulates convention)."""
    entries = []
    s = cfg.input_size
    for i, ch in enumerate(cfg.stage_channels):
        cin = 3 if i == 0 else cfg.stage_channels[i - 1]
        s //= cfg.strides[i]
        hw = s * s
        name = "stem" if i == 0 else f"stage{i}"
        entries.append((name, _conv_flops(ch, cin, 3, hw, bn=True, act=True)))
        if i in cfg.psa_placements:
            half = ch // 2
            acfg = AttentionConfig(half, heads_from_channels(half),
                                   cfg.attn_ratio)
            m, kd, d = acfg.num_heads, acfg.key_dim, acfg.head_dim
            n = hw
            p = f"psa{i}"
            entries += [
                (f"{p}.entry", _conv_flops(ch, ch, 1, hw, bn=True, act=True)),
                (f"{p}.attn.qkv",
                 _conv_flops(m * (2 * kd + d), half, 1, hw, bn=True)),
                (f"{p}.attn.scores", 2 * m * kd * n * n),
                (f"{p}.attn.softmax", 5 * m * n * n),
                (f"{p}.attn.weighted", 2 * m * d * n * n),
                (f"{p}.attn.pe", _conv_flops(half, 1, 3, hw, bias=True)),
                (f"{p}.attn.proj", _conv_flops(half, half, 1, hw, bn=True)),
                (f"{p}.ffn1", _conv_flops(ch, half, 1, hw, bn=True, act=True)),
                (f"{p}.ffn2", _conv_flops(half, ch, 1, hw, bn=True)),
                (f"{p}.exit", _conv_flops(ch, ch, 1, hw, bn=True, act=True)),
            ]
    entries.append(("head", _conv_flops(cfg.head_channels,
                                        cfg.stage_channels[-1], 1, s * s,
                                        bias=True)))
    return FlopsReport(tuple(entries))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _eval_map50(model: ToyNet, images, targets, conf: float,
                nms_iou: float) -> float:
    gts = [dataclasses.replace(b, image_id=i)
           for i, boxes in enumerate(targets) for b in boxes]
    if not gts:
        return 0.0
    preds = predict(model, images, conf_threshold=conf, nms_iou=nms_iou)
    return map50(preds, gts, model.cfg.num_classes)


def train_toy(model: ToyNet, images: Sequence[Tensor], targets,
              epochs: int = 300, lr: float = 0.1, momentum: float = 0.9,
              batch_size: int = 8, seed: int = 0, eval_conf: float = 0.05,
              nms_iou: float = 0.45, lr_schedule=None, log_path=None):
    """Minibatch SGD with a fixed shuffle sequence and best-epoch retention.

    Logs (epoch, mean loss, training mAP50) per epoch; after the last epoch
    the parameters revert to the highest-mAP epoch (first on ties). Returns
    (log rows, best epoch index) with -1 when no epoch ran.
    """
    if len(images) != len(targets):
        raise ValueError(f"{len(images)} images vs {len(targets)} target lists")
    if not images:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(seed)
    opt = Sgd(model.trainable(), lr, momentum)
    named = model.named_tensors()
    log = []
    best_map = -1.0
    best_epoch = -1
    best_state = None
    for epoch in range(epochs):
        cur_lr = lr if lr_schedule is None else lr_schedule(epoch)
        order = rng.permutation(len(images))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            x = Tensor(np.stack([images[i].data for i in idx]))
            batch_targets = [targets[i] for i in idx]
            opt.zero_grad()
            l = loss(forward(model, x, training=True), batch_targets)
            l.backward()
            opt.step(cur_lr)
            total += l.item() * len(idx)
        train_map = _eval_map50(model, images, targets, eval_conf, nms_iou)
        log.append((epoch, total / len(images), train_map))
        if train_map > best_map:
            best_map = train_map
            best_epoch = epoch
            best_state = [t.data.copy() for _, t in named]
    if best_state is not None:
        for (_, t), saved in zip(named, best_state):
            t.data[...] = saved
    if log_path is not None:
        rows = ["epoch,loss,train_map50\n"]
        rows += [f"{e},{l:.6f},{m:.6f}\n" for e, l, m in log]
        with open(log_path, "w") as f:
            f.writelines(rows)
    return log, best_epoch


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: ToyNet, path) -> None:
    cfg = model.cfg
    B.write_tensors(path, model.named_tensors(), sidecar_extra={"config": {
        "input_size": cfg.input_size,
        "stage_channels": list(cfg.stage_channels),
        "psa_placements": sorted(cfg.psa_placements),
        "attn_ratio": cfg.attn_ratio,
        "num_classes": cfg.num_classes,
    }})


def load_checkpoint(path) -> ToyNet:
    values, meta = B.read_tensors(path)
    if "config" not in meta:
        raise ValueError("checkpoint sidecar carries no model config")
    c = meta["config"]
    cfg = ModelConfig(
        input_size=c["input_size"],
        stage_channels=tuple(c["stage_channels"]),
        psa_placements=frozenset(c["psa_placements"]),
        attn_ratio=c["attn_ratio"],
        num_classes=c["num_classes"],
    )
    model = build_toy_net(cfg, seed=0)
    B.assign_tensors(model.named_tensors(), values)
    return model
