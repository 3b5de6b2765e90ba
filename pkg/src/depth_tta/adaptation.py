"""Online, pose-free test-time adaptation of the depth network.

Each frame goes through: predict depth, get the panoptic mask, build binary
masks for dynamic instances, gate the depth with them, compute edge maps of
image and depth, median-filter the gated depths into fixed pseudo-labels,
combine the depth-refining and edge-guided losses, and take one plain SGD
step on the selected parameters only.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError, NumericError
from .metrics import aggregate, compute_metrics
from .segmentation import DYNAMIC_LABELS, extract_instance_masks, oracle_panoptic
from .signal import MedianConfig, edge_map, edge_weights, gray_mean, mask_depth, median_filter
from .tensor import Tensor

logger = logging.getLogger(__name__)

SELECTION_MODES = ("bn-encoder-all", "bn-encoder-last", "conv-bn-last", "names")


@dataclass(frozen=True)
class SelectionSpec:
    """Which parameters form the adapted set.

    ``bn-encoder-all``: every encoder BN scale and shift.
    ``bn-encoder-last``: BN scale/shift of the deepest ``bn_fraction`` of encoder BN layers.
    ``conv-bn-last``: additionally the conv weights of the deepest
    ``conv_fraction`` of encoder conv layers.
    ``names``: an explicit list.
    """

    mode: str = "bn-encoder-all"
    conv_fraction: float = 0.0
    bn_fraction: float = 1.0
    names: tuple = ()

    def __post_init__(self):
        if self.mode not in SELECTION_MODES:
            raise ConfigError(f"unknown selection mode {self.mode!r}")
        for f in (self.conv_fraction, self.bn_fraction):
            if not 0.0 <= f <= 1.0:
                raise ConfigError(f"selection fractions must lie in [0, 1], got {f}")

    @classmethod
    def parse(cls, text):
        """Parse ``bn-encoder-all``, ``bn:0.5``, ``cnn:0.2+bn:0.8`` or ``names:a,b``."""
        text = text.strip()
        if text in ("bn-encoder-all", "bn", "bn:1", "bn:1.0"):
            return cls()
        if text.startswith("names:"):
            return cls(mode="names", names=tuple(n for n in text[6:].split(",") if n))
        conv = bn = 0.0
        try:
            for part in text.split("+"):
                key, _, val = part.partition(":")
                val = float(val.rstrip("%")) / (100.0 if val.endswith("%") else 1.0)
                if key in ("cnn", "conv"):
                    conv = val
                elif key == "bn":
                    bn = val
                else:
                    raise ValueError(key)
        except ValueError:
            raise ConfigError(f"cannot parse selection {text!r}") from None
        if conv == 0.0:
            return cls(mode="bn-encoder-last", bn_fraction=bn)
        return cls(mode="conv-bn-last", conv_fraction=conv, bn_fraction=bn)

    @property
    def label(self):
        if self.mode == "names":
            return "names:" + ",".join(self.names)
        if self.mode == "bn-encoder-all":
            return "cnn:0+bn:1"
        return f"cnn:{self.conv_fraction:g}+bn:{self.bn_fraction:g}"


def _last_fraction(items, fraction):
    k = int(math.floor(fraction * len(items) + 0.5))
    return items[len(items) - k:] if k else []


def resolve_selection(spec, store):
    """Resolve ``spec`` against ``store``, set the adaptable flags, return the names.

    "Last" counts layers backwards from the deepest encoder layer in
    registration order.
    """
    enc = [(n, e) for n, e in store.items() if e.part == "encoder"]
    bn_layers = sorted({e.depth for n, e in enc if e.kind == "bn-gamma"})
    conv_layers = sorted({e.depth for n, e in enc if e.kind == "conv"})
    if spec.mode == "names":
        names = list(spec.names)
    else:
        bn_frac = 1.0 if spec.mode == "bn-encoder-all" else spec.bn_fraction
        conv_frac = spec.conv_fraction if spec.mode == "conv-bn-last" else 0.0
        bn_keep = set(_last_fraction(bn_layers, bn_frac))
        conv_keep = set(_last_fraction(conv_layers, conv_frac))
        names = [
            n for n, e in enc
            if (e.kind in ("bn-gamma", "bn-beta") and e.depth in bn_keep)
            or (e.kind == "conv" and e.depth in conv_keep)
        ]
    store.set_adaptable(names)
    return store.adaptable_names()


@dataclass(frozen=True)
class Hyperparams:
    lambda_: float = 0.2
    lr: float = 1e-5
    median_window: int = 5
    median_support_only: bool = False
    weight_mode: str = "constant"
    selection: SelectionSpec = field(default_factory=SelectionSpec)
    steps_per_frame: int = 1
    depth_norm: str = "l1"
    update_bn_stats: bool = False
    dynamic_labels: frozenset = DYNAMIC_LABELS
    min_instance_area: int = 16
    mask_erode_dilate: int = 0
    mask_drop_prob: float = 0.0
    mask_seed: int = 0

    def __post_init__(self):
        if not self.lambda_ >= 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lambda_}")
        if not self.lr >= 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if self.depth_norm not in ("l1", "l2"):
            raise ConfigError(f"depth_norm must be 'l1' or 'l2', got {self.depth_norm!r}")
        if self.steps_per_frame < 1:
            raise ConfigError("steps_per_frame must be >= 1")
        MedianConfig(self.median_window)
        object.__setattr__(self, "dynamic_labels", frozenset(self.dynamic_labels))

    @property
    def median(self):
        return MedianConfig(self.median_window, self.median_support_only)

    def to_dict(self):
        d = asdict(self)
        d["selection"] = self.selection.label
        d["dynamic_labels"] = sorted(self.dynamic_labels)
        d["lambda_"] = "inf" if math.isinf(self.lambda_) else self.lambda_
        return d


@dataclass
class StepReport:
    frame_index: int
    n_instances: int
    loss_depth: float
    loss_edge: float
    loss_total: float
    grad_norm: float
    updated: bool
    wall_time: float = 0.0
    aborted: bool = False
    domain: str = ""

    def as_dict(self, timestamps=True):
        d = asdict(self)
        if not timestamps:
            d.pop("wall_time")
        return d


# ------------------------------------------------------------------- losses


def depth_refining_loss(masked, pseudo, norm="l1"):
    """Mean over instances of the summed per-pixel distance to the pseudo-labels.

    With no instances the loss is a constant 0 carrying no gradient.
    """
    if len(masked) != len(pseudo):
        raise InputError(f"{len(masked)} masked maps but {len(pseudo)} pseudo-labels")
    if not masked:
        return Tensor(0.0)
    terms = []
    for d, target in zip(masked, pseudo):
        target = np.asarray(target)
        if target.shape != d.shape:
            raise InputError(f"pseudo-label shape {target.shape} does not match {d.shape}")
        diff = T.sub(d, Tensor(target, dtype=d.dtype))
        terms.append(T.sum_(T.abs_(diff) if norm == "l1" else T.square(diff)))
    return T.scale(T.stack_sum(terms), 1.0 / len(terms))


def edge_guided_loss(edge_image, edge_depth):
    """Manhattan distance between two edge maps; the image side is constant."""
    a = edge_image.values if hasattr(edge_image, "values") else edge_image
    b = edge_depth.values if hasattr(edge_depth, "values") else edge_depth
    a_data = a.data if isinstance(a, Tensor) else np.asarray(a)
    b = T.as_tensor(b)
    if a_data.shape != b.shape:
        raise InputError(f"edge maps differ in shape: {a_data.shape} vs {b.shape}")
    return T.sum_(T.abs_(T.sub(b, Tensor(a_data, dtype=b.dtype))))


def total_loss(loss_depth, loss_edge, lambda_):
    """``L_d + lambda * L_e``; an infinite lambda means the edge loss alone."""
    if not lambda_ >= 0:
        raise ConfigError(f"lambda must be >= 0, got {lambda_}")
    if math.isinf(lambda_):
        return loss_edge
    if lambda_ == 0:
        return loss_depth
    return T.add(loss_depth, T.scale(loss_edge, lambda_))


@dataclass
class LossTerms:
    depth: Tensor
    masks: object
    pseudo: list
    loss_depth: Tensor
    loss_edge: Tensor
    loss: Tensor

    @property
    def n(self):
        return len(self.masks)


def compute_losses(net, frame, hyper, panoptic=None, pseudo=None):
    """Forward one frame and build the adaptation loss.

    ``pseudo`` overrides the median pseudo-labels (used by gradient checks,
    which must hold the targets fixed while perturbing parameters).
    """
    bn_mode = "train" if hyper.update_bn_stats else "eval"
    depth = net.forward(frame.image, bn_mode=bn_mode)
    if panoptic is None:
        panoptic = oracle_panoptic(frame, hyper.mask_erode_dilate, hyper.mask_drop_prob,
                                   hyper.mask_seed, hyper.dynamic_labels)
    masks = extract_instance_masks(panoptic, hyper.dynamic_labels, hyper.min_instance_area)
    masked = mask_depth(depth, masks)
    gray = gray_mean(frame.image)
    edge_img = edge_map(gray, edge_weights(gray, hyper.weight_mode))
    edge_dep = edge_map(depth, edge_weights(depth.data, hyper.weight_mode))
    if pseudo is None:
        support = masks.masks if hyper.median_support_only else [None] * len(masks)
        pseudo = [median_filter(m, hyper.median, s) for m, s in zip(masked, support)]
    loss_d = depth_refining_loss(masked, pseudo, hyper.depth_norm)
    loss_e = edge_guided_loss(edge_img, edge_dep)
    return LossTerms(depth, masks, pseudo, loss_d, loss_e, total_loss(loss_d, loss_e, hyper.lambda_))


def _sgd(store, names, lr):
    for n in names:
        p = store.tensor(n)
        if p.grad is not None:
            p.data -= (lr * p.grad).astype(p.data.dtype)


def _adapt(net, frame, hyper, theta, panoptic=None):
    """One frame of adaptation; returns the report and the pre-update depth."""
    start = time.perf_counter()
    before = None
    report = None
    for _ in range(hyper.steps_per_frame):
        net.store.zero_grad()
        terms = compute_losses(net, frame, hyper, panoptic)
        if before is None:
            before = terms.depth.data.copy()
        values = [float(terms.loss_depth.data), float(terms.loss_edge.data), float(terms.loss.data)]
        n = terms.n
        report = StepReport(frame.index, n, *values, grad_norm=0.0, updated=False, domain=frame.domain)
        if not all(np.isfinite(values)):
            report.aborted = True
            logger.warning("frame %s: non-finite loss, step skipped", frame.index)
            break
        if not theta or hyper.lr == 0 or not terms.loss.requires_grad:
            # alpha = 0, empty selection, or nothing to learn from (N = 0 with lambda = 0)
            break
        terms.loss.backward()
        grads = [net.store.tensor(name).grad for name in theta]
        sq = sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads if g is not None)
        report.grad_norm = math.sqrt(sq)
        if not np.isfinite(sq):
            report.aborted = True
            logger.warning("frame %s: non-finite gradient, step skipped", frame.index)
            break
        _sgd(net.store, theta, hyper.lr)
        report.updated = True
    net.store.zero_grad()
    report.wall_time = time.perf_counter() - start
    return report, before


def adapt_step(net, frame, hyper, panoptic=None):
    """Adapt ``net`` on one frame in place and report the losses."""
    theta = net.store.adaptable_names()
    return _adapt(net, frame, hyper, theta, panoptic)[0]


@dataclass(frozen=True)
class EvalConfig:
    depth_cap: float = 80.0
    median_scaling: bool = False
    aggregation: str = "per-frame"
    on_error: str = "halt"  # or "continue"


@dataclass
class StreamResult:
    steps: list = field(default_factory=list)
    metrics: list = field(default_factory=list)
    aggregation: str = "per-frame"

    def __iter__(self):
        return iter(zip(self.steps, self.metrics))

    def __len__(self):
        return len(self.steps)

    def evaluated(self):
        return [m for m in self.metrics if m is not None]

    def cumulative(self):
        recs = self.evaluated()
        return aggregate(recs, self.aggregation, domain="all") if recs else None

    def by_domain(self):
        groups = {}
        for m in self.evaluated():
            groups.setdefault(m.domain, []).append(m)
        return {d: aggregate(rs, self.aggregation, domain=d) for d, rs in groups.items()}


def run_stream(net, stream, hyper, eval_cfg=None, callback=None):
    """Evaluate-then-adapt over ``stream``.

    Metrics for each frame are computed on the prediction made before that
    frame's update. Frames without ground truth are adapted on but not
    evaluated. ``hyper.lr = 0`` gives the frozen baseline.
    """
    eval_cfg = eval_cfg or EvalConfig()
    theta = resolve_selection(hyper.selection, net.store)
    if not theta and hyper.lr > 0:
        logger.warning("selection %s is empty; nothing will be adapted", hyper.selection.label)
    result = StreamResult(aggregation=eval_cfg.aggregation)
    for frame in stream:
        try:
            report, before = _adapt(net, frame, hyper, theta)
        except (InputError, NumericError) as exc:
            if eval_cfg.on_error == "continue":
                logger.error("frame %s failed: %s", frame.index, exc)
                continue
            exc.args = (f"frame {frame.index}: {exc}",)
            raise
        record = None
        if frame.gt_depth is not None:
            record = compute_metrics(before, frame.gt_depth, depth_cap=eval_cfg.depth_cap,
                                     median_scaling=eval_cfg.median_scaling, domain=frame.domain)
        result.steps.append(report)
        result.metrics.append(record)
        if callback is not None:
            callback(report, record)
    return result


def with_overrides(hyper, **kw):
    return replace(hyper, **kw)
