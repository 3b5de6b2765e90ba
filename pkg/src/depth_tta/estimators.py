"""scikit-learn style wrappers around the functional core.

:class:`DepthNetRegressor` fits the depth network on labelled source images;
:class:`TestTimeAdapter` adapts an already fitted network on an unlabelled
frame stream, one frame per ``partial_fit``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .adaptation import EvalConfig, Hyperparams, SelectionSpec, adapt_step, resolve_selection, run_stream
from .errors import DimensionError, InputError
from .metrics import aggregate, compute_metrics
from .net import DepthNet, DepthNetConfig, pretrain_on_source
from .scene import Frame
from .segmentation import PanopticMask


def check_image(image, shape=None):
    """Validate one ``H x W x C`` image with values in ``[0, 1]``."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise DimensionError(f"expected an H x W x C image, got shape {image.shape}", axes=list(range(image.ndim)))
    if shape is not None and tuple(image.shape) != tuple(shape):
        raise DimensionError(f"image shape {image.shape} does not match {tuple(shape)}")
    if not np.issubdtype(image.dtype, np.floating):
        raise InputError(f"image must be floating point in [0, 1], got {image.dtype}")
    if image.size and (np.nanmin(image) < 0 or np.nanmax(image) > 1):
        raise InputError("image values must lie in [0, 1]")
    return image


def check_depth_map(depth, shape=None):
    """Validate a strictly positive ``H x W`` depth map."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise DimensionError(f"expected an H x W depth map, got shape {depth.shape}")
    if shape is not None and depth.shape != tuple(shape):
        raise DimensionError(f"depth shape {depth.shape} does not match {tuple(shape)}")
    if not (depth > 0).all():
        raise InputError("depth must be strictly positive")
    return depth


def _check_batch(X, shape=None):
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise DimensionError(f"expected N x H x W x C images, got shape {X.shape}")
    for img in X:
        check_image(img, shape)
    return X


def _as_frames(X, y=None, masks=None):
    frames = []
    for i, img in enumerate(X):
        depth = None if y is None else check_depth_map(y[i], img.shape[:2]).astype(np.float32)
        pan = masks[i] if masks is not None else PanopticMask(np.zeros(img.shape[:2], int), np.zeros(img.shape[:2], int))
        frames.append(Frame(index=i, image=img, gt_depth=depth, panoptic=pan, domain="input"))
    return frames


class DepthNetRegressor(BaseEstimator):
    """Supervised depth regression with the small U-Net.

    Args:
        encoder_channels: Channels per encoder stage.
        min_depth: Lower output bound.
        max_depth: Upper output bound.
        steps: Optimizer steps over the training images (cycled).
        lr: Adam learning rate.
        seed: Weight initialization seed.
    """

    def __init__(self, encoder_channels=(16, 32, 64), min_depth=0.1, max_depth=100.0, steps=2000, lr=1e-3, seed=0):
        self.encoder_channels = encoder_channels
        self.min_depth = min_depth
        self.max_depth = max_depth
        self.steps = steps
        self.lr = lr
        self.seed = seed

    def fit(self, X, y):
        X = _check_batch(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise DimensionError(f"{len(X)} images but {len(y)} depth maps", axes=[0])
        config = DepthNetConfig(input_size=X.shape[1:], encoder_channels=tuple(self.encoder_channels),
                                min_depth=self.min_depth, max_depth=self.max_depth)
        self.net_ = DepthNet.build(config, self.seed)
        pretrain_on_source(self.net_, _as_frames(X, y), self.steps, lr=self.lr)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict(self, X):
        if not hasattr(self, "net_"):
            raise NotFittedError("DepthNetRegressor is not fitted yet")
        X = _check_batch(X, self.net_.config.input_size)
        return np.stack([self.net_.predict(img) for img in X])

    def score(self, X, y):
        """Negative mean AbsRel, so larger is better."""
        pred = self.predict(X)
        return -float(np.mean([compute_metrics(p, g).abs_rel for p, g in zip(pred, np.asarray(y))]))


class TestTimeAdapter(BaseEstimator):
    """Online adaptation of a fitted network.

    ``net`` is a :class:`DepthNet` or a checkpoint path; it is copied on
    ``fit``/first ``partial_fit`` so the original stays untouched.
    """

    __test__ = False  # keep pytest from collecting this class

    def __init__(self, net=None, lambda_=0.2, lr=1e-5, median_window=5, selection="bn-encoder-all",
                 weight_mode="constant", depth_norm="l1", steps_per_frame=1, update_bn_stats=False,
                 min_instance_area=16):
        self.net = net
        self.lambda_ = lambda_
        self.lr = lr
        self.median_window = median_window
        self.selection = selection
        self.weight_mode = weight_mode
        self.depth_norm = depth_norm
        self.steps_per_frame = steps_per_frame
        self.update_bn_stats = update_bn_stats
        self.min_instance_area = min_instance_area

    def hyperparams(self):
        sel = self.selection if isinstance(self.selection, SelectionSpec) else SelectionSpec.parse(self.selection)
        return Hyperparams(
            lambda_=float(self.lambda_), lr=float(self.lr), median_window=int(self.median_window),
            selection=sel, weight_mode=self.weight_mode, depth_norm=self.depth_norm,
            steps_per_frame=int(self.steps_per_frame), update_bn_stats=bool(self.update_bn_stats),
            min_instance_area=int(self.min_instance_area),
        )

    def _init(self):
        if self.net is None:
            raise NotFittedError("TestTimeAdapter needs a network or checkpoint")
        base = DepthNet.load(self.net) if isinstance(self.net, (str, bytes)) or hasattr(self.net, "__fspath__") else self.net
        self.net_ = base.copy()
        self.theta_ = resolve_selection(self.hyperparams().selection, self.net_.store)
        self.reports_ = []
        self.records_ = []

    def fit(self, frames, y=None, eval_cfg=None):
        """Run the whole stream from a fresh copy of ``net``."""
        self._init()
        result = run_stream(self.net_, frames, self.hyperparams(), eval_cfg or EvalConfig())
        self.reports_ = list(result.steps)
        self.records_ = list(result.metrics)
        self.result_ = result
        return self

    def partial_fit(self, frame, y=None):
        """Evaluate (when ground truth exists) and adapt on one frame."""
        if not hasattr(self, "net_"):
            self._init()
        check_image(frame.image, self.net_.config.input_size)
        before = self.net_.predict(frame.image) if frame.gt_depth is not None else None
        self.reports_.append(adapt_step(self.net_, frame, self.hyperparams()))
        self.records_.append(None if before is None else compute_metrics(before, frame.gt_depth, domain=frame.domain))
        return self

    def predict(self, X):
        if not hasattr(self, "net_"):
            raise NotFittedError("TestTimeAdapter has not seen any frames")
        X = _check_batch(X, self.net_.config.input_size)
        return np.stack([self.net_.predict(img) for img in X])

    def cumulative(self):
        recs = [r for r in self.records_ if r is not None]
        return aggregate(recs, domain="all") if recs else None

    @property
    def n_adapted_(self):
        return self.net_.store.n_scalars(self.theta_)

    def _more_tags(self):
        return {"non_deterministic": False, "requires_y": False}

