"""Panoptic masks and per-instance binary masks for dynamic objects."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import InputError

LABEL_NAMES = {0: "void", 1: "ground", 2: "sky", 3: "building", 4: "car", 5: "person"}
DYNAMIC_LABELS = frozenset({"car", "person"})
STATIC_LABELS = frozenset({"ground", "building", "sky"})


@dataclass
class PanopticMask:
    """Per-pixel ``(instance id, label id)`` pairs; instance id 0 means none."""

    instance: np.ndarray
    label: np.ndarray
    label_names: dict = field(default_factory=lambda: dict(LABEL_NAMES))

    def __post_init__(self):
        self.instance = np.asarray(self.instance, dtype=np.int32)
        self.label = np.asarray(self.label, dtype=np.int32)
        if self.instance.shape != self.label.shape or self.instance.ndim != 2:
            raise InputError(
                f"instance {self.instance.shape} and label {self.label.shape} must be equal HxW arrays"
            )

    @property
    def shape(self):
        return self.instance.shape

    def instance_labels(self):
        """Map each nonzero instance id to its label id.

        Raises :class:`InputError` if an instance carries more than one label.
        """
        ids = self.instance.ravel()
        labels = self.label.ravel()
        nz = ids != 0
        pairs = np.unique(np.stack([ids[nz], labels[nz]], axis=1), axis=0)
        out = {}
        for i, lab in pairs:
            if int(i) in out:
                raise InputError(f"instance {int(i)} has several labels")
            out[int(i)] = int(lab)
        return out

    def label_ids(self, names):
        lookup = {v: k for k, v in self.label_names.items()}
        return {lookup[n] for n in names if n in lookup}

    def copy(self):
        return PanopticMask(self.instance.copy(), self.label.copy(), dict(self.label_names))

    def __eq__(self, other):
        return (
            isinstance(other, PanopticMask)
            and np.array_equal(self.instance, other.instance)
            and np.array_equal(self.label, other.label)
        )

    # 16-bit encoding: high byte = label id, low byte = instance id
    def encode16(self):
        if self.instance.max(initial=0) > 255 or self.label.max(initial=0) > 255:
            raise InputError("instance and label ids must fit in one byte for 16-bit encoding")
        return ((self.label.astype(np.uint16) << 8) | self.instance.astype(np.uint16)).astype(np.uint16)

    @classmethod
    def decode16(cls, packed, label_names=None):
        packed = np.asarray(packed).astype(np.uint16)
        return cls(packed & 0xFF, packed >> 8, dict(label_names or LABEL_NAMES))


@dataclass
class InstanceMaskSet:
    masks: list
    instance_ids: list

    @property
    def n(self):
        return len(self.masks)

    def __len__(self):
        return len(self.masks)

    def id_image(self):
        """Recombine the binary masks into the id-valued image ``sum_j id_j * M_j``."""
        if not self.masks:
            return None
        out = np.zeros(self.masks[0].shape, dtype=np.int32)
        for i, m in zip(self.instance_ids, self.masks):
            out += i * m.astype(np.int32)
        return out


def extract_instance_masks(S, dynamic_labels=DYNAMIC_LABELS, min_area=16):
    """Binary masks for every instance whose label is dynamic.

    Masks are ordered by ascending instance id. Static objects and
    background never produce a mask; instances covering fewer than
    ``min_area`` pixels are skipped.
    """
    dyn_ids = S.label_ids(dynamic_labels)
    masks, ids = [], []
    for inst, lab in sorted(S.instance_labels().items()):
        if lab not in dyn_ids:
            continue
        m = (S.instance == inst).astype(np.uint8)
        if int(m.sum()) < min_area:
            continue
        masks.append(m)
        ids.append(inst)
    return InstanceMaskSet(masks, ids)


def oracle_panoptic(frame, erode_dilate=0, drop_prob=0.0, seed=0, dynamic_labels=DYNAMIC_LABELS):
    """Ground-truth panoptic mask of a generated frame, optionally degraded.

    ``erode_dilate`` > 0 dilates each dynamic instance by that many pixels
    (square structuring element, clipped at the image border); < 0 erodes it.
    Each dynamic instance is dropped with probability ``drop_prob``.
    """
    S = frame.panoptic.copy()
    if erode_dilate == 0 and drop_prob <= 0:
        return S
    rng = np.random.default_rng([seed, int(frame.index)])
    dyn_ids = S.label_ids(dynamic_labels)
    background = 1
    for inst, lab in sorted(S.instance_labels().items()):
        if lab not in dyn_ids:
            continue
        # regions come from the undegraded mask so the result does not
        # depend on how earlier instances were grown
        region = frame.panoptic.instance == inst
        if drop_prob > 0 and rng.random() < drop_prob:
            owned = region & (S.instance == inst)
            S.instance[owned] = 0
            S.label[owned] = background
            continue
        if erode_dilate > 0:
            grown = ndimage.binary_dilation(region, np.ones((3, 3), bool), iterations=erode_dilate)
            S.instance[grown] = inst
            S.label[grown] = lab
        elif erode_dilate < 0:
            kept = ndimage.binary_erosion(region, np.ones((3, 3), bool), iterations=-erode_dilate)
            lost = region & ~kept & (S.instance == inst)
            S.instance[lost] = 0
            S.label[lost] = background
    return S
