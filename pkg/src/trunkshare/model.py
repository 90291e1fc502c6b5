"""Trunk + heads assembled into multitask and single-task models.

The multitask forward computes the shared trunk exactly once and feeds the
same FeaturePyramid to both heads; only head layers run per task. The joint
loss gates each task term by per-sample presence masks so mixed, detection-
only and segmentation-only batches all use the same code path.
"""

from dataclasses import dataclass

import numpy as np

from . import io
from . import tensor as T
from .dethead import BoxSetSpec, DetHead, generate_default_boxes, match_anchors, multibox_loss
from .errors import ConfigError, ContractError
from .seghead import SegHead, seg_loss
from .trunk import Trunk, TrunkConfig, count_params, load_named


@dataclass
class JointOutput:
    det: tuple        # (conf_logits [N,A,C+1], loc_preds [N,A,4])
    seg: T.Tensor     # logits [N,C+1,H,W]


@dataclass
class LossParts:
    total: float
    det_conf: float
    det_loc: float
    seg: float

    @property
    def det(self):
        return self.det_conf + self.det_loc


class MultitaskModel:
    """Shared trunk with a detection and a segmentation branch."""

    def __init__(self, trunk: Trunk, det_head: DetHead, seg_head: SegHead,
                 loss_weights=(1.0, 1.0)):
        if min(loss_weights) < 0:
            raise ConfigError(f"loss weights must be >= 0, got {loss_weights}")
        self.trunk = trunk
        self.det_head = det_head
        self.seg_head = seg_head
        self.loss_weights = tuple(float(w) for w in loss_weights)
        self.anchors = generate_default_boxes(det_head.spec)

    def __call__(self, images) -> JointOutput:
        pyramid = self.trunk(images)
        return JointOutput(det=self.det_head(pyramid), seg=self.seg_head(pyramid))

    def named_params(self):
        out = self.trunk.named_params("trunk")
        out.update(self.det_head.named_params("det"))
        out.update(self.seg_head.named_params("seg"))
        return out

    def count_flops(self, input_hw=None):
        h, w = input_hw if input_hw is not None else self.trunk.cfg.input_size
        with T.Graph() as g, T.no_grad():
            self(T.Tensor(np.zeros((1, 3, h, w))))
        return g.total_flops()


class SingleTaskModel:
    """Trunk plus exactly one head — the naive-deployment building block."""

    def __init__(self, trunk: Trunk, head, task):
        if task not in ("det", "seg"):
            raise ConfigError(f"task must be 'det' or 'seg', got {task!r}")
        self.trunk = trunk
        self.head = head
        self.task = task
        self.anchors = generate_default_boxes(head.spec) if task == "det" else None

    def __call__(self, images):
        return self.head(self.trunk(images))

    def named_params(self):
        out = self.trunk.named_params("trunk")
        out.update(self.head.named_params(self.task))
        return out

    def count_flops(self, input_hw=None):
        h, w = input_hw if input_hw is not None else self.trunk.cfg.input_size
        with T.Graph() as g, T.no_grad():
            self(T.Tensor(np.zeros((1, 3, h, w))))
        return g.total_flops()


def forward_multi(model: MultitaskModel, images) -> JointOutput:
    return model(images)


def joint_loss(out: JointOutput, batch, weights=None):
    """Presence-gated weighted sum of the two task losses.

    batch needs: det_gt (per-sample gt lists), det_present, seg_masks,
    seg_present, and the model's anchors are taken from batch.anchors if set.
    Returns (total loss Tensor, LossParts).
    """
    lam_det, lam_seg = weights if weights is not None else (1.0, 1.0)
    conf, loc = out.det
    n = conf.shape[0]
    det_present = np.asarray(batch.det_present, dtype=bool)
    seg_present = np.asarray(batch.seg_present, dtype=bool)
    if not det_present.any() and not seg_present.any():
        raise ContractError("batch carries no annotations for either task")

    terms = []
    det_conf = det_loc = seg_val = 0.0

    if det_present.any():
        per_image = []
        n_det = int(det_present.sum())
        for i in np.nonzero(det_present)[0]:
            assign = match_anchors(batch.det_gt[i], batch.anchors,
                                   batch.match_threshold)
            conf_i = T.reshape(T.gather_rows(_image_rows(conf, i), np.arange(conf.shape[1])),
                               (conf.shape[1], conf.shape[2]))
            total_i, parts_i = multibox_loss(
                _image(conf, i), _image(loc, i), assign, batch.neg_ratio)
            per_image.append(total_i)
            det_conf += parts_i.conf / n_det
            det_loc += parts_i.loc / n_det
        det_total = per_image[0]
        for t in per_image[1:]:
            det_total = T.add(det_total, t)
        det_total = T.scale(det_total, 1.0 / n_det)
        terms.append(T.scale(det_total, lam_det))

    if seg_present.any():
        masks = np.asarray(batch.seg_masks, dtype=np.int64).copy()
        masks[~seg_present] = 255  # absent samples contribute nothing
        seg_total = seg_loss(out.seg, masks)
        seg_val = seg_total.item()
        terms.append(T.scale(seg_total, lam_seg))

    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    parts = LossParts(total=total.item(), det_conf=det_conf, det_loc=det_loc,
                      seg=seg_val)
    return total, parts


def _image(t, i):
    """Row-slice one image out of a [N,A,K] tensor as [A,K]."""
    n, a, k = t.shape
    rows = T.reshape(t, (n * a, k))
    return T.gather_rows(rows, np.arange(i * a, (i + 1) * a))


def _image_rows(t, i):
    return _image(t, i)


def model_size_bytes(model, bytes_per_scalar=4):
    return count_params(model) * bytes_per_scalar


def naive_size_bytes(single_models, bytes_per_scalar=4):
    return sum(model_size_bytes(m, bytes_per_scalar) for m in single_models)


# ---------------------------------------------------------------------------
# builders


@dataclass(frozen=True)
class HeadSpec:
    num_classes: int = 3
    scales: tuple = (0.15, 0.35, 0.6)
    aspect_ratios: tuple = (1.0, 2.0, 0.5)


def _box_spec(trunk: Trunk, head_spec: HeadSpec):
    feature_shapes = tuple((h, w) for _, h, w in trunk.feature_shapes())
    return BoxSetSpec(tuple(head_spec.scales), tuple(head_spec.aspect_ratios),
                      feature_shapes)


def build_multitask(trunk_cfg: TrunkConfig, head_spec: HeadSpec, seed: int,
                    loss_weights=(1.0, 1.0)) -> MultitaskModel:
    trunk = Trunk(trunk_cfg, seed)
    det = DetHead(trunk_cfg.stage_channels, head_spec.num_classes,
                  _box_spec(trunk, head_spec), seed + 1)
    seg = SegHead(trunk_cfg.stage_channels[2], trunk_cfg.stage_channels[1],
                  head_spec.num_classes + 1, seed + 2)
    return MultitaskModel(trunk, det, seg, loss_weights)


def build_single(trunk_cfg: TrunkConfig, head_spec: HeadSpec, task: str,
                 seed: int) -> SingleTaskModel:
    """Single-task model with the same init scheme as the multitask build."""
    trunk = Trunk(trunk_cfg, seed)
    if task == "det":
        head = DetHead(trunk_cfg.stage_channels, head_spec.num_classes,
                       _box_spec(trunk, head_spec), seed + 1)
    else:
        head = SegHead(trunk_cfg.stage_channels[2], trunk_cfg.stage_channels[1],
                       head_spec.num_classes + 1, seed + 2)
    return SingleTaskModel(trunk, head, task)


def save_checkpoint(path, model):
    io.save_ckp1(path, {k: t.data for k, t in model.named_params().items()})


def load_checkpoint(model, path, strict=True):
    """Load matching namespaces from a CKP1 file; returns the loaded names."""
    named = io.load_ckp1(path)
    loaded = []
    params = model.named_params()
    for name, t in params.items():
        if name in named:
            if tuple(named[name].shape) != tuple(t.shape):
                raise ConfigError(
                    f"checkpoint shape mismatch for {name}: "
                    f"{named[name].shape} vs {t.shape}")
            t.data[...] = named[name]
            loaded.append(name)
    if strict and len(loaded) != len(params):
        missing = sorted(set(params) - set(loaded))
        raise ConfigError(f"checkpoint missing {len(missing)} parameters "
                          f"(first: {missing[:3]})")
    return loaded
