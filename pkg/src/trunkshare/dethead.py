"""Anchor-based detection branch over the feature pyramid.

Default boxes are tiled per pyramid level (one per cell x aspect ratio) and
predictions are regressed against them with the usual center/size offset
parameterisation (variances 0.1 / 0.2). Matching threshold 0.5, 3:1 hard
negative mining and NMS IoU 0.45 are the standard values, kept configurable.

All boxes are normalised to [0,1]. Corner boxes are (xmin, ymin, xmax, ymax);
center boxes are (cx, cy, w, h). Tie-breaking is always lowest index.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import AnnotationError, ConfigError, ShapeError
from .trunk import Conv2d

CENTER_VARIANCE = 0.1
SIZE_VARIANCE = 0.2


@dataclass(frozen=True)
class BoxSetSpec:
    """Anchor layout: one scale per level, shared aspect ratios."""
    scales: tuple = (0.15, 0.35, 0.6)
    aspect_ratios: tuple = (1.0, 2.0, 0.5)
    feature_shapes: tuple = ()  # ((h, w) per level), filled from the pyramid

    def validate(self):
        if len(self.scales) != len(self.feature_shapes):
            raise ConfigError("need one scale per pyramid level")
        if any(not 0 < s <= 1 for s in self.scales):
            raise ConfigError(f"scales must lie in (0,1], got {self.scales}")
        if list(self.scales) != sorted(self.scales):
            raise ConfigError("scales must increase with stride")
        if not self.aspect_ratios or any(a <= 0 for a in self.aspect_ratios):
            raise ConfigError(f"aspect ratios must be > 0, got {self.aspect_ratios}")


@dataclass
class Assignment:
    anchor_label: np.ndarray   # int[A], 0 = background
    anchor_target: np.ndarray  # float[A,4] encoded offsets, zero for negatives
    positive_mask: np.ndarray  # bool[A]


@dataclass
class Detection:
    class_id: int
    score: float
    box: tuple  # (xmin, ymin, xmax, ymax) normalised


@dataclass
class MultiboxParts:
    conf: float
    loc: float
    no_positives: bool = False


def iou(a, b):
    """Intersection over union of two corner boxes; zero-area boxes overlap nothing."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(boxes_a, boxes_b):
    """Pairwise IoU of two corner-box arrays, [len(a), len(b)]."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) -
                 np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) -
                 np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def center_to_corner(boxes):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    half = boxes[:, 2:] / 2
    return np.concatenate([boxes[:, :2] - half, boxes[:, :2] + half], axis=1)


def corner_to_center(boxes):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.concatenate([(boxes[:, :2] + boxes[:, 2:]) / 2,
                           boxes[:, 2:] - boxes[:, :2]], axis=1)


def generate_default_boxes(spec: BoxSetSpec) -> np.ndarray:
    """Anchor centers (cx, cy, w, h), ordered level-major, row-major, aspect-minor."""
    spec.validate()
    out = []
    for scale, (h, w) in zip(spec.scales, spec.feature_shapes):
        cx = (np.arange(w) + 0.5) / w
        cy = (np.arange(h) + 0.5) / h
        for y in cy:
            for x in cx:
                for ar in spec.aspect_ratios:
                    out.append((x, y, scale * np.sqrt(ar), scale / np.sqrt(ar)))
    return np.asarray(out, dtype=np.float64)


def encode_boxes(gt_corner, anchors_center):
    """Offsets from anchors to ground-truth corner boxes."""
    gt = corner_to_center(gt_corner)
    a = np.asarray(anchors_center, dtype=np.float64).reshape(-1, 4)
    if (gt[:, 2:] <= 0).any():
        raise AnnotationError("ground-truth box with non-positive width/height")
    t_xy = (gt[:, :2] - a[:, :2]) / (a[:, 2:] * CENTER_VARIANCE)
    t_wh = np.log(gt[:, 2:] / a[:, 2:]) / SIZE_VARIANCE
    return np.concatenate([t_xy, t_wh], axis=1)


def decode_boxes(offsets, anchors_center, clip=True):
    """Inverse of encode_boxes; returns corner boxes, clipped to [0,1]."""
    t = np.asarray(offsets, dtype=np.float64).reshape(-1, 4)
    a = np.asarray(anchors_center, dtype=np.float64).reshape(-1, 4)
    cxy = t[:, :2] * CENTER_VARIANCE * a[:, 2:] + a[:, :2]
    wh = np.exp(t[:, 2:] * SIZE_VARIANCE) * a[:, 2:]
    corners = center_to_corner(np.concatenate([cxy, wh], axis=1))
    if clip:
        corners = np.clip(corners, 0.0, 1.0)
    return corners


def match_anchors(gt, anchors_center, threshold=0.5) -> Assignment:
    """Assign anchors to ground truth boxes.

    gt: list of (class_id >= 1, corner box). Policy: first, each gt claims its
    best-IoU anchor among still-free anchors, in gt order (so every gt gets a
    positive regardless of threshold); then any unclaimed anchor with IoU >=
    threshold joins its argmax gt. Ties always break to the lowest index.
    """
    a = len(anchors_center)
    label = np.zeros(a, dtype=np.int64)
    target = np.zeros((a, 4), dtype=np.float64)
    if not gt:
        return Assignment(label, target, np.zeros(a, dtype=bool))
    classes = np.asarray([g[0] for g in gt], dtype=np.int64)
    if (classes < 1).any():
        raise AnnotationError("ground-truth class ids must be >= 1")
    gt_boxes = np.asarray([g[1] for g in gt], dtype=np.float64)
    anchor_corners = center_to_corner(anchors_center)
    ious = iou_matrix(anchor_corners, gt_boxes)  # [A, G]

    matched_gt = np.full(a, -1, dtype=np.int64)
    for g in range(len(gt)):
        col = ious[:, g].copy()
        col[matched_gt >= 0] = -1.0  # already claimed by an earlier gt
        best = int(np.argmax(col))   # lowest index on ties
        matched_gt[best] = g

    free = matched_gt < 0
    best_gt = np.argmax(ious, axis=1)
    best_iou = ious[np.arange(a), best_gt]
    take = free & (best_iou >= threshold)
    matched_gt[take] = best_gt[take]

    pos = matched_gt >= 0
    if pos.any():
        rows = np.nonzero(pos)[0]
        label[rows] = classes[matched_gt[rows]]
        target[rows] = encode_boxes(gt_boxes[matched_gt[rows]],
                                    np.asarray(anchors_center)[rows])
    return Assignment(label, target, pos)


def multibox_loss(conf_logits, loc_preds, assign: Assignment, neg_ratio=3.0):
    """Confidence + localisation loss with hard negative mining.

    Localisation: smooth L1 over positive anchors. Confidence: cross-entropy
    over the positives plus the neg_ratio*P negatives with the highest
    background loss; both terms are normalised by the positive count P.
    With P == 0 the top max(1, neg_ratio) negatives train background only.
    """
    a = conf_logits.shape[0]
    if loc_preds.shape[0] != a or assign.anchor_label.shape[0] != a:
        raise ShapeError("multibox inputs disagree on anchor count")
    pos_idx = np.nonzero(assign.positive_mask)[0]
    neg_idx = np.nonzero(~assign.positive_mask)[0]
    p = len(pos_idx)

    # per-anchor background loss, forward only, for mining
    z = conf_logits.data - conf_logits.data.max(axis=1, keepdims=True)
    bg_loss = np.log(np.exp(z).sum(axis=1)) - z[:, 0]
    k = min(int(neg_ratio * p) if p else max(1, int(neg_ratio)), len(neg_idx))
    order = np.argsort(-bg_loss[neg_idx], kind="stable")  # ties: lowest index
    hard_neg = neg_idx[order[:k]]

    sel = np.concatenate([pos_idx, hard_neg])
    sel_labels = np.concatenate([assign.anchor_label[pos_idx],
                                 np.zeros(k, dtype=np.int64)])
    denom = p if p else k
    ce = T.softmax_cross_entropy(T.gather_rows(conf_logits, sel), sel_labels)
    conf = T.scale(ce, len(sel) / denom)  # mean -> sum / denom

    if p:
        loc = T.smooth_l1(T.gather_rows(loc_preds, pos_idx),
                          T.Tensor(assign.anchor_target[pos_idx]))
        total = T.add(conf, loc)
    else:
        loc = T.scale(conf, 0.0)
        total = conf
    return total, MultiboxParts(conf.item(), loc.item(), no_positives=(p == 0))


def nms(dets, iou_threshold=0.45, top_k=200):
    """Greedy per-class suppression; returns kept detections sorted by score.

    dets: list of Detection (any order). Score ties break to the lower input
    index, so results are deterministic.
    """
    kept = []
    by_class = {}
    for i, d in enumerate(dets):
        by_class.setdefault(d.class_id, []).append((d.score, i, d))
    for cls in sorted(by_class):
        cand = sorted(by_class[cls], key=lambda t: (-t[0], t[1]))
        chosen = []
        for score, _, det in cand:
            if len(chosen) >= top_k:
                break
            if all(iou(det.box, c.box) <= iou_threshold for c in chosen):
                chosen.append(det)
        kept.extend(chosen)
    return kept


class DetHead:
    """Per-level 3x3 conv pair (class scores, box offsets).

    Outputs are flattened level-major, cell-row-major, aspect-minor so row i
    lines up with the i-th default box.
    """

    def __init__(self, in_channels, num_classes, spec: BoxSetSpec, seed):
        if len(in_channels) != len(spec.scales):
            raise ConfigError("need one input channel count per pyramid level")
        self.num_classes = num_classes
        self.spec = spec
        self.n_ars = len(spec.aspect_ratios)
        rng = np.random.default_rng(seed)
        self.levels = []
        for cin in in_channels:
            cls = Conv2d(cin, self.n_ars * (num_classes + 1), 3, 1, rng)
            loc = Conv2d(cin, self.n_ars * 4, 3, 1, rng)
            self.levels.append((cls, loc))

    def __call__(self, pyramid):
        conf_parts, loc_parts = [], []
        for (cls_conv, loc_conv), feat in zip(self.levels, pyramid.as_list()):
            n, _, h, w = feat.shape
            conf_parts.append(self._flatten(cls_conv(feat), self.num_classes + 1))
            loc_parts.append(self._flatten(loc_conv(feat), 4))
        return T.concat(conf_parts, axis=1), T.concat(loc_parts, axis=1)

    def _flatten(self, x, last):
        n, c, h, w = x.shape
        x = T.reshape(x, (n, self.n_ars, last, h, w))
        x = T.permute(x, (0, 3, 4, 1, 2))  # cells row-major, aspect-minor
        return T.reshape(x, (n, h * w * self.n_ars, last))

    def named_params(self, prefix=""):
        p = f"{prefix}." if prefix else ""
        out = {}
        for li, (cls_conv, loc_conv) in enumerate(self.levels):
            out.update(cls_conv.named_params(f"{p}level{li}.cls"))
            out.update(loc_conv.named_params(f"{p}level{li}.loc"))
        return out

    def count_flops(self, input_hw):
        h, w = input_hw
        shapes = [(conv[0].cin, h // s, w // s)
                  for conv, s in zip(self.levels, (4, 8, 16))]
        pyr = _zero_pyramid(shapes)
        with T.Graph() as g, T.no_grad():
            self(pyr)
        return g.total_flops()


def _zero_pyramid(shapes, n=1):
    from .trunk import FeaturePyramid
    taps = [T.Tensor(np.zeros((n, c, h, w))) for c, h, w in shapes]
    return FeaturePyramid(*taps)


def forward_det(pyramid, head: DetHead):
    return head(pyramid)


def detections_from_outputs(conf_logits, loc_preds, anchors_center,
                            score_threshold=0.01, iou_threshold=0.45, top_k=200):
    """Decode one image's raw head outputs into an NMS-filtered DetectionSet."""
    z = conf_logits - conf_logits.max(axis=1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=1, keepdims=True)
    corners = decode_boxes(loc_preds, anchors_center)
    cand = []
    for cls in range(1, probs.shape[1]):
        scores = probs[:, cls]
        for i in np.nonzero(scores >= score_threshold)[0]:
            box = corners[i]
            if box[2] > box[0] and box[3] > box[1]:
                cand.append(Detection(cls, float(scores[i]), tuple(box)))
    return nms(cand, iou_threshold, top_k)


def dump_detections_csv(path, per_image_dets):
    """Detection dump: image_id,class_id,score,xmin,ymin,xmax,ymax (6 decimals)."""
    lines = ["image_id,class_id,score,xmin,ymin,xmax,ymax"]
    for image_id, dets in per_image_dets:
        for d in dets:
            lines.append(f"{image_id},{d.class_id},{d.score:.6f},"
                         f"{d.box[0]:.6f},{d.box[1]:.6f},{d.box[2]:.6f},{d.box[3]:.6f}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_detections_csv(path):
    per_image = {}
    with open(path) as f:
        header = f.readline().strip()
        if header != "image_id,class_id,score,xmin,ymin,xmax,ymax":
            raise ShapeError(f"unexpected detection CSV header: {header}")
        for line in f:
            parts = line.strip().split(",")
            if not parts or parts == [""]:
                continue
            image_id = parts[0]
            det = Detection(int(parts[1]), float(parts[2]),
                            tuple(float(v) for v in parts[3:7]))
            per_image.setdefault(image_id, []).append(det)
    return per_image
