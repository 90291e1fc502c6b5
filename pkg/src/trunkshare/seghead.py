"""FCN-style segmentation branch: 1x1 score convs + one skip connection.

The stride-16 score map is upsampled x2, fused additively with the stride-8
skip score, and upsampled x8, giving class logits at exactly the input
resolution. Upsampling is fixed bilinear (parameter-free), ignore label 255.
"""

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .trunk import Conv2d

IGNORE_LABEL = 255


class SegHead:
    """Two 1x1 score convolutions: main path on c4, skip on c3."""

    def __init__(self, c4_channels, c3_channels, num_classes, seed):
        if num_classes < 2:
            raise ConfigError(f"segmentation needs >= 2 classes, got {num_classes}")
        self.num_classes = num_classes
        rng = np.random.default_rng(seed)
        self.score4 = Conv2d(c4_channels, num_classes, 1, 1, rng)
        self.score3 = Conv2d(c3_channels, num_classes, 1, 1, rng)

    def __call__(self, pyramid):
        main = T.bilinear_upsample(self.score4(pyramid.c4), 2)
        fused = T.add(main, self.score3(pyramid.c3))
        return T.bilinear_upsample(fused, 8)

    def named_params(self, prefix=""):
        p = f"{prefix}." if prefix else ""
        out = dict(self.score4.named_params(f"{p}score4"))
        out.update(self.score3.named_params(f"{p}score3"))
        return out

    def count_flops(self, input_hw):
        from .dethead import _zero_pyramid
        h, w = input_hw
        shapes = [(self.score3.cin, h // 4, w // 4),  # c2 unused but present
                  (self.score3.cin, h // 8, w // 8),
                  (self.score4.cin, h // 16, w // 16)]
        with T.Graph() as g, T.no_grad():
            self(_zero_pyramid(shapes))
        return g.total_flops()


def forward_seg(pyramid, head: SegHead):
    return head(pyramid)


def seg_loss(logits, masks):
    """Pixel-wise cross-entropy over non-ignored pixels.

    logits: Tensor[N,C,H,W]; masks: int array [N,H,W] with labels in [0,C)
    or IGNORE_LABEL.
    """
    n, c, h, w = logits.shape
    masks = np.asarray(masks, dtype=np.int64)
    if masks.shape != (n, h, w):
        raise ShapeError(f"mask shape {masks.shape} != {(n, h, w)}")
    rows = T.reshape(T.permute(logits, (0, 2, 3, 1)), (n * h * w, c))
    return T.softmax_cross_entropy(rows, masks.reshape(-1), ignore_label=IGNORE_LABEL)


def predict_mask(logits):
    """Per-pixel argmax over classes (ties: lowest class id); [N,H,W] ints."""
    data = logits.data if isinstance(logits, T.Tensor) else np.asarray(logits)
    return data.argmax(axis=1).astype(np.int64)
