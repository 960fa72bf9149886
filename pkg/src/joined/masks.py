"""Label conventions and mask helpers shared across the pipeline.

Internal label masks use integer codes: 0 = background, 1 = optic disc (OD),
2 = optic cup (OC).  The OC is always spatially contained in the OD, so the
"disc structure" of a mask is the union of the OD and OC labels.

Probability maps carry three channels in the fixed order (OC, OD, background).
"""

from __future__ import annotations

import numpy as np

LABEL_BACKGROUND = 0
LABEL_OD = 1
LABEL_OC = 2

# channel order of probability maps / one-hot targets
CHANNEL_OC = 0
CHANNEL_OD = 1
CHANNEL_BACKGROUND = 2

SEG_THRESHOLD = 0.5


def one_hot(mask: np.ndarray) -> np.ndarray:
    """Encode an integer label mask as a (3, H, W) float32 one-hot array.

    Channel order is (OC, OD, background); every pixel lights exactly one
    channel, so the OD channel covers only the disc rim (OD minus OC).
    """
    out = np.zeros((3,) + mask.shape, dtype=np.float32)
    out[CHANNEL_OC] = mask == LABEL_OC
    out[CHANNEL_OD] = mask == LABEL_OD
    out[CHANNEL_BACKGROUND] = mask == LABEL_BACKGROUND
    return out


def labels_from_probs(probs: np.ndarray) -> np.ndarray:
    """Threshold a (3, H, W) probability map into an integer label mask.

    Each channel is binarized at 0.5.  A pixel claimed by several channels is
    resolved with priority OC > OD > background; a pixel claimed by none falls
    back to the argmax channel.
    """
    if probs.ndim != 3 or probs.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) probability map, got {probs.shape}")
    bits = probs > SEG_THRESHOLD
    argmax = np.argmax(probs, axis=0)
    out = np.empty(probs.shape[1:], dtype=np.uint8)
    # fallback for pixels where no channel clears the threshold
    out[argmax == CHANNEL_OC] = LABEL_OC
    out[argmax == CHANNEL_OD] = LABEL_OD
    out[argmax == CHANNEL_BACKGROUND] = LABEL_BACKGROUND
    out[bits[CHANNEL_BACKGROUND]] = LABEL_BACKGROUND
    out[bits[CHANNEL_OD]] = LABEL_OD
    out[bits[CHANNEL_OC]] = LABEL_OC
    return out


def structure_mask(mask: np.ndarray, structure: str) -> np.ndarray:
    """Binary mask of an anatomical structure ("od" or "oc").

    The disc structure includes OC pixels because the disc spatially
    contains the cup.
    """
    if structure == "od":
        return (mask == LABEL_OD) | (mask == LABEL_OC)
    if structure == "oc":
        return mask == LABEL_OC
    raise ValueError(f"unknown structure {structure!r}")
