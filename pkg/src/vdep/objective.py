"""The hybrid training objective: per-mode supervision masks, the image
alignment loss in its three variants, and the alpha-weighted combination.

Each sample in a batch carries exactly one mode. Text-mode samples
contribute next-token cross-entropy over their response span; image-mode
samples contribute an alignment loss pulling decoder hidden states at
image positions toward the projected patch embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import tensor as T
from .errors import NumericError, ShapeError
from .tensor import Tensor


class ModeLabel(Enum):
    VDEP = "vdep"
    LLAVA = "llava"


class LossVariant(Enum):
    L2 = "l2"
    INVERSE_L2 = "inverse_l2"
    SIGMOID_L2 = "sigmoid_l2"


INVERSE_L2_EPS = 1e-6


@dataclass
class LossBreakdown:
    l_text: float
    l_image: float
    total: float
    text_position_count: int
    image_position_count: int
    alpha_used: float
    total_node: Tensor = field(repr=False, default=None)


def supervision_masks(layout, mode: ModeLabel, offset: int = 1):
    """Per-mode supervision targets for one sample.

    Returns ``(text_mask, image_map)``. ``text_mask`` is a length-T bool
    array enabling the logit positions that predict response tokens
    (next-token shifted). ``image_map`` pairs a hidden-state position with
    the patch index it must reconstruct: with offset=1 the hidden state at
    the position preceding patch j predicts patch j; with offset=0 each
    image position reconstructs its own patch.
    """
    if offset not in (0, 1):
        raise ShapeError(f"offset must be 0 or 1, got {offset}")
    text_mask = np.zeros(layout.total_len, dtype=bool)
    image_map: list[tuple[int, int]] = []
    if mode is ModeLabel.LLAVA:
        start, stop = layout.response_start, layout.response_stop
        if stop > start:
            text_mask[start - 1:stop - 1] = True
    else:
        n = layout.image_stop - layout.image_start
        for j in range(n):
            image_map.append((layout.image_start + j - offset, j))
    return text_mask, image_map


def text_targets(layout, response_ids: list[int]) -> np.ndarray:
    """Length-T target ids aligned with the next-token-shifted text mask."""
    targets = np.zeros(layout.total_len, dtype=np.int64)
    start = layout.response_start
    for j, tok in enumerate(response_ids):
        targets[start - 1 + j] = tok
    return targets


def image_alignment_loss(hidden_rows: Tensor, target_rows: Tensor,
                         variant: LossVariant = LossVariant.L2,
                         detach_target: bool = True,
                         eps: float = INVERSE_L2_EPS,
                         base_scale: float = 1.0) -> Tensor:
    """Alignment loss between paired hidden-state and embedding rows.

    The base distance m is the mean squared difference over all paired
    elements, multiplied by ``base_scale`` (callers that want a summed
    norm per sample pass rows*width/samples). The variant maps m to the
    final loss: m itself, 1/(m+eps), or sigmoid(m). With
    ``detach_target`` no gradient flows into the target side.
    """
    if hidden_rows.shape != target_rows.shape:
        raise ShapeError(
            f"alignment rows disagree: {hidden_rows.shape} vs {target_rows.shape}")
    if detach_target:
        target_rows = target_rows.detach()
    mask = [True] * hidden_rows.shape[0]
    m = T.masked_mean_squared_error(hidden_rows, target_rows, mask)
    if base_scale != 1.0:
        m = T.scale(m, base_scale)
    if variant is LossVariant.L2:
        return m
    if variant is LossVariant.INVERSE_L2:
        return T.reciprocal(T.add_scalar(m, eps))
    if variant is LossVariant.SIGMOID_L2:
        return T.sigmoid(m)
    raise ShapeError(f"unknown loss variant {variant!r}")


@dataclass
class BatchItem:
    """One forward sample plus everything its loss terms need."""
    mode: ModeLabel
    output: object            # ForwardOutput
    embeddings: Tensor        # projected patch embeddings [n_patches, d]
    response_ids: list[int]


def hybrid_loss(items: list[BatchItem], alpha: float,
                variant: LossVariant = LossVariant.L2,
                offset: int = 1, detach_target: bool = True) -> LossBreakdown:
    """Combine the batch's two loss terms: total = l_text + alpha * l_image.

    l_text pools cross-entropy over every enabled position of the
    text-mode samples; l_image pools the alignment loss over every mapped
    row of the image-mode samples, normalized per sample so batch
    composition does not rescale either term. A mode absent from the
    batch contributes 0 with count 0. When alpha is 0 the image term is
    left out of the graph entirely, so gradients match a text-only loss
    bit for bit.
    """
    if alpha < 0:
        raise ShapeError(f"alpha must be >= 0, got {alpha}")
    ce_terms: list[tuple[Tensor, int]] = []
    hidden_parts: list[Tensor] = []
    target_parts: list[Tensor] = []
    image_positions = 0
    n_image_samples = 0
    for item in items:
        text_mask, image_map = supervision_masks(item.output.layout, item.mode, offset)
        if item.mode is ModeLabel.LLAVA:
            targets = text_targets(item.output.layout, item.response_ids)
            count = int(text_mask.sum())
            if count:
                ce = T.cross_entropy_masked(item.output.logits, targets, text_mask)
                ce_terms.append((ce, count))
        else:
            n_image_samples += 1
            positions = [p for p, _ in image_map]
            patches = [j for _, j in image_map]
            hidden_parts.append(T.embedding_lookup(item.output.hidden_states, positions))
            target_parts.append(T.embedding_lookup(item.embeddings, patches))
            image_positions += len(image_map)

    text_count = sum(c for _, c in ce_terms)
    l_text_node = None
    if ce_terms:
        acc = T.scale(ce_terms[0][0], ce_terms[0][1] / text_count)
        for ce, c in ce_terms[1:]:
            acc = T.add(acc, T.scale(ce, c / text_count))
        l_text_node = acc

    l_image_node = None
    if hidden_parts:
        hidden = hidden_parts[0] if len(hidden_parts) == 1 else T.concat_rows(hidden_parts)
        target = target_parts[0] if len(target_parts) == 1 else T.concat_rows(target_parts)
        width = hidden.shape[1]
        # summed squared norm per sample, averaged over image-mode samples
        base_scale = hidden.shape[0] * width / n_image_samples
        l_image_node = image_alignment_loss(hidden, target, variant, detach_target,
                                            base_scale=base_scale)

    if l_text_node is not None and l_image_node is not None and alpha != 0.0:
        total_node = T.add(l_text_node, T.scale(l_image_node, alpha))
    elif l_text_node is not None:
        total_node = l_text_node
    elif l_image_node is not None:
        total_node = T.scale(l_image_node, alpha)
    else:
        total_node = Tensor(0.0)

    l_text = l_text_node.item() if l_text_node is not None else 0.0
    l_image = l_image_node.item() if l_image_node is not None else 0.0
    total = l_text + alpha * l_image
    if not np.isfinite(total):
        raise NumericError("hybrid loss is not finite")
    return LossBreakdown(
        l_text=l_text,
        l_image=l_image,
        total=total,
        text_position_count=text_count,
        image_position_count=image_positions,
        alpha_used=alpha,
        total_node=total_node,
    )
