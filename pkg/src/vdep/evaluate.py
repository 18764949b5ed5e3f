"""Caption evaluation and the embedding-reconstruction probe policy."""

from __future__ import annotations

import numpy as np

from .data import MultimodalSample
from .diagnostics import ProbeReport, alignment_rows, reconstruction_probe
from .model import ModelConfig, greedy_decode
from .tensor import Tensor

SLOT_NAMES = ("shape", "color", "row", "col")
_SLOT_INDEX = {"shape": 0, "color": 1, "row": 3, "col": 4}


def evaluate_captions(params: dict[str, Tensor], config: ModelConfig,
                      samples: list[MultimodalSample]) -> dict:
    """Greedy-decode each caption; exact match plus per-slot accuracy."""
    exact = 0
    slot_hits = {name: 0 for name in SLOT_NAMES}
    for sample in samples:
        decoded = greedy_decode(params, config, sample, max_new=len(sample.response_ids))
        if decoded == sample.response_ids:
            exact += 1
        for name, idx in _SLOT_INDEX.items():
            if idx < len(decoded) and decoded[idx] == sample.response_ids[idx]:
                slot_hits[name] += 1
    n = len(samples)
    return {
        "samples": n,
        "exact_match": exact / n,
        "per_slot": {name: slot_hits[name] / n for name in SLOT_NAMES},
    }


def evaluate_probe(params: dict[str, Tensor], config: ModelConfig,
                   samples: list[MultimodalSample], offset: int = 1,
                   rows: str = "foreground") -> ProbeReport:
    """Pool (target, hidden) rows across samples and run the
    nearest-neighbor probe. The default "foreground" policy probes one
    row per sample, the grid cell holding the glyph, so the candidate set
    carries the scenes' semantic content."""
    t_parts, h_parts = [], []
    for sample in samples:
        t, h = alignment_rows(params, config, sample, offset, rows)
        t_parts.append(t)
        h_parts.append(h)
    return reconstruction_probe(np.concatenate(t_parts), np.concatenate(h_parts))
