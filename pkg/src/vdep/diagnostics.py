"""Information-theoretic diagnostics and attention-flow artifacts.

The continuous embedding/hidden pairs are made discrete by coarse
per-dimension binning (bin edges taken from the target side), then fed to
a plug-in entropy/mutual-information estimator. A nearest-neighbor probe
measures whether hidden states identify their own target embeddings, and
attention-flow maps project a text query's attention mass onto the patch
grid.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError, UsageError
from .model import ModelConfig, ForwardOutput, run_sample
from .objective import ModeLabel, supervision_masks


@dataclass
class MIEstimate:
    h_x: float            # H(X) in bits
    h_x_given_y: float    # H(X|Y) in bits
    mi: float             # I(X;Y) in bits
    table_shape: tuple[int, int]


@dataclass
class AttentionFlowMap:
    layer: int
    query_pos: int
    grid: np.ndarray      # [grid_rows, grid_cols], non-negative
    note: str


@dataclass
class ProbeReport:
    top1_accuracy: float
    mean_l2: float
    count: int


def discrete_mutual_information(counts: np.ndarray) -> MIEstimate:
    """Plug-in estimate from an empirical joint count table (X rows, Y cols).

    Uses base-2 logs and the 0*log0 = 0 convention. The direct summation
    for I and the H(X) - H(X|Y) decomposition agree to float precision.
    """
    arr = np.asarray(counts, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError("joint counts must be a 2-d table")
    if (arr < 0).any():
        raise DomainError("joint counts must be non-negative")
    total = arr.sum()
    if total < 1:
        raise DomainError("joint count table is all zero")
    p = arr / total
    px = p.sum(axis=1)
    py = p.sum(axis=0)

    def _plogp(v):
        v = v[v > 0]
        return float((v * np.log2(v)).sum())

    h_x = -_plogp(px)
    h_cond = 0.0
    mi = 0.0
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            pij = p[i, j]
            if pij > 0:
                h_cond -= pij * math.log2(pij / py[j])
                mi += pij * math.log2(pij / (px[i] * py[j]))
    return MIEstimate(h_x=h_x, h_x_given_y=h_cond, mi=mi, table_shape=arr.shape)


def quantize_embeddings(vectors: np.ndarray, bins_per_dim: int = 4,
                        dims_used: int = 2,
                        reference: np.ndarray | None = None) -> np.ndarray:
    """Equal-width binning of the first ``dims_used`` dimensions into a
    mixed-radix symbol id per row.

    Bin edges span the observed min/max of ``reference`` (defaults to the
    vectors themselves); values outside that range clip into the edge
    bins, and constant dimensions map to bin 0.
    """
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError("quantize_embeddings expects [n, d] vectors")
    ref = arr if reference is None else np.asarray(reference, dtype=np.float64)
    dims = min(dims_used, arr.shape[1])
    symbols = np.zeros(arr.shape[0], dtype=np.int64)
    radix = 1
    for k in range(dims):
        lo, hi = ref[:, k].min(), ref[:, k].max()
        if hi > lo:
            width = (hi - lo) / bins_per_dim
            idx = np.clip(((arr[:, k] - lo) / width).astype(np.int64),
                          0, bins_per_dim - 1)
        else:
            idx = np.zeros(arr.shape[0], dtype=np.int64)
        symbols += idx * radix
        radix *= bins_per_dim
    return symbols


def joint_counts(x_symbols: np.ndarray, y_symbols: np.ndarray, n_symbols: int) -> np.ndarray:
    table = np.zeros((n_symbols, n_symbols), dtype=np.int64)
    np.add.at(table, (x_symbols, y_symbols), 1)
    return table


def reconstruction_probe(targets: np.ndarray, hiddens: np.ndarray) -> ProbeReport:
    """Nearest-neighbor identification of each hidden row among all target
    rows; a hit means the closest target is its own pair."""
    t = np.asarray(targets, dtype=np.float64)
    h = np.asarray(hiddens, dtype=np.float64)
    if t.shape != h.shape or t.ndim != 2:
        raise ShapeError(f"probe rows disagree: {t.shape} vs {h.shape}")
    n = t.shape[0]
    d2 = ((h[:, None, :] - t[None, :, :]) ** 2).sum(axis=2)
    nearest = d2.argmin(axis=1)
    paired = np.sqrt(np.maximum(d2[np.arange(n), np.arange(n)], 0.0))
    return ProbeReport(
        top1_accuracy=float((nearest == np.arange(n)).mean()),
        mean_l2=float(paired.mean()),
        count=n,
    )


def alignment_rows(params, model_config: ModelConfig, sample, offset: int = 1,
                   rows: str = "all"):
    """Collect (target, hidden) row pairs for one sample in image mode.

    ``rows`` selects "all" mapped patch pairs or only the "foreground"
    pair (the grid cell containing the glyph), which carries the scene's
    semantic content.
    """
    output, embeddings = run_sample(params, model_config, sample, ModeLabel.VDEP)
    _, image_map = supervision_masks(output.layout, ModeLabel.VDEP, offset)
    if rows == "foreground":
        cell = sample.scene.row * model_config.grid_side + sample.scene.col
        image_map = [(p, j) for p, j in image_map if j == cell]
    elif rows != "all":
        raise UsageError(f"rows must be 'all' or 'foreground', got {rows!r}")
    t = np.stack([embeddings.data[j] for _, j in image_map])
    h = np.stack([output.hidden_states.data[p] for p, _ in image_map])
    return t, h


def mi_trajectory(snapshots, samples, model_config: ModelConfig,
                  offset: int = 1, rows: str = "foreground",
                  bins_per_dim: int = 4, dims_used: int = 2):
    """For each parameter snapshot, measure the alignment loss on a fixed
    batch and the discrete MI between quantized targets and hidden states.

    Returns a list of (l_image, MIEstimate). Bin edges come from each
    snapshot's target rows, so both sides share the target-defined frame.
    """
    from .tensor import Tensor

    results = []
    n_symbols = bins_per_dim ** dims_used
    for _, snapshot in snapshots:
        params = {k: Tensor(v, requires_grad=False) for k, v in snapshot.items()}
        t_parts, h_parts = [], []
        for sample in samples:
            t, h = alignment_rows(params, model_config, sample, offset, rows)
            t_parts.append(t)
            h_parts.append(h)
        targets = np.concatenate(t_parts)
        hiddens = np.concatenate(h_parts)
        l_image = float(((hiddens - targets) ** 2).sum() / len(samples))
        xs = quantize_embeddings(targets, bins_per_dim, dims_used, reference=targets)
        ys = quantize_embeddings(hiddens, bins_per_dim, dims_used, reference=targets)
        results.append((l_image, discrete_mutual_information(
            joint_counts(xs, ys, n_symbols))))
    return results


def write_mi_trajectory(results, path: str) -> None:
    """Comma-separated rows: snapshot,l_image,H_X,H_X_given_Y,I_bits."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("snapshot,l_image,H_X,H_X_given_Y,I_bits\n")
        for i, (l_image, est) in enumerate(results):
            fh.write(f"{i},{l_image!r},{est.h_x!r},{est.h_x_given_y!r},{est.mi!r}\n")


# ---------------------------------------------------------------------------
# attention flow
# ---------------------------------------------------------------------------

def attention_flow(output: ForwardOutput, query_pos: int, layer: int,
                   head: int | None = None) -> AttentionFlowMap:
    """Attention mass a query position assigns to image positions,
    reshaped onto the patch grid in reading order. Averages over heads
    unless ``head`` picks a single one."""
    layout = output.layout
    if layout is None:
        raise UsageError("attention_flow needs a forward output with a layout")
    if not 0 <= layer < len(output.attention):
        raise UsageError(f"layer {layer} outside 0..{len(output.attention) - 1}")
    if layout.image_start <= query_pos < layout.image_stop:
        raise UsageError(f"query position {query_pos} lies inside the image range")
    if not 0 <= query_pos < layout.total_len:
        raise UsageError(f"query position {query_pos} outside the sequence")
    weights = output.attention[layer]
    if head is None:
        row = weights[:, query_pos, :].mean(axis=0)
        note = f"mean over {weights.shape[0]} heads; raw mass, sums to <=1"
    else:
        row = weights[head, query_pos, :]
        note = f"head {head}; raw mass, sums to <=1"
    image_row = row[layout.image_start:layout.image_stop]
    side = int(math.isqrt(image_row.size))
    return AttentionFlowMap(layer=layer, query_pos=query_pos,
                            grid=image_row.reshape(side, side), note=note)


def write_heatmap(flow: AttentionFlowMap, path_prefix: str) -> list[str]:
    """Emit the heatmap triplet: 255-level plain-text graymap (min-max
    normalized per map, constant maps render as 0), raw comma-separated
    values, and JSON metadata. Returns the written paths."""
    base = f"{path_prefix}_L{flow.layer}_q{flow.query_pos}"
    grid = flow.grid
    lo, hi = float(grid.min()), float(grid.max())
    if hi > lo:
        levels = np.round((grid - lo) / (hi - lo) * 255).astype(int)
    else:
        levels = np.zeros_like(grid, dtype=int)
    pgm_path = base + ".pgm"
    with open(pgm_path, "w", encoding="utf-8") as fh:
        fh.write("P2\n")
        fh.write(f"{grid.shape[1]} {grid.shape[0]}\n255\n")
        for row in levels:
            fh.write(" ".join(str(v) for v in row) + "\n")
    csv_path = base + ".csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        for row in grid:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    json_path = base + ".json"
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump({
            "layer": flow.layer,
            "query_pos": flow.query_pos,
            "grid_rows": grid.shape[0],
            "grid_cols": grid.shape[1],
            "min": lo,
            "max": hi,
            "normalization": flow.note,
        }, fh, indent=2)
        fh.write("\n")
    return [pgm_path, csv_path, json_path]
