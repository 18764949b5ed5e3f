"""Training loop: epoch plans mixing the two sample modes, AdamW-style
optimizer, warmup+cosine schedule, the two-stage skeleton, checkpointing
and metrics emission.

Determinism contract: given equal seeds and the same build, metrics logs
are byte-identical across runs. Everything random derives from the config
seed; batch reduction order is fixed; a non-finite loss aborts instead of
being skipped.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import MultimodalSample
from .errors import ConfigError, FormatError, NumericError
from .model import ModelConfig, init_parameters, run_sample
from .objective import BatchItem, LossBreakdown, LossVariant, ModeLabel, hybrid_loss
from .tensor import Tape, Tensor, backward

CHECKPOINT_MAGIC = b"VDEPCKPT"
CHECKPOINT_VERSION = 1

STAGE_DEFAULT_LR = {"pretrain": 1e-3, "sft": 2e-5}

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    alpha: float = 0.001
    data_ratio: float = 1.0
    loss_variant: str = "l2"
    offset: int = 1
    detach_target: bool = True
    batch_size: int = 8
    steps: int = 300
    epochs: int = 0          # 0 means "use steps"
    lr: float = 0.0          # 0 means the stage default
    warmup_fraction: float = 0.03
    weight_decay: float = 0.0
    # spike guard only: typical init-scale gradient norms are ~6, and a
    # tight clip throttles the vision circuit's lift-off
    grad_clip: float = 10.0
    seed: int = 0
    stage: str = "pretrain"
    half_split: bool = False

    def __post_init__(self):
        if not 0.0 <= self.data_ratio <= 1.0:
            raise ConfigError(f"data_ratio must be in [0, 1], got {self.data_ratio}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.lr < 0:
            raise ConfigError(f"lr must be positive (0 selects the stage default), "
                              f"got {self.lr}")
        if self.stage not in STAGE_DEFAULT_LR:
            raise ConfigError(f"stage must be one of {sorted(STAGE_DEFAULT_LR)}")
        if self.offset not in (0, 1):
            raise ConfigError(f"offset must be 0 or 1, got {self.offset}")
        try:
            LossVariant(self.loss_variant)
        except ValueError:
            raise ConfigError(
                f"loss_variant must be one of {[v.value for v in LossVariant]}") from None
        if self.half_split and self.batch_size % 2:
            raise ConfigError("half_split requires an even batch_size")

    @property
    def variant(self) -> LossVariant:
        return LossVariant(self.loss_variant)

    def resolved_lr(self) -> float:
        return self.lr if self.lr > 0 else STAGE_DEFAULT_LR[self.stage]


@dataclass
class EpochPlan:
    entries: list[tuple[int, ModeLabel]]

    def __len__(self) -> int:
        return len(self.entries)


def build_epoch_plan(n: int, ratio: float, rng: np.random.Generator) -> EpochPlan:
    """Every index once in text mode, plus round(ratio*n) distinct indices
    in image mode, shuffled together."""
    if n < 1:
        raise ConfigError("dataset must contain at least one sample")
    entries = [(i, ModeLabel.LLAVA) for i in range(n)]
    extra = int(round(ratio * n))
    if extra:
        chosen = rng.choice(n, size=extra, replace=False)
        entries += [(int(i), ModeLabel.VDEP) for i in chosen]
    order = rng.permutation(len(entries))
    return EpochPlan(entries=[entries[i] for i in order])


def build_half_split_plan(n: int, rng: np.random.Generator, batch_size: int) -> EpochPlan:
    """Strict compatibility mode: every batch is exactly half image-mode,
    half text-mode (each index appears once per mode per epoch)."""
    text_order = rng.permutation(n)
    image_order = rng.permutation(n)
    half = batch_size // 2
    entries: list[tuple[int, ModeLabel]] = []
    t = v = 0
    while t < n or v < n:
        for _ in range(half):
            if v < n:
                entries.append((int(image_order[v]), ModeLabel.VDEP))
                v += 1
        for _ in range(half):
            if t < n:
                entries.append((int(text_order[t]), ModeLabel.LLAVA))
                t += 1
    return EpochPlan(entries=entries)


def lr_schedule(step: int, total: int, lr: float, warmup_fraction: float) -> float:
    """Linear warmup to lr, then cosine decay to 0 at ``total``."""
    warmup = max(1, int(round(warmup_fraction * total)))
    if step < warmup:
        return lr * step / warmup
    if total <= warmup:
        return lr
    progress = (step - warmup) / (total - warmup)
    return lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for name in sorted(params):
        g = params[name].grad
        if g is not None:
            total += float((g * g).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for name in sorted(params):
            if params[name].grad is not None:
                params[name].grad *= factor
    return norm


def adam_step(params: dict[str, Tensor], state: OptimizerState, lr: float,
              weight_decay: float = 0.0) -> None:
    """Adaptive-moment update with decoupled weight decay; grads are
    consumed (reset to None) afterwards."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for name in sorted(params):
        p = params[name]
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        if weight_decay:
            update = update + weight_decay * p.data
        p.data -= lr * update
        p.grad = None


def train_step(batch: list[tuple[MultimodalSample, ModeLabel]],
               params: dict[str, Tensor], opt: OptimizerState,
               config: TrainConfig, model_config: ModelConfig,
               lr: float) -> LossBreakdown:
    """One optimization step over a batch of (sample, mode) pairs."""
    if not batch:
        raise ConfigError("train_step needs a non-empty batch")
    with Tape():
        items = []
        for sample, mode in batch:
            output, embeddings = run_sample(params, model_config, sample, mode)
            items.append(BatchItem(mode=mode, output=output, embeddings=embeddings,
                                   response_ids=sample.response_ids))
        breakdown = hybrid_loss(items, config.alpha, config.variant,
                                config.offset, config.detach_target)
        if not math.isfinite(breakdown.total):
            raise NumericError("non-finite training loss; aborting")
        if breakdown.total_node.requires_grad:
            backward(breakdown.total_node)
    clip_global_norm(params, config.grad_clip)
    adam_step(params, opt, lr, config.weight_decay)
    return breakdown


@dataclass
class StageResult:
    params: dict[str, Tensor]
    metrics: list[dict]
    snapshots: list[tuple[int, dict[str, np.ndarray]]]


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params.items()}


def run_stage(config: TrainConfig, model_config: ModelConfig,
              dataset: list[MultimodalSample],
              params: dict[str, Tensor] | None = None,
              snapshot_every: int = 0) -> StageResult:
    """Run one training stage.

    The pretrain stage uses the hybrid mode mix; the sft stage forces the
    text-only mix (ratio 0) and the sft learning-rate default, and
    requires initial parameters. ``snapshot_every`` > 0 additionally
    records parameter copies for diagnostics (always including step 0 and
    the final step).
    """
    if config.stage == "sft":
        if params is None:
            raise ConfigError("sft stage requires initial parameters (--init)")
        config = replace(config, data_ratio=0.0)
    if params is None:
        params = init_parameters(model_config, config.seed)
    n = len(dataset)
    if n < 1:
        raise ConfigError("dataset is empty")

    total_steps = config.steps
    lr_peak = config.resolved_lr()

    def plans():
        epoch = 0
        while True:
            rng = np.random.default_rng(np.random.SeedSequence(
                entropy=config.seed, spawn_key=(1, epoch)))
            if config.half_split:
                yield build_half_split_plan(n, rng, config.batch_size)
            else:
                yield build_epoch_plan(n, config.data_ratio, rng)
            epoch += 1

    if config.epochs > 0:
        plan_len = n + (n if config.half_split else int(round(config.data_ratio * n)))
        batches_per_epoch = max(1, math.ceil(plan_len / config.batch_size))
        total_steps = config.epochs * batches_per_epoch

    opt = OptimizerState()
    metrics: list[dict] = []
    snapshots: list[tuple[int, dict[str, np.ndarray]]] = []
    if snapshot_every > 0:
        snapshots.append((0, _snapshot(params)))

    plan_iter = plans()
    pending: list[tuple[int, ModeLabel]] = []
    for step in range(total_steps):
        while len(pending) < config.batch_size:
            pending.extend(next(plan_iter).entries)
        entries, pending = pending[:config.batch_size], pending[config.batch_size:]
        batch = [(dataset[i], mode) for i, mode in entries]
        lr = lr_schedule(step, total_steps, lr_peak, config.warmup_fraction)
        breakdown = train_step(batch, params, opt, config, model_config, lr)
        counts = {"llava": sum(1 for _, m in entries if m is ModeLabel.LLAVA),
                  "vdep": sum(1 for _, m in entries if m is ModeLabel.VDEP)}
        metrics.append({
            "step": step,
            "l_text": breakdown.l_text,
            "l_image": breakdown.l_image,
            "total": breakdown.total,
            "lr": lr,
            "mode_counts": counts,
        })
        if snapshot_every > 0 and ((step + 1) % snapshot_every == 0
                                   or step == total_steps - 1):
            snapshots.append((step + 1, _snapshot(params)))
    return StageResult(params=params, metrics=metrics, snapshots=snapshots)


def write_metrics(metrics: list[dict], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in metrics:
            fh.write(json.dumps(record) + "\n")


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

def save_checkpoint(params: dict[str, Tensor], model_config: ModelConfig,
                    train_config: TrainConfig, path: str) -> None:
    """Binary layout: magic, u32 version, u64 header length, JSON header
    (configs plus a lexicographically sorted tensor index with byte
    offsets), then concatenated little-endian float32 blobs."""
    names = sorted(params)
    index = []
    offset = 0
    blobs = []
    for name in names:
        arr = params[name].data.astype("<f4")
        blobs.append(arr.tobytes())
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = {
        "model_config": asdict(model_config),
        "train_config": asdict(train_config),
        "tensors": index,
        "blob_bytes": offset,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str):
    """Returns (params, model_config, train_config); values are upcast to
    float64 for compute but round-trip exactly through float32."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        try:
            header = json.loads(fh.read(header_len).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: corrupt checkpoint header: {exc}") from exc
        blob = fh.read(header["blob_bytes"])
    if len(blob) != header["blob_bytes"]:
        raise FormatError(f"{path}: truncated checkpoint blob")
    params: dict[str, Tensor] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
        params[entry["name"]] = Tensor(arr.astype(np.float64).reshape(shape),
                                       requires_grad=True)
    model_config = ModelConfig(**header["model_config"])
    train_config = TrainConfig(**header["train_config"])
    return params, model_config, train_config


def check_model_config(expected: ModelConfig, loaded: ModelConfig) -> None:
    """Raise ConfigError naming the first field that differs."""
    for name, value in asdict(expected).items():
        other = getattr(loaded, name)
        if other != value:
            raise ConfigError(
                f"checkpoint model config mismatch on '{name}': "
                f"expected {value}, checkpoint has {other}")
