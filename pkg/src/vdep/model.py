"""Toy multimodal architecture.

Pipeline: patchifier -> tiny bidirectional vision encoder -> two-layer MLP
projector producing per-patch embeddings -> decoder-only causal
transformer over the assembled [bos, mode token, image patches, prompt,
response, eos] sequence. The decoder exposes final-layer hidden states
(post final layer-norm, pre LM head), logits, and every attention matrix
for diagnostics.

Parameters live in a flat name -> Tensor dict so the optimizer and the
checkpoint format can treat them uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import AUTO_IMAGE, BOS, EOS, IMAGE, VOCAB_SIZE, MultimodalSample
from .errors import ShapeError, UsageError
from .objective import ModeLabel
from .tensor import Tensor

MLP_RATIO = 4
LN_EPS = 1e-5
INIT_STD = 0.02


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    vocab_size: int = VOCAB_SIZE
    image_side: int = 16
    channels: int = 3
    patch_size: int = 4
    max_seq_len: int = 32
    projector_hidden: int = 0  # 0 means 2 * d_model
    vision_layers: int = 1

    def __post_init__(self):
        if self.image_side % self.patch_size != 0:
            raise ShapeError("image_side must be divisible by patch_size")
        if self.d_model % self.n_heads != 0:
            raise ShapeError("d_model must be divisible by n_heads")
        if self.projector_hidden == 0:
            self.projector_hidden = 2 * self.d_model

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_side ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.channels


@dataclass
class PatchGrid:
    patches: np.ndarray  # [n_patches, patch_dim]
    grid_rows: int
    grid_cols: int


@dataclass
class SequenceLayout:
    """Index map of one assembled sequence.

    Ordering is fixed: bos(0) < mode token(1) < image range < prompt range
    < response range < eos(last).
    """
    total_len: int
    mode_pos: int
    image_start: int
    image_stop: int
    prompt_start: int
    prompt_stop: int
    response_start: int
    response_stop: int

    @property
    def eos_pos(self) -> int:
        return self.total_len - 1


@dataclass
class ForwardOutput:
    hidden_states: Tensor          # [T, d_model], last block output (pre final norm)
    logits: Tensor                 # [T, vocab]
    attention: list[np.ndarray]    # per layer: [n_heads, T, T], row-stochastic
    layout: SequenceLayout | None


def patchify(image: np.ndarray, config: ModelConfig) -> PatchGrid:
    """Tile the image into non-overlapping patches in reading order."""
    side, ch, p = config.image_side, config.channels, config.patch_size
    if image.shape != (side, side, ch):
        raise ShapeError(f"image shape {image.shape} != ({side}, {side}, {ch})")
    g = config.grid_side
    rows = []
    for r in range(g):
        for c in range(g):
            rows.append(image[r * p:(r + 1) * p, c * p:(c + 1) * p, :].reshape(-1))
    return PatchGrid(patches=np.stack(rows), grid_rows=g, grid_cols=g)


def unpatchify(grid: PatchGrid, config: ModelConfig) -> np.ndarray:
    side, ch, p = config.image_side, config.channels, config.patch_size
    g = config.grid_side
    image = np.zeros((side, side, ch))
    for r in range(g):
        for c in range(g):
            patch = grid.patches[r * g + c].reshape(p, p, ch)
            image[r * p:(r + 1) * p, c * p:(c + 1) * p, :] = patch
    return image


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _block_specs(prefix: str, d: int):
    h = MLP_RATIO * d
    return [
        (f"{prefix}.norm1.gain", (d,), "gain"),
        (f"{prefix}.norm1.bias", (d,), "bias"),
        (f"{prefix}.attn.wq", (d, d), "weight"),
        (f"{prefix}.attn.bq", (d,), "bias"),
        (f"{prefix}.attn.wk", (d, d), "weight"),
        (f"{prefix}.attn.bk", (d,), "bias"),
        (f"{prefix}.attn.wv", (d, d), "weight"),
        (f"{prefix}.attn.bv", (d,), "bias"),
        (f"{prefix}.attn.wo", (d, d), "weight"),
        (f"{prefix}.attn.bo", (d,), "bias"),
        (f"{prefix}.norm2.gain", (d,), "gain"),
        (f"{prefix}.norm2.bias", (d,), "bias"),
        (f"{prefix}.mlp.w1", (d, h), "weight"),
        (f"{prefix}.mlp.b1", (h,), "bias"),
        (f"{prefix}.mlp.w2", (h, d), "weight"),
        (f"{prefix}.mlp.b2", (d,), "bias"),
    ]


def parameter_specs(config: ModelConfig):
    d = config.d_model
    specs = [
        ("vision.patch_embed.w", (config.patch_dim, d), "weight"),
        ("vision.patch_embed.b", (d,), "bias"),
        ("vision.pos_embed", (config.n_patches, d), "weight"),
    ]
    for i in range(config.vision_layers):
        specs += _block_specs(f"vision.block{i}", d)
    specs += [
        ("vision.final_norm.gain", (d,), "gain"),
        ("vision.final_norm.bias", (d,), "bias"),
        ("projector.fc1.w", (d, config.projector_hidden), "weight"),
        ("projector.fc1.b", (config.projector_hidden,), "bias"),
        ("projector.fc2.w", (config.projector_hidden, d), "weight"),
        ("projector.fc2.b", (d,), "bias"),
        ("decoder.tok_embed", (config.vocab_size, d), "weight"),
        ("decoder.pos_embed", (config.max_seq_len, d), "weight"),
    ]
    for i in range(config.n_layers):
        specs += _block_specs(f"decoder.block{i}", d)
    specs += [
        ("decoder.final_norm.gain", (d,), "gain"),
        ("decoder.final_norm.bias", (d,), "bias"),
        ("decoder.lm_head.w", (d, config.vocab_size), "weight"),
    ]
    return specs


def init_parameters(config: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Seeded init: weights 0.02 * standard normal, biases zero, gains one."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape, kind in parameter_specs(config):
        if kind == "weight":
            data = rng.standard_normal(shape) * INIT_STD
        elif kind == "bias":
            data = np.zeros(shape)
        else:
            data = np.ones(shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def parameter_count(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in parameter_specs(config))


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _transformer_block(x: Tensor, params: dict[str, Tensor], prefix: str,
                       n_heads: int, causal: bool):
    normed = T.layer_norm(x, params[f"{prefix}.norm1.gain"],
                          params[f"{prefix}.norm1.bias"], LN_EPS)
    q = T.add_rowvec(T.matmul(normed, params[f"{prefix}.attn.wq"]), params[f"{prefix}.attn.bq"])
    k = T.add_rowvec(T.matmul(normed, params[f"{prefix}.attn.wk"]), params[f"{prefix}.attn.bk"])
    v = T.add_rowvec(T.matmul(normed, params[f"{prefix}.attn.wv"]), params[f"{prefix}.attn.bv"])
    merged, weights = T.multi_head_attention(q, k, v, n_heads, causal)
    attn_out = T.add_rowvec(T.matmul(merged, params[f"{prefix}.attn.wo"]),
                            params[f"{prefix}.attn.bo"])
    x = T.add(x, attn_out)
    normed2 = T.layer_norm(x, params[f"{prefix}.norm2.gain"],
                           params[f"{prefix}.norm2.bias"], LN_EPS)
    hid = T.gelu(T.add_rowvec(T.matmul(normed2, params[f"{prefix}.mlp.w1"]),
                              params[f"{prefix}.mlp.b1"]))
    mlp_out = T.add_rowvec(T.matmul(hid, params[f"{prefix}.mlp.w2"]),
                           params[f"{prefix}.mlp.b2"])
    return T.add(x, mlp_out), weights


def encode_and_project(patches: PatchGrid, params: dict[str, Tensor],
                       config: ModelConfig) -> Tensor:
    """Patch rows -> vision encoder -> projector; the [n_patches, d_model]
    result is recomputed from current parameters on every call."""
    if patches.patches.shape[1] != config.patch_dim:
        raise ShapeError(
            f"patch width {patches.patches.shape[1]} != {config.patch_dim}")
    x = Tensor(patches.patches)
    x = T.add_rowvec(T.matmul(x, params["vision.patch_embed.w"]),
                     params["vision.patch_embed.b"])
    x = T.add(x, params["vision.pos_embed"])
    for i in range(config.vision_layers):
        x, _ = _transformer_block(x, params, f"vision.block{i}",
                                  config.n_heads, causal=False)
    x = T.layer_norm(x, params["vision.final_norm.gain"],
                     params["vision.final_norm.bias"], LN_EPS)
    h = T.gelu(T.add_rowvec(T.matmul(x, params["projector.fc1.w"]),
                            params["projector.fc1.b"]))
    return T.add_rowvec(T.matmul(h, params["projector.fc2.w"]),
                        params["projector.fc2.b"])


def assemble_sequence(sample: MultimodalSample, embeddings: Tensor, mode: ModeLabel,
                      params: dict[str, Tensor], config: ModelConfig):
    """Build the decoder input matrix and its layout.

    Sequence: [bos, mode token, image embeddings, prompt, response, eos].
    The two modes differ only in the embedding row at the mode-token
    index (<image> for text mode, <auto_image> for image mode).
    """
    n = embeddings.shape[0]
    p_len, r_len = len(sample.prompt_ids), len(sample.response_ids)
    total = 2 + n + p_len + r_len + 1
    if total > config.max_seq_len:
        raise ShapeError(f"sequence length {total} exceeds max_seq_len {config.max_seq_len}")
    mode_id = AUTO_IMAGE if mode is ModeLabel.VDEP else IMAGE
    pre = T.embedding_lookup(params["decoder.tok_embed"], [BOS, mode_id])
    post = T.embedding_lookup(params["decoder.tok_embed"],
                              list(sample.prompt_ids) + list(sample.response_ids) + [EOS])
    seq = T.concat_rows([pre, embeddings, post])
    inputs = T.add(seq, T.slice_rows(params["decoder.pos_embed"], 0, total))
    layout = SequenceLayout(
        total_len=total,
        mode_pos=1,
        image_start=2,
        image_stop=2 + n,
        prompt_start=2 + n,
        prompt_stop=2 + n + p_len,
        response_start=2 + n + p_len,
        response_stop=2 + n + p_len + r_len,
    )
    return inputs, layout


def forward(inputs: Tensor, layout: SequenceLayout | None,
            params: dict[str, Tensor], config: ModelConfig) -> ForwardOutput:
    """Causal decoder pass: pre-norm blocks, final layer-norm, LM head.

    ``hidden_states`` is the last block's residual-stream output, before
    the final layer-norm (the usual hidden-state convention). Taking it
    pre-norm matters: post-norm rows all share the gain vector's scale,
    which would couple the alignment loss to the text path globally.
    """
    if inputs.shape[1] != config.d_model:
        raise ShapeError(f"input width {inputs.shape[1]} != d_model {config.d_model}")
    x = inputs
    attention = []
    for i in range(config.n_layers):
        x, weights = _transformer_block(x, params, f"decoder.block{i}",
                                        config.n_heads, causal=True)
        attention.append(weights)
    normed = T.layer_norm(x, params["decoder.final_norm.gain"],
                          params["decoder.final_norm.bias"], LN_EPS)
    logits = T.matmul(normed, params["decoder.lm_head.w"])
    return ForwardOutput(hidden_states=x, logits=logits,
                         attention=attention, layout=layout)


def run_sample(params: dict[str, Tensor], config: ModelConfig,
               sample: MultimodalSample, mode: ModeLabel):
    """Full per-sample pipeline; returns (ForwardOutput, embeddings)."""
    grid = patchify(sample.image, config)
    embeddings = encode_and_project(grid, params, config)
    inputs, layout = assemble_sequence(sample, embeddings, mode, params, config)
    return forward(inputs, layout, params, config), embeddings


def greedy_decode(params: dict[str, Tensor], config: ModelConfig,
                  sample: MultimodalSample, max_new: int = 5,
                  mode: ModeLabel = ModeLabel.LLAVA) -> list[int]:
    """Greedy caption decode conditioned on [bos, mode, image, prompt]."""
    grid = patchify(sample.image, config)
    embeddings = encode_and_project(grid, params, config)
    generated: list[int] = []
    for _ in range(max_new):
        ids_pre = [BOS, AUTO_IMAGE if mode is ModeLabel.VDEP else IMAGE]
        ids_post = list(sample.prompt_ids) + generated
        pre = T.embedding_lookup(params["decoder.tok_embed"], ids_pre)
        post = T.embedding_lookup(params["decoder.tok_embed"], ids_post)
        seq = T.concat_rows([pre, embeddings, post])
        total = seq.shape[0]
        if total >= config.max_seq_len:
            raise UsageError("decode exceeded max_seq_len")
        inputs = T.add(seq, T.slice_rows(params["decoder.pos_embed"], 0, total))
        out = forward(inputs, None, params, config)
        generated.append(int(np.argmax(out.logits.data[-1])))
    return generated
