"""Dual-axis attention detector over standardized sensor windows.

A window is augmented with a learned summary row (class token), pushed
through N identical blocks, and classified from the summary row. Each block
fuses two attention pathways (one mixing channels at fixed times, one
mixing times at fixed channels), then refines the result with a residual
two-layer convolution stack.

Parameters live in a flat path -> Tensor2 mapping so the optimizer and the
ablation machinery can address every weight by name.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor2
from .errors import ConfigError, ShapeError

__all__ = [
    "ModelConfig",
    "AblationMask",
    "parameter_shapes",
    "block_key",
    "sensor_attention",
    "time_attention",
    "fuse_block",
    "conv_refine_block",
    "forward",
    "forward_many",
    "predict_scores",
    "count_parameters",
    "save_checkpoint",
    "load_checkpoint",
    "FULL_MASK",
]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture sizes; defaults are the reference configuration."""

    channels: int = 6
    window_len: int = 15
    n_blocks: int = 7
    conv_mid: int = 60
    kernel_size: int = 3
    dropout: float = 0.2
    share_blocks: bool = False

    def __post_init__(self):
        if self.channels < 1 or self.window_len < 1:
            raise ConfigError("channels and window_len must be >= 1")
        if self.n_blocks < 1:
            raise ConfigError("n_blocks must be >= 1")
        if self.conv_mid < 1:
            raise ConfigError("conv_mid must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd and >= 1")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError("dropout must be in [0, 1)")

    @property
    def rows(self) -> int:
        """Row count of the augmented window: channels plus the token row."""
        return self.channels + 1


@dataclass(frozen=True)
class AblationMask:
    """Pathway switches. Disabled parts contribute nothing to the forward
    pass and their parameters receive no gradient."""

    use_sensor_attention: bool = True
    use_time_attention: bool = True
    use_conv: bool = True
    use_skip: bool = True
    use_plausibility_filter: bool = True

    def __post_init__(self):
        if not (self.use_sensor_attention or self.use_time_attention or self.use_conv):
            raise ConfigError(
                "mask disables every learnable pathway; the network would be constant"
            )

    def to_json(self) -> dict:
        return {
            "use_sensor_attention": self.use_sensor_attention,
            "use_time_attention": self.use_time_attention,
            "use_conv": self.use_conv,
            "use_skip": self.use_skip,
            "use_plausibility_filter": self.use_plausibility_filter,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AblationMask":
        return cls(**{k: bool(v) for k, v in obj.items()})


FULL_MASK = AblationMask()


def block_key(i: int, config: ModelConfig) -> str:
    return "block0" if config.share_blocks else f"block{i}"


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
    """Path -> shape for every learnable tensor of the architecture."""
    L = config.window_len
    rows = config.rows
    mid = config.conv_mid
    k = config.kernel_size
    shapes: dict[str, tuple[int, int]] = {"class_token": (1, L)}
    n_distinct = 1 if config.share_blocks else config.n_blocks
    for i in range(n_distinct):
        b = f"block{i}"
        shapes[f"{b}.sensor_attn.wq"] = (L, L)
        shapes[f"{b}.sensor_attn.wk"] = (L, L)
        shapes[f"{b}.sensor_attn.wv"] = (L, L)
        shapes[f"{b}.time_attn.wq"] = (rows, rows)
        shapes[f"{b}.time_attn.wk"] = (rows, rows)
        shapes[f"{b}.time_attn.wv"] = (rows, rows)
        shapes[f"{b}.sensor_proj.weight"] = (L, L)
        shapes[f"{b}.sensor_proj.bias"] = (1, L)
        shapes[f"{b}.time_proj.weight"] = (L, L)
        shapes[f"{b}.time_proj.bias"] = (1, L)
        shapes[f"{b}.fuse_norm.gain"] = (1, L)
        shapes[f"{b}.fuse_norm.shift"] = (1, L)
        shapes[f"{b}.conv1.weight"] = (mid, rows * k)
        shapes[f"{b}.conv1.bias"] = (mid, 1)
        shapes[f"{b}.conv2.weight"] = (rows, mid * k)
        shapes[f"{b}.conv2.bias"] = (rows, 1)
        shapes[f"{b}.conv_norm.gain"] = (1, L)
        shapes[f"{b}.conv_norm.shift"] = (1, L)
    shapes["head.weight"] = (1, L)
    shapes["head.bias"] = (1, 1)
    return shapes


def count_parameters(config: ModelConfig) -> int:
    return sum(r * c for r, c in parameter_shapes(config).values())


def sensor_attention(
    x: Tensor2,
    wq: Tensor2,
    wk: Tensor2,
    wv: Tensor2,
    tape: Tape | None = None,
) -> Tensor2:
    """Self-attention across rows (channels); mixes sensors at fixed times.

    The attention matrix is rows x rows; scaling uses the key length L.
    """
    q = ad.matmul(x, wq, tape)
    k = ad.matmul(x, wk, tape)
    v = ad.matmul(x, wv, tape)
    attn = ad.row_softmax(ad.matmul(q, ad.transpose(k, tape), tape),
                          math.sqrt(x.cols), tape)
    return ad.matmul(attn, v, tape)


def time_attention(
    x: Tensor2,
    wq: Tensor2,
    wk: Tensor2,
    wv: Tensor2,
    tape: Tape | None = None,
) -> Tensor2:
    """Self-attention across columns (time steps); mixes times at fixed
    channels. Implemented on the transposed window; the attention matrix is
    cols x cols and scaling uses the transposed key length (row count)."""
    xt = ad.transpose(x, tape)
    q = ad.matmul(xt, wq, tape)
    k = ad.matmul(xt, wk, tape)
    v = ad.matmul(xt, wv, tape)
    attn = ad.row_softmax(ad.matmul(q, ad.transpose(k, tape), tape),
                          math.sqrt(x.rows), tape)
    return ad.transpose(ad.matmul(attn, v, tape), tape)


def _project(a: Tensor2, params: dict, prefix: str, tape: Tape | None) -> Tensor2:
    out = ad.matmul(a, params[f"{prefix}.weight"], tape)
    return ad.add_row_bias(out, params[f"{prefix}.bias"], tape)


def fuse_block(
    x: Tensor2,
    params: dict[str, Tensor2],
    block: str,
    mask: AblationMask,
    tape: Tape | None = None,
) -> Tensor2:
    """Project each enabled attention pathway, sum with the skip input, and
    layer-normalize."""
    total: Tensor2 | None = None
    if mask.use_sensor_attention:
        a = sensor_attention(
            x,
            params[f"{block}.sensor_attn.wq"],
            params[f"{block}.sensor_attn.wk"],
            params[f"{block}.sensor_attn.wv"],
            tape,
        )
        total = _project(a, params, f"{block}.sensor_proj", tape)
    if mask.use_time_attention:
        a = time_attention(
            x,
            params[f"{block}.time_attn.wq"],
            params[f"{block}.time_attn.wk"],
            params[f"{block}.time_attn.wv"],
            tape,
        )
        proj = _project(a, params, f"{block}.time_proj", tape)
        total = proj if total is None else ad.add(total, proj, tape)
    if mask.use_skip:
        total = x if total is None else ad.add(total, x, tape)
    if total is None:
        # every input to the fusion is masked off; normalize a zero window
        total = Tensor2._result(np.zeros(x.shape), False)
    return ad.layer_norm(
        total,
        params[f"{block}.fuse_norm.gain"],
        params[f"{block}.fuse_norm.shift"],
        tape=tape,
    )


def conv_refine_block(
    z: Tensor2,
    params: dict[str, Tensor2],
    block: str,
    config: ModelConfig,
    mask: AblationMask,
    training: bool = False,
    rng: np.random.Generator | None = None,
    tape: Tape | None = None,
) -> Tensor2:
    """Residual conv stack: LN(Drop(conv2(relu(conv1(z)))) + z).

    Disabled by the mask as a whole (returns z unchanged); without skip the
    residual term is dropped but the stack still runs.
    """
    if not mask.use_conv:
        return z
    h = ad.conv1d(
        z,
        params[f"{block}.conv1.weight"],
        params[f"{block}.conv1.bias"],
        config.kernel_size,
        tape,
    )
    h = ad.relu(h, tape)
    h = ad.conv1d(
        h,
        params[f"{block}.conv2.weight"],
        params[f"{block}.conv2.bias"],
        config.kernel_size,
        tape,
    )
    h = ad.dropout(h, config.dropout, training, rng, tape)
    if mask.use_skip:
        h = ad.add(h, z, tape)
    return ad.layer_norm(
        h,
        params[f"{block}.conv_norm.gain"],
        params[f"{block}.conv_norm.shift"],
        tape=tape,
    )


def forward(
    window: np.ndarray | Tensor2,
    params: dict[str, Tensor2],
    config: ModelConfig,
    mask: AblationMask = FULL_MASK,
    training: bool = False,
    rng: np.random.Generator | None = None,
    tape: Tape | None = None,
) -> Tensor2:
    """One standardized C x L window -> 1x1 logit tensor."""
    x = window if isinstance(window, Tensor2) else Tensor2(window)
    if x.shape != (config.channels, config.window_len):
        raise ShapeError(
            f"window shape {x.shape} != "
            f"({config.channels}, {config.window_len})"
        )
    h = ad.concat_rows(x, params["class_token"], tape)
    for i in range(config.n_blocks):
        block = block_key(i, config)
        h = fuse_block(h, params, block, mask, tape)
        h = conv_refine_block(h, params, block, config, mask, training, rng, tape)
    token_row = ad.slice_rows(h, config.channels, config.rows, tape)
    logit = ad.matmul(params["head.weight"], ad.transpose(token_row, tape), tape)
    return ad.add(logit, params["head.bias"], tape)


def forward_many(
    windows: list[np.ndarray],
    params: dict[str, Tensor2],
    config: ModelConfig,
    mask: AblationMask = FULL_MASK,
    training: bool = False,
    rng: np.random.Generator | None = None,
    tape: Tape | None = None,
) -> Tensor2:
    """Stack per-window logits into a (B, 1) tensor on one tape."""
    logits = [
        forward(w, params, config, mask, training, rng, tape) for w in windows
    ]
    return ad.stack_rows(logits, tape)


def predict_scores(
    windows: list,
    params: dict[str, Tensor2],
    config: ModelConfig,
    mask: AblationMask = FULL_MASK,
) -> np.ndarray:
    """Eval-mode detection scores (sigmoid of the logit) per window.

    Accepts LabeledWindow objects or bare C x L arrays.
    """
    logits = np.empty(len(windows))
    for i, w in enumerate(windows):
        arr = w.values if hasattr(w, "values") else w
        logits[i] = forward(arr, params, config, mask).item()
    return ad.sigmoid_array(logits)


CHECKPOINT_FORMAT = "vitalguard-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(
    path: str | Path,
    params: dict[str, Tensor2],
    config: ModelConfig,
    mask: AblationMask = FULL_MASK,
) -> None:
    """JSON checkpoint; float64 values survive the round-trip bit-exactly
    because python repr/parse of doubles is lossless."""
    obj = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": {
            "channels": config.channels,
            "window_len": config.window_len,
            "n_blocks": config.n_blocks,
            "conv_mid": config.conv_mid,
            "kernel_size": config.kernel_size,
            "dropout": config.dropout,
            "share_blocks": config.share_blocks,
        },
        "mask": mask.to_json(),
        "params": {path_: t.data.tolist() for path_, t in params.items()},
    }
    with Path(path).open("w") as fh:
        json.dump(obj, fh)


def load_checkpoint(
    path: str | Path,
) -> tuple[dict[str, Tensor2], ModelConfig, AblationMask]:
    with Path(path).open() as fh:
        obj = json.load(fh)
    if obj.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: not a model checkpoint")
    if obj.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {obj.get('version')}")
    config = ModelConfig(**obj["config"])
    mask = AblationMask.from_json(obj["mask"])
    expected = parameter_shapes(config)
    params: dict[str, Tensor2] = {}
    for key, shape in expected.items():
        if key not in obj["params"]:
            raise ConfigError(f"{path}: checkpoint missing parameter {key!r}")
        t = Tensor2(obj["params"][key], requires_grad=True)
        if t.shape != shape:
            raise ConfigError(
                f"{path}: parameter {key!r} has shape {t.shape}, expected {shape}"
            )
        params[key] = t
    extra = set(obj["params"]) - set(expected)
    if extra:
        raise ConfigError(f"{path}: unexpected parameters {sorted(extra)}")
    return params, config, mask
