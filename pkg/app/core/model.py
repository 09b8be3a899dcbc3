"""
Audio Spectrogram Transformer: patch embedding, positional table, [CLS]
token, pre-norm encoder blocks, final layer norm and a linear head.

Parameters live in an ASTParams mapping with canonical names:

    patch_proj.w [E x P]   patch_proj.b [E]
    pos_embed    [(N+1) x E]           (row 0 is the [CLS] slot)
    cls          [E]
    blocks.{i}.ln1.g/.b   blocks.{i}.qkv.w [3E x E] /.b
    blocks.{i}.proj.w/.b  blocks.{i}.ln2.g/.b
    blocks.{i}.mlp1.w [H x E] /.b   blocks.{i}.mlp2.w [E x H] /.b
    final_ln.g/.b
    head.w [C x E]  head.b [C]

Linear weights are laid out [out x in], as in vision-transformer checkpoints.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
from scipy.stats import truncnorm

from app.core import tensor as T
from app.core.errors import ConfigurationError, GeometryError, NumericError
from app.core.frontend import Spectrogram
from app.core.patchify import extract_patches
from app.core.schemas import ASTConfig, PositionalMode
from app.core.tensor import Tensor

logger = logging.getLogger(__name__)

BLOCK_TENSORS = (
    "ln1.g", "ln1.b", "qkv.w", "qkv.b", "proj.w", "proj.b",
    "ln2.g", "ln2.b", "mlp1.w", "mlp1.b", "mlp2.w", "mlp2.b",
)
INIT_STD = 0.02
LN_EPS = 1e-6


def param_shapes(config: ASTConfig) -> Dict[str, Tuple[int, ...]]:
    E, P, C = config.embed_dim, config.grid.patch_size, config.num_classes
    H = config.mlp_ratio * E
    shapes: Dict[str, Tuple[int, ...]] = {
        "patch_proj.w": (E, P),
        "patch_proj.b": (E,),
        "pos_embed": (config.num_patches + 1, E),
        "cls": (E,),
    }
    for i in range(config.depth):
        p = f"blocks.{i}."
        shapes.update({
            p + "ln1.g": (E,), p + "ln1.b": (E,),
            p + "qkv.w": (3 * E, E), p + "qkv.b": (3 * E,),
            p + "proj.w": (E, E), p + "proj.b": (E,),
            p + "ln2.g": (E,), p + "ln2.b": (E,),
            p + "mlp1.w": (H, E), p + "mlp1.b": (H,),
            p + "mlp2.w": (E, H), p + "mlp2.b": (E,),
        })
    shapes.update({"final_ln.g": (E,), "final_ln.b": (E,), "head.w": (C, E), "head.b": (C,)})
    return shapes


@dataclass
class ASTParams:
    """Named parameter set. Iteration order is the canonical order of param_shapes."""
    tensors: Dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __setitem__(self, name: str, value: Tensor) -> None:
        self.tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def arrays(self) -> Dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray], requires_grad: bool = False) -> "ASTParams":
        return cls({k: Tensor(np.array(v), requires_grad=requires_grad) for k, v in arrays.items()})

    def copy(self, requires_grad: Optional[bool] = None) -> "ASTParams":
        return ASTParams({
            k: Tensor(v.data.copy(), requires_grad=v.requires_grad if requires_grad is None else requires_grad)
            for k, v in self.tensors.items()
        })

    def astype(self, dtype) -> "ASTParams":
        return ASTParams({k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad) for k, v in self.tensors.items()})

    def block(self, i: int) -> Dict[str, Tensor]:
        prefix = f"blocks.{i}."
        return {name: self.tensors[prefix + name] for name in BLOCK_TENSORS}

    def num_parameters(self) -> int:
        return int(sum(v.data.size for v in self.tensors.values()))

    def validate(self, config: ASTConfig) -> None:
        """Check names, shapes and finiteness against a configuration."""
        expected = param_shapes(config)
        missing = sorted(set(expected) - set(self.tensors))
        extra = sorted(set(self.tensors) - set(expected))
        wrong = sorted(k for k in expected if k in self.tensors and self.tensors[k].shape != expected[k])
        if missing or extra or wrong:
            details = []
            if missing:
                details.append(f"missing {missing}")
            if extra:
                details.append(f"unexpected {extra}")
            for k in wrong:
                details.append(f"{k}: {self.tensors[k].shape} != {expected[k]}")
            raise ConfigurationError("parameters do not match config: " + "; ".join(details))
        bad = [k for k, v in self.tensors.items() if not np.all(np.isfinite(v.data))]
        if bad:
            raise NumericError(f"non-finite values in {bad}")


def trunc_normal(shape: Tuple[int, ...], rng: np.random.Generator, std: float = INIT_STD) -> np.ndarray:
    """Truncated normal at +-2 std."""
    return truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng).astype(np.float32)


def init_params(config: ASTConfig, rng: Union[np.random.Generator, int]) -> ASTParams:
    """Fresh parameters: truncated-normal weights, cls and positions; zero biases; unit LN gains."""
    rng = np.random.default_rng(rng) if isinstance(rng, int) else rng
    arrays: Dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".g"):
            arrays[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(".b"):
            arrays[name] = np.zeros(shape, dtype=np.float32)
        else:
            arrays[name] = trunc_normal(shape, rng)
    logger.debug(f"initialised {len(arrays)} tensors for embed_dim={config.embed_dim} depth={config.depth}")
    return ASTParams.from_arrays(arrays)


def init_head(config: ASTConfig, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    return {
        "head.w": trunc_normal((config.num_classes, config.embed_dim), rng),
        "head.b": np.zeros(config.num_classes, dtype=np.float32),
    }


# ---------------------------------------------------------------------------
# Forward pieces
# ---------------------------------------------------------------------------

def embed(patches: Union[Tensor, np.ndarray], params: ASTParams) -> Tensor:
    """
    [N x P] (or [B x N x P]) patches -> [(N+1) x E] tokens (or batched).
    Row 0 is cls + pos_embed[0]; row i+1 is the projected patch i + pos_embed[i+1].
    """
    x = patches if isinstance(patches, Tensor) else Tensor(patches, dtype=params["patch_proj.w"].dtype)
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    B, N, P = x.shape
    w, pos = params["patch_proj.w"], params["pos_embed"]
    if w.shape[1] != P:
        raise ConfigurationError(f"patch size {P} does not match patch_proj.w {w.shape}")
    if pos.shape[0] != N + 1:
        raise ConfigurationError(f"{N} patches need {N + 1} positional rows, pos_embed has {pos.shape[0]}")
    E = w.shape[0]
    tokens = T.linear(x, w, params["patch_proj.b"])
    cls = T.broadcast_to(T.reshape(params["cls"], (1, 1, E)), (B, 1, E))
    out = T.add(T.concat([cls, tokens], axis=1), pos)
    return T.reshape(out, (N + 1, E)) if squeeze else out


def encoder_block(
    x: Tensor,
    block: Dict[str, Tensor],
    heads: int,
    attention_sink: Optional[List[np.ndarray]] = None,
) -> Tensor:
    """Pre-norm block: x + MHSA(LN(x)), then x + MLP(LN(x)). Accepts [n x d] or [B x n x d]."""
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    B, n, d = x.shape
    dh = d // heads

    h = T.layer_norm(x, block["ln1.g"], block["ln1.b"], LN_EPS)
    qkv = T.linear(h, block["qkv.w"], block["qkv.b"])
    qkv = T.transpose(T.reshape(qkv, (B, n, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    if attention_sink is not None:
        attention_sink.append(attn.data.copy())
    ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (B, n, d))
    x = T.add(x, T.linear(ctx, block["proj.w"], block["proj.b"]))

    h = T.layer_norm(x, block["ln2.g"], block["ln2.b"], LN_EPS)
    h = T.gelu(T.linear(h, block["mlp1.w"], block["mlp1.b"]))
    x = T.add(x, T.linear(h, block["mlp2.w"], block["mlp2.b"]))
    return T.reshape(x, (n, d)) if squeeze else x


def encode(tokens: Tensor, params: ASTParams, config: ASTConfig,
           attention_sink: Optional[List[np.ndarray]] = None) -> Tensor:
    x = tokens
    for i in range(config.depth):
        x = encoder_block(x, params.block(i), config.heads, attention_sink)
    return T.layer_norm(x, params["final_ln.g"], params["final_ln.b"], LN_EPS)


def logits_batch(batch: np.ndarray, params: ASTParams, config: ASTConfig,
                 attention_sink: Optional[List[np.ndarray]] = None) -> Tensor:
    """[B x frames x mels] normalised spectrograms -> [B x C] logits."""
    batch = np.asarray(batch)
    if batch.ndim != 3:
        raise ConfigurationError(f"expected a [B x frames x mels] batch, got shape {batch.shape}")
    patches = extract_patches(batch, config.grid)
    x = encode(embed(patches, params), params, config, attention_sink)
    cls_out = x[:, 0, :]
    return T.linear(cls_out, params["head.w"], params["head.b"])


def forward_batch(batch: np.ndarray, params: ASTParams, config: ASTConfig) -> Tensor:
    """Scores per sample: sigmoid probabilities when multi-label, otherwise raw logits."""
    logits = logits_batch(batch, params, config)
    return T.sigmoid(logits) if config.multi_label else logits


def forward(s: Union[Spectrogram, np.ndarray], params: ASTParams, config: ASTConfig) -> Tensor:
    values = s.values if isinstance(s, Spectrogram) else np.asarray(s)
    scores = forward_batch(values[None], params, config)
    return T.reshape(scores, (config.num_classes,))


def predict_scores(batch: np.ndarray, params: ASTParams, config: ASTConfig, chunk: int = 32) -> np.ndarray:
    """Inference without a tape, in chunks. Single-label scores are softmax probabilities."""
    out = []
    for start in range(0, len(batch), chunk):
        scores = forward_batch(batch[start:start + chunk], params, config).data
        if not config.multi_label:
            scores = T.softmax(Tensor(scores), axis=-1).data
        out.append(scores)
    if not out:
        return np.zeros((0, config.num_classes), dtype=np.float32)
    return np.concatenate(out).astype(np.float32)


# ---------------------------------------------------------------------------
# Variable input length
# ---------------------------------------------------------------------------

def resize_positional(
    params: ASTParams,
    old_grid: Tuple[int, int],
    new_grid: Tuple[int, int],
    mode: PositionalMode = "bilinear",
) -> ASTParams:
    """
    Re-grid pos_embed rows 1..N from old_grid (n_f, n_t) to new_grid, keeping
    row 0. Everything else is shared with the input parameter set.
    """
    from app.core.vit_adapt import adapt_grid

    if min(old_grid) < 1 or min(new_grid) < 1:
        raise GeometryError(f"invalid grids {old_grid} -> {new_grid}")
    pos = params["pos_embed"].data
    if pos.shape[0] != old_grid[0] * old_grid[1] + 1:
        raise GeometryError(f"pos_embed has {pos.shape[0]} rows, grid {old_grid} needs {old_grid[0] * old_grid[1] + 1}")
    if tuple(old_grid) == tuple(new_grid):
        return params
    table = pos[1:].reshape(old_grid[0], old_grid[1], -1)
    resized = adapt_grid(table, new_grid[0], new_grid[1], mode).reshape(new_grid[0] * new_grid[1], -1)
    out = ASTParams(dict(params.tensors))
    out["pos_embed"] = Tensor(np.concatenate([pos[:1], resized]).astype(pos.dtype))
    logger.info(f"resized positional table {old_grid} -> {new_grid} ({mode})")
    return out


def resize_for_config(params: ASTParams, old: ASTConfig, new: ASTConfig, mode: PositionalMode = "bilinear") -> ASTParams:
    if old.grid != new.grid:
        raise ConfigurationError("resizing across patch shapes changes patch_proj; only the frame count may differ")
    return resize_positional(params, old.grid_shape, new.grid_shape, mode)
