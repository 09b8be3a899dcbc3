"""
Vision transformer -> AST checkpoint surgery.

Source tensors use the usual vision-transformer naming:

    patch_embed.proj.weight [E x 3 x p x p]   patch_embed.proj.bias [E]
    cls_token [1 x 1 x E]   dist_token [1 x 1 x E] (DeiT only)
    pos_embed [1 x (n_special + g*g) x E]
    blocks.{i}.norm1 / attn.qkv / attn.proj / norm2 / mlp.fc1 / mlp.fc2  (.weight/.bias)
    norm.weight / norm.bias   head.weight / head.bias

Adaptation:
  * the 3-channel patch kernel is averaged over channels and flattened;
  * the g x g positional grid is cut (centered) along frequency and
    interpolated along time to the AST grid; the [CLS] positional row is reused;
  * DeiT's two special tokens are averaged into one [CLS] token;
  * encoder blocks are copied byte-for-byte; the head is re-initialised.
"""

import logging
import math
import re
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np

from app.core.checkpoint import Container, read_container, write_container
from app.core.errors import AdaptationError
from app.core.model import ASTParams, init_head, param_shapes, trunc_normal
from app.core.schemas import AdaptationReport, AdaptMode, ASTConfig, PositionalMode, TensorChange

logger = logging.getLogger(__name__)

BLOCK_NAME_MAP = {
    "norm1.weight": "ln1.g", "norm1.bias": "ln1.b",
    "attn.qkv.weight": "qkv.w", "attn.qkv.bias": "qkv.b",
    "attn.proj.weight": "proj.w", "attn.proj.bias": "proj.b",
    "norm2.weight": "ln2.g", "norm2.bias": "ln2.b",
    "mlp.fc1.weight": "mlp1.w", "mlp.fc1.bias": "mlp1.b",
    "mlp.fc2.weight": "mlp2.w", "mlp.fc2.bias": "mlp2.b",
}
BLOCK_RE = re.compile(r"^blocks\.(\d+)\.(.+)$")


@dataclass
class ViTCheckpoint:
    tensors: Dict[str, np.ndarray]
    metadata: Dict[str, object] = field(default_factory=dict)

    @property
    def kernel(self) -> np.ndarray:
        return self.tensors["patch_embed.proj.weight"]

    @property
    def embed_dim(self) -> int:
        return int(self.kernel.shape[0])

    @property
    def patch(self) -> int:
        return int(self.kernel.shape[-1])

    @property
    def depth(self) -> int:
        ids = {int(m.group(1)) for m in map(BLOCK_RE.match, self.tensors) if m}
        return max(ids) + 1 if ids else 0

    @property
    def n_special(self) -> int:
        return 2 if "dist_token" in self.tensors else 1

    @property
    def pos_rows(self) -> np.ndarray:
        return self.tensors["pos_embed"].reshape(-1, self.embed_dim)

    @property
    def grid(self) -> int:
        n = self.pos_rows.shape[0] - self.n_special
        g = int(round(math.sqrt(n)))
        if g * g != n or g < 1:
            raise AdaptationError(f"pos_embed has {n} grid rows, which is not a square")
        return g

    def validate(self) -> None:
        required = ["patch_embed.proj.weight", "patch_embed.proj.bias", "cls_token", "pos_embed", "norm.weight", "norm.bias"]
        missing = [k for k in required if k not in self.tensors]
        if missing:
            raise AdaptationError(f"source checkpoint is missing {missing}")
        if self.kernel.ndim != 4 or self.kernel.shape[1] != 3:
            raise AdaptationError(f"patch_embed.proj.weight must be [E x 3 x p x p], got {list(self.kernel.shape)}")
        _ = self.grid


# ---------------------------------------------------------------------------
# Elementary operations
# ---------------------------------------------------------------------------

def average_channels(kernel: np.ndarray, reduction: Literal["mean", "sum"] = "mean") -> np.ndarray:
    """
    [E x 3 x p x p] -> [E x p*p]. The mean kernel on a mono input equals
    the original kernel on a 3-channel replica scaled by 1/3; the sum kernel
    matches the unscaled replica.
    """
    kernel = np.asarray(kernel)
    if kernel.ndim != 4 or kernel.shape[1] != 3:
        raise AdaptationError(f"expected a 3-channel kernel [E x 3 x p x p], got {list(kernel.shape)}")
    reduced = kernel.mean(axis=1) if reduction == "mean" else kernel.sum(axis=1)
    return reduced.reshape(kernel.shape[0], -1).astype(kernel.dtype)


def _coords(src: int, dst: int) -> np.ndarray:
    """Align-corners sample positions; a single output sits at the center."""
    if dst == 1:
        return np.array([(src - 1) / 2.0])
    return np.arange(dst) * (src - 1) / (dst - 1)


def _resample_axis(arr: np.ndarray, axis: int, dst: int, mode: PositionalMode) -> np.ndarray:
    src = arr.shape[axis]
    if src == dst:
        return arr
    c = _coords(src, dst)
    if mode == "nearest":
        idx = np.clip(np.floor(c + 0.5).astype(int), 0, src - 1)
        return np.take(arr, idx, axis=axis)
    lo = np.clip(np.floor(c).astype(int), 0, src - 1)
    hi = np.minimum(lo + 1, src - 1)
    shape = [1] * arr.ndim
    shape[axis] = dst
    frac = (c - lo).reshape(shape)
    a, b = np.take(arr, lo, axis=axis), np.take(arr, hi, axis=axis)
    out = a + (b - a) * frac
    return np.clip(out, np.minimum(a, b), np.maximum(a, b))


def frequency_cut_offset(g_f: int, n_f: int) -> int:
    return (g_f - n_f) // 2 if n_f <= g_f else 0


def adapt_grid(pos: np.ndarray, n_f: int, n_t: int, mode: PositionalMode = "bilinear") -> np.ndarray:
    """
    [g_f x g_t x E] positional grid -> [n_f x n_t x E].

    Frequency (first axis): centered cut when n_f <= g_f, interpolation otherwise.
    Time (second axis): align-corners interpolation to n_t.
    """
    pos = np.asarray(pos)
    if pos.ndim != 3 or min(pos.shape[:2]) < 1:
        raise AdaptationError(f"positional grid must be [g x g x E], got {list(pos.shape)}")
    if n_f < 1 or n_t < 1:
        raise AdaptationError(f"target grid must be positive, got {n_f}x{n_t}")
    if mode not in ("bilinear", "nearest"):
        raise AdaptationError(f"unknown interpolation mode {mode!r}")
    work = pos.astype(np.float64)
    g_f = pos.shape[0]
    if n_f <= g_f:
        off = frequency_cut_offset(g_f, n_f)
        work = work[off:off + n_f]
    else:
        work = _resample_axis(work, 0, n_f, mode)
    work = _resample_axis(work, 1, n_t, mode)
    return np.ascontiguousarray(work.astype(pos.dtype))


def merge_cls(cls_a: np.ndarray, cls_b: Optional[np.ndarray] = None) -> np.ndarray:
    """Average two special tokens into one; a lone token passes through."""
    cls_a = np.asarray(cls_a)
    if cls_b is None:
        return cls_a.copy()
    cls_b = np.asarray(cls_b)
    if cls_a.shape != cls_b.shape:
        raise AdaptationError(f"special tokens differ in shape: {cls_a.shape} vs {cls_b.shape}")
    return ((cls_a.astype(np.float64) + cls_b) / 2.0).astype(cls_a.dtype)


# ---------------------------------------------------------------------------
# Whole-checkpoint adaptation
# ---------------------------------------------------------------------------

def _check_compatible(src: ViTCheckpoint, target: ASTConfig) -> None:
    offending: List[str] = []
    E = target.embed_dim
    if src.embed_dim != E:
        offending.append(f"patch_embed.proj.weight (embed {src.embed_dim} != {E})")
    if src.patch != target.grid.patch_f or src.patch != target.grid.patch_t:
        offending.append(f"patch_embed.proj.weight (patch {src.patch}x{src.patch} != "
                         f"{target.grid.patch_f}x{target.grid.patch_t})")
    if src.depth != target.depth:
        offending.append(f"blocks.* (depth {src.depth} != {target.depth})")
    heads = src.metadata.get("heads")
    if heads is not None and int(heads) != target.heads:
        offending.append(f"blocks.*.attn (heads {heads} != {target.heads})")
    expected = param_shapes(target)
    for name, arr in src.tensors.items():
        m = BLOCK_RE.match(name)
        if not m or m.group(2) not in BLOCK_NAME_MAP:
            continue
        dst = f"blocks.{m.group(1)}.{BLOCK_NAME_MAP[m.group(2)]}"
        if dst in expected and tuple(arr.shape) != expected[dst]:
            offending.append(f"{name} ({list(arr.shape)} != {list(expected[dst])})")
    for i in range(min(src.depth, target.depth)):
        for s_name in BLOCK_NAME_MAP:
            if f"blocks.{i}.{s_name}" not in src.tensors:
                offending.append(f"blocks.{i}.{s_name} (missing)")
    if offending:
        raise AdaptationError("source checkpoint does not fit the target model: " + "; ".join(offending))


def adapt_checkpoint(
    src: ViTCheckpoint,
    target: ASTConfig,
    mode: AdaptMode = "bilinear",
    rng: Union[np.random.Generator, int] = 0,
) -> Tuple[ASTParams, AdaptationReport]:
    rng = np.random.default_rng(rng) if isinstance(rng, int) else rng
    src.validate()
    _check_compatible(src, target)
    E = target.embed_dim
    n_f, n_t = target.grid_shape
    g = src.grid
    ns = src.n_special
    changes: List[TensorChange] = []
    out: Dict[str, np.ndarray] = {}

    kernel = src.kernel
    out["patch_proj.w"] = average_channels(kernel).astype(np.float32)
    changes.append(TensorChange(source_name="patch_embed.proj.weight", target_name="patch_proj.w",
                                before=list(kernel.shape), after=list(out["patch_proj.w"].shape),
                                action="channel-average"))
    out["patch_proj.b"] = np.array(src.tensors["patch_embed.proj.bias"], dtype=np.float32)
    changes.append(TensorChange(source_name="patch_embed.proj.bias", target_name="patch_proj.b",
                                before=[E], after=[E], action="copy"))

    rows = src.pos_rows
    grid = rows[ns:].reshape(g, g, E)
    if mode == "reinit":
        body = trunc_normal((n_f * n_t, E), rng)
        action = "reinitialise"
    else:
        body = adapt_grid(grid, n_f, n_t, mode).reshape(n_f * n_t, E)
        action = f"cut+{mode}"
    out["pos_embed"] = np.concatenate([rows[:1], body]).astype(np.float32)
    changes.append(TensorChange(source_name="pos_embed", target_name="pos_embed",
                                before=list(rows.shape), after=list(out["pos_embed"].shape), action=action))

    cls = src.tensors["cls_token"].reshape(E)
    dist = src.tensors["dist_token"].reshape(E) if ns == 2 else None
    out["cls"] = merge_cls(cls, dist).astype(np.float32)
    changes.append(TensorChange(source_name="cls_token" + ("+dist_token" if dist is not None else ""),
                                target_name="cls", before=[E], after=[E],
                                action="average" if dist is not None else "copy"))

    for i in range(target.depth):
        for s_name, t_name in BLOCK_NAME_MAP.items():
            arr = src.tensors[f"blocks.{i}.{s_name}"]
            out[f"blocks.{i}.{t_name}"] = arr if arr.dtype == np.float32 else arr.astype(np.float32)
    changes.append(TensorChange(source_name="blocks.*", target_name="blocks.*", before=None,
                                after=[target.depth], action="copy"))

    out["final_ln.g"] = np.array(src.tensors["norm.weight"], dtype=np.float32)
    out["final_ln.b"] = np.array(src.tensors["norm.bias"], dtype=np.float32)
    out.update(init_head(target, rng))
    src_head = src.tensors.get("head.weight")
    changes.append(TensorChange(source_name="head.weight" if src_head is not None else None, target_name="head.w",
                                before=list(src_head.shape) if src_head is not None else None,
                                after=[target.num_classes, E], action="reinitialise"))

    ordered = {name: out[name] for name in param_shapes(target)}
    params = ASTParams.from_arrays(ordered)
    params.validate(target)
    report = AdaptationReport(
        mode=mode, source_grid=g, target_grid=(n_f, n_t),
        cut_offset=frequency_cut_offset(g, n_f), special_tokens=ns, changes=changes,
    )
    logger.info(f"adapted {g}x{g}+{ns} vision checkpoint to {n_f}x{n_t} grid ({mode})")
    return params, report


# ---------------------------------------------------------------------------
# Synthetic stand-ins
# ---------------------------------------------------------------------------

def synth_vit_checkpoint(
    embed_dim: int = 768,
    depth: int = 12,
    heads: int = 12,
    grid: int = 24,
    patch: int = 16,
    n_special: int = 2,
    mlp_ratio: int = 4,
    num_classes: int = 1000,
    seed: int = 0,
) -> ViTCheckpoint:
    """A randomly filled ViT/DeiT-shaped checkpoint (no ImageNet training involved)."""
    rng = np.random.default_rng(seed)
    E, H = embed_dim, mlp_ratio * embed_dim

    def w(*shape):
        return trunc_normal(shape, rng)

    t: Dict[str, np.ndarray] = {
        "patch_embed.proj.weight": w(E, 3, patch, patch),
        "patch_embed.proj.bias": w(E),
        "cls_token": w(1, 1, E),
        "pos_embed": w(1, n_special + grid * grid, E),
    }
    if n_special == 2:
        t["dist_token"] = w(1, 1, E)
    for i in range(depth):
        p = f"blocks.{i}."
        t.update({
            p + "norm1.weight": 1.0 + w(E), p + "norm1.bias": w(E),
            p + "attn.qkv.weight": w(3 * E, E), p + "attn.qkv.bias": w(3 * E),
            p + "attn.proj.weight": w(E, E), p + "attn.proj.bias": w(E),
            p + "norm2.weight": 1.0 + w(E), p + "norm2.bias": w(E),
            p + "mlp.fc1.weight": w(H, E), p + "mlp.fc1.bias": w(H),
            p + "mlp.fc2.weight": w(E, H), p + "mlp.fc2.bias": w(E),
        })
    t.update({"norm.weight": 1.0 + w(E), "norm.bias": w(E),
              "head.weight": w(num_classes, E), "head.bias": w(num_classes)})
    t = {k: v.astype(np.float32) for k, v in t.items()}
    return ViTCheckpoint(tensors=t, metadata={"kind": "vit", "heads": heads, "synthetic": True})


def load_vit_checkpoint(path) -> ViTCheckpoint:
    c = read_container(path)
    ckpt = ViTCheckpoint(tensors=c.tensors, metadata=c.metadata)
    ckpt.validate()
    return ckpt


def save_vit_checkpoint(path, ckpt: ViTCheckpoint):
    return write_container(path, Container(dict(ckpt.tensors), dict(ckpt.metadata)))
