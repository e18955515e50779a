"""Vision Mamba classifier: patch tokens, class token, bidirectional blocks, MLP head.

Parameters live in one ordered registry whose order is the canonical layer
order: patch embedding, positional embedding, class token, blocks in depth
order (norm, in-projection, forward path, backward path, out-projection),
final norm, head.  Checkpoints serialise the registry in that order and the
``last-n`` freezing policy counts from its tail.
"""

from __future__ import annotations

import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .ssm import SsmParams, init_ssm_params, scan_blocked, scan_sequential, selectivize
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)

__all__ = [
    "VimConfig",
    "VimBlock",
    "VimModel",
    "TrainPolicy",
    "SCRATCH",
    "HEAD_ONLY",
    "FULL",
    "last_n",
    "parse_policy",
    "patchify",
    "embed",
    "vim_block_mixer",
    "vim_block_forward",
    "forward",
    "set_trainable",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "CheckpointMismatchError",
    "MAGIC",
    "VERSION",
]


@dataclass
class VimConfig:
    image_size: int = 32
    patch_size: int = 8
    in_channels: int = 3
    embed_dim: int = 64
    depth: int = 4
    state_dim: int = 16
    expand_ratio: int = 2
    conv_kernel: int = 4
    num_classes: int = 6
    class_token_position: str = "middle"
    head_hidden: int = 0  # 0 means "same as embed_dim"
    scan_block: int = 16  # tokens per block in the blocked scan; 0 selects the reference scan

    def __post_init__(self):
        for name in ("image_size", "patch_size", "in_channels", "embed_dim", "state_dim",
                     "expand_ratio", "conv_kernel"):
            if getattr(self, name) < 1:
                raise ValueError(f"VimConfig.{name} must be >= 1")
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.class_token_position not in ("middle", "head"):
            raise ValueError("class_token_position must be 'middle' or 'head'")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def d_inner(self) -> int:
        return self.expand_ratio * self.embed_dim

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size**2

    @property
    def hidden(self) -> int:
        return self.head_hidden or self.embed_dim

    @property
    def cls_index(self) -> int:
        return self.num_patches // 2 if self.class_token_position == "middle" else 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "VimConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


class VimBlock:
    def __init__(self, cfg: VimConfig, rng: np.random.Generator):
        d, di, k = cfg.embed_dim, cfg.d_inner, cfg.conv_kernel
        self.norm_w = Tensor(np.ones(d), requires_grad=True)
        self.norm_b = Tensor(np.zeros(d), requires_grad=True)
        self.w_in = _uniform(rng, d, (d, 2 * di))
        self.fwd_conv_w = _uniform(rng, k, (k, di))
        self.fwd_conv_b = _uniform(rng, k, (di,))
        self.fwd_ssm = init_ssm_params(di, cfg.state_dim, rng)
        self.bwd_conv_w = _uniform(rng, k, (k, di))
        self.bwd_conv_b = _uniform(rng, k, (di,))
        self.bwd_ssm = init_ssm_params(di, cfg.state_dim, rng)
        self.w_out = _uniform(rng, di, (di, d))
        self.scan_block = cfg.scan_block

    def named(self) -> list[tuple[str, Tensor]]:
        out = [("norm.weight", self.norm_w), ("norm.bias", self.norm_b), ("in_proj.weight", self.w_in)]
        for tag, cw, cb, ssm in (
            ("fwd", self.fwd_conv_w, self.fwd_conv_b, self.fwd_ssm),
            ("bwd", self.bwd_conv_w, self.bwd_conv_b, self.bwd_ssm),
        ):
            out.append((f"{tag}.conv.weight", cw))
            out.append((f"{tag}.conv.bias", cb))
            out.extend((f"{tag}.ssm.{n}", t) for n, t in ssm.named())
        out.append(("out_proj.weight", self.w_out))
        return out

    def swapped(self) -> "VimBlock":
        """Shallow copy with forward and backward parameter sets exchanged."""
        other = object.__new__(VimBlock)
        other.__dict__.update(self.__dict__)
        other.fwd_conv_w, other.bwd_conv_w = self.bwd_conv_w, self.fwd_conv_w
        other.fwd_conv_b, other.bwd_conv_b = self.bwd_conv_b, self.fwd_conv_b
        other.fwd_ssm, other.bwd_ssm = self.bwd_ssm, self.fwd_ssm
        return other


HEAD_PREFIX = "head."


class VimModel:
    def __init__(self, cfg: VimConfig, seed: int = 0):
        self.cfg = cfg
        self.class_names: list[str] | None = None
        rng = np.random.default_rng(seed)
        d = cfg.embed_dim
        self.patch_w = _uniform(rng, cfg.patch_dim, (cfg.patch_dim, d))
        self.patch_b = _uniform(rng, cfg.patch_dim, (d,))
        self.pos_embed = Tensor(rng.normal(0.0, 0.02, (cfg.seq_len, d)), requires_grad=True)
        self.cls_token = Tensor(rng.normal(0.0, 0.02, (d,)), requires_grad=True)
        self.blocks = [VimBlock(cfg, rng) for _ in range(cfg.depth)]
        self.norm_w = Tensor(np.ones(d), requires_grad=True)
        self.norm_b = Tensor(np.zeros(d), requires_grad=True)
        self.init_head(rng)

    def init_head(self, rng: np.random.Generator) -> None:
        cfg = self.cfg
        self.fc1_w = _uniform(rng, cfg.embed_dim, (cfg.embed_dim, cfg.hidden))
        self.fc1_b = _uniform(rng, cfg.embed_dim, (cfg.hidden,))
        self.fc2_w = Tensor(np.zeros((cfg.hidden, cfg.num_classes)), requires_grad=True)
        self.fc2_b = Tensor(np.zeros(cfg.num_classes), requires_grad=True)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [
            ("patch_embed.weight", self.patch_w),
            ("patch_embed.bias", self.patch_b),
            ("pos_embed", self.pos_embed),
            ("cls_token", self.cls_token),
        ]
        for i, blk in enumerate(self.blocks):
            out.extend((f"blocks.{i}.{n}", t) for n, t in blk.named())
        out += [
            ("norm_f.weight", self.norm_w),
            ("norm_f.bias", self.norm_b),
            ("head.fc1.weight", self.fc1_w),
            ("head.fc1.bias", self.fc1_b),
            ("head.fc2.weight", self.fc2_w),
            ("head.fc2.bias", self.fc2_b),
        ]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self.named_parameters():
            arr = state[name]
            if arr.shape != t.shape:
                raise ShapeError(f"{name}: shape {arr.shape} != {t.shape}")
            t.data = np.ascontiguousarray(arr, dtype=t.data.dtype)

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def __call__(self, images) -> Tensor:
        return forward(images, self)


# --------------------------------------------------------------------------
# Forward pieces
# --------------------------------------------------------------------------


def patchify(image, cfg: VimConfig) -> Tensor:
    """``[..., C, H, W]`` image(s) -> ``[..., L, C*P*P]`` patches, row-major patch order."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim < 3:
        raise ShapeError(f"patchify: expected [..., C, H, W], got {arr.shape}")
    c, h, w = arr.shape[-3:]
    p = cfg.patch_size
    if h % p or w % p:
        raise ShapeError(f"patchify: image {h}x{w} is not divisible by patch size {p}")
    if c != cfg.in_channels or h != cfg.image_size or w != cfg.image_size:
        raise ShapeError(
            f"patchify: image {c}x{h}x{w} does not match config "
            f"{cfg.in_channels}x{cfg.image_size}x{cfg.image_size}"
        )
    lead = arr.shape[:-3]
    nh, nw = h // p, w // p
    x = arr.reshape(lead + (c, nh, p, nw, p))
    k = len(lead)
    x = x.transpose(tuple(range(k)) + (k + 1, k + 3, k, k + 2, k + 4))
    return Tensor(x.reshape(lead + (nh * nw, c * p * p)))


def embed(patches: Tensor, model: VimModel) -> Tensor:
    """Project patches, insert the class token, add positional embeddings."""
    cfg = model.cfg
    tokens = T.matmul(patches, model.patch_w) + model.patch_b
    seq = T.insert_row(tokens, model.cls_token, _cls_index_for(patches.shape[-2], cfg))
    if seq.shape[-2] != model.pos_embed.shape[0]:
        raise ShapeError(
            f"embed: sequence length {seq.shape[-2]} != positional table {model.pos_embed.shape[0]}"
        )
    return seq + model.pos_embed


def _cls_index_for(num_patches: int, cfg: VimConfig) -> int:
    return num_patches // 2 if cfg.class_token_position == "middle" else 0


def _direction(x: Tensor, conv_w: Tensor, conv_b: Tensor, ssm: SsmParams, block: int) -> Tensor:
    u = T.silu(T.conv1d_causal_depthwise(x, conv_w, conv_b))
    inst = selectivize(u, ssm)
    if block:
        return scan_blocked(inst, ssm, block)
    return scan_sequential(inst, ssm)


def vim_block_mixer(seq: Tensor, blk: VimBlock) -> Tensor:
    """The block's residual branch (everything except ``seq +``)."""
    di = blk.w_in.shape[1] // 2
    u = T.layer_norm(seq, blk.norm_w, blk.norm_b)
    x, z = T.split_last(T.matmul(u, blk.w_in), [di, di])
    y_fwd = _direction(x, blk.fwd_conv_w, blk.fwd_conv_b, blk.fwd_ssm, blk.scan_block)
    x_rev = T.flip(x, axis=-2)
    y_bwd = T.flip(_direction(x_rev, blk.bwd_conv_w, blk.bwd_conv_b, blk.bwd_ssm, blk.scan_block), axis=-2)
    gated = (y_fwd + y_bwd) * T.silu(z)
    return T.matmul(gated, blk.w_out)


def vim_block_forward(seq: Tensor, blk: VimBlock) -> Tensor:
    return seq + vim_block_mixer(seq, blk)


def encode(images, model: VimModel) -> Tensor:
    """Embedded tokens after all blocks, before the final norm."""
    seq = embed(patchify(images, model.cfg), model)
    for blk in model.blocks:
        seq = vim_block_forward(seq, blk)
    return seq


def forward(images, model: VimModel) -> Tensor:
    """Logits ``[..., num_classes]`` for image(s) shaped ``[..., C, H, W]``."""
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    if arr.ndim == 3:
        return T.reshape(forward(arr[None], model), (model.cfg.num_classes,))
    seq = encode(images, model)
    seq = T.layer_norm(seq, model.norm_w, model.norm_b)
    cls = T.take(seq, model.cfg.cls_index, axis=-2)
    hidden = T.silu(T.matmul(cls, model.fc1_w) + model.fc1_b)
    return T.matmul(hidden, model.fc2_w) + model.fc2_b


# --------------------------------------------------------------------------
# Freezing
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainPolicy:
    kind: str  # scratch | head-only | last-n | full
    n: int = 0

    def __str__(self) -> str:
        return f"last-n={self.n}" if self.kind == "last-n" else self.kind


SCRATCH = TrainPolicy("scratch")
HEAD_ONLY = TrainPolicy("head-only")
FULL = TrainPolicy("full")


def last_n(n: int) -> TrainPolicy:
    if n < 0:
        raise ValueError("last-n needs n >= 0")
    return TrainPolicy("last-n", n)


def parse_policy(text: str) -> TrainPolicy:
    text = text.strip().lower()
    if text in ("scratch", "head-only", "full"):
        return TrainPolicy(text)
    if text.startswith("last-n="):
        try:
            return last_n(int(text.split("=", 1)[1]))
        except ValueError:
            pass
    raise ValueError(f"unknown strategy {text!r}; expected scratch, head-only, last-n=N or full")


def set_trainable(model: VimModel, policy: TrainPolicy) -> list[str]:
    """Set ``requires_grad`` per policy; returns the names left trainable."""
    named = model.named_parameters()
    head = [n for n, _ in named if n.startswith(HEAD_PREFIX)]
    body = [n for n, _ in named if not n.startswith(HEAD_PREFIX)]
    if policy.kind in ("scratch", "full"):
        keep = set(head) | set(body)
    elif policy.kind == "head-only":
        keep = set(head)
    elif policy.kind == "last-n":
        n = policy.n
        if n > len(body):
            log.warning("last-n=%d exceeds %d encoder tensors; clamping", n, len(body))
            n = len(body)
        keep = set(head) | set(body[len(body) - n :])
    else:
        raise ValueError(f"unknown policy {policy!r}")
    for name, t in named:
        t.requires_grad = name in keep
        if not t.requires_grad:
            t.grad = None
    return [n for n, _ in named if n in keep]


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

MAGIC = b"VIMC"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


class CheckpointMismatchError(CheckpointError):
    def __init__(self, mismatched: list[str]):
        self.mismatched = mismatched
        super().__init__("checkpoint does not match config; mismatched tensors: " + ", ".join(mismatched))


def save_checkpoint(model: VimModel, path) -> None:
    path = Path(path)
    lines = ["config\t" + json.dumps(model.cfg.to_dict(), sort_keys=True)]
    if model.class_names:
        lines.append("classes\t" + "\t".join(model.class_names))
    chunks = []
    offset = 0
    for name, t in model.named_parameters():
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        shape = ",".join(str(s) for s in t.shape)
        lines.append(f"tensor\t{name}\t{shape}\t{offset}\t{len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    manifest = ("\n".join(lines) + "\n").encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(_HEADER.pack(MAGIC, VERSION, len(manifest)))
            f.write(manifest)
            for c in chunks:
                f.write(c)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path) -> tuple[VimConfig, dict[str, np.ndarray], list[str] | None]:
    """Parse and validate a checkpoint: stored config, tensors in order, class names."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise CheckpointError(f"{path}: file too short for header")
    magic, version, mlen = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} (expected {VERSION})")
    start = _HEADER.size
    if len(blob) < start + mlen:
        raise CheckpointError(f"{path}: manifest truncated")
    manifest = blob[start : start + mlen].decode("utf-8")
    payload = memoryview(blob)[start + mlen :]
    cfg = None
    class_names = None
    entries = []
    for line in manifest.splitlines():
        parts = line.split("\t")
        if parts[0] == "config":
            cfg = VimConfig.from_dict(json.loads(parts[1]))
        elif parts[0] == "classes":
            class_names = parts[1:]
        elif parts[0] == "tensor" and len(parts) == 5:
            shape = tuple(int(s) for s in parts[2].split(",") if s)
            entries.append((parts[1], shape, int(parts[3]), int(parts[4])))
        else:
            raise CheckpointError(f"{path}: malformed manifest line {line!r}")
    if cfg is None:
        raise CheckpointError(f"{path}: manifest has no config")
    expected = sum(e[3] for e in entries)
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload length {len(payload)} != manifest total {expected}")
    tensors = {}
    for name, shape, off, nbytes in entries:
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{path}: tensor {name} size does not match shape {shape}")
        tensors[name] = np.frombuffer(payload[off : off + nbytes], dtype="<f4").reshape(shape).copy()
    return cfg, tensors, class_names


def load_checkpoint(path, cfg: VimConfig | None = None, replace_head: bool = False, seed: int = 0) -> VimModel:
    """Load a model.

    With ``cfg`` the checkpoint is loaded into a model of that shape; any
    tensor whose name or shape differs raises :class:`CheckpointMismatchError`
    unless ``replace_head`` is set and every difference is in the head, in
    which case the head keeps its fresh initialisation.
    """
    stored_cfg, tensors, class_names = read_checkpoint(path)
    model = VimModel(cfg or stored_cfg, seed=seed)
    if class_names is not None and len(class_names) == model.cfg.num_classes:
        model.class_names = class_names
    named = model.named_parameters()
    mismatched = []
    for name, t in named:
        if name not in tensors or tensors[name].shape != t.shape:
            mismatched.append(name)
    mismatched += [n for n in tensors if n not in dict(named)]
    if mismatched:
        if not (replace_head and all(n.startswith(HEAD_PREFIX) for n in mismatched)):
            raise CheckpointMismatchError(mismatched)
        for name in {n for n, _ in named if n.startswith(HEAD_PREFIX)} - set(mismatched):
            mismatched.append(name)
    for name, t in named:
        if name in mismatched:
            continue
        t.data = tensors[name].astype(T.get_dtype())
    return model
