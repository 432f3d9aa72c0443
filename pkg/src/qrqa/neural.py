"""Double-precision transformer blocks, Adam parameter store, gradient checking and checkpoints.

Tensors and reverse-mode differentiation come from torch; everything model
specific (attention with an exposed head, layer norm, the optimizer, the
finite-difference checker, the checkpoint format) lives here.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

DTYPE = torch.float64
LN_EPS = 1e-5
CHECKPOINT_MAGIC = b"QRQA-CKPT\n"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TransformerConfig:
    num_layers: int = 2
    num_heads: int = 4
    model_dim: int = 64
    max_seq_len: int = 128
    ff_dim: int = 256
    causal: bool = True
    # which layer's head 0 feeds the mixture gate; negative indexes from the end
    gate_attention_layer: int = -1

    def __post_init__(self):
        for name in ("num_layers", "num_heads", "model_dim", "max_seq_len", "ff_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if not -self.num_layers <= self.gate_attention_layer < self.num_layers:
            raise ValueError(f"gate_attention_layer {self.gate_attention_layer} out of range")

    @property
    def gate_layer_index(self) -> int:
        return self.gate_attention_layer % self.num_layers

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TransformerConfig":
        return cls(**d)


def layer_norm(x: torch.Tensor, eps: float = LN_EPS) -> torch.Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    mean = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, unbiased=False, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps)


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor | None, dim: int = -1) -> torch.Tensor:
    if mask is not None:
        logits = logits.masked_fill(~mask, float("-inf"))
    return torch.softmax(logits, dim=dim)


class LayerNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(dim, dtype=DTYPE))

    def forward(self, x):
        return layer_norm(x) * self.weight + self.bias


def _linear(n_in: int, n_out: int) -> nn.Linear:
    return nn.Linear(n_in, n_out, dtype=DTYPE)


class SelfAttention(nn.Module):
    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.num_heads = cfg.num_heads
        self.head_dim = cfg.model_dim // cfg.num_heads
        self.qkv = _linear(cfg.model_dim, 3 * cfg.model_dim)
        self.proj = _linear(cfg.model_dim, cfg.model_dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (projected output, head-0 output before projection).

        The head-0 output applies head 0's attention weights to the full
        d-wide value projection so it has the same width as the model.
        """
        B, n, d = x.shape
        q, k, v = self.qkv(x).split(d, dim=-1)
        heads = lambda t: t.view(B, n, self.num_heads, self.head_dim).transpose(1, 2)
        scores = heads(q) @ heads(k).transpose(-1, -2) / math.sqrt(self.head_dim)
        att = masked_softmax(scores, mask)
        ctx = (att @ heads(v)).transpose(1, 2).reshape(B, n, d)
        head0 = att[:, 0] @ v
        return self.proj(ctx), head0


class Block(nn.Module):
    """Pre-norm transformer block (GPT-2 layout)."""

    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.ln1 = LayerNorm(cfg.model_dim)
        self.attn = SelfAttention(cfg)
        self.ln2 = LayerNorm(cfg.model_dim)
        self.ff_in = _linear(cfg.model_dim, cfg.ff_dim)
        self.ff_out = _linear(cfg.ff_dim, cfg.model_dim)

    def forward(self, x, mask):
        a, head0 = self.attn(self.ln1(x), mask)
        x = x + a
        x = x + self.ff_out(F.gelu(self.ff_in(self.ln2(x))))
        return x, head0


def attention_mask(ids: torch.Tensor, causal: bool, pad_id: int = 0) -> torch.Tensor:
    """Boolean (B, 1, n, n) mask; True where a query may attend to a key."""
    B, n = ids.shape
    keep = (ids != pad_id)[:, None, None, :]
    if causal:
        tri = torch.ones(n, n, dtype=torch.bool).tril()
        keep = keep & tri[None, None]
    # position 0 ([BOS]/[CLS]) is never padding, so no row is fully masked
    keep = keep.clone()
    keep[..., 0] = True
    return keep


class Transformer(nn.Module):
    """Token + learned position embeddings followed by pre-norm blocks."""

    def __init__(self, cfg: TransformerConfig, vocab_size: int):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(vocab_size, cfg.model_dim, dtype=DTYPE)
        self.pos_emb = nn.Parameter(torch.zeros(cfg.max_seq_len, cfg.model_dim, dtype=DTYPE))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.num_layers))
        self.ln_f = LayerNorm(cfg.model_dim)

    def forward(self, ids: torch.Tensor, pad_id: int = 0):
        """ids: (B, n) -> (H, G, X), each (B, n, d)."""
        n = ids.shape[1]
        if n > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {n} exceeds max_seq_len {self.cfg.max_seq_len}")
        X = self.tok_emb(ids) + self.pos_emb[:n]
        mask = attention_mask(ids, self.cfg.causal, pad_id)
        h, G = X, None
        for li, block in enumerate(self.blocks):
            h, head0 = block(h, mask)
            if li == self.cfg.gate_layer_index:
                G = head0
        return self.ln_f(h), G, X


def init_weights(module: nn.Module, seed: int, std: float = 0.02) -> None:
    """normal(0, std) for weight matrices and embeddings, zero biases, unit LN gains."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if isinstance(_owner(module, name), LayerNorm):
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=DTYPE) * std)


def _owner(module: nn.Module, param_name: str) -> nn.Module:
    for part in param_name.split(".")[:-1]:
        module = getattr(module, part)
    return module


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = 0) -> torch.Tensor:
    n = max(len(s) for s in seqs)
    out = torch.full((len(seqs), n), pad_id, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out


def decoder_forward(model: Transformer, ids: Sequence[int]):
    """Single causal sequence -> (H, G, X), each n x d."""
    if not model.cfg.causal:
        raise ValueError("decoder_forward needs a causal config")
    H, G, X = model(torch.as_tensor([list(ids)], dtype=torch.long))
    return H[0], G[0], X[0]


def encoder_forward(model: Transformer, ids: Sequence[int]) -> torch.Tensor:
    """Single bidirectional sequence -> T, n x d."""
    if model.cfg.causal:
        raise ValueError("encoder_forward needs a non-causal config")
    T, _, _ = model(torch.as_tensor([list(ids)], dtype=torch.long))
    return T[0]


# --- optimisation -----------------------------------------------------------------


class ParameterStore:
    """Named parameters of one model plus Adam state and a global step counter.

    A store is owned by a single training loop; it is not safe to share
    during ``optimize_step``.
    """

    def __init__(self, module: nn.Module, seed: int = 0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.module = module
        self.seed = seed
        self.betas = betas
        self.eps = eps
        self.step = 0
        self.params: dict[str, nn.Parameter] = dict(module.named_parameters())
        self.exp_avg = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.exp_avg_sq = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self._has_grads = False

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
        self._has_grads = False

    def backward(self, loss: torch.Tensor) -> dict[str, torch.Tensor]:
        """Populate gradients for every parameter (zeros where unused)."""
        if loss.grad_fn is None:
            raise RuntimeError("backward called without a recorded forward pass")
        if loss.numel() != 1:
            raise ValueError("backward needs a scalar loss")
        self.zero_grad()
        loss.backward()
        for p in self.params.values():
            if p.grad is None:
                p.grad = torch.zeros_like(p)
        self._has_grads = True
        return self.gradients()

    def gradients(self) -> dict[str, torch.Tensor]:
        return {k: p.grad for k, p in self.params.items()}

    def optimize_step(self, lr: float) -> None:
        if not self._has_grads:
            raise RuntimeError("optimize_step called before backward")
        for name, p in self.params.items():
            if not torch.isfinite(p.grad).all():
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        self.step += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.step
        c2 = 1 - b2 ** self.step
        with torch.no_grad():
            for name, p in self.params.items():
                g = p.grad
                m = self.exp_avg[name].mul_(b1).add_(g, alpha=1 - b1)
                v = self.exp_avg_sq[name].mul_(b2).addcmul_(g, g, value=1 - b2)
                p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + self.eps))
        self._has_grads = False


# --- finite differences -----------------------------------------------------------


def gradient_check(
    loss_fn: Callable[[], torch.Tensor],
    params: dict[str, torch.Tensor],
    eps: float = 1e-5,
    samples_per_param: int = 6,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    Relative error per entry is |a - n| / max(|a|, |n|, 1e-8). Entries are
    sampled uniformly per parameter tensor.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for (name, p), a in zip(params.items(), analytic):
            if a is None:
                a = torch.zeros_like(p)
            flat = p.view(-1)
            k = min(samples_per_param, flat.numel())
            for idx in rng.choice(flat.numel(), size=k, replace=False):
                orig = flat[idx].item()
                flat[idx] = orig + eps
                up = loss_fn().item()
                flat[idx] = orig - eps
                down = loss_fn().item()
                flat[idx] = orig
                numeric = (up - down) / (2 * eps)
                an = a.reshape(-1)[idx].item()
                err = abs(an - numeric) / max(abs(an), abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst


# --- checkpoints ------------------------------------------------------------------


def save_checkpoint(path: str | Path, module: nn.Module, *, tag: str, config: dict,
                    vocab_hash: str, step: int, extra: dict | None = None) -> None:
    """Header (JSON) followed by named little-endian float64 tensors.

    Layout: magic line, uint64-LE header length, UTF-8 JSON header, then the
    raw tensor payloads in header order.
    """
    state = module.state_dict()
    header = {
        "format_version": CHECKPOINT_VERSION,
        "tag": tag,
        "config": config,
        "vocab_hash": vocab_hash,
        "step": step,
        "extra": extra or {},
        "tensors": [{"name": k, "shape": list(t.shape)} for k, t in state.items()],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(t.detach().cpu().numpy().astype("<f8").tobytes() for t in state.values())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + payload)
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    header = json.loads(raw[off: off + hlen].decode("utf-8"))
    off += hlen
    if header["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header['format_version']}")
    tensors = {}
    for spec in header["tensors"]:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(spec["shape"])
        tensors[spec["name"]] = torch.tensor(arr, dtype=DTYPE)
        off += 8 * count
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes after tensors")
    return header, tensors


def load_into(module: nn.Module, tensors: dict[str, torch.Tensor], path: str | Path = "") -> None:
    """Copy tensors into ``module``, validating names and shapes."""
    expected = module.state_dict()
    missing = set(expected) - set(tensors)
    unexpected = set(tensors) - set(expected)
    if missing or unexpected:
        raise ValueError(f"{path}: checkpoint tensors mismatch (missing {sorted(missing)}, unexpected {sorted(unexpected)})")
    for name, t in tensors.items():
        if tuple(t.shape) != tuple(expected[name].shape):
            raise ValueError(f"{path}: tensor {name} has shape {tuple(t.shape)}, config expects {tuple(expected[name].shape)}")
    module.load_state_dict(tensors)


def set_threads(n: int | None) -> None:
    if n:
        torch.set_num_threads(n)


def iter_batches(items: Sequence, batch_size: int, rng: np.random.Generator) -> Iterable[list]:
    order = rng.permutation(len(items))
    for i in range(0, len(items), batch_size):
        yield [items[j] for j in order[i: i + batch_size]]
