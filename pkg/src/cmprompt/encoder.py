"""Frozen toy dual encoders with per-task, per-layer prefix-prompt injection.

Two small pre-LN transformer towers (an image stand-in over patch-token
sequences and a text stand-in over class-caption sequences) project into a
shared embedding space. Both towers are randomly initialised once, then
frozen; when their widths match they share token-embedding and output
projection values, so sequences with overlapping token content land close
together in the shared space. That gives the frozen pair a usable zero-shot
image/text alignment without any pretraining.

Adaptation happens only through :class:`PromptPool` prefixes. At every layer
the incoming hidden state cross-attends over the layer's prefix bank and the
residual is added back scaled by an externally supplied gate value:

    u = h + scale_l * Attn(h, prefix_l)
    h = frozen_block_l(u)

With all scales zero the stack reduces to the frozen forward bit-for-bit
(the addition is skipped, not multiplied away).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .matio import read_matrix, write_matrix  # re-exported: external embedding import
from .numerics import make_rng, torch_seed_from
from .validation import check_tokens

__all__ = [
    "EncoderConfig",
    "PromptPool",
    "FrozenBackbone",
    "prompt_attention",
    "class_token_sequence",
    "read_matrix",
    "write_matrix",
]

# class captions are global fixtures derived from the class id alone,
# independent of any run seed
_CAPTION_SEED = 0x70AD5


@dataclass(frozen=True)
class EncoderConfig:
    """Shapes for the dual towers. Desk defaults are small; ``paper()`` gives
    the full-scale configuration used for parameter accounting."""

    d: int = 48
    n_layers_img: int = 4
    n_layers_txt: int = 3
    prompt_len: int = 4
    n_heads: int = 2
    seq_len: int = 16
    vocab_size: int = 1024
    width_img: int = 0  # 0 means "use d"
    width_txt: int = 0
    mlp_ratio: int = 2
    residual_gain: float = 0.15

    def __post_init__(self):
        if self.d < 1 or self.prompt_len < 1:
            raise ValueError("d and prompt_len must be at least 1")
        if self.n_layers_img < 1 or self.n_layers_txt < 1:
            raise ValueError("layer counts must be at least 1")
        if self.d % self.n_heads != 0:
            raise ValueError("d must be divisible by n_heads")
        for w in (self.wimg, self.wtxt):
            if w % self.n_heads != 0:
                raise ValueError("tower widths must be divisible by n_heads")

    @property
    def wimg(self) -> int:
        return self.width_img or self.d

    @property
    def wtxt(self) -> int:
        return self.width_txt or self.d

    @classmethod
    def paper(cls) -> "EncoderConfig":
        """Full-scale shapes: 512-d shared space, 12/8 prompted layers,
        prompt length 8, tower widths 768/512."""
        return cls(
            d=512,
            n_layers_img=12,
            n_layers_txt=8,
            prompt_len=8,
            n_heads=8,
            seq_len=16,
            vocab_size=512,
            width_img=768,
            width_txt=512,
            mlp_ratio=4,
        )


def caption_common_tokens(config: EncoderConfig, size: int) -> np.ndarray:
    """Caption vocabulary shared by every class (template words)."""
    rng = make_rng(_CAPTION_SEED, "caption-common")
    return rng.integers(0, config.vocab_size, size=size, dtype=np.int64)


def caption_theme_tokens(namespace: int, config: EncoderConfig, size: int) -> np.ndarray:
    """Shared caption vocabulary for one hundreds-namespace of class ids."""
    rng = make_rng(_CAPTION_SEED, "caption-theme", int(namespace))
    return rng.integers(0, config.vocab_size, size=size, dtype=np.int64)


def class_token_sequence(class_id: int, config: EncoderConfig) -> np.ndarray:
    """Deterministic caption tokens for a class id (the text-tower input).

    Captions mirror real prompt templates: a small common part every class
    shares, a part shared across the class's hundreds-namespace (classes
    300..399 share it, the way real captions share domain vocabulary), and a
    class-unique remainder. All parts are hash-seeded from the id alone.
    """
    cid = int(class_id)
    n_common = (3 * config.seq_len) // 16
    n_theme = (3 * config.seq_len) // 8
    common = caption_common_tokens(config, n_common)
    theme = caption_theme_tokens(cid // 100, config, n_theme)
    class_rng = make_rng(_CAPTION_SEED, "class-caption", cid)
    unique = class_rng.integers(
        0, config.vocab_size, size=config.seq_len - n_theme - n_common, dtype=np.int64
    )
    return np.concatenate([common, theme, unique])


def prompt_attention(h, keys, values):
    """Cross-attention residual: h provides queries, the prefix provides
    keys/values. Single head, scaled dot-product; linear in the value bank.

    Accepts torch tensors or numpy arrays; returns the same kind. Shapes:
    h (..., T, W), keys (l, W), values (l, W) -> (..., T, W).
    """
    was_numpy = not torch.is_tensor(h)
    ht = torch.as_tensor(h, dtype=torch.float64)
    kt = torch.as_tensor(keys, dtype=torch.float64)
    vt = torch.as_tensor(values, dtype=torch.float64)
    if kt.ndim != 2 or vt.shape != kt.shape or ht.shape[-1] != kt.shape[-1]:
        raise ValueError(
            f"prompt shape mismatch: h {tuple(ht.shape)}, keys {tuple(kt.shape)}, "
            f"values {tuple(vt.shape)}"
        )
    scores = ht @ kt.T / math.sqrt(kt.shape[-1])
    weights = torch.softmax(scores, dim=-1)
    out = weights @ vt
    return out.numpy() if was_numpy else out


class PromptPool(nn.Module):
    """Per-task learnable prefix banks: one (keys, values) pair per prompted
    layer of each tower, stored as a (2, prompt_len, width) parameter."""

    def __init__(self, config: EncoderConfig, task_id: int, seed: int = 0):
        super().__init__()
        self.config = config
        self.task_id = int(task_id)
        gen = torch.Generator().manual_seed(
            torch_seed_from(make_rng(seed, "prompt-pool", self.task_id))
        )
        self.img = nn.ParameterList(
            self._prefix(config.prompt_len, config.wimg, gen)
            for _ in range(config.n_layers_img)
        )
        self.txt = nn.ParameterList(
            self._prefix(config.prompt_len, config.wtxt, gen)
            for _ in range(config.n_layers_txt)
        )
        self.double()

    @staticmethod
    def _prefix(length: int, width: int, gen) -> nn.Parameter:
        # keys start large so attention over the prefix is differentiated from
        # step one; values start small so the initial residual barely perturbs
        # the frozen features
        bank = torch.empty(2, length, width)
        nn.init.normal_(bank[0:1], std=2.0, generator=gen)
        nn.init.normal_(bank[1:2], std=0.1, generator=gen)
        return nn.Parameter(bank)

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


def _init_linear(lin: nn.Linear, std: float, gen) -> None:
    nn.init.normal_(lin.weight, std=std, generator=gen)


class _Block(nn.Module):
    """Pre-LN transformer block; output projections are initialised small so
    the frozen stack stays near-identity and token content dominates."""

    def __init__(self, width: int, n_heads: int, mlp_ratio: int, gain: float, gen):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = width // n_heads
        self.ln1 = nn.LayerNorm(width)
        self.ln2 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width, bias=False)
        self.attn_out = nn.Linear(width, width, bias=False)
        hidden = mlp_ratio * width
        self.fc1 = nn.Linear(width, hidden, bias=False)
        self.fc2 = nn.Linear(hidden, width, bias=False)
        base = 1.0 / math.sqrt(width)
        _init_linear(self.qkv, base, gen)
        _init_linear(self.attn_out, gain * base, gen)
        _init_linear(self.fc1, base, gen)
        _init_linear(self.fc2, gain / math.sqrt(hidden), gen)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        B, T, W = h.shape
        x = self.ln1(h)
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(B, T, self.n_heads, self.head_dim).transpose(1, 2)
        k = k.view(B, T, self.n_heads, self.head_dim).transpose(1, 2)
        v = v.view(B, T, self.n_heads, self.head_dim).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, T, W)
        h = h + self.attn_out(y)
        h = h + self.fc2(torch.nn.functional.gelu(self.fc1(self.ln2(h))))
        return h


class _Tower(nn.Module):
    def __init__(self, config: EncoderConfig, width: int, n_layers: int, gen):
        super().__init__()
        self.width = width
        self.tok = nn.Parameter(torch.empty(config.vocab_size, width))
        self.pos = nn.Parameter(torch.empty(config.seq_len, width))
        nn.init.normal_(self.tok, std=1.0, generator=gen)
        nn.init.normal_(self.pos, std=0.1, generator=gen)
        self.blocks = nn.ModuleList(
            _Block(width, config.n_heads, config.mlp_ratio, config.residual_gain, gen)
            for _ in range(n_layers)
        )
        self.ln_f = nn.LayerNorm(width)
        self.proj = nn.Linear(width, config.d, bias=False)
        _init_linear(self.proj, 1.0 / math.sqrt(width), gen)

    def copy_shared_from(self, other: "_Tower") -> None:
        """Align the output space with another tower of equal width by sharing
        token/positional/projection values (storage stays separate)."""
        if other.width != self.width:
            return
        with torch.no_grad():
            self.tok.copy_(other.tok)
            self.pos.copy_(other.pos)
            self.proj.weight.copy_(other.proj.weight)

    def forward(self, tokens: torch.Tensor, prompts, scales, return_hidden: bool):
        # tokens (B, T) long; prompts: list of (2, l, W) banks or None;
        # scales: None, (L,) or (B, L) tensor
        h = self.tok[tokens] + self.pos[: tokens.shape[1]]
        for i, block in enumerate(self.blocks):
            if prompts is not None and scales is not None:
                s = scales[..., i]
                # skip the residual add outright for identically-zero frozen
                # scales: keeps the zero-gate fallback bitwise, but must never
                # trigger on a graph scale (straight-through needs the edge)
                skippable = not s.requires_grad and bool(torch.all(s == 0.0))
                if not skippable:
                    s_col = s if s.ndim == 0 else s.view(-1, 1, 1)
                    bank = prompts[i]
                    h = h + s_col * prompt_attention(h, bank[0], bank[1])
            h = block(h)
        if return_hidden:
            return h
        pooled = self.ln_f(h).mean(dim=1)
        return pooled @ self.proj.weight.T


class FrozenBackbone(nn.Module):
    """The frozen dual-tower substrate. All parameters are immutable after
    construction; forward passes are deterministic and dropout-free."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(
            torch_seed_from(make_rng(seed, "backbone"))
        )
        self.image = _Tower(config, config.wimg, config.n_layers_img, gen)
        self.text = _Tower(config, config.wtxt, config.n_layers_txt, gen)
        self.text.copy_shared_from(self.image)
        self.double()
        for p in self.parameters():
            p.requires_grad_(False)

    # -- torch-level forwards (training path; differentiable w.r.t. prompts) --

    def forward_image(self, tokens: torch.Tensor, pool: PromptPool | None = None,
                      scales=None, return_hidden: bool = False):
        prompts = pool.img if pool is not None else None
        return self.image(tokens, prompts, scales, return_hidden)

    def forward_text(self, tokens: torch.Tensor, pool: PromptPool | None = None,
                     scales=None, return_hidden: bool = False):
        prompts = pool.txt if pool is not None else None
        return self.text(tokens, prompts, scales, return_hidden)

    # -- numpy-level encoding API --

    def _encode(self, tower_fn, n_layers, tokens, pool, gates):
        toks = check_tokens(tokens, self.config.seq_len, self.config.vocab_size)
        single = np.asarray(tokens).ndim == 1
        scales = None
        if pool is not None:
            scales = _as_gate_tensor(gates, n_layers, toks.shape[0])
        with torch.no_grad():
            out = tower_fn(torch.from_numpy(toks), pool, scales)
        result = out.numpy()
        return result[0] if single else result

    def encode_image(self, tokens, pool: PromptPool | None = None, gates=None) -> np.ndarray:
        """Embed patch-token sequences. With no pool (or all-zero gates) this
        is the frozen zero-shot forward, bit for bit."""
        return self._encode(self.forward_image, self.config.n_layers_img,
                            tokens, pool, gates)

    def encode_text(self, tokens, pool: PromptPool | None = None, gates=None) -> np.ndarray:
        """Embed class-caption sequences; same gate contract as encode_image."""
        return self._encode(self.forward_text, self.config.n_layers_txt,
                            tokens, pool, gates)

    def encode_class(self, class_id: int, pool: PromptPool | None = None, gates=None) -> np.ndarray:
        return self.encode_text(class_token_sequence(class_id, self.config), pool, gates)

    def fingerprint(self) -> str:
        """Stable hash over all parameter bytes; used to assert frozen-ness."""
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters()):
            h.update(name.encode())
            h.update(p.detach().numpy().tobytes())
        return h.hexdigest()


def _as_gate_tensor(gates, n_layers: int, batch: int):
    """Validate a per-layer gate vector (or per-sample matrix) in [0, 1]."""
    if gates is None:
        gates = np.ones(n_layers)
    arr = np.asarray(gates, dtype=np.float64)
    if arr.ndim == 1:
        if arr.shape[0] != n_layers:
            raise ValueError(
                f"gate vector length mismatch: expected {n_layers}, got {arr.shape[0]}"
            )
    elif arr.ndim == 2:
        if arr.shape != (batch, n_layers):
            raise ValueError(
                f"gate matrix must be ({batch}, {n_layers}), got {arr.shape}"
            )
    else:
        raise ValueError("gates must be 1-D or 2-D")
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError("gate values must lie in [0, 1]")
    return torch.from_numpy(arr)
