"""Per-task, per-layer Hard Gumbel gates for both encoder towers.

Each gate is a bias-free (2, d) projection of a conditioning feature in the
shared embedding space. Logit index 0 means "open" (apply the prompt
residual). Training samples a hard decision through the Gumbel-softmax
relaxation with a straight-through gradient; evaluation takes the noiseless
argmax so gate decisions are a pure function of (weights, conditioning).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .encoder import EncoderConfig
from .numerics import make_rng, torch_seed_from
from .validation import check_matrix, check_positive

__all__ = [
    "GATE_OPEN_INDEX",
    "GateBank",
    "GateDecision",
    "gate_forward",
    "gumbel_noise",
    "batch_condition",
    "count_text_gate_params",
    "count_trainable_params",
]

GATE_OPEN_INDEX = 0  # convention: logit 0 wins => gate open (g = 1)


@dataclass
class GateDecision:
    """Per-layer gate outcomes for one tower pass."""

    hard: list = field(default_factory=list)  # floats in {0.0, 1.0}
    soft: list = field(default_factory=list)  # open-probability surrogates
    mode: str = "eval"


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    """Standard Gumbel(0, 1) noise via -log(-log(U)), U clamped off {0, 1}."""
    u = rng.random(shape)
    u = np.clip(u, 1e-10, 1.0 - 1e-10)
    return -np.log(-np.log(u))


def gate_forward(W, cond, tau: float, mode: str, rng: np.random.Generator | None = None):
    """One gate decision from logits z = W @ cond.

    ``cond`` may be a single d-vector or a (B, d) batch; results broadcast
    accordingly. Returns (value, hard, soft):

    * train: value is the straight-through scale (hard sample forward, soft
      Gumbel-softmax gradient), hard the sampled {0,1} decision, soft the
      relaxed open probability. Requires ``rng`` for the noise.
    * eval: value == hard == argmax(z) with ties open; soft is the noiseless
      softmax(z / tau) open probability. No sampling.
    """
    check_positive(tau, "tau")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown gate mode {mode!r}")
    Wt = W if torch.is_tensor(W) else torch.as_tensor(check_matrix(W), dtype=torch.float64)
    if Wt.shape[0] != 2:
        raise ValueError(f"gate projection must have 2 output logits, got {Wt.shape}")
    ct = cond if torch.is_tensor(cond) else torch.as_tensor(np.asarray(cond, dtype=np.float64))
    if ct.shape[-1] != Wt.shape[1]:
        raise ValueError(
            f"conditioning length {ct.shape[-1]} does not match gate width {Wt.shape[1]}"
        )
    z = ct @ Wt.T  # (..., 2)
    if mode == "eval":
        with torch.no_grad():
            open_logit = z[..., GATE_OPEN_INDEX]
            closed_logit = z[..., 1 - GATE_OPEN_INDEX]
            hard = (open_logit >= closed_logit).to(z.dtype)
            soft = torch.softmax(z / tau, dim=-1)[..., GATE_OPEN_INDEX]
        return hard, hard, soft
    if rng is None:
        raise ValueError("train-mode gates need an rng for Gumbel noise")
    noise = torch.from_numpy(gumbel_noise(tuple(z.shape), rng))
    y = torch.softmax((z + noise) / tau, dim=-1)
    y_open = y[..., GATE_OPEN_INDEX]
    hard = (y_open >= y[..., 1 - GATE_OPEN_INDEX]).to(y.dtype)
    value = hard.detach() + y_open - y_open.detach()
    return value, hard.detach(), y_open


class GateBank(nn.Module):
    """Gate projections for every prompted layer of both towers of one task."""

    def __init__(self, config: EncoderConfig, task_id: int, temperature: float = 3.0,
                 seed: int = 0):
        super().__init__()
        check_positive(temperature, "temperature")
        self.config = config
        self.task_id = int(task_id)
        self.temperature = float(temperature)
        gen = torch.Generator().manual_seed(
            torch_seed_from(make_rng(seed, "gate-bank", self.task_id))
        )
        d = config.d
        self.img = nn.ParameterList(
            self._proj(d, gen) for _ in range(config.n_layers_img)
        )
        self.txt = nn.ParameterList(
            self._proj(d, gen) for _ in range(config.n_layers_txt)
        )
        self.double()

    @staticmethod
    def _proj(d: int, gen) -> nn.Parameter:
        W = torch.empty(2, d)
        nn.init.normal_(W, std=1.0 / np.sqrt(d), generator=gen)
        return nn.Parameter(W)

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def decide(self, side: str, cond, mode: str, rng=None):
        """Gate every layer of one side. Returns (scales, GateDecision) where
        scales stacks per-layer values along the last axis, ready for the
        encoder's ``scales`` argument."""
        mats = self.img if side == "img" else self.txt
        decision = GateDecision(mode=mode)
        values = []
        for W in mats:
            value, hard, soft = gate_forward(W, cond, self.temperature, mode, rng)
            values.append(value)
            decision.hard.append(hard.numpy() if hard.ndim else float(hard))
            soft_d = soft.detach()
            decision.soft.append(soft_d.numpy() if soft_d.ndim else float(soft_d))
        return torch.stack(values, dim=-1), decision


def batch_condition(features) -> np.ndarray:
    """Arithmetic mean feature over a batch; the text-gate conditioning."""
    arr = check_matrix(features, name="features")
    if arr.shape[0] == 0:
        raise ValueError("batch_condition requires a non-empty batch")
    return arr.mean(axis=0)


def count_text_gate_params(T: int, L_txt: int, d: int) -> int:
    """Text-side gate weight count: one (2, d) projection per task per layer."""
    for v, name in ((T, "T"), (L_txt, "L_txt"), (d, "d")):
        if v < 1:
            raise ValueError(f"{name} must be positive")
    return T * L_txt * 2 * d


def count_trainable_params(config: EncoderConfig, n_tasks: int,
                           gating: str = "symmetric") -> dict:
    """Closed-form trainable-parameter budget for a task sequence.

    Prompt prefixes hold a key and a value bank per prompted layer; gate
    projections are (2, d) per layer on each gated side.
    """
    if gating not in ("symmetric", "image_only", "disabled"):
        raise ValueError(f"unknown gating mode {gating!r}")
    per_task_prompts = (
        config.n_layers_img * 2 * config.prompt_len * config.wimg
        + config.n_layers_txt * 2 * config.prompt_len * config.wtxt
    )
    img_gates = n_tasks * config.n_layers_img * 2 * config.d if gating != "disabled" else 0
    txt_gates = (
        count_text_gate_params(n_tasks, config.n_layers_txt, config.d)
        if gating == "symmetric"
        else 0
    )
    prompts = n_tasks * per_task_prompts
    return {
        "prompts": prompts,
        "image_gates": img_gates,
        "text_gates": txt_gates,
        "total": prompts + img_gates + txt_gates,
    }
