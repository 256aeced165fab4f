"""Synthetic multi-domain benchmark and the Transfer/Average/Last metrics.

Domains are generated directly in the toy encoders' token space so every
experiment exercises the full encoder/gating path. Each image sample mixes
tokens from its class caption (the cross-modal signal), a domain token set
(the inter-domain shift), one of the class's mode token sets (intra-class
multi-modality), and uniform noise. Class ids are globally unique, so class
sets are disjoint across domains by construction.

The evaluation grid A has T+1 rows and T columns: A[i][j] is the accuracy on
task j+1's test set after training stage i, with row 0 the untrained
zero-shot pass. Transfer for task j averages the pre-exposure entries
(rows i < j, including row 0); Last reads the final row; Average averages
rows 1..T. Headline Transfer averages task columns j >= 2, matching the
convention that the first task has no pre-exposure entries beyond zero-shot.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderConfig, class_token_sequence
from .numerics import make_rng

__all__ = [
    "SyntheticDomain",
    "TaskData",
    "generate_benchmark",
    "apply_order",
    "subsample_shots",
    "new_accuracy_matrix",
    "compute_metrics",
    "MetricSummary",
    "matrix_to_records",
    "records_to_matrix",
    "format_matrix_table",
]

# per-sample token mix at seq_len 16: 11 caption + 2 mode + shift-scaled style
_SIG_FRAC = 0.6875
_MODE_FRAC = 0.125
_DOM_FRAC = 0.25


@dataclass(frozen=True)
class SyntheticDomain:
    """Generator spec for one visual domain (= one task).

    ``style_family`` selects the visual-style token pool. Domains sharing a
    family look alike to visual statistics while their class captions stay
    distinct, the way real benchmarks contain visually confusable datasets;
    the default pairs every other domain (1 and 3 alike, 2 and 4 alike).
    """

    domain_id: int
    n_classes: int = 4
    modes_per_class: int = 3
    shift: float = 1.5  # scales how many visual-style tokens each sample carries
    n_train: int = 32  # per class
    n_test: int = 12  # per class
    style_family: int = -1  # -1: domain_id % 2

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("domains need at least 2 classes")
        if not (1 <= self.modes_per_class <= 3):
            raise ValueError("modes_per_class must be 1..3")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("sample counts must be positive")
        if self.shift < 0:
            raise ValueError("shift must be non-negative")

    @property
    def style(self) -> int:
        return self.domain_id % 2 if self.style_family < 0 else self.style_family

    def class_ids(self) -> list:
        return [100 * self.domain_id + j for j in range(self.n_classes)]


@dataclass
class TaskData:
    """One task's materialised data."""

    domain_id: int
    name: str
    classes: list
    X_train: np.ndarray
    y_train: np.ndarray
    train_ids: list
    X_test: np.ndarray
    y_test: np.ndarray
    test_ids: list


def _mode_tokens(class_id: int, mode: int, vocab: int, size: int = 4) -> np.ndarray:
    rng = make_rng(0xBEEF, "mode-tokens", class_id, mode)
    return rng.integers(0, vocab, size=size, dtype=np.int64)


def _style_tokens(domain: "SyntheticDomain", cfg: EncoderConfig, size: int = 8) -> np.ndarray:
    """Visual-style pool: three quarters shared with the domain's style family
    (what makes sibling domains visually confusable for feature statistics),
    one quarter the domain's own caption theme (what lets text prototypes
    route its images)."""
    from .encoder import caption_theme_tokens

    rng = make_rng(0xBEEF, "style-tokens", domain.style)
    n_fam = (3 * size) // 4
    fam = rng.integers(0, cfg.vocab_size, size=n_fam, dtype=np.int64)
    own = caption_theme_tokens(domain.domain_id, cfg, size - n_fam)
    return np.concatenate([fam, own])


def _sample_tokens(rng, caption, dom_pool, mode_pool, cfg, shift) -> np.ndarray:
    S = cfg.seq_len
    n_sig = max(1, round(_SIG_FRAC * S))
    n_mode = round(_MODE_FRAC * S)
    n_dom = min(round(_DOM_FRAC * S * shift), S - n_sig - n_mode)
    n_noise = S - n_sig - n_mode - n_dom
    parts = [
        rng.choice(caption, size=n_sig, replace=True),
        rng.choice(mode_pool, size=n_mode, replace=True),
        rng.choice(dom_pool, size=n_dom, replace=True) if n_dom else np.empty(0, np.int64),
        rng.integers(0, cfg.vocab_size, size=n_noise, dtype=np.int64),
    ]
    seq = np.concatenate(parts).astype(np.int64)
    rng.shuffle(seq)
    return seq


def _make_split(domain: SyntheticDomain, cfg: EncoderConfig, seed: int, split: str,
                per_class: int):
    X, y, ids = [], [], []
    dom_pool = _style_tokens(domain, cfg)
    for c in domain.class_ids():
        caption = class_token_sequence(c, cfg)
        rng = make_rng(seed, "bench", domain.domain_id, c, split)
        for k in range(per_class):
            m = int(rng.integers(domain.modes_per_class))
            mode_pool = _mode_tokens(c, m, cfg.vocab_size)
            X.append(_sample_tokens(rng, caption, dom_pool, mode_pool, cfg, domain.shift))
            y.append(c)
            ids.append(f"d{domain.domain_id}-c{c}-{split}-{k}")
    return np.stack(X), np.asarray(y, dtype=np.int64), ids


def generate_benchmark(domains, seed: int, cfg: EncoderConfig | None = None) -> list:
    """Materialise every domain deterministically. Same seed, same bytes."""
    cfg = cfg or EncoderConfig()
    domains = list(domains)
    if len(domains) < 2:
        raise ValueError("a benchmark needs at least 2 domains")
    if len({d.domain_id for d in domains}) != len(domains):
        raise ValueError("domain ids must be unique")
    tasks = []
    for dom in domains:
        X_tr, y_tr, id_tr = _make_split(dom, cfg, seed, "train", dom.n_train)
        X_te, y_te, id_te = _make_split(dom, cfg, seed, "test", dom.n_test)
        tasks.append(TaskData(
            domain_id=dom.domain_id, name=f"domain{dom.domain_id}",
            classes=dom.class_ids(), X_train=X_tr, y_train=y_tr, train_ids=id_tr,
            X_test=X_te, y_test=y_te, test_ids=id_te,
        ))
    return tasks


def apply_order(tasks, permutation) -> list:
    """Reorder the task sequence; the underlying data objects are untouched."""
    perm = list(permutation)
    if sorted(perm) != list(range(len(tasks))):
        raise ValueError(f"permutation must be a bijection over 0..{len(tasks) - 1}")
    return [tasks[p] for p in perm]


def subsample_shots(task: TaskData, shots: int, seed: int) -> TaskData:
    """Keep min(shots, available) training samples per class; tests untouched."""
    if shots < 1:
        raise ValueError("shots must be at least 1")
    keep = []
    rng = make_rng(seed, "shots", task.domain_id, shots)
    for c in task.classes:
        idx = np.flatnonzero(task.y_train == c)
        if idx.size == 0:
            raise ValueError(f"class {c} has no training samples")
        take = min(shots, idx.size)
        keep.extend(rng.choice(idx, size=take, replace=False))
    keep = np.sort(np.asarray(keep))
    return TaskData(
        domain_id=task.domain_id, name=task.name, classes=list(task.classes),
        X_train=task.X_train[keep], y_train=task.y_train[keep],
        train_ids=[task.train_ids[i] for i in keep],
        X_test=task.X_test, y_test=task.y_test, test_ids=list(task.test_ids),
    )


# ---------------------------------------------------------------- metrics --

def new_accuracy_matrix(n_tasks: int) -> np.ndarray:
    """(T+1, T) grid initialised to NaN; row 0 is the zero-shot row."""
    return np.full((n_tasks + 1, n_tasks), np.nan)


@dataclass(frozen=True)
class MetricSummary:
    transfer: float
    average: float
    last: float
    transfer_per_task: tuple
    average_per_task: tuple
    last_per_task: tuple

    def as_dict(self) -> dict:
        return {
            "transfer": self.transfer,
            "average": self.average,
            "last": self.last,
            "transfer_per_task": list(self.transfer_per_task),
            "average_per_task": list(self.average_per_task),
            "last_per_task": list(self.last_per_task),
        }


def compute_metrics(A) -> MetricSummary:
    """Transfer/Average/Last from a filled accuracy grid.

    Per task j (1-based): Transfer_j averages A[i][j] over 0 <= i < j,
    Average_j averages rows 1..T, Last_j is A[T][j]. Headline Transfer
    averages tasks j >= 2 (NaN when T == 1); the other headlines average all
    tasks.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1] + 1:
        raise ValueError(f"accuracy grid must be (T+1, T), got {A.shape}")
    if np.isnan(A).any():
        raise ValueError("accuracy grid has missing entries")
    T = A.shape[1]
    transfer_per = tuple(float(A[:j, j - 1].mean()) for j in range(1, T + 1))
    average_per = tuple(float(A[1:, j - 1].mean()) for j in range(1, T + 1))
    last_per = tuple(float(A[T, j - 1]) for j in range(1, T + 1))
    transfer = float(np.mean(transfer_per[1:])) if T > 1 else float("nan")
    return MetricSummary(
        transfer=transfer,
        average=float(np.mean(average_per)),
        last=float(np.mean(last_per)),
        transfer_per_task=transfer_per,
        average_per_task=average_per,
        last_per_task=last_per,
    )


def matrix_to_records(A) -> str:
    """One CSV row per (stage, task, accuracy); floats round-trip exactly."""
    lines = ["i,j,accuracy"]
    A = np.asarray(A)
    for i in range(A.shape[0]):
        for j in range(A.shape[1]):
            lines.append(f"{i},{j + 1},{A[i, j]!r}")
    return "\n".join(lines) + "\n"


def records_to_matrix(text: str) -> np.ndarray:
    rows = [ln for ln in text.strip().splitlines()[1:] if ln]
    entries = []
    for ln in rows:
        i, j, acc = ln.split(",")
        entries.append((int(i), int(j), float(acc)))
    T = max(j for _, j, _ in entries)
    A = new_accuracy_matrix(T)
    for i, j, acc in entries:
        A[i, j - 1] = acc
    return A


def format_matrix_table(A, names, metrics: MetricSummary | None = None) -> str:
    """Human-readable grid in the Transfer/Average/Last layout."""
    A = np.asarray(A)
    T = A.shape[1]
    if len(names) != T:
        raise ValueError("need one name per task")
    width = max(9, *(len(n) + 2 for n in names))
    head = "stage".ljust(10) + "".join(n.rjust(width) for n in names)
    lines = [head]
    for i in range(A.shape[0]):
        label = "zero-shot" if i == 0 else f"after {i}"
        lines.append(label.ljust(10) + "".join(f"{A[i, j]:{width}.4f}" for j in range(T)))
    if metrics is not None:
        lines.append("")
        lines.append(
            f"transfer {metrics.transfer:.4f}  "
            f"average {metrics.average:.4f}  last {metrics.last:.4f}"
        )
    return "\n".join(lines) + "\n"
