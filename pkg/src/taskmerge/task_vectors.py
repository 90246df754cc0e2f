"""Task vectors (fine-tuned minus base weights) and their streaming statistics.

The merge coefficients downstream need only the squared norms of the task
vectors, and those are accumulated tensor-by-tensor in 64-bit reals, so whole
checkpoints never have to be resident. The pairwise Gram matrix (for the
cosine-similarity diagnostic) is opt-in because it forces all task diffs for
a tensor to be live at once.

Reduction order is fixed: numpy's deterministic pairwise reduction within a
tensor, then a sequential fold over tensors in sorted-name order. Two runs
over the same files give bit-identical results.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

import numpy as np

from . import jsonutil
from .errors import ValidationError
from .tensor_store import CheckpointHandle, TensorBuffer, read_tensor, validate_compatibility


@dataclass
class TaskVectorStats:
    task_ids: list[str]
    sq_norms: list[float]
    gram: np.ndarray | None = None
    per_tensor_breakdown: dict[str, list[float]] | None = None
    missing_names: dict[str, list[str]] | None = None

    @property
    def num_tasks(self) -> int:
        return len(self.task_ids)

    def to_dict(self) -> dict:
        out: dict = {"tasks": list(self.task_ids), "sq_norms": list(self.sq_norms)}
        if self.gram is not None:
            out["cosine"] = cosine_matrix(self).values.tolist()
        return out

    def to_json(self, indent: int | None = None) -> str:
        return jsonutil.dumps(self.to_dict(), indent=indent)

    def digest(self) -> str:
        """Stable fingerprint of (task_ids, sq_norms), for audit trails."""
        canonical = jsonutil.dumps(
            {"tasks": list(self.task_ids), "sq_norms": list(self.sq_norms)}
        )
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass
class CosineMatrix:
    task_ids: list[str]
    values: np.ndarray


def task_vector_tensor(fine: TensorBuffer, base: TensorBuffer) -> TensorBuffer:
    """Element-wise fine - base for one tensor."""
    if fine.name != base.name:
        raise ValidationError(f"name mismatch: '{fine.name}' vs '{base.name}'")
    if fine.shape != base.shape:
        raise ValidationError(
            f"tensor '{fine.name}': shape {list(fine.shape)} vs {list(base.shape)}"
        )
    return TensorBuffer(fine.name, fine.shape, fine.values - base.values)


class StatsAccumulator:
    """Accumulates squared norms (and optionally the Gram matrix) of task
    vectors, one tensor at a time. Works from file streams or raw arrays.

    Norms-only callers can feed one task diff at a time via ``add_partial``
    (so a single diff buffer is ever live); the Gram path needs every task's
    diff for a tensor at once, via ``add_tensor``.
    """

    def __init__(self, task_ids: list[str], want_gram: bool = False):
        if not task_ids:
            raise ValidationError("need at least one task")
        self.task_ids = list(task_ids)
        self.want_gram = want_gram
        t = len(task_ids)
        self._sq = np.zeros(t, dtype=np.float64)
        self._gram = np.zeros((t, t), dtype=np.float64) if want_gram else None
        self._breakdown: dict[str, list[float]] = {}
        self._missing: dict[str, list[str]] = {}

    def add_partial(self, name: str, t: int, diff: np.ndarray) -> None:
        p = float(np.sum(diff * diff))
        self._sq[t] += p
        self._breakdown.setdefault(name, [0.0] * len(self.task_ids))[t] = p

    def add_tensor(self, name: str, diffs: dict[int, np.ndarray]) -> None:
        """Fold one tensor's task diffs in. Absent indices contribute zero,
        and are recorded as missing."""
        self._breakdown.setdefault(name, [0.0] * len(self.task_ids))
        for t in sorted(diffs):
            self.add_partial(name, t, diffs[t])
        if self._gram is not None:
            idx = sorted(diffs)
            for a, i in enumerate(idx):
                for j in idx[a + 1 :]:
                    p = float(np.sum(diffs[i] * diffs[j]))
                    self._gram[i, j] += p
                    self._gram[j, i] += p
        for t, tid in enumerate(self.task_ids):
            if t not in diffs:
                self.mark_missing(name, t)

    def mark_missing(self, name: str, t: int) -> None:
        self._missing.setdefault(name, []).append(self.task_ids[t])

    def finalize(self) -> TaskVectorStats:
        if self._gram is not None:
            # off-diagonals were accumulated pairwise; the diagonal is the
            # squared norm itself, computed once in add_partial
            np.fill_diagonal(self._gram, self._sq)
        return TaskVectorStats(
            task_ids=self.task_ids,
            sq_norms=self._sq.tolist(),
            gram=self._gram,
            per_tensor_breakdown=dict(sorted(self._breakdown.items())),
            missing_names=dict(sorted(self._missing.items())) or None,
        )


def compute_stats(
    base: CheckpointHandle,
    models: list[CheckpointHandle],
    want_gram: bool = False,
    strict: bool = True,
    task_ids: list[str] | None = None,
) -> TaskVectorStats:
    """Stream task-vector statistics for *models* against *base*.

    Strict mode rejects any name drift; lenient mode lets tensors missing
    from a model contribute zero to its statistics (they are reported in
    ``missing_names``). Shape mismatches on common names are always fatal.
    Peak memory is a handful of single-tensor buffers, never a whole model.
    """
    if not models:
        raise ValidationError("need at least one model")
    if task_ids is None:
        task_ids = default_task_ids(models)
    elif len(task_ids) != len(models):
        raise ValidationError("task_ids and models length mismatch")

    report = validate_compatibility([base] + models)
    if report.shape_mismatch:
        raise ValidationError(f"shape mismatch on: {sorted(report.shape_mismatch)}")
    if strict and not report.clean:
        problems = sorted(set(report.missing) | set(report.dtype_mismatch))
        raise ValidationError(f"checkpoints are not key-compatible: {problems}")

    acc = StatsAccumulator(task_ids, want_gram)
    for name in sorted(base.index):
        base_buf = read_tensor(base, name)
        if want_gram:
            diffs = {
                t: read_tensor(m, name).values - base_buf.values
                for t, m in enumerate(models)
                if name in m.index
            }
            acc.add_tensor(name, diffs)
        else:
            for t, model in enumerate(models):
                if name in model.index:
                    d = read_tensor(model, name).values - base_buf.values
                    acc.add_partial(name, t, d)
                else:
                    acc.mark_missing(name, t)
    return acc.finalize()


def stats_from_arrays(
    task_ids: list[str], vectors: list[np.ndarray], want_gram: bool = False
) -> TaskVectorStats:
    """Statistics of in-memory task vectors (one flat array per task)."""
    acc = StatsAccumulator(task_ids, want_gram)
    acc.add_tensor(
        "__flat__", {t: np.asarray(v, dtype=np.float64).reshape(-1) for t, v in enumerate(vectors)}
    )
    return acc.finalize()


def cosine_matrix(stats: TaskVectorStats) -> CosineMatrix:
    """Pairwise cosine similarities gram[i,j] / sqrt(sq_norms[i]*sq_norms[j])."""
    if stats.gram is None:
        raise ValidationError("cosine matrix requires gram statistics")
    sq = np.asarray(stats.sq_norms, dtype=np.float64)
    if np.any(sq <= 0.0):
        bad = [stats.task_ids[i] for i in np.nonzero(sq <= 0.0)[0]]
        raise ValidationError(f"degenerate task vector (zero norm): {bad}")
    scale = np.sqrt(np.outer(sq, sq))
    return CosineMatrix(list(stats.task_ids), stats.gram / scale)


def default_task_ids(models: list[CheckpointHandle]) -> list[str]:
    """Task labels from file stems; disambiguated by index on collision."""
    ids = [os.path.splitext(os.path.basename(m.path))[0] for m in models]
    if len(set(ids)) != len(ids):
        ids = [f"{s}#{i}" for i, s in enumerate(ids)]
    return ids
