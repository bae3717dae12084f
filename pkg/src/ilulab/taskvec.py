"""Task vectors: parameter-space differences between checkpoints and their geometry.

A task vector is ``target - source`` flattened in canonical parameter order.
The unlearning direction is ``theta_u - theta_o``, the fine-tuning direction
``theta_ft - theta_o`` and the post-unlearning fine-tuning direction
``theta_u_ft - theta_u``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError
from .models import ParameterVector

COLLINEAR_TOL = 1e-9


@dataclass(frozen=True)
class TaskVector:
    vector: np.ndarray
    source: str = ""
    target: str = ""

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64).ravel()
        v.flags.writeable = False
        object.__setattr__(self, "vector", v)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.vector))

    def __len__(self):
        return self.vector.size

    def __add__(self, other: "TaskVector") -> "TaskVector":
        _same_length(self, other)
        return TaskVector(self.vector + other.vector, self.source, other.target)

    def __neg__(self) -> "TaskVector":
        return TaskVector(-self.vector, self.target, self.source)

    def scaled(self, alpha: float) -> "TaskVector":
        return TaskVector(alpha * self.vector, self.source, self.target)


def _same_length(a: TaskVector, b: TaskVector):
    if a.vector.size != b.vector.size:
        raise ArgumentError(f"task vectors differ in length ({a.vector.size} vs {b.vector.size})")


def task_vector(target: ParameterVector, source: ParameterVector, target_id="target",
                source_id="source") -> TaskVector:
    """``target - source`` for two parameter vectors of the same model config."""
    if not target.same_layout(source):
        raise ArgumentError("task vector needs checkpoints with identical model configs")
    return TaskVector(target.flat - source.flat, source_id, target_id)


def cosine(a: TaskVector, b: TaskVector) -> float:
    """Normalised dot product; zero-norm inputs have no direction and are rejected."""
    _same_length(a, b)
    na, nb = a.norm, b.norm
    if na == 0.0 or nb == 0.0:
        raise ArgumentError("cosine of a zero-norm task vector is undefined")
    # normalise before the dot product so that scale changes cancel exactly
    c = float(np.dot(a.vector / na, b.vector / nb))
    return min(1.0, max(-1.0, c))


def project_2d(basis_u: TaskVector, basis_ft: TaskVector, others=()):
    """Coordinates in the Gram-Schmidt plane spanned by ``basis_u`` and ``basis_ft``.

    ``e1`` is the unit unlearning direction and ``e2`` the component of the
    fine-tuning direction orthogonal to it, so ``basis_u`` lands on
    ``(|tau_u|, 0)`` and ``basis_ft`` has a non-negative second coordinate.
    Returns a list of ``(x, y)`` pairs: the two basis vectors first, then
    ``others`` in order.
    """
    _same_length(basis_u, basis_ft)
    nu, nf = basis_u.norm, basis_ft.norm
    if nu == 0.0 or nf == 0.0:
        raise ArgumentError("projection basis vectors must be nonzero")
    if abs(cosine(basis_u, basis_ft)) >= 1.0 - COLLINEAR_TOL:
        raise ArgumentError("projection basis is degenerate (collinear task vectors)")
    e1 = basis_u.vector / nu
    r = basis_ft.vector - np.dot(basis_ft.vector, e1) * e1
    e2 = r / np.linalg.norm(r)
    coords = [(nu, 0.0), (float(np.dot(basis_ft.vector, e1)), float(np.dot(basis_ft.vector, e2)))]
    for v in others:
        _same_length(basis_u, v)
        coords.append((float(np.dot(v.vector, e1)), float(np.dot(v.vector, e2))))
    return coords


def cosine_matrix(vectors: dict):
    """Pairwise cosines as a ``(names, matrix)`` pair; zero vectors give NaN entries."""
    names = list(vectors)
    n = len(names)
    m = np.full((n, n), np.nan)
    for i in range(n):
        for j in range(n):
            try:
                m[i, j] = cosine(vectors[names[i]], vectors[names[j]])
            except ArgumentError:
                pass
    return names, m


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else repr(float(x))


def cosine_csv(vectors: dict) -> str:
    names, m = cosine_matrix(vectors)
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["vector"] + names)
    for name, row in zip(names, m):
        w.writerow([name] + [_fmt(x) for x in row])
    return out.getvalue()


def coords_csv(basis_u_name: str, basis_u: TaskVector, basis_ft_name: str, basis_ft: TaskVector,
               others: dict) -> str:
    """2D coordinates as CSV; the header comment records the projection method."""
    coords = project_2d(basis_u, basis_ft, list(others.values()))
    names = [basis_u_name, basis_ft_name] + list(others)
    out = io.StringIO()
    out.write(f"# projection=gram-schmidt e1={basis_u_name} e2=orth({basis_ft_name})\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["vector", "x", "y", "norm"])
    vecs = [basis_u, basis_ft] + list(others.values())
    for name, (x, y), v in zip(names, coords, vecs):
        w.writerow([name, repr(x), repr(y), repr(v.norm)])
    return out.getvalue()
