"""Stacked estimating equations, sandwich covariance and the delta method.

Each parameter block contributes per-subject estimating functions ``psi``
(rows are the subjects of one arm) and the summed Jacobian. Blocks from the
same arm share a meat matrix; different arms are independent, so the stacked
covariance is block diagonal across arms.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import EmptyCell, GradientCheckFailed, SingularBread


@dataclass(frozen=True, eq=False)
class Block:
    """One parameter block of one arm."""

    arm: int
    name: str
    value: np.ndarray
    psi: np.ndarray          # (n_arm, q); rows aligned across the arm's blocks
    jacobian: np.ndarray     # (q, q) summed over subjects

    @property
    def size(self) -> int:
        return len(self.value)


def mean_block(arm, name, values, mask=None, *, allow_empty=False) -> Block:
    """Mean-type block: ``psi_j = I_j (v_j - theta)`` with Jacobian ``-sum I_j``.

    ``values`` is (n_arm, q) or (n_arm,); ``mask`` selects the subjects that
    define the (conditional) mean.
    """
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    n, q = v.shape
    w = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    cnt = int(w.sum())
    if cnt == 0:
        if not allow_empty:
            raise EmptyCell(f"no subjects in arm {arm} define block {name!r}")
        est = np.zeros(q)
        jac = -np.eye(q)  # keeps the bread invertible; psi is identically zero
    else:
        est = v[w].mean(axis=0)
        jac = -cnt * np.eye(q)
    psi = np.where(w[:, None], v - est, 0.0)
    return Block(arm, name, est, psi, jac)


def proportion_contributions(arm, A, R, X):
    """Proportion and covariate-mean blocks for one arm at every visit.

    Returns blocks ``pi`` (A=0 & R=0), ``tau`` (A=1 & R=0), ``phi`` (A=1)
    and ``nu`` (covariate means). Conditional covariate means need a visit and
    are built with :func:`mean_block` by the estimators.
    """
    A = np.asarray(A, dtype=bool)
    R = np.asarray(R, dtype=bool)
    return {
        "pi": mean_block(arm, "pi", (~A & ~R).astype(float)),
        "tau": mean_block(arm, "tau", (A & ~R).astype(float)),
        "phi": mean_block(arm, "phi", A.astype(float)),
        "nu": mean_block(arm, "nu", X),
    }


@dataclass(frozen=True, eq=False)
class ThetaStack:
    """Stacked estimates with their sandwich covariance.

    ``index[(arm, name)]`` is the slice of the block inside ``theta``.
    """

    theta: np.ndarray
    cov: np.ndarray
    index: dict = field(repr=False)
    blocks: tuple = field(repr=False, default=())

    @property
    def size(self) -> int:
        return len(self.theta)

    def value(self, arm, name) -> np.ndarray:
        return self.theta[self.index[(arm, name)]]

    def has(self, arm, name) -> bool:
        return (arm, name) in self.index

    def lin(self, arm, name) -> list["Lin"]:
        """Block entries as :class:`Lin` objects carrying unit gradients."""
        sl = self.index[(arm, name)]
        out = []
        for pos in range(sl.start, sl.stop):
            g = np.zeros(self.size)
            g[pos] = 1.0
            out.append(Lin(self.theta[pos], g))
        return out

    def block_map(self) -> dict:
        return {f"{arm}:{name}": [sl.start, sl.stop] for (arm, name), sl in self.index.items()}

    def to_dict(self) -> dict:
        return dict(theta=self.theta.tolist(), cov=self.cov.tolist(), blocks=self.block_map())


def _invert_bread(blocks, A):
    try:
        return np.linalg.inv(A)
    except np.linalg.LinAlgError:
        pass
    for b in blocks:
        if np.linalg.matrix_rank(b.jacobian) < b.size:
            raise SingularBread(f"{b.arm}:{b.name}")
    raise SingularBread("?", "singular bread matrix")


def assemble_stack(blocks) -> ThetaStack:
    """Sandwich covariance ``A^{-1} B A^{-T}`` per arm, block diagonal across arms."""
    blocks = list(blocks)
    index = {}
    pos = 0
    for b in blocks:
        key = (b.arm, b.name)
        if key in index:
            raise ValueError(f"duplicate block {key}")
        index[key] = slice(pos, pos + b.size)
        pos += b.size
    theta = np.concatenate([b.value for b in blocks]) if blocks else np.zeros(0)
    cov = np.zeros((pos, pos))
    for arm in sorted({b.arm for b in blocks}):
        mine = [b for b in blocks if b.arm == arm]
        n_rows = {b.psi.shape[0] for b in mine}
        if len(n_rows) != 1:
            raise ValueError(f"blocks of arm {arm} disagree on the number of subjects")
        psi = np.hstack([b.psi for b in mine])
        q = psi.shape[1]
        A = np.zeros((q, q))
        at = 0
        for b in mine:
            A[at:at + b.size, at:at + b.size] = b.jacobian
            at += b.size
        Ainv = _invert_bread(mine, A)
        meat = psi.T @ psi
        V = Ainv @ meat @ Ainv.T
        V = 0.5 * (V + V.T)
        idx = np.concatenate([np.arange(index[(b.arm, b.name)].start, index[(b.arm, b.name)].stop)
                              for b in mine])
        cov[np.ix_(idx, idx)] = V
    return ThetaStack(theta, cov, index, tuple(blocks))


class Lin:
    """A scalar with its exact gradient with respect to the stacked theta.

    Only the operations the estimators need are defined. Products use the
    product rule, so any polynomial in theta gets an exact gradient.
    """

    __slots__ = ("value", "grad")

    def __init__(self, value, grad):
        self.value = float(value)
        self.grad = grad

    @staticmethod
    def const(value, size):
        return Lin(value, np.zeros(size))

    def _wrap(self, other):
        return other if isinstance(other, Lin) else Lin(other, np.zeros_like(self.grad))

    def __add__(self, other):
        other = self._wrap(other)
        return Lin(self.value + other.value, self.grad + other.grad)

    __radd__ = __add__

    def __sub__(self, other):
        other = self._wrap(other)
        return Lin(self.value - other.value, self.grad - other.grad)

    def __rsub__(self, other):
        return self._wrap(other) - self

    def __neg__(self):
        return Lin(-self.value, -self.grad)

    def __mul__(self, other):
        if isinstance(other, Lin):
            return Lin(self.value * other.value, self.value * other.grad + other.value * self.grad)
        return Lin(self.value * other, self.grad * other)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Lin({self.value!r})"


def lin_dot(a, b):
    out = a[0] * b[0]
    for x, y in zip(a[1:], b[1:]):
        out = out + x * y
    return out


def lin_values(items) -> np.ndarray:
    return np.array([x.value for x in items])


def lin_jacobian(items) -> np.ndarray:
    return np.vstack([x.grad for x in items])


@dataclass
class Functional:
    """A smooth map of theta; the gradient falls back to central differences."""

    evaluate: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray] | None = None

    def numeric_gradient(self, theta):
        theta = np.asarray(theta, dtype=float)
        f0 = np.atleast_1d(self.evaluate(theta))
        G = np.zeros((len(f0), len(theta)))
        for a in range(len(theta)):
            h = 1e-6 * (1 + abs(theta[a]))
            up, dn = theta.copy(), theta.copy()
            up[a] += h
            dn[a] -= h
            G[:, a] = (np.atleast_1d(self.evaluate(up)) - np.atleast_1d(self.evaluate(dn))) / (2 * h)
        return G

    def jacobian(self, theta, check=False):
        if self.gradient is None:
            return self.numeric_gradient(theta)
        G = np.atleast_2d(self.gradient(theta))
        if check:
            N = self.numeric_gradient(theta)
            scale = np.maximum(np.abs(G), 1.0)
            if np.any(np.abs(G - N) / scale > 1e-3):
                raise GradientCheckFailed("analytic gradient disagrees with finite differences")
        return G


def delta_method(f: Functional, stack: ThetaStack, check=False):
    """Values ``f(theta)`` and covariance ``G V G'``."""
    values = np.atleast_1d(f.evaluate(stack.theta))
    G = f.jacobian(stack.theta, check=check)
    cov = G @ stack.cov @ G.T
    return values, 0.5 * (cov + cov.T)
