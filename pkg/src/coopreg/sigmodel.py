"""Reference/disturbance signal models and the internal-model matrices.

A signal model is a marginally stable LTI generator ``v' = S v`` with purely
imaginary spectrum.  The joint model of several generators keeps one maximal
Jordan block per distinct eigenvalue (the cyclic part); the per-agent
internal model stacks one copy of the joint model per output channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import Uncontrollable, kron, pbh_uncontrollable_modes

SPECTRUM_TOL = 1e-10


class SpectrumOffAxis(ValueError):
    pass


@dataclass(frozen=True)
class SignalModel:
    """Generator ``S`` with output matrix ``P`` (may be empty)."""

    S: np.ndarray
    P: np.ndarray
    kind: str = "joint"  # reference | disturbance | joint
    jordan: tuple = ()   # optional ((eigenvalue, block_sizes), ...) from config

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.S, dtype=float))
        p = np.atleast_2d(np.asarray(self.P, dtype=float)) if np.size(self.P) else \
            np.zeros((0, s.shape[0]))
        eig = np.linalg.eigvals(s)
        off = np.max(np.abs(eig.real)) if eig.size else 0.0
        if off > SPECTRUM_TOL:
            raise SpectrumOffAxis(
                f"spectrum must be purely imaginary, max |Re| = {off:.2e}"
            )
        object.__setattr__(self, "S", s)
        object.__setattr__(self, "P", p)

    @property
    def n_v(self):
        return self.S.shape[0]


@dataclass(frozen=True)
class InternalModelSpec:
    """Stacked internal model for one group: one joint-model copy per channel."""

    S: np.ndarray
    b_y: np.ndarray
    n_minus_bar: int
    S_tilde: np.ndarray
    B_tilde_y: np.ndarray

    @property
    def n_v(self):
        return self.S.shape[0]

    @property
    def n_vbar(self):
        return self.n_minus_bar * self.n_v


def _cluster(values, tol=1e-8):
    """Group nearly equal complex numbers, returning representatives."""
    reps = []
    for v in values:
        for k, r in enumerate(reps):
            if abs(v - r) <= tol:
                break
        else:
            reps.append(complex(v))
    return reps


def jordan_structure(s, tol=1e-8):
    """Block sizes per distinct eigenvalue via ranks of ``(S - mu I)^k``.

    Reliable for the small integer-entry generators used here; supply the
    structure explicitly in the model config otherwise.
    """
    s = np.atleast_2d(np.asarray(s, dtype=float))
    n = s.shape[0]
    out = []
    for mu in _cluster(np.linalg.eigvals(s), tol=tol):
        m = s.astype(complex) - mu * np.eye(n)
        ranks = [n]
        power = np.eye(n, dtype=complex)
        for _ in range(n):
            power = power @ m
            ranks.append(np.linalg.matrix_rank(power, tol=1e-8 * max(1.0, np.max(np.abs(power)))))
            if ranks[-1] == ranks[-2]:
                break
        # number of blocks of size >= k is ranks[k-1] - ranks[k]
        sizes = []
        for k in range(1, len(ranks)):
            geq_k = ranks[k - 1] - ranks[k]
            sizes.append(geq_k)
        blocks = []
        for k in range(len(sizes), 0, -1):
            count = sizes[k - 1] - (sizes[k] if k < len(sizes) else 0)
            blocks.extend([k] * count)
        if blocks:
            out.append((mu, tuple(sorted(blocks, reverse=True))))
    return out


def _is_integer_matrix(s):
    return np.allclose(s, np.round(s), atol=1e-12)


def _real_jordan_block(mu, size):
    """Real canonical block for eigenvalue ``mu`` (and its conjugate)."""
    if abs(mu.imag) <= SPECTRUM_TOL:
        return np.eye(size, k=1) * 1.0 + mu.real * np.eye(size)
    w = abs(mu.imag)
    c = np.array([[0.0, w], [-w, 0.0]])
    blk = np.zeros((2 * size, 2 * size))
    for k in range(size):
        blk[2 * k:2 * k + 2, 2 * k:2 * k + 2] = c
        if k + 1 < size:
            blk[2 * k:2 * k + 2, 2 * k + 2:2 * k + 4] = np.eye(2)
    return blk


def cyclic_part(models, tol=1e-8):
    """Joint signal model: one maximal Jordan block per distinct eigenvalue."""
    structures = []
    for m in models:
        if m.jordan:
            structures.extend((complex(mu), tuple(sz)) for mu, sz in m.jordan)
        else:
            if not _is_integer_matrix(m.S):
                raise ValueError(
                    "numerical Jordan analysis is restricted to integer "
                    "generators; supply the chain structure in the config"
                )
            structures.extend(jordan_structure(m.S, tol=tol))
    best = {}
    for mu, sizes in structures:
        key = None
        for k in best:
            if abs(k - mu) <= tol:
                key = k
                break
        if key is None:
            key = mu
            best[key] = 0
        best[key] = max(best[key], max(sizes))
    # keep one representative of each conjugate pair, preferring Im >= 0
    kept = {}
    for mu, size in best.items():
        rep = mu if mu.imag >= -tol else mu.conjugate()
        for k in kept:
            if abs(k - rep) <= tol:
                kept[k] = max(kept[k], size)
                break
        else:
            kept[rep] = size
    order = sorted(kept.items(), key=lambda t: (abs(t[0]), t[0].imag))
    blocks = [_real_jordan_block(mu, size) for mu, size in order]
    s = np.zeros((0, 0)) if not blocks else _block_diag(blocks)
    jordan = tuple((mu, (size,)) for mu, size in order)
    return SignalModel(S=s, P=np.zeros((0, s.shape[0])), kind="joint",
                       jordan=jordan)


def _block_diag(blocks):
    n = sum(b.shape[0] for b in blocks)
    out = np.zeros((n, n))
    at = 0
    for b in blocks:
        out[at:at + b.shape[0], at:at + b.shape[0]] = b
        at += b.shape[0]
    return out


def internal_model(s, b_y, n_minus_bar):
    """Assemble the stacked internal model and check controllability."""
    s = np.atleast_2d(np.asarray(s, dtype=float))
    b_y = np.asarray(b_y, dtype=float).reshape(-1, 1)
    if b_y.shape[0] != s.shape[0]:
        raise ValueError("b_y must have one entry per joint-model state")
    bad = pbh_uncontrollable_modes(s, b_y)
    if bad:
        raise Uncontrollable(
            f"(S, b_y) fails the PBH test at eigenvalue {bad[0]:.4g}", bad[0]
        )
    n_minus_bar = int(n_minus_bar)
    if n_minus_bar <= 0:
        raise ValueError("the number of output channels must be positive")
    eye = np.eye(n_minus_bar)
    return InternalModelSpec(
        S=s, b_y=b_y, n_minus_bar=n_minus_bar,
        S_tilde=kron(eye, s), B_tilde_y=kron(eye, b_y),
    )


def jordan_chains(s, side="right", tol=1e-8):
    """Generalized eigenvector chains of a cyclic generator.

    Returns ``[(mu, [v1, ..., vL]), ...]`` with ``(S - mu I) v1 = 0`` and
    ``(S - mu I) v_{l} = v_{l-1}``; left chains satisfy the transposed
    relations (no conjugation).
    """
    s = np.atleast_2d(np.asarray(s, dtype=float))
    work = s.T if side == "left" else s
    n = work.shape[0]
    chains = []
    for mu, sizes in jordan_structure(work, tol=tol):
        if len(sizes) != 1:
            raise ValueError(
                f"generator is not cyclic: eigenvalue {mu:.4g} has "
                f"{len(sizes)} Jordan blocks"
            )
        size = sizes[0]
        m = work.astype(complex) - mu * np.eye(n)
        _, sv, vh = np.linalg.svd(m)
        v = vh[-1].conj()
        # deterministic phase: largest component real positive
        pivot = np.argmax(np.abs(v))
        v = v / v[pivot] * np.abs(v[pivot])
        chain = [v]
        for _ in range(size - 1):
            nxt, *_ = np.linalg.lstsq(m, chain[-1], rcond=None)
            # strip the nullspace component for a deterministic representative
            nxt = nxt - (np.vdot(chain[0], nxt) / np.vdot(chain[0], chain[0])) * chain[0]
            resid = np.linalg.norm(m @ nxt - chain[-1])
            if resid > 1e-6 * max(1.0, np.linalg.norm(chain[-1])):
                raise ValueError(f"chain continuation failed at {mu:.4g}")
            chain.append(nxt)
        chains.append((mu, chain))
    return chains
