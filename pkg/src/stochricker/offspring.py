"""Offspring (litter size) laws with mean e^r.

Three families are supported:

* ``poisson``: Poisson(e^r), variance e^r.
* ``geometric``: geometric on {start, start+1, ...}. With ``start=0`` the
  variance is mu(1+mu); with ``start=1`` we get q_0 = 0 and variance mu(mu-1)
  (requires mu > 1).
* ``finite``: an arbitrary pmf on {0, ..., len(probs)-1}.

Every law knows how to evaluate its pmf, its log-mgf with two derivatives, the
pmf of a sum of j iid litters, and how to sample such sums in bulk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from .errors import DomainError

KINDS = ("poisson", "geometric", "finite")

# Tail mass dropped when truncating pmfs.
TAIL_MASS = 1e-14


@dataclass(frozen=True)
class OffspringDistribution:
    kind: str
    mean: float
    start: int = 0
    probs: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown offspring kind {self.kind!r}")
        if not (math.isfinite(self.mean) and self.mean > 0):
            raise DomainError(f"offspring mean must be finite and positive, got {self.mean}")
        if self.kind == "geometric":
            if self.start not in (0, 1):
                raise DomainError("geometric start must be 0 or 1")
            if self.start == 1 and self.mean <= 1:
                raise DomainError("geometric law on {1,2,...} needs mean > 1 (r > 0)")
        if self.kind == "finite":
            p = np.asarray(self.probs, dtype=float)
            if p.ndim != 1 or p.size == 0 or np.any(p < 0):
                raise DomainError("finite pmf must be a nonempty nonnegative vector")
            if abs(p.sum() - 1.0) > 1e-12:
                raise DomainError(f"finite pmf sums to {p.sum():.15g}, not 1")
            m = float(np.arange(p.size) @ p)
            if abs(m - self.mean) > 1e-9 * max(1.0, self.mean):
                raise DomainError(f"finite pmf has mean {m}, declared {self.mean}")

    # constructors -----------------------------------------------------------

    @classmethod
    def poisson(cls, r):
        return cls("poisson", math.exp(r))

    @classmethod
    def geometric(cls, r, start=0):
        return cls("geometric", math.exp(r), start=start)

    @classmethod
    def finite(cls, probs):
        p = np.asarray(probs, dtype=float)
        # drop a negligible tail so the support stays short
        keep = len(p)
        while keep > 1 and p[keep - 1] < TAIL_MASS:
            keep -= 1
        p = p[:keep] / p[:keep].sum()
        return cls("finite", float(np.arange(p.size) @ p), probs=tuple(p.tolist()))

    # basic moments ----------------------------------------------------------

    @property
    def _theta(self):
        # ratio of the geometric tail
        if self.start == 0:
            return self.mean / (1.0 + self.mean)
        return 1.0 - 1.0 / self.mean

    @property
    def variance(self):
        mu = self.mean
        if self.kind == "poisson":
            return mu
        if self.kind == "geometric":
            return mu * (1.0 + mu) if self.start == 0 else mu * (mu - 1.0)
        p = np.asarray(self.probs)
        k = np.arange(p.size)
        return float(((k - mu) ** 2) @ p)

    @property
    def q0(self):
        return float(self.pmf(0))

    @property
    def max_support(self):
        """Largest possible litter size (inf for unbounded laws)."""
        if self.kind == "finite":
            return len(self.probs) - 1
        return math.inf

    def pmf(self, k):
        k = np.asarray(k)
        if self.kind == "poisson":
            out = stats.poisson.pmf(k, self.mean)
        elif self.kind == "geometric":
            th = self._theta
            j = k - self.start
            out = np.where(j >= 0, (1.0 - th) * th ** np.maximum(j, 0), 0.0)
        else:
            p = np.asarray(self.probs)
            out = np.where((k >= 0) & (k < p.size), p[np.clip(k, 0, p.size - 1)], 0.0)
        return out if out.ndim else float(out)

    # log-mgf ----------------------------------------------------------------

    @property
    def mgf_abscissa(self):
        """Supremum of s for which the mgf is finite."""
        if self.kind == "geometric":
            return -math.log(self._theta)
        return math.inf

    def log_mgf(self, s):
        """Return (log S(s), d/ds log S, d2/ds2 log S)."""
        if s >= self.mgf_abscissa:
            raise DomainError(f"s={s} outside the mgf convergence region")
        if self.kind == "poisson":
            e = self.mean * math.exp(s)
            return e - self.mean, e, e
        if self.kind == "geometric":
            th = self._theta
            u = th * math.exp(s)
            d1 = u / (1.0 - u)
            d2 = u / (1.0 - u) ** 2
            if self.start == 0:
                return math.log1p(-th) - math.log1p(-u), d1, d2
            return math.log1p(-th) + s - math.log1p(-u), 1.0 + d1, d2
        p = np.asarray(self.probs)
        k = np.arange(p.size)
        with np.errstate(divide="ignore"):
            lw = np.log(p) + k * s
        lz = logsumexp(lw)
        w = np.exp(lw - lz)
        m1 = float(k @ w)
        return float(lz), m1, float(((k - m1) ** 2) @ w)

    # sums of iid litters ----------------------------------------------------

    def sum_pmf(self, j, kmax):
        """pmf on 0..kmax of the sum of j iid litters, for each j in the array ``j``.

        Returns an array of shape ``(len(j), kmax + 1)``.
        """
        j = np.atleast_1d(np.asarray(j, dtype=np.int64))
        k = np.arange(kmax + 1)
        if self.kind == "poisson":
            return stats.poisson.pmf(k[None, :], j[:, None] * self.mean)
        if self.kind == "geometric":
            out = np.zeros((j.size, kmax + 1))
            for i, jj in enumerate(j):
                if jj == 0:
                    out[i, 0] = 1.0
                    continue
                shift = self.start * jj
                if shift > kmax:
                    continue
                out[i, shift:] = stats.nbinom.pmf(k[: kmax + 1 - shift], jj, 1.0 - self._theta)
            return out
        return self.sum_table(int(j.max()), kmax)[j]

    def sum_table(self, jmax, kmax):
        """Rows j = 0..jmax: pmf on 0..kmax of the sum of j iid litters.

        Built by repeated truncated convolution, which is exact on 0..kmax.
        """
        base = self.pmf(np.arange(kmax + 1))
        table = np.zeros((jmax + 1, kmax + 1))
        table[0, 0] = 1.0
        for jj in range(1, jmax + 1):
            table[jj] = np.convolve(table[jj - 1], base)[: kmax + 1]
        return table

    def sum_sf(self, j, kmax):
        """P(sum of j iid litters > kmax) for each j (closed form where available)."""
        j = np.atleast_1d(np.asarray(j, dtype=np.int64))
        if self.kind == "poisson":
            return stats.poisson.sf(kmax, j * self.mean)
        if self.kind == "geometric":
            out = np.zeros(j.size)
            pos = j > 0
            out[pos] = stats.nbinom.sf(kmax - self.start * j[pos], j[pos], 1.0 - self._theta)
            return out
        return np.clip(1.0 - self.sum_pmf(j, kmax).sum(axis=1), 0.0, 1.0)

    def sample_sum(self, j, rng):
        """Draw the sum of j iid litters for every entry of the integer array ``j``."""
        j = np.asarray(j, dtype=np.int64)
        if self.kind == "poisson":
            return rng.poisson(j * self.mean)
        if self.kind == "geometric":
            out = np.zeros(j.shape, dtype=np.int64)
            pos = j > 0
            if np.any(pos):
                out[pos] = rng.negative_binomial(j[pos], 1.0 - self._theta) + self.start * j[pos]
            return out
        p = np.asarray(self.probs)
        counts = rng.multinomial(j.ravel(), p)
        return (counts @ np.arange(p.size)).reshape(j.shape)

    def to_dict(self):
        d = {"kind": self.kind, "mean": self.mean}
        if self.kind == "geometric":
            d["start"] = self.start
        if self.kind == "finite":
            d["probs"] = list(self.probs)
        return d
