"""Model constants for the two-species Ricker competition process."""

from __future__ import annotations

import math
import numbers
from dataclasses import dataclass, field, replace

from .errors import DomainError
from .offspring import OffspringDistribution

LAWS = ("poisson", "geometric", "geometric1")

SPECIES = ("U", "V")


@dataclass(frozen=True)
class ModelParams:
    """Growth rates, inhibition constants and interaction coefficients.

    ``law`` picks the offspring family for both species (``geometric1`` is the
    geometric law on {1, 2, ...}, i.e. q_0 = 0). ``offspring_u``/``offspring_v``
    override it with explicit laws, whose means must equal e^r and e^r_tilde.
    """

    r: float
    r_tilde: float
    K: float
    K_tilde: float
    a: float
    b: float
    law: str = "poisson"
    offspring_u: OffspringDistribution | None = field(default=None, compare=True)
    offspring_v: OffspringDistribution | None = field(default=None, compare=True)

    def __post_init__(self):
        for name in ("r", "r_tilde", "K", "K_tilde", "a", "b"):
            v = getattr(self, name)
            if not isinstance(v, numbers.Real) or isinstance(v, bool) or not math.isfinite(v):
                raise DomainError(f"{name} must be a finite number, got {v!r}")
        if self.K <= 0 or self.K_tilde <= 0:
            raise DomainError("K and K_tilde must be positive")
        if self.a < 0 or self.b < 0:
            raise DomainError("interaction coefficients a, b must be nonnegative")
        if self.law not in LAWS:
            raise DomainError(f"unknown offspring law {self.law!r}")
        for attr, rate in (("offspring_u", self.r), ("offspring_v", self.r_tilde)):
            law = getattr(self, attr)
            if law is not None and abs(law.mean - math.exp(rate)) > 1e-9 * math.exp(rate):
                raise DomainError(f"{attr} has mean {law.mean}, expected e^r = {math.exp(rate)}")
        if self.law == "geometric1" and (self.r <= 0 or self.r_tilde <= 0):
            raise DomainError("geometric1 law needs r > 0 and r_tilde > 0")

    @property
    def b_eff(self):
        """Effect of species V on U in normed coordinates: b K / K_tilde."""
        return self.b * self.K / self.K_tilde

    @property
    def a_eff(self):
        """Effect of species U on V in normed coordinates: a K_tilde / K."""
        return self.a * self.K_tilde / self.K

    def offspring(self, species):
        if species == "U":
            law, rate = self.offspring_u, self.r
        elif species == "V":
            law, rate = self.offspring_v, self.r_tilde
        else:
            raise DomainError(f"species must be 'U' or 'V', got {species!r}")
        if law is not None:
            return law
        if self.law == "poisson":
            return OffspringDistribution.poisson(rate)
        return OffspringDistribution.geometric(rate, start=0 if self.law == "geometric" else 1)

    def with_K(self, K, K_tilde=None):
        return replace(self, K=K, K_tilde=K if K_tilde is None else K_tilde)

    def to_dict(self):
        d = {
            "r": self.r,
            "r_tilde": self.r_tilde,
            "K": self.K,
            "K_tilde": self.K_tilde,
            "a": self.a,
            "b": self.b,
            "law": self.law,
        }
        if self.offspring_u is not None:
            d["offspring_u"] = self.offspring_u.to_dict()
        if self.offspring_v is not None:
            d["offspring_v"] = self.offspring_v.to_dict()
        return d
