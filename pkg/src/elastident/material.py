"""Material parameterization, elastic-constant conversions, and the
parameter-recovery error metric.

The optimization variable of the identification pipeline is a per-object
:class:`MaterialField`; rigid or otherwise excluded objects carry a frozen
flag and are never touched by the optimizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import DomainError

# Cap used for nominally incompressible materials; the corotated solver is
# unstable at exactly 0.5.
NU_INCOMPRESSIBLE_CAP = 0.49


@dataclass(frozen=True)
class MaterialParams:
    """Isotropic hyperelastic material: Young's modulus E (Pa), Poisson's
    ratio nu, and mass density rho (kg/m^3)."""

    youngs_modulus: float
    poisson_ratio: float
    density: float = 1000.0

    def __post_init__(self):
        e, nu, rho = self.youngs_modulus, self.poisson_ratio, self.density
        if not (math.isfinite(e) and e > 0.0):
            raise DomainError(f"youngs_modulus must be positive and finite, got {e}")
        if not (math.isfinite(nu) and 0.0 < nu < 0.5):
            raise DomainError(
                f"poisson_ratio must lie strictly in (0, 0.5), got {nu}; "
                f"use {NU_INCOMPRESSIBLE_CAP} for incompressible materials"
            )
        if not (math.isfinite(rho) and rho > 0.0):
            raise DomainError(f"density must be positive and finite, got {rho}")


@dataclass(frozen=True)
class LameParams:
    """First (lam) and second (mu, shear) Lame constants in Pa."""

    mu: float
    lam: float


def lame_from_params(p: MaterialParams) -> LameParams:
    """Convert (E, nu) to Lame constants.

    mu = E / (2 (1 + nu)),  lam = E nu / ((1 + nu)(1 - 2 nu)).
    """
    e, nu = p.youngs_modulus, p.poisson_ratio
    mu = e / (2.0 * (1.0 + nu))
    lam = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return LameParams(mu=mu, lam=lam)


def params_from_lame(lame: LameParams, density: float = 1000.0) -> MaterialParams:
    """Invert :func:`lame_from_params`: recover (E, nu) from (mu, lam)."""
    mu, lam = lame.mu, lame.lam
    if mu <= 0.0 or lam <= 0.0:
        raise DomainError(f"Lame constants must be positive, got mu={mu}, lam={lam}")
    e = mu * (3.0 * lam + 2.0 * mu) / (lam + mu)
    nu = lam / (2.0 * (lam + mu))
    return MaterialParams(youngs_modulus=e, poisson_ratio=nu, density=density)


def derived_moduli(p: MaterialParams) -> tuple[float, float]:
    """Shear modulus G and bulk modulus K implied by (E, nu)."""
    e, nu = p.youngs_modulus, p.poisson_ratio
    g = e / (2.0 * (1.0 + nu))
    k = e / (3.0 * (1.0 - 2.0 * nu))
    return g, k


def relative_error(estimate: MaterialParams, truth: MaterialParams) -> float:
    """Recovery error between an estimated and a true material.

    Mean over the four components {E, nu, G, K}. The three moduli are
    compared in log10 space, |log10(est) - log10(true)| / |log10(true)|;
    Poisson's ratio is compared linearly, |est - true| / true. True moduli
    of exactly 1 Pa are rejected (zero log denominator).
    """
    g_est, k_est = derived_moduli(estimate)
    g_tru, k_tru = derived_moduli(truth)
    total = 0.0
    for name, est, tru in (
        ("E", estimate.youngs_modulus, truth.youngs_modulus),
        ("G", g_est, g_tru),
        ("K", k_est, k_tru),
    ):
        log_tru = math.log10(tru)
        if log_tru == 0.0:
            raise DomainError(f"true {name} modulus of exactly 1 Pa has zero log denominator")
        total += abs(math.log10(est) - log_tru) / abs(log_tru)
    total += abs(estimate.poisson_ratio - truth.poisson_ratio) / truth.poisson_ratio
    return total / 4.0


class MaterialField:
    """Immutable map object_id -> (MaterialParams, frozen flag).

    Frozen entries are carried through optimization untouched (the very same
    :class:`MaterialParams` instances, hence bit-identical).
    """

    def __init__(self, entries: dict[int, tuple[MaterialParams, bool]]):
        clean: dict[int, tuple[MaterialParams, bool]] = {}
        for oid in sorted(entries):
            params, frozen = entries[oid]
            if not isinstance(params, MaterialParams):
                raise DomainError(f"object {oid}: entry is not a MaterialParams")
            clean[int(oid)] = (params, bool(frozen))
        self._entries = clean

    def object_ids(self) -> tuple[int, ...]:
        return tuple(self._entries)

    def unfrozen_ids(self) -> tuple[int, ...]:
        return tuple(oid for oid, (_, fr) in self._entries.items() if not fr)

    def params(self, object_id: int) -> MaterialParams:
        return self._entries[object_id][0]

    def is_frozen(self, object_id: int) -> bool:
        return self._entries[object_id][1]

    def items(self):
        return self._entries.items()

    def __contains__(self, object_id: int) -> bool:
        return object_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def replace(self, object_id: int, params: MaterialParams) -> "MaterialField":
        """Return a new field with one entry's parameters replaced.

        Replacing a frozen entry is a programming error.
        """
        if object_id not in self._entries:
            raise KeyError(object_id)
        if self._entries[object_id][1]:
            raise DomainError(f"object {object_id} is frozen and cannot be replaced")
        entries = dict(self._entries)
        entries[object_id] = (params, False)
        return MaterialField(entries)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MaterialField):
            return NotImplemented
        return self._entries == other._entries

    def __repr__(self) -> str:
        parts = ", ".join(
            f"{oid}: (E={p.youngs_modulus:g}, nu={p.poisson_ratio:g}, rho={p.density:g}"
            + (", frozen)" if fr else ")")
            for oid, (p, fr) in self._entries.items()
        )
        return f"MaterialField({{{parts}}})"


def field_relative_error(
    estimate: MaterialField, truth: MaterialField, object_ids=None
) -> float:
    """Mean :func:`relative_error` over the given objects.

    Defaults to the estimate's unfrozen objects, i.e. the ones that were
    actually identified.
    """
    if object_ids is None:
        object_ids = estimate.unfrozen_ids()
    object_ids = tuple(object_ids)
    if not object_ids:
        raise DomainError("no objects to score")
    return sum(
        relative_error(estimate.params(oid), truth.params(oid)) for oid in object_ids
    ) / len(object_ids)
