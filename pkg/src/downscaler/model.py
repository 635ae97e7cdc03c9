"""Declarative model specification: variant, temporal structure, priors, decay.

A ModelSpec is an immutable value object; validation enumerates every
violation rather than stopping at the first. Specs round-trip through plain
dicts, which is also how they appear inside the run-config file.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .covariance import (
    DecayParams,
    VariantPattern,
    coef_index,
    overall_active_mask,
    variant_mask,
)
from .data import Transform, TransformSpec
from .errors import UnsupportedVariant


class OverallTime(enum.Enum):
    STATIC = "static"
    INDEPENDENT_ACROSS_TIME = "independent_across_time"
    DYNAMIC = "dynamic"


class LocalTime(enum.Enum):
    STATIC = "static"
    INDEPENDENT_REPLICATES = "independent_replicates"
    DYNAMIC = "dynamic"


@dataclass(frozen=True)
class TemporalStructure:
    """Time dependence of the overall coefficients and the local fields.

    rho (overall) and gamma (local) are the AR coefficients of the dynamic
    forms, fixed constants per coefficient (scalar broadcasts); they are
    never sampled.
    """

    overall: OverallTime = OverallTime.INDEPENDENT_ACROSS_TIME
    local: LocalTime = LocalTime.INDEPENDENT_REPLICATES
    rho: float | np.ndarray = 0.5
    gamma: float | np.ndarray = 0.5

    def rho_vector(self, q: int) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.rho, dtype=float), (q,)).copy()

    def gamma_vector(self, q: int) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.gamma, dtype=float), (q,)).copy()


@dataclass(frozen=True)
class Priors:
    """Hyperparameters; the defaults are the documented vague choices."""

    beta_mean: float = 0.0
    beta_var: float = 100.0**2
    nugget_shape: float = 2.0
    nugget_scale: float = 1.0
    diagA_logmean: float = 0.0
    diagA_logsd: float = 10.0
    offdiagA_mean: float = 0.0
    offdiagA_var: float = 100.0**2
    # Dynamic-overall extras: initial state and innovation-variance prior.
    beta0_mean: float = 0.0
    beta0_var: float = 100.0**2
    xi2_shape: float = 2.0
    xi2_scale: float = 1.0


@dataclass(frozen=True)
class ModelSpec:
    p: int
    variant: VariantPattern
    temporal: TemporalStructure
    phi: DecayParams
    priors: Priors = field(default_factory=Priors)
    transform: TransformSpec | None = None

    @property
    def q(self) -> int:
        return self.p * (self.p + 1)

    def mask(self) -> np.ndarray:
        return variant_mask(self.variant, self.p)

    def overall_active(self) -> np.ndarray:
        return overall_active_mask(self.variant, self.p)

    def with_phi(self, phi) -> "ModelSpec":
        return replace(self, phi=DecayParams(np.asarray(phi, dtype=float)))

    def to_dict(self) -> dict:
        d = {
            "p": self.p,
            "variant": self.variant.value,
            "temporal": {
                "overall": self.temporal.overall.value,
                "local": self.temporal.local.value,
                "rho": _num_or_list(self.temporal.rho),
                "gamma": _num_or_list(self.temporal.gamma),
            },
            "phi": [float(v) for v in self.phi.phi],
            "priors": {
                "beta_mean": self.priors.beta_mean,
                "beta_var": self.priors.beta_var,
                "nugget_shape": self.priors.nugget_shape,
                "nugget_scale": self.priors.nugget_scale,
                "diagA_logmean": self.priors.diagA_logmean,
                "diagA_logsd": self.priors.diagA_logsd,
                "offdiagA_mean": self.priors.offdiagA_mean,
                "offdiagA_var": self.priors.offdiagA_var,
                "beta0_mean": self.priors.beta0_mean,
                "beta0_var": self.priors.beta0_var,
                "xi2_shape": self.priors.xi2_shape,
                "xi2_scale": self.priors.xi2_scale,
            },
        }
        if self.transform is not None:
            d["transform"] = self.transform.names()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        t = d.get("temporal", {})
        temporal = TemporalStructure(
            overall=OverallTime(t.get("overall", "independent_across_time")),
            local=LocalTime(t.get("local", "independent_replicates")),
            rho=_list_or_num(t.get("rho", 0.5)),
            gamma=_list_or_num(t.get("gamma", 0.5)),
        )
        priors = Priors(**d.get("priors", {}))
        transform_spec = None
        if "transform" in d:
            transform_spec = TransformSpec.from_names(d["transform"])
        return cls(
            p=int(d["p"]),
            variant=VariantPattern(d["variant"]),
            temporal=temporal,
            phi=DecayParams(np.asarray(d["phi"], dtype=float)),
            priors=priors,
            transform=transform_spec,
        )


def _num_or_list(v):
    arr = np.asarray(v, dtype=float)
    return [float(x) for x in arr] if arr.ndim else float(arr)


def _list_or_num(v):
    return np.asarray(v, dtype=float) if isinstance(v, (list, tuple)) else float(v)


# Paper-protocol decay medians for the bivariate case; placeholders a caller
# is expected to override (estimate_decay or config) for other data.
_DEFAULT_PHI_1 = 0.0016
_DEFAULT_PHI_2 = 0.00125


def default_phi(p: int) -> DecayParams:
    q = p * (p + 1)
    phi = np.full(q, _DEFAULT_PHI_1)
    if p >= 2:
        for j in range(p + 1):
            phi[coef_index(1, j, p)] = _DEFAULT_PHI_2
    return DecayParams(phi)


def default_spec(
    p: int,
    variant: VariantPattern,
    temporal: TemporalStructure | None = None,
    phi=None,
    transform=None,
) -> ModelSpec:
    """A validated spec with the documented default hyperparameters.

    phi defaults to the bivariate decay medians broadcast per pollutant
    block; production fits should replace it via estimate_decay or config.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    if temporal is None:
        temporal = TemporalStructure()
    decay = DecayParams(np.asarray(phi, dtype=float)) if phi is not None else default_phi(p)
    tspec = None
    if transform is not None:
        tspec = transform if isinstance(transform, TransformSpec) else TransformSpec.from_names(transform)
    else:
        tspec = TransformSpec(tuple([Transform.IDENTITY] * p))
    spec = ModelSpec(p=p, variant=variant, temporal=temporal, phi=decay, priors=Priors(), transform=tspec)
    problems = validate_spec(spec)
    if problems:
        raise ValueError("default spec failed validation: " + "; ".join(problems))
    return spec


def validate_spec(spec: ModelSpec) -> list[str]:
    """Check every invariant; returns the full list of violations (may be empty)."""
    problems = []
    if spec.p < 1:
        problems.append("p must be >= 1")
        return problems
    q = spec.q
    try:
        variant_mask(spec.variant, spec.p)
    except UnsupportedVariant as exc:
        problems.append(str(exc))
    if spec.phi is None:
        problems.append("decay parameters must be set")
    else:
        if len(spec.phi) != q:
            problems.append(f"phi must have length p(p+1) = {q}, got {len(spec.phi)}")
        if np.any(spec.phi.phi <= 0):
            problems.append("decay must be positive")

    pr = spec.priors
    for name, v in [
        ("beta_var", pr.beta_var),
        ("nugget_shape", pr.nugget_shape),
        ("nugget_scale", pr.nugget_scale),
        ("diagA_logsd", pr.diagA_logsd),
        ("offdiagA_var", pr.offdiagA_var),
        ("beta0_var", pr.beta0_var),
        ("xi2_shape", pr.xi2_shape),
        ("xi2_scale", pr.xi2_scale),
    ]:
        if v <= 0:
            problems.append(f"prior {name} must be positive")

    ts = spec.temporal
    if ts.overall is OverallTime.STATIC and ts.local is not LocalTime.STATIC:
        problems.append("static overall coefficients require static local fields")
    if ts.overall is OverallTime.DYNAMIC:
        rho = ts.rho_vector(q)
        if np.any(np.abs(rho) >= 1.0):
            problems.append("dynamic overall requires |rho| < 1")
        if np.any(np.abs(rho) > 0.99):
            problems.append("|rho| must be <= 0.99")
    if ts.local is LocalTime.DYNAMIC:
        gamma = ts.gamma_vector(q)
        if np.any(np.abs(gamma) >= 1.0):
            problems.append("dynamic local requires |gamma| < 1")
        if np.any(np.abs(gamma) > 0.99):
            problems.append("|gamma| must be <= 0.99")

    if spec.transform is not None and spec.transform.p != spec.p:
        problems.append(f"transform spec has {spec.transform.p} entries, expected {spec.p}")
    return problems
