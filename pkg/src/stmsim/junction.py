"""Tunneling junction physics.

The current through the gap is modeled as

    i = f(sigma, Vb) * exp(-kappa0 * sqrt(phi) * delta)

so that ln(R|i|) is affine in the gap and di/dz = -kappa0 sqrt(phi) i.
All functions accept scalars or numpy arrays.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# nm^-1 eV^-1/2; the familiar 1.025 A^-1 eV^-1/2 constant expressed per nm
KAPPA0_NM = 10.25


class JunctionDomainError(ValueError):
    """Non-finite or non-physical junction input."""


class TipCrash(ArithmeticError):
    """Raised when the tip-sample gap becomes negative."""

    def __init__(self, delta, where=None):
        self.delta = delta
        self.where = where
        super().__init__(f"tip crash: gap {np.min(delta):.4g} nm < 0" + (f" at {where}" if where else ""))


class InfeasibleSetpoint(ValueError):
    """The requested set-point cannot be reached for any gap."""


@dataclass(frozen=True)
class JunctionParams:
    """Junction constants.

    kappa0  decay constant, nm^-1 eV^-1/2
    R       preamplifier transimpedance, V/nA
    Vb      sample bias, V
    i_floor minimum detectable current before the log, nA
    v_ref, beta, sigma_ref
            shape of the bias dependence of f(sigma, V) (see ``bias_factor``)
    """

    kappa0: float = KAPPA0_NM
    R: float = 1.0
    Vb: float = -2.5
    i_floor: float = 1e-6
    v_ref: float = 2.5
    beta: float = 1.0
    sigma_ref: float = 1.0e4

    def __post_init__(self):
        if not (np.isfinite(self.kappa0) and self.kappa0 > 0):
            raise JunctionDomainError("kappa0 must be positive")
        if not (np.isfinite(self.R) and self.R > 0):
            raise JunctionDomainError("R must be positive")
        if not np.isfinite(self.Vb):
            raise JunctionDomainError("Vb must be finite")
        if not self.i_floor > 0:
            raise JunctionDomainError("i_floor must be positive")
        if not (self.v_ref > 0 and self.sigma_ref > 0):
            raise JunctionDomainError("v_ref and sigma_ref must be positive")


@dataclass(frozen=True)
class TipSampleState:
    """Tip position, local topography and local electronic properties."""

    z_t: float
    h: float
    sigma: float
    phi: float

    @property
    def delta(self):
        return np.asarray(self.z_t) - np.asarray(self.h)

    @classmethod
    def from_gap(cls, delta, sigma, phi, h=0.0):
        return cls(z_t=np.asarray(delta) + h, h=h, sigma=sigma, phi=phi)


def _check_finite(*vals):
    for v in vals:
        if not np.all(np.isfinite(v)):
            raise JunctionDomainError("non-finite junction input")


def decay_constant(phi, p: JunctionParams = JunctionParams()):
    """kappa0 * sqrt(phi), nm^-1."""
    phi = np.asarray(phi, dtype=float)
    if np.any(phi <= 0):
        raise JunctionDomainError("barrier height must be positive")
    return p.kappa0 * np.sqrt(phi)


def bias_factor(sigma, Vb, p: JunctionParams = JunctionParams()):
    """Prefactor f(sigma, V) in nA.

    f = sigma * V * (|V| / v_ref) ** (beta * ln(sigma / sigma_ref))

    At |V| = v_ref this is exactly sigma * V. Away from it the logarithmic
    derivative d ln|f| / d ln|V| = 1 + beta ln(sigma/sigma_ref) carries the
    local conductivity, which is what bias-modulation spectroscopy reads.
    beta = 0 gives the purely ohmic f = sigma * V.
    """
    sigma = np.asarray(sigma, dtype=float)
    Vb = np.asarray(Vb, dtype=float)
    if np.any(sigma <= 0):
        raise JunctionDomainError("conductivity must be positive")
    if p.beta == 0.0:
        return sigma * Vb
    n = p.beta * np.log(sigma / p.sigma_ref)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = sigma * Vb * (np.abs(Vb) / p.v_ref) ** n
    return np.where(Vb == 0.0, 0.0, f)[()]


def conductance_exponent(sigma, p: JunctionParams = JunctionParams()):
    """d ln|i| / d ln|V| for the configured bias shape."""
    return 1.0 + p.beta * np.log(np.asarray(sigma, dtype=float) / p.sigma_ref)


def sigma_from_exponent(n, p: JunctionParams = JunctionParams()):
    """Invert ``conductance_exponent``; needs beta != 0."""
    if p.beta == 0.0:
        raise JunctionDomainError("conductivity is unobservable with beta = 0")
    return p.sigma_ref * np.exp((np.asarray(n, dtype=float) - 1.0) / p.beta)


def tunneling_current(state: TipSampleState, p: JunctionParams = JunctionParams(), Vb=None):
    """Tunneling current in nA; the sign follows the bias."""
    Vb = p.Vb if Vb is None else Vb
    delta = state.delta
    _check_finite(delta, state.sigma, state.phi, Vb)
    if np.any(delta < 0):
        raise TipCrash(delta)
    k = decay_constant(state.phi, p)
    return bias_factor(state.sigma, Vb, p) * np.exp(-k * delta)


def log_current(i, p: JunctionParams = JunctionParams()):
    """ln(R|i|), with |i| floored at the minimum detectable current."""
    i = np.asarray(i, dtype=float)
    return np.log(p.R * np.maximum(np.abs(i), p.i_floor))


def didz_analytic(state: TipSampleState, p: JunctionParams = JunctionParams(), Vb=None):
    """di/dz = -kappa0 sqrt(phi) i, nA/nm."""
    i = tunneling_current(state, p, Vb)
    return -decay_constant(state.phi, p) * i


def steady_state_gap(setpoint, mode, sigma, phi, p: JunctionParams = JunctionParams(), Vb=None):
    """Gap at which a converged loop sits for a given ln-domain set-point.

    mode 'current': setpoint = ln(R|i|)
    mode 'didz':    setpoint = ln(R|di/dz|)
    """
    Vb = p.Vb if Vb is None else Vb
    _check_finite(setpoint, sigma, phi, Vb)
    k = decay_constant(phi, p)
    arg = p.R * np.abs(bias_factor(sigma, Vb, p))
    if mode in ("didz", "constant_didz"):
        arg = k * arg
    elif mode not in ("current", "constant_current"):
        raise ValueError(f"unknown mode {mode!r}")
    if np.any(arg <= 0):
        raise InfeasibleSetpoint("zero prefactor: no gap reaches the set-point")
    return (np.log(arg) - np.asarray(setpoint, dtype=float)) / k
