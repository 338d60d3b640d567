"""Closed-form cost formulas for two-model cascades.

Costs are unit-agnostic positive reals (GFLOPs by convention). Ratios are
fractions of the evaluated sample set in ``[0, 1]``.
"""

from __future__ import annotations

import math

from .errors import DomainError


def _check_ratio(name: str, value: float) -> float:
    value = float(value)
    if not (0.0 <= value <= 1.0):
        raise DomainError(f"{name} must lie in [0, 1], got {value!r}")
    return value


def _check_cost(name: str, value: float, *, allow_zero: bool = False) -> float:
    value = float(value)
    if not math.isfinite(value) or value < 0.0 or (value == 0.0 and not allow_zero):
        bound = ">= 0" if allow_zero else "> 0"
        raise DomainError(f"{name} must be finite and {bound}, got {value!r}")
    return value


def expected_cascade_cost(r_s: float, c_s: float, c_b: float) -> float:
    """Expected per-sample cost of a saver -> base cascade.

    Exited samples (fraction ``r_s``) pay only the saver; the rest pay both.
    """
    r_s = _check_ratio("r_s", r_s)
    c_s = _check_cost("c_s", c_s)
    c_b = _check_cost("c_b", c_b)
    return r_s * c_s + (1.0 - r_s) * (c_b + c_s)


def expected_moe_cost(r_s: float, c_s: float, c_b: float, c_rt: float) -> float:
    """Expected cost of a top-1 MoE with a separate router of cost ``c_rt``."""
    r_s = _check_ratio("r_s", r_s)
    c_s = _check_cost("c_s", c_s)
    c_b = _check_cost("c_b", c_b)
    c_rt = _check_cost("c_rt", c_rt, allow_zero=True)
    return r_s * (c_rt + c_s) + (1.0 - r_s) * (c_rt + c_b)


def router_breakeven_cost(r_s1: float, r_s2: float, c_s: float, c_b: float) -> float:
    """Largest router cost at which a prior-router MoE beats the cascade.

    ``r_s1`` is the cascade's exit ratio and ``r_s2`` the router's, taken at
    equal system accuracy. A negative result means no router can win; it is
    deliberately not clamped to zero.
    """
    r_s1 = _check_ratio("r_s1", r_s1)
    r_s2 = _check_ratio("r_s2", r_s2)
    c_s = _check_cost("c_s", c_s)
    c_b = _check_cost("c_b", c_b)
    return (r_s2 - r_s1) * c_b + (1.0 - r_s2) * c_s


def delta_c(c_s: float, c_b: float, r_match: float) -> float:
    """Normalized cost change ``c_s / c_b - r_match``.

    Equal to ``(expected_cascade_cost(r_match, c_s, c_b) - c_b) / c_b``.
    Negative means the saver compresses the base model.
    """
    c_s = _check_cost("c_s", c_s)
    c_b = _check_cost("c_b", c_b)
    r_match = _check_ratio("r_match", r_match)
    return c_s / c_b - r_match


def loss_weight(conf: float) -> float:
    """Per-sample loss weight ``2 * (1 - conf)`` for training later exits."""
    conf = _check_ratio("conf", conf)
    return 2.0 * (1.0 - conf)
