"""
Folded concave penalties and the closed-form group thresholding operator
used by the sparse SVD.

All thresholding formulas minimize ``(m - r)² + p(m)`` over ``m ≥ 0``, i.e.
the quadratic term has coefficient one.
"""
import dataclasses
from enum import Enum
from typing import Any, Mapping, Optional, Union

import numpy as np


class PenaltyFamily(Enum):
    """
    Represents a family of folded concave penalty functions.
    """
    #: Smoothly clipped absolute deviation
    SCAD = 'scad'
    #: Minimax concave penalty
    MCP = 'mcp'
    #: Convex L1 penalty, no concavity
    LASSO = 'lasso'


_DEFAULT_CONCAVITY = {
    PenaltyFamily.SCAD: 3.7,
    PenaltyFamily.MCP: 3.0,
}


@dataclasses.dataclass(frozen=True)
class PenaltySpec:
    """
    Represents a penalty function from a folded concave family.

    :param family: Penalty family
    :param lam: Penalty level, must be nonnegative
    :param a: Concavity parameter; defaults to 3.7 for SCAD and 3.0 for MCP and is ignored for LASSO
    """
    family: PenaltyFamily = PenaltyFamily.SCAD
    lam: float = 0.0
    a: Optional[float] = None

    def __post_init__(self) -> None:
        family = PenaltyFamily(self.family)
        object.__setattr__(self, 'family', family)
        if not self.lam >= 0:
            raise ValueError(f'Penalty level must be nonnegative: {self.lam!r}')
        object.__setattr__(self, 'lam', float(self.lam))
        if family is PenaltyFamily.LASSO:
            object.__setattr__(self, 'a', None)
            return
        a = _DEFAULT_CONCAVITY[family] if self.a is None else float(self.a)
        if family is PenaltyFamily.SCAD and not a > 2:
            raise ValueError(f'SCAD requires a > 2: {a!r}')
        if family is PenaltyFamily.MCP and not a > 1:
            raise ValueError(f'MCP requires a > 1: {a!r}')
        object.__setattr__(self, 'a', a)

    @classmethod
    def from_config(cls, config: Mapping[str, Any], lam: float = 0.0) -> 'PenaltySpec':
        """
        Creates a penalty from a configuration mapping with the optional keys
        ``family`` and ``a``.
        """
        return cls(family=PenaltyFamily(config.get('family', PenaltyFamily.SCAD.value)),
                   lam=lam, a=config.get('a'))

    def with_lambda(self, lam: float) -> 'PenaltySpec':
        """
        Returns a copy of this penalty with a different level.
        """
        return dataclasses.replace(self, lam=lam)


def _nonnegative(t: Union[float, np.ndarray]) -> np.ndarray:
    values = np.asarray(t, dtype=float)
    if np.any(values < 0):
        raise ValueError('Penalty argument must be nonnegative')
    return values


def _scalar_or_array(values: np.ndarray) -> Union[float, np.ndarray]:
    return float(values) if values.ndim == 0 else values


def penalty_value(spec: PenaltySpec, t: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """
    Evaluates the penalty function.

    :param spec: Penalty
    :type spec: PenaltySpec
    :param t: Nonnegative argument(s)
    :return: Penalty value(s)
    :raises ValueError: if an argument is negative
    """
    t = _nonnegative(t)
    lam = spec.lam
    if spec.family is PenaltyFamily.LASSO:
        values = lam * t
    elif spec.family is PenaltyFamily.SCAD:
        a = spec.a
        middle = (2 * a * lam * t - t ** 2 - lam ** 2) / (2 * (a - 1))
        values = np.where(t <= lam, lam * t,
                          np.where(t <= a * lam, middle, (a + 1) * lam ** 2 / 2))
    else:
        a = spec.a
        values = np.where(t <= a * lam, lam * t - t ** 2 / (2 * a), a * lam ** 2 / 2)
    return _scalar_or_array(np.asarray(values, dtype=float))


def penalty_derivative(spec: PenaltySpec, t: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """
    Evaluates the derivative of the penalty function for positive arguments.
    Use :func:`penalty_derivative_at_zero` for the right derivative at zero.

    :raises ValueError: if an argument is not positive
    """
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError('Penalty derivative is only defined for positive arguments')
    lam = spec.lam
    if spec.family is PenaltyFamily.LASSO:
        values = np.full_like(t, lam)
    elif spec.family is PenaltyFamily.SCAD:
        values = np.where(t <= lam, lam, np.maximum(spec.a * lam - t, 0.0) / (spec.a - 1))
    else:
        values = np.maximum(lam - t / spec.a, 0.0)
    return _scalar_or_array(values)


def penalty_derivative_at_zero(spec: PenaltySpec) -> float:
    """
    Returns the right derivative of the penalty at zero, which equals the
    penalty level for every family.
    """
    return spec.lam


def local_concavity(spec: PenaltySpec, u: np.ndarray) -> float:
    """
    Returns the local concavity of the penalty at the specified coordinates,
    i.e. the largest negative slope of the penalty derivative in the
    neighborhood of any ``|u_j|``.

    :param spec: Penalty
    :type spec: PenaltySpec
    :param u: Coordinates
    :return: Nonnegative local concavity
    :rtype: float
    :raises ValueError: if ``u`` is empty
    """
    magnitudes = np.abs(np.asarray(u, dtype=float)).ravel()
    if magnitudes.size == 0:
        raise ValueError('Local concavity requires at least one coordinate')
    lam = spec.lam
    if spec.family is PenaltyFamily.LASSO or lam == 0:
        return 0.0
    a = spec.a
    if spec.family is PenaltyFamily.SCAD:
        inside = (magnitudes >= lam) & (magnitudes <= a * lam)
        return 1.0 / (a - 1) if np.any(inside) else 0.0
    return 1.0 / a if np.any(magnitudes <= a * lam) else 0.0


def _candidates(spec: PenaltySpec, r: np.ndarray) -> np.ndarray:
    # Stationary points of every smooth piece, clipped to the piece, in
    # ascending order so that the first minimizer is the sparsest one
    lam = spec.lam
    zeros = np.zeros_like(r)
    if spec.family is PenaltyFamily.LASSO:
        return np.stack([zeros, np.maximum(r - lam / 2, 0.0)], axis=-1)
    a = spec.a
    if spec.family is PenaltyFamily.SCAD:
        return np.stack([
            zeros,
            np.clip(r - lam / 2, 0.0, lam),
            np.clip((2 * (a - 1) * r - a * lam) / (2 * a - 3), lam, a * lam),
            np.maximum(r, a * lam),
        ], axis=-1)
    return np.stack([
        zeros,
        np.clip((2 * r - lam) / (2 - 1 / a), 0.0, a * lam),
        np.maximum(r, a * lam),
    ], axis=-1)


def threshold_rows(spec: PenaltySpec, Z: np.ndarray) -> np.ndarray:
    """
    Applies :func:`group_threshold` to every row of the specified matrix.

    Rows whose minimizing norm is zero are exact zeros.

    :param spec: Penalty
    :type spec: PenaltySpec
    :param Z: Matrix whose rows are thresholded
    :return: Thresholded matrix of the same shape
    :rtype: numpy.ndarray
    """
    Z = np.asarray(Z, dtype=float)
    if spec.lam == 0:
        return Z.copy()
    r = np.linalg.norm(Z, axis=1)
    candidates = _candidates(spec, r)
    objective = (candidates - r[:, np.newaxis]) ** 2 + penalty_value(spec, candidates)
    m = candidates[np.arange(len(r)), np.argmin(objective, axis=1)]
    keep = m > 0
    scale = np.divide(m, r, out=np.zeros_like(r), where=keep)
    return np.where(keep[:, np.newaxis], Z * scale[:, np.newaxis], 0.0)


def group_threshold(spec: PenaltySpec, z: np.ndarray) -> np.ndarray:
    """
    Solves the scalar group subproblem ``min (m - ‖z‖)² + p(m)`` over
    ``m ≥ 0`` and returns the minimizer placed along the direction of ``z``.

    On ties the smaller norm wins.

    :param spec: Penalty
    :type spec: PenaltySpec
    :param z: Vector to be thresholded
    :return: Nonnegative multiple of ``z``
    :rtype: numpy.ndarray
    """
    z = np.asarray(z, dtype=float)
    return threshold_rows(spec, z.reshape(1, -1)).reshape(z.shape)
