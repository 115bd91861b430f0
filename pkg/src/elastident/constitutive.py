"""Fixed-corotated hyperelasticity: polar SVD, Kirchhoff stress, energy."""

import numpy as np

from ._kernels import DET_FLOOR, svd3
from .errors import DegenerateDeformationError

__all__ = ["polar_svd", "kirchhoff_stress", "corotated_energy"]


def _as_matrix(F):
    F = np.asarray(F, dtype=np.float64)
    if F.shape != (3, 3):
        raise DegenerateDeformationError(
            f"deformation gradient must be 3x3, got shape {F.shape}"
        )
    return F


def polar_svd(F):
    """Rotation-aware SVD of a deformation gradient.

    Returns (U, sigma, V) with ``F = U @ np.diag(sigma) @ V.T``, singular
    values sorted descending, and both U and V proper rotations
    (determinant +1). Raises DegenerateDeformationError when det(F) is
    non-finite or <= 1e-10: inverted or collapsed elements have no useful
    corotated stress and should abort the step instead of poisoning it.
    """
    F = _as_matrix(F)
    with np.errstate(invalid="ignore"):
        det = float(np.linalg.det(F))
    if not det > DET_FLOOR:
        raise DegenerateDeformationError(
            f"det(F) = {det:.6g} is at or below the {DET_FLOOR:g} floor"
        )
    U, sigma, V = svd3(F)
    return U, sigma, V


def kirchhoff_stress(F, mu, lam):
    """Kirchhoff stress of the fixed-corotated model.

    tau = 2 mu (F - R) F^T + lam J (J - 1) I, with R the rotation from the
    polar decomposition of F and J = det(F). mu and lam are the Lame
    coefficients in Pa; the result is a symmetric 3x3 array in Pa.
    """
    F = _as_matrix(F)
    U, sigma, V = polar_svd(F)
    R = U @ V.T
    J = float(sigma[0] * sigma[1] * sigma[2])
    tau = 2.0 * mu * (F - R) @ F.T + lam * J * (J - 1.0) * np.eye(3)
    return tau


def corotated_energy(F, mu, lam):
    """Energy density of the fixed-corotated model, in Pa.

    psi = mu sum_i (sigma_i - 1)^2 + lam/2 (J - 1)^2 over the singular
    values sigma_i of F. The first Piola-Kirchhoff stress dpsi/dF equals
    kirchhoff_stress(F) @ inverse(F).T, which pins stress and energy to the
    same model.
    """
    F = _as_matrix(F)
    _, sigma, _ = polar_svd(F)
    J = float(sigma[0] * sigma[1] * sigma[2])
    return float(mu * np.sum((sigma - 1.0) ** 2) + 0.5 * lam * (J - 1.0) ** 2)
