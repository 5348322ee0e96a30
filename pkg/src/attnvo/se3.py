"""SE(3) exponential/logarithm maps and pose algebra.

Twists are flat 6-vectors ordered ``[v, w]``: translation part (meters)
followed by rotation part (radians). Poses are 4x4 homogeneous matrices.

Two flavours live here. The numpy functions are the reference path used by
metrics, datasets and tests, always in float64. The ``*_torch`` functions are
batched and differentiable and back the training loss.
"""

import math

import numpy as np
import torch

from .errors import DegenerateRotationError, InvalidArgumentError

# Below this squared angle the trig ratios switch to their Taylor series.
SMALL_ANGLE_SQ = 1e-8
# log_map refuses rotations closer than this to pi.
PI_MARGIN = 1e-6
ORTHO_TOL = 1e-6


def hat(w):
    """3-vector -> skew-symmetric 3x3 matrix."""
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def vee(W):
    return np.array([W[2, 1], W[0, 2], W[1, 0]])


def twist_matrix(xi):
    """4x4 matrix of the se(3) element with coordinates ``xi``."""
    xi = np.asarray(xi, dtype=np.float64)
    M = np.zeros((4, 4))
    M[:3, :3] = hat(xi[3:])
    M[:3, 3] = xi[:3]
    return M


def _exp_coefficients(theta_sq):
    # sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3
    if theta_sq < SMALL_ANGLE_SQ:
        a = 1.0 - theta_sq / 6.0 + theta_sq**2 / 120.0
        b = 0.5 - theta_sq / 24.0 + theta_sq**2 / 720.0
        c = 1.0 / 6.0 - theta_sq / 120.0 + theta_sq**2 / 5040.0
        return a, b, c
    theta = math.sqrt(theta_sq)
    s = math.sin(theta)
    half = math.sin(0.5 * theta)
    return s / theta, 2.0 * half * half / theta_sq, (theta - s) / (theta_sq * theta)


def check_twist(xi):
    xi = np.asarray(xi, dtype=np.float64)
    if xi.shape != (6,):
        raise InvalidArgumentError(f"twist must have shape (6,), got {xi.shape}")
    if not np.all(np.isfinite(xi)):
        raise InvalidArgumentError("twist has non-finite entries")
    return xi


def check_pose(T, tol=ORTHO_TOL):
    """Validate a 4x4 rigid transform and return it as float64."""
    T = np.asarray(T, dtype=np.float64)
    if T.shape != (4, 4):
        raise InvalidArgumentError(f"pose must be 4x4, got {T.shape}")
    if not np.all(np.isfinite(T)):
        raise InvalidArgumentError("pose has non-finite entries")
    if not np.array_equal(T[3], [0.0, 0.0, 0.0, 1.0]):
        raise InvalidArgumentError(f"pose bottom row must be (0,0,0,1), got {T[3]}")
    R = T[:3, :3]
    if np.linalg.norm(R.T @ R - np.eye(3)) > tol:
        raise InvalidArgumentError("rotation block is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > tol:
        raise InvalidArgumentError("rotation block has det != 1")
    return T


def is_valid_pose(T, tol=ORTHO_TOL):
    try:
        check_pose(T, tol)
    except InvalidArgumentError:
        return False
    return True


def exp_map(xi):
    """Closed-form exponential of a twist, returned as a 4x4 pose."""
    xi = check_twist(xi)
    v, w = xi[:3], xi[3:]
    W = hat(w)
    W2 = W @ W
    a, b, c = _exp_coefficients(float(w @ w))
    T = np.eye(4)
    T[:3, :3] = np.eye(3) + a * W + b * W2
    T[:3, 3] = (np.eye(3) + b * W + c * W2) @ v
    return T


def rotation_angle(R):
    """Rotation angle in [0, pi], accurate for small and large angles."""
    s = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    c = 0.5 * (np.trace(R) - 1.0)
    return math.atan2(float(np.linalg.norm(s)), float(c))


def log_map(T):
    """Logarithm of a pose as a twist ``[v, w]``."""
    T = check_pose(T)
    R, t = T[:3, :3], T[:3, 3]
    s = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    sin_t = float(np.linalg.norm(s))
    cos_t = 0.5 * (np.trace(R) - 1.0)
    theta = math.atan2(sin_t, cos_t)
    if theta > math.pi - PI_MARGIN:
        raise DegenerateRotationError(f"rotation angle {theta!r} is within {PI_MARGIN} of pi")
    theta_sq = theta * theta
    if theta_sq < SMALL_ANGLE_SQ:
        ratio = 1.0 + theta_sq / 6.0 + 7.0 * theta_sq**2 / 360.0
        d = 1.0 / 12.0 + theta_sq / 720.0 + theta_sq**2 / 30240.0
    else:
        ratio = theta / sin_t
        half = math.sin(0.5 * theta)
        d = (1.0 - theta * sin_t / (4.0 * half * half)) / theta_sq
    w = ratio * s
    W = hat(w)
    v_inv = np.eye(3) - 0.5 * W + d * (W @ W)
    return np.concatenate([v_inv @ t, w])


def compose(A, B):
    return check_pose(A) @ check_pose(B)


def inverse(T):
    T = check_pose(T)
    R, t = T[:3, :3], T[:3, 3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ t
    return out


def relative(Ti, Tj):
    """Pose of ``Tj`` expressed in the frame of ``Ti``."""
    return inverse(Ti) @ check_pose(Tj)


def project_to_pose(M):
    """Nearest rigid transform to a 3x4 or 4x4 matrix (SVD projection of R)."""
    M = np.asarray(M, dtype=np.float64)
    U, _, Vt = np.linalg.svd(M[:3, :3])
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    T = np.eye(4)
    T[:3, :3] = U @ D @ Vt
    T[:3, 3] = M[:3, 3]
    return T


# ---------------------------------------------------------------------------
# batched torch versions


def hat_torch(w):
    zero = torch.zeros_like(w[..., 0])
    wx, wy, wz = w[..., 0], w[..., 1], w[..., 2]
    rows = [
        torch.stack([zero, -wz, wy], dim=-1),
        torch.stack([wz, zero, -wx], dim=-1),
        torch.stack([-wy, wx, zero], dim=-1),
    ]
    return torch.stack(rows, dim=-2)


def exp_map_torch(xi):
    """Batched, differentiable exp map: (..., 6) -> (..., 4, 4)."""
    v, w = xi[..., :3], xi[..., 3:]
    theta_sq = (w * w).sum(-1)
    small = theta_sq < SMALL_ANGLE_SQ
    tsq = torch.where(small, torch.ones_like(theta_sq), theta_sq)
    theta = torch.sqrt(tsq)
    sin_t = torch.sin(theta)
    half = torch.sin(0.5 * theta)
    a = torch.where(small, 1.0 - theta_sq / 6.0 + theta_sq**2 / 120.0, sin_t / theta)
    b = torch.where(small, 0.5 - theta_sq / 24.0 + theta_sq**2 / 720.0, 2.0 * half * half / tsq)
    c = torch.where(
        small, 1.0 / 6.0 - theta_sq / 120.0 + theta_sq**2 / 5040.0, (theta - sin_t) / (tsq * theta)
    )
    W = hat_torch(w)
    W2 = W @ W
    eye = torch.eye(3, dtype=xi.dtype, device=xi.device).expand(W.shape)
    R = eye + a[..., None, None] * W + b[..., None, None] * W2
    V = eye + b[..., None, None] * W + c[..., None, None] * W2
    t = (V @ v[..., None])[..., 0]
    top = torch.cat([R, t[..., None]], dim=-1)
    bottom = torch.zeros(xi.shape[:-1] + (1, 4), dtype=xi.dtype, device=xi.device)
    bottom[..., 0, 3] = 1.0
    return torch.cat([top, bottom], dim=-2)


def log_map_torch(T):
    """Batched, differentiable log map: (..., 4, 4) -> (..., 6).

    Raises DegenerateRotationError if any rotation is within the pi margin.
    """
    R, t = T[..., :3, :3], T[..., :3, 3]
    s = 0.5 * torch.stack(
        [R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]],
        dim=-1,
    )
    cos_t = 0.5 * (R[..., 0, 0] + R[..., 1, 1] + R[..., 2, 2] - 1.0)
    sin_sq = (s * s).sum(-1)
    # small branch only when the angle itself is small (cos > 0)
    small = (sin_sq < SMALL_ANGLE_SQ) & (cos_t > 0)
    sin_safe = torch.sqrt(torch.where(small, torch.ones_like(sin_sq), sin_sq))
    theta = torch.atan2(sin_safe, cos_t)
    with torch.no_grad():
        full_theta = torch.where(small, torch.zeros_like(theta), theta)
        if bool((full_theta > math.pi - PI_MARGIN).any()):
            raise DegenerateRotationError("rotation angle within margin of pi in batch")
    tsq = theta * theta
    half = torch.sin(0.5 * theta)
    ratio = torch.where(small, 1.0 + sin_sq / 6.0 + 7.0 * sin_sq**2 / 360.0, theta / sin_safe)
    d = torch.where(
        small,
        1.0 / 12.0 + sin_sq / 720.0 + sin_sq**2 / 30240.0,
        (1.0 - theta * sin_safe / (4.0 * half * half)) / tsq,
    )
    w = ratio[..., None] * s
    W = hat_torch(w)
    eye = torch.eye(3, dtype=T.dtype, device=T.device).expand(W.shape)
    v_inv = eye - 0.5 * W + d[..., None, None] * (W @ W)
    v = (v_inv @ t[..., None])[..., 0]
    return torch.cat([v, w], dim=-1)


def inverse_torch(T):
    R, t = T[..., :3, :3], T[..., :3, 3:]
    Rt = R.transpose(-1, -2)
    top = torch.cat([Rt, -Rt @ t], dim=-1)
    return torch.cat([top, T[..., 3:, :]], dim=-2)
