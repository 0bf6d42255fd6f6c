"""Generalized epipolar constraint and the linear 17-point solver.

For Plücker lines ``(d_q, m_q)`` in the query rig and ``(d_c, m_c)`` in the
candidate rig, a relative pose ``x_c = R x_q + t`` must satisfy

    d_c^T E d_q + d_c^T R m_q + m_c^T R d_q = 0,   E = [t]_x R

which is linear in the 18 entries of ``(E, R)``.
"""
from __future__ import annotations

import numpy as np

from ..errors import DegenerateConfiguration
from ..geometry import Pose, nearest_rotation, skew

MIN_CORRESPONDENCES = 17


def generalized_epipolar_residual(l_q, l_c, T_cq: Pose):
    """Residual of line pair(s); scalar for single lines, (N,) for stacked ones."""
    R, t = T_cq.R, T_cq.p
    E = skew(t) @ R
    dq, mq = np.asarray(l_q[0], float), np.asarray(l_q[1], float)
    dc, mc = np.asarray(l_c[0], float), np.asarray(l_c[1], float)
    r = (np.sum(dc * (dq @ E.T), axis=-1) + np.sum(dc * (mq @ R.T), axis=-1)
         + np.sum(mc * (dq @ R.T), axis=-1))
    return r if np.ndim(r) else float(r)


def design_matrix(dq, mq, dc, mc) -> np.ndarray:
    n = len(dq)
    AE = np.einsum("ni,nj->nij", dc, dq).reshape(n, 9)
    AR = (np.einsum("ni,nj->nij", dc, mq) + np.einsum("ni,nj->nij", mc, dq)).reshape(n, 9)
    return np.hstack([AE, AR])


def _orthogonality_defect(Rb) -> np.ndarray:
    """Scale-free distance of 3x3 block(s) from a scaled rotation; 0 iff R^T R = c I."""
    M = np.swapaxes(Rb, -1, -2) @ Rb
    tr = np.trace(M, axis1=-2, axis2=-1)
    D = M - tr[..., None, None] / 3 * np.eye(3)
    return np.sum(D**2, axis=(-2, -1)) / tr**2


def _nullspace_rotations(V1, V2, grid: int = 90, keep: int = 3) -> list[np.ndarray]:
    """Null vectors in span{V1, V2} whose R block is closest to a scaled rotation.

    Two axial rigs (all camera centres on a line through the rig origin, which
    is always true of a two-member rig) add the spurious null vector
    ``(E, R) = (0, a_c a_q^T)``, so the last two singular vectors are mixed.
    One vector is returned per local minimum of the defect, best first.
    """
    R1, R2 = V1[9:].reshape(3, 3), V2[9:].reshape(3, 3)

    def f(th):
        th = np.asarray(th)[..., None, None]
        return _orthogonality_defect(np.cos(th) * R1 + np.sin(th) * R2)

    ths = np.linspace(0.0, np.pi, grid, endpoint=False)
    vals = f(ths)
    step = ths[1] - ths[0]
    minima = np.flatnonzero((vals <= np.roll(vals, 1)) & (vals <= np.roll(vals, -1)))
    minima = minima[np.argsort(vals[minima])][:keep]
    # Newton steps on finite differences, all minima at once
    th, h = ths[minima], np.full(len(minima), step / 2)
    for _ in range(12):
        fm, f0, fp = f(np.stack([th - h, th, th + h], axis=1)).T
        curv = fp - 2 * f0 + fm
        delta = np.where(curv > 0, -h * (fp - fm) / (2 * np.where(curv > 0, curv, 1.0)), 0.0)
        delta = np.clip(delta, -step, step)
        th = th + delta
        h = np.maximum(np.abs(delta), 1e-7)
    return [np.cos(t) * V1 + np.sin(t) * V2 for t in th]


def solve_17pt(dq, mq, dc, mc, pairs=None, rank_tol: float = 1e-9) -> list[Pose]:
    """Relative pose candidates ``T_cq`` from >= 17 Plücker correspondences.

    The stacked constraints are solved for the (E, R) nullspace by SVD. The R
    block is rescaled to unit singular values, sign-fixed to det +1 and
    projected onto SO(3); the translation is then the least-squares solution of
    the (linear in t) constraints. Candidates are ordered by algebraic residual;
    the first is the estimate.

    ``pairs`` optionally labels the camera pair of each correspondence; a
    single distinct label is rejected up front.
    """
    dq, mq, dc, mc = (np.asarray(a, dtype=float) for a in (dq, mq, dc, mc))
    n = len(dq)
    if n < MIN_CORRESPONDENCES:
        raise DegenerateConfiguration(f"{n} correspondences, need {MIN_CORRESPONDENCES}")
    if pairs is not None and len(np.unique(pairs)) < 2:
        raise DegenerateConfiguration("all correspondences from one camera pair")
    A = design_matrix(dq, mq, dc, mc)
    _, s, Vt = np.linalg.svd(A, full_matrices=n < 18)
    if s[15] <= rank_tol * s[0]:
        raise DegenerateConfiguration(f"design matrix rank < 16 (s16/s1 = {s[15] / s[0]:.2e})")

    xs = _nullspace_rotations(Vt[-1], Vt[-2])
    rots = []
    for x in xs:
        Rb = x[9:].reshape(3, 3)
        scale = np.linalg.svd(Rb, compute_uv=False).mean()
        if scale < 1e-12:
            continue
        if np.linalg.det(Rb) < 0:
            Rb = -Rb
        rots.append(nearest_rotation(Rb / scale))
    # When the rig baseline dwarfs the camera offsets the R block only meets
    # small moments and is poorly conditioned; the E block still fixes R up
    # to the twisted pair.
    if xs:
        rots.extend(rotations_from_essential(xs[0][:9].reshape(3, 3)))
    cands, res = [], []
    for R in rots:
        t = translation_given_rotation(R, dq, mq, dc, mc)
        T = Pose.from_Rt(R, t)
        cands.append(T)
        res.append(float(np.sum(generalized_epipolar_residual((dq, mq), (dc, mc), T) ** 2)))
    if not cands:
        raise DegenerateConfiguration("rotation block vanishes")
    return [cands[i] for i in np.argsort(res)]


def rotations_from_essential(E) -> list[np.ndarray]:
    """The two rotations of ``E = [t]_x R`` (empty if E is numerically rank < 2)."""
    U, s, Vt = np.linalg.svd(E)
    if s[1] <= 1e-9 * max(s[0], 1e-300):
        return []
    U = U * np.sign(np.linalg.det(U))
    Vt = Vt * np.sign(np.linalg.det(Vt))
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    return [U @ W @ Vt, U @ W.T @ Vt]


def translation_given_rotation(R, dq, mq, dc, mc) -> np.ndarray:
    """Least-squares translation for fixed rotation; the constraint is linear in t."""
    Rdq = dq @ R.T
    A = np.cross(Rdq, dc)
    b = -(np.sum(dc * (mq @ R.T), axis=1) + np.sum(mc * Rdq, axis=1))
    return np.linalg.lstsq(A, b, rcond=None)[0]
