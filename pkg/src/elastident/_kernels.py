"""Serial numba kernels for the solver and the splat rasterizer.

Everything here runs single-threaded with a fixed accumulation order, so two
runs on identical inputs produce bit-identical results. Status codes instead
of exceptions cross the nopython boundary: 0 ok, 1 stencil out of grid,
2 degenerate deformation gradient, 3 instability; the offending particle or
substep index rides along.

Inner loops are written on scalars on purpose: small-matrix numpy calls
allocate per particle and dominate the runtime otherwise. The three
transfer phases of one substep share one cached set of B-spline weights
(base, w, dw arrays) computed from the positions at the start of the
substep.
"""

import numpy as np
from numba import njit

STATUS_OK = 0
STATUS_OUT_OF_DOMAIN = 1
STATUS_DEGENERATE = 2
STATUS_UNSTABLE = 3

# Determinant floor below which a deformation gradient counts as degenerate.
DET_FLOOR = 1e-10


@njit(cache=True, inline="always")
def _rot01(a00, a01, a02, a11, a12, a22, V):
    if a01 == 0.0:
        return a00, a01, a02, a11, a12, a22
    theta = (a11 - a00) / (2.0 * a01)
    if theta >= 0.0:
        t = 1.0 / (theta + np.sqrt(1.0 + theta * theta))
    else:
        t = -1.0 / (-theta + np.sqrt(1.0 + theta * theta))
    c = 1.0 / np.sqrt(1.0 + t * t)
    s = t * c
    n00 = a00 - t * a01
    n11 = a11 + t * a01
    n02 = c * a02 - s * a12
    n12 = s * a02 + c * a12
    for r in range(3):
        vr0 = V[r, 0]
        vr1 = V[r, 1]
        V[r, 0] = c * vr0 - s * vr1
        V[r, 1] = s * vr0 + c * vr1
    return n00, 0.0, n02, n11, n12, a22


@njit(cache=True, inline="always")
def _rot02(a00, a01, a02, a11, a12, a22, V):
    if a02 == 0.0:
        return a00, a01, a02, a11, a12, a22
    theta = (a22 - a00) / (2.0 * a02)
    if theta >= 0.0:
        t = 1.0 / (theta + np.sqrt(1.0 + theta * theta))
    else:
        t = -1.0 / (-theta + np.sqrt(1.0 + theta * theta))
    c = 1.0 / np.sqrt(1.0 + t * t)
    s = t * c
    n00 = a00 - t * a02
    n22 = a22 + t * a02
    n01 = c * a01 - s * a12
    n12 = s * a01 + c * a12
    for r in range(3):
        vr0 = V[r, 0]
        vr2 = V[r, 2]
        V[r, 0] = c * vr0 - s * vr2
        V[r, 2] = s * vr0 + c * vr2
    return n00, n01, 0.0, a11, n12, n22


@njit(cache=True, inline="always")
def _rot12(a00, a01, a02, a11, a12, a22, V):
    if a12 == 0.0:
        return a00, a01, a02, a11, a12, a22
    theta = (a22 - a11) / (2.0 * a12)
    if theta >= 0.0:
        t = 1.0 / (theta + np.sqrt(1.0 + theta * theta))
    else:
        t = -1.0 / (-theta + np.sqrt(1.0 + theta * theta))
    c = 1.0 / np.sqrt(1.0 + t * t)
    s = t * c
    n11 = a11 - t * a12
    n22 = a22 + t * a12
    n01 = c * a01 - s * a02
    n02 = s * a01 + c * a02
    for r in range(3):
        vr1 = V[r, 1]
        vr2 = V[r, 2]
        V[r, 1] = c * vr1 - s * vr2
        V[r, 2] = s * vr1 + c * vr2
    return a00, n01, n02, n11, 0.0, n22


@njit(cache=True)
def _svd3_into(F, U, sig, V):
    """F = U diag(sig) V^T with U, V proper rotations, sig descending.

    Assumes det(F) > 0 (caller guards). Eigen-decomposes F^T F by cyclic
    Jacobi sweeps on scalar state, then rebuilds U from F and V with a
    Gram-Schmidt polish; a reflection in V is resolved by flipping the
    column of the smallest singular value.
    """
    f00 = F[0, 0]
    f01 = F[0, 1]
    f02 = F[0, 2]
    f10 = F[1, 0]
    f11 = F[1, 1]
    f12 = F[1, 2]
    f20 = F[2, 0]
    f21 = F[2, 1]
    f22 = F[2, 2]
    # A = F^T F, symmetric, six unique entries
    a00 = f00 * f00 + f10 * f10 + f20 * f20
    a01 = f00 * f01 + f10 * f11 + f20 * f21
    a02 = f00 * f02 + f10 * f12 + f20 * f22
    a11 = f01 * f01 + f11 * f11 + f21 * f21
    a12 = f01 * f02 + f11 * f12 + f21 * f22
    a22 = f02 * f02 + f12 * f12 + f22 * f22
    for i in range(3):
        for j in range(3):
            V[i, j] = 1.0 if i == j else 0.0
    for _ in range(24):
        off = a01 * a01 + a02 * a02 + a12 * a12
        diag = a00 * a00 + a11 * a11 + a22 * a22
        if off <= 1e-30 * (diag + 1e-300):
            break
        a00, a01, a02, a11, a12, a22 = _rot01(a00, a01, a02, a11, a12, a22, V)
        a00, a01, a02, a11, a12, a22 = _rot02(a00, a01, a02, a11, a12, a22, V)
        a00, a01, a02, a11, a12, a22 = _rot12(a00, a01, a02, a11, a12, a22, V)

    # Sort eigenvalues descending, carrying V's columns along.
    l0, l1, l2 = a00, a11, a22
    c0, c1, c2 = 0, 1, 2
    if l0 < l1:
        l0, l1 = l1, l0
        c0, c1 = c1, c0
    if l1 < l2:
        l1, l2 = l2, l1
        c1, c2 = c2, c1
    if l0 < l1:
        l0, l1 = l1, l0
        c0, c1 = c1, c0
    sig[0] = np.sqrt(max(l0, 0.0))
    sig[1] = np.sqrt(max(l1, 0.0))
    sig[2] = np.sqrt(max(l2, 0.0))
    v00 = V[0, c0]
    v10 = V[1, c0]
    v20 = V[2, c0]
    v01 = V[0, c1]
    v11 = V[1, c1]
    v21 = V[2, c1]
    v02 = V[0, c2]
    v12 = V[1, c2]
    v22 = V[2, c2]
    detv = (
        v00 * (v11 * v22 - v12 * v21)
        - v01 * (v10 * v22 - v12 * v20)
        + v02 * (v10 * v21 - v11 * v20)
    )
    if detv < 0.0:
        v02 = -v02
        v12 = -v12
        v22 = -v22
    V[0, 0] = v00
    V[1, 0] = v10
    V[2, 0] = v20
    V[0, 1] = v01
    V[1, 1] = v11
    V[2, 1] = v21
    V[0, 2] = v02
    V[1, 2] = v12
    V[2, 2] = v22

    # U columns: normalize F v_0, orthogonalize F v_1 against it, cross for
    # the last column so U stays a proper rotation.
    u00 = f00 * v00 + f01 * v10 + f02 * v20
    u10 = f10 * v00 + f11 * v10 + f12 * v20
    u20 = f20 * v00 + f21 * v10 + f22 * v20
    u01 = f00 * v01 + f01 * v11 + f02 * v21
    u11 = f10 * v01 + f11 * v11 + f12 * v21
    u21 = f20 * v01 + f21 * v11 + f22 * v21
    n0 = np.sqrt(u00 * u00 + u10 * u10 + u20 * u20)
    if n0 < 1e-300:
        n0 = 1.0
    inv0 = 1.0 / n0
    u00 *= inv0
    u10 *= inv0
    u20 *= inv0
    dot01 = u00 * u01 + u10 * u11 + u20 * u21
    u01 -= dot01 * u00
    u11 -= dot01 * u10
    u21 -= dot01 * u20
    n1 = np.sqrt(u01 * u01 + u11 * u11 + u21 * u21)
    if n1 < 1e-300:
        n1 = 1.0
    inv1 = 1.0 / n1
    u01 *= inv1
    u11 *= inv1
    u21 *= inv1
    U[0, 0] = u00
    U[1, 0] = u10
    U[2, 0] = u20
    U[0, 1] = u01
    U[1, 1] = u11
    U[2, 1] = u21
    U[0, 2] = u10 * u21 - u20 * u11
    U[1, 2] = u20 * u01 - u00 * u21
    U[2, 2] = u00 * u11 - u10 * u01


@njit(cache=True)
def svd3(F):
    """Allocating wrapper around the scalar SVD for host-side callers."""
    U = np.empty((3, 3))
    sig = np.empty(3)
    V = np.empty((3, 3))
    _svd3_into(F, U, sig, V)
    return U, sig, V


@njit(cache=True)
def det3(F):
    return (
        F[0, 0] * (F[1, 1] * F[2, 2] - F[1, 2] * F[2, 1])
        - F[0, 1] * (F[1, 0] * F[2, 2] - F[1, 2] * F[2, 0])
        + F[0, 2] * (F[1, 0] * F[2, 1] - F[1, 1] * F[2, 0])
    )


@njit(cache=True, error_model="numpy", fastmath={'contract', 'arcp', 'nsz'})
def compute_weights(x, h, n, base, w, dw):
    """Fill the per-particle quadratic B-spline stencil cache.

    base[p] is the lowest node index per axis, w[p, axis, offset] the
    per-axis weights, dw[p, axis, offset] the per-axis derivatives already
    divided by h. Returns (status, particle) flagging stencils that leave
    the grid.
    """
    inv_h = 1.0 / h
    for p in range(x.shape[0]):
        for a in range(3):
            rel = x[p, a] * inv_h
            b = int(np.floor(rel - 0.5))
            if b < 0 or b + 2 >= n:
                return STATUS_OUT_OF_DOMAIN, p
            f = rel - b
            base[p, a] = b
            w[p, a, 0] = 0.5 * (1.5 - f) ** 2
            w[p, a, 1] = 0.75 - (f - 1.0) ** 2
            w[p, a, 2] = 0.5 * (f - 0.5) ** 2
            dw[p, a, 0] = (f - 1.5) * inv_h
            dw[p, a, 1] = -2.0 * (f - 1.0) * inv_h
            dw[p, a, 2] = (f - 0.5) * inv_h
    return STATUS_OK, -1


@njit(cache=True, error_model="numpy", fastmath={'contract', 'arcp', 'nsz'})
def p2g_scatter(x, v, C, m, base, w, grid_m, grid_mom, h):
    """Scatter particle mass and affine momentum onto the grid.

    grid_mom holds momentum (kg m/s) on exit; normalization to velocities
    is a separate pass.
    """
    for p in range(x.shape[0]):
        bx = base[p, 0]
        by = base[p, 1]
        bz = base[p, 2]
        mp = m[p]
        vx = v[p, 0]
        vy = v[p, 1]
        vz = v[p, 2]
        c00 = C[p, 0, 0]
        c01 = C[p, 0, 1]
        c02 = C[p, 0, 2]
        c10 = C[p, 1, 0]
        c11 = C[p, 1, 1]
        c12 = C[p, 1, 2]
        c20 = C[p, 2, 0]
        c21 = C[p, 2, 1]
        c22 = C[p, 2, 2]
        for i in range(3):
            dx = (bx + i) * h - x[p, 0]
            wi = w[p, 0, i]
            for j in range(3):
                dy = (by + j) * h - x[p, 1]
                wij = wi * w[p, 1, j]
                for k in range(3):
                    dz = (bz + k) * h - x[p, 2]
                    wm = wij * w[p, 2, k] * mp
                    gi = bx + i
                    gj = by + j
                    gk = bz + k
                    grid_m[gi, gj, gk] += wm
                    grid_mom[gi, gj, gk, 0] += wm * (vx + c00 * dx + c01 * dy + c02 * dz)
                    grid_mom[gi, gj, gk, 1] += wm * (vy + c10 * dx + c11 * dy + c12 * dz)
                    grid_mom[gi, gj, gk, 2] += wm * (vz + c20 * dx + c21 * dy + c22 * dz)


@njit(cache=True, error_model="numpy", fastmath={'contract', 'arcp', 'nsz'})
def grid_normalize(grid_m, grid_v, inv_m, mass_eps):
    """Convert momentum to velocity where nodes carry mass; fill 1/m cache."""
    n = grid_m.shape[0]
    for i in range(n):
        for j in range(n):
            for k in range(n):
                mi = grid_m[i, j, k]
                if mi > mass_eps:
                    inv = 1.0 / mi
                    inv_m[i, j, k] = inv
                    grid_v[i, j, k, 0] *= inv
                    grid_v[i, j, k, 1] *= inv
                    grid_v[i, j, k, 2] *= inv
                else:
                    inv_m[i, j, k] = 0.0
                    grid_v[i, j, k, 0] = 0.0
                    grid_v[i, j, k, 1] = 0.0
                    grid_v[i, j, k, 2] = 0.0


@njit(cache=True, error_model="numpy", fastmath={'contract', 'arcp', 'nsz'})
def grid_apply_stress(F, V0, mu, lam, base, w, dw, inv_m, grid_v, dt):
    """Subtract dt/m_i times the corotated stress force from node velocities.

    Stress is the Kirchhoff measure of the fixed-corotated model,
    tau = 2 mu (F - R) F^T + lam J (J - 1) I. With the left stretch
    V_s = sqrt(F F^T) this is 2 mu (B - V_s) + lam J (J - 1) I, B = F F^T,
    and V_s has a closed form: by Cayley-Hamilton,
    V_s (B + i2 I) = i1 B + i3 I where i1, i2, i3 are the elementary
    symmetric functions of V_s's eigenvalues (the singular values of F),
    obtained from B's eigenvalues via the trigonometric cubic formula.
    That avoids an iterative SVD in the hot loop. Massless nodes have a
    zero 1/m cache entry, so they receive nothing. Returns
    (status, particle).
    """
    for p in range(F.shape[0]):
        f00 = F[p, 0, 0]
        f01 = F[p, 0, 1]
        f02 = F[p, 0, 2]
        f10 = F[p, 1, 0]
        f11 = F[p, 1, 1]
        f12 = F[p, 1, 2]
        f20 = F[p, 2, 0]
        f21 = F[p, 2, 1]
        f22 = F[p, 2, 2]
        jdet = (
            f00 * (f11 * f22 - f12 * f21)
            - f01 * (f10 * f22 - f12 * f20)
            + f02 * (f10 * f21 - f11 * f20)
        )
        if not jdet > DET_FLOOR:  # catches NaN as well
            return STATUS_DEGENERATE, p
        # B = F F^T, symmetric
        b00 = f00 * f00 + f01 * f01 + f02 * f02
        b01 = f00 * f10 + f01 * f11 + f02 * f12
        b02 = f00 * f20 + f01 * f21 + f02 * f22
        b11 = f10 * f10 + f11 * f11 + f12 * f12
        b12 = f10 * f20 + f11 * f21 + f12 * f22
        b22 = f20 * f20 + f21 * f21 + f22 * f22
        # eigenvalues of B
        q = (b00 + b11 + b22) / 3.0
        e00 = b00 - q
        e11 = b11 - q
        e22 = b22 - q
        p2 = e00 * e00 + e11 * e11 + e22 * e22 + 2.0 * (
            b01 * b01 + b02 * b02 + b12 * b12
        )
        pp = np.sqrt(p2 / 6.0)
        if pp < 1e-300:
            m1 = q
            m2 = q
            m3 = q
        else:
            inv_p = 1.0 / pp
            detc = (
                e00 * (e11 * e22 - b12 * b12)
                - b01 * (b01 * e22 - b12 * b02)
                + b02 * (b01 * b12 - e11 * b02)
            ) * (inv_p * inv_p * inv_p)
            r = detc / 2.0
            if r < -1.0:
                r = -1.0
            elif r > 1.0:
                r = 1.0
            phi = np.arccos(r) / 3.0
            m1 = q + 2.0 * pp * np.cos(phi)
            m3 = q + 2.0 * pp * np.cos(phi + 2.0943951023931953)
            m2 = 3.0 * q - m1 - m3
        sg1 = np.sqrt(max(m1, 0.0))
        sg2 = np.sqrt(max(m2, 0.0))
        sg3 = np.sqrt(max(m3, 0.0))
        i1 = sg1 + sg2 + sg3
        i2 = sg1 * sg2 + sg1 * sg3 + sg2 * sg3
        # M = B + i2 I; V_s = (i1 B + jdet I) M^{-1}
        m00 = b00 + i2
        m11 = b11 + i2
        m22 = b22 + i2
        a00 = m11 * m22 - b12 * b12
        a01 = b02 * b12 - b01 * m22
        a02 = b01 * b12 - b02 * m11
        a11 = m00 * m22 - b02 * b02
        a12 = b01 * b02 - m00 * b12
        a22 = m00 * m11 - b01 * b01
        detm = m00 * a00 + b01 * a01 + b02 * a02
        inv_det = 1.0 / detm
        n00 = i1 * b00 + jdet
        n01 = i1 * b01
        n02 = i1 * b02
        n11 = i1 * b11 + jdet
        n12 = i1 * b12
        n22 = i1 * b22 + jdet
        # V_s entries (symmetric up to rounding; off-diagonals averaged)
        vs00 = (n00 * a00 + n01 * a01 + n02 * a02) * inv_det
        vs11 = (n01 * a01 + n11 * a11 + n12 * a12) * inv_det
        vs22 = (n02 * a02 + n12 * a12 + n22 * a22) * inv_det
        vs01 = 0.5 * inv_det * (
            (n00 * a01 + n01 * a11 + n02 * a12)
            + (n01 * a00 + n11 * a01 + n12 * a02)
        )
        vs02 = 0.5 * inv_det * (
            (n00 * a02 + n01 * a12 + n02 * a22)
            + (n02 * a00 + n12 * a01 + n22 * a02)
        )
        vs12 = 0.5 * inv_det * (
            (n01 * a02 + n11 * a12 + n12 * a22)
            + (n02 * a01 + n12 * a11 + n22 * a12)
        )
        two_mu = 2.0 * mu[p]
        vol = lam[p] * jdet * (jdet - 1.0)
        scale = dt * V0[p]
        s00 = scale * (two_mu * (b00 - vs00) + vol)
        s01 = scale * (two_mu * (b01 - vs01))
        s02 = scale * (two_mu * (b02 - vs02))
        s10 = s01
        s11 = scale * (two_mu * (b11 - vs11) + vol)
        s12 = scale * (two_mu * (b12 - vs12))
        s20 = s02
        s21 = s12
        s22 = scale * (two_mu * (b22 - vs22) + vol)
        bx = base[p, 0]
        by = base[p, 1]
        bz = base[p, 2]
        for i in range(3):
            wi = w[p, 0, i]
            di = dw[p, 0, i]
            for j in range(3):
                wij = wi * w[p, 1, j]
                dij = di * w[p, 1, j]
                wdj = wi * dw[p, 1, j]
                for k in range(3):
                    gwx = dij * w[p, 2, k]
                    gwy = wdj * w[p, 2, k]
                    gwz = wij * dw[p, 2, k]
                    gi = bx + i
                    gj = by + j
                    gk = bz + k
                    coef = inv_m[gi, gj, gk]
                    grid_v[gi, gj, gk, 0] -= coef * (s00 * gwx + s01 * gwy + s02 * gwz)
                    grid_v[gi, gj, gk, 1] -= coef * (s10 * gwx + s11 * gwy + s12 * gwz)
                    grid_v[gi, gj, gk, 2] -= coef * (s20 * gwx + s21 * gwy + s22 * gwz)
    return STATUS_OK, -1


@njit(cache=True, error_model="numpy", fastmath={'contract', 'arcp', 'nsz'})
def grid_forces_and_bc(
    grid_m,
    grid_v,
    h,
    n,
    dt,
    t,
    gravity,
    ev_lo,
    ev_hi,
    ev_f,
    ev_t0,
    ev_t1,
    bc_codes,
    band,
    mass_eps,
):
    """Integrate gravity plus active box force events, then wall conditions.

    bc_codes: per face (x_lo, x_hi, y_lo, y_hi, z_lo, z_hi), 0 sticky 1 slip.
    Nodes within `band` cells of a face are zeroed (sticky) or have the
    wall-normal velocity component zeroed (slip).
    """
    n_ev = ev_t0.shape[0]
    gx = gravity[0]
    gy = gravity[1]
    gz = gravity[2]
    for i in range(n):
        px = i * h
        x_lo_band = i <= band
        x_hi_band = i >= n - 1 - band
        for j in range(n):
            py = j * h
            y_lo_band = j <= band
            y_hi_band = j >= n - 1 - band
            for k in range(n):
                if grid_m[i, j, k] > mass_eps:
                    pz = k * h
                    grid_v[i, j, k, 0] += dt * gx
                    grid_v[i, j, k, 1] += dt * gy
                    grid_v[i, j, k, 2] += dt * gz
                    for e in range(n_ev):
                        if ev_t0[e] <= t < ev_t1[e]:
                            if (
                                ev_lo[e, 0] <= px <= ev_hi[e, 0]
                                and ev_lo[e, 1] <= py <= ev_hi[e, 1]
                                and ev_lo[e, 2] <= pz <= ev_hi[e, 2]
                            ):
                                grid_v[i, j, k, 0] += dt * ev_f[e, 0]
                                grid_v[i, j, k, 1] += dt * ev_f[e, 1]
                                grid_v[i, j, k, 2] += dt * ev_f[e, 2]
                if x_lo_band:
                    if bc_codes[0] == 0:
                        grid_v[i, j, k, 0] = 0.0
                        grid_v[i, j, k, 1] = 0.0
                        grid_v[i, j, k, 2] = 0.0
                    else:
                        grid_v[i, j, k, 0] = 0.0
                if x_hi_band:
                    if bc_codes[1] == 0:
                        grid_v[i, j, k, 0] = 0.0
                        grid_v[i, j, k, 1] = 0.0
                        grid_v[i, j, k, 2] = 0.0
                    else:
                        grid_v[i, j, k, 0] = 0.0
                if y_lo_band:
                    if bc_codes[2] == 0:
                        grid_v[i, j, k, 0] = 0.0
                        grid_v[i, j, k, 1] = 0.0
                        grid_v[i, j, k, 2] = 0.0
                    else:
                        grid_v[i, j, k, 1] = 0.0
                if y_hi_band:
                    if bc_codes[3] == 0:
                        grid_v[i, j, k, 0] = 0.0
                        grid_v[i, j, k, 1] = 0.0
                        grid_v[i, j, k, 2] = 0.0
                    else:
                        grid_v[i, j, k, 1] = 0.0
                if k <= band:
                    if bc_codes[4] == 0:
                        grid_v[i, j, k, 0] = 0.0
                        grid_v[i, j, k, 1] = 0.0
                        grid_v[i, j, k, 2] = 0.0
                    else:
                        grid_v[i, j, k, 2] = 0.0
                if k >= n - 1 - band:
                    if bc_codes[5] == 0:
                        grid_v[i, j, k, 0] = 0.0
                        grid_v[i, j, k, 1] = 0.0
                        grid_v[i, j, k, 2] = 0.0
                    else:
                        grid_v[i, j, k, 2] = 0.0


@njit(cache=True, error_model="numpy", fastmath={'contract', 'arcp', 'nsz'})
def g2p_update(x, v, C, F, base, w, grid_v, h, dt, lo, hi):
    """Gather node velocities back to particles; advect and update F, C.

    Positions are clamped to [lo, hi] per axis. Returns the maximum particle
    speed squared (inf when any component went non-finite).
    """
    four_inv_h2 = 4.0 / (h * h)
    max_sp2 = 0.0
    for p in range(x.shape[0]):
        bx = base[p, 0]
        by = base[p, 1]
        bz = base[p, 2]
        nvx = 0.0
        nvy = 0.0
        nvz = 0.0
        b00 = 0.0
        b01 = 0.0
        b02 = 0.0
        b10 = 0.0
        b11 = 0.0
        b12 = 0.0
        b20 = 0.0
        b21 = 0.0
        b22 = 0.0
        for i in range(3):
            dx = (bx + i) * h - x[p, 0]
            wi = w[p, 0, i]
            for j in range(3):
                dy = (by + j) * h - x[p, 1]
                wij = wi * w[p, 1, j]
                for k in range(3):
                    dz = (bz + k) * h - x[p, 2]
                    wk = wij * w[p, 2, k]
                    gvx = grid_v[bx + i, by + j, bz + k, 0]
                    gvy = grid_v[bx + i, by + j, bz + k, 1]
                    gvz = grid_v[bx + i, by + j, bz + k, 2]
                    nvx += wk * gvx
                    nvy += wk * gvy
                    nvz += wk * gvz
                    b00 += wk * gvx * dx
                    b01 += wk * gvx * dy
                    b02 += wk * gvx * dz
                    b10 += wk * gvy * dx
                    b11 += wk * gvy * dy
                    b12 += wk * gvy * dz
                    b20 += wk * gvz * dx
                    b21 += wk * gvz * dy
                    b22 += wk * gvz * dz
        c00 = four_inv_h2 * b00
        c01 = four_inv_h2 * b01
        c02 = four_inv_h2 * b02
        c10 = four_inv_h2 * b10
        c11 = four_inv_h2 * b11
        c12 = four_inv_h2 * b12
        c20 = four_inv_h2 * b20
        c21 = four_inv_h2 * b21
        c22 = four_inv_h2 * b22
        v[p, 0] = nvx
        v[p, 1] = nvy
        v[p, 2] = nvz
        x[p, 0] = min(max(x[p, 0] + dt * nvx, lo), hi)
        x[p, 1] = min(max(x[p, 1] + dt * nvy, lo), hi)
        x[p, 2] = min(max(x[p, 2] + dt * nvz, lo), hi)
        # F <- (I + dt C) F
        a00 = 1.0 + dt * c00
        a01 = dt * c01
        a02 = dt * c02
        a10 = dt * c10
        a11 = 1.0 + dt * c11
        a12 = dt * c12
        a20 = dt * c20
        a21 = dt * c21
        a22 = 1.0 + dt * c22
        f00 = F[p, 0, 0]
        f01 = F[p, 0, 1]
        f02 = F[p, 0, 2]
        f10 = F[p, 1, 0]
        f11 = F[p, 1, 1]
        f12 = F[p, 1, 2]
        f20 = F[p, 2, 0]
        f21 = F[p, 2, 1]
        f22 = F[p, 2, 2]
        F[p, 0, 0] = a00 * f00 + a01 * f10 + a02 * f20
        F[p, 0, 1] = a00 * f01 + a01 * f11 + a02 * f21
        F[p, 0, 2] = a00 * f02 + a01 * f12 + a02 * f22
        F[p, 1, 0] = a10 * f00 + a11 * f10 + a12 * f20
        F[p, 1, 1] = a10 * f01 + a11 * f11 + a12 * f21
        F[p, 1, 2] = a10 * f02 + a11 * f12 + a12 * f22
        F[p, 2, 0] = a20 * f00 + a21 * f10 + a22 * f20
        F[p, 2, 1] = a20 * f01 + a21 * f11 + a22 * f21
        F[p, 2, 2] = a20 * f02 + a21 * f12 + a22 * f22
        C[p, 0, 0] = c00
        C[p, 0, 1] = c01
        C[p, 0, 2] = c02
        C[p, 1, 0] = c10
        C[p, 1, 1] = c11
        C[p, 1, 2] = c12
        C[p, 2, 0] = c20
        C[p, 2, 1] = c21
        C[p, 2, 2] = c22
        sp2 = nvx * nvx + nvy * nvy + nvz * nvz
        if not np.isfinite(sp2):
            return np.inf
        if sp2 > max_sp2:
            max_sp2 = sp2
    return max_sp2


@njit(cache=True, error_model="numpy", fastmath={'contract', 'arcp', 'nsz'})
def run_substeps(
    x,
    v,
    C,
    F,
    m,
    V0,
    mu,
    lam,
    grid_m,
    grid_v,
    inv_m,
    base,
    w,
    dw,
    h,
    n,
    dt,
    t_start,
    n_substeps,
    gravity,
    ev_lo,
    ev_hi,
    ev_f,
    ev_t0,
    ev_t1,
    bc_codes,
    band,
    mass_eps,
):
    """Drive n_substeps full substeps without returning to Python.

    Phase order per substep: clear grid, cache weights, p2g scatter,
    normalize, stress, gravity/events/walls, g2p. Returns
    (status, index, value, t_end): index is the offending particle for
    domain/degeneracy failures or the substep number for instability, and
    value carries the peak speed that tripped the h/dt guard.
    """
    limit = h / dt
    t = t_start
    for s in range(n_substeps):
        for i in range(n):
            for j in range(n):
                for k in range(n):
                    grid_m[i, j, k] = 0.0
                    grid_v[i, j, k, 0] = 0.0
                    grid_v[i, j, k, 1] = 0.0
                    grid_v[i, j, k, 2] = 0.0
        status, idx = compute_weights(x, h, n, base, w, dw)
        if status != STATUS_OK:
            return status, idx, 0.0, t
        p2g_scatter(x, v, C, m, base, w, grid_m, grid_v, h)
        grid_normalize(grid_m, grid_v, inv_m, mass_eps)
        status, idx = grid_apply_stress(F, V0, mu, lam, base, w, dw, inv_m, grid_v, dt)
        if status != STATUS_OK:
            return status, idx, 0.0, t
        grid_forces_and_bc(
            grid_m, grid_v, h, n, dt, t, gravity,
            ev_lo, ev_hi, ev_f, ev_t0, ev_t1, bc_codes, band, mass_eps,
        )
        max_sp2 = g2p_update(
            x, v, C, F, base, w, grid_v, h, dt, band * h, 1.0 - band * h
        )
        t = t + dt
        vmax = np.sqrt(max_sp2)
        if vmax > limit:
            return STATUS_UNSTABLE, s, vmax, t
    return STATUS_OK, -1, 0.0, t


@njit(cache=True, error_model="numpy", fastmath={'contract', 'arcp', 'nsz'})
def splat_image(u, v, amp, sigma, out):
    """Accumulate truncated Gaussian footprints at pixel coords (u, v).

    Pixel (row r, col c) has center (c + 0.5, r + 0.5). Particles whose
    center falls outside the image rectangle contribute nothing.
    """
    h_px = out.shape[0]
    w_px = out.shape[1]
    r_cut = 3.0 * sigma
    r2_cut = r_cut * r_cut
    inv_2s2 = 1.0 / (2.0 * sigma * sigma)
    for p in range(u.shape[0]):
        cu = u[p]
        cv = v[p]
        if cu < 0.0 or cu > w_px or cv < 0.0 or cv > h_px:
            continue
        c_lo = max(0, int(np.ceil(cu - r_cut - 0.5)))
        c_hi = min(w_px - 1, int(np.floor(cu + r_cut - 0.5)))
        r_lo = max(0, int(np.ceil(cv - r_cut - 0.5)))
        r_hi = min(h_px - 1, int(np.floor(cv + r_cut - 0.5)))
        for rr in range(r_lo, r_hi + 1):
            dv = (rr + 0.5) - cv
            for cc in range(c_lo, c_hi + 1):
                du = (cc + 0.5) - cu
                d2 = du * du + dv * dv
                if d2 <= r2_cut:
                    out[rr, cc] += amp * np.exp(-d2 * inv_2s2)


@njit(cache=True, error_model="numpy", fastmath={'contract', 'arcp', 'nsz'})
def splat_flow(u, v, disp_u, disp_v, sigma, wsum, acc):
    """Splat per-particle pixel displacements with Gaussian weights.

    wsum (H, W) accumulates weights, acc (H, W, 2) weight-times-displacement;
    the caller normalizes. Footprints are anchored at the first frame's
    projected positions (u, v).
    """
    h_px = wsum.shape[0]
    w_px = wsum.shape[1]
    r_cut = 3.0 * sigma
    r2_cut = r_cut * r_cut
    inv_2s2 = 1.0 / (2.0 * sigma * sigma)
    for p in range(u.shape[0]):
        cu = u[p]
        cv = v[p]
        if cu < 0.0 or cu > w_px or cv < 0.0 or cv > h_px:
            continue
        c_lo = max(0, int(np.ceil(cu - r_cut - 0.5)))
        c_hi = min(w_px - 1, int(np.floor(cu + r_cut - 0.5)))
        r_lo = max(0, int(np.ceil(cv - r_cut - 0.5)))
        r_hi = min(h_px - 1, int(np.floor(cv + r_cut - 0.5)))
        for rr in range(r_lo, r_hi + 1):
            dv = (rr + 0.5) - cv
            for cc in range(c_lo, c_hi + 1):
                du = (cc + 0.5) - cu
                d2 = du * du + dv * dv
                if d2 <= r2_cut:
                    wt = np.exp(-d2 * inv_2s2)
                    wsum[rr, cc] += wt
                    acc[rr, cc, 0] += wt * disp_u[p]
                    acc[rr, cc, 1] += wt * disp_v[p]
