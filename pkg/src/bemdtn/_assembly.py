"""Compiled dense Galerkin assembly of the Laplace boundary operators.

Loops run serially in a fixed order, so results are bitwise reproducible.
"""

import numpy as np
from numba import njit

INV_4PI = 1.0 / (4.0 * np.pi)


@njit(cache=True)
def _cross(a, b):
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


@njit(cache=True)
def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


@njit(cache=True)
def _norm(a):
    return np.sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2])


@njit(cache=True)
def _edge_log(x0, x1, x2, a0, a1, a2, b0, b1, b2):
    """Integral of 1/|x - y| along the segment a -> b."""
    t0 = b0 - a0
    t1 = b1 - a1
    t2 = b2 - a2
    L = np.sqrt(t0 * t0 + t1 * t1 + t2 * t2)
    sa = ((a0 - x0) * t0 + (a1 - x1) * t1 + (a2 - x2) * t2) / L
    sb = sa + L
    ra = np.sqrt((a0 - x0) ** 2 + (a1 - x1) ** 2 + (a2 - x2) ** 2)
    rb = np.sqrt((b0 - x0) ** 2 + (b1 - x1) ** 2 + (b2 - x2) ** 2)
    if sa >= 0.0:
        return np.log((rb + sb) / (ra + sa))
    # ra - sa > 0 always here; rb - sb may cancel only when x is on the line
    return np.log((ra - sa) / (rb - sb))


@njit(cache=True)
def double_layer_linear(x, q, n, area2, out):
    """Exact ``∫_T (x - y)·n / |x - y|^3 λ_b(y) dy`` for the three hats ``λ_b`` of T.

    ``q`` holds the corners (3, 3) counter-clockwise about ``n``; results go to ``out``.
    The hat moments split into the solid angle of T seen from x and the
    in-plane gradient term ``h ∇λ_b · J`` with ``J`` a sum of edge logarithms.
    """
    x0 = x[0]
    x1 = x[1]
    x2 = x[2]
    n0 = n[0]
    n1 = n[1]
    n2 = n[2]
    a0 = q[0, 0] - x0
    a1 = q[0, 1] - x1
    a2 = q[0, 2] - x2
    b0 = q[1, 0] - x0
    b1 = q[1, 1] - x1
    b2 = q[1, 2] - x2
    c0 = q[2, 0] - x0
    c1 = q[2, 1] - x1
    c2 = q[2, 2] - x2
    h = -(a0 * n0 + a1 * n1 + a2 * n2)
    la = np.sqrt(a0 * a0 + a1 * a1 + a2 * a2)
    lb = np.sqrt(b0 * b0 + b1 * b1 + b2 * b2)
    lc = np.sqrt(c0 * c0 + c1 * c1 + c2 * c2)
    num = a0 * (b1 * c2 - b2 * c1) + a1 * (b2 * c0 - b0 * c2) + a2 * (b0 * c1 - b1 * c0)
    ab = a0 * b0 + a1 * b1 + a2 * b2
    ac = a0 * c0 + a1 * c1 + a2 * c2
    bc = b0 * c0 + b1 * c1 + b2 * c2
    den = la * lb * lc + ab * lc + ac * lb + bc * la
    omega = -2.0 * np.arctan2(num, den)
    # corners relative to the projection of x onto the plane
    p00 = a0 + h * n0
    p01 = a1 + h * n1
    p02 = a2 + h * n2
    p10 = b0 + h * n0
    p11 = b1 + h * n1
    p12 = b2 + h * n2
    p20 = c0 + h * n0
    p21 = c1 + h * n1
    p22 = c2 + h * n2
    J0 = 0.0
    J1 = 0.0
    J2 = 0.0
    if h != 0.0:
        for e in range(3):
            i = (e + 1) % 3
            j = (e + 2) % 3
            t0 = q[j, 0] - q[i, 0]
            t1 = q[j, 1] - q[i, 1]
            t2 = q[j, 2] - q[i, 2]
            m0 = t1 * n2 - t2 * n1
            m1 = t2 * n0 - t0 * n2
            m2 = t0 * n1 - t1 * n0
            mn = np.sqrt(m0 * m0 + m1 * m1 + m2 * m2)
            I = _edge_log(x0, x1, x2, q[i, 0], q[i, 1], q[i, 2], q[j, 0], q[j, 1], q[j, 2]) / mn
            J0 -= m0 * I
            J1 -= m1 * I
            J2 -= m2 * I
    for k in range(3):
        i = (k + 1) % 3
        j = (k + 2) % 3
        if i == 0:
            u0, u1, u2 = p00, p01, p02
        elif i == 1:
            u0, u1, u2 = p10, p11, p12
        else:
            u0, u1, u2 = p20, p21, p22
        if j == 0:
            v0, v1, v2 = p00, p01, p02
        elif j == 1:
            v0, v1, v2 = p10, p11, p12
        else:
            v0, v1, v2 = p20, p21, p22
        lam = ((u1 * v2 - u2 * v1) * n0 + (u2 * v0 - u0 * v2) * n1 + (u0 * v1 - u1 * v0) * n2) / area2
        # grad λ_k = n x (q_j - q_i) / area2
        e0 = v0 - u0
        e1 = v1 - u1
        e2 = v2 - u2
        g0 = (n1 * e2 - n2 * e1) / area2
        g1 = (n2 * e0 - n0 * e2) / area2
        g2 = (n0 * e1 - n1 * e0) / area2
        out[k] = lam * omega + h * (g0 * J0 + g1 * J1 + g2 * J2)


@njit(cache=True)
def _shared(ta, tb):
    """Shared-vertex count and Sauter--Schwab corner orderings for a triangle pair."""
    pa = np.empty(3, np.int64)
    pb = np.empty(3, np.int64)
    ns = 0
    for i in range(3):
        for j in range(3):
            if ta[i] == tb[j]:
                pa[ns] = i
                pb[ns] = j
                ns += 1
    if ns == 3:
        for i in range(3):
            pa[i] = i
            pb[i] = i
        return ns, pa, pb
    ka = ns
    for i in range(3):
        used = False
        for s in range(ns):
            if pa[s] == i:
                used = True
        if not used:
            pa[ka] = i
            ka += 1
    kb = ns
    for j in range(3):
        used = False
        for s in range(ns):
            if pb[s] == j:
                used = True
        if not used:
            pb[kb] = j
            kb += 1
    return ns, pa, pb


@njit(cache=True)
def _ss_block(Pa, Pb, pa, pb, xh, yh, w, a2, b2, na, nb, eps, mode, blk, track):
    """Sauter--Schwab block for one singular pair.

    mode 0: single layer 1/(r+eps); mode 1: double layer (x-y)·n_y/(r+eps)^3.
    Returns (P0 integral, minimum r seen).
    """
    qa0 = Pa[pa[0]]
    qa1 = Pa[pa[1]]
    qa2 = Pa[pa[2]]
    qb0 = Pb[pb[0]]
    qb1 = Pb[pb[1]]
    qb2 = Pb[pb[2]]
    ea0 = qa1 - qa0
    ea1 = qa2 - qa1
    eb0 = qb1 - qb0
    eb1 = qb2 - qb1
    s0 = 0.0
    rmin = track
    for k in range(3):
        for l in range(3):
            blk[k, l] = 0.0
    for i in range(len(w)):
        x1 = xh[i, 0]
        x2 = xh[i, 1]
        y1 = yh[i, 0]
        y2 = yh[i, 1]
        d0 = (qa0[0] + x1 * ea0[0] + x2 * ea1[0]) - (qb0[0] + y1 * eb0[0] + y2 * eb1[0])
        d1 = (qa0[1] + x1 * ea0[1] + x2 * ea1[1]) - (qb0[1] + y1 * eb0[1] + y2 * eb1[1])
        d2 = (qa0[2] + x1 * ea0[2] + x2 * ea1[2]) - (qb0[2] + y1 * eb0[2] + y2 * eb1[2])
        r = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
        if r < rmin:
            rmin = r
        if mode == 0:
            val = 1.0 / (r + eps)
        else:
            re = r + eps
            val = (d0 * nb[0] + d1 * nb[1] + d2 * nb[2]) / (re * re * re)
        val *= w[i] * a2 * b2
        s0 += val
        ba0 = 1.0 - x1
        ba1 = x1 - x2
        ba2 = x2
        bb0 = 1.0 - y1
        bb1 = y1 - y2
        bb2 = y2
        blk[pa[0], pb[0]] += val * ba0 * bb0
        blk[pa[0], pb[1]] += val * ba0 * bb1
        blk[pa[0], pb[2]] += val * ba0 * bb2
        blk[pa[1], pb[0]] += val * ba1 * bb0
        blk[pa[1], pb[1]] += val * ba1 * bb1
        blk[pa[1], pb[2]] += val * ba1 * bb2
        blk[pa[2], pb[0]] += val * ba2 * bb0
        blk[pa[2], pb[1]] += val * ba2 * bb1
        blk[pa[2], pb[2]] += val * ba2 * bb2
    return s0, rmin


@njit(cache=True)
def _tensor_block(Xa, Xb, bary, wq, a2, b2, nb, eps, mode, blk, track):
    """Tensor-product block for a regular pair (same rule on both triangles)."""
    q = len(wq)
    s0 = 0.0
    rmin = track
    for k in range(3):
        for l in range(3):
            blk[k, l] = 0.0
    scale = 0.25 * a2 * b2
    for i in range(q):
        # inner accumulation per outer node keeps the cost at O(q^2 + 9q)
        acc0 = 0.0
        acc1 = 0.0
        acc2 = 0.0
        tot = 0.0
        xa0 = Xa[i, 0]
        xa1 = Xa[i, 1]
        xa2 = Xa[i, 2]
        for j in range(q):
            d0 = xa0 - Xb[j, 0]
            d1 = xa1 - Xb[j, 1]
            d2 = xa2 - Xb[j, 2]
            r = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
            if r < rmin:
                rmin = r
            if mode == 0:
                val = 1.0 / (r + eps)
            else:
                re = r + eps
                val = (d0 * nb[0] + d1 * nb[1] + d2 * nb[2]) / (re * re * re)
            val *= wq[j]
            tot += val
            acc0 += val * bary[j, 0]
            acc1 += val * bary[j, 1]
            acc2 += val * bary[j, 2]
        wi = wq[i] * scale
        s0 += wi * tot
        for k in range(3):
            c = wi * bary[i, k]
            blk[k, 0] += c * acc0
            blk[k, 1] += c * acc1
            blk[k, 2] += c * acc2
    return s0, rmin


@njit(cache=True)
def _analytic_k_block(Xa, bary, wq, a2, Qb, nb, b2, blk, out):
    """Double-layer block: quadrature in x, exact inner integral in y."""
    for k in range(3):
        for l in range(3):
            blk[k, l] = 0.0
    scale = 0.5 * a2
    for i in range(len(wq)):
        double_layer_linear(Xa[i], Qb, nb, b2, out)
        for k in range(3):
            c = wq[i] * scale * bary[i, k]
            for l in range(3):
                blk[k, l] += c * out[l]


@njit(cache=True)
def _map_points(P, T, bary):
    m = T.shape[0]
    q = bary.shape[0]
    X = np.empty((m, q, 3))
    for t in range(m):
        for i in range(q):
            for c in range(3):
                X[t, i, c] = bary[i, 0] * P[T[t, 0], c] + bary[i, 1] * P[T[t, 1], c] + bary[i, 2] * P[T[t, 2], c]
    return X


@njit(cache=True)
def assemble_dense(
    P, T, N, A2,
    reg_bary, reg_w, near_bary, near_w, out_bary, out_w,
    ssc_x, ssc_y, ssc_w, sse_x, sse_y, sse_w, ssv_x, ssv_y, ssv_w,
    eps, near_factor, want_v, want_k, want_h, k_analytic,
):
    """Return dense (V, K, H) Galerkin matrices and the smallest sampled |x - y|.

    V and H are filled from unordered pairs and mirrored, so they are exactly
    symmetric. K loops over ordered pairs. H uses the surface-curl identity
    with the piecewise-constant single-layer integral of each pair.
    """
    n = P.shape[0]
    m = T.shape[0]
    V = np.zeros((n, n)) if want_v else np.zeros((0, 0))
    K = np.zeros((n, n)) if want_k else np.zeros((0, 0))
    H = np.zeros((n, n)) if want_h else np.zeros((0, 0))
    Xr = _map_points(P, T, reg_bary)
    Xn = _map_points(P, T, near_bary)
    Xo = _map_points(P, T, out_bary)
    cen = np.zeros((m, 3))
    diam = np.zeros(m)
    curl = np.zeros((m, 3, 3))
    corners = np.zeros((m, 3, 3))
    for t in range(m):
        for k in range(3):
            corners[t, k] = P[T[t, k]]
        cen[t] = (corners[t, 0] + corners[t, 1] + corners[t, 2]) / 3.0
        for k in range(3):
            e = _norm(corners[t, (k + 1) % 3] - corners[t, k])
            if e > diam[t]:
                diam[t] = e
            curl[t, k] = (corners[t, (k + 1) % 3] - corners[t, (k + 2) % 3]) / A2[t]
    blk = np.zeros((3, 3))
    kbuf = np.zeros(3)
    rmin = np.inf
    do_sym = want_v or want_h
    for t1 in range(m):
        for t2 in range(m):
            ns, pa, pb = _shared(T[t1], T[t2])
            near = False
            if ns == 0:
                dc = _norm(cen[t1] - cen[t2])
                near = dc < near_factor * max(diam[t1], diam[t2])
            # ---- symmetric single-layer part (unordered pairs)
            if do_sym and t2 >= t1:
                if ns == 0:
                    if near:
                        s0, rmin = _tensor_block(Xn[t1], Xn[t2], near_bary, near_w, A2[t1], A2[t2], N[t2], eps, 0, blk, rmin)
                    else:
                        s0, rmin = _tensor_block(Xr[t1], Xr[t2], reg_bary, reg_w, A2[t1], A2[t2], N[t2], eps, 0, blk, rmin)
                elif ns == 1:
                    s0, rmin = _ss_block(corners[t1], corners[t2], pa, pb, ssv_x, ssv_y, ssv_w, A2[t1], A2[t2], N[t1], N[t2], eps, 0, blk, rmin)
                elif ns == 2:
                    s0, rmin = _ss_block(corners[t1], corners[t2], pa, pb, sse_x, sse_y, sse_w, A2[t1], A2[t2], N[t1], N[t2], eps, 0, blk, rmin)
                else:
                    s0, rmin = _ss_block(corners[t1], corners[t2], pa, pb, ssc_x, ssc_y, ssc_w, A2[t1], A2[t2], N[t1], N[t2], eps, 0, blk, rmin)
                s0 *= INV_4PI
                if want_v:
                    for k in range(3):
                        for l in range(3):
                            v = blk[k, l] * INV_4PI
                            V[T[t1, k], T[t2, l]] += v
                            if t2 != t1:
                                V[T[t2, l], T[t1, k]] += v
                if want_h:
                    for k in range(3):
                        for l in range(3):
                            v = s0 * _dot(curl[t1, k], curl[t2, l])
                            H[T[t1, k], T[t2, l]] += v
                            if t2 != t1:
                                H[T[t2, l], T[t1, k]] += v
            # ---- double layer (ordered pairs); flat coincident panels give zero
            if want_k and ns != 3:
                if k_analytic:
                    # one outer rule per row triangle keeps the solid-angle sum exact
                    _analytic_k_block(Xo[t1], out_bary, out_w, A2[t1], corners[t2], N[t2], A2[t2], blk, kbuf)
                elif ns == 0:
                    if near:
                        s0, rmin = _tensor_block(Xn[t1], Xn[t2], near_bary, near_w, A2[t1], A2[t2], N[t2], eps, 1, blk, rmin)
                    else:
                        s0, rmin = _tensor_block(Xr[t1], Xr[t2], reg_bary, reg_w, A2[t1], A2[t2], N[t2], eps, 1, blk, rmin)
                elif ns == 1:
                    s0, rmin = _ss_block(corners[t1], corners[t2], pa, pb, ssv_x, ssv_y, ssv_w, A2[t1], A2[t2], N[t1], N[t2], eps, 1, blk, rmin)
                else:
                    s0, rmin = _ss_block(corners[t1], corners[t2], pa, pb, sse_x, sse_y, sse_w, A2[t1], A2[t2], N[t1], N[t2], eps, 1, blk, rmin)
                for k in range(3):
                    for l in range(3):
                        K[T[t1, k], T[t2, l]] += blk[k, l] * INV_4PI
    return V, K, H, rmin


@njit(cache=True)
def single_layer_potential(X, P, T, N, A2, bary, w, density):
    """``∫ G(x, y) g(y) dy`` at points X for a piecewise-linear density (quadrature)."""
    out = np.zeros(X.shape[0])
    m = T.shape[0]
    for i in range(X.shape[0]):
        acc = 0.0
        for t in range(m):
            for q in range(len(w)):
                y = bary[q, 0] * P[T[t, 0]] + bary[q, 1] * P[T[t, 1]] + bary[q, 2] * P[T[t, 2]]
                g = bary[q, 0] * density[T[t, 0]] + bary[q, 1] * density[T[t, 1]] + bary[q, 2] * density[T[t, 2]]
                acc += w[q] * 0.5 * A2[t] * g / _norm(X[i] - y)
        out[i] = acc * INV_4PI
    return out


@njit(cache=True)
def double_layer_potential(X, P, T, N, A2, density):
    """``∫ ∂G/∂n_y(x, y) g(y) dy`` at points X, exact per flat panel."""
    out = np.zeros(X.shape[0])
    tmp = np.zeros(3)
    q = np.zeros((3, 3))
    for i in range(X.shape[0]):
        acc = 0.0
        for t in range(T.shape[0]):
            for k in range(3):
                q[k] = P[T[t, k]]
            double_layer_linear(X[i], q, N[t], A2[t], tmp)
            for k in range(3):
                acc += tmp[k] * density[T[t, k]]
        out[i] = acc * INV_4PI
    return out
