"""Compiled inner loops: trilinear sampling (value, derivative, adjoint),
separable correlation, the fused LNCC passes and the central-difference
energy. All loops run sequentially in a fixed order, so results do not
depend on thread count.
"""
import numba as nb
import numpy as np


@nb.njit(cache=True, inline="always")
def _cell(p, n):
    if p < 0.0:
        p = 0.0
        inside = False
    elif p > n - 1.0:
        p = n - 1.0
        inside = False
    else:
        inside = True
    i0 = int(np.floor(p))
    if i0 > n - 2:
        i0 = n - 2
    return i0, p - i0, inside


@nb.njit(cache=True)
def sample(arr, px, py, pz):
    """Trilinear values of every channel of ``arr`` (shape (C, nx, ny, nz))."""
    nc, nx, ny, nz = arr.shape
    npts = px.size
    out = np.empty((nc, npts))
    fx_, fy_, fz_ = px.ravel(), py.ravel(), pz.ravel()
    for m in range(npts):
        i, fx, _ = _cell(fx_[m], nx)
        j, fy, _ = _cell(fy_[m], ny)
        k, fz, _ = _cell(fz_[m], nz)
        gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
        for c in range(nc):
            out[c, m] = (gx * (gy * (gz * arr[c, i, j, k] + fz * arr[c, i, j, k + 1])
                               + fy * (gz * arr[c, i, j + 1, k] + fz * arr[c, i, j + 1, k + 1]))
                         + fx * (gy * (gz * arr[c, i + 1, j, k] + fz * arr[c, i + 1, j, k + 1])
                                 + fy * (gz * arr[c, i + 1, j + 1, k]
                                         + fz * arr[c, i + 1, j + 1, k + 1])))
    return out


@nb.njit(cache=True)
def sample_grad(arr, px, py, pz):
    """Values and derivatives w.r.t. the sample coordinates, shapes (C, n) and (C, 3, n)."""
    nc, nx, ny, nz = arr.shape
    npts = px.size
    val = np.empty((nc, npts))
    grad = np.empty((nc, 3, npts))
    fx_, fy_, fz_ = px.ravel(), py.ravel(), pz.ravel()
    for m in range(npts):
        i, fx, inx = _cell(fx_[m], nx)
        j, fy, iny = _cell(fy_[m], ny)
        k, fz, inz = _cell(fz_[m], nz)
        gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
        for c in range(nc):
            c000, c001 = arr[c, i, j, k], arr[c, i, j, k + 1]
            c010, c011 = arr[c, i, j + 1, k], arr[c, i, j + 1, k + 1]
            c100, c101 = arr[c, i + 1, j, k], arr[c, i + 1, j, k + 1]
            c110, c111 = arr[c, i + 1, j + 1, k], arr[c, i + 1, j + 1, k + 1]
            a00 = gz * c000 + fz * c001
            a01 = gz * c010 + fz * c011
            a10 = gz * c100 + fz * c101
            a11 = gz * c110 + fz * c111
            b0 = gy * a00 + fy * a01
            b1 = gy * a10 + fy * a11
            val[c, m] = gx * b0 + fx * b1
            grad[c, 0, m] = (b1 - b0) if inx else 0.0
            grad[c, 1, m] = (gx * (a01 - a00) + fx * (a11 - a10)) if iny else 0.0
            if inz:
                grad[c, 2, m] = (gx * (gy * (c001 - c000) + fy * (c011 - c010))
                                 + fx * (gy * (c101 - c100) + fy * (c111 - c110)))
            else:
                grad[c, 2, m] = 0.0
    return val, grad


@nb.njit(cache=True)
def scatter(values, px, py, pz, nx, ny, nz):
    """Adjoint of :func:`sample` for values of shape (C, n)."""
    nc = values.shape[0]
    out = np.zeros((nc, nx, ny, nz))
    fx_, fy_, fz_ = px.ravel(), py.ravel(), pz.ravel()
    for m in range(px.size):
        i, fx, _ = _cell(fx_[m], nx)
        j, fy, _ = _cell(fy_[m], ny)
        k, fz, _ = _cell(fz_[m], nz)
        gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
        w000, w001 = gx * gy * gz, gx * gy * fz
        w010, w011 = gx * fy * gz, gx * fy * fz
        w100, w101 = fx * gy * gz, fx * gy * fz
        w110, w111 = fx * fy * gz, fx * fy * fz
        for c in range(nc):
            v = values[c, m]
            out[c, i, j, k] += w000 * v
            out[c, i, j, k + 1] += w001 * v
            out[c, i, j + 1, k] += w010 * v
            out[c, i, j + 1, k + 1] += w011 * v
            out[c, i + 1, j, k] += w100 * v
            out[c, i + 1, j, k + 1] += w101 * v
            out[c, i + 1, j + 1, k] += w110 * v
            out[c, i + 1, j + 1, k + 1] += w111 * v
    return out


@nb.njit(cache=True)
def _corr_mid(src, kernel, dst, clamp):
    nx, ny, nz = src.shape
    r = (kernel.size - 1) // 2
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                dst[i, j, k] = 0.0
            lo, hi = j - r, j + r
            if not clamp:
                lo, hi = max(0, lo), min(ny - 1, hi)
            for q in range(lo, hi + 1):
                w = kernel[q - j + r]
                qq = min(max(q, 0), ny - 1)
                for k in range(nz):
                    dst[i, j, k] += w * src[i, qq, k]


@nb.njit(cache=True)
def _corr_first(src, kernel, dst, clamp):
    nx, ny, nz = src.shape
    r = (kernel.size - 1) // 2
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                dst[i, j, k] = 0.0
        lo, hi = i - r, i + r
        if not clamp:
            lo, hi = max(0, lo), min(nx - 1, hi)
        for q in range(lo, hi + 1):
            w = kernel[q - i + r]
            qq = min(max(q, 0), nx - 1)
            for j in range(ny):
                for k in range(nz):
                    dst[i, j, k] += w * src[qq, j, k]


@nb.njit(cache=True)
def _corr_last(src, kernel, dst, clamp):
    # one (ny, nz) slab at a time, transposed so the inner loop is contiguous
    nx, ny, nz = src.shape
    r = (kernel.size - 1) // 2
    buf = np.empty((nz, ny), src.dtype)
    tmp = np.empty((nz, ny), src.dtype)
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                buf[k, j] = src[i, j, k]
        for k in range(nz):
            for j in range(ny):
                tmp[k, j] = 0.0
            lo, hi = k - r, k + r
            if not clamp:
                lo, hi = max(0, lo), min(nz - 1, hi)
            for q in range(lo, hi + 1):
                w = kernel[q - k + r]
                qq = min(max(q, 0), nz - 1)
                for j in range(ny):
                    tmp[k, j] += w * buf[qq, j]
        for j in range(ny):
            for k in range(nz):
                dst[i, j, k] = tmp[k, j]


@nb.njit(cache=True)
def blur_channels(src, kernel, clamp=False):
    """Separable correlation of every channel of ``src`` (C, nx, ny, nz) with a
    symmetric kernel. Outside the grid the signal is zero, or the nearest edge
    value when ``clamp`` is set."""
    out = np.empty_like(src)
    w1 = np.empty_like(src[0])
    w2 = np.empty_like(src[0])
    for c in range(src.shape[0]):
        _corr_first(src[c], kernel, w1, clamp)
        _corr_mid(w1, kernel, w2, clamp)
        _corr_last(w2, kernel, out[c], clamp)
    return out


@nb.njit(cache=True)
def lncc_forward(a, b, mb, sbb, norm, kernel, eps):
    """Local squared NCC of centred ``a`` against centred target ``b``.

    Returns (ma, sab, denom, mean ncc^2); window statistics are normalised by
    ``norm``, the filtered ones image.
    """
    nx, ny, nz = a.shape
    prod = np.empty((3, nx, ny, nz), a.dtype)
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                v = a[i, j, k]
                prod[0, i, j, k] = v
                prod[1, i, j, k] = v * v
                prod[2, i, j, k] = v * b[i, j, k]
    f = blur_channels(prod, kernel, False)
    ma = np.empty_like(a)
    sab = np.empty_like(a)
    denom = np.empty_like(a)
    total = 0.0
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                w = norm[i, j, k]
                m = f[0, i, j, k] / w
                saa = f[1, i, j, k] / w - m * m
                cab = f[2, i, j, k] / w - m * mb[i, j, k]
                d = saa * sbb[i, j, k] + eps
                ma[i, j, k] = m
                sab[i, j, k] = cab
                denom[i, j, k] = d
                total += cab * cab / d
    return ma, sab, denom, total / a.size


@nb.njit(cache=True)
def lncc_backward(a, b, ma, mb, sab, sbb, denom, norm, kernel):
    """Gradient of ``1 - mean ncc^2`` w.r.t. the centred warped image ``a``."""
    nx, ny, nz = a.shape
    n = a.size
    src = np.empty((3, nx, ny, nz), a.dtype)
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                d = denom[i, j, k]
                s = sab[i, j, k]
                d_sab = -2.0 * s / (n * d)
                d_saa = s * s * sbb[i, j, k] / (n * d * d)
                w = norm[i, j, k]
                src[0, i, j, k] = d_saa / w
                src[1, i, j, k] = d_sab / w
                src[2, i, j, k] = (-2.0 * ma[i, j, k] * d_saa - mb[i, j, k] * d_sab) / w
    f = blur_channels(src, kernel, False)
    out = np.empty_like(a)
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                out[i, j, k] = 2.0 * a[i, j, k] * f[0, i, j, k] + b[i, j, k] * f[1, i, j, k] + f[2, i, j, k]
    return out


@nb.njit(cache=True)
def sample_vjp(arr, px, py, pz, g):
    """``out[l, m] = sum_c g[c, m] * d arr_c / d x_l`` at the sample points,
    i.e. the vector-Jacobian product of :func:`sample` w.r.t. the positions."""
    nc, nx, ny, nz = arr.shape
    npts = px.size
    out = np.zeros((3, npts))
    fx_, fy_, fz_ = px.ravel(), py.ravel(), pz.ravel()
    for m in range(npts):
        i, fx, inx = _cell(fx_[m], nx)
        j, fy, iny = _cell(fy_[m], ny)
        k, fz, inz = _cell(fz_[m], nz)
        gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
        ox = 0.0
        oy = 0.0
        oz = 0.0
        for c in range(nc):
            w = g[c, m]
            c000, c001 = arr[c, i, j, k], arr[c, i, j, k + 1]
            c010, c011 = arr[c, i, j + 1, k], arr[c, i, j + 1, k + 1]
            c100, c101 = arr[c, i + 1, j, k], arr[c, i + 1, j, k + 1]
            c110, c111 = arr[c, i + 1, j + 1, k], arr[c, i + 1, j + 1, k + 1]
            a00 = gz * c000 + fz * c001
            a01 = gz * c010 + fz * c011
            a10 = gz * c100 + fz * c101
            a11 = gz * c110 + fz * c111
            ox += w * ((gy * a10 + fy * a11) - (gy * a00 + fy * a01))
            oy += w * (gx * (a01 - a00) + fx * (a11 - a10))
            oz += w * (gx * (gy * (c001 - c000) + fy * (c011 - c010))
                       + fx * (gy * (c101 - c100) + fy * (c111 - c110)))
        out[0, m] = ox if inx else 0.0
        out[1, m] = oy if iny else 0.0
        out[2, m] = oz if inz else 0.0
    return out


@nb.njit(cache=True)
def central_diff_energy(uc, stride, want_grad):
    """Sum of squared central differences of every channel at strided interior
    voxels, and (optionally) its gradient w.r.t. ``uc`` divided by the point count.
    """
    nc, nx, ny, nz = uc.shape
    count = (((nx - 3) // stride) + 1) * (((ny - 3) // stride) + 1) * (((nz - 3) // stride) + 1)
    total = 0.0
    gc = np.zeros(uc.shape) if want_grad else np.zeros((1, 1, 1, 1))
    inv = 1.0 / count
    for c in range(nc):
        for i in range(1, nx - 1, stride):
            for j in range(1, ny - 1, stride):
                for k in range(1, nz - 1, stride):
                    dx = 0.5 * (uc[c, i + 1, j, k] - uc[c, i - 1, j, k])
                    dy = 0.5 * (uc[c, i, j + 1, k] - uc[c, i, j - 1, k])
                    dz = 0.5 * (uc[c, i, j, k + 1] - uc[c, i, j, k - 1])
                    total += dx * dx + dy * dy + dz * dz
                    if want_grad:
                        gc[c, i + 1, j, k] += dx * inv
                        gc[c, i - 1, j, k] -= dx * inv
                        gc[c, i, j + 1, k] += dy * inv
                        gc[c, i, j - 1, k] -= dy * inv
                        gc[c, i, j, k + 1] += dz * inv
                        gc[c, i, j, k - 1] -= dz * inv
    return total / count, gc
