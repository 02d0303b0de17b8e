"""Hot numeric kernels with a numba path and a pure-numpy path.

Every kernel exists twice: ``<name>_numba`` (compiled with ``@njit`` when
numba is importable) and ``<name>_numpy``.  The unsuffixed name dispatches to
the numba variant unless ``DRONEFUSE_DISABLE_NUMBA=1`` is set in the
environment or numba is missing.  Results agree to floating-point rounding;
within one path they are bit-for-bit deterministic.

Kernels:

* ``fft_rows`` / ``ifft_rows`` -- radix-2 FFT along the last axis of a 2-D
  complex array (length must be a power of two).
* ``im2col`` / ``col2im`` -- NHWC patch extraction for convolution and its
  adjoint.
* ``dwconv_forward`` / ``dwconv_backward`` -- depthwise 2-D convolution.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


def _env_disabled() -> bool:
    return os.environ.get("DRONEFUSE_DISABLE_NUMBA", "0").strip().lower() in ("1", "true", "yes")


USE_NUMBA = HAVE_NUMBA and not _env_disabled()
BACKEND = "numba" if USE_NUMBA else "numpy"


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


# ---------------------------------------------------------------------------
# FFT
# ---------------------------------------------------------------------------

def fft_rows_numpy(x: np.ndarray) -> np.ndarray:
    return np.fft.fft(np.asarray(x, dtype=np.complex128), axis=-1)


def ifft_rows_numpy(x: np.ndarray) -> np.ndarray:
    return np.fft.ifft(np.asarray(x, dtype=np.complex128), axis=-1)


if HAVE_NUMBA:

    @njit(cache=True)
    def _radix2_rows(x, inverse):
        n_rows, n = x.shape
        out = x.copy()
        levels = 0
        while (1 << levels) < n:
            levels += 1
        rev = np.empty(n, np.int64)
        for i in range(n):
            r = 0
            v = i
            for _ in range(levels):
                r = (r << 1) | (v & 1)
                v >>= 1
            rev[i] = r
        sign = 1.0 if inverse else -1.0
        half_n = n // 2
        tw = np.empty(max(half_n, 1), np.complex128)
        for k in range(half_n):
            ang = sign * 2.0 * np.pi * k / n
            tw[k] = complex(np.cos(ang), np.sin(ang))
        for row in range(n_rows):
            for i in range(n):
                j = rev[i]
                if j > i:
                    tmp = out[row, i]
                    out[row, i] = out[row, j]
                    out[row, j] = tmp
            size = 2
            while size <= n:
                half = size // 2
                step = n // size
                for start in range(0, n, size):
                    for k in range(half):
                        w = tw[k * step]
                        a = out[row, start + k]
                        b = out[row, start + k + half] * w
                        out[row, start + k] = a + b
                        out[row, start + k + half] = a - b
                size *= 2
        if inverse:
            for row in range(n_rows):
                for i in range(n):
                    out[row, i] = out[row, i] / n
        return out

    def fft_rows_numba(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.complex128)
        if not _is_pow2(x.shape[-1]):
            raise ValueError(f"radix-2 FFT needs a power-of-two length, got {x.shape[-1]}")
        flat = np.ascontiguousarray(x.reshape(-1, x.shape[-1]))
        return _radix2_rows(flat, False).reshape(x.shape)

    def ifft_rows_numba(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.complex128)
        if not _is_pow2(x.shape[-1]):
            raise ValueError(f"radix-2 FFT needs a power-of-two length, got {x.shape[-1]}")
        flat = np.ascontiguousarray(x.reshape(-1, x.shape[-1]))
        return _radix2_rows(flat, True).reshape(x.shape)


# ---------------------------------------------------------------------------
# im2col / col2im (NHWC, square stride, symmetric zero padding)
# ---------------------------------------------------------------------------

def conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def im2col_numpy(x, kh, kw, stride, pad):
    n, h, w, c = x.shape
    ho = conv_out_size(h, kh, stride, pad)
    wo = conv_out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    return cols.reshape(n, ho, wo, kh * kw * c)


def col2im_numpy(cols, x_shape, kh, kw, stride, pad):
    n, h, w, c = x_shape
    ho = conv_out_size(h, kh, stride, pad)
    wo = conv_out_size(w, kw, stride, pad)
    cols = cols.reshape(n, ho, wo, kh, kw, c)
    gp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            gp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += cols[:, :, :, i, j, :]
    return gp[:, pad:pad + h, pad:pad + w, :]


if HAVE_NUMBA:

    @njit(cache=True)
    def _im2col_nb(x, kh, kw, stride, pad, ho, wo):
        n, h, w, c = x.shape
        cols = np.zeros((n, ho, wo, kh * kw * c), dtype=x.dtype)
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    col = 0
                    for i in range(kh):
                        iy = oy * stride + i - pad
                        for j in range(kw):
                            ix = ox * stride + j - pad
                            if 0 <= iy < h and 0 <= ix < w:
                                for ch in range(c):
                                    cols[b, oy, ox, col + ch] = x[b, iy, ix, ch]
                            col += c
        return cols

    @njit(cache=True)
    def _col2im_nb(cols, n, h, w, c, kh, kw, stride, pad, ho, wo):
        g = np.zeros((n, h, w, c), dtype=cols.dtype)
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    col = 0
                    for i in range(kh):
                        iy = oy * stride + i - pad
                        for j in range(kw):
                            ix = ox * stride + j - pad
                            if 0 <= iy < h and 0 <= ix < w:
                                for ch in range(c):
                                    g[b, iy, ix, ch] += cols[b, oy, ox, col + ch]
                            col += c
        return g

    def im2col_numba(x, kh, kw, stride, pad):
        n, h, w, c = x.shape
        ho = conv_out_size(h, kh, stride, pad)
        wo = conv_out_size(w, kw, stride, pad)
        return _im2col_nb(np.ascontiguousarray(x), kh, kw, stride, pad, ho, wo)

    def col2im_numba(cols, x_shape, kh, kw, stride, pad):
        n, h, w, c = x_shape
        ho = conv_out_size(h, kh, stride, pad)
        wo = conv_out_size(w, kw, stride, pad)
        cols = np.ascontiguousarray(cols.reshape(n, ho, wo, kh * kw * c))
        return _col2im_nb(cols, n, h, w, c, kh, kw, stride, pad, ho, wo)


# ---------------------------------------------------------------------------
# depthwise convolution, weight layout (kh, kw, C)
# ---------------------------------------------------------------------------

def dwconv_forward_numpy(x, wgt, stride, pad):
    n, h, w, c = x.shape
    kh, kw, _ = wgt.shape
    ho = conv_out_size(h, kh, stride, pad)
    wo = conv_out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    out = np.zeros((n, ho, wo, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] * wgt[i, j]
    return out


def dwconv_backward_numpy(x, wgt, gout, stride, pad):
    n, h, w, c = x.shape
    kh, kw, _ = wgt.shape
    ho, wo = gout.shape[1], gout.shape[2]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    gxp = np.zeros(xp.shape, dtype=x.dtype)
    gw = np.zeros(wgt.shape, dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            sl = (slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
            gw[i, j] = np.sum(xp[sl] * gout, axis=(0, 1, 2))
            gxp[sl] += gout * wgt[i, j]
    return gxp[:, pad:pad + h, pad:pad + w, :], gw


if HAVE_NUMBA:

    @njit(cache=True)
    def _dw_fwd_nb(x, wgt, stride, pad, ho, wo):
        n, h, w, c = x.shape
        kh, kw, _ = wgt.shape
        out = np.zeros((n, ho, wo, c), dtype=x.dtype)
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    for i in range(kh):
                        iy = oy * stride + i - pad
                        if iy < 0 or iy >= h:
                            continue
                        for j in range(kw):
                            ix = ox * stride + j - pad
                            if ix < 0 or ix >= w:
                                continue
                            for ch in range(c):
                                out[b, oy, ox, ch] += x[b, iy, ix, ch] * wgt[i, j, ch]
        return out

    @njit(cache=True)
    def _dw_bwd_nb(x, wgt, gout, stride, pad):
        n, h, w, c = x.shape
        kh, kw, _ = wgt.shape
        ho, wo = gout.shape[1], gout.shape[2]
        gx = np.zeros(x.shape, dtype=x.dtype)
        gw = np.zeros(wgt.shape, dtype=x.dtype)
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    for i in range(kh):
                        iy = oy * stride + i - pad
                        if iy < 0 or iy >= h:
                            continue
                        for j in range(kw):
                            ix = ox * stride + j - pad
                            if ix < 0 or ix >= w:
                                continue
                            for ch in range(c):
                                g = gout[b, oy, ox, ch]
                                gw[i, j, ch] += x[b, iy, ix, ch] * g
                                gx[b, iy, ix, ch] += wgt[i, j, ch] * g
        return gx, gw

    def dwconv_forward_numba(x, wgt, stride, pad):
        n, h, w, c = x.shape
        kh, kw, _ = wgt.shape
        ho = conv_out_size(h, kh, stride, pad)
        wo = conv_out_size(w, kw, stride, pad)
        return _dw_fwd_nb(np.ascontiguousarray(x), np.ascontiguousarray(wgt), stride, pad, ho, wo)

    def dwconv_backward_numba(x, wgt, gout, stride, pad):
        return _dw_bwd_nb(np.ascontiguousarray(x), np.ascontiguousarray(wgt),
                          np.ascontiguousarray(gout), stride, pad)


if USE_NUMBA:
    fft_rows = fft_rows_numba
    ifft_rows = ifft_rows_numba
    im2col = im2col_numba
    col2im = col2im_numba
    dwconv_forward = dwconv_forward_numba
    dwconv_backward = dwconv_backward_numba
else:
    fft_rows = fft_rows_numpy
    ifft_rows = ifft_rows_numpy
    im2col = im2col_numpy
    col2im = col2im_numpy
    dwconv_forward = dwconv_forward_numpy
    dwconv_backward = dwconv_backward_numpy
