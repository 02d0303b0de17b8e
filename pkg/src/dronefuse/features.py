"""IQ record -> (TFI tensor, ZC correlation feature).

TFI path: STFT magnitude -> clamp/log -> min-max -> bilinear resize.
ZC path: random segment sampling -> normalized sliding cross-correlation
against every candidate preamble -> block-max pooling into one row each.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ParameterError
from .signal_synth import DEFAULT_UPSAMPLE, IqRecord, gen_zc, upsample_zc

LOG_EPS = 1e-6


# ---------------------------------------------------------------------------
# STFT
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StftConfig:
    U: int = 256
    hop: int = 128
    window: str = "hann"

    def __post_init__(self):
        if self.U <= 0 or self.U & (self.U - 1):
            raise ParameterError(f"STFT window length must be a power of two, got {self.U}")
        if not 0 < self.hop <= self.U:
            raise ParameterError(f"STFT hop must satisfy 0 < hop <= U, got {self.hop}")
        if self.window not in ("hann", "rect"):
            raise ParameterError(f"unknown window {self.window!r}")


@dataclass
class Spectrogram:
    """Magnitudes ``values[t, f]``; bins are in FFT order (bin k = k/U cycles/sample).

    Complex input keeps all ``U`` bins; real input keeps ``U/2 + 1``.
    """

    values: np.ndarray
    U: int
    hop: int
    two_sided: bool = True


def window(kind: str, U: int) -> np.ndarray:
    if kind == "rect":
        return np.ones(U)
    n = np.arange(U)
    return 0.5 - 0.5 * np.cos(2 * np.pi * n / U)


def stft(x: np.ndarray, cfg: StftConfig = StftConfig()) -> Spectrogram:
    x = np.asarray(x)
    if x.ndim != 1 or x.size < cfg.U:
        raise ParameterError(f"stft needs a 1-D input of at least U={cfg.U} samples, got {x.shape}")
    T = (x.size - cfg.U) // cfg.hop + 1
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.U)[::cfg.hop][:T]
    spec = np.abs(kernels.fft_rows(frames * window(cfg.window, cfg.U)))
    two_sided = np.iscomplexobj(x)
    if not two_sided:
        spec = spec[:, : cfg.U // 2 + 1]
    return Spectrogram(values=spec, U=cfg.U, hop=cfg.hop, two_sided=two_sided)


# ---------------------------------------------------------------------------
# TFI
# ---------------------------------------------------------------------------

@dataclass
class TfiTensor:
    values: np.ndarray  # H x W x ch, entries in [0, 1]
    degenerate: bool = False

    @property
    def shape(self):
        return self.values.shape


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic bilinear resampling matrix (n_out x n_in).

    Pixel-center aligned; when shrinking, the triangle kernel is widened by
    the scale factor so every input pixel contributes (anti-aliased bilinear).
    """
    scale = n_in / n_out
    support = max(scale, 1.0)
    centers = (np.arange(n_out) + 0.5) * scale - 0.5
    j = np.arange(n_in)
    w = np.maximum(0.0, 1.0 - np.abs(j[None, :] - centers[:, None]) / support)
    w_sum = w.sum(axis=1, keepdims=True)
    # upsampling near the border can leave only one in-range neighbour
    empty = w_sum[:, 0] == 0
    if empty.any():
        nearest = np.clip(np.rint(centers[empty]).astype(int), 0, n_in - 1)
        w[empty, nearest] = 1.0
        w_sum = w.sum(axis=1, keepdims=True)
    return w / w_sum


def resize_bilinear(img: np.ndarray, H: int, W: int) -> np.ndarray:
    if img.shape == (H, W):
        return img.copy()
    return resize_matrix(img.shape[0], H) @ img @ resize_matrix(img.shape[1], W).T


_COLOR_ANCHORS = np.array([[0.0, 0.0, 0.5], [0.0, 0.8, 0.3], [1.0, 1.0, 0.0]])


def colormap3(gray: np.ndarray) -> np.ndarray:
    """Three-anchor linear colormap, [0,1] -> RGB in [0,1]."""
    pos = gray * 2.0
    lo = np.clip(np.floor(pos).astype(int), 0, 1)
    frac = (pos - lo)[..., None]
    return _COLOR_ANCHORS[lo] * (1 - frac) + _COLOR_ANCHORS[lo + 1] * frac


def to_tfi(X: Spectrogram, H: int = 32, W: int = 32, ch: int = 1) -> TfiTensor:
    """Log-compressed, min-max normalized spectrogram image.

    Rows are frequency (centered for two-sided spectra), columns are time.
    A constant spectrogram cannot be normalized and yields an all-0.5 tensor
    with ``degenerate=True``.
    """
    vals = np.asarray(X.values, dtype=np.float64)
    if vals.size == 0:
        raise ParameterError("to_tfi needs a nonempty spectrogram")
    if ch not in (1, 3):
        raise ParameterError(f"TFI channel count must be 1 or 3, got {ch}")
    img = vals.T
    if X.two_sided:
        img = np.fft.fftshift(img, axes=0)
    img = np.log(np.maximum(img, LOG_EPS))
    lo, hi = img.min(), img.max()
    degenerate = not hi - lo > 1e-12 * max(1.0, abs(hi))
    if degenerate:
        img = np.full(img.shape, 0.5)
    else:
        img = (img - lo) / (hi - lo)
    img = np.clip(resize_bilinear(img, H, W), 0.0, 1.0)
    out = img[..., None] if ch == 1 else colormap3(img)
    return TfiTensor(values=out, degenerate=degenerate)


# ---------------------------------------------------------------------------
# ZC correlation feature
# ---------------------------------------------------------------------------

def segment_sample(x: np.ndarray, n_seg: int, seg_len: int, rng: np.random.Generator,
                   return_starts: bool = False):
    """Concatenate ``n_seg`` random, disjoint, order-preserving segments of ``x``.

    Start offsets are drawn uniformly over all feasible placements: the
    ``n_seg`` sorted draws from ``[0, slack]`` are spread out by ``seg_len``.
    """
    x = np.asarray(x)
    if n_seg < 1 or seg_len < 1 or n_seg * seg_len > x.size:
        raise ParameterError(f"cannot draw {n_seg} segments of {seg_len} from {x.size} samples")
    slack = x.size - n_seg * seg_len
    starts = np.sort(rng.integers(0, slack + 1, size=n_seg)) + np.arange(n_seg) * seg_len
    out = np.concatenate([x[s:s + seg_len] for s in starts])
    return (out, starts) if return_starts else out


def _next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


class _Signal:
    """Spectrum and sliding-window statistics of the searched sequence."""

    def __init__(self, x: np.ndarray, L_a: int, nfft: int):
        x = np.asarray(x, dtype=np.complex128)
        self.n_lags = x.size - L_a
        buf = np.zeros(nfft, dtype=np.complex128)
        buf[: x.size] = x
        self.spec = kernels.fft_rows(buf[None, :])[0]
        c1 = np.concatenate([[0.0], np.cumsum(x)])
        c2 = np.concatenate([[0.0], np.cumsum(np.abs(x) ** 2)])
        m = np.arange(self.n_lags)
        mean = (c1[m + L_a] - c1[m]) / L_a
        power = (c2[m + L_a] - c2[m]) / L_a
        self.var = np.maximum(power - np.abs(mean) ** 2, 0.0)
        self.floor = 1e-10 * max(float(np.mean(np.abs(x) ** 2)), 0.0)


def _reference(y: np.ndarray, nfft: int):
    """Spectrum of the zero-mean reference window and its sample variance."""
    y1 = y - y.mean()
    buf = np.zeros(nfft, dtype=np.complex128)
    buf[: y.size] = y1
    return kernels.fft_rows(buf[None, :])[0], float(np.mean(np.abs(y1) ** 2))


@functools.lru_cache(maxsize=64)
def _candidate_reference(r: int, V: int, factor: int, nfft: int):
    y = upsample_zc(gen_zc(r, V), factor)
    yspec, var1 = _reference(y, nfft)
    yspec.setflags(write=False)
    return y.size, yspec, var1


def _xcorr_from(L_a: int, yspec: np.ndarray, var1: float, sig: _Signal, nfft: int) -> np.ndarray:
    # c(m) = sum_k x(k+m) conj(y1(k)); |c| equals the magnitude of the windowed sum
    c = kernels.ifft_rows((sig.spec * np.conj(yspec))[None, :])[0][: sig.n_lags]
    denom = L_a * np.sqrt(var1 * sig.var)
    gamma = np.zeros(sig.n_lags)
    ok = (sig.var > sig.floor) & (var1 > 0)
    gamma[ok] = np.abs(c[ok]) / denom[ok]
    return np.clip(gamma, 0.0, 1.0)


def xcorr_norm(y: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Normalized cross-correlation magnitude for lags ``m = 0 .. L-L_a-1``.

    Both the reference window ``y`` and each length-``L_a`` window of ``x`` are
    made zero-mean and scaled by their sample standard deviations, so the
    result is a correlation-coefficient magnitude in ``[0, 1]``.  Windows of
    ``x`` with zero variance yield 0.
    """
    y = np.asarray(y, dtype=np.complex128)
    x = np.asarray(x, dtype=np.complex128)
    if y.ndim != 1 or x.ndim != 1 or x.size <= y.size or y.size == 0:
        raise ParameterError(f"xcorr_norm needs len(x) > len(y) > 0, got {x.size} and {y.size}")
    nfft = _next_pow2(x.size + y.size)
    yspec, var1 = _reference(y, nfft)
    return _xcorr_from(y.size, yspec, var1, _Signal(x, y.size, nfft), nfft)


def pool_row(gamma: np.ndarray, U: int, V: int) -> np.ndarray:
    """Block maxima of the first ``U*V`` lags; the tail is discarded."""
    gamma = np.asarray(gamma)
    if U < 1 or V < 1 or gamma.size < U * V:
        raise ParameterError(f"pool_row needs at least U*V={U * V} lags, got {gamma.size}")
    return gamma[: U * V].reshape(V, U).max(axis=1)


@dataclass(frozen=True)
class ZcConfig:
    candidates: tuple = ()  # (r, V, factor) triples
    pool_u: int = 100
    pool_v: int = 64
    n_seg: int = 2
    seg_len: int = 4096


@dataclass
class ZcFeature:
    values: np.ndarray  # rows x pool_v
    roots: list = field(default_factory=list)
    pool: tuple = (100, 64)


def zc_feature(rec: IqRecord, cfg: ZcConfig, rng: np.random.Generator) -> ZcFeature:
    """One pooled correlation row per candidate, in candidate order.

    All candidates are correlated against the same segment-sampled sequence.
    """
    if not cfg.candidates:
        raise ParameterError("zc_feature needs at least one candidate root")
    x = segment_sample(rec.samples, cfg.n_seg, cfg.seg_len, rng)
    L_max = max(V * (f or DEFAULT_UPSAMPLE) for _, V, f in cfg.candidates)
    if x.size <= L_max:
        raise ParameterError(f"sampled sequence ({x.size}) shorter than preamble ({L_max})")
    nfft = _next_pow2(x.size + L_max)
    sigs = {}
    rows = []
    for r, V, f in cfg.candidates:
        L_a, yspec, var1 = _candidate_reference(int(r), int(V), int(f or DEFAULT_UPSAMPLE), nfft)
        if L_a not in sigs:
            sigs[L_a] = _Signal(x, L_a, nfft)
        rows.append(pool_row(_xcorr_from(L_a, yspec, var1, sigs[L_a], nfft), cfg.pool_u, cfg.pool_v))
    return ZcFeature(values=np.stack(rows), roots=[(r, V) for r, V, _ in cfg.candidates],
                     pool=(cfg.pool_u, cfg.pool_v))
