"""Two-branch TFI/ZC network with cross-modal interaction, fusion and AFW.

Data flow for the full model (desk widths C=32, H=W=4, D=C/4=8)::

    TFI 32x32x1 --TfiBranch--> F_TFI 4x4xC --+
                                             +--Mmfi--> (FC, FS) per modality
    ZC  R x 64  --ZcBranch---> F_ZC  4x4xC --+           |
                                                  Smff per modality -> FF_TFI, FF_ZC
                                                         |
                                         Mmff cross attention -> F_Fusion 4x4xD
                                                         |
                                        Afw (class-statistics weighting) -> head

"Conv2" below means conv -> ReLU -> conv.  Gates on channel descriptors use
1x1 kernels; gates on spatial maps use 3x3 kernels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DiagnosticError, InvariantError, ParameterError
from .nn import Conv2d, ConvBNAct, InvertedBottleneck, Linear, Module
from .tensor import Tensor

log = logging.getLogger(__name__)

ABLATIONS = ("iq_cnn", "zc_cnn", "tfi_only", "concat", "fusion_channel", "fusion_spatial",
             "fusion_proposed")
OOD_LABEL = -1


@dataclass(frozen=True)
class NetConfig:
    channels: int = 32
    spatial: int = 4
    depth: int = 4
    class_count: int = 6
    tfi_hw: int = 32
    tfi_channels: int = 1
    zc_rows: int = 6
    zc_cols: int = 64
    iq_channels: int = 2
    alpha: float = 0.5
    afw_momentum: float = 0.9
    variant: str = "fusion_proposed"

    def __post_init__(self):
        if self.variant not in ABLATIONS:
            raise ParameterError(f"unknown ablation id {self.variant!r}; expected one of {ABLATIONS}")
        if self.channels % 4:
            raise ConfigurationError(f"channels must be divisible by 4, got {self.channels}")
        if self.depth < 2:
            raise ConfigurationError(f"bottleneck depth must be >= 2, got {self.depth}")
        if self.tfi_hw != 8 * self.spatial:
            raise ConfigurationError(
                f"TFI branch maps {self.tfi_hw}x{self.tfi_hw} to {self.tfi_hw // 8}x{self.tfi_hw // 8}, "
                f"but spatial={self.spatial}")
        if self.class_count < 2:
            raise ConfigurationError("class_count must be >= 2")

    @property
    def fused_channels(self) -> int:
        return self.channels // 4

    @property
    def zc_padded_rows(self) -> int:
        return -(-self.zc_rows // 9) * 9


# ---------------------------------------------------------------------------
# feature-extraction branches
# ---------------------------------------------------------------------------

class TfiBranch(Module):
    """Conv-BN-HSwish stem, inverted bottlenecks, Conv-BN-HSwish head.

    The stem and the first two bottlenecks halve the resolution, so a
    ``8S x 8S`` input becomes ``S x S x C``.
    """

    def __init__(self, in_channels: int, cfg: NetConfig, rng):
        super().__init__()
        C = cfg.channels
        w1, w2 = max(4, C // 4), max(4, C // 2)
        w3 = max(4, 3 * C // 4)
        self.stem = ConvBNAct(in_channels, w1, 3, 2, "hswish", rng=rng)
        plan = [(w1, 2 * w1, w2, 2), (w2, 2 * w2, w3, 2)]
        for i in range(cfg.depth - 2):
            cout = C if i == cfg.depth - 3 else w3
            plan.append((w3, 2 * w3, cout, 1))
            w3 = cout
        self.blocks = [InvertedBottleneck(ci, e, co, s, rng=rng) for ci, e, co, s in plan]
        self.head = ConvBNAct(plan[-1][2], C, 1, 1, "hswish", rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        y = self.stem(x)
        for blk in self.blocks:
            y = blk(y)
        return self.head(y)


def zc_grid(values: np.ndarray, padded_rows: int) -> np.ndarray:
    """N x R x M correlation rows -> N x 3 x 3 x (M * padded_rows / 9).

    Rows are zero-padded to ``padded_rows`` (a multiple of 9); row ``i`` lands
    in grid cell ``(i // k) // 3, (i // k) % 3`` with ``k = padded_rows / 9``
    consecutive rows per cell, concatenated along channels.
    """
    values = np.asarray(values)
    if values.ndim != 3 or values.shape[1] > padded_rows or padded_rows % 9:
        raise ConfigurationError(f"cannot place ZC feature {values.shape} on a 3x3 grid of {padded_rows} rows")
    n, r, m = values.shape
    if r < padded_rows:
        values = np.concatenate([values, np.zeros((n, padded_rows - r, m), dtype=values.dtype)], axis=1)
    return values.reshape(n, 3, 3, (padded_rows // 9) * m)


class ZcBranch(Module):
    """3x3 grid -> two Conv-BN-ReLU -> nearest upsample -> three Conv-BN-ReLU."""

    def __init__(self, cfg: NetConfig, rng):
        super().__init__()
        C = cfg.channels
        cin = (cfg.zc_padded_rows // 9) * cfg.zc_cols
        self.spatial = cfg.spatial
        self.pre = [ConvBNAct(cin, C, 3, 1, "relu", rng=rng), ConvBNAct(C, C, 3, 1, "relu", rng=rng)]
        self.post = [ConvBNAct(C, C, 3, 1, "relu", rng=rng) for _ in range(3)]

    def forward(self, grid: Tensor) -> Tensor:
        y = grid
        for layer in self.pre:
            y = layer(y)
        y = T.upsample_nn(y, self.spatial, self.spatial)
        for layer in self.post:
            y = layer(y)
        return y


# ---------------------------------------------------------------------------
# interaction and fusion
# ---------------------------------------------------------------------------

class Conv2(Module):
    def __init__(self, cin, hidden, cout, k, rng):
        super().__init__()
        self.c1 = Conv2d(cin, hidden, k, rng=rng)
        self.c2 = Conv2d(hidden, cout, k, rng=rng)

    def forward(self, x):
        return self.c2(T.relu(self.c1(x)))


class Mmfi(Module):
    """Gated cross-modal exchange along channels and along space.

    Channel path: GAP/GMP descriptors of each modality give a self gate per
    modality and one shared cross gate (from the shuffled concatenation of
    all four descriptors).  Each output is ``F_self + self_gate * F_self +
    cross_gate * F_other``.  The spatial path does the same with per-position
    channel-mean/max maps.
    """

    def __init__(self, C: int, rng):
        super().__init__()
        self.C = C
        self.ch_tfi = Conv2d(2 * C, C, 1, rng=rng)
        self.ch_zc = Conv2d(2 * C, C, 1, rng=rng)
        self.ch_cross = Conv2(4 * C, C, C, 1, rng)
        self.sp_tfi = Conv2d(2, 1, 3, rng=rng)
        self.sp_zc = Conv2d(2, 1, 3, rng=rng)
        self.sp_cross = Conv2(4, 4, 1, 3, rng)

    def forward(self, f_tfi: Tensor, f_zc: Tensor):
        if f_tfi.shape != f_zc.shape:
            raise ParameterError(f"modalities must align: {f_tfi.shape} vs {f_zc.shape}")
        d1, d2, d3, d4 = T.gap(f_tfi), T.gmp(f_tfi), T.gap(f_zc), T.gmp(f_zc)
        g_tfi = T.sigmoid(self.ch_tfi(T.concat([d1, d2])))
        g_zc = T.sigmoid(self.ch_zc(T.concat([d3, d4])))
        g_x = T.sigmoid(self.ch_cross(T.channel_shuffle(T.concat([d1, d2, d3, d4]), self.C)))
        fc_tfi = f_tfi + g_tfi * f_tfi + g_x * f_zc
        fc_zc = f_zc + g_zc * f_zc + g_x * f_tfi

        s1, s2 = T.gap_spatial(f_tfi), T.gmp_spatial(f_tfi)
        s3, s4 = T.gap_spatial(f_zc), T.gmp_spatial(f_zc)
        m_tfi = T.sigmoid(self.sp_tfi(T.concat([s1, s2])))
        m_zc = T.sigmoid(self.sp_zc(T.concat([s3, s4])))
        m_x = T.sigmoid(self.sp_cross(T.channel_shuffle(T.concat([s1, s2, s3, s4]), 1)))
        fs_tfi = f_tfi + m_tfi * f_tfi + m_x * f_zc
        fs_zc = f_zc + m_zc * f_zc + m_x * f_tfi
        return fc_tfi, fc_zc, fs_tfi, fs_zc


class Smff(Module):
    """Merge one modality's channel-path and spatial-path outputs."""

    def __init__(self, C: int, rng):
        super().__init__()
        self.C = C
        self.ch_gate = Conv2(2 * C, C, C, 1, rng)
        self.sp_gate = Conv2(2 * C, C, C, 3, rng)
        self.merge = Conv2d(2 * C, C, 1, rng=rng)

    def gate(self, fc: Tensor, fs: Tensor) -> Tensor:
        mix = T.channel_shuffle(T.concat([fc, fs]), self.C)
        return T.sigmoid(self.ch_gate(T.gap(mix))) * T.sigmoid(self.sp_gate(mix))

    def forward(self, fc: Tensor, fs: Tensor) -> Tensor:
        if fc.shape != fs.shape:
            raise ParameterError(f"smff inputs must align: {fc.shape} vs {fs.shape}")
        g = self.gate(fc, fs)
        return self.merge(T.concat([g * fc, g * fs]))


ATTENTION_TOL = 1e-6


class Mmff(Module):
    """Cross attention between modalities producing the fused H x W x D map.

    Keys, queries and values of both modalities are interleaved channel-wise
    and split again, so each attention head sees half of each modality.
    Scores are scaled by ``1/D``.
    """

    def __init__(self, C: int, rng):
        super().__init__()
        D = C // 4
        self.D = D
        self.k_tfi, self.q_tfi, self.v_tfi = (Conv2d(C, D, 1, rng=rng) for _ in range(3))
        self.k_zc, self.q_zc, self.v_zc = (Conv2d(C, D, 1, rng=rng) for _ in range(3))
        self.out = Conv2(2 * D, D, D, 1, rng)

    def _mix(self, a: Tensor, b: Tensor):
        n, h, w, _ = a.shape
        both = T.channel_shuffle(T.concat([a, b]), self.D)
        return [T.reshape(p, (n, h * w, self.D)) for p in T.split(both, [self.D, self.D])]

    def forward(self, ff_tfi: Tensor, ff_zc: Tensor, capture: dict | None = None) -> Tensor:
        if ff_tfi.shape != ff_zc.shape:
            raise ParameterError(f"mmff inputs must align: {ff_tfi.shape} vs {ff_zc.shape}")
        n, h, w, _ = ff_tfi.shape
        k1, k2 = self._mix(self.k_tfi(ff_tfi), self.k_zc(ff_zc))
        q1, q2 = self._mix(self.q_tfi(ff_tfi), self.q_zc(ff_zc))
        v1, v2 = self._mix(self.v_tfi(ff_tfi), self.v_zc(ff_zc))
        aw1 = T.softmax(T.matmul(q1, T.transpose(k1, (0, 2, 1))) * (1.0 / self.D), axis=-1)
        aw2 = T.softmax(T.matmul(q2, T.transpose(k2, (0, 2, 1))) * (1.0 / self.D), axis=-1)
        for aw in (aw1, aw2):
            dev = float(np.abs(aw.data.sum(axis=-1) - 1.0).max())
            if dev > ATTENTION_TOL or aw.data.min() < 0:
                raise InvariantError(f"attention rows not normalized (deviation {dev:.3g})")
        if capture is not None:
            capture["aw_tfi"], capture["aw_zc"] = aw1.data, aw2.data
        f15, f16 = T.matmul(aw1, v1), T.matmul(aw2, v2)
        mixed = T.channel_shuffle(T.reshape(T.concat([f15, f16]), (n, h, w, 2 * self.D)), self.D)
        return self.out(mixed)


# ---------------------------------------------------------------------------
# adaptive feature weighting
# ---------------------------------------------------------------------------

def _neighborhood(m: np.ndarray) -> np.ndarray:
    """P x H x W -> P x H x W x 9 edge-replicated 3x3 neighbourhoods."""
    p = np.pad(m, ((0, 0), (1, 1), (1, 1)), mode="edge")
    H, W = m.shape[1:]
    return np.stack([p[:, i:i + H, j:j + W] for i in range(3) for j in range(3)], axis=-1)


def _cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    num = (a * b).sum(axis=-1)
    den = np.sqrt((a * a).sum(axis=-1) * (b * b).sum(axis=-1))
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


@dataclass
class ClassStats:
    """Inter-class discrimination statistics of fused features."""

    class_means: np.ndarray   # P x H x W x D
    m_s: np.ndarray           # P x H x W
    m_c: np.ndarray           # P x D
    s_s: np.ndarray           # H x W
    v_s: np.ndarray           # H x W
    s_c: np.ndarray           # D
    v_c: np.ndarray           # D
    alpha: float = 0.5
    mapping: tuple = (1.0, 0.0, 1.0, 0.0)  # a_s, b_s, a_c, b_c

    @property
    def class_count(self) -> int:
        return self.class_means.shape[0]

    @property
    def w_s(self) -> np.ndarray:
        return self.alpha * self.s_s - (1.0 - self.alpha) * self.v_s

    @property
    def w_c(self) -> np.ndarray:
        return self.alpha * self.s_c - (1.0 - self.alpha) * self.v_c


def stats_from_means(class_means: np.ndarray, alpha: float = 0.5,
                     mapping=(1.0, 0.0, 1.0, 0.0)) -> ClassStats:
    """Similarity/variance scores from per-class mean feature maps.

    Spatial similarity at (h, w) is the mean pairwise cosine between classes'
    channel-averaged maps over the edge-replicated 3x3 neighbourhood of
    (h, w).  Channel similarity for channel d is the mean pairwise cosine of
    the classes' H*W mean maps of that channel.  Variances are population
    variances across classes of the spatial and channel means.
    """
    M = np.asarray(class_means, dtype=np.float64)
    if M.ndim != 4:
        raise ParameterError(f"class means must be P x H x W x D, got {M.shape}")
    P = M.shape[0]
    if P < 2:
        raise DiagnosticError("inter-class similarity needs at least two classes")
    m_s = M.mean(axis=3)
    m_c = M.mean(axis=(1, 2))
    nb = _neighborhood(m_s)
    chan = M.reshape(P, -1, M.shape[3]).transpose(0, 2, 1)  # P x D x HW
    pairs = list(combinations(range(P), 2))
    s_s = np.mean([_cosine(nb[p], nb[q]) for p, q in pairs], axis=0)
    s_c = np.mean([_cosine(chan[p], chan[q]) for p, q in pairs], axis=0)
    return ClassStats(class_means=M, m_s=m_s, m_c=m_c, s_s=s_s, v_s=m_s.var(axis=0), s_c=s_c,
                      v_c=m_c.var(axis=0), alpha=float(alpha), mapping=tuple(map(float, mapping)))


def afw_stats(features_by_class, alpha: float = 0.5, mapping=(1.0, 0.0, 1.0, 0.0)) -> ClassStats:
    """Statistics from per-class collections of fused maps (each n_p x H x W x D)."""
    feats = [np.asarray(f, dtype=np.float64) for f in features_by_class]
    if len(feats) < 2:
        raise DiagnosticError("inter-class similarity needs at least two classes")
    if any(f.ndim != 4 or f.shape[0] == 0 for f in feats):
        raise DiagnosticError("every class needs at least one H x W x D sample")
    return stats_from_means(np.stack([f.mean(axis=0) for f in feats]), alpha, mapping)


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def afw_weights(stats: ClassStats):
    """(omega_s H x W, omega_c D) from the stats' own alpha and mapping."""
    a_s, b_s, a_c, b_c = stats.mapping
    return _sig(a_s * -stats.w_s + b_s), _sig(a_c * -stats.w_c + b_c)


def afw_apply(f_fusion, stats: ClassStats | None) -> np.ndarray:
    """``F * omega_s`` (broadcast over channels) ``* omega_c`` (broadcast over space)."""
    if stats is None:
        raise DiagnosticError("AFW weighting needs class statistics")
    f = np.asarray(f_fusion)
    w_s, w_c = afw_weights(stats)
    return f * w_s[..., None] * w_c


class Afw(Module):
    """Trainable AFW head: alpha plus affine maps on the negated scores.

    Class means live in buffers and are refreshed by the trainer once per
    epoch; before the first refresh every score is zero.
    """

    def __init__(self, cfg: NetConfig, use_spatial: bool, use_channel: bool):
        super().__init__()
        P, S, D = cfg.class_count, cfg.spatial, cfg.fused_channels
        self.use_spatial, self.use_channel = use_spatial, use_channel
        self.alpha = T.tensor(cfg.alpha, requires_grad=True)
        self.a_s, self.b_s = T.tensor(1.0, requires_grad=True), T.tensor(0.0, requires_grad=True)
        self.a_c, self.b_c = T.tensor(1.0, requires_grad=True), T.tensor(0.0, requires_grad=True)
        self._buffers = {
            "class_means": np.zeros((P, S, S, D)),
            "ready": np.zeros(1),
            "s_s": np.zeros((S, S)), "v_s": np.zeros((S, S)),
            "s_c": np.zeros(D), "v_c": np.zeros(D),
        }

    @property
    def ready(self) -> bool:
        return bool(self._buffers["ready"][0])

    def set_means(self, class_means: np.ndarray) -> None:
        st = stats_from_means(class_means)
        b = self._buffers
        b["class_means"][...] = st.class_means
        b["s_s"][...], b["v_s"][...] = st.s_s, st.v_s
        b["s_c"][...], b["v_c"][...] = st.s_c, st.v_c
        b["ready"][0] = 1.0

    def update_means(self, epoch_means: np.ndarray, momentum: float) -> None:
        if self.ready:
            epoch_means = momentum * self._buffers["class_means"] + (1.0 - momentum) * epoch_means
        self.set_means(epoch_means)

    def stats(self) -> ClassStats | None:
        if not self.ready:
            return None
        st = stats_from_means(self._buffers["class_means"], float(self.alpha.data),
                              tuple(float(t.data) for t in (self.a_s, self.b_s, self.a_c, self.b_c)))
        return st

    def weights(self):
        """omega_s as 1 x H x W x 1 and omega_c as 1 x 1 x 1 x D tensors."""
        b = self._buffers
        S, D = b["s_s"].shape[0], b["s_c"].size
        keep = 1.0 - self.alpha
        w_s = self.alpha * b["s_s"].reshape(1, S, S, 1) - keep * b["v_s"].reshape(1, S, S, 1)
        w_c = self.alpha * b["s_c"].reshape(1, 1, 1, D) - keep * b["v_c"].reshape(1, 1, 1, D)
        om_s = T.sigmoid(self.a_s * (-1.0 * w_s) + self.b_s)
        om_c = T.sigmoid(self.a_c * (-1.0 * w_c) + self.b_c)
        return om_s, om_c

    def forward(self, f: Tensor, force_unit: bool = False, capture: dict | None = None) -> Tensor:
        om_s, om_c = self.weights()
        if force_unit:
            om_s = T.tensor(np.ones(om_s.shape))
            om_c = T.tensor(np.ones(om_c.shape))
        if capture is not None:
            capture["omega_s"], capture["omega_c"] = om_s.data[0, :, :, 0], om_c.data.reshape(-1)
        out = f
        if self.use_spatial:
            out = out * om_s
        if self.use_channel:
            out = out * om_c
        return out


# ---------------------------------------------------------------------------
# complete model
# ---------------------------------------------------------------------------

class FusionNet(Module):
    """Any rung of the ablation ladder, selected by ``cfg.variant``."""

    def __init__(self, cfg: NetConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        v = cfg.variant
        self.tfi = TfiBranch(cfg.tfi_channels, cfg, rng) if v in ("tfi_only", "concat") or v.startswith("fusion") else None
        self.iq = TfiBranch(cfg.iq_channels, cfg, rng) if v == "iq_cnn" else None
        self.zc = ZcBranch(cfg, rng) if v in ("zc_cnn", "concat") or v.startswith("fusion") else None
        if cfg.zc_padded_rows != cfg.zc_rows and self.zc is not None:
            log.info("padding %d ZC rows to %d for the 3x3 grid", cfg.zc_rows, cfg.zc_padded_rows)
        self.fused = v.startswith("fusion")
        if self.fused:
            self.mmfi = Mmfi(cfg.channels, rng)
            self.smff_tfi = Smff(cfg.channels, rng)
            self.smff_zc = Smff(cfg.channels, rng)
            self.mmff = Mmff(cfg.channels, rng)
            self.afw = Afw(cfg, use_spatial=v in ("fusion_spatial", "fusion_proposed"),
                           use_channel=v in ("fusion_channel", "fusion_proposed"))
            head_in = cfg.fused_channels
        else:
            head_in = 2 * cfg.channels if v == "concat" else cfg.channels
        self.head = Linear(head_in, cfg.class_count, rng=rng)

    def fused_map(self, tfi: Tensor, grid: Tensor, capture: dict | None = None) -> Tensor:
        f_tfi = self.tfi(tfi)
        f_zc = self.zc(grid)
        fc_tfi, fc_zc, fs_tfi, fs_zc = self.mmfi(f_tfi, f_zc)
        ff_tfi = self.smff_tfi(fc_tfi, fs_tfi)
        ff_zc = self.smff_zc(fc_zc, fs_zc)
        f = self.mmff(ff_tfi, ff_zc, capture)
        if capture is not None:
            capture.update(f_tfi=f_tfi.data, f_zc=f_zc.data, fusion=f.data)
        return f

    def forward(self, tfi=None, zc=None, iq=None, afw: str = "on", capture: dict | None = None) -> Tensor:
        """Logits ``N x P``.  ``afw`` is 'on', 'unit' (omega forced to 1) or 'off'."""
        v = self.cfg.variant
        if v == "iq_cnn":
            feats = T.gap(self.iq(_input(iq, "iq")))
        elif v == "tfi_only":
            feats = T.gap(self.tfi(_input(tfi, "tfi")))
        elif v == "zc_cnn":
            feats = T.gap(self.zc(self._grid(zc)))
        elif v == "concat":
            feats = T.gap(T.concat([self.tfi(_input(tfi, "tfi")), self.zc(self._grid(zc))]))
        else:
            f = self.fused_map(_input(tfi, "tfi"), self._grid(zc), capture)
            if afw != "off":
                f = self.afw(f, force_unit=afw == "unit", capture=capture)
            feats = T.gap(f)
        n = feats.shape[0]
        return self.head(T.reshape(feats, (n, -1)))

    def _grid(self, zc) -> Tensor:
        if isinstance(zc, Tensor):
            return zc
        if zc is None:
            raise ConfigurationError(f"variant {self.cfg.variant} needs ZC features")
        zc = np.asarray(zc)
        if zc.ndim != 3 or zc.shape[1:] != (self.cfg.zc_rows, self.cfg.zc_cols):
            raise ConfigurationError(f"ZC feature shape {zc.shape[1:]} does not match model "
                                     f"({self.cfg.zc_rows}, {self.cfg.zc_cols})")
        return T.tensor(zc_grid(zc, self.cfg.zc_padded_rows))

    def predict_proba(self, tfi=None, zc=None, iq=None, batch: int = 256) -> np.ndarray:
        was = self.training
        self.eval()
        n = len(next(a for a in (tfi, zc, iq) if a is not None))
        out = []
        with T.no_grad():
            for s in range(0, n, batch):
                sl = slice(s, s + batch)
                logits = self.forward(None if tfi is None else tfi[sl], None if zc is None else zc[sl],
                                      None if iq is None else iq[sl])
                out.append(T.softmax(logits, axis=-1).data)
        self.train(was)
        return np.concatenate(out).astype(np.float64)


def _input(x, kind: str) -> Tensor:
    if x is None:
        raise ConfigurationError(f"this variant needs {kind} input")
    return x if isinstance(x, Tensor) else T.tensor(x)


# ---------------------------------------------------------------------------
# classification and OOD decision
# ---------------------------------------------------------------------------

def classify(f, head: Linear) -> np.ndarray:
    """GAP -> affine -> softmax over classes, for N x H x W x D maps."""
    f = f if isinstance(f, Tensor) else T.tensor(f)
    with T.no_grad():
        pooled = T.reshape(T.gap(f), (f.shape[0], -1))
        return T.softmax(head(pooled), axis=-1).data


@dataclass(frozen=True)
class OodPolicy:
    tau: float
    quantile: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ParameterError(f"tau must lie in [0, 1], got {self.tau}")


def calibrate_policy(val_msp, quantile: float = 0.05) -> OodPolicy:
    """Threshold at the ``quantile`` of in-distribution max-softmax scores."""
    val_msp = np.asarray(val_msp, dtype=np.float64)
    if val_msp.size == 0:
        raise ParameterError("calibration needs at least one validation score")
    if not 0.0 < quantile < 1.0:
        raise ParameterError(f"quantile must be in (0, 1), got {quantile}")
    tau = float(np.quantile(val_msp, quantile, method="lower"))
    return OodPolicy(tau=min(max(tau, 1e-12), 1.0 - 1e-12), quantile=quantile)


def ood_decide(probs, policy: OodPolicy) -> np.ndarray:
    """Predicted class per row, or ``OOD_LABEL`` where max probability < tau."""
    probs = np.atleast_2d(np.asarray(probs))
    pred = probs.argmax(axis=1)
    return np.where(probs.max(axis=1) < policy.tau, OOD_LABEL, pred)
