"""Synthetic drone-like IQ records.

A :class:`ProtocolProfile` describes one emitter class: OFDM burst geometry,
optional Zadoff-Chu preambles, optional frequency hopping.  Records are a
train of such bursts separated by exponential gaps, passed through a simple
AWGN channel with attenuation (distance proxy) and an optional spectral tilt
(NLoS proxy).  Everything is a pure function of its inputs plus the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError

DEFAULT_SAMPLE_RATE = 1_000_000
DEFAULT_RECORD_LEN = 1 << 16
DEFAULT_UPSAMPLE = 8

DISTANCE_ATTENUATION_DB = {"D00": 0.0, "D01": 6.0, "D10": 12.0}
NLOS_PENALTY_DB = 20.0
NLOS_TILT = 0.5


# ---------------------------------------------------------------------------
# Zadoff-Chu
# ---------------------------------------------------------------------------

def _check_root(r: int, V: int) -> None:
    if int(r) != r or int(V) != V:
        raise ParameterError(f"ZC root and length must be integers, got r={r!r}, V={V!r}")
    if not 0 < r < V:
        raise ParameterError(f"ZC root must satisfy 0 < r < V, got r={r}, V={V}")
    if math.gcd(int(r), int(V)) != 1:
        raise ParameterError(f"ZC root {r} is not coprime with length {V}")


def gen_zc(r: int, V: int) -> np.ndarray:
    """Zadoff-Chu sequence ``exp(-j*pi*r*v*(v+1)/V)`` for ``v = 0..V-1``.

    The phase numerator is reduced modulo ``2V`` in integer arithmetic so the
    result stays unit-modulus to machine precision for long sequences.
    """
    _check_root(r, V)
    v = np.arange(V, dtype=np.int64)
    k = (int(r) * v * (v + 1)) % (2 * int(V))
    return np.exp(-1j * np.pi * k / V)


def upsample_zc(seq: np.ndarray, factor: int) -> np.ndarray:
    """Zero-order hold: every sample is repeated ``factor`` times."""
    if int(factor) != factor or factor < 1:
        raise ParameterError(f"upsample factor must be a positive integer, got {factor!r}")
    return np.repeat(np.asarray(seq), int(factor))


def chirp_preamble(length: int) -> np.ndarray:
    """Constant-envelope linear chirp sweeping the band once (third preamble type)."""
    n = np.arange(length)
    return np.exp(1j * np.pi * 0.25 * n * n / length - 1j * np.pi * 0.25 * n)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProtocolProfile:
    """Generative description of one signal class.

    ``zc_roots[0]`` is the designated most-frequent root; it is picked with
    probability ``primary_weight`` for each preamble-bearing frame, otherwise
    one of the remaining roots is drawn uniformly.
    """

    class_id: int
    name: str = ""
    active: bool = True
    uses_zc: bool = False
    zc_roots: tuple = ()
    primary_weight: float = 0.85
    bandwidth_frac: float = 0.5
    n_subcarriers: int = 32
    frame_len: int = 4096
    frame_gap_mean: float = 1024.0
    hop_period: int = 0
    hop_channels: int = 1
    preamble_prob: float = 1.0
    preamble_boost_db: float = 0.0
    chirp_len: int = 0
    upsample: int = DEFAULT_UPSAMPLE

    def __post_init__(self):
        object.__setattr__(self, "zc_roots", tuple((int(r), int(V)) for r, V in self.zc_roots))
        validate_profile(self)

    @property
    def primary_root(self):
        return self.zc_roots[0] if self.zc_roots else None

    @property
    def preamble_len(self) -> int:
        if not self.uses_zc:
            return 0
        return max(V for _, V in self.zc_roots) * self.upsample


def validate_profile(p: ProtocolProfile) -> None:
    if p.uses_zc:
        if not p.zc_roots:
            raise ParameterError(f"profile {p.class_id}: uses_zc requires at least one root")
        for r, V in p.zc_roots:
            _check_root(r, V)
        if len(set(p.zc_roots)) != len(p.zc_roots):
            raise ParameterError(f"profile {p.class_id}: duplicate ZC roots")
    if not 0.0 < p.bandwidth_frac <= 1.0:
        raise ParameterError(f"profile {p.class_id}: bandwidth_frac must be in (0, 1]")
    if p.frame_len <= 0:
        raise ParameterError(f"profile {p.class_id}: frame_len must be positive")
    if not 0.0 <= p.preamble_prob <= 1.0:
        raise ParameterError(f"profile {p.class_id}: preamble_prob must be in [0, 1]")
    if not 0.0 <= p.primary_weight <= 1.0:
        raise ParameterError(f"profile {p.class_id}: primary_weight must be in [0, 1]")
    if p.n_subcarriers < 1 or p.hop_channels < 1 or p.hop_period < 0:
        raise ParameterError(f"profile {p.class_id}: bad OFDM/FHSS geometry")
    if p.frame_gap_mean < 0:
        raise ParameterError(f"profile {p.class_id}: frame_gap_mean must be non-negative")
    if (p.preamble_len if p.uses_zc else 0) + p.chirp_len > p.frame_len:
        raise ParameterError(f"profile {p.class_id}: preambles do not fit in frame_len")


def validate_profile_set(profiles) -> None:
    """Class ids and designated most-frequent roots must be unique across profiles."""
    ids = [p.class_id for p in profiles]
    if len(set(ids)) != len(ids):
        raise ParameterError("duplicate class ids in profile set")
    primaries = [p.primary_root for p in profiles if p.uses_zc]
    if len(set(primaries)) != len(primaries):
        raise ParameterError("most-frequent ZC root must differ across profiles")


@dataclass(frozen=True)
class ChannelConfig:
    snr_db: float = 10.0
    attenuation_db: float = 0.0
    seed: int = 0
    tilt: float = 0.0
    distance_tag: str = "D00"
    los_tag: str = "S00"

    def __post_init__(self):
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ParameterError(f"snr_db must be finite or +inf, got {self.snr_db}")


def channel_for_tags(snr_db: float, distance_tag: str = "D00", los_tag: str = "S00",
                     seed: int = 0) -> ChannelConfig:
    """Channel emulating a Table-I style distance/LoS label."""
    if distance_tag not in DISTANCE_ATTENUATION_DB:
        raise ParameterError(f"unknown distance tag {distance_tag!r}")
    if los_tag not in ("S00", "S01"):
        raise ParameterError(f"unknown LoS tag {los_tag!r}")
    att = DISTANCE_ATTENUATION_DB[distance_tag]
    tilt = 0.0
    if los_tag == "S01":
        att += NLOS_PENALTY_DB
        tilt = NLOS_TILT
    return ChannelConfig(snr_db=snr_db, attenuation_db=att, seed=seed, tilt=tilt,
                         distance_tag=distance_tag, los_tag=los_tag)


@dataclass
class IqRecord:
    samples: np.ndarray
    sample_rate: int
    class_id: int
    snr_db: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.samples.size == 0:
            raise ParameterError("IqRecord needs at least one sample")
        if not np.all(np.isfinite(self.samples)):
            raise ParameterError("IqRecord samples must be finite")

    def __len__(self):
        return self.samples.size


# ---------------------------------------------------------------------------
# Frame synthesis
# ---------------------------------------------------------------------------

def _ofdm_geometry(profile: ProtocolProfile):
    nfft = 1 << max(1, math.ceil(math.log2(profile.n_subcarriers / profile.bandwidth_frac)))
    half = profile.n_subcarriers // 2
    bins = np.concatenate([np.arange(-half, 0), np.arange(1, profile.n_subcarriers - half + 1)])
    return nfft, bins % nfft, nfft // 4


def ofdm_body(profile: ProtocolProfile, length: int, rng: np.random.Generator) -> np.ndarray:
    """Random-QPSK OFDM samples occupying ``bandwidth_frac`` of the band, unit power."""
    if length <= 0:
        return np.zeros(0, dtype=np.complex128)
    nfft, bins, cp = _ofdm_geometry(profile)
    sym_len = nfft + cp
    n_sym = -(-length // sym_len)
    qpsk = (rng.choice([-1.0, 1.0], size=(n_sym, bins.size, 2)) @ np.array([1.0, 1j])) / np.sqrt(2)
    grid = np.zeros((n_sym, nfft), dtype=np.complex128)
    grid[:, bins] = qpsk
    td = np.fft.ifft(grid, axis=1) * (nfft / np.sqrt(bins.size))
    td = np.concatenate([td[:, -cp:], td], axis=1).reshape(-1)
    return td[:length]


def _hop_carrier(profile: ProtocolProfile, length: int, rng: np.random.Generator) -> np.ndarray:
    span = max(0.0, 0.9 - profile.bandwidth_frac)
    if profile.hop_channels > 1:
        centers = np.linspace(-span / 2, span / 2, profile.hop_channels)
    else:
        centers = np.zeros(1)
    n_hops = -(-length // profile.hop_period)
    chans = rng.integers(0, centers.size, size=n_hops)
    freq = np.repeat(centers[chans], profile.hop_period)[:length]
    phase = 2 * np.pi * np.cumsum(freq)
    return np.exp(1j * phase)


def synth_frame(profile: ProtocolProfile, rng: np.random.Generator) -> np.ndarray:
    """One burst of exactly ``profile.frame_len`` samples.

    Layout: ``[ZC preamble][chirp preamble][OFDM body]`` where the preambles
    appear only when the per-frame draw against ``preamble_prob`` succeeds;
    each is present only if the profile configures it.  The ZC preamble is amplitude-boosted by
    ``preamble_boost_db`` relative to the unit-power body.
    """
    parts = []
    has_preamble = profile.uses_zc or profile.chirp_len > 0
    if has_preamble and rng.random() < profile.preamble_prob:
        if profile.uses_zc:
            roots = profile.zc_roots
            if len(roots) == 1 or rng.random() < profile.primary_weight:
                r, V = roots[0]
            else:
                r, V = roots[1 + int(rng.integers(0, len(roots) - 1))]
            gain = 10.0 ** (profile.preamble_boost_db / 20.0)
            parts.append(gain * upsample_zc(gen_zc(r, V), profile.upsample))
        if profile.chirp_len:
            parts.append(chirp_preamble(profile.chirp_len))
    used = sum(p.size for p in parts)
    body = ofdm_body(profile, profile.frame_len - used, rng)
    if profile.hop_period > 0:
        body = body * _hop_carrier(profile, body.size, rng)
    parts.append(body)
    return np.concatenate(parts)


def render_clean(profile: ProtocolProfile, L: int, rng: np.random.Generator):
    """Noise-free burst train of length ``L`` and its signal-active mask."""
    sig = np.zeros(L, dtype=np.complex128)
    mask = np.zeros(L, dtype=bool)
    if not profile.active:
        return sig, mask
    # the first burst may be cut by the capture start
    t = -int(rng.integers(0, profile.frame_len))
    while t < L:
        frame = synth_frame(profile, rng)
        lo, hi = max(t, 0), min(t + frame.size, L)
        if hi > lo:
            sig[lo:hi] = frame[lo - t:hi - t]
            mask[lo:hi] = True
        gap = int(round(rng.exponential(profile.frame_gap_mean))) if profile.frame_gap_mean else 0
        t += frame.size + gap
    return sig, mask


def _tilt(x: np.ndarray, k: float) -> np.ndarray:
    if k == 0.0:
        return x
    y = x.copy()
    y[1:] -= k * x[:-1]
    return y / np.sqrt(1.0 + k * k)


def _complex_noise(n: int, var: float, rng: np.random.Generator) -> np.ndarray:
    s = np.sqrt(var / 2.0)
    return s * rng.standard_normal(n) + 1j * s * rng.standard_normal(n)


def add_awgn(x: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Add complex white Gaussian noise at ``snr_db`` relative to the power of ``x``."""
    x = np.asarray(x)
    if x.size == 0:
        raise ParameterError("add_awgn needs a nonempty input")
    if snr_db == math.inf:
        return x.copy()
    p = float(np.mean(np.abs(x) ** 2))
    var = p / 10.0 ** (snr_db / 10.0)
    return x + _complex_noise(x.size, var, rng)


def synth_record(profile: ProtocolProfile, channel: ChannelConfig, L: int = DEFAULT_RECORD_LEN,
                 rng: np.random.Generator | None = None,
                 sample_rate: int = DEFAULT_SAMPLE_RATE) -> IqRecord:
    """Labeled record: burst train, channel attenuation/tilt, then AWGN.

    Noise variance is set from the power of the unattenuated signal over its
    active samples, so ``snr_db`` is the SNR at the reference distance and the
    attenuation lowers the effective SNR.  Background-noise profiles use unit
    reference power.  With ``rng=None`` the generator is seeded from
    ``channel.seed``.
    """
    if L < profile.frame_len or L <= 0:
        raise ParameterError(f"record length {L} is shorter than frame_len {profile.frame_len}")
    if rng is None:
        rng = np.random.default_rng(channel.seed)
    sig, mask = render_clean(profile, L, rng)
    p_ref = float(np.mean(np.abs(sig[mask]) ** 2)) if mask.any() else 1.0
    sig = _tilt(sig, channel.tilt) * 10.0 ** (-channel.attenuation_db / 20.0)
    if channel.snr_db != math.inf:
        sig = sig + _complex_noise(L, p_ref / 10.0 ** (channel.snr_db / 10.0), rng)
    meta = {
        "distance_tag": channel.distance_tag,
        "los_tag": channel.los_tag,
        "attenuation_db": channel.attenuation_db,
        "active_fraction": float(mask.mean()),
        "seed": channel.seed,
    }
    return IqRecord(samples=sig, sample_rate=sample_rate, class_id=profile.class_id,
                    snr_db=float(channel.snr_db), meta=meta)
