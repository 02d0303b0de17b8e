"""Default protocol profiles and labeled corpus construction.

The profile set mirrors a field dataset's label scheme at desk scale: class 0
is background noise, classes 1-5 are in-distribution emitters, and classes
6-7 are held out as out-of-distribution types.

Classes 1/2 share one OFDM body geometry and 3/4 share another, so a
spectrogram alone cannot tell them apart.  What separates them is the
designated ZC root.  Secondary roots are shared across the groups:
(secondary root, body geometry) still pins the class.  OOD class 6 looks
like group 1/2 but carries an unseen V=63 root; class 7 looks like group
3/4 without any preamble.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .features import StftConfig, ZcConfig, stft, to_tfi, zc_feature
from .signal_synth import (DEFAULT_RECORD_LEN, IqRecord, ProtocolProfile, channel_for_tags,
                           synth_record, validate_profile_set)

# three conjugate pairs (r, 139 - r): a pair's short-time spectra are mirror
# images, which keeps paired classes alike in the spectrogram
CANDIDATE_ROOTS = ((49, 139), (90, 139), (57, 139), (82, 139), (32, 139), (107, 139))
# per-chip sweep rate 23/63 is close to 49/139
UNSEEN_ROOT = (23, 63)

# share of frames carrying a preamble; some bursts are caught without one,
# so a missing correlation peak alone does not identify a class
PREAMBLE_PROB = 0.9

_WIDE = dict(bandwidth_frac=0.6, n_subcarriers=40, frame_len=4500, frame_gap_mean=300.0,
             preamble_boost_db=10.0, preamble_prob=PREAMBLE_PROB)
_NARROW = dict(bandwidth_frac=0.3, n_subcarriers=20, frame_len=5200, frame_gap_mean=400.0,
               preamble_boost_db=10.0, preamble_prob=PREAMBLE_PROB)

ID_CLASSES = (0, 1, 2, 3, 4, 5)
OOD_CLASSES = (6, 7)


def default_profiles() -> dict:
    a, b, c, d, s1, s2 = CANDIDATE_ROOTS
    profiles = [
        ProtocolProfile(0, name="background_noise", active=False),
        ProtocolProfile(1, name="ofdm_wide_a", uses_zc=True, zc_roots=(a, s1), **_WIDE),
        ProtocolProfile(2, name="ofdm_wide_b", uses_zc=True, zc_roots=(b, s2), **_WIDE),
        ProtocolProfile(3, name="ofdm_narrow_a", uses_zc=True, zc_roots=(c, s1), **_NARROW),
        ProtocolProfile(4, name="ofdm_narrow_b", uses_zc=True, zc_roots=(d, s2), **_NARROW),
        ProtocolProfile(5, name="fhss_control", bandwidth_frac=0.08, n_subcarriers=8, frame_len=8000,
                        frame_gap_mean=3000.0, hop_period=1000, hop_channels=8, chirp_len=256),
        ProtocolProfile(6, name="ood_unseen_root", uses_zc=True, zc_roots=(UNSEEN_ROOT,), **_WIDE),
        ProtocolProfile(7, name="ood_no_preamble", **_NARROW),
    ]
    validate_profile_set(profiles)
    return {p.class_id: p for p in profiles}


def calibration_profiles(root) -> list:
    """Single-root variants of the two preamble-bearing body geometries."""
    root = tuple(root)
    wide, narrow = dict(_WIDE, preamble_prob=1.0), dict(_NARROW, preamble_prob=1.0)
    return [ProtocolProfile(100, name="calib_wide", uses_zc=True, zc_roots=(root,), **wide),
            ProtocolProfile(101, name="calib_narrow", uses_zc=True, zc_roots=(root,), **narrow)]


def default_zc_config(**overrides) -> ZcConfig:
    # one segment spanning exactly the pooled lags plus one preamble length
    base = dict(candidates=tuple((r, V, 8) for r, V in CANDIDATE_ROOTS), pool_u=100, pool_v=64,
                n_seg=1, seg_len=100 * 64 + 139 * 8)
    base.update(overrides)
    return ZcConfig(**base)


def record_seed(seed: int, *keys) -> int:
    """Stable 63-bit seed derived from a base seed and integer keys."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF] + [int(k) & 0xFFFFFFFF for k in keys])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


@dataclass(frozen=True)
class RecordSpec:
    class_id: int
    snr_db: float
    seed: int
    distance_tag: str = "D00"
    los_tag: str = "S00"
    length: int = DEFAULT_RECORD_LEN


def plan_records(class_ids, n_per_class: int, snrs, seed: int, split: int = 0,
                 distance_tags=("D00",), los_tags=("S00",), length: int = DEFAULT_RECORD_LEN) -> list:
    """Deterministic list of record specs, cycling through snr/distance/los values."""
    if n_per_class < 1:
        raise ParameterError(f"n_per_class must be >= 1, got {n_per_class}")
    if not snrs or not distance_tags or not los_tags:
        raise ParameterError("snrs, distance_tags and los_tags must be nonempty")
    grid = [(s, d, l) for s in snrs for d in distance_tags for l in los_tags]
    specs = []
    for cid in class_ids:
        for i in range(n_per_class):
            snr, dist, los = grid[i % len(grid)]
            specs.append(RecordSpec(cid, float(snr), record_seed(seed, split, cid, i), dist, los, length))
    return specs


def make_record(spec: RecordSpec, profiles: dict | None = None) -> IqRecord:
    profiles = profiles or default_profiles()
    if spec.class_id not in profiles:
        raise ParameterError(f"no profile for class {spec.class_id}")
    ch = channel_for_tags(spec.snr_db, spec.distance_tag, spec.los_tag, seed=spec.seed)
    return synth_record(profiles[spec.class_id], ch, L=spec.length)


@dataclass(frozen=True)
class FeatureConfig:
    stft: StftConfig = StftConfig()
    tfi_hw: tuple = (32, 32)
    tfi_channels: int = 1
    zc: ZcConfig = field(default_factory=default_zc_config)
    iq_len: int = 1024


def iq_image(samples: np.ndarray, n: int = 1024) -> np.ndarray:
    """First ``n`` complex samples as a (sqrt n) x (sqrt n) x 2 (I, Q) image, unit RMS."""
    side = int(round(np.sqrt(n)))
    if side * side != n:
        raise ParameterError(f"iq length must be a perfect square, got {n}")
    x = np.asarray(samples[:n])
    if x.size < n:
        x = np.concatenate([x, np.zeros(n - x.size, dtype=x.dtype)])
    rms = np.sqrt(np.mean(np.abs(x) ** 2))
    if rms > 0:
        x = x / rms
    return np.stack([x.real, x.imag], axis=-1).reshape(side, side, 2)


def featurize(rec: IqRecord, cfg: FeatureConfig, seed: int) -> tuple:
    """(tfi H x W x ch, zc rows x pool_v, iq image) for one record."""
    tfi = to_tfi(stft(rec.samples, cfg.stft), *cfg.tfi_hw, ch=cfg.tfi_channels).values
    zc = zc_feature(rec, cfg.zc, np.random.default_rng(seed)).values
    return tfi, zc, iq_image(rec.samples, cfg.iq_len)


@dataclass
class FeatureSet:
    tfi: np.ndarray      # N x H x W x ch
    zc: np.ndarray       # N x rows x pool_v
    iq: np.ndarray       # N x s x s x 2
    labels: np.ndarray   # N
    snr_db: np.ndarray   # N

    def __len__(self):
        return self.labels.size

    def subset(self, idx) -> "FeatureSet":
        if not isinstance(idx, slice):
            idx = np.asarray(idx)
            if idx.size == 0:
                idx = idx.astype(np.int64)
        return FeatureSet(self.tfi[idx], self.zc[idx], self.iq[idx], self.labels[idx], self.snr_db[idx])

    @staticmethod
    def concat(sets) -> "FeatureSet":
        sets = list(sets)
        return FeatureSet(*(np.concatenate([getattr(s, f.name) for s in sets])
                            for f in dataclasses.fields(FeatureSet)))


def _build_one(args):
    spec, cfg, profiles = args
    rec = make_record(spec, profiles)
    return featurize(rec, cfg, spec.seed ^ 0x5EED)


def build_features(specs, cfg: FeatureConfig | None = None, profiles: dict | None = None,
                   workers: int = 1) -> FeatureSet:
    """Synthesize and featurize every spec; output order equals spec order."""
    if not specs:
        raise ParameterError("build_features needs at least one record spec")
    cfg = cfg or FeatureConfig()
    profiles = profiles or default_profiles()
    jobs = [(s, cfg, profiles) for s in specs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(_build_one, jobs, chunksize=8))
    else:
        out = [_build_one(j) for j in jobs]
    tfi, zc, iq = (np.stack(parts) for parts in zip(*out))
    return FeatureSet(tfi, zc, iq, np.array([s.class_id for s in specs]),
                      np.array([s.snr_db for s in specs]))


@dataclass(frozen=True)
class CorpusSpec:
    n_train: int = 300
    n_val: int = 30
    n_test: int = 40
    n_ood: int = 40
    snrs: tuple = (0.0, 10.0)
    distance_tags: tuple = ("D00",)
    los_tags: tuple = ("S00",)
    length: int = DEFAULT_RECORD_LEN
    seed: int = 0
    id_classes: tuple = ID_CLASSES
    ood_classes: tuple = OOD_CLASSES


@dataclass
class Corpus:
    train: FeatureSet
    val: FeatureSet
    test: FeatureSet
    ood: FeatureSet
    spec: CorpusSpec


SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST, SPLIT_OOD = range(4)


def corpus_plan(spec: CorpusSpec) -> dict:
    kw = dict(snrs=spec.snrs, seed=spec.seed, distance_tags=spec.distance_tags,
              los_tags=spec.los_tags, length=spec.length)
    return {
        "train": plan_records(spec.id_classes, spec.n_train, split=SPLIT_TRAIN, **kw),
        "val": plan_records(spec.id_classes, spec.n_val, split=SPLIT_VAL, **kw),
        "test": plan_records(spec.id_classes, spec.n_test, split=SPLIT_TEST, **kw),
        "ood": plan_records(spec.ood_classes, spec.n_ood, split=SPLIT_OOD, **kw),
    }


def build_corpus(spec: CorpusSpec, cfg: FeatureConfig | None = None, profiles: dict | None = None,
                 workers: int = 1) -> Corpus:
    plans = corpus_plan(spec)
    sets = {k: build_features(v, cfg, profiles, workers) for k, v in plans.items()}
    return Corpus(spec=spec, **sets)
