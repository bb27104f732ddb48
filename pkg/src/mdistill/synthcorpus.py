"""Synthetic multi-domain corpora and the acoustic feature pipeline.

Each utterance is a token sequence rendered as frames around per-token
prototype vectors. Domains differ in token durations, emission noise, a
per-utterance offset, and an optional environment (exponential smearing in
time plus additive noise at a fixed SNR). Every utterance draws from its own
:class:`RngStream` keyed by ``(master_seed, domain_id, utterance_id)``, so
corpora can be generated in any order or in parallel with identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numcore import RngStream, derive_stream_id

SPLITS = ("train", "dev", "test")
TOKENS_PER_UTTERANCE = (4, 12)
STACK = 8
SUBSAMPLE = 3
STD_FLOOR = 1e-8
# spread of token prototypes relative to the emission noise; sets task difficulty
PROTOTYPE_SCALE = 0.5
CORPUS_MAGIC = b"MDCP"
CORPUS_VERSION = 1
_PROTOTYPE_STREAM = 0x50524F544F  # "PROTO"


@dataclass(frozen=True)
class DomainConfig:
    domain_id: int
    name: str
    duration_range: tuple = (6, 10)
    emission_noise_sigma: float = 0.3
    mean_shift_sigma: float = 0.0
    reverb_tau: float | None = None
    reverb_taps: int = 0
    noise_snr_db: float | None = None

    def __post_init__(self):
        lo, hi = self.duration_range
        object.__setattr__(self, "duration_range", (int(lo), int(hi)))
        if lo < 1 or hi < lo:
            raise ValueError(f"{self.name}: bad duration range {self.duration_range}")
        if self.emission_noise_sigma < 0 or self.mean_shift_sigma < 0:
            raise ValueError(f"{self.name}: sigmas must be non-negative")
        if self.reverb_tau is not None and self.reverb_tau <= 0:
            raise ValueError(f"{self.name}: reverb_tau must be positive")
        if self.reverb_taps < 0:
            raise ValueError(f"{self.name}: reverb_taps must be non-negative")
        if self.noise_snr_db is not None and not np.isfinite(self.noise_snr_db):
            raise ValueError(f"{self.name}: noise_snr_db must be finite")

    @property
    def has_environment(self) -> bool:
        return self.reverb_tau is not None or self.noise_snr_db is not None


STYLE_DOMAINS = (
    DomainConfig(0, "Read", (6, 10), 0.3, 0.0),
    DomainConfig(1, "Lect", (4, 8), 0.4, 0.3),
    DomainConfig(2, "Spon", (3, 6), 0.6, 0.6),
)

ENV_DOMAINS = (
    DomainConfig(0, "Near", (6, 10), 0.3, 0.0),
    DomainConfig(1, "Far", (6, 10), 0.3, 0.0, reverb_tau=3.0, reverb_taps=6),
    DomainConfig(2, "FarNoise", (6, 10), 0.3, 0.0, reverb_tau=3.0, reverb_taps=6, noise_snr_db=5.0),
)


@dataclass
class CorpusManifest:
    vocab_size: int
    feature_dim: int
    master_seed: int
    domains: tuple
    splits: dict
    prototypes: np.ndarray = field(repr=False)

    def __post_init__(self):
        ids = [d.domain_id for d in self.domains]
        if len(set(ids)) != len(ids) or len({d.name for d in self.domains}) != len(ids):
            raise ValueError("domain ids and names must be unique")
        for split in SPLITS:
            counts = self.splits.get(split)
            if counts is None or set(counts) != {d.name for d in self.domains}:
                raise ValueError(f"split {split!r} must list every domain")
        if self.prototypes.shape != (self.vocab_size, self.feature_dim):
            raise ValueError("prototype table shape does not match vocab_size x feature_dim")

    def domain(self, key) -> DomainConfig:
        for d in self.domains:
            if d.domain_id == key or d.name == key:
                return d
        raise KeyError(f"unknown domain {key!r}")


def make_manifest(domains=STYLE_DOMAINS, vocab_size: int = 20, feature_dim: int = 8,
                  counts=(600, 60, 100), master_seed: int = 0,
                  prototype_scale: float = PROTOTYPE_SCALE) -> CorpusManifest:
    """Corpus description with Gaussian token prototypes of spread ``prototype_scale``."""
    rng = RngStream(master_seed, _PROTOTYPE_STREAM)
    prototypes = rng.normal((vocab_size, feature_dim), sigma=prototype_scale)
    splits = {s: {d.name: int(n) for d in domains} for s, n in zip(SPLITS, counts)}
    return CorpusManifest(vocab_size, feature_dim, master_seed, tuple(domains), splits, prototypes)


@dataclass
class Utterance:
    utterance_id: int
    domain_id: int
    frames: np.ndarray
    frame_labels: np.ndarray
    tokens: np.ndarray


def utterance_id(domain_id: int, split: str, index: int) -> int:
    return (int(domain_id) << 32) | (SPLITS.index(split) << 24) | int(index)


def apply_environment(frames, domain: DomainConfig, rng: RngStream) -> np.ndarray:
    """Smear frames with a normalized decaying kernel, then add noise at a fixed SNR."""
    if not domain.has_environment:
        raise ValueError(f"domain {domain.name} has no environment configured")
    y = np.array(frames, dtype=np.float64)
    if domain.reverb_tau is not None and domain.reverb_taps > 0:
        w = np.exp(-np.arange(domain.reverb_taps + 1) / domain.reverb_tau)
        src = y
        y = w[0] * src
        for k in range(1, min(domain.reverb_taps, src.shape[0] - 1) + 1):
            y[k:] += w[k] * src[:-k]
        y /= w.sum()
    if domain.noise_snr_db is not None:
        signal_power = float(np.mean(y * y))
        noise_power = signal_power / 10.0 ** (domain.noise_snr_db / 10.0)
        y = y + rng.normal(y.shape, sigma=np.sqrt(noise_power))
    return y


def generate_utterance(manifest: CorpusManifest, domain: DomainConfig, utt_id: int) -> Utterance:
    rng = RngStream(manifest.master_seed, derive_stream_id(domain.domain_id, utt_id))
    L0, D = manifest.vocab_size, manifest.feature_dim
    K = int(rng.integers(*TOKENS_PER_UTTERANCE))
    tokens = np.empty(K, dtype=np.int64)
    tokens[0] = rng.integers(0, L0 - 1)
    for k in range(1, K):
        # skip the previous token so frame labels collapse back to tokens
        t = int(rng.integers(0, L0 - 2))
        tokens[k] = t + (t >= tokens[k - 1])
    durations = rng.integers(*domain.duration_range, size=K)
    frame_labels = np.repeat(tokens, durations)
    T = frame_labels.size
    offset = rng.normal((D,), sigma=domain.mean_shift_sigma)
    noise = rng.normal((T, D), sigma=domain.emission_noise_sigma)
    frames = manifest.prototypes[frame_labels] + offset + noise
    if domain.has_environment:
        frames = apply_environment(frames, domain, rng)
    return Utterance(utt_id, domain.domain_id, frames, frame_labels, tokens)


def generate_corpus(manifest: CorpusManifest, threads: int = 1) -> dict:
    """All splits, each ordered by domain then index."""
    jobs = {split: [(d, utterance_id(d.domain_id, split, i))
                    for d in manifest.domains for i in range(manifest.splits[split][d.name])]
            for split in SPLITS}
    corpus = {}
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for split, items in jobs.items():
                corpus[split] = list(pool.map(lambda job: generate_utterance(manifest, *job), items))
    else:
        for split, items in jobs.items():
            corpus[split] = [generate_utterance(manifest, d, uid) for d, uid in items]
    return corpus


# ---------------------------------------------------------------------------
# feature pipeline

@dataclass
class FeatureView:
    frames: np.ndarray
    labels: np.ndarray
    tokens: np.ndarray
    domain_id: int
    utterance_id: int


@dataclass
class MvnStats:
    mean: np.ndarray
    std: np.ndarray


def _symmetric_diff(x):
    padded = np.concatenate([x[:1], x, x[-1:]], axis=0)
    return 0.5 * (padded[2:] - padded[:-2])


def compute_deltas(frames) -> np.ndarray:
    """Append first and second order differences: output is ``[x | d | dd]``."""
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("need a non-empty T x D frame matrix")
    d1 = _symmetric_diff(x)
    d2 = _symmetric_diff(d1)
    return np.concatenate([x, d1, d2], axis=1)


def stack_subsample(frames, frame_labels, stack: int = STACK, step: int = SUBSAMPLE):
    """Stack ``stack`` frames to the right of every ``step``-th anchor.

    Frames past the end repeat the last frame. Returns (stacked, anchor labels).
    """
    x = np.asarray(frames, dtype=np.float64)
    T = x.shape[0]
    if T < 1:
        raise ValueError("need at least one frame")
    anchors = np.arange(0, T, step)
    idx = np.minimum(anchors[:, None] + np.arange(stack)[None, :], T - 1)
    stacked = x[idx].reshape(anchors.size, stack * x.shape[1])
    return stacked, np.asarray(frame_labels)[anchors]


def featurize(utt: Utterance) -> FeatureView:
    stacked, labels = stack_subsample(compute_deltas(utt.frames), utt.frame_labels)
    return FeatureView(stacked, labels, utt.tokens, utt.domain_id, utt.utterance_id)


def fit_global_mvn(views) -> MvnStats:
    views = list(views)
    if not views:
        raise ValueError("cannot fit normalization on an empty training set")
    allf = np.concatenate([v.frames for v in views], axis=0)
    mean = allf.mean(axis=0)
    std = np.maximum(allf.std(axis=0), STD_FLOOR)
    return MvnStats(mean, std)


def apply_mvn(view: FeatureView, stats: MvnStats) -> FeatureView:
    frames = (view.frames - stats.mean) / stats.std
    return FeatureView(frames, view.labels, view.tokens, view.domain_id, view.utterance_id)


def prepare_features(corpus: dict, threads: int = 1):
    """Featurize every split and normalize with statistics of the training split."""
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            raw = {s: list(pool.map(featurize, utts)) for s, utts in corpus.items()}
    else:
        raw = {s: [featurize(u) for u in utts] for s, utts in corpus.items()}
    stats = fit_global_mvn(raw["train"])
    return {s: [apply_mvn(v, stats) for v in views] for s, views in raw.items()}, stats


# ---------------------------------------------------------------------------
# corpus directory

class CorpusError(ValueError):
    pass


class MissingManifestError(CorpusError):
    pass


class CorpusVersionError(CorpusError):
    pass


class ChecksumError(CorpusError):
    pass


class CorpusConsistencyError(CorpusError):
    pass


def _domain_to_json(d: DomainConfig) -> dict:
    out = asdict(d)
    out["duration_range"] = list(d.duration_range)
    return out


def manifest_to_json(manifest: CorpusManifest) -> dict:
    return {
        "format_version": CORPUS_VERSION,
        "vocab_size": manifest.vocab_size,
        "feature_dim": manifest.feature_dim,
        "master_seed": manifest.master_seed,
        "domains": [_domain_to_json(d) for d in manifest.domains],
        "splits": manifest.splits,
        "prototypes": manifest.prototypes.tolist(),
    }


def manifest_from_json(obj: dict) -> CorpusManifest:
    domains = tuple(DomainConfig(**{**d, "duration_range": tuple(d["duration_range"])})
                    for d in obj["domains"])
    return CorpusManifest(int(obj["vocab_size"]), int(obj["feature_dim"]), int(obj["master_seed"]),
                          domains, {s: dict(c) for s, c in obj["splits"].items()},
                          np.asarray(obj["prototypes"], dtype=np.float64))


def _encode_split(utts) -> bytes:
    out = bytearray(CORPUS_MAGIC)
    out += struct.pack("<II", CORPUS_VERSION, len(utts))
    for u in utts:
        T, D = u.frames.shape
        out += struct.pack("<QIIII", u.utterance_id, u.domain_id, T, len(u.tokens), D)
        out += np.ascontiguousarray(u.frames, dtype="<f8").tobytes()
        out += np.asarray(u.frame_labels, dtype="<u4").tobytes()
        out += np.asarray(u.tokens, dtype="<u4").tobytes()
    return bytes(out)


def _decode_split(data: bytes, name: str) -> list:
    if data[:4] != CORPUS_MAGIC:
        raise CorpusConsistencyError(f"{name}: bad magic")
    if len(data) < 12:
        raise CorpusConsistencyError(f"{name}: truncated header")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CORPUS_VERSION:
        raise CorpusVersionError(f"{name}: version {version}, expected {CORPUS_VERSION}")
    pos = 12
    utts = []
    for _ in range(count):
        if pos + 24 > len(data):
            raise CorpusConsistencyError(f"{name}: truncated utterance header")
        uid, dom, T, K, D = struct.unpack_from("<QIIII", data, pos)
        pos += 24
        need = 8 * T * D + 4 * T + 4 * K
        if pos + need > len(data):
            raise CorpusConsistencyError(f"{name}: truncated utterance {uid}")
        frames = np.frombuffer(data, "<f8", T * D, pos).astype(np.float64).reshape(T, D)
        pos += 8 * T * D
        labels = np.frombuffer(data, "<u4", T, pos).astype(np.int64)
        pos += 4 * T
        tokens = np.frombuffer(data, "<u4", K, pos).astype(np.int64)
        pos += 4 * K
        utts.append(Utterance(uid, dom, frames, labels, tokens))
    if pos != len(data):
        raise CorpusConsistencyError(f"{name}: trailing bytes")
    return utts


def write_corpus(manifest: CorpusManifest, corpus: dict, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = manifest_to_json(manifest)
    meta["files"] = {}
    for split in SPLITS:
        blob = _encode_split(corpus[split])
        (directory / f"{split}.bin").write_bytes(blob)
        meta["files"][split] = {"utterances": len(corpus[split]),
                                "sha256": hashlib.sha256(blob).hexdigest()}
    (directory / "manifest.json").write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")


def read_corpus(directory):
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.is_file():
        raise MissingManifestError(f"missing manifest: {path}")
    meta = json.loads(path.read_text(encoding="utf-8"))
    if meta.get("format_version") != CORPUS_VERSION:
        raise CorpusVersionError(f"manifest version {meta.get('format_version')}, expected {CORPUS_VERSION}")
    try:
        manifest = manifest_from_json(meta)
    except (KeyError, TypeError, ValueError) as exc:
        raise CorpusConsistencyError(f"invalid manifest: {exc}") from None
    corpus = {}
    by_id = {d.domain_id: d.name for d in manifest.domains}
    for split in SPLITS:
        bin_path = directory / f"{split}.bin"
        if not bin_path.is_file():
            raise CorpusConsistencyError(f"manifest lists split {split!r} but {bin_path.name} is missing")
        blob = bin_path.read_bytes()
        info = meta.get("files", {}).get(split, {})
        if info.get("sha256") != hashlib.sha256(blob).hexdigest():
            raise ChecksumError(f"{bin_path.name}: checksum mismatch")
        utts = _decode_split(blob, bin_path.name)
        counts = {name: 0 for name in by_id.values()}
        for u in utts:
            if u.domain_id not in by_id:
                raise CorpusConsistencyError(f"{bin_path.name}: unknown domain id {u.domain_id}")
            if u.frames.shape[1] != manifest.feature_dim:
                raise CorpusConsistencyError(f"{bin_path.name}: feature dim mismatch")
            counts[by_id[u.domain_id]] += 1
        if counts != manifest.splits[split]:
            raise CorpusConsistencyError(
                f"{bin_path.name}: per-domain counts {counts} differ from manifest {manifest.splits[split]}")
        corpus[split] = utts
    return manifest, corpus
