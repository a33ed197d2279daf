"""Log-mel features, normalization, chunking, feature directories, and a
synthetic SED generator with planted inter-class temporal dependencies."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window

from .tensor import load_tensor, save_tensor

SPLITS = ("train", "val", "test")
LOG_FLOOR = 1e-10
STD_FLOOR = 1e-5


class DataError(ValueError):
    pass


@dataclass
class Item:
    id: str
    features: np.ndarray  # T x F
    labels: np.ndarray  # T x C, {0, 1}
    split: str = "train"
    mask: np.ndarray | None = None  # T, 1 for valid frames

    def __post_init__(self):
        if self.mask is None:
            self.mask = np.ones(self.features.shape[0])


@dataclass
class SequenceDataset:
    items: list[Item]
    class_names: list[str]

    def __post_init__(self):
        self.items = sorted(self.items, key=lambda it: it.id)
        self.validate()

    def validate(self) -> None:
        shapes = set()
        for it in self.items:
            if it.labels.shape[1] != len(self.class_names):
                raise DataError(
                    f"item {it.id}: label width {it.labels.shape[1]} != {len(self.class_names)} classes"
                )
            if it.features.shape[0] != it.labels.shape[0] or it.mask.shape != (it.features.shape[0],):
                raise DataError(f"item {it.id}: features, labels and mask disagree on T")
            if not np.all((it.labels == 0) | (it.labels == 1)):
                raise DataError(f"item {it.id}: labels must be 0/1")
            if it.split not in SPLITS:
                raise DataError(f"item {it.id}: unknown split {it.split!r}")
            shapes.add((it.features.shape, it.labels.shape))
        if len(shapes) > 1:
            raise DataError(f"items do not share T, F, C: {sorted(shapes)}")

    def split(self, name: str) -> list[Item]:
        return [it for it in self.items if it.split == name]

    @property
    def shape(self) -> tuple[int, int, int]:
        it = self.items[0]
        return it.features.shape[0], it.features.shape[1], it.labels.shape[1]


# --- audio features ---------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sr: int, n_fft: int, n_mels: int = 40, fmin: float = 0.0, fmax: float | None = None):
    """Triangular, area-normalized filters on the HTK mel scale, shape (n_mels, n_fft // 2 + 1)."""
    fmax = sr / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    lo, center, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (center - lo)
    down = (hi - freqs) / (hi - center)
    fb = np.maximum(0.0, np.minimum(up, down))
    return fb * (2.0 / (hi - lo))


def frame_params(sr: int) -> tuple[int, int]:
    """Window of 1024 samples at 44.1 kHz, scaled to other rates; 50% hop."""
    win = int(round(1024 * sr / 44100))
    return win, win // 2


def extract_logmel(audio: np.ndarray, sr: int, n_mels: int = 40) -> np.ndarray:
    audio = np.asarray(audio, dtype=np.float64)
    if audio.ndim != 1:
        raise DataError(f"expected mono audio, got array of shape {audio.shape}")
    if audio.size == 0:
        raise DataError("empty audio")
    if sr < 16000:
        raise DataError(f"sample rate {sr} below 16 kHz")
    win, hop = frame_params(sr)
    if audio.size < win:
        raise DataError(f"audio shorter than one window ({audio.size} < {win} samples)")
    frames = np.lib.stride_tricks.sliding_window_view(audio, win)[::hop]
    spec = np.abs(np.fft.rfft(frames * get_window("hamming", win), axis=1))
    energies = spec @ mel_filterbank(sr, win, n_mels).T
    return np.log(np.maximum(energies, LOG_FLOOR))


def read_wav(path) -> tuple[np.ndarray, int]:
    """16/24/32-bit PCM or float WAV -> (mono float64 in [-1, 1], sample rate)."""
    sr, data = wavfile.read(path)
    if data.ndim != 1:
        raise DataError(f"{path}: expected mono audio, found {data.shape[1]} channels")
    if data.dtype.kind == "i":
        data = data / float(np.iinfo(data.dtype).max)
    elif data.dtype.kind == "u":
        data = (data.astype(np.float64) - 128.0) / 128.0
    return data.astype(np.float64), sr


# --- normalization and chunking -----------------------------------------

@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


def compute_norm_stats(matrices, masks=None) -> NormStats:
    """Per-band mean/std over the valid frames of the given (frames x F) matrices."""
    rows = []
    for i, x in enumerate(matrices):
        m = None if masks is None else masks[i]
        rows.append(x if m is None else x[np.asarray(m) > 0])
    allx = np.concatenate(rows, axis=0)
    return NormStats(allx.mean(axis=0), np.maximum(allx.std(axis=0), STD_FLOOR))


def train_norm_stats(ds: SequenceDataset) -> NormStats:
    train = ds.split("train")
    if not train:
        raise DataError("no training items to compute normalization statistics")
    return compute_norm_stats([it.features for it in train], [it.mask for it in train])


def normalize_dataset(ds: SequenceDataset, stats: NormStats) -> SequenceDataset:
    items = [Item(it.id, stats.apply(it.features) * it.mask[:, None], it.labels, it.split, it.mask)
             for it in ds.items]
    return SequenceDataset(items, list(ds.class_names))


def chunk_and_normalize(features: np.ndarray, labels: np.ndarray, stats: NormStats | None,
                        seq_len: int = 1024, id_prefix: str = "item", split: str = "train") -> list[Item]:
    """Non-overlapping ``seq_len`` chunks; a short tail is zero-padded and masked."""
    n = features.shape[0]
    if labels.shape[0] != n:
        raise DataError("features and labels differ in frame count")
    x = stats.apply(features) if stats is not None else features
    items = []
    for k, start in enumerate(range(0, n, seq_len)):
        valid = min(seq_len, n - start)
        fx = np.zeros((seq_len, features.shape[1]))
        fy = np.zeros((seq_len, labels.shape[1]))
        mask = np.zeros(seq_len)
        fx[:valid] = x[start : start + valid]
        fy[:valid] = labels[start : start + valid]
        mask[:valid] = 1.0
        items.append(Item(f"{id_prefix}_{k:04d}", fx, fy, split, mask))
    return items


# --- feature directories --------------------------------------------------

MANIFEST = "manifest.json"


def save_feature_dir(ds: SequenceDataset, path, extra: dict | None = None) -> None:
    path = Path(path)
    (path / "items").mkdir(parents=True, exist_ok=True)
    t, f, c = ds.shape
    manifest = {"T": t, "F": f, "C": c, "class_names": list(ds.class_names),
                "items": [{"id": it.id, "split": it.split} for it in ds.items]}
    if extra:
        manifest["extra"] = extra
    for it in ds.items:
        save_tensor(path / "items" / f"{it.id}.features", it.features)
        save_tensor(path / "items" / f"{it.id}.labels", it.labels)
        save_tensor(path / "items" / f"{it.id}.mask", it.mask)
    with open(path / MANIFEST, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_feature_dir(path) -> SequenceDataset:
    path = Path(path)
    mpath = path / MANIFEST
    if not mpath.exists():
        raise DataError(f"{mpath}: manifest not found")
    try:
        with open(mpath) as fh:
            manifest = json.load(fh)
        class_names = manifest["class_names"]
        entries = manifest["items"]
        t, f, c = manifest["T"], manifest["F"], manifest["C"]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise DataError(f"{mpath}: corrupt manifest ({e})") from e
    if len(class_names) != c:
        raise DataError(f"{mpath}: C={c} but {len(class_names)} class names")
    items = []
    for e in entries:
        base = path / "items" / e["id"]
        try:
            x = load_tensor(f"{base}.features")
            y = load_tensor(f"{base}.labels")
            mfile = Path(f"{base}.mask")
            m = load_tensor(mfile) if mfile.exists() else np.ones(x.shape[0])
        except (OSError, ValueError) as err:
            raise DataError(f"item {e['id']}: {err}") from err
        if x.shape != (t, f):
            raise DataError(f"item {e['id']}: features shape {x.shape} != manifest ({t}, {f})")
        if y.shape != (t, c):
            raise DataError(f"item {e['id']}: labels shape {y.shape} != manifest ({t}, {c})")
        items.append(Item(e["id"], x, y, e["split"], m))
    return SequenceDataset(items, class_names)


# --- synthetic generator ----------------------------------------------------

@dataclass
class Dependency:
    """Every onset of ``child`` falls 0..``max_gap`` frames after an offset of ``parent``."""

    parent: int
    child: int
    max_gap: int = 10
    prob: float = 0.8


@dataclass
class SynthConfig:
    num_classes: int = 4
    n_features: int = 40
    seq_len: int = 64
    n_train: int = 8
    n_val: int = 0
    n_test: int = 0
    dependencies: list[Dependency] = field(default_factory=lambda: [Dependency(0, 1, 10)])
    polyphony: int = 5
    events_per_class: float = 1.5  # expected events per root class and sequence
    min_len: int = 4
    max_len: int = 16
    band_width: float = 2.0
    gain_db: tuple[float, float] = (6.0, 20.0)
    noise_db: float = 0.0
    noise_jitter: float = 0.5
    # child classes copy this class's spectral template (acoustically confusable)
    shared_templates: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        self.dependencies = [d if isinstance(d, Dependency) else Dependency(**d)
                             for d in self.dependencies]
        self.shared_templates = {int(k): int(v) for k, v in self.shared_templates.items()}
        self.gain_db = tuple(self.gain_db)

    def order(self) -> list[int]:
        graph = {c: set() for c in range(self.num_classes)}
        for d in self.dependencies:
            if not (0 <= d.parent < self.num_classes and 0 <= d.child < self.num_classes):
                raise DataError(f"dependency {d} refers to an unknown class")
            graph[d.child].add(d.parent)
        try:
            return list(TopologicalSorter(graph).static_order())
        except CycleError as e:
            raise DataError(f"dependency table has a cycle: {e.args[1]}") from e


def class_templates(cfg: SynthConfig, rng) -> np.ndarray:
    """One Gaussian band profile per class, centres spread over the mel axis."""
    bands = np.arange(cfg.n_features)
    centers = (np.arange(cfg.num_classes) + 0.5) * cfg.n_features / cfg.num_classes
    centers = centers + rng.uniform(-0.25, 0.25, cfg.num_classes) * cfg.n_features / cfg.num_classes
    tpl = np.exp(-0.5 * ((bands[None] - centers[:, None]) / cfg.band_width) ** 2)
    for child, src in cfg.shared_templates.items():
        tpl[child] = tpl[src]
    return tpl


def onsets(active: np.ndarray) -> np.ndarray:
    a = np.asarray(active, dtype=bool)
    prev = np.concatenate([[False], a[:-1]])
    return np.flatnonzero(a & ~prev)


def offsets(active: np.ndarray) -> np.ndarray:
    """Frames at which an event has just ended (first inactive frame)."""
    a = np.asarray(active, dtype=bool)
    prev = np.concatenate([[False], a[:-1]])
    return np.flatnonzero(~a & prev)


def dependency_violations(labels: np.ndarray, deps: list[Dependency]) -> list[tuple[int, int]]:
    """(child, onset frame) pairs not explained by any rule for that child."""
    bad = []
    rules: dict[int, list[Dependency]] = {}
    for d in deps:
        rules.setdefault(d.child, []).append(d)
    for child, rs in rules.items():
        for s in onsets(labels[:, child]):
            ok = any(((s - offsets(labels[:, r.parent]) >= 0)
                      & (s - offsets(labels[:, r.parent]) <= r.max_gap)).any() for r in rs)
            if not ok:
                bad.append((child, int(s)))
    return bad


def _fits(active, start, stop, cap):
    return np.all(active[start:stop].sum(axis=1) < cap)


def _sequence_labels(cfg: SynthConfig, order, rng) -> np.ndarray:
    t_len, c = cfg.seq_len, cfg.num_classes
    act = np.zeros((t_len, c), dtype=bool)
    children = {d.child for d in cfg.dependencies}
    for cls in order:
        if cls not in children:
            for _ in range(rng.poisson(cfg.events_per_class)):
                dur = int(rng.integers(cfg.min_len, cfg.max_len + 1))
                start = int(rng.integers(0, max(1, t_len - dur + 1)))
                if _fits(act, start, start + dur, cfg.polyphony):
                    act[start : start + dur, cls] = True
        else:
            for d in (d for d in cfg.dependencies if d.child == cls):
                for e in offsets(act[:, d.parent]):
                    if rng.random() >= d.prob:
                        continue
                    start = int(e + rng.integers(0, d.max_gap + 1))
                    dur = int(rng.integers(cfg.min_len, cfg.max_len + 1))
                    stop = min(t_len, start + dur)
                    if start < t_len and _fits(act, start, stop, cfg.polyphony):
                        act[start:stop, cls] = True
    return act.astype(np.float64)


def synth_generate(cfg: SynthConfig, seed: int = 0) -> SequenceDataset:
    """Feature-domain mixtures: per-band energies add across active classes and
    a noise floor, then a natural log is taken."""
    order = cfg.order()
    rng = np.random.default_rng(seed)
    tpl = class_templates(cfg, rng)
    items = []
    counts = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    for split in SPLITS:
        for i in range(counts[split]):
            y = _sequence_labels(cfg, order, rng)
            gains = 10 ** (rng.uniform(*cfg.gain_db, size=cfg.num_classes) / 10)
            energy = (y * gains) @ tpl
            noise = 10 ** (cfg.noise_db / 10) * rng.exponential(1.0, size=energy.shape)
            jitter = np.exp(cfg.noise_jitter * rng.standard_normal(energy.shape))
            x = np.log(np.maximum(energy * jitter + noise, LOG_FLOOR))
            items.append(Item(f"{split}_{i:05d}", x, y, split))
    return SequenceDataset(items, [f"class_{k}" for k in range(cfg.num_classes)])


def dataset_digest(ds: SequenceDataset) -> bytes:
    parts = []
    for it in ds.items:
        parts += [it.id.encode(), it.features.tobytes(), it.labels.tobytes(), it.mask.tobytes()]
    return b"".join(parts)


def output_root(default: str = "runs") -> Path:
    return Path(os.environ.get("CONDSED_OUTPUT", default))
