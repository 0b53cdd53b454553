"""Feature files, manifests and the synthetic multimodal dataset.

Feature file layout (little-endian)::

    bytes 0-3   magic b"MSBF"
    bytes 4-7   u32 version (1)
    bytes 8-11  u32 T
    bytes 12-15 u32 D
    then T*D float32 values, row-major

Manifest: one video per line, tab separated
``<id> <rgb_path> <flow_path> <audio_path> <label|labels_path>``; ``-`` marks
an absent modality, ``#`` starts a comment, and a comment of the form
``# frames_per_snippet = N`` sets the snippet length.
"""

from __future__ import annotations

import dataclasses
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import MODALITY_NAMES, MODALITY_ORDER
from .errors import ConfigurationError, LoadError

MAGIC = b"MSBF"
VERSION = 1
_HEADER = struct.Struct("<4sIII")
DEFAULT_FRAMES_PER_SNIPPET = 16


@dataclass
class VideoSample:
    id: str
    features: dict[str, np.ndarray]
    video_label: int = 0
    frame_labels: np.ndarray | None = None
    # (start, length, audio_offset) of each planted event; synthetic data only
    events: list[tuple[int, int, int]] = field(default_factory=list)

    def __post_init__(self):
        lengths = {m: f.shape[0] for m, f in self.features.items()}
        if len(set(lengths.values())) > 1:
            raise LoadError(f"video {self.id}: modalities disagree on T: {lengths}")
        if self.frame_labels is not None and self.num_snippets and len(self.frame_labels) % self.num_snippets:
            raise LoadError(f"video {self.id}: {len(self.frame_labels)} frame labels is not a multiple "
                            f"of T={self.num_snippets}")

    @property
    def num_snippets(self) -> int:
        return next(iter(self.features.values())).shape[0]

    @property
    def frames_per_snippet(self) -> int | None:
        if self.frame_labels is None:
            return None
        return len(self.frame_labels) // self.num_snippets

    def permuted(self, order: Sequence[int]) -> "VideoSample":
        """Copy with snippets reordered identically in every modality."""
        order = np.asarray(order)
        return dataclasses.replace(self, features={m: f[order] for m, f in self.features.items()},
                                   frame_labels=None, events=[])


# ---------------------------------------------------------------- feature files

def write_feature_file(path: str | Path, features: np.ndarray) -> None:
    arr = np.asarray(features)
    if arr.ndim != 2:
        raise ValueError(f"feature matrix must be 2-D, got shape {arr.shape}")
    t, d = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, t, d))
        fh.write(arr.astype("<f4").tobytes(order="C"))


def read_feature_file(path: str | Path) -> np.ndarray:
    """Read a feature file into a float64 (T, D) array."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise LoadError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, t, d = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise LoadError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise LoadError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * t * d
    if len(raw) != expected:
        raise LoadError(f"{path}: expected {expected} bytes for T={t}, D={d}, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size, count=t * d)
    return data.reshape(t, d).astype(np.float64)


def write_frame_labels(path: str | Path, labels: Sequence[int]) -> None:
    Path(path).write_text("".join("1" if int(v) else "0" for v in labels) + "\n")


def read_frame_labels(path: str | Path) -> np.ndarray:
    text = Path(path).read_text().strip()
    if not text or set(text) - {"0", "1"}:
        raise LoadError(f"{path}: frame-label file must be a non-empty line of 0/1 characters")
    return np.frombuffer(text.encode(), dtype=np.uint8) - ord("0")


# ---------------------------------------------------------------- manifests

@dataclass
class ManifestEntry:
    id: str
    paths: dict[str, Path]
    label: int | None = None
    labels_path: Path | None = None


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    dims: dict[str, int]
    frames_per_snippet: int = DEFAULT_FRAMES_PER_SNIPPET

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(m for m in MODALITY_ORDER if m in self.dims)


_FPS_DIRECTIVE = re.compile(r"#\s*frames_per_snippet\s*=\s*(\d+)")


def load_manifest(path: str | Path, frames_per_snippet: int | None = None) -> tuple[Manifest, list[VideoSample]]:
    """Parse and validate a manifest, loading every referenced file."""
    path = Path(path)
    base = path.parent
    fps = DEFAULT_FRAMES_PER_SNIPPET
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            m = _FPS_DIRECTIVE.match(stripped)
            if m:
                fps = int(m.group(1))
            continue
        cols = line.rstrip("\n").split("\t")
        if len(cols) != 5:
            raise LoadError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(cols)}")
        vid = cols[0].strip()
        if vid in seen:
            raise LoadError(f"{path}:{lineno}: duplicate video id {vid!r}")
        seen.add(vid)
        paths = {m: base / c.strip() for m, c in zip(MODALITY_ORDER, cols[1:4]) if c.strip() not in ("", "-")}
        label_field = cols[4].strip()
        if label_field in ("0", "1"):
            entries.append(ManifestEntry(vid, paths, label=int(label_field)))
        else:
            entries.append(ManifestEntry(vid, paths, labels_path=base / label_field))
    if frames_per_snippet is not None:
        fps = frames_per_snippet
    if fps < 1:
        raise LoadError(f"{path}: frames_per_snippet must be >= 1")

    samples = []
    dims: dict[str, int] = {}
    modset = None
    for e in entries:
        if modset is None:
            modset = set(e.paths)
        elif set(e.paths) != modset:
            raise LoadError(f"video {e.id}: modalities {sorted(e.paths)} differ from the rest {sorted(modset)}")
        feats = {}
        for m, p in e.paths.items():
            if not p.exists():
                raise LoadError(f"video {e.id}: missing {MODALITY_NAMES[m]} feature file {p}")
            try:
                arr = read_feature_file(p)
            except LoadError as exc:
                raise LoadError(f"video {e.id}: {exc}") from exc
            if dims.setdefault(m, arr.shape[1]) != arr.shape[1]:
                raise LoadError(f"video {e.id}: {MODALITY_NAMES[m]} dim {arr.shape[1]} != {dims[m]} "
                                "used by earlier videos")
            feats[m] = arr
        ts = {MODALITY_NAMES[m]: f.shape[0] for m, f in feats.items()}
        if len(set(ts.values())) > 1:
            raise LoadError(f"video {e.id}: snippet count mismatch across modalities {ts}")
        frame_labels = None
        label = e.label
        if e.labels_path is not None:
            if not e.labels_path.exists():
                raise LoadError(f"video {e.id}: missing frame-label file {e.labels_path}")
            try:
                frame_labels = read_frame_labels(e.labels_path)
            except LoadError as exc:
                raise LoadError(f"video {e.id}: {exc}") from exc
            t = next(iter(ts.values()))
            if len(frame_labels) != t * fps:
                raise LoadError(f"video {e.id}: {len(frame_labels)} frame labels, expected T*fps = {t}*{fps}")
            label = int(frame_labels.any())
        samples.append(VideoSample(e.id, feats, label, frame_labels))
    return Manifest(entries, dims, fps), samples


def write_dataset(samples: Sequence[VideoSample], directory: str | Path,
                  frames_per_snippet: int = DEFAULT_FRAMES_PER_SNIPPET,
                  name: str = "manifest.tsv") -> Path:
    """Write feature files, frame labels and a manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"# frames_per_snippet = {frames_per_snippet}"]
    for s in samples:
        lines.append(write_sample(s, directory))
    path = directory / name
    path.write_text("\n".join(lines) + "\n")
    return path


def write_sample(sample: VideoSample, directory: str | Path) -> str:
    """Write one video's files into ``directory``; returns its manifest line."""
    directory = Path(directory)
    cols = [sample.id]
    for m in MODALITY_ORDER:
        if m in sample.features:
            fname = f"{sample.id}_{MODALITY_NAMES[m]}.msbf"
            write_feature_file(directory / fname, sample.features[m])
            cols.append(fname)
        else:
            cols.append("-")
    if sample.frame_labels is not None:
        fname = f"{sample.id}_labels.txt"
        write_frame_labels(directory / fname, sample.frame_labels)
        cols.append(fname)
    else:
        cols.append(str(int(sample.video_label)))
    return "\t".join(cols)


def expand_scores_to_frames(scores, frames_per_snippet: int) -> list[float]:
    if frames_per_snippet < 1:
        raise ConfigurationError("frames_per_snippet must be >= 1")
    arr = scores.data if hasattr(scores, "data") else np.asarray(scores, dtype=np.float64)
    return np.repeat(np.asarray(arr, dtype=np.float64).reshape(-1), frames_per_snippet).tolist()


# ---------------------------------------------------------------- synthetic data

@dataclass
class SynthConfig:
    num_videos: int = 100
    t_min: int = 20
    t_max: int = 28
    dims: dict[str, int] = field(default_factory=lambda: {"R": 8, "F": 8, "A": 8})
    anomaly_rate: float = 0.5
    events_min: int = 1
    events_max: int = 2
    # at least K=9 snippets, so the top-K window fits inside one event
    event_len_min: int = 9
    event_len_max: int = 12
    signal: float = 2.5          # size of the cross-modal bump
    noise: float = 1.0
    async_min: int = 0           # audio lags the visual event by this many snippets
    async_max: int = 0
    distractor_rate: float = 0.3  # chance of a single-modality bump (not an anomaly)
    frames_per_snippet: int = DEFAULT_FRAMES_PER_SNIPPET
    seed: int = 0
    # the anomaly signature; keep it fixed so train and test sets share it
    direction_seed: int = 0
    id_prefix: str = "synth"

    def validate(self) -> None:
        if self.num_videos < 0:
            raise ConfigurationError("num_videos must be >= 0")
        if not 1 <= self.t_min <= self.t_max:
            raise ConfigurationError(f"invalid T range [{self.t_min}, {self.t_max}]")
        if not 1 <= self.event_len_min <= self.event_len_max:
            raise ConfigurationError(f"invalid event length range [{self.event_len_min}, {self.event_len_max}]")
        if not 1 <= self.events_min <= self.events_max:
            raise ConfigurationError("invalid events-per-video range")
        if not 0 <= self.async_min <= self.async_max:
            raise ConfigurationError(f"invalid asynchrony range [{self.async_min}, {self.async_max}]")
        if self.async_max >= self.event_len_min:
            raise ConfigurationError("asynchrony offset must be smaller than the event length")
        if self.event_len_max + self.async_max > self.t_min:
            raise ConfigurationError("shortest video cannot hold the longest event plus offset")
        if not 0 <= self.anomaly_rate <= 1 or not 0 <= self.distractor_rate <= 1:
            raise ConfigurationError("rates must lie in [0, 1]")
        if self.noise < 0 or self.frames_per_snippet < 1:
            raise ConfigurationError("noise must be >= 0 and frames_per_snippet >= 1")
        if not self.dims or set(self.dims) - set(MODALITY_ORDER):
            raise ConfigurationError(f"dims must map a subset of {MODALITY_ORDER} to widths")


def plant_event(features: dict[str, np.ndarray], directions: dict[str, np.ndarray], start: int,
                length: int, offset: int, signal: float) -> None:
    """Add the anomaly bump in place; audio is shifted ``offset`` snippets later."""
    for m, f in features.items():
        s = start + offset if m == "A" else start
        f[s:s + length] += signal * directions[m]


def _free_span(busy: np.ndarray, start: int, length: int) -> bool:
    return not busy[start:start + length].any()


def generate_synthetic(cfg: SynthConfig) -> list[VideoSample]:
    """Deterministic synthetic dataset; anomalies bump every modality together."""
    cfg.validate()
    mods = [m for m in MODALITY_ORDER if m in cfg.dims]
    dir_rng = np.random.default_rng(cfg.direction_seed)
    directions = {}
    for m in mods:
        v = dir_rng.normal(size=cfg.dims[m])
        directions[m] = v / np.linalg.norm(v)
    rng = np.random.default_rng(cfg.seed)
    samples = []
    width = len(str(max(cfg.num_videos - 1, 0)))
    for i in range(cfg.num_videos):
        t = int(rng.integers(cfg.t_min, cfg.t_max + 1))
        feats = {m: rng.normal(0.0, cfg.noise, size=(t, cfg.dims[m])) for m in mods}
        anomalous = rng.random() < cfg.anomaly_rate
        busy = np.zeros(t, dtype=bool)
        snippet_labels = np.zeros(t, dtype=np.uint8)
        events = []
        if anomalous:
            n_events = int(rng.integers(cfg.events_min, cfg.events_max + 1))
            for _ in range(n_events):
                length = int(rng.integers(cfg.event_len_min, cfg.event_len_max + 1))
                offset = int(rng.integers(cfg.async_min, cfg.async_max + 1))
                span = length + offset
                for _attempt in range(20):
                    start = int(rng.integers(0, t - span + 1))
                    if _free_span(busy, start, span):
                        break
                else:
                    continue
                busy[start:start + span] = True
                snippet_labels[start:start + length] = 1
                plant_event(feats, directions, start, length, offset, cfg.signal)
                events.append((start, length, offset))
        if rng.random() < cfg.distractor_rate:
            m = mods[int(rng.integers(len(mods)))]
            length = int(rng.integers(cfg.event_len_min, cfg.event_len_max + 1))
            for _attempt in range(20):
                start = int(rng.integers(0, t - length + 1))
                if _free_span(busy, start, length):
                    feats[m][start:start + length] += cfg.signal * directions[m]
                    break
        # round through float32 so files round-trip bit-exactly
        feats = {m: f.astype(np.float32).astype(np.float64) for m, f in feats.items()}
        frame_labels = np.repeat(snippet_labels, cfg.frames_per_snippet)
        samples.append(VideoSample(f"{cfg.id_prefix}{i:0{width}d}", feats, int(bool(events)),
                                   frame_labels, events))
    return samples


def check_synthetic_labels(samples: Sequence[VideoSample], frames_per_snippet: int) -> None:
    """Self-check: frame labels cover exactly the planted visual event spans."""
    for s in samples:
        expected = np.zeros(s.num_snippets, dtype=np.uint8)
        for start, length, _ in s.events:
            expected[start:start + length] = 1
        if not np.array_equal(np.repeat(expected, frames_per_snippet), s.frame_labels):
            raise AssertionError(f"video {s.id}: frame labels disagree with planted events")
        if s.video_label != int(bool(s.events)):
            raise AssertionError(f"video {s.id}: video label disagrees with planted events")
