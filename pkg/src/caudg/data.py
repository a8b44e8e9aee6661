"""Windowed datasets: sliding windows, raw-dataset importers, the CWD on-disk
format, a synthetic domain-shift generator and leave-one-domain-out splits."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

CWD_SCHEMA_VERSION = 1


@dataclass
class WindowedDataset:
    windows: np.ndarray  # [N, C, 1, W] float32
    labels: np.ndarray  # [N] int
    domains: np.ndarray  # [N] int
    class_names: list[str]
    domain_names: list[str]
    source: str = ""
    channel_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.domains = np.asarray(self.domains, dtype=np.int64)
        if self.windows.ndim != 4 or self.windows.shape[2] != 1:
            raise ValueError(f"windows must be [N, C, 1, W], got {self.windows.shape}")
        n = len(self.windows)
        if self.labels.shape != (n,) or self.domains.shape != (n,):
            raise ValueError("label and domain arrays must have one entry per window")

    def __len__(self) -> int:
        return len(self.windows)

    @property
    def num_channels(self) -> int:
        return self.windows.shape[1]

    @property
    def width(self) -> int:
        return self.windows.shape[3]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def num_domains(self) -> int:
        return len(self.domain_names)

    def subset(self, idx) -> "WindowedDataset":
        idx = np.asarray(idx)
        idx = np.flatnonzero(idx) if idx.dtype == bool else idx.astype(np.int64)
        return replace(self, windows=self.windows[idx], labels=self.labels[idx], domains=self.domains[idx])

    def validate(self) -> None:
        if np.isnan(self.windows).any():
            raise ValueError("dataset contains NaN values")
        if len(self) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("activity label out of range")
        if len(self) and (self.domains.min() < 0 or self.domains.max() >= self.num_domains):
            raise ValueError("domain label out of range")
        missing = sorted(set(range(self.num_domains)) - set(self.domains.tolist()))
        if missing:
            raise ValueError(f"declared domains without windows: {missing}")


# ---------------------------------------------------------------------------
# sliding windows
# ---------------------------------------------------------------------------


def window_stride(width: int, overlap: float) -> int:
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    # half-up rounding: 125 at 50% overlap gives stride 63
    stride = int(math.floor(width * (1.0 - overlap) + 0.5))
    if stride < 1:
        raise ValueError(f"window {width} with overlap {overlap} gives stride {stride}")
    return stride


def window_starts(length: int, width: int, overlap: float) -> np.ndarray:
    stride = window_stride(width, overlap)
    if length < width:
        return np.zeros(0, dtype=np.int64)
    return np.arange(0, length - width + 1, stride)


class WindowStats:
    short_series = 0  # series shorter than one window, skipped


def sliding_window(series: np.ndarray, width: int, overlap: float = 0.5, labels: np.ndarray | None = None):
    """Cut a [C, T] series into [N, C, 1, W] windows.

    With per-timestep ``labels`` also returns the majority label of each
    window (ties go to the smallest label).
    """
    series = np.asarray(series)
    if series.ndim != 2:
        raise ValueError(f"series must be [C, T], got {series.shape}")
    C, T = series.shape
    starts = window_starts(T, width, overlap)
    if len(starts) == 0:
        WindowStats.short_series += 1
        log.warning("series of length %d is shorter than window %d; no windows produced", T, width)
        wins = np.zeros((0, C, 1, width), dtype=series.dtype)
    else:
        view = np.lib.stride_tricks.sliding_window_view(series, width, axis=1)  # [C, T-W+1, W]
        wins = np.ascontiguousarray(view[:, starts, :].transpose(1, 0, 2))[:, :, None, :]
    if labels is None:
        return wins
    labels = np.asarray(labels)
    win_labels = np.array([np.bincount(labels[s : s + width]).argmax() for s in starts], dtype=np.int64)
    return wins, win_labels


# ---------------------------------------------------------------------------
# split specs for the public benchmarks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    setting: str
    groups: tuple[tuple, ...]

    def __post_init__(self):
        flat = [u for g in self.groups for u in g]
        if len(flat) != len(set(flat)):
            raise ValueError(f"split groups overlap: {self.groups}")

    def domain_of(self, unit) -> int | None:
        for i, g in enumerate(self.groups):
            if unit in g:
                return i
        return None


CROSS_PERSON_GROUPS = {
    "dsads": ((0, 1), (2, 3), (4, 5), (6, 7)),
    "uschad": ((1, 11, 2, 0), (6, 3, 9, 5), (7, 13, 8, 10), (4, 12)),
    "pamap2": ((3, 2, 8), (1, 5), (0, 7), (4, 6)),
}
DSADS_POSITIONS = ("torso", "right_arm", "left_arm", "right_leg", "left_leg")
CROSS_DATASET_ORDER = ("dsads", "uschad", "pamap2", "ucihar")
SHARED_ACTIVITIES = ("walking", "upstairs", "downstairs", "sitting", "standing", "lying")
ONE_TO_ONE_SUBJECTS = tuple(range(8))
ONE_TO_ONE_PAIRS = ((0, 1), (2, 3), (4, 5), (6, 7))  # (test, train)

# window width, overlap for each (dataset, setting)
WINDOW_PRESETS = {
    ("dsads", "cross-person"): (125, 0.5),
    ("uschad", "cross-person"): (200, 0.5),
    ("pamap2", "cross-person"): (200, 0.5),
    ("dsads", "cross-position"): (125, 0.5),
    ("dsads", "one-to-one"): (125, 0.5),
    ("uschad", "one-to-one"): (200, 0.5),
    ("pamap2", "one-to-one"): (200, 0.5),
    ("cross-dataset", "cross-dataset"): (50, 0.5),
}
DATASETS = ("dsads", "uschad", "pamap2", "ucihar")
SETTINGS = ("cross-person", "cross-position", "cross-dataset", "one-to-one")


def split_spec(dataset: str, setting: str) -> SplitSpec:
    if setting == "cross-person":
        if dataset not in CROSS_PERSON_GROUPS:
            raise ValueError(f"no cross-person split for {dataset!r}")
        return SplitSpec(setting, CROSS_PERSON_GROUPS[dataset])
    if setting == "cross-position":
        if dataset != "dsads":
            raise ValueError("cross-position is defined for dsads only")
        return SplitSpec(setting, tuple((p,) for p in DSADS_POSITIONS))
    if setting == "cross-dataset":
        return SplitSpec(setting, tuple((d,) for d in CROSS_DATASET_ORDER))
    if setting == "one-to-one":
        if dataset not in CROSS_PERSON_GROUPS:
            raise ValueError(f"no one-to-one split for {dataset!r}")
        return SplitSpec(setting, tuple((s,) for s in ONE_TO_ONE_SUBJECTS))
    raise ValueError(f"unknown setting {setting!r}; choose from {SETTINGS}")


# ---------------------------------------------------------------------------
# raw dataset readers
# ---------------------------------------------------------------------------


class RawDataError(ValueError):
    """Raw data missing or malformed."""


def _read_numeric(path: Path, delimiter: str | None, ncols: int | None = None) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(delimiter)
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise RawDataError(f"{path}:{lineno}: malformed row ({exc})") from None
            if ncols is not None and len(vals) != ncols:
                raise RawDataError(f"{path}:{lineno}: expected {ncols} columns, found {len(vals)}")
            rows.append(vals)
    if not rows:
        raise RawDataError(f"{path}: no data rows")
    return np.asarray(rows, dtype=np.float64)


DSADS_ACTIVITIES = 19
DSADS_SUBJECTS = 8
DSADS_CROSS_DATASET = {"walking": 9, "upstairs": 5, "downstairs": 6, "sitting": 1, "standing": 2, "lying": 3}


def _dsads_series(raw_dir: Path, activity: int, person: int) -> np.ndarray:
    """Concatenate the 5-second segments of one (activity, person) into [45, T]."""
    folder = raw_dir / f"a{activity:02d}" / f"p{person:d}"
    files = sorted(folder.glob("s*.txt"))
    if not files:
        raise RawDataError(f"missing DSADS segments in {folder}")
    segs = [_read_numeric(f, ",", 45) for f in files]
    return np.concatenate(segs, axis=0).T


def _dsads_root(raw_dir: Path) -> Path:
    for cand in (raw_dir, raw_dir / "data"):
        if (cand / "a01").is_dir():
            return cand
    raise RawDataError(f"missing DSADS layout under {raw_dir} (expected a01/p1/s01.txt ...)")


def import_dsads(raw_dir, setting: str = "cross-person") -> WindowedDataset:
    root = _dsads_root(Path(raw_dir))
    spec = split_spec("dsads", setting)
    width, overlap = WINDOW_PRESETS[("dsads", setting)]
    wins, labels, doms = [], [], []
    for a in range(1, DSADS_ACTIVITIES + 1):
        for p in range(1, DSADS_SUBJECTS + 1):
            person = p - 1
            series = _dsads_series(root, a, p)
            if setting == "cross-position":
                for dom, _ in enumerate(DSADS_POSITIONS):
                    w = sliding_window(series[dom * 9 : dom * 9 + 9], width, overlap)
                    wins.append(w)
                    labels += [a - 1] * len(w)
                    doms += [dom] * len(w)
            else:
                dom = spec.domain_of(person)
                if dom is None:
                    continue
                w = sliding_window(series, width, overlap)
                wins.append(w)
                labels += [a - 1] * len(w)
                doms += [dom] * len(w)
    domain_names = list(DSADS_POSITIONS) if setting == "cross-position" else \
        [f"persons{list(g)}" for g in spec.groups]
    return WindowedDataset(np.concatenate(wins), labels, doms, [f"a{a:02d}" for a in range(1, 20)],
                           domain_names, source=f"dsads/{setting}")


USCHAD_ACTIVITIES = 12
USCHAD_SUBJECTS = 14
USCHAD_CROSS_DATASET = {"walking": 1, "upstairs": 4, "downstairs": 5, "sitting": 8, "standing": 9, "lying": 10}


def _uschad_records(raw_dir: Path):
    """Yield (subject id 0-based, activity 1-based, [6, T] readings)."""
    from scipy.io import loadmat

    root = raw_dir
    if not any(root.glob("Subject*")):
        for cand in root.iterdir() if root.is_dir() else []:
            if cand.is_dir() and any(cand.glob("Subject*")):
                root = cand
                break
    subjects = sorted(root.glob("Subject*"), key=lambda p: int(p.name[7:]))
    if not subjects:
        raise RawDataError(f"missing USC-HAD layout under {raw_dir} (expected Subject1/a1t1.mat ...)")
    for sdir in subjects:
        sid = int(sdir.name[7:]) - 1
        for f in sorted(sdir.glob("a*t*.mat")):
            try:
                mat = loadmat(f)
                act = int(f.stem[1 : f.stem.index("t")])
                readings = np.asarray(mat["sensor_readings"], dtype=np.float64)
            except Exception as exc:  # scipy raises several error types for bad files
                raise RawDataError(f"{f}: cannot read USC-HAD record ({exc})") from None
            if readings.ndim != 2 or readings.shape[1] != 6:
                raise RawDataError(f"{f}: sensor_readings must be [T, 6], got {readings.shape}")
            yield sid, act, readings.T


def import_uschad(raw_dir, setting: str = "cross-person") -> WindowedDataset:
    spec = split_spec("uschad", setting)
    width, overlap = WINDOW_PRESETS[("uschad", setting)]
    wins, labels, doms = [], [], []
    for sid, act, series in _uschad_records(Path(raw_dir)):
        dom = spec.domain_of(sid)
        if dom is None:
            continue
        w = sliding_window(series, width, overlap)
        wins.append(w)
        labels += [act - 1] * len(w)
        doms += [dom] * len(w)
    if not wins:
        raise RawDataError(f"no USC-HAD windows produced from {raw_dir}")
    return WindowedDataset(np.concatenate(wins), labels, doms, [f"a{a}" for a in range(1, 13)],
                           [f"subjects{list(g)}" for g in spec.groups], source=f"uschad/{setting}")


PAMAP2_ACTIVITIES = (1, 2, 3, 4, 5, 6, 7, 12, 13, 16, 17, 24)
PAMAP2_CROSS_DATASET = {"walking": 4, "upstairs": 12, "downstairs": 13, "sitting": 2, "standing": 3, "lying": 1}
# acc16 (3), gyro (3), mag (3) for hand, chest, ankle IMUs
PAMAP2_COLUMNS = [3 + imu * 17 + off for imu in range(3) for off in (1, 2, 3, 7, 8, 9, 10, 11, 12)]
PAMAP2_CHEST_ACC_GYRO = [3 + 17 + off for off in (1, 2, 3, 7, 8, 9)]


def _interp_nans(x: np.ndarray) -> np.ndarray:
    x = x.copy()
    t = np.arange(x.shape[1])
    for row in x:
        bad = np.isnan(row)
        if bad.all():
            row[:] = 0.0
        elif bad.any():
            row[bad] = np.interp(t[bad], t[~bad], row[~bad])
    return x


def _pamap2_subjects(raw_dir: Path):
    root = raw_dir / "Protocol" if (raw_dir / "Protocol").is_dir() else raw_dir
    files = sorted(root.glob("subject1*.dat"))
    if not files:
        raise RawDataError(f"missing PAMAP2 layout under {raw_dir} (expected Protocol/subject101.dat ...)")
    for f in files:
        sid = int(f.stem[-3:]) - 101
        data = _read_numeric(f, None, 54)
        yield sid, data


def import_pamap2(raw_dir, setting: str = "cross-person") -> WindowedDataset:
    spec = split_spec("pamap2", setting)
    width, overlap = WINDOW_PRESETS[("pamap2", setting)]
    act_index = {a: i for i, a in enumerate(PAMAP2_ACTIVITIES)}
    wins, labels, doms = [], [], []
    for sid, data in _pamap2_subjects(Path(raw_dir)):
        dom = spec.domain_of(sid)
        if dom is None:
            continue
        series = _interp_nans(data[:, PAMAP2_COLUMNS].T)
        w, lab = sliding_window(series, width, overlap, labels=data[:, 1].astype(np.int64))
        keep = np.isin(lab, PAMAP2_ACTIVITIES)
        wins.append(w[keep])
        labels += [act_index[a] for a in lab[keep]]
        doms += [dom] * int(keep.sum())
    return WindowedDataset(np.concatenate(wins), labels, doms, [f"a{a}" for a in PAMAP2_ACTIVITIES],
                           [f"subjects{list(g)}" for g in spec.groups], source=f"pamap2/{setting}")


UCIHAR_CROSS_DATASET = {"walking": 1, "upstairs": 2, "downstairs": 3, "sitting": 4, "standing": 5, "lying": 6}
UCIHAR_SIGNALS = ("total_acc_x", "total_acc_y", "total_acc_z", "body_gyro_x", "body_gyro_y", "body_gyro_z")


def _ucihar_windows(raw_dir: Path):
    """Pre-windowed UCI-HAR signals: ([N, 6, 128], labels 1-based)."""
    root = raw_dir / "UCI HAR Dataset" if (raw_dir / "UCI HAR Dataset").is_dir() else raw_dir
    xs, ys = [], []
    for part in ("train", "test"):
        sig_dir = root / part / "Inertial Signals"
        if not sig_dir.is_dir():
            raise RawDataError(f"missing UCI-HAR layout: {sig_dir}")
        chans = [_read_numeric(sig_dir / f"{s}_{part}.txt", None) for s in UCIHAR_SIGNALS]
        xs.append(np.stack(chans, axis=1))
        ys.append(_read_numeric(root / part / f"y_{part}.txt", None, 1)[:, 0].astype(np.int64))
    return np.concatenate(xs), np.concatenate(ys)


def import_cross_dataset(raw_dirs: dict[str, Path]) -> WindowedDataset:
    """Six shared activities from the four datasets, resampled to 25 Hz, 6 x 50 windows."""
    width, overlap = WINDOW_PRESETS[("cross-dataset", "cross-dataset")]
    wins, labels, doms = [], [], []
    missing = [d for d in CROSS_DATASET_ORDER if d not in raw_dirs]
    if missing:
        raise RawDataError(f"cross-dataset import needs raw dirs for {missing}")

    def add(dom, series, act_name):
        w = sliding_window(series, width, overlap)
        wins.append(w)
        labels.extend([SHARED_ACTIVITIES.index(act_name)] * len(w))
        doms.extend([dom] * len(w))

    root = _dsads_root(Path(raw_dirs["dsads"]))
    for name, a in DSADS_CROSS_DATASET.items():
        for p in range(1, DSADS_SUBJECTS + 1):
            add(0, _dsads_series(root, a, p)[0:6], name)  # torso acc + gyro, already 25 Hz
    inv = {v: k for k, v in USCHAD_CROSS_DATASET.items()}
    for _, act, series in _uschad_records(Path(raw_dirs["uschad"])):
        if act in inv:
            add(1, series[:, ::4], inv[act])
    inv = {v: k for k, v in PAMAP2_CROSS_DATASET.items()}
    for _, data in _pamap2_subjects(Path(raw_dirs["pamap2"])):
        series = _interp_nans(data[:, PAMAP2_CHEST_ACC_GYRO].T)[:, ::4]
        acts = data[::4, 1].astype(np.int64)
        # contiguous runs of one activity
        change = np.flatnonzero(np.diff(acts)) + 1
        for s, e in zip(np.r_[0, change], np.r_[change, len(acts)]):
            if acts[s] in inv:
                add(2, series[:, s:e], inv[acts[s]])
    inv = {v: k for k, v in UCIHAR_CROSS_DATASET.items()}
    xs, ys = _ucihar_windows(Path(raw_dirs["ucihar"]))
    for x, y in zip(xs, ys):
        if y in inv:
            add(3, x[:, ::2], inv[y])
    return WindowedDataset(np.concatenate(wins), labels, doms, list(SHARED_ACTIVITIES), list(CROSS_DATASET_ORDER),
                           source="cross-dataset")


def import_dataset(raw_dir, dataset: str, setting: str = "cross-person") -> WindowedDataset:
    """Parse one public benchmark into windows with domain labels for ``setting``.

    For ``cross-dataset``, ``raw_dir`` must contain dsads/, uschad/, pamap2/
    and ucihar/ subdirectories.
    """
    raw_dir = Path(raw_dir)
    if not raw_dir.is_dir():
        raise RawDataError(f"raw directory {raw_dir} does not exist")
    if setting == "cross-dataset":
        return import_cross_dataset({d: raw_dir / d for d in CROSS_DATASET_ORDER})
    if dataset == "dsads":
        ds = import_dsads(raw_dir, setting)
    elif dataset == "uschad":
        ds = import_uschad(raw_dir, setting)
    elif dataset == "pamap2":
        ds = import_pamap2(raw_dir, setting)
    elif dataset == "ucihar":
        raise ValueError("ucihar is only used in the cross-dataset setting")
    else:
        raise ValueError(f"unknown dataset {dataset!r}; choose from {DATASETS}")
    ds.validate()
    return ds


# ---------------------------------------------------------------------------
# CWD on-disk format
# ---------------------------------------------------------------------------


class FormatError(ValueError):
    pass


def save_cwd(ds: WindowedDataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    N, C, _, W = ds.windows.shape
    meta = {
        "schema_version": CWD_SCHEMA_VERSION,
        "dims": {"N": N, "C": C, "H": 1, "W": W},
        "class_names": list(ds.class_names),
        "domain_names": list(ds.domain_names),
        "channel_names": list(ds.channel_names),
        "source": ds.source,
        "counts": {
            "data_bytes": N * C * W * 4,
            "labels_bytes": N * 4,
            "domains_bytes": N * 4,
        },
    }
    (d / "data.f32").write_bytes(np.ascontiguousarray(ds.windows, dtype="<f4").tobytes())
    (d / "labels.u32").write_bytes(ds.labels.astype("<u4").tobytes())
    (d / "domains.u32").write_bytes(ds.domains.astype("<u4").tobytes())
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_cwd(directory) -> WindowedDataset:
    d = Path(directory)
    try:
        meta = json.loads((d / "meta.json").read_text())
    except FileNotFoundError:
        raise FormatError(f"{d}: meta.json not found") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{d}/meta.json: invalid JSON ({exc})") from None
    if meta.get("schema_version") != CWD_SCHEMA_VERSION:
        raise FormatError(f"{d}: unsupported schema_version {meta.get('schema_version')}")
    dims = meta["dims"]
    N, C, H, W = dims["N"], dims["C"], dims["H"], dims["W"]
    if H != 1:
        raise FormatError(f"{d}: height must be 1, got {H}")
    expected = {"data.f32": N * C * W * 4, "labels.u32": N * 4, "domains.u32": N * 4}
    blobs = {}
    for name, size in expected.items():
        path = d / name
        if not path.exists():
            raise FormatError(f"{d}: {name} not found")
        raw = path.read_bytes()
        if len(raw) != size:
            raise FormatError(f"{path}: expected {size} bytes from meta.json dims, found {len(raw)}")
        blobs[name] = raw
    windows = np.frombuffer(blobs["data.f32"], dtype="<f4").reshape(N, C, 1, W).astype(np.float32)
    labels = np.frombuffer(blobs["labels.u32"], dtype="<u4").astype(np.int64)
    domains = np.frombuffer(blobs["domains.u32"], dtype="<u4").astype(np.int64)
    return WindowedDataset(windows, labels, domains, meta["class_names"], meta["domain_names"],
                           source=meta.get("source", ""), channel_names=meta.get("channel_names", []))


# ---------------------------------------------------------------------------
# synthetic domain-shift generator
# ---------------------------------------------------------------------------


@dataclass
class DomainStyle:
    scale: tuple[float, ...]  # per-channel amplitude
    offset: tuple[float, ...]  # per-channel DC shift
    angle: float  # rotation mixing channels 0 and 1, radians
    noise: float


@dataclass
class SynthConfig:
    num_classes: int = 4
    channels: int = 3
    width: int = 48
    samples_per_class: int = 40  # per domain
    seed: int = 0
    # class waveform: base frequency in cycles per window and second-harmonic weight
    frequencies: tuple[float, ...] = (1.5, 2.5, 3.5, 4.5)
    harmonics: tuple[float, ...] = (0.0, 0.6, 0.0, 0.6)
    envelopes: tuple[float, ...] = (0.0, 0.0, 0.8, 0.8)
    # offsets on the corners of a tetrahedron, gains exp(+-0.5): every domain
    # sits equally far from the other three, so each one is an extrapolation
    styles: tuple[DomainStyle, ...] = (
        DomainStyle((1.6487, 1.6487, 1.6487), (1.0, 1.0, 1.0), 0.0, 0.6),
        DomainStyle((0.6065, 0.6065, 1.6487), (1.0, -1.0, -1.0), 0.0, 0.6),
        DomainStyle((1.6487, 0.6065, 0.6065), (-1.0, 1.0, -1.0), 0.0, 0.6),
        DomainStyle((0.6065, 1.6487, 0.6065), (-1.0, -1.0, 1.0), 0.0, 0.6),
    )
    freq_jitter: float = 0.15
    amp_jitter: float = 0.15

    @property
    def num_domains(self) -> int:
        return len(self.styles)

    def validate(self) -> None:
        n = self.num_classes
        for name in ("frequencies", "harmonics", "envelopes"):
            if len(getattr(self, name)) < n:
                raise ValueError(f"{name} needs at least {n} entries")
        shapes = set(zip(self.frequencies[:n], self.harmonics[:n], self.envelopes[:n]))
        if len(shapes) != n:
            raise ValueError("class waveforms must be pairwise distinct")
        for s in self.styles:
            if len(s.scale) != self.channels or len(s.offset) != self.channels:
                raise ValueError("style scale/offset need one entry per channel")
        keys = [(s.scale, s.offset, s.angle, s.noise) for s in self.styles]
        if len(set(keys)) != len(keys):
            raise ValueError("domain styles must be distinct")


SYNTH_PRESETS = {"default": SynthConfig}


def class_waveform(cfg: SynthConfig, k: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Style-free [C, W] waveform of class ``k``; ``rng`` adds phase/frequency/amplitude jitter."""
    t = np.arange(cfg.width) / cfg.width
    f = cfg.frequencies[k]
    phase = 0.0
    amp = 1.0
    if rng is not None:
        f = f * (1.0 + cfg.freq_jitter * rng.uniform(-1, 1))
        phase = rng.uniform(0, 2 * np.pi)
        amp = 1.0 + cfg.amp_jitter * rng.uniform(-1, 1)
    env = 1.0 - cfg.envelopes[k] * 0.5 * (1.0 + np.cos(2 * np.pi * t))
    chans = []
    for c in range(cfg.channels):
        ph = phase + c * np.pi / cfg.channels
        s = np.sin(2 * np.pi * f * t + ph) + cfg.harmonics[k] * np.sin(4 * np.pi * f * t + 2 * ph)
        chans.append(amp * env * s)
    return np.asarray(chans)


def apply_style(x: np.ndarray, style: DomainStyle, rng: np.random.Generator | None = None) -> np.ndarray:
    out = x.copy()
    if out.shape[0] >= 2 and style.angle:
        c, s = np.cos(style.angle), np.sin(style.angle)
        a, b = out[0].copy(), out[1].copy()
        out[0], out[1] = c * a - s * b, s * a + c * b
    out = out * np.asarray(style.scale)[:, None] + np.asarray(style.offset)[:, None]
    if rng is not None and style.noise > 0:
        out = out + style.noise * rng.standard_normal(out.shape)
    return out


def synth_generate(cfg: SynthConfig | None = None) -> WindowedDataset:
    cfg = cfg or SynthConfig()
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    wins, labels, doms = [], [], []
    for d, style in enumerate(cfg.styles):
        for k in range(cfg.num_classes):
            for _ in range(cfg.samples_per_class):
                wins.append(apply_style(class_waveform(cfg, k, rng), style, rng))
                labels.append(k)
                doms.append(d)
    windows = np.asarray(wins)[:, :, None, :]
    return WindowedDataset(windows, labels, doms, [f"class{k}" for k in range(cfg.num_classes)],
                           [f"domain{d}" for d in range(cfg.num_domains)], source=f"synthetic/seed{cfg.seed}",
                           channel_names=[f"ch{c}" for c in range(cfg.channels)])


# ---------------------------------------------------------------------------
# leave-one-domain-out partitioning and normalization
# ---------------------------------------------------------------------------


@dataclass
class Partition:
    train: WindowedDataset
    val: WindowedDataset
    test: WindowedDataset
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray


def lodo_partition(ds: WindowedDataset, target_domain: int, val_fraction: float = 0.2, seed: int = 0,
                   source_domains: list[int] | None = None) -> Partition:
    """Target domain -> test; the others are split per (domain, class) into train/val."""
    if target_domain not in set(ds.domains.tolist()):
        raise ValueError(f"target domain {target_domain} has no windows")
    rng = np.random.default_rng(seed)
    test_idx = np.flatnonzero(ds.domains == target_domain)
    sources = [d for d in range(ds.num_domains) if d != target_domain] if source_domains is None else source_domains
    train_idx, val_idx = [], []
    for d in sources:
        for k in range(ds.num_classes):
            idx = np.flatnonzero((ds.domains == d) & (ds.labels == k))
            if len(idx) == 0:
                continue
            idx = rng.permutation(idx)
            n_val = int(round(val_fraction * len(idx)))
            val_idx.append(idx[:n_val])
            train_idx.append(idx[n_val:])
    train_idx = np.sort(np.concatenate(train_idx))
    val_idx = np.sort(np.concatenate(val_idx))
    if np.intersect1d(train_idx, val_idx).size or np.intersect1d(train_idx, test_idx).size \
            or np.intersect1d(val_idx, test_idx).size:
        raise AssertionError("partition leakage between train/val/test")
    return Partition(ds.subset(train_idx), ds.subset(val_idx), ds.subset(test_idx), train_idx, val_idx, test_idx)


def channel_stats(ds: WindowedDataset) -> tuple[np.ndarray, np.ndarray]:
    x = ds.windows.astype(np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    return mean, np.where(std > 1e-8, std, 1.0)


def standardize(windows: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (np.asarray(windows, dtype=np.float64) - mean[None, :, None, None]) / std[None, :, None, None]
