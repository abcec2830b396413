"""Fault-run ingestion, preprocessing, windowing, and synthesis.

Raw runs are delimited text: a header row naming every column, metadata
columns ``fault_id`` and ``run_id`` (plus an optional ``split``), and one
row per time step. Windowing slices each run into non-overlapping 20-row
images whose columns are process variables, so a row is one instant and a
column is one variable's trajectory.
"""

from __future__ import annotations

import csv
import json
import struct
import warnings
from dataclasses import dataclass, replace
from io import BytesIO
from pathlib import Path

import numpy as np

from .tensor import Tensor

__all__ = [
    "SimulationRecord",
    "ImageDataset",
    "DEFAULT_DROP",
    "DEFAULT_PREFAULT_TRIM",
    "ingest",
    "write_runs",
    "preprocess",
    "windowize",
    "normalize",
    "denormalize",
    "correlation_matrix",
    "synth_faults",
    "tep_variable_names",
    "save_archive",
    "load_archive",
]

# compressor recycle valve and stripper steam valve, always near-constant
DEFAULT_DROP = ("XMV(5)", "XMV(9)")

# rows recorded before the fault is introduced, per split
DEFAULT_PREFAULT_TRIM = {"train": 20, "test": 160}

_META_COLUMNS = ("fault_id", "run_id", "split")


@dataclass
class SimulationRecord:
    fault_id: int
    run_id: int
    split: str                      # "train" or "test"
    data: np.ndarray                # (time, variables) float64
    variable_names: tuple[str, ...]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError(f"record data must be 2-D, got shape {self.data.shape}")
        if self.data.shape[1] != len(self.variable_names):
            raise ValueError(
                f"{self.data.shape[1]} columns but {len(self.variable_names)} names")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")


@dataclass
class ImageDataset:
    images: Tensor                  # (N, 1, window, variables) float32
    labels: np.ndarray              # (N,) int64 class indices
    class_ids: tuple[int, ...]      # class index -> original fault id
    split: str
    variable_names: tuple[str, ...] | None = None
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None
    stats_mode: str | None = None   # "per_variable" or "global"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != len(self.labels):
            raise ValueError("image count and label count differ")
        if len(self.labels) and (self.labels.min() < 0
                                 or self.labels.max() >= len(self.class_ids)):
            raise ValueError("labels out of range for the class list")

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    def __len__(self) -> int:
        return len(self.labels)


# ---- ingestion -----------------------------------------------------------------


def _parse_file(path: Path, groups: dict, order: list):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file, expected a header row")
        header = [h.strip() for h in header]
        for required in ("fault_id", "run_id"):
            if required not in header:
                raise ValueError(f"{path}: header is missing the {required} column")
        meta_idx = {name: header.index(name) for name in _META_COLUMNS
                    if name in header}
        var_names = tuple(h for h in header if h not in _META_COLUMNS)
        var_idx = [i for i, h in enumerate(header) if h not in _META_COLUMNS]
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(
                    f"{path}:{line_no}: expected {len(header)} columns, got {len(row)}")
            try:
                fault = int(row[meta_idx["fault_id"]])
                run = int(row[meta_idx["run_id"]])
                values = [float(row[i]) for i in var_idx]
            except ValueError as exc:
                raise ValueError(f"{path}:{line_no}: {exc}") from None
            split = row[meta_idx["split"]].strip() if "split" in meta_idx else None
            key = (fault, run, split)
            if key not in groups:
                groups[key] = (var_names, [])
                order.append(key)
            names, rows = groups[key]
            if names != var_names:
                raise ValueError(
                    f"{path}:{line_no}: run {run} of fault {fault} previously had "
                    f"different variable names")
            rows.append(values)


def ingest(path, train_runs: int = 40) -> list[SimulationRecord]:
    """Read every ``*.csv`` under a directory into per-run records.

    Rows may appear in any file; they are grouped by (fault_id, run_id).
    If no ``split`` column is present, the first ``train_runs`` runs of
    each fault (by ascending run_id) are the training split.
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"{root} is not a directory")
    groups: dict = {}
    order: list = []
    for file in sorted(root.glob("*.csv")):
        _parse_file(file, groups, order)

    records = []
    # rank run ids within each fault for the default split rule
    runs_by_fault: dict[int, list[int]] = {}
    for fault, run, _ in order:
        runs_by_fault.setdefault(fault, [])
        if run not in runs_by_fault[fault]:
            runs_by_fault[fault].append(run)
    for key in order:
        fault, run, split = key
        names, rows = groups[key]
        if split is None:
            rank = sorted(runs_by_fault[fault]).index(run)
            split = "train" if rank < train_runs else "test"
        records.append(SimulationRecord(
            fault_id=fault, run_id=run, split=split,
            data=np.array(rows, dtype=np.float64), variable_names=names))
    return records


def write_runs(records: list[SimulationRecord], directory,
               include_split: bool = True) -> list[Path]:
    """Write one CSV per record; the inverse of ingest for round trips."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    written = []
    for rec in records:
        name = f"fault{rec.fault_id:02d}_run{rec.run_id:03d}.csv"
        out = root / name
        with open(out, "w", newline="") as fh:
            writer = csv.writer(fh)
            header = ["fault_id", "run_id"]
            if include_split:
                header.append("split")
            writer.writerow(header + list(rec.variable_names))
            for row in rec.data:
                lead = [rec.fault_id, rec.run_id]
                if include_split:
                    lead.append(rec.split)
                writer.writerow(lead + [repr(float(v)) for v in row])
        written.append(out)
    return written


# ---- preprocessing --------------------------------------------------------------


def preprocess(records: list[SimulationRecord],
               drop: tuple[str, ...] = DEFAULT_DROP,
               prefault_trim: dict[str, int] | None = None) -> list[SimulationRecord]:
    """Drop named variables and remove each run's pre-fault rows."""
    trim = dict(DEFAULT_PREFAULT_TRIM if prefault_trim is None else prefault_trim)
    out = []
    for rec in records:
        names = rec.variable_names
        missing = [d for d in drop if d not in names]
        if missing:
            raise ValueError(
                f"cannot drop {missing}: run {rec.run_id} of fault {rec.fault_id} "
                f"has variables {list(names)[:6]}...")
        keep = [i for i, n in enumerate(names) if n not in drop]
        cut = trim.get(rec.split, 0)
        out.append(replace(
            rec,
            data=rec.data[cut:, keep],
            variable_names=tuple(names[i] for i in keep)))
    return out


def windowize(records: list[SimulationRecord], window: int = 20,
              stride: int = 20) -> dict[str, ImageDataset]:
    """Slice each run into (window × variables) images, one dataset per split.

    Windows never span run boundaries. Labels are 0-based class indices in
    ascending fault_id order; the mapping back is ``class_ids``.
    """
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    if not records:
        raise ValueError("no records to windowize")
    names = records[0].variable_names
    for rec in records:
        if rec.variable_names != names:
            raise ValueError("records disagree on variable names; preprocess first")
    class_ids = tuple(sorted({rec.fault_id for rec in records}))
    label_of = {fid: i for i, fid in enumerate(class_ids)}

    per_split: dict[str, tuple[list, list]] = {}
    for rec in records:
        t = rec.data.shape[0]
        if t < window:
            warnings.warn(
                f"run {rec.run_id} of fault {rec.fault_id} has {t} rows, "
                f"shorter than the {window}-row window; skipped")
            continue
        chunks, labels = per_split.setdefault(rec.split, ([], []))
        for start in range(0, t - window + 1, stride):
            chunks.append(rec.data[start:start + window])
            labels.append(label_of[rec.fault_id])

    datasets = {}
    for split, (chunks, labels) in per_split.items():
        stack = np.stack(chunks).astype(np.float32)[:, None, :, :]
        datasets[split] = ImageDataset(
            images=Tensor(stack), labels=np.array(labels, dtype=np.int64),
            class_ids=class_ids, split=split, variable_names=names)
    return datasets


# ---- normalization --------------------------------------------------------------


def normalize(train: ImageDataset, test: ImageDataset | None = None,
              mode: str = "per_variable", epsilon: float = 1e-8):
    """Standardize with statistics from the training images only.

    Per-variable mode keeps one mean/std per image column; global mode
    uses a single scalar pair. Returns new datasets carrying the stats.
    """
    if mode not in ("per_variable", "global"):
        raise ValueError(f"unknown stats mode {mode!r}")
    if train.norm_mean is not None:
        raise ValueError("dataset is already normalized; refusing to re-apply")
    if len(train) == 0:
        raise ValueError("cannot compute statistics from an empty training set")
    x = train.images.data.astype(np.float64)
    if mode == "per_variable":
        mean = x.mean(axis=(0, 1, 2))
        std = x.std(axis=(0, 1, 2))
    else:
        mean = np.array([x.mean()])
        std = np.array([x.std()])
    floored = std < epsilon
    if floored.any():
        warnings.warn(
            f"{int(floored.sum())} constant variable(s); std floored to {epsilon}")
        std = np.where(floored, epsilon, std)

    def apply(ds: ImageDataset) -> ImageDataset:
        if ds.norm_mean is not None:
            raise ValueError("dataset is already normalized; refusing to re-apply")
        scaled = (ds.images.data.astype(np.float64) - mean) / std
        return replace(ds, images=Tensor(scaled.astype(np.float32)),
                       norm_mean=mean.copy(), norm_std=std.copy(), stats_mode=mode)

    if test is None:
        return apply(train)
    return apply(train), apply(test)


def denormalize(ds: ImageDataset) -> ImageDataset:
    """Undo normalize using the statistics the dataset carries."""
    if ds.norm_mean is None:
        raise ValueError("dataset carries no normalization statistics")
    raw = ds.images.data.astype(np.float64) * ds.norm_std + ds.norm_mean
    return replace(ds, images=Tensor(raw.astype(np.float32)),
                   norm_mean=None, norm_std=None, stats_mode=None)


# ---- correlation map -------------------------------------------------------------


def correlation_matrix(records: list[SimulationRecord]) -> np.ndarray:
    """Pearson correlation of every variable pair across the given runs."""
    if not records:
        raise ValueError("no records")
    names = records[0].variable_names
    for rec in records:
        if rec.variable_names != names:
            raise ValueError("records disagree on variable names")
    x = np.concatenate([rec.data for rec in records], axis=0).astype(np.float64)
    if x.shape[0] < 2:
        raise ValueError("need at least 2 samples for correlation")
    constant = x.max(axis=0) == x.min(axis=0)
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc
    var = np.diag(cov).copy()
    if constant.any():
        warnings.warn(
            f"{int(constant.sum())} constant variable(s); their correlations are 0")
    scale = np.sqrt(np.where(constant, 1.0, var))
    corr = cov / np.outer(scale, scale)
    corr[constant, :] = 0.0
    corr[:, constant] = 0.0
    corr = np.clip((corr + corr.T) / 2.0, -1.0, 1.0)
    idx = np.where(~constant)[0]
    corr[idx, idx] = 1.0
    return corr


# ---- synthetic generator ----------------------------------------------------------


def tep_variable_names() -> tuple[str, ...]:
    """41 measured + 11 manipulated variable names, in recording order."""
    return tuple([f"XMEAS({i})" for i in range(1, 42)]
                 + [f"XMV({i})" for i in range(1, 12)])


def synth_faults(classes: int, runs_per_class: int, samples_per_run: int,
                 variables: int, seed: int = 0, test_runs: int | None = None,
                 test_len: int | None = None) -> list[SimulationRecord]:
    """Generate stationary multivariate runs with class-coded structure.

    Classes up to the last two get a +1.0 mean shift on their own block of
    middle columns, detectable from any single column. With three or more
    classes, the final two classes share identical per-column statistics
    and differ only in the SIGN of the correlation between the first and
    last ~tenth of the columns, so nothing local tells them apart.
    ``runs_per_class`` runs of ``samples_per_run`` rows go to the training
    split; ``test_runs`` (default: ceil(runs/4)) go to test.
    """
    if min(classes, runs_per_class, samples_per_run, variables) < 1:
        raise ValueError("all synth counts must be >= 1")
    if test_runs is None:
        test_runs = max(1, (runs_per_class + 3) // 4)
    if test_len is None:
        test_len = samples_per_run
    group = max(1, variables // 10)
    if classes >= 3 and variables < 3 * group + classes - 2:
        raise ValueError(f"{variables} variables is too few for {classes} classes")
    rng = np.random.default_rng(seed)
    pair_classes = {classes - 2: 1.0, classes - 1: -1.0} if classes >= 3 else {}
    n_shift = classes - len(pair_classes)
    mid_lo, mid_hi = group, variables - group
    block = max(1, (mid_hi - mid_lo) // max(n_shift, 1))

    if variables == len(tep_variable_names()):
        names = tep_variable_names()
    else:
        names = tuple(f"V{i:03d}" for i in range(1, variables + 1))

    records = []
    for cls in range(classes):
        fault_id = cls + 1
        for run in range(runs_per_class + test_runs):
            split = "train" if run < runs_per_class else "test"
            length = samples_per_run if split == "train" else test_len
            x = rng.normal(0.0, 0.5, size=(length, variables))
            if cls in pair_classes:
                latent = rng.normal(0.0, 1.0, size=length)
                x[:, :group] += latent[:, None]
                x[:, variables - group:] += pair_classes[cls] * latent[:, None]
            else:
                lo = min(mid_lo + cls * block, variables - 1)
                hi = min(lo + block, variables)
                x[:, lo:hi] += 1.0
            records.append(SimulationRecord(
                fault_id=fault_id, run_id=run + 1, split=split,
                data=x, variable_names=names))
    return records


# ---- archive format ---------------------------------------------------------------

_MAGIC = b"LGD1"
_VERSION = 1


def save_archive(path, splits: dict[str, ImageDataset],
                 provenance: dict | None = None) -> None:
    """Write datasets plus provenance to one binary file.

    Layout: magic, version, JSON metadata block (stats, labels live here),
    then each split's image tensor in metadata order. Serialization is
    canonical (sorted keys, fixed separators) so equal inputs produce
    byte-identical archives.
    """
    meta: dict = {"version": _VERSION, "provenance": provenance or {}, "splits": {}}
    for name in sorted(splits):
        ds = splits[name]
        meta["splits"][name] = {
            "split": ds.split,
            "labels": ds.labels.tolist(),
            "class_ids": list(ds.class_ids),
            "variable_names": list(ds.variable_names) if ds.variable_names else None,
            "stats_mode": ds.stats_mode,
            "norm_mean": ds.norm_mean.tolist() if ds.norm_mean is not None else None,
            "norm_std": ds.norm_std.tolist() if ds.norm_std is not None else None,
        }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", _VERSION))
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    for name in sorted(splits):
        splits[name].images.write_into(buf)
    Path(path).write_bytes(buf.getvalue())


def load_archive(path) -> tuple[dict[str, ImageDataset], dict]:
    """Read an archive back; returns the split datasets and provenance."""
    raw = Path(path).read_bytes()
    buf = BytesIO(raw)

    def take(n, what):
        chunk = buf.read(n)
        if len(chunk) != n:
            raise ValueError(f"truncated archive: missing {what}")
        return chunk

    if take(4, "magic") != _MAGIC:
        raise ValueError(f"{path} is not a dataset archive")
    version = struct.unpack("<I", take(4, "version"))[0]
    if version != _VERSION:
        raise ValueError(f"unsupported archive version {version}")
    blob_len = struct.unpack("<Q", take(8, "metadata length"))[0]
    meta = json.loads(take(blob_len, "metadata").decode("utf-8"))
    splits = {}
    for name in sorted(meta["splits"]):
        entry = meta["splits"][name]
        images = Tensor.read_from(buf)
        mean = entry["norm_mean"]
        std = entry["norm_std"]
        splits[name] = ImageDataset(
            images=images,
            labels=np.array(entry["labels"], dtype=np.int64),
            class_ids=tuple(entry["class_ids"]),
            split=entry["split"],
            variable_names=(tuple(entry["variable_names"])
                            if entry["variable_names"] else None),
            norm_mean=np.array(mean, dtype=np.float64) if mean is not None else None,
            norm_std=np.array(std, dtype=np.float64) if std is not None else None,
            stats_mode=entry["stats_mode"],
        )
    if buf.read(1):
        raise ValueError("trailing bytes after archive payload")
    return splits, meta["provenance"]
