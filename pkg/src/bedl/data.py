"""Dataset loading, splitting, and standardization.

CSV for tabular regression data, IDX (optionally gzipped) for image
classification data. Standardization statistics always come from the
train split only; predictive log-likelihoods are reported in original
target units via the -log(std_y) change-of-variables correction.
"""

from __future__ import annotations

import gzip
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
GZIP_MAGIC = b"\x1f\x8b"


class DataError(Exception):
    """Malformed or unusable input data."""


@dataclass
class Dataset:
    features: np.ndarray  # (N, d) or (N, H, W, C)
    targets: np.ndarray  # (N,) regression floats or integer labels
    task: str  # "regression" | "classification"
    feature_mean: np.ndarray | None = None
    feature_std: np.ndarray | None = None
    target_mean: float | None = None
    target_std: float | None = None
    dropped_columns: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.features) != len(self.targets):
            raise DataError("feature/target length mismatch")

    @property
    def n(self) -> int:
        return len(self.features)

    def subset(self, idx: np.ndarray) -> "Dataset":
        return replace(self, features=self.features[idx], targets=self.targets[idx])


@dataclass(frozen=True)
class SplitPlan:
    split_index: int
    seed: int = 0
    train_fraction: float = 0.9

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ValueError("train fraction must be in (0, 1)")


def load_csv(
    path: str | Path,
    target_column: int = -1,
    delimiter: str = ",",
    task: str = "regression",
) -> Dataset:
    """Parse a numeric CSV with an optional (auto-detected) header row.

    Constant columns are dropped with a warning; a cell that does not
    parse raises DataError with its row and column.
    """
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty file")

    def parse_row(line: str, row_no: int) -> list[float]:
        out = []
        for col_no, cell in enumerate(line.split(delimiter)):
            try:
                out.append(float(cell))
            except ValueError:
                raise DataError(
                    f"{path}: unparseable cell at row {row_no}, column {col_no}: {cell!r}"
                ) from None
        return out

    start = 0
    try:
        first = parse_row(lines[0], 0)
    except DataError:
        start = 1  # header row
        first = None
    rows = [first] if first is not None else []
    for i, ln in enumerate(lines[start:], start=start):
        if i == 0 and first is not None:
            continue
        rows.append(parse_row(ln, i))
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise DataError(f"{path}: ragged rows with widths {sorted(widths)}")
    mat = np.asarray(rows, dtype=np.float64)
    if np.any(~np.isfinite(mat)):
        raise DataError(f"{path}: non-finite values in data")

    tcol = target_column % mat.shape[1]
    y = mat[:, tcol]
    x = np.delete(mat, tcol, axis=1)
    const = np.flatnonzero(x.std(axis=0) == 0.0)
    if const.size:
        warnings.warn(f"{path}: dropping constant feature columns {const.tolist()}")
        x = np.delete(x, const, axis=1)
    if task == "classification":
        y = y.astype(np.int64)
    return Dataset(x, y, task=task, dropped_columns=const.tolist())


def _read_maybe_gzip(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == GZIP_MAGIC:
        return gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expect_magic: int, path: Path) -> np.ndarray:
    if len(raw) < 4:
        raise DataError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expect_magic:
        raise DataError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated IDX dimension block")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) != header + count:
        raise DataError(f"{path}: IDX payload size mismatch ({len(raw) - header} vs {count})")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path: str | Path, labels_path: str | Path) -> Dataset:
    """Load an IDX image/label pair (MNIST-style, optionally gzipped);
    pixels scaled to [0, 1]."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    images = _parse_idx(_read_maybe_gzip(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_maybe_gzip(labels_path), IDX_LABELS_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataError("image/label count mismatch")
    x = images.astype(np.float64) / 255.0
    return Dataset(x[..., None], labels.astype(np.int64), task="classification")


def make_splits(n: int, plan: SplitPlan) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic shuffled split: first ceil(train_fraction * n)
    indices train, rest test."""
    if n < 10:
        raise ValueError("need at least 10 data points to split")
    rng = np.random.default_rng([plan.seed, plan.split_index])
    perm = rng.permutation(n)
    n_train = int(np.ceil(plan.train_fraction * n))
    return perm[:n_train], perm[n_train:]


@dataclass
class StandardizeRecord:
    feature_mean: np.ndarray
    feature_std: np.ndarray
    target_mean: float | None
    target_std: float | None
    kept_columns: np.ndarray

    def inverse_targets(self, y_std: np.ndarray) -> np.ndarray:
        if self.target_std is None:
            return y_std
        return y_std * self.target_std + self.target_mean

    @property
    def loglik_correction(self) -> float:
        """Additive per-datum correction taking standardized-unit
        log-likelihoods back to original target units."""
        if self.target_std is None:
            return 0.0
        return -float(np.log(self.target_std))


def standardize(ds: Dataset, train_idx: np.ndarray) -> tuple[Dataset, StandardizeRecord]:
    """Z-score features (and regression targets) by train-split statistics.

    Feature columns with zero train standard deviation are dropped.
    """
    x = ds.features.astype(np.float64)
    if x.ndim != 2:
        raise DataError("standardize expects flat (N, d) features")
    mu = x[train_idx].mean(axis=0)
    sd = x[train_idx].std(axis=0)
    keep = np.flatnonzero(sd > 0.0)
    if keep.size < x.shape[1]:
        warnings.warn(f"dropping {x.shape[1] - keep.size} zero-variance train columns")
    xs = (x[:, keep] - mu[keep]) / sd[keep]

    if ds.task == "regression":
        y = ds.targets.astype(np.float64)
        ym = float(y[train_idx].mean())
        ys = float(y[train_idx].std())
        if ys == 0.0:
            raise DataError("constant regression target on train split")
        y_out = (y - ym) / ys
        rec = StandardizeRecord(mu[keep], sd[keep], ym, ys, keep)
    else:
        y_out = ds.targets
        rec = StandardizeRecord(mu[keep], sd[keep], None, None, keep)

    out = Dataset(
        xs,
        y_out,
        task=ds.task,
        feature_mean=mu[keep],
        feature_std=sd[keep],
        target_mean=rec.target_mean,
        target_std=rec.target_std,
    )
    return out, rec


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise DataError("label outside class range")
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out
