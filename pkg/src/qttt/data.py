"""Synthetic binary-classification datasets, corruption transforms, and IO.

Five families, 300 samples each by default, exactly class-balanced, split
4:1 into train/test by a seeded permutation.  Exact generator recipes:

  linearly-separable  x ~ Unif(-1,1)^d labeled by a random unit hyperplane,
                      rejecting points with margin < 0.1.
  hidden-manifold     latent z ~ N(0, I_3) mapped through x = tanh(A z) with
                      a fixed random A, labeled by a latent hyperplane.
  two-curves          one random two-harmonic Fourier curve per class,
                      sampled at t ~ Unif(0,1) plus N(0, 0.1^2) feature noise.
  hyperplanes         labels = XOR of the signs of two random affine
                      hyperplanes on x ~ Unif(-1,1)^d.
  bars-and-stripes    +-1 pixel grids with constant rows (bars) or constant
                      columns (stripes), non-constant patterns only, flattened
                      row-major, zero-padded to d_x, plus N(0, 0.2^2) jitter.
                      Needs a grid of at least 2x2, so d_x >= 4.

Corruptions follow the four test-time transforms exactly: brightness is a
multiplicative factor, fog blends each sample with its own feature mean,
snow adds Unif(0,1) noise to each feature independently with probability p,
and gaussian adds level * N(0,1).  Corruption at level 0 (factor 1) returns
the input bit-for-bit.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FAMILIES = (
    "linearly-separable",
    "hidden-manifold",
    "two-curves",
    "hyperplanes",
    "bars-and-stripes",
)

CORRUPTION_KINDS = ("brightness", "fog", "snow", "gaussian")

DEFAULT_N_SAMPLES = 300
TRAIN_FRACTION = 0.8


class DatasetIntegrityError(ValueError):
    """Checksum or schema mismatch while loading a saved dataset."""


@dataclass
class Dataset:
    name: str
    features: np.ndarray       # (N, d_x)
    labels: np.ndarray         # (N, C) one-hot
    train_idx: np.ndarray
    test_idx: np.ndarray
    seed: int

    @property
    def d_x(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def train_features(self) -> np.ndarray:
        return self.features[self.train_idx]

    @property
    def train_labels(self) -> np.ndarray:
        return self.labels[self.train_idx]

    @property
    def test_features(self) -> np.ndarray:
        return self.features[self.test_idx]

    @property
    def test_labels(self) -> np.ndarray:
        return self.labels[self.test_idx]


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    level: float
    seed: int = 0
    snow_support: tuple[float, float] = (0.0, 1.0)  # uniform support of snow noise

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption {self.kind!r}; pick from {CORRUPTION_KINDS}")
        if self.kind == "fog" and not 0.0 <= self.level <= 1.0:
            raise ValueError("fog intensity must be in [0, 1]")
        if self.kind == "snow" and not 0.0 <= self.level <= 1.0:
            raise ValueError("snow probability must be in [0, 1]")
        if self.kind == "gaussian" and self.level < 0:
            raise ValueError("gaussian noise level must be >= 0")
        if self.snow_support[1] <= self.snow_support[0]:
            raise ValueError("snow support must be an increasing interval")


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def _stratified(draw, rng, n_samples: int, max_tries: int = 2_000_000):
    """Fill both classes to n_samples/2 each from a (x, label) sampler."""
    targets = [n_samples - n_samples // 2, n_samples // 2]
    buckets: list[list[np.ndarray]] = [[], []]
    for _ in range(max_tries):
        x, label = draw(rng)
        if len(buckets[label]) < targets[label]:
            buckets[label].append(x)
        if len(buckets[0]) == targets[0] and len(buckets[1]) == targets[1]:
            feats = np.array(buckets[0] + buckets[1])
            labels = np.array([0] * targets[0] + [1] * targets[1])
            return feats, labels
    raise RuntimeError("stratified sampling did not converge")


def _linearly_separable(d_x: int, rng, n: int):
    w = rng.normal(size=d_x)
    w /= np.linalg.norm(w)

    def draw(rng):
        while True:
            x = rng.uniform(-1.0, 1.0, d_x)
            m = float(w @ x)
            if abs(m) >= 0.1:
                return x, int(m > 0)

    return _stratified(draw, rng, n)


def _hidden_manifold(d_x: int, rng, n: int, m_latent: int = 3):
    a = rng.normal(size=(d_x, m_latent)) / np.sqrt(m_latent)
    w = rng.normal(size=m_latent)

    def draw(rng):
        z = rng.normal(size=m_latent)
        return np.tanh(a @ z), int(w @ z > 0)

    return _stratified(draw, rng, n)


def _two_curves(d_x: int, rng, n: int):
    coeff = rng.normal(size=(2, 2, 2, d_x))  # (class, harmonic, cos/sin, dim)
    coeff /= np.array([1.0, 2.0])[None, :, None, None]

    def curve(c: int, t: float) -> np.ndarray:
        out = np.zeros(d_x)
        for k in (1, 2):
            out += coeff[c, k - 1, 0] * np.cos(2 * np.pi * k * t)
            out += coeff[c, k - 1, 1] * np.sin(2 * np.pi * k * t)
        return out

    half = [n - n // 2, n // 2]
    feats, labels = [], []
    for c in (0, 1):
        for _ in range(half[c]):
            t = rng.random()
            feats.append(curve(c, t) + 0.1 * rng.normal(size=d_x))
            labels.append(c)
    return np.array(feats), np.array(labels)


def _hyperplanes(d_x: int, rng, n: int):
    w1 = rng.normal(size=d_x)
    w2 = rng.normal(size=d_x)
    b1, b2 = rng.uniform(-0.3, 0.3, 2)

    def draw(rng):
        x = rng.uniform(-1.0, 1.0, d_x)
        label = int((w1 @ x + b1 > 0) != (w2 @ x + b2 > 0))
        return x, label

    return _stratified(draw, rng, n)


def bars_and_stripes_grid(d_x: int) -> tuple[int, int]:
    """Largest rows x cols grid with rows, cols >= 2 fitting in d_x (exact when possible)."""
    best = None
    for cells in range(d_x, 3, -1):
        for r in range(2, int(np.sqrt(cells)) + 1):
            if cells % r == 0 and cells // r >= 2:
                best = (r, cells // r)
                break
        if best:
            return best
    raise ValueError(
        f"bars-and-stripes needs d_x >= 4 for a 2x2 grid, got {d_x}; valid dims: 4, 5, 6, ..."
    )


def _bars_and_stripes(d_x: int, rng, n: int):
    rows, cols = bars_and_stripes_grid(d_x)

    def draw(rng):
        label = int(rng.integers(2))  # 0 = bars (constant rows), 1 = stripes
        k = rows if label == 0 else cols
        while True:
            v = rng.integers(0, 2, k) * 2 - 1
            if not (np.all(v == 1) or np.all(v == -1)):
                break
        grid = np.tile(v[:, None], (1, cols)) if label == 0 else np.tile(v[None, :], (rows, 1))
        x = np.zeros(d_x)
        x[: rows * cols] = grid.ravel()
        return x + 0.2 * rng.normal(size=d_x), label

    return _stratified(draw, rng, n)


_GENERATORS = {
    "linearly-separable": _linearly_separable,
    "hidden-manifold": _hidden_manifold,
    "two-curves": _two_curves,
    "hyperplanes": _hyperplanes,
    "bars-and-stripes": _bars_and_stripes,
}


def generate(name: str, d_x: int, seed: int, n_samples: int = DEFAULT_N_SAMPLES) -> Dataset:
    if name not in _GENERATORS:
        raise ValueError(f"unknown dataset family {name!r}; pick from {FAMILIES}")
    if d_x < 1:
        raise ValueError("d_x must be >= 1")
    rng = np.random.default_rng(seed)
    features, classes = _GENERATORS[name](d_x, rng, n_samples)
    zero_rows = ~features.any(axis=1)
    features[zero_rows, 0] += 1e-12
    labels = np.zeros((n_samples, 2))
    labels[np.arange(n_samples), classes] = 1.0
    perm = rng.permutation(n_samples)
    n_train = int(round(TRAIN_FRACTION * n_samples))
    return Dataset(
        name=name,
        features=features,
        labels=labels,
        train_idx=perm[:n_train],
        test_idx=perm[n_train:],
        seed=seed,
    )


# ---------------------------------------------------------------------------
# corruptions
# ---------------------------------------------------------------------------

def corrupt(features: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    """Apply one corruption; the input matrix is never modified."""
    x = np.asarray(features, dtype=np.float64)
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "brightness":
        out = x.copy() if spec.level == 1.0 else x * spec.level
    elif spec.kind == "fog":
        if spec.level == 0.0:
            out = x.copy()
        else:
            mean = x.mean(axis=1, keepdims=True)
            out = (1.0 - spec.level) * x + spec.level * mean
    elif spec.kind == "snow":
        if spec.level == 0.0:
            out = x.copy()
        else:
            mask = rng.random(x.shape) < spec.level
            lo, hi = spec.snow_support
            out = x + mask * (lo + (hi - lo) * rng.random(x.shape))
    elif spec.kind == "gaussian":
        if spec.level == 0.0:
            out = x.copy()
        else:
            out = x + spec.level * rng.standard_normal(x.shape)
    else:  # unreachable; CorruptionSpec validates
        raise ValueError(spec.kind)
    zero_rows = ~out.any(axis=1)
    out[zero_rows, 0] += 1e-12
    return out


# ---------------------------------------------------------------------------
# serialization: features CSV + JSON sidecar with checksum
# ---------------------------------------------------------------------------

def _sidecar_path(csv_path: Path) -> Path:
    return csv_path.with_suffix(".json")


def save(dataset: Dataset, csv_path: str | Path) -> Path:
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    d = dataset.d_x
    lines = [",".join([f"f{i}" for i in range(d)] + ["label"])]
    classes = np.argmax(dataset.labels, axis=1)
    for row, c in zip(dataset.features, classes):
        lines.append(",".join(repr(float(v)) for v in row) + f",{int(c)}")
    blob = ("\n".join(lines) + "\n").encode()
    csv_path.write_bytes(blob)
    meta = {
        "version": 1,
        "name": dataset.name,
        "seed": dataset.seed,
        "d_x": d,
        "n_classes": dataset.n_classes,
        "n_samples": int(dataset.features.shape[0]),
        "train_idx": dataset.train_idx.tolist(),
        "test_idx": dataset.test_idx.tolist(),
        "csv_sha256": hashlib.sha256(blob).hexdigest(),
    }
    _sidecar_path(csv_path).write_text(json.dumps(meta, indent=1))
    return csv_path


def load(csv_path: str | Path) -> Dataset:
    csv_path = Path(csv_path)
    meta = json.loads(_sidecar_path(csv_path).read_text())
    if meta.get("version") != 1:
        raise DatasetIntegrityError(f"unsupported dataset version {meta.get('version')!r}")
    blob = csv_path.read_bytes()
    digest = hashlib.sha256(blob).hexdigest()
    if digest != meta["csv_sha256"]:
        raise DatasetIntegrityError(
            f"checksum mismatch for {csv_path}: {digest} != {meta['csv_sha256']}"
        )
    lines = blob.decode().strip().split("\n")
    header = lines[0].split(",")
    if len(header) - 1 != meta["d_x"]:
        raise DatasetIntegrityError(
            f"CSV has {len(header) - 1} features but metadata says d_x={meta['d_x']}"
        )
    features, classes = [], []
    for line in lines[1:]:
        parts = line.split(",")
        features.append([float(v) for v in parts[:-1]])
        classes.append(int(parts[-1]))
    features = np.array(features)
    if features.shape[0] != meta["n_samples"]:
        raise DatasetIntegrityError("sample count mismatch")
    labels = np.zeros((features.shape[0], meta["n_classes"]))
    labels[np.arange(features.shape[0]), classes] = 1.0
    return Dataset(
        name=meta["name"],
        features=features,
        labels=labels,
        train_idx=np.array(meta["train_idx"], dtype=np.int64),
        test_idx=np.array(meta["test_idx"], dtype=np.int64),
        seed=meta["seed"],
    )
