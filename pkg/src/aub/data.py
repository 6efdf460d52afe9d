"""Domain datasets: synthetic generators, CSV ingestion and median splits."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numeric import make_rng


@dataclass
class DomainDataset:
    name: str
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        widths = {a.shape[1] for a in (self.train, self.val, self.test)}
        if len(widths) != 1:
            raise ValueError(f"splits of {self.name!r} disagree on width: {widths}")
        for split in (self.train, self.val, self.test):
            if not np.all(np.isfinite(split)):
                raise ValueError(f"dataset {self.name!r} contains non-finite values")

    @property
    def dim(self) -> int:
        return self.train.shape[1]

    @property
    def n_rows(self) -> int:
        return self.train.shape[0] + self.val.shape[0] + self.test.shape[0]


def split_indices(n: int, rng: np.random.Generator):
    """80/10/10 partition of ``range(n)``: floor(0.8n), floor(0.1n), remainder."""
    perm = rng.permutation(n)
    n_train = int(math.floor(0.8 * n))
    n_val = int(math.floor(0.1 * n))
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


def make_domain(name, x, rng, provenance=None) -> DomainDataset:
    tr, va, te = split_indices(x.shape[0], rng)
    return DomainDataset(name, x[tr], x[va], x[te], dict(provenance or {}))


def gen_two_moons(n: int, noise_sd: float, seed: int):
    """Upper and lower interleaved half circles, ``n`` points each.

    Upper moon: ``(cos t, sin t)``; lower moon: ``(1 - cos t, 0.5 - sin t)``,
    with ``t ~ U(0, pi)`` and isotropic Gaussian noise of sd ``noise_sd``.
    """
    if n < 10:
        raise ValueError("n must be at least 10")
    if noise_sd < 0:
        raise ValueError("noise_sd must be non-negative")
    rng = make_rng(seed)
    t1 = rng.uniform(0.0, math.pi, n)
    t2 = rng.uniform(0.0, math.pi, n)
    upper = np.column_stack([np.cos(t1), np.sin(t1)])
    lower = np.column_stack([1.0 - np.cos(t2), 0.5 - np.sin(t2)])
    if noise_sd > 0:
        upper = upper + noise_sd * rng.standard_normal(upper.shape)
        lower = lower + noise_sd * rng.standard_normal(lower.shape)
    prov = {"generator": "moons", "n": n, "noise_sd": noise_sd, "seed": seed}
    return [
        make_domain("moon_upper", upper, rng, prov),
        make_domain("moon_lower", lower, rng, prov),
    ]


def sample_blobs(n, centers, weights, sd, rng):
    """Draw ``n`` points from an isotropic Gaussian mixture; returns (x, labels)."""
    centers = np.asarray(centers, dtype=np.float64)
    labels = rng.choice(centers.shape[0], size=n, p=np.asarray(weights, dtype=np.float64))
    x = centers[labels] + sd * rng.standard_normal((n, centers.shape[1]))
    return x, labels


def gen_blobs(n: int, n_components: int, box=(-2.0, 2.0), seed: int = 0, sd: float = 0.25, dim: int = 2):
    """Two domains, each from its own equal-weight mixture of isotropic blobs.

    Centers are uniform in ``box`` (per coordinate); ``n`` points per domain.
    The defaults keep the data at roughly unit scale, matching the
    identity-initialized flows and the standard-normal-scale MoG start.
    """
    if n_components < 1:
        raise ValueError("n_components must be positive")
    rng = make_rng(seed)
    weights = np.full(n_components, 1.0 / n_components)
    out = []
    for j in range(2):
        centers = rng.uniform(box[0], box[1], size=(n_components, dim))
        x, _ = sample_blobs(n, centers, weights, sd, rng)
        prov = {
            "generator": "blobs",
            "n": n,
            "n_components": n_components,
            "box": list(box),
            "sd": sd,
            "seed": seed,
            "centers": centers.tolist(),
        }
        out.append(make_domain(f"blobs_{j}", x, rng, prov))
    return out


def gen_gaussians(n: int, means, sds, seed: int):
    """One 1-D Gaussian domain per ``(mean, sd)`` pair, ``n`` points each."""
    rng = make_rng(seed)
    out = []
    for j, (mu, sd) in enumerate(zip(means, sds)):
        x = (mu + sd * rng.standard_normal(n))[:, None]
        out.append(make_domain(f"gauss_{j}", x, rng, {"generator": "gaussians", "mean": mu, "sd": sd, "seed": seed}))
    return out


def gen_tabular(n_rows: int, n_features: int = 6, seed: int = 0) -> np.ndarray:
    """Synthetic stand-in for a UCI table: correlated, skewed, heavy-ish tails.

    Features are nonlinear mixtures of three latent factors plus noise; the
    last columns depend strongly on the others so median splits on them give
    genuinely different domains.
    """
    if n_features < 3:
        raise ValueError("n_features must be at least 3")
    rng = make_rng(seed)
    u = rng.standard_normal((n_rows, 3))
    mix = rng.normal(0.0, 1.0, size=(3, n_features))
    x = u @ mix
    x[:, 0::3] += 0.8 * np.sin(1.5 * u[:, [0]])
    x[:, 1::3] += 0.5 * u[:, [1]] ** 2
    x[:, 2::3] += np.abs(u[:, [2]])
    x = x + 0.3 * rng.standard_t(5, size=x.shape)
    return x


def _parse_row(path, lineno, line, width):
    cells = line.split(",")
    if width is not None and len(cells) != width:
        raise ValueError(f"{path}:{lineno}: expected {width} fields, found {len(cells)}")
    row = []
    for col, cell in enumerate(cells, start=1):
        try:
            v = float(cell)
        except ValueError:
            raise ValueError(f"{path}: non-numeric cell {cell!r} at row {lineno}, column {col}") from None
        if not math.isfinite(v):
            raise ValueError(f"{path}: non-finite cell {cell!r} at row {lineno}, column {col}")
        row.append(v)
    return row


def iter_csv_chunks(path, chunk_rows: int = 4096, has_header: bool = False):
    """Yield ``(header, block)`` pairs of at most ``chunk_rows`` parsed rows.

    Accepts a numeric CSV with no quoting, '.' decimals and LF or CRLF line
    ends.  ``header`` is the list of column names, or None.
    """
    path = Path(path)
    header = None
    width = None
    rows = []
    seen = False
    with path.open(newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if has_header and header is None:
                header = line.split(",")
                width = len(header)
                continue
            if line == "":
                raise ValueError(f"{path}:{lineno}: empty line")
            row = _parse_row(path, lineno, line, width)
            width = len(row)
            rows.append(row)
            if len(rows) == chunk_rows:
                yield header, np.array(rows, dtype=np.float64)
                rows = []
                seen = True
    if rows:
        yield header, np.array(rows, dtype=np.float64)
    elif not seen:
        raise ValueError(f"{path}: empty file")


def load_csv(path, has_header: bool = False, return_header: bool = False):
    """Read a whole numeric CSV into a float64 matrix (see ``iter_csv_chunks``)."""
    header = None
    blocks = []
    for header, block in iter_csv_chunks(path, 65536, has_header):
        blocks.append(block)
    matrix = np.concatenate(blocks)
    if return_header:
        return matrix, header
    return matrix


def format_csv(matrix) -> str:
    """Serialize with shortest round-trip float repr, '\\n' line ends."""
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in np.asarray(matrix))


def save_csv(path, matrix) -> None:
    Path(path).write_text(format_csv(matrix))


def _median_halves(values, rows):
    """Split ``rows`` by ``values[rows]`` against their median; ties alternate."""
    v = values[rows]
    med = np.median(v)
    above = list(rows[v > med])
    below = list(rows[v < med])
    for r in rows[v == med]:
        if len(above) < len(below):
            above.append(r)
        elif len(below) < len(above):
            below.append(r)
        elif (len(above) + len(below)) % 2 == 0:
            above.append(r)
        else:
            below.append(r)
    return np.sort(np.array(above, dtype=np.int64)), np.sort(np.array(below, dtype=np.int64))


@dataclass
class SplitSpec:
    feature_indices: list[int]
    standardize: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 1 <= len(self.feature_indices) <= 4:
            raise ValueError("between 1 and 4 split features are supported")


def median_split(matrix, spec: SplitSpec, name: str = "table", source: str = "") -> list[DomainDataset]:
    """Route rows into ``2**m`` domains by the signs of nested median splits.

    The first split feature halves the whole table at its median; each half is
    then halved at its own median of the next feature, and so on, so domain
    sizes differ by at most one row.  Split features are dropped; each domain
    is split 80/10/10 and optionally z-scored with statistics of the pooled
    training rows.  Domains are ordered ``+...+`` first, ``-...-`` last.
    """
    x = np.asarray(matrix, dtype=np.float64)
    d = x.shape[1]
    feats = [f % d for f in spec.feature_indices]
    if len(set(feats)) != len(feats):
        raise ValueError("split features must be distinct")
    m = len(feats)
    if x.shape[0] < (2 ** m) * 10:
        raise ValueError(f"need at least {(2 ** m) * 10} rows for {2 ** m} domains")
    groups = {"": np.arange(x.shape[0])}
    for f in feats:
        nxt = {}
        for label, rows in groups.items():
            hi, lo = _median_halves(x[:, f], rows)
            nxt[label + "+"] = hi
            nxt[label + "-"] = lo
        groups = nxt
    keep = [c for c in range(d) if c not in feats]
    rng = make_rng(spec.seed)
    domains = []
    for pattern in ("".join(p) for p in itertools.product("+-", repeat=m)):
        rows = groups[pattern]
        if rows.size < 10:
            raise ValueError(f"domain ({pattern}) received only {rows.size} rows")
        prov = {
            "source": source,
            "split_features": feats,
            "pattern": pattern,
            "kept_columns": keep,
            "seed": spec.seed,
            "standardize": spec.standardize,
        }
        domains.append(make_domain(f"{name}({pattern})", x[np.ix_(rows, keep)], rng, prov))
    if spec.standardize:
        pooled = np.concatenate([dd.train for dd in domains])
        mu = pooled.mean(axis=0)
        sd = pooled.std(axis=0)
        sd[sd == 0] = 1.0
        for dd in domains:
            dd.train = (dd.train - mu) / sd
            dd.val = (dd.val - mu) / sd
            dd.test = (dd.test - mu) / sd
            dd.provenance["standardization"] = {"mean": mu.tolist(), "sd": sd.tolist()}
    return domains


def save_bundle(dataset: DomainDataset, directory) -> None:
    """Write ``train.csv``, ``val.csv``, ``test.csv`` and ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split in ("train", "val", "test"):
        save_csv(directory / f"{split}.csv", getattr(dataset, split))
    manifest = {
        "name": dataset.name,
        "dim": dataset.dim,
        "rows": {s: int(getattr(dataset, s).shape[0]) for s in ("train", "val", "test")},
        "provenance": dataset.provenance,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_bundle(directory) -> DomainDataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    splits = {}
    for s in ("train", "val", "test"):
        arr = load_csv(directory / f"{s}.csv")
        splits[s] = arr.reshape(-1, manifest["dim"])
    ds = DomainDataset(manifest["name"], splits["train"], splits["val"], splits["test"], manifest.get("provenance", {}))
    if ds.dim != manifest["dim"]:
        raise ValueError(f"bundle {directory} has dim {ds.dim}, manifest says {manifest['dim']}")
    return ds


def preprocess_power(raw: np.ndarray, seed: int = 42) -> np.ndarray:
    """MAF-style POWER preprocessing of the 8-column raw array.

    Drops global intensity and global reactive power, then adds the small
    uniform dequantization noise MAF uses; returns 6 columns.
    """
    rng = np.random.RandomState(seed)
    data = np.array(raw, dtype=np.float64)
    rng.shuffle(data)
    n = data.shape[0]
    data = np.delete(data, 3, axis=1)
    data = np.delete(data, 1, axis=1)
    noise = np.hstack((
        0.001 * rng.rand(n, 1),
        0.01 * rng.rand(n, 1),
        rng.rand(n, 3),
        np.zeros((n, 1)),
    ))
    return data + noise
