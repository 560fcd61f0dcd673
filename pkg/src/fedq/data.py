"""Data ingestion, synthetic mixtures, clustering, and environment partitioning.

A dataset is loaded (or generated), standardized once globally, clustered,
and then distributed over T environments by a per-cluster Polya urn, which
realizes a Dirichlet-multinomial posterior update sample by sample. Each
environment's pool is finally split into train and test rows.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigInvalid,
    EmptyCluster,
    EmptyDataset,
    FileUnreadable,
    InvalidSpec,
    SchemaMismatch,
    TooFewSamples,
)
from .seeding import split_seed

# Columns whose population stddev falls below this are treated as constant
# and dropped during standardization.
_STD_TOL = 1e-12


@dataclass
class Dataset:
    """Standardized feature matrix with binary labels.

    means/stds record the pre-standardization statistics of the kept
    columns, so every feature has mean 0 and variance 1 over the loaded rows.
    """

    X: np.ndarray                 # (n, d) float64
    y: np.ndarray                 # (n,) int, values in {0, 1}
    feature_names: list[str]
    means: np.ndarray             # (d,)
    stds: np.ndarray              # (d,)
    rejected_rows: int = 0

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


@dataclass
class EnvironmentShard:
    """One environment's local train/test rows plus their dataset row ids."""

    env_id: int
    train_ids: np.ndarray
    test_ids: np.ndarray
    train_X: np.ndarray
    train_y: np.ndarray
    test_X: np.ndarray
    test_y: np.ndarray
    repaired: bool = False

    @property
    def n_t(self) -> int:
        return self.train_X.shape[0]


@dataclass
class PartitionConfig:
    num_environments: int = 100
    num_clusters: int = 2
    dirichlet_alpha: float = 0.4
    train_fraction: float = 0.8
    seed: int = 0

    def validate(self) -> None:
        if self.num_environments < 1:
            raise ConfigInvalid("num_environments must be >= 1")
        if self.num_clusters < 1:
            raise ConfigInvalid("num_clusters must be >= 1")
        if self.dirichlet_alpha <= 0:
            raise ConfigInvalid("dirichlet_alpha must be > 0")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigInvalid("train_fraction must be in (0, 1)")


def load_schema(path: str) -> dict:
    """Read a column schema: label column, label value map, column roles."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            schema = json.load(fh)
    except OSError as exc:
        raise FileUnreadable(f"cannot read schema file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaMismatch(f"schema file {path} is not valid JSON: {exc}") from exc
    return validate_schema(schema)


def validate_schema(schema: dict) -> dict:
    if not isinstance(schema, dict):
        raise SchemaMismatch("schema must be a JSON object")
    if "label" not in schema or not isinstance(schema["label"], str):
        raise SchemaMismatch("schema needs a 'label' column name")
    label_map = schema.get("label_map")
    if not isinstance(label_map, dict) or not label_map:
        raise SchemaMismatch("schema needs a non-empty 'label_map'")
    for value in label_map.values():
        if value not in (0, 1):
            raise SchemaMismatch("label_map values must be 0 or 1")
    numeric = schema.get("numeric", [])
    categorical = schema.get("categorical", [])
    if not isinstance(numeric, list) or not isinstance(categorical, list):
        raise SchemaMismatch("'numeric' and 'categorical' must be lists")
    if not numeric and not categorical:
        raise SchemaMismatch("schema declares no feature columns")
    return {"label": schema["label"], "label_map": dict(label_map),
            "numeric": list(numeric), "categorical": list(categorical)}


def _standardize(raw: np.ndarray, names: list[str]) -> tuple[np.ndarray, list[str], np.ndarray, np.ndarray]:
    means = raw.mean(axis=0)
    stds = raw.std(axis=0)  # population stddev
    keep = stds > _STD_TOL
    if not np.any(keep):
        raise EmptyDataset("every feature column is constant")
    kept_names = [name for name, k in zip(names, keep) if k]
    X = (raw[:, keep] - means[keep]) / stds[keep]
    return X, kept_names, means[keep], stds[keep]


def load_dataset(path: str, schema: dict, subsample_rows: int | None = None,
                 seed: int = 0) -> Dataset:
    """Load a delimited text file into a standardized Dataset.

    Rows with unmappable labels or unparseable numerics are rejected and
    counted. Categorical columns are one-hot encoded over the values seen
    in the loaded rows; constant columns are dropped. When subsample_rows
    is set, a seeded reservoir keeps a uniform subsample while streaming.
    """
    schema = validate_schema(schema)
    label_col = schema["label"]
    label_map = {str(k): int(v) for k, v in schema["label_map"].items()}
    numeric_cols = schema["numeric"]
    cat_cols = schema["categorical"]

    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise FileUnreadable(f"cannot read dataset file {path}: {exc}") from exc

    rejected = 0
    kept: list[tuple[list[float], list[str], int]] = []
    rng = np.random.default_rng(split_seed(seed, "reservoir"))
    seen = 0
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaMismatch(f"{path} has no header row")
        missing = [c for c in [label_col, *numeric_cols, *cat_cols]
                   if c not in reader.fieldnames]
        if missing:
            raise SchemaMismatch(f"{path} is missing columns: {', '.join(missing)}")
        for row in reader:
            raw_label = row[label_col]
            if raw_label not in label_map:
                rejected += 1
                continue
            try:
                nums = [float(row[c]) for c in numeric_cols]
            except (TypeError, ValueError):
                rejected += 1
                continue
            if not all(np.isfinite(nums)):
                rejected += 1
                continue
            cats = [row[c] if row[c] is not None else "" for c in cat_cols]
            record = (nums, cats, label_map[raw_label])
            if subsample_rows is None:
                kept.append(record)
            else:
                # Reservoir sampling over the valid rows, order-preserving slots.
                if seen < subsample_rows:
                    kept.append(record)
                else:
                    j = int(rng.integers(0, seen + 1))
                    if j < subsample_rows:
                        kept[j] = record
                seen += 1

    if not kept:
        raise EmptyDataset(f"{path} produced no usable rows ({rejected} rejected)")

    names = list(numeric_cols)
    columns = [np.array([rec[0][i] for rec in kept]) for i in range(len(numeric_cols))]
    for ci, col in enumerate(cat_cols):
        values = sorted({rec[1][ci] for rec in kept})
        for v in values:
            names.append(f"{col}={v}")
            columns.append(np.array([1.0 if rec[1][ci] == v else 0.0 for rec in kept]))
    raw = np.column_stack(columns)
    y = np.array([rec[2] for rec in kept], dtype=np.int64)
    X, kept_names, means, stds = _standardize(raw, names)
    return Dataset(X=X, y=y, feature_names=kept_names, means=means, stds=stds,
                   rejected_rows=rejected)


@dataclass
class SynthComponent:
    """One Gaussian component with a linear labeling rule.

    Labels are 1 where weights @ x + bias >= 0, inverted when flip is set,
    so two components over the same feature distribution can disagree.
    """

    n: int
    mean: np.ndarray
    cov: np.ndarray       # (d, d) positive definite
    weights: np.ndarray
    bias: float = 0.0
    flip: bool = False


@dataclass
class SynthSpec:
    components: list[SynthComponent]
    seed: int = 0


def _as_cov(cov, d: int) -> np.ndarray:
    arr = np.asarray(cov, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.eye(d) * float(arr)
    elif arr.ndim == 1:
        if arr.shape[0] != d:
            raise InvalidSpec("diagonal covariance has the wrong length")
        arr = np.diag(arr)
    elif arr.shape != (d, d):
        raise InvalidSpec("covariance matrix has the wrong shape")
    return arr


def synth_spec_from_dict(raw: dict) -> SynthSpec:
    """Build a SynthSpec from plain JSON-style data."""
    if not isinstance(raw, dict) or "components" not in raw:
        raise InvalidSpec("synthetic spec needs a 'components' list")
    comps = []
    for entry in raw["components"]:
        mean = np.asarray(entry["mean"], dtype=np.float64)
        d = mean.shape[0]
        comps.append(SynthComponent(
            n=int(entry["n"]),
            mean=mean,
            cov=_as_cov(entry.get("cov", 1.0), d),
            weights=np.asarray(entry["weights"], dtype=np.float64),
            bias=float(entry.get("bias", 0.0)),
            flip=bool(entry.get("flip", False)),
        ))
    return SynthSpec(components=comps, seed=int(raw.get("seed", 0)))


def synth_spec_to_dict(spec: SynthSpec) -> dict:
    return {
        "seed": spec.seed,
        "components": [
            {
                "n": c.n,
                "mean": c.mean.tolist(),
                "cov": _as_cov(c.cov, c.mean.shape[0]).tolist(),
                "weights": c.weights.tolist(),
                "bias": c.bias,
                "flip": c.flip,
            }
            for c in spec.components
        ],
    }


def synth_mixture(spec: SynthSpec) -> tuple[Dataset, np.ndarray]:
    """Sample a labeled mixture; cluster id = generating component."""
    if not spec.components:
        raise InvalidSpec("synthetic spec has no components")
    d = spec.components[0].mean.shape[0]
    for comp in spec.components:
        if comp.n < 0:
            raise InvalidSpec("component sample count must be >= 0")
        if comp.mean.shape != (d,) or comp.weights.shape != (d,):
            raise InvalidSpec("component mean/weights dimensions disagree")
        cov = _as_cov(comp.cov, d)
        if np.linalg.eigvalsh(cov).min() <= 0:
            raise InvalidSpec("covariance must be positive definite")
    total = sum(c.n for c in spec.components)
    if total == 0:
        raise EmptyDataset("synthetic spec requests zero samples")

    rng = np.random.default_rng(split_seed(spec.seed, "synth"))
    blocks, labels, cluster_ids = [], [], []
    for idx, comp in enumerate(spec.components):
        cov = _as_cov(comp.cov, d)
        Xc = rng.multivariate_normal(comp.mean, cov, size=comp.n, method="cholesky")
        raw = (Xc @ comp.weights + comp.bias) >= 0.0
        yc = np.where(raw != comp.flip, 1, 0)
        blocks.append(Xc)
        labels.append(yc)
        cluster_ids.append(np.full(comp.n, idx, dtype=np.int64))
    raw_X = np.vstack(blocks)
    y = np.concatenate(labels).astype(np.int64)
    names = [f"f{i}" for i in range(d)]
    X, kept_names, means, stds = _standardize(raw_X, names)
    ds = Dataset(X=X, y=y, feature_names=kept_names, means=means, stds=stds)
    return ds, np.concatenate(cluster_ids)


def _kmeans_once(X: np.ndarray, k: int, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    n = X.shape[0]
    # k-means++ seeding.
    centers = np.empty((k, X.shape[1]))
    first = int(rng.integers(0, n))
    centers[0] = X[first]
    dist2 = ((X - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = dist2.sum()
        if total <= 0:
            pick = int(rng.integers(0, n))
        else:
            cdf = np.cumsum(dist2 / total)
            pick = int(np.searchsorted(cdf, rng.random(), side="right"))
            pick = min(pick, n - 1)
        centers[j] = X[pick]
        dist2 = np.minimum(dist2, ((X - centers[j]) ** 2).sum(axis=1))

    assign = np.zeros(n, dtype=np.int64)
    for _ in range(100):
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = d2.argmin(axis=1)
        for j in range(k):
            members = new_assign == j
            if members.any():
                centers[j] = X[members].mean(axis=0)
            else:
                # Re-seed an empty cluster at the point farthest from its center.
                far = int(d2[np.arange(n), new_assign].argmax())
                centers[j] = X[far]
                new_assign[far] = j
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    inertia = float(((X - centers[assign]) ** 2).sum())
    return assign, inertia


def cluster_dataset(ds: Dataset, k: int, seed: int) -> np.ndarray:
    """k-means cluster ids over the standardized features.

    Runs 10 restarts with k-means++ seeding and keeps the lowest-inertia
    assignment; deterministic for a given seed.
    """
    if k < 1:
        raise ConfigInvalid("k must be >= 1")
    n = ds.n
    if k > n:
        raise TooFewSamples(f"k={k} exceeds the {n} available samples")
    if k == 1:
        return np.zeros(n, dtype=np.int64)
    if k == n:
        return np.arange(n, dtype=np.int64)
    best_assign, best_inertia = None, np.inf
    for restart in range(10):
        rng = np.random.default_rng(split_seed(seed, f"kmeans-{restart}"))
        assign, inertia = _kmeans_once(ds.X, k, rng)
        if inertia < best_inertia:
            best_assign, best_inertia = assign, inertia
    return best_assign


def partition_mixture(ds: Dataset, clusters: np.ndarray,
                      cfg: PartitionConfig) -> list[EnvironmentShard]:
    """Distribute samples over T environments with a per-cluster Polya urn.

    Within each cluster, samples are assigned sequentially with
    P(env = j) proportional to alpha + (cluster samples already at j).
    Environments left empty are repaired by moving one sample from the
    largest pool and flagged. Each environment's pool is then split into
    train/test at train_fraction with at least one training row.
    """
    cfg.validate()
    clusters = np.asarray(clusters)
    if clusters.shape != (ds.n,):
        raise ConfigInvalid("cluster vector length must match the dataset")
    T = cfg.num_environments
    if ds.n < T:
        raise TooFewSamples(f"{ds.n} samples cannot populate {T} environments")
    num_clusters = int(clusters.max()) + 1 if clusters.size else 0
    pools: list[list[int]] = [[] for _ in range(T)]
    for c in range(num_clusters):
        members = np.flatnonzero(clusters == c)
        if members.size == 0:
            raise EmptyCluster(f"cluster {c} has zero samples")
        rng = np.random.default_rng(split_seed(cfg.seed, f"urn-{c}"))
        counts = np.zeros(T)
        for i in members:
            probs = cfg.dirichlet_alpha + counts
            cdf = np.cumsum(probs / probs.sum())
            j = int(np.searchsorted(cdf, rng.random(), side="right"))
            j = min(j, T - 1)
            pools[j].append(int(i))
            counts[j] += 1.0

    repaired = [False] * T
    for env in range(T):
        if pools[env]:
            continue
        donor = max(range(T), key=lambda e: (len(pools[e]), -e))
        pools[env].append(pools[donor].pop())
        repaired[env] = True

    shards = []
    for env in range(T):
        ids = np.array(sorted(pools[env]), dtype=np.int64)
        rng = np.random.default_rng(split_seed(cfg.seed, f"split-{env}"))
        perm = rng.permutation(ids.shape[0])
        n_train = max(1, int(np.floor(cfg.train_fraction * ids.shape[0])))
        train_ids = np.sort(ids[perm[:n_train]])
        test_ids = np.sort(ids[perm[n_train:]])
        shards.append(EnvironmentShard(
            env_id=env,
            train_ids=train_ids,
            test_ids=test_ids,
            train_X=ds.X[train_ids],
            train_y=ds.y[train_ids],
            test_X=ds.X[test_ids],
            test_y=ds.y[test_ids],
            repaired=repaired[env],
        ))
    return shards


def audit_shards(shards: list[EnvironmentShard]) -> dict:
    """Per-environment size and class-balance report; never mutates shards."""
    envs = []
    zero_pos, zero_neg = [], []
    for s in shards:
        pos_train = int(s.train_y.sum())
        envs.append({
            "env_id": s.env_id,
            "n_train": int(s.n_t),
            "n_test": int(s.test_X.shape[0]),
            "train_positives": pos_train,
            "test_positives": int(s.test_y.sum()) if s.test_y.size else 0,
            "repaired": bool(s.repaired),
        })
        if pos_train == 0:
            zero_pos.append(s.env_id)
        if pos_train == s.n_t:
            zero_neg.append(s.env_id)
    sizes = [e["n_train"] for e in envs]
    return {
        "environments": envs,
        "zero_positive_train_envs": zero_pos,
        "zero_negative_train_envs": zero_neg,
        "repaired_envs": [e["env_id"] for e in envs if e["repaired"]],
        "min_train": min(sizes) if sizes else 0,
        "max_train": max(sizes) if sizes else 0,
        "total_train": int(sum(sizes)),
        "total_test": int(sum(e["n_test"] for e in envs)),
    }


def build_manifest(shards: list[EnvironmentShard], provenance: dict,
                   cfg: PartitionConfig) -> dict:
    """Replayable record of a partition: provenance plus per-env row ids."""
    return {
        "version": 1,
        "provenance": provenance,
        "partition": {
            "num_environments": cfg.num_environments,
            "num_clusters": cfg.num_clusters,
            "dirichlet_alpha": cfg.dirichlet_alpha,
            "train_fraction": cfg.train_fraction,
            "seed": cfg.seed,
        },
        "environments": [
            {
                "env_id": s.env_id,
                "repaired": bool(s.repaired),
                "train_ids": s.train_ids.tolist(),
                "test_ids": s.test_ids.tolist(),
            }
            for s in shards
        ],
    }


def write_manifest(path: str, manifest: dict) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def read_manifest(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise FileUnreadable(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaMismatch(f"manifest {path} is not valid JSON: {exc}") from exc


def dataset_from_provenance(provenance: dict) -> Dataset:
    """Rebuild the exact dataset a manifest was computed from."""
    kind = provenance.get("kind")
    if kind == "synthetic":
        ds, _ = synth_mixture(synth_spec_from_dict(provenance["synthetic"]))
        return ds
    if kind == "csv":
        schema = provenance.get("schema_inline")
        if schema is None:
            schema = load_schema(provenance["schema"])
        return load_dataset(
            provenance["dataset"], schema,
            subsample_rows=provenance.get("subsample_rows"),
            seed=provenance.get("load_seed", 0),
        )
    raise SchemaMismatch(f"unknown provenance kind: {kind!r}")


def shards_from_manifest(manifest: dict, ds: Dataset) -> list[EnvironmentShard]:
    """Materialize shards from stored row ids against a rebuilt dataset."""
    shards = []
    for entry in manifest["environments"]:
        train_ids = np.asarray(entry["train_ids"], dtype=np.int64)
        test_ids = np.asarray(entry["test_ids"], dtype=np.int64)
        shards.append(EnvironmentShard(
            env_id=int(entry["env_id"]),
            train_ids=train_ids,
            test_ids=test_ids,
            train_X=ds.X[train_ids],
            train_y=ds.y[train_ids],
            test_X=ds.X[test_ids],
            test_y=ds.y[test_ids],
            repaired=bool(entry.get("repaired", False)),
        ))
    return shards
