"""Tests for loading, synthesis, clustering, and partitioning."""

import json

import numpy as np
import pytest

from fedq import data
from fedq.data import PartitionConfig, SynthComponent, SynthSpec
from fedq.errors import (
    ConfigInvalid,
    EmptyCluster,
    EmptyDataset,
    FileUnreadable,
    SchemaMismatch,
    TooFewSamples,
)

SCHEMA = {
    "label": "label",
    "label_map": {"normal": 0, "attack": 1},
    "numeric": ["dur", "rate"],
    "categorical": ["proto"],
}


def write_csv(path, rows, header="dur,rate,proto,label"):
    path.write_text(header + "\n" + "\n".join(rows) + "\n", encoding="utf-8")
    return str(path)


def sample_csv(tmp_path, n=40):
    rng = np.random.default_rng(0)
    rows = []
    for i in range(n):
        proto = "tcp" if i % 3 else "udp"
        label = "attack" if i % 2 else "normal"
        rows.append(f"{rng.normal():.6f},{rng.normal(5.0):.6f},{proto},{label}")
    return write_csv(tmp_path / "data.csv", rows)


def small_spec(seed=0):
    return SynthSpec(seed=seed, components=[
        SynthComponent(n=60, mean=np.zeros(2), cov=np.eye(2),
                       weights=np.array([1.0, 0.0])),
        SynthComponent(n=40, mean=np.array([3.0, 3.0]), cov=np.eye(2),
                       weights=np.array([1.0, 0.0]), flip=True),
    ])


def test_load_standardizes_and_one_hot_encodes(tmp_path):
    path = sample_csv(tmp_path)
    ds = data.load_dataset(path, SCHEMA)
    assert ds.n == 40
    assert "dur" in ds.feature_names and "rate" in ds.feature_names
    assert "proto=tcp" in ds.feature_names and "proto=udp" in ds.feature_names
    assert np.abs(ds.X.mean(axis=0)).max() < 1e-9
    assert np.abs(ds.X.std(axis=0) - 1.0).max() < 1e-9
    assert set(np.unique(ds.y)) <= {0, 1}
    assert ds.rejected_rows == 0


def test_one_hot_vocabulary_sorted(tmp_path):
    rows = ["1.0,2.0,udp,normal", "2.0,1.0,icmp,attack", "3.0,4.0,tcp,normal",
            "0.5,0.1,icmp,attack"]
    ds = data.load_dataset(write_csv(tmp_path / "v.csv", rows), SCHEMA)
    cat_names = [n for n in ds.feature_names if n.startswith("proto=")]
    assert cat_names == ["proto=icmp", "proto=tcp", "proto=udp"]


def test_load_rejects_bad_rows(tmp_path):
    rows = [
        "1.0,2.0,tcp,normal",
        "oops,2.0,tcp,normal",      # unparseable numeric
        "1.0,2.0,tcp,unknown",      # unmapped label
        "inf,2.0,tcp,attack",       # non-finite numeric
        "2.0,3.0,udp,attack",
    ]
    ds = data.load_dataset(write_csv(tmp_path / "r.csv", rows), SCHEMA)
    assert ds.n == 2
    assert ds.rejected_rows == 3


def test_load_drops_constant_columns(tmp_path):
    rows = [f"{v},7.5,tcp,normal" for v in (1.0, 2.0, 3.0, 4.0)]
    ds = data.load_dataset(write_csv(tmp_path / "c.csv", rows), SCHEMA)
    assert "rate" not in ds.feature_names
    assert "proto=tcp" not in ds.feature_names
    assert ds.feature_names == ["dur"]


def test_load_all_constant_raises(tmp_path):
    rows = ["1.0,7.5,tcp,normal", "1.0,7.5,tcp,attack"]
    with pytest.raises(EmptyDataset):
        data.load_dataset(write_csv(tmp_path / "k.csv", rows), SCHEMA)


def test_load_missing_column_raises(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("dur,proto,label\n1.0,tcp,normal\n", encoding="utf-8")
    with pytest.raises(SchemaMismatch):
        data.load_dataset(str(path), SCHEMA)


def test_load_missing_file_raises():
    with pytest.raises(FileUnreadable):
        data.load_dataset("/nonexistent/file.csv", SCHEMA)


def test_load_no_usable_rows_raises(tmp_path):
    rows = ["1.0,2.0,tcp,unknown"]
    with pytest.raises(EmptyDataset):
        data.load_dataset(write_csv(tmp_path / "u.csv", rows), SCHEMA)


def test_subsample_reservoir(tmp_path):
    path = sample_csv(tmp_path, n=50)
    ds = data.load_dataset(path, SCHEMA, subsample_rows=20, seed=1)
    assert ds.n == 20
    again = data.load_dataset(path, SCHEMA, subsample_rows=20, seed=1)
    assert np.array_equal(ds.X, again.X)
    assert np.array_equal(ds.y, again.y)
    other = data.load_dataset(path, SCHEMA, subsample_rows=20, seed=2)
    assert not np.array_equal(ds.y, other.y) or not np.array_equal(ds.X, other.X)


def test_subsample_larger_than_file_keeps_all(tmp_path):
    path = sample_csv(tmp_path, n=15)
    ds = data.load_dataset(path, SCHEMA, subsample_rows=100, seed=1)
    assert ds.n == 15


def test_schema_validation_errors():
    with pytest.raises(SchemaMismatch):
        data.validate_schema({"label_map": {"a": 1}, "numeric": ["x"]})
    with pytest.raises(SchemaMismatch):
        data.validate_schema({"label": "y", "label_map": {}, "numeric": ["x"]})
    with pytest.raises(SchemaMismatch):
        data.validate_schema({"label": "y", "label_map": {"a": 2}, "numeric": ["x"]})
    with pytest.raises(SchemaMismatch):
        data.validate_schema({"label": "y", "label_map": {"a": 1}})
    ok = data.validate_schema({"label": "y", "label_map": {"a": 1}, "numeric": ["x"]})
    assert ok["categorical"] == []


def test_load_schema_file_errors(tmp_path):
    with pytest.raises(FileUnreadable):
        data.load_schema(str(tmp_path / "missing.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    with pytest.raises(SchemaMismatch):
        data.load_schema(str(bad))


def test_synth_mixture_shapes_and_determinism():
    ds, clusters = data.synth_mixture(small_spec())
    assert ds.n == 100
    assert ds.d == 2
    assert clusters.shape == (100,)
    assert (clusters[:60] == 0).all() and (clusters[60:] == 1).all()
    again, _ = data.synth_mixture(small_spec())
    assert np.array_equal(ds.X, again.X)
    assert np.array_equal(ds.y, again.y)
    other, _ = data.synth_mixture(small_spec(seed=1))
    assert not np.array_equal(ds.X, other.X)


def test_synth_labels_follow_raw_rule():
    spec = small_spec()
    ds, clusters = data.synth_mixture(spec)
    raw = ds.X * ds.stds + ds.means
    for idx, comp in enumerate(spec.components):
        members = clusters == idx
        rule = (raw[members] @ comp.weights + comp.bias) >= 0.0
        expected = np.where(rule != comp.flip, 1, 0)
        assert np.array_equal(ds.y[members], expected)


def test_synth_spec_dict_roundtrip():
    raw = {
        "seed": 5,
        "components": [
            {"n": 10, "mean": [0.0, 1.0], "weights": [1.0, -1.0]},
            {"n": 5, "mean": [2.0, 2.0], "cov": [0.5, 0.25],
             "weights": [0.0, 1.0], "bias": -1.0, "flip": True},
        ],
    }
    spec = data.synth_spec_from_dict(raw)
    assert np.array_equal(spec.components[0].cov, np.eye(2))
    assert np.array_equal(spec.components[1].cov, np.diag([0.5, 0.25]))
    assert spec.components[1].flip is True
    back = data.synth_spec_from_dict(data.synth_spec_to_dict(spec))
    ds_a, _ = data.synth_mixture(spec)
    ds_b, _ = data.synth_mixture(back)
    assert np.array_equal(ds_a.X, ds_b.X)
    assert np.array_equal(ds_a.y, ds_b.y)


def test_synth_spec_invalid():
    from fedq.errors import InvalidSpec
    with pytest.raises(InvalidSpec):
        data.synth_spec_from_dict({"components": [
            {"n": 3, "mean": [0.0], "cov": [1.0, 2.0], "weights": [1.0]}]})
    with pytest.raises(InvalidSpec):
        data.synth_mixture(SynthSpec(components=[]))
    bad_cov = SynthSpec(components=[SynthComponent(
        n=3, mean=np.zeros(2), cov=np.array([[1.0, 2.0], [2.0, 1.0]]),
        weights=np.ones(2))])
    with pytest.raises(InvalidSpec):
        data.synth_mixture(bad_cov)
    with pytest.raises(EmptyDataset):
        data.synth_mixture(SynthSpec(components=[SynthComponent(
            n=0, mean=np.zeros(2), cov=np.eye(2), weights=np.ones(2))]))


def test_kmeans_fast_paths_and_validation():
    ds, _ = data.synth_mixture(small_spec())
    assert np.array_equal(data.cluster_dataset(ds, 1, seed=0), np.zeros(100, dtype=np.int64))
    assert np.array_equal(data.cluster_dataset(ds, 100, seed=0), np.arange(100))
    with pytest.raises(TooFewSamples):
        data.cluster_dataset(ds, 101, seed=0)
    with pytest.raises(ConfigInvalid):
        data.cluster_dataset(ds, 0, seed=0)


def test_kmeans_separates_distant_blobs():
    rng = np.random.default_rng(2)
    X = np.vstack([rng.normal(size=(30, 2)) * 0.1,
                   rng.normal(size=(30, 2)) * 0.1 + 10.0])
    ds = data.Dataset(X=X, y=np.zeros(60, dtype=np.int64),
                      feature_names=["a", "b"], means=np.zeros(2), stds=np.ones(2))
    labels = data.cluster_dataset(ds, 2, seed=3)
    assert len(set(labels[:30])) == 1
    assert len(set(labels[30:])) == 1
    assert labels[0] != labels[30]
    assert np.array_equal(labels, data.cluster_dataset(ds, 2, seed=3))


def test_partition_conserves_rows_and_splits():
    ds, clusters = data.synth_mixture(small_spec())
    cfg = PartitionConfig(num_environments=8, dirichlet_alpha=0.4,
                          train_fraction=0.8, seed=4)
    shards = data.partition_mixture(ds, clusters, cfg)
    assert len(shards) == 8
    seen = np.concatenate([np.concatenate([s.train_ids, s.test_ids]) for s in shards])
    assert np.array_equal(np.sort(seen), np.arange(100))
    for s in shards:
        total = s.train_ids.size + s.test_ids.size
        assert s.train_ids.size == max(1, int(np.floor(0.8 * total)))
        assert np.array_equal(s.train_ids, np.sort(s.train_ids))
        assert np.array_equal(s.test_ids, np.sort(s.test_ids))
        assert not set(s.train_ids) & set(s.test_ids)
        assert np.array_equal(s.train_X, ds.X[s.train_ids])
        assert np.array_equal(s.test_y, ds.y[s.test_ids])


def test_partition_deterministic_in_seed():
    ds, clusters = data.synth_mixture(small_spec())
    cfg_a = PartitionConfig(num_environments=8, seed=4)
    a = data.partition_mixture(ds, clusters, cfg_a)
    b = data.partition_mixture(ds, clusters, PartitionConfig(num_environments=8, seed=4))
    for sa, sb in zip(a, b):
        assert np.array_equal(sa.train_ids, sb.train_ids)
        assert np.array_equal(sa.test_ids, sb.test_ids)
    c = data.partition_mixture(ds, clusters, PartitionConfig(num_environments=8, seed=5))
    assert any(not np.array_equal(sa.train_ids, sc.train_ids) for sa, sc in zip(a, c))


def test_partition_repairs_empty_environments():
    # With as many environments as samples and a tiny concentration, the
    # urn leaves some environments empty; repair must fill every one.
    ds, clusters = data.synth_mixture(small_spec())
    cfg = PartitionConfig(num_environments=100, dirichlet_alpha=0.01, seed=0)
    shards = data.partition_mixture(ds, clusters, cfg)
    assert all(s.n_t >= 1 for s in shards)
    assert any(s.repaired for s in shards)
    seen = np.concatenate([np.concatenate([s.train_ids, s.test_ids]) for s in shards])
    assert np.array_equal(np.sort(seen), np.arange(100))


def test_partition_alpha_controls_concentration():
    spec = SynthSpec(seed=0, components=[SynthComponent(
        n=2000, mean=np.zeros(2), cov=np.eye(2), weights=np.ones(2))])
    ds, clusters = data.synth_mixture(spec)
    sizes = {}
    for alpha in (0.05, 50.0):
        cfg = PartitionConfig(num_environments=20, dirichlet_alpha=alpha, seed=1)
        shards = data.partition_mixture(ds, clusters, cfg)
        sizes[alpha] = max(s.n_t + s.test_ids.size for s in shards)
    assert sizes[0.05] > sizes[50.0]


def test_partition_errors():
    ds, clusters = data.synth_mixture(small_spec())
    with pytest.raises(TooFewSamples):
        data.partition_mixture(ds, clusters, PartitionConfig(num_environments=101))
    with pytest.raises(ConfigInvalid):
        data.partition_mixture(ds, clusters[:-1], PartitionConfig(num_environments=5))
    gap = clusters.copy()
    gap[gap == 1] = 2
    with pytest.raises(EmptyCluster):
        data.partition_mixture(ds, gap, PartitionConfig(num_environments=5))
    with pytest.raises(ConfigInvalid):
        PartitionConfig(dirichlet_alpha=0.0).validate()
    with pytest.raises(ConfigInvalid):
        PartitionConfig(train_fraction=1.0).validate()


def test_audit_shards_reports():
    ds, clusters = data.synth_mixture(small_spec())
    shards = data.partition_mixture(ds, clusters, PartitionConfig(num_environments=8, seed=4))
    report = data.audit_shards(shards)
    assert len(report["environments"]) == 8
    assert report["total_train"] == sum(s.n_t for s in shards)
    assert report["total_test"] == sum(s.test_ids.size for s in shards)
    assert report["min_train"] >= 1
    for entry, shard in zip(report["environments"], shards):
        assert entry["train_positives"] == int(shard.train_y.sum())
    assert data.audit_shards([])["total_train"] == 0


def test_manifest_roundtrip_synthetic(tmp_path):
    spec = small_spec()
    ds, clusters = data.synth_mixture(spec)
    cfg = PartitionConfig(num_environments=6, seed=9)
    shards = data.partition_mixture(ds, clusters, cfg)
    provenance = {"kind": "synthetic", "synthetic": data.synth_spec_to_dict(spec)}
    manifest = data.build_manifest(shards, provenance, cfg)
    path = tmp_path / "manifest.json"
    data.write_manifest(str(path), manifest)
    loaded = data.read_manifest(str(path))
    assert loaded == json.loads(json.dumps(manifest))

    ds2 = data.dataset_from_provenance(loaded["provenance"])
    assert np.array_equal(ds2.X, ds.X)
    assert np.array_equal(ds2.y, ds.y)
    rebuilt = data.shards_from_manifest(loaded, ds2)
    for a, b in zip(shards, rebuilt):
        assert a.env_id == b.env_id
        assert np.array_equal(a.train_ids, b.train_ids)
        assert np.array_equal(a.train_X, b.train_X)
        assert np.array_equal(a.test_y, b.test_y)
        assert a.repaired == b.repaired


def test_manifest_roundtrip_csv(tmp_path):
    path = sample_csv(tmp_path)
    ds = data.load_dataset(path, SCHEMA, subsample_rows=30, seed=7)
    clusters = data.cluster_dataset(ds, 2, seed=7)
    cfg = PartitionConfig(num_environments=5, seed=7)
    shards = data.partition_mixture(ds, clusters, cfg)
    provenance = {"kind": "csv", "dataset": path, "schema_inline": SCHEMA,
                  "subsample_rows": 30, "load_seed": 7}
    manifest = data.build_manifest(shards, provenance, cfg)
    mpath = tmp_path / "manifest.json"
    data.write_manifest(str(mpath), manifest)
    loaded = data.read_manifest(str(mpath))
    ds2 = data.dataset_from_provenance(loaded["provenance"])
    assert np.array_equal(ds2.X, ds.X)
    rebuilt = data.shards_from_manifest(loaded, ds2)
    for a, b in zip(shards, rebuilt):
        assert np.array_equal(a.train_X, b.train_X)
        assert np.array_equal(a.train_y, b.train_y)


def test_provenance_unknown_kind():
    with pytest.raises(SchemaMismatch):
        data.dataset_from_provenance({"kind": "parquet"})


def test_read_manifest_errors(tmp_path):
    with pytest.raises(FileUnreadable):
        data.read_manifest(str(tmp_path / "missing.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{", encoding="utf-8")
    with pytest.raises(SchemaMismatch):
        data.read_manifest(str(bad))
