import numpy as np
import pytest

from i2x import artifact_store as store
from i2x.errors import (
    BadMagicError,
    CorruptBlobError,
    InvariantViolationError,
    VersionUnsupportedError,
)


def minimal_archive(n=2, m=2, checkpoints=(0, 5), feature_shape=(2, 2, 3), seed=0):
    rng = np.random.Generator(np.random.PCG64(seed))
    h, w, d = feature_shape
    confs = []
    sals = []
    for _ in checkpoints:
        logits = rng.random((n, m))
        conf = logits / logits.sum(axis=1, keepdims=True)
        confs.append(conf.astype("<f4"))
        sal = rng.random((n, h, w))
        sal /= sal.max(axis=(1, 2), keepdims=True)
        sals.append(sal.astype("<f4"))
    return store.RunArchive(
        dataset_id="fixture",
        sample_ids=np.arange(n, dtype=np.int64),
        labels=(np.arange(n) % m).astype(np.int64),
        class_count=m,
        feature_shape=feature_shape,
        checkpoints=list(checkpoints),
        confidences=confs,
        saliency=sals,
        features=rng.random((n, h, w, d)).astype("<f4"),
    )


def archives_equal(a, b):
    assert a.dataset_id == b.dataset_id
    assert np.array_equal(a.sample_ids, b.sample_ids)
    assert np.array_equal(a.labels, b.labels)
    assert a.class_count == b.class_count
    assert tuple(a.feature_shape) == tuple(b.feature_shape)
    assert list(a.checkpoints) == list(b.checkpoints)
    for x, y in zip(a.confidences, b.confidences):
        assert np.array_equal(x, y)
    for x, y in zip(a.saliency, b.saliency):
        assert np.array_equal(x, y)
    assert np.array_equal(a.features, b.features)


class TestRoundTrip:
    def test_write_read_round_trip(self, tmp_path):
        archive = minimal_archive()
        path = tmp_path / "run.i2x"
        store.write_run(archive, path)
        archives_equal(store.read_run(path), archive)

    def test_rewrite_byte_identical(self, tmp_path):
        archive = minimal_archive(n=3, m=4, checkpoints=(0, 7, 11))
        p1 = tmp_path / "a.i2x"
        p2 = tmp_path / "b.i2x"
        store.write_run(archive, p1)
        store.write_run(archive, p2)
        assert store.file_sha256(p1) == store.file_sha256(p2)

    def test_lazy_checkpoint_reads_are_independent(self, tmp_path):
        archive = minimal_archive(checkpoints=(0, 5, 9))
        path = tmp_path / "run.i2x"
        store.write_run(archive, path)
        # chop the final blob: earlier checkpoints must still decode
        raw = path.read_bytes()
        path.write_bytes(raw[:-20])
        reader = store.open_run(path)
        np.testing.assert_array_equal(
            reader.confidences(0), np.asarray(archive.confidences[0], dtype=np.float64))
        np.testing.assert_array_equal(
            reader.saliency(5), np.asarray(archive.saliency[1], dtype=np.float64))
        with pytest.raises(CorruptBlobError) as err:
            reader.features()
        assert "features" in str(err.value)


class TestGuards:
    def test_confidence_rows_must_sum_to_one(self, tmp_path):
        archive = minimal_archive()
        archive.confidences[0] = (archive.confidences[0] * 0.8).astype("<f4")
        with pytest.raises(InvariantViolationError):
            store.write_run(archive, tmp_path / "bad.i2x")

    def test_saliency_range_enforced(self, tmp_path):
        archive = minimal_archive()
        archive.saliency[1][0, 0, 0] = 1.5
        with pytest.raises(InvariantViolationError):
            store.write_run(archive, tmp_path / "bad.i2x")

    def test_nonincreasing_checkpoints_rejected(self, tmp_path):
        archive = minimal_archive(checkpoints=(5, 5))
        with pytest.raises(InvariantViolationError):
            store.write_run(archive, tmp_path / "bad.i2x")

    def test_flipped_magic(self, tmp_path):
        path = tmp_path / "run.i2x"
        store.write_run(minimal_archive(), path)
        raw = bytearray(path.read_bytes())
        raw[0] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(BadMagicError):
            store.read_run(path)

    def test_future_version(self, tmp_path):
        path = tmp_path / "run.i2x"
        store.write_run(minimal_archive(), path)
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(VersionUnsupportedError):
            store.read_run(path)

    def test_truncated_final_blob_names_tensor(self, tmp_path):
        path = tmp_path / "run.i2x"
        store.write_run(minimal_archive(), path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CorruptBlobError) as err:
            store.read_run(path)
        assert "features" in str(err.value)


class TestValidate:
    def test_valid_file_all_pass(self, tmp_path):
        path = tmp_path / "run.i2x"
        store.write_run(minimal_archive(), path)
        report = store.validate(path)
        assert report.ok
        assert all(c.ok for c in report.checks)
        assert "OK" in report.summary()

    def test_injected_saliency_failure_names_checkpoint_and_sample(self, tmp_path):
        archive = minimal_archive()
        path = tmp_path / "run.i2x"
        store.write_run(archive, path)
        # poke a stored saliency float beyond 1.0 directly in the blob
        meta, reader = store.read_container(path)
        entry = reader.entry("saliency/5")
        raw = bytearray(path.read_bytes())
        bad = np.array([1.5], dtype="<f4").tobytes()
        raw[entry["offset"] : entry["offset"] + 4] = bad
        path.write_bytes(bytes(raw))
        report = store.validate(path)
        assert not report.ok
        failing = [c for c in report.checks if not c.ok]
        assert any("saliency" in c.name for c in failing)
        detail = "; ".join(c.detail for c in failing)
        assert "saliency/5" in detail and "sample 0" in detail

    def test_bad_magic_is_report_entry(self, tmp_path):
        path = tmp_path / "junk.i2x"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        report = store.validate(path)
        assert not report.ok
        assert report.checks[0].name == "magic" and not report.checks[0].ok


class TestGenericContainer:
    def test_kind_mismatch_rejected(self, tmp_path):
        path = tmp_path / "x.bin"
        store.write_container(path, kind="model", meta={}, tensors={"w": np.ones(3)},
                              dtype="f64")
        with pytest.raises(BadMagicError):
            store.read_container(path, expect_kind="run")

    def test_f64_round_trip_exact(self, tmp_path):
        rng = np.random.Generator(np.random.PCG64(1))
        tensors = {"a": rng.normal(size=(4, 5)), "b": rng.normal(size=7)}
        path = tmp_path / "x.bin"
        store.write_container(path, kind="model", meta={"n": 1}, tensors=tensors,
                              dtype="f64")
        meta, reader = store.read_container(path, expect_kind="model")
        assert meta == {"n": 1}
        assert reader.tensor_names() == ["a", "b"]
        for name in tensors:
            assert np.array_equal(reader.tensor(name), tensors[name])
