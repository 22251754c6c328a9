"""Bit-exact on-disk container for per-checkpoint training artifacts.

Layout: magic "I2XA", version u32 LE, manifest-length u64 LE, UTF-8 JSON
manifest, then raw little-endian tensor blobs. The manifest records each
tensor's name, dtype, shape, byte offset (absolute from file start) and
byte length, so any single tensor can be read with one seek —
checkpoints decode independently of each other.

The same framing backs the run archive (".i2x", float32 tensors), the
prototype book (".i2xp"), the responsibility trajectory (".i2xt") and
saved models; the manifest "kind" field tells them apart.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    CorruptBlobError,
    InvariantViolationError,
    VersionUnsupportedError,
)

MAGIC = b"I2XA"
VERSION = 1
_HEADER_LEN = 4 + 4 + 8

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i64": np.dtype("<i8")}


def _manifest_bytes(kind: str, meta: dict, entries: list) -> bytes:
    doc = {"kind": kind, "meta": meta, "tensors": entries}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(path, kind: str, meta: dict, tensors: dict, dtype="f32") -> None:
    """Write tensors in insertion order; identical input -> identical bytes.

    ``dtype`` is a default ("f32"/"f64") or a per-tensor-name dict.
    """
    names = list(tensors.keys())
    dtype_of = (lambda n: dtype[n]) if isinstance(dtype, dict) else (lambda n: dtype)
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(np.asarray(tensors[name]), dtype=_DTYPES[dtype_of(name)])
        blobs.append((name, dtype_of(name), list(arr.shape), arr.tobytes()))

    # Offsets are absolute, so the manifest length feeds back into them;
    # iterate until the serialized length stabilizes (a couple of rounds).
    manifest_len = 0
    for _ in range(10):
        offset = _HEADER_LEN + manifest_len
        entries = []
        for name, dt, shape, raw in blobs:
            entries.append({"name": name, "dtype": dt, "shape": shape,
                            "offset": offset, "length": len(raw)})
            offset += len(raw)
        manifest = _manifest_bytes(kind, meta, entries)
        if len(manifest) == manifest_len:
            break
        manifest_len = len(manifest)
    else:
        raise InvariantViolationError("manifest length failed to stabilize")

    with open(str(path), "wb") as f:
        f.write(MAGIC)
        f.write(VERSION.to_bytes(4, "little"))
        f.write(len(manifest).to_bytes(8, "little"))
        f.write(manifest)
        for _, _, _, raw in blobs:
            f.write(raw)


class TensorReader:
    """Lazy tensor access over an open container file."""

    def __init__(self, path: str, entries: list):
        self._path = path
        self._entries = {e["name"]: e for e in entries}
        self._order = [e["name"] for e in entries]

    def tensor_names(self) -> list:
        return list(self._order)

    def entry(self, name: str) -> dict:
        if name not in self._entries:
            raise CorruptBlobError(f"tensor {name!r} not present")
        return self._entries[name]

    def tensor(self, name: str) -> np.ndarray:
        e = self.entry(name)
        dt = _DTYPES[e["dtype"]]
        expect = int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize
        if e["length"] != expect:
            raise CorruptBlobError(
                f"tensor {name!r}: blob length {e['length']} != shape implies {expect}"
            )
        with open(self._path, "rb") as f:
            f.seek(e["offset"])
            raw = f.read(e["length"])
        if len(raw) != e["length"]:
            raise CorruptBlobError(
                f"tensor {name!r}: file truncated ({len(raw)} of {e['length']} bytes)"
            )
        return np.frombuffer(raw, dtype=dt).reshape(e["shape"]).astype(np.float64)

    def tensor_raw(self, name: str) -> np.ndarray:
        """Tensor in its stored dtype (no float64 upcast)."""
        e = self.entry(name)
        dt = _DTYPES[e["dtype"]]
        with open(self._path, "rb") as f:
            f.seek(e["offset"])
            raw = f.read(e["length"])
        if len(raw) != e["length"]:
            raise CorruptBlobError(
                f"tensor {name!r}: file truncated ({len(raw)} of {e['length']} bytes)"
            )
        return np.frombuffer(raw, dtype=dt).reshape(e["shape"])


def read_container(path, expect_kind=None):
    """Parse header + manifest; returns (meta, TensorReader). Tensors stay on disk."""
    path = str(path)
    with open(path, "rb") as f:
        head = f.read(_HEADER_LEN)
        if len(head) < _HEADER_LEN or head[:4] != MAGIC:
            raise BadMagicError(f"{path}: not an I2XA container")
        version = int.from_bytes(head[4:8], "little")
        if version != VERSION:
            raise VersionUnsupportedError(f"{path}: container version {version} unsupported")
        manifest_len = int.from_bytes(head[8:16], "little")
        manifest_raw = f.read(manifest_len)
        if len(manifest_raw) != manifest_len:
            raise CorruptBlobError(f"{path}: manifest truncated")
    try:
        doc = json.loads(manifest_raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptBlobError(f"{path}: manifest not valid JSON: {exc}") from exc
    kind = doc.get("kind")
    if expect_kind is not None and kind != expect_kind:
        raise BadMagicError(f"{path}: container kind {kind!r}, expected {expect_kind!r}")
    return doc.get("meta", {}), TensorReader(path, doc.get("tensors", []))


# --- run archives ---------------------------------------------------------------


@dataclass
class RunArchive:
    """All per-checkpoint artifacts of one training run.

    confidences[t] is (N, M) post-softmax; saliency[t] is (N, h, w) in [0, 1];
    features is (N, h, w, d) from the final model. Tensors are stored as
    float32 little-endian.
    """

    dataset_id: str
    sample_ids: np.ndarray
    labels: np.ndarray
    class_count: int
    feature_shape: tuple
    checkpoints: list
    confidences: list
    saliency: list
    features: np.ndarray

    @property
    def size(self) -> int:
        return int(self.sample_ids.shape[0])


def check_archive(archive: RunArchive) -> list:
    """Invariant sweep; returns a list of problem strings (empty = valid)."""
    problems = []
    n = archive.size
    m = archive.class_count
    h, w, d = archive.feature_shape
    its = list(archive.checkpoints)
    if len(its) < 1:
        problems.append("no checkpoints")
    if any(b <= a for a, b in zip(its, its[1:])):
        problems.append("checkpoint iterations not strictly increasing")
    if len(archive.confidences) != len(its) or len(archive.saliency) != len(its):
        problems.append("per-checkpoint tensor count != checkpoint count")
        return problems
    if len(np.unique(archive.sample_ids)) != n:
        problems.append("sample_ids not unique")
    if archive.labels.shape != (n,) or archive.labels.min(initial=0) < 0 \
            or archive.labels.max(initial=0) >= m:
        problems.append("labels outside [0, class_count)")
    for it, conf in zip(its, archive.confidences):
        if conf.shape != (n, m):
            problems.append(f"confidences/{it}: shape {conf.shape} != ({n}, {m})")
            continue
        if not np.all(np.isfinite(conf)):
            problems.append(f"confidences/{it}: non-finite values")
        sums = np.asarray(conf, dtype=np.float64).sum(axis=1)
        bad = np.where(np.abs(sums - 1.0) > 1e-4)[0]
        if bad.size:
            problems.append(
                f"confidences/{it}: row {bad[0]} sums to {sums[bad[0]]:.6f} (not 1 within 1e-4)"
            )
    for it, sal in zip(its, archive.saliency):
        if sal.shape != (n, h, w):
            problems.append(f"saliency/{it}: shape {sal.shape} != ({n}, {h}, {w})")
            continue
        if not np.all(np.isfinite(sal)):
            problems.append(f"saliency/{it}: non-finite values")
            continue
        if sal.min() < 0.0 or sal.max() > 1.0:
            idx = np.unravel_index(np.argmax(np.abs(sal - 0.5)), sal.shape)
            problems.append(
                f"saliency/{it}: sample {idx[0]} value {sal[idx]:.4f} outside [0, 1]"
            )
    if archive.features.shape != (n, h, w, d):
        problems.append(f"features: shape {archive.features.shape} != ({n}, {h}, {w}, {d})")
    elif not np.all(np.isfinite(archive.features)):
        problems.append("features: non-finite values")
    return problems


def _archive_meta(archive: RunArchive) -> dict:
    return {
        "format_version": VERSION,
        "dataset_id": archive.dataset_id,
        "sample_ids": [int(s) for s in archive.sample_ids],
        "labels": [int(v) for v in archive.labels],
        "class_count": int(archive.class_count),
        "feature_shape": list(archive.feature_shape),
        "checkpoint_iterations": [int(t) for t in archive.checkpoints],
    }


def write_run(archive: RunArchive, path) -> None:
    """Validate and serialize; rewriting the same archive is byte-identical."""
    problems = check_archive(archive)
    if problems:
        raise InvariantViolationError("; ".join(problems))
    tensors = {}
    for it, conf, sal in zip(archive.checkpoints, archive.confidences, archive.saliency):
        tensors[f"confidences/{it}"] = conf
        tensors[f"saliency/{it}"] = sal
    tensors["features"] = archive.features
    write_container(path, kind="run", meta=_archive_meta(archive), tensors=tensors,
                    dtype="f32")


class RunReader:
    """Lazy view of a stored run; each accessor reads only its own blob."""

    def __init__(self, path):
        self.meta, self._reader = read_container(path, expect_kind="run")
        self.checkpoints = [int(t) for t in self.meta["checkpoint_iterations"]]
        self.sample_ids = np.asarray(self.meta["sample_ids"], dtype=np.int64)
        self.labels = np.asarray(self.meta["labels"], dtype=np.int64)
        self.class_count = int(self.meta["class_count"])
        self.feature_shape = tuple(self.meta["feature_shape"])
        self.dataset_id = self.meta["dataset_id"]

    def confidences(self, iteration: int) -> np.ndarray:
        return self._reader.tensor(f"confidences/{iteration}")

    def saliency(self, iteration: int) -> np.ndarray:
        return self._reader.tensor(f"saliency/{iteration}")

    def features(self) -> np.ndarray:
        return self._reader.tensor("features")


def open_run(path) -> RunReader:
    return RunReader(path)


def read_run(path) -> RunArchive:
    """Materialize the full archive (float32 tensors as stored)."""
    r = RunReader(path)
    return RunArchive(
        dataset_id=r.dataset_id,
        sample_ids=r.sample_ids,
        labels=r.labels,
        class_count=r.class_count,
        feature_shape=r.feature_shape,
        checkpoints=list(r.checkpoints),
        confidences=[r._reader.tensor_raw(f"confidences/{t}") for t in r.checkpoints],
        saliency=[r._reader.tensor_raw(f"saliency/{t}") for t in r.checkpoints],
        features=r._reader.tensor_raw("features"),
    )


# --- validation reports ----------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str = ""


@dataclass
class ValidationReport:
    path: str
    checks: list = field(default_factory=list)

    def add(self, name: str, ok: bool, detail: str = "") -> None:
        self.checks.append(CheckResult(name, ok, detail))

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    def summary(self) -> str:
        lines = [f"validate {self.path}"]
        for c in self.checks:
            status = "PASS" if c.ok else "FAIL"
            lines.append(f"  [{status}] {c.name}" + (f": {c.detail}" if c.detail else ""))
        lines.append(f"{'OK' if self.ok else 'INVALID'}: "
                     f"{sum(c.ok for c in self.checks)}/{len(self.checks)} checks passed")
        return "\n".join(lines)


def validate(path) -> ValidationReport:
    """Run every invariant check against a stored run; failures are report
    entries, never exceptions."""
    report = ValidationReport(path=str(path))
    try:
        meta, reader = read_container(path)
    except BadMagicError as exc:
        report.add("magic", False, str(exc))
        return report
    except VersionUnsupportedError as exc:
        report.add("magic", True)
        report.add("version", False, str(exc))
        return report
    except (CorruptBlobError, OSError) as exc:
        report.add("magic", True)
        report.add("manifest", False, str(exc))
        return report
    report.add("magic", True)
    report.add("version", True)
    report.add("manifest", True)

    try:
        with open(str(path), "rb") as f:
            f.seek(0, 2)
            file_size = f.tell()
        for name in reader.tensor_names():
            e = reader.entry(name)
            dt = _DTYPES[e["dtype"]]
            expect = int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize
            if e["length"] != expect or e["offset"] + e["length"] > file_size:
                report.add(f"blob-bounds:{name}", False,
                           f"offset {e['offset']} length {e['length']} vs file {file_size}")
            else:
                report.add(f"blob-bounds:{name}", True)
        if not report.ok:
            return report
        archive = read_run(path)
    except (BadMagicError, CorruptBlobError, KeyError) as exc:
        report.add("structure", False, str(exc))
        return report

    problems = check_archive(archive)
    checked = {
        "iterations-increasing": [p for p in problems if "increasing" in p or "no checkpoints" in p],
        "sample-ids": [p for p in problems if "sample_ids" in p],
        "labels": [p for p in problems if p.startswith("labels")],
        "confidence-rows": [p for p in problems if p.startswith("confidences/")],
        "saliency-range": [p for p in problems if p.startswith("saliency/")],
        "feature-shape": [p for p in problems if p.startswith("features")],
        "tensor-shapes": [p for p in problems if "tensor count" in p or "shape" in p
                          and not p.startswith(("confidences/", "saliency/", "features"))],
    }
    for name, errs in checked.items():
        report.add(name, not errs, "; ".join(errs))
    return report


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(str(path), "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
