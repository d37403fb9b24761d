"""Content-addressed data lineage: datums, labels, manifests, change orders, runs.

Everything is keyed by the SHA-256 of its bytes. Structured records (labels,
manifests, change orders, training runs) are hashed over a canonical JSON
serialization with sorted keys, so digests are stable across platforms.

Store layout under the root directory::

    objects/ab/cd/<digest>      payload bytes (data, label JSON, manifests)
    datums/<digest>.json        datum record (locator, sequence, metadata)
    labels/<digest>.json        label record (target datum, schema)
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import threading
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

STORE_ENV = "BSVCERT_STORE"
ROLES = ("training", "validation", "development", "certification")
SOURCES = ("real", "synthetic")


class LineageError(Exception):
    pass


class StoreError(LineageError):
    pass


class ConflictError(LineageError):
    """A change order does not apply cleanly to a manifest."""


class SplitError(LineageError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass(frozen=True)
class DatumRecord:
    digest: str
    locator: str
    sequence_id: str
    metadata: Mapping = field(default_factory=dict)
    source: str = "real"

    def to_dict(self) -> dict:
        return {
            "digest": self.digest,
            "locator": self.locator,
            "sequence_id": self.sequence_id,
            "metadata": dict(self.metadata),
            "source": self.source,
        }

    @classmethod
    def from_dict(cls, d) -> "DatumRecord":
        return cls(d["digest"], d["locator"], str(d["sequence_id"]), dict(d.get("metadata", {})), d.get("source", "real"))


@dataclass(frozen=True)
class LabelRecord:
    digest: str
    target_datum: str
    schema: str
    payload: object

    def content(self) -> dict:
        return {"target_datum": self.target_datum, "schema": self.schema, "payload": self.payload}


class DataStore:
    """Append-only content-addressed store on the local filesystem."""

    def __init__(self, root):
        self.root = Path(root)
        self._write_lock = threading.Lock()

    @classmethod
    def from_env(cls, root=None) -> "DataStore":
        root = root or os.environ.get(STORE_ENV)
        if not root:
            raise StoreError(f"no store root given (use --store or ${STORE_ENV})")
        return cls(root)

    def object_path(self, digest: str) -> Path:
        return self.root / "objects" / digest[:2] / digest[2:4] / digest

    def put(self, payload: bytes) -> str:
        digest = sha256(payload)
        path = self.object_path(digest)
        with self._write_lock:
            # append-only: an existing object is never rewritten
            if not path.exists():
                try:
                    _atomic_write(path, payload)
                except OSError as exc:
                    raise StoreError(f"cannot write object {digest}: {exc}") from exc
        return digest

    def get(self, digest: str) -> bytes:
        try:
            return self.object_path(digest).read_bytes()
        except FileNotFoundError:
            raise StoreError(f"object {digest} not in store") from None

    def has(self, digest: str) -> bool:
        return self.object_path(digest).exists()

    def check(self, digest: str) -> Optional[str]:
        """``None`` if intact, else ``"missing"`` or ``"corrupted"``."""
        path = self.object_path(digest)
        if not path.exists():
            return "missing"
        return None if sha256(path.read_bytes()) == digest else "corrupted"

    def _put_record(self, kind: str, digest: str, record: dict) -> None:
        path = self.root / kind / f"{digest}.json"
        with self._write_lock:
            if not path.exists():
                _atomic_write(path, canonical_json(record))

    def register_datum(
        self,
        payload: bytes,
        sequence_id: str,
        metadata: Optional[Mapping] = None,
        locator: Optional[str] = None,
        source: str = "real",
    ) -> DatumRecord:
        if not payload:
            raise LineageError("cannot register an empty payload")
        if source not in SOURCES:
            raise LineageError(f"unknown source tag {source!r}")
        digest = self.put(payload)
        existing = self.datum(digest, missing_ok=True)
        if existing is not None:
            return existing
        rec = DatumRecord(digest, locator or str(self.object_path(digest)), str(sequence_id), dict(metadata or {}), source)
        self._put_record("datums", digest, rec.to_dict())
        return rec

    def datum(self, digest: str, missing_ok: bool = False) -> Optional[DatumRecord]:
        path = self.root / "datums" / f"{digest}.json"
        if not path.exists():
            if missing_ok:
                return None
            raise StoreError(f"no datum record for {digest}")
        return DatumRecord.from_dict(json.loads(path.read_bytes()))

    def datums(self) -> list[DatumRecord]:
        d = self.root / "datums"
        if not d.exists():
            return []
        return [DatumRecord.from_dict(json.loads(p.read_bytes())) for p in sorted(d.glob("*.json"))]

    def register_label(self, target_datum: str, schema: str, payload) -> LabelRecord:
        if self.datum(target_datum, missing_ok=True) is None:
            raise LineageError(f"label target {target_datum} is not a registered datum")
        content = {"target_datum": target_datum, "schema": schema, "payload": payload}
        digest = self.put(canonical_json(content))
        self._put_record("labels", digest, {"target_datum": target_datum, "schema": schema})
        return LabelRecord(digest, target_datum, schema, payload)

    def label(self, digest: str) -> LabelRecord:
        content = json.loads(self.get(digest))
        return LabelRecord(digest, content["target_datum"], content["schema"], content["payload"])

    def labels_for(self, datum_digest: str) -> list[str]:
        d = self.root / "labels"
        if not d.exists():
            return []
        out = []
        for p in sorted(d.glob("*.json")):
            if json.loads(p.read_bytes())["target_datum"] == datum_digest:
                out.append(p.stem)
        return out

    def put_json(self, obj) -> str:
        return self.put(canonical_json(obj))

    def get_json(self, digest: str):
        return json.loads(self.get(digest))

    def save_manifest(self, manifest: "DatasetManifest") -> str:
        digest = self.put_json(manifest.to_dict())
        assert digest == manifest.digest
        return digest

    def load_manifest(self, digest: str) -> "DatasetManifest":
        return DatasetManifest.from_dict(self.get_json(digest))


# -- manifests and change orders ------------------------------------------------


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    version: int
    role: str
    datums: tuple[str, ...] = ()
    labels: tuple[str, ...] = ()
    sequences: Mapping[str, str] = field(default_factory=dict)  # datum digest -> sequence id
    sources: Mapping[str, str] = field(default_factory=dict)  # datum digest -> real/synthetic
    parent: Optional[str] = None
    change_order: Optional[int] = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise LineageError(f"unknown manifest role {self.role!r}")
        object.__setattr__(self, "datums", tuple(sorted(set(self.datums))))
        object.__setattr__(self, "labels", tuple(sorted(set(self.labels))))
        object.__setattr__(self, "sequences", {k: self.sequences[k] for k in sorted(self.sequences)})
        object.__setattr__(self, "sources", {k: self.sources[k] for k in sorted(self.sources)})

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "version": self.version,
            "role": self.role,
            "datums": list(self.datums),
            "labels": list(self.labels),
            "sequences": dict(self.sequences),
            "sources": dict(self.sources),
            "parent": self.parent,
            "change_order": self.change_order,
        }

    @classmethod
    def from_dict(cls, d) -> "DatasetManifest":
        return cls(
            d["name"],
            int(d["version"]),
            d["role"],
            tuple(d.get("datums", ())),
            tuple(d.get("labels", ())),
            dict(d.get("sequences", {})),
            dict(d.get("sources", {})),
            d.get("parent"),
            d.get("change_order"),
        )

    @property
    def digest(self) -> str:
        return sha256(canonical_json(self.to_dict()))

    @property
    def sequence_ids(self) -> set[str]:
        return {self.sequences[d] for d in self.datums if d in self.sequences}


def make_manifest(
    name: str,
    role: str,
    records: Iterable[DatumRecord],
    labels: Iterable[str] = (),
    version: int = 1,
) -> DatasetManifest:
    records = list(records)
    return DatasetManifest(
        name,
        version,
        role,
        tuple(r.digest for r in records),
        tuple(labels),
        {r.digest: r.sequence_id for r in records},
        {r.digest: r.source for r in records},
    )


@dataclass(frozen=True)
class ChangeOrder:
    id: int
    author: str
    timestamp: str
    added: tuple[str, ...] = ()
    removed: tuple[str, ...] = ()
    modified: tuple[str, ...] = ()
    labels_added: tuple[str, ...] = ()
    labels_removed: tuple[str, ...] = ()
    reason: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("added", "removed", "modified", "labels_added", "labels_removed"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d) -> "ChangeOrder":
        return cls(
            int(d["id"]),
            d.get("author", ""),
            d.get("timestamp", ""),
            tuple(d.get("added", ())),
            tuple(d.get("removed", ())),
            tuple(d.get("modified", ())),
            tuple(d.get("labels_added", ())),
            tuple(d.get("labels_removed", ())),
            d.get("reason", ""),
        )


def apply_change_order(order: ChangeOrder, manifest: DatasetManifest, store: DataStore) -> DatasetManifest:
    """Apply ``order`` and return the next manifest version, linked to its parent."""
    if manifest.change_order is not None and order.id <= manifest.change_order:
        raise ConflictError(f"change order {order.id} is not newer than {manifest.change_order}")
    current = set(manifest.datums)
    added, removed = set(order.added), set(order.removed)
    if added & removed:
        raise ConflictError(f"digests both added and removed: {sorted(added & removed)}")
    if removed - current:
        raise ConflictError(f"cannot remove digests not in manifest: {sorted(removed - current)}")
    if added & current:
        raise ConflictError(f"digests already in manifest: {sorted(added & current)}")
    if set(order.modified) - current:
        raise ConflictError(f"modified digests not in manifest: {sorted(set(order.modified) - current)}")
    labels = set(manifest.labels)
    if set(order.labels_removed) - labels:
        raise ConflictError("cannot remove labels not in manifest")
    sequences = {d: s for d, s in manifest.sequences.items() if d not in removed}
    sources = {d: s for d, s in manifest.sources.items() if d not in removed}
    for digest in sorted(added | set(order.modified)):
        rec = store.datum(digest, missing_ok=True)
        if rec is None:
            raise ConflictError(f"change order references unregistered datum {digest}")
        sequences[digest] = rec.sequence_id
        sources[digest] = rec.source
    for digest in order.labels_added:
        if not store.has(digest):
            raise ConflictError(f"change order references unknown label {digest}")
    return DatasetManifest(
        manifest.name,
        manifest.version + 1,
        manifest.role,
        tuple((current - removed) | added),
        tuple((labels - set(order.labels_removed)) | set(order.labels_added)),
        sequences,
        sources,
        manifest.digest,
        order.id,
    )


def replay(root: DatasetManifest, orders: Sequence[ChangeOrder], store: DataStore) -> DatasetManifest:
    manifest = root
    for order in orders:
        manifest = apply_change_order(order, manifest, store)
    return manifest


# -- splits and the certification firewall ---------------------------------------


def sequence_split(
    records: Sequence[DatumRecord],
    dev_fraction: float,
    seed: int,
    name: str = "dataset",
    roles: tuple[str, str] = ("development", "certification"),
) -> tuple[DatasetManifest, DatasetManifest]:
    """Split records so that each sequence lands wholly on one side.

    Sequences are packed largest first, each into the side currently furthest
    below its target size; ``seed`` only breaks ties between equal-size
    sequences.
    """
    if not 0.0 < dev_fraction < 1.0:
        raise SplitError("dev_fraction must lie strictly between 0 and 1")
    groups: dict[str, list[DatumRecord]] = defaultdict(list)
    for rec in records:
        groups[rec.sequence_id].append(rec)
    if len(groups) < 2:
        raise SplitError("need at least two sequences to split")
    ids = sorted(groups)
    perm = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    ordered = sorted(shuffled, key=lambda s: -len(groups[s]))  # stable: ties keep the shuffle
    total = sum(len(g) for g in groups.values())
    deficit = [dev_fraction * total, (1.0 - dev_fraction) * total]
    sides: list[list[str]] = [[], []]
    for seq in ordered:
        k = 0 if deficit[0] > deficit[1] else 1
        sides[k].append(seq)
        deficit[k] -= len(groups[seq])
    for k in (0, 1):
        if not sides[k]:
            donor = sides[1 - k]
            smallest = min(donor, key=lambda s: (len(groups[s]), ordered.index(s)))
            donor.remove(smallest)
            sides[k].append(smallest)
    manifests = []
    for role, seqs in zip(roles, sides):
        recs = [r for s in seqs for r in groups[s]]
        manifests.append(make_manifest(f"{name}-{role}", role, recs))
    return manifests[0], manifests[1]


@dataclass(frozen=True)
class FirewallVerdict:
    passed: bool
    shared_digests: tuple[str, ...] = ()
    shared_sequences: tuple[str, ...] = ()
    role_violations: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "shared_digests": list(self.shared_digests),
            "shared_sequences": list(self.shared_sequences),
            "role_violations": list(self.role_violations),
        }


def firewall_check(training: Sequence[DatasetManifest], certification: DatasetManifest) -> FirewallVerdict:
    """Certification data must share neither datums nor sequences with development data."""
    if isinstance(training, DatasetManifest):
        training = [training]
    cert_digests = set(certification.datums)
    cert_seqs = certification.sequence_ids
    shared_d, shared_s, roles = set(), set(), []
    for m in training:
        shared_d |= cert_digests & set(m.datums)
        shared_s |= cert_seqs & m.sequence_ids
        if m.role == "certification":
            roles.append(m.name)
    passed = not shared_d and not shared_s and not roles
    return FirewallVerdict(passed, tuple(sorted(shared_d)), tuple(sorted(shared_s)), tuple(roles))


@dataclass(frozen=True)
class IntegrityReport:
    corrupted: tuple[str, ...] = ()
    missing: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.corrupted and not self.missing

    def to_dict(self) -> dict:
        return {"ok": self.ok, "corrupted": list(self.corrupted), "missing": list(self.missing)}


def verify_integrity(manifest: DatasetManifest, store: DataStore) -> IntegrityReport:
    corrupted, missing = [], []
    for digest in list(manifest.datums) + list(manifest.labels):
        status = store.check(digest)
        if status == "missing":
            missing.append(digest)
        elif status == "corrupted":
            corrupted.append(digest)
    return IntegrityReport(tuple(corrupted), tuple(missing))


# -- training runs ------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingRunRecord:
    architecture: str
    hyperparameters: Mapping
    final_weights_digest: Optional[str]
    init_weights_digest: Optional[str] = None
    seeds: tuple[int, ...] = ()
    environment_digest: Optional[str] = None
    manifests: tuple[str, ...] = ()  # training/validation manifest digests
    logs_digest: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture,
            "hyperparameters": dict(self.hyperparameters or {}),
            "final_weights_digest": self.final_weights_digest,
            "init_weights_digest": self.init_weights_digest,
            "seeds": list(self.seeds),
            "environment_digest": self.environment_digest,
            "manifests": list(self.manifests),
            "logs_digest": self.logs_digest,
        }

    @classmethod
    def from_dict(cls, d) -> "TrainingRunRecord":
        return cls(
            d.get("architecture", ""),
            d.get("hyperparameters") or {},
            d.get("final_weights_digest"),
            d.get("init_weights_digest"),
            tuple(d.get("seeds", ())),
            d.get("environment_digest"),
            tuple(d.get("manifests", ())),
            d.get("logs_digest"),
        )


PASS, WARN, FAIL = "pass", "warn", "fail"


@dataclass(frozen=True)
class ChecklistItem:
    artifact: str
    status: str
    detail: str = ""


@dataclass(frozen=True)
class Checklist:
    items: tuple[ChecklistItem, ...]

    @property
    def passed(self) -> bool:
        return all(i.status != FAIL for i in self.items)

    @property
    def warnings(self) -> list[ChecklistItem]:
        return [i for i in self.items if i.status == WARN]

    @property
    def failures(self) -> list[ChecklistItem]:
        return [i for i in self.items if i.status == FAIL]

    def status(self, artifact: str) -> str:
        return next(i.status for i in self.items if i.artifact == artifact)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "items": [{"artifact": i.artifact, "status": i.status, "detail": i.detail} for i in self.items],
        }


def verify_reproducibility_artifacts(run: TrainingRunRecord, store: DataStore) -> Checklist:
    """Check the artifacts needed to rebuild a model.

    Architecture, hyperparameters and final weights are mandatory. Seeds,
    initial weights, environment snapshot, logs and data manifests only warn
    when absent. Training on a certification manifest is a hard failure.
    """
    items = []

    def blob(name: str, digest: Optional[str], mandatory: bool):
        if not digest:
            items.append(ChecklistItem(name, FAIL if mandatory else WARN, "not recorded"))
            return
        status = store.check(digest)
        if status is None:
            items.append(ChecklistItem(name, PASS, digest))
        elif status == "corrupted":
            items.append(ChecklistItem(name, FAIL, f"{digest} corrupted"))
        else:
            items.append(ChecklistItem(name, FAIL if mandatory else WARN, f"{digest} not in store"))

    items.append(ChecklistItem("architecture", PASS if run.architecture else FAIL, run.architecture or "not recorded"))
    items.append(
        ChecklistItem("hyperparameters", PASS if run.hyperparameters else FAIL, "" if run.hyperparameters else "not recorded")
    )
    blob("final_weights", run.final_weights_digest, mandatory=True)
    blob("init_weights", run.init_weights_digest, mandatory=False)
    items.append(ChecklistItem("seeds", PASS if run.seeds else WARN, "" if run.seeds else "not recorded"))
    blob("environment", run.environment_digest, mandatory=False)
    blob("logs", run.logs_digest, mandatory=False)
    if not run.manifests:
        items.append(ChecklistItem("manifests", WARN, "no training data manifests recorded"))
    for digest in run.manifests:
        try:
            m = store.load_manifest(digest)
        except (StoreError, KeyError, ValueError, LineageError):
            items.append(ChecklistItem(f"manifest:{digest[:12]}", WARN, f"{digest} not resolvable"))
            continue
        if m.role == "certification":
            items.append(ChecklistItem(f"manifest:{m.name}", FAIL, "certification data used for training"))
        else:
            items.append(ChecklistItem(f"manifest:{m.name}", PASS, digest))
    return Checklist(tuple(items))
