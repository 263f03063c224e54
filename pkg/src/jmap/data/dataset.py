"""Subjects, manifests, subject-level splits, SMOTE and early fusion."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from ..morphometry import standardize
from ..volume import Volume


class ClassLabel(IntEnum):
    CN = 0
    MCI = 1
    MLD = 2
    MOD = 3


CLASS_ORDER = tuple(c.name for c in ClassLabel)

# the one place the CDR cut points live
_CDR_CLASSES = {0.0: ClassLabel.CN, 0.5: ClassLabel.MCI, 1.0: ClassLabel.MLD, 2.0: ClassLabel.MOD, 3.0: ClassLabel.MOD}


def cdr_to_class(cdr: float) -> ClassLabel:
    """Clinical Dementia Rating to class; moderate and severe are merged."""
    try:
        return _CDR_CLASSES[float(cdr)]
    except (KeyError, TypeError, ValueError):
        raise ValueError(f"unknown CDR value {cdr!r}; expected one of 0, 0.5, 1, 2, 3") from None


@dataclass(frozen=True)
class Subject:
    id: str
    cdr: float
    scans: tuple[tuple[str, str], ...]  # (modality, path)

    def __post_init__(self):
        cdr_to_class(self.cdr)
        if not self.scans:
            raise ValueError(f"subject {self.id} has no scans")
        object.__setattr__(self, "scans", tuple((str(m).upper(), str(p)) for m, p in self.scans))

    @property
    def label(self) -> ClassLabel:
        return cdr_to_class(self.cdr)

    def scan(self, modality: str) -> str:
        for m, p in self.scans:
            if m == modality.upper():
                return p
        raise KeyError(f"subject {self.id} has no {modality} scan")


@dataclass(frozen=True)
class Manifest:
    subjects: tuple[Subject, ...]
    root: str = "."

    def __post_init__(self):
        ids = [s.id for s in self.subjects]
        dup = {i for i in ids if ids.count(i) > 1}
        if dup:
            raise ValueError(f"duplicate subject ids: {sorted(dup)}")
        object.__setattr__(self, "subjects", tuple(self.subjects))

    def __len__(self):
        return len(self.subjects)

    def __iter__(self):
        return iter(self.subjects)

    def labels(self) -> np.ndarray:
        return np.array([int(s.label) for s in self.subjects])

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.root) / p

    def subset(self, ids) -> "Manifest":
        keep = set(ids)
        return Manifest(tuple(s for s in self.subjects if s.id in keep), self.root)


def write_manifest(manifest: Manifest, path) -> None:
    doc = {
        "subjects": [
            {"id": s.id, "cdr": s.cdr, "scans": [{"modality": m, "path": p} for m, p in s.scans]}
            for s in manifest.subjects
        ]
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_manifest(path) -> Manifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    subjects = tuple(
        Subject(d["id"], float(d["cdr"]), tuple((sc["modality"], sc["path"]) for sc in d["scans"]))
        for d in doc["subjects"]
    )
    return Manifest(subjects, str(path.parent))


def _id(item) -> str:
    if isinstance(item, Subject):
        return item.id
    if isinstance(item, Sample):
        return item.subject_id
    return str(item)


def _ids(manifest) -> list[str]:
    return [_id(s) for s in manifest]


def kfold(manifest, k: int, seed: int = 0, stratify: bool = True) -> list[list[str]]:
    """Subject-id folds of a manifest (or a list of Samples or ids); sizes
    differ by at most one subject.

    Subjects are shuffled (per class when ``stratify``) and dealt round-robin,
    so every scan of a subject lands in exactly one fold.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    ids = _ids(manifest)
    if len(ids) < k:
        raise ValueError(f"need at least k={k} subjects, got {len(ids)}")
    rng = np.random.default_rng(seed)
    if stratify and all(isinstance(s, (Subject, Sample)) for s in manifest):
        groups: dict[int, list[str]] = {}
        for s in manifest:
            groups.setdefault(int(s.label), []).append(_id(s))
        order = []
        for key in sorted(groups):
            g = groups[key]
            order.extend(g[i] for i in rng.permutation(len(g)))
    else:
        order = [ids[i] for i in rng.permutation(len(ids))]
    folds: list[list[str]] = [[] for _ in range(k)]
    for i, sid in enumerate(order):
        folds[i % k].append(sid)
    return folds


def split_by_subject(manifest, test_fraction: float = 0.2, seed: int = 0) -> tuple[list[str], list[str]]:
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must be in (0, 1)")
    ids = _ids(manifest)
    if len(ids) < 2:
        raise ValueError("need at least 2 subjects to split")
    order = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    n_test = min(len(ids) - 1, max(1, int(round(test_fraction * len(ids)))))
    return order[n_test:], order[:n_test]


@dataclass(frozen=True)
class Sample:
    """One model input: ``input`` has shape (C, D, H, W)."""

    input: np.ndarray
    label: int
    subject_id: str
    synthetic: bool = False
    origin: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        x = np.asarray(self.input, dtype=np.float64)
        if x.ndim != 4 or x.shape[0] not in (1, 2):
            raise ValueError(f"sample input must be (C, D, H, W) with C in {{1, 2}}, got {x.shape}")
        x.setflags(write=False)
        object.__setattr__(self, "input", x)
        object.__setattr__(self, "label", int(self.label))


def volume_to_channels(*volumes: Volume) -> np.ndarray:
    """Stack (W, H, D) volumes into a (C, D, H, W) array."""
    return np.stack([v.data.transpose(2, 1, 0) for v in volumes])


def channels_to_volume(channel: np.ndarray, like: Volume) -> Volume:
    return like.with_data(np.asarray(channel).transpose(2, 1, 0))


def fuse_early(mri: Volume, ct: Volume, mask: np.ndarray | None = None) -> np.ndarray:
    """Channel order [MRI, CT], each standardised independently."""
    if mri.dims != ct.dims:
        raise ValueError(f"MRI dims {mri.dims} != CT dims {ct.dims}")
    return volume_to_channels(mri.with_data(standardize(mri.data, mask)), ct.with_data(standardize(ct.data, mask)))


def interpolate(x: np.ndarray, x_nn: np.ndarray, lam: float) -> np.ndarray:
    return x + lam * (x_nn - x)


def smote_balance(samples: list[Sample], k_neighbors: int = 5, seed: int = 0) -> list[Sample]:
    """Oversample every minority class to the majority count.

    Each synthetic sample is ``x + lam * (x_nn - x)`` with ``x`` a random
    real sample of the class, ``x_nn`` one of its ``k_neighbors`` nearest
    same-class neighbours and ``lam ~ U(0, 1)``. Originals come first and
    are returned untouched.
    """
    if k_neighbors < 1:
        raise ValueError("k_neighbors must be >= 1")
    samples = list(samples)
    if not samples:
        return []
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[Sample]] = {}
    for s in samples:
        by_class.setdefault(s.label, []).append(s)
    target = max(len(v) for v in by_class.values())
    out = list(samples)
    for label in sorted(by_class):
        members = by_class[label]
        need = target - len(members)
        if need == 0:
            continue
        if len(members) < 2:
            raise ValueError(f"class {label} has a single sample; cannot interpolate")
        X = np.stack([m.input.ravel() for m in members])
        sq = np.sum(X**2, axis=1)
        d2 = sq[:, None] + sq[None, :] - 2 * X @ X.T
        np.fill_diagonal(d2, np.inf)
        k = min(k_neighbors, len(members) - 1)
        neighbours = np.argsort(d2, axis=1, kind="stable")[:, :k]
        for j in range(need):
            i = int(rng.integers(len(members)))
            nn = int(neighbours[i, rng.integers(k)])
            lam = float(rng.random())
            new = interpolate(members[i].input, members[nn].input, lam)
            out.append(
                Sample(new, label, f"synthetic-{label}-{j:03d}", True, (members[i].subject_id, members[nn].subject_id))
            )
    return out
