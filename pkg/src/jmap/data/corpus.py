"""Default phantom corpus: graded atrophy per class, written as a NIfTI tree."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from ..volume import write_labels, write_nifti
from .dataset import ClassLabel, Manifest, Subject, write_manifest
from .phantom import MODALITIES, PhantomSpec, Template, build_template, generate_phantom

# volumetric factor of the atrophy region and CDR values cycled per class
CLASS_ATROPHY = {ClassLabel.CN: 1.0, ClassLabel.MCI: 0.92, ClassLabel.MLD: 0.85, ClassLabel.MOD: 0.75}
CLASS_CDR = {ClassLabel.CN: (0.0,), ClassLabel.MCI: (0.5,), ClassLabel.MLD: (1.0,), ClassLabel.MOD: (2.0, 3.0)}


@dataclass(frozen=True)
class CorpusConfig:
    dims: tuple = (32, 32, 32)
    per_class: int = 12
    atrophy_region: int = 3
    variation: float = 0.5
    noise: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.per_class < 1:
            raise ValueError("per_class must be >= 1")


def corpus_specs(cfg: CorpusConfig) -> list[tuple[str, float, PhantomSpec]]:
    """(subject id, cdr, phantom spec) for every subject, classes interleaved."""
    out = []
    n = 0
    for i in range(cfg.per_class):
        for label in ClassLabel:
            cdrs = CLASS_CDR[label]
            spec = PhantomSpec(
                dims=tuple(cfg.dims),
                seed=cfg.seed * 100_003 + n,
                atrophy_region=cfg.atrophy_region,
                atrophy_factor=CLASS_ATROPHY[label],
                noise=cfg.noise,
                variation=cfg.variation,
            )
            out.append((f"sub-{n + 1:03d}", cdrs[i % len(cdrs)], spec))
            n += 1
    return out


def write_template(template: Template, root) -> dict[str, Path]:
    d = Path(root) / "template"
    d.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name in MODALITIES:
        paths[name] = d / f"{name}.nii"
        write_nifti(template.images[name], paths[name])
    paths["atlas"] = d / "atlas.nii"
    write_labels(template.atlas, paths["atlas"])
    return paths


def build_corpus(root, cfg: CorpusConfig | None = None, template: Template | None = None,
                 with_truth: bool = False) -> Manifest:
    """Write ``<root>/<subject>/<modality>.nii``, the template and ``manifest.json``."""
    cfg = cfg or CorpusConfig()
    root = Path(root)
    template = template or build_template(cfg.dims)
    write_template(template, root)
    subjects = []
    for sid, cdr, spec in corpus_specs(cfg):
        ph = generate_phantom(spec, template)
        d = root / sid
        d.mkdir(parents=True, exist_ok=True)
        scans = []
        for name in MODALITIES:
            write_nifti(ph.images[name], d / f"{name}.nii")
            scans.append((name, f"{sid}/{name}.nii"))
        if with_truth:
            ph.field.save(d / "truth")
        subjects.append(Subject(sid, cdr, tuple(scans)))
    manifest = Manifest(tuple(subjects), str(root))
    write_manifest(manifest, root / "manifest.json")
    return manifest
