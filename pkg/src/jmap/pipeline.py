"""End-to-end run: phantoms, preprocessing, registration, Jacobian maps,
SMOTE, k-fold training, evaluation, Grad-CAM and reports.

Run directory layout (``<out_dir>/run-<config hash>/``)::

    config.json
    phantom/manifest.json, phantom/template/, phantom/<subject>/<MOD>.nii
    preprocess/template/<MOD>.nii, preprocess/<subject>/<MOD>.nii
    register/<subject>/<MOD>_affine.txt, _bspline.txt, _field_v{x,y,z}.nii, _warped.nii
    jacobian/<subject>/<MOD>_det.nii, _logdet.nii, _class.nii
    samples/<ARM>.npz
    train/<ARM>/folds.json, fold<k>.ckpt, curves.csv
    evaluate/<ARM>/metrics.json
    explain/<ARM>/<subject>_heatmap.nii, overlays/
    report/table2.md, table1_<ARM>.md, regions_<ARM>.csv, summary.json
    artifacts.json
"""
from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .data.corpus import CorpusConfig, build_corpus, write_template
from .data.dataset import CLASS_ORDER, Manifest, Sample, kfold, read_manifest, smote_balance, volume_to_channels
from .data.phantom import MODALITIES, build_template
from .explain import aggregate_reports, grad_cam_3d, overlay_slices, region_rank
from .explain.regions import region_table_csv, render_ablation_table, render_region_table
from .morphometry import cohort_standardize, jacobian_map, standardize, to_model_input
from .net import Metrics, ModelConfig, TrainConfig, save_checkpoint, train
from .net.train import write_curves
from .registration import AffineTransform, RegistrationConfig, register_affine, register_bspline, save_bspline, warp
from .volume import LabelVolume, Volume, mask_brain, normalize_intensity, read_labels, read_nifti, write_labels, write_nifti

log = logging.getLogger(__name__)

ARMS = ("REG", "JM")
MODALITY_CHOICES = ("mri", "ct", "fused")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


class InvariantError(RuntimeError):
    pass


@dataclass
class PipelineConfig:
    # paths
    data_root: str = ""  # directory holding manifest.json; empty -> generate phantoms
    template: str = ""  # directory with <MOD>.nii; empty -> built-in mini-template
    atlas: str = ""  # label NIfTI; empty -> template/atlas.nii or the built-in atlas
    out_dir: str = "runs"
    # experiment
    mode: str = "JM"
    modality: str = "mri"
    input: str = "det"
    standardize: str = "cohort"  # or "subject": statistics per scan
    seed: int = 0
    # phantom corpus
    corpus_seed: int = 0
    per_class: int = 12
    dims: int = 32
    atrophy_region: int = 3
    noise: float = 0.01
    variation: float = 0.5
    # preprocessing
    lower_percentile: float = 1.0
    upper_percentile: float = 99.0
    mask_threshold: float = 0.1  # fraction of max; negative -> Otsu
    # registration
    alpha: float = 0.01
    bins: int = 32
    pyramid_levels: int = 3
    iterations: int = 60
    affine_iterations: int = 60
    control_spacing: float = 8.0
    # training
    k_folds: int = 5
    smote_k: int = 5
    batch_size: int = 15
    learning_rate: float = 1e-4
    max_epochs: int = 50
    patience: int = 10
    # explanation
    cam_layer: str = "block3"
    include_background: bool = False
    overlay_subjects: int = 1  # per class
    threads: int = 1

    def validate(self) -> None:
        if self.mode not in ARMS:
            raise ConfigError(f"mode must be one of {ARMS}, got {self.mode!r}")
        if self.modality not in MODALITY_CHOICES:
            raise ConfigError(f"modality must be one of {MODALITY_CHOICES}, got {self.modality!r}")
        if self.input not in ("det", "logdet"):
            raise ConfigError(f"input must be 'det' or 'logdet', got {self.input!r}")
        if self.standardize not in ("cohort", "subject"):
            raise ConfigError(f"standardize must be 'cohort' or 'subject', got {self.standardize!r}")
        if self.k_folds < 2:
            raise ConfigError("k_folds must be >= 2")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        for name in ("data_root", "template", "atlas"):
            p = getattr(self, name)
            if p and not Path(p).exists():
                raise ConfigError(f"{name} path does not exist: {p}")
        try:
            self.registration()
            self.train_config()
            CorpusConfig(dims=(self.dims,) * 3, per_class=self.per_class)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls()
        for k, v in d.items():
            setattr(cfg, k, _coerce(k, v, type(getattr(cfg, k))))
        return cfg

    def set(self, key: str, value: str) -> None:
        if not hasattr(self, key):
            raise ConfigError(f"unknown config key {key!r}")
        setattr(self, key, _coerce(key, value, type(getattr(self, key))))

    def registration(self) -> RegistrationConfig:
        return RegistrationConfig(alpha=self.alpha, bins=self.bins, pyramid_levels=self.pyramid_levels,
                                  iterations=self.iterations, affine_iterations=self.affine_iterations,
                                  control_spacing=self.control_spacing)

    def train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, learning_rate=self.learning_rate, max_epochs=self.max_epochs,
                           patience=self.patience, seed=self.seed)

    def key(self) -> str:
        """Content address of the run: hash of everything but output location and threads."""
        return hashlib.sha256(json.dumps(self.identity(), sort_keys=True).encode()).hexdigest()[:16]

    def identity(self) -> dict:
        """Fields that determine the run's outputs."""
        return {k: v for k, v in asdict(self).items() if k not in ("out_dir", "threads")}


def _coerce(key, value, typ):
    try:
        if typ is bool:
            if isinstance(value, str):
                if value.lower() not in ("1", "0", "true", "false", "yes", "no"):
                    raise ValueError(value)
                return value.lower() in ("1", "true", "yes")
            return bool(value)
        if typ is int and isinstance(value, float) and not value.is_integer():
            raise ValueError(value)
        return typ(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {typ.__name__}") from None


def load_config(path=None, overrides=()) -> PipelineConfig:
    cfg = PipelineConfig()
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        if not isinstance(doc, dict) or any(isinstance(v, (dict, list)) for v in doc.values()):
            raise ConfigError("config must be a flat JSON object")
        cfg = PipelineConfig.from_dict(doc)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v.strip())
    return cfg


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_artifact_manifest(run: Path) -> Path:
    entries = {}
    for p in sorted(run.rglob("*")):
        if p.is_file() and p.name != "artifacts.json":
            entries[p.relative_to(run).as_posix()] = {"sha256": sha256_file(p), "bytes": p.stat().st_size}
    out = run / "artifacts.json"
    out.write_text(json.dumps(entries, indent=1, sort_keys=True) + "\n")
    return out


def _modalities(cfg: PipelineConfig) -> tuple[str, ...]:
    return {"mri": ("MRI",), "ct": ("CT",), "fused": ("MRI", "CT")}[cfg.modality]


def _map_pool(fn, items, threads: int):
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def preprocess_volume(vol: Volume, cfg: PipelineConfig) -> tuple[Volume, LabelVolume]:
    norm = normalize_intensity(vol, cfg.lower_percentile, cfg.upper_percentile)
    return mask_brain(norm, None if cfg.mask_threshold < 0 else cfg.mask_threshold)


def register_subject(fixed: Volume, moving: Volume, reg: RegistrationConfig):
    aff = register_affine(fixed, moving, reg)
    bs, fld = register_bspline(fixed, moving, aff, reg)
    return aff, bs, fld


class Pipeline:
    """Stage runner over one run directory; every stage writes under ``run/<stage>``."""

    def __init__(self, cfg: PipelineConfig):
        cfg.validate()
        self.cfg = cfg
        self.run = Path(cfg.out_dir) / f"run-{cfg.key()}"
        self.stage = "setup"

    # -- stages ---------------------------------------------------------
    def phantom(self) -> Manifest:
        cfg = self.cfg
        if cfg.data_root:
            return read_manifest(Path(cfg.data_root) / "manifest.json")
        corpus = CorpusConfig(dims=(cfg.dims,) * 3, per_class=cfg.per_class, atrophy_region=cfg.atrophy_region,
                              variation=cfg.variation, noise=cfg.noise, seed=cfg.corpus_seed)
        return build_corpus(self.run / "phantom", corpus)

    def load_template(self) -> tuple[dict[str, Volume], LabelVolume]:
        cfg = self.cfg
        if cfg.template:
            tdir = Path(cfg.template)
        elif cfg.data_root and (Path(cfg.data_root) / "template").exists():
            tdir = Path(cfg.data_root) / "template"
        else:
            tdir = self.run / "phantom" / "template"
            if not tdir.exists():
                write_template(build_template((cfg.dims,) * 3), self.run / "phantom")
        images = {m: read_nifti(tdir / f"{m}.nii") for m in MODALITIES if (tdir / f"{m}.nii").exists()}
        atlas_path = Path(cfg.atlas) if cfg.atlas else tdir / "atlas.nii"
        return images, read_labels(atlas_path)

    def preprocess(self, manifest: Manifest, template: dict[str, Volume]):
        out = self.run / "preprocess"
        fixed, masks = {}, {}
        for m in _modalities(self.cfg):
            fixed[m], masks[m] = preprocess_volume(template[m], self.cfg)
            (out / "template").mkdir(parents=True, exist_ok=True)
            write_nifti(fixed[m], out / "template" / f"{m}.nii")
            write_labels(masks[m], out / "template" / f"{m}_mask.nii")

        def one(subject):
            vols = {}
            for m in _modalities(self.cfg):
                vol, _ = preprocess_volume(read_nifti(manifest.resolve(subject.scan(m))), self.cfg)
                (out / subject.id).mkdir(parents=True, exist_ok=True)
                write_nifti(vol, out / subject.id / f"{m}.nii")
                vols[m] = vol
            return vols

        moving = dict(zip([s.id for s in manifest], _map_pool(one, list(manifest), self.cfg.threads)))
        return fixed, masks, moving

    def register(self, manifest: Manifest, fixed: dict[str, Volume], moving: dict):
        reg = self.cfg.registration()
        out = self.run / "register"

        def one(subject):
            res = {}
            for m in _modalities(self.cfg):
                aff, bs, fld = register_subject(fixed[m], moving[subject.id][m], reg)
                d = out / subject.id
                d.mkdir(parents=True, exist_ok=True)
                aff.save(d / f"{m}_affine.txt")
                save_bspline(bs, d / f"{m}_bspline.txt")
                fld.save(d / f"{m}_field")
                warped = warp(moving[subject.id][m], fld, fixed[m])
                write_nifti(warped, d / f"{m}_warped.nii")
                (d / f"{m}_status.txt").write_text(f"affine = {aff.status}\nbspline = {bs.status}\n")
                res[m] = (fld, warped)
            return res

        return dict(zip([s.id for s in manifest], _map_pool(one, list(manifest), self.cfg.threads)))

    def jacobian(self, manifest: Manifest, registered: dict):
        out = self.run / "jacobian"
        maps = {}
        for s in manifest:
            maps[s.id] = {}
            for m in _modalities(self.cfg):
                jm = jacobian_map(registered[s.id][m][0])
                if not np.all(np.isfinite(jm.det.data)):
                    raise InvariantError(f"non-finite Jacobian determinant for {s.id}/{m}")
                (out / s.id).mkdir(parents=True, exist_ok=True)
                jm.save(out / s.id / m)
                maps[s.id][m] = jm
        return maps

    def samples(self, manifest: Manifest, registered: dict, maps: dict, mask: np.ndarray, arm: str) -> list[Sample]:
        """Model inputs of one arm: the Jacobian map (JM) or the registered
        scan (REG) per modality, standardised inside the atlas mask."""
        channels = []
        for m in _modalities(self.cfg):
            if arm == "JM":
                vols = [to_model_input(maps[s.id][m], self.cfg.input, standardized=False) for s in manifest]
            else:
                vols = [registered[s.id][m][1] for s in manifest]
            if self.cfg.standardize == "cohort":
                data = cohort_standardize([v.data for v in vols], mask)
            else:
                data = [standardize(v.data, mask) for v in vols]
            channels.append([v.with_data(d) for v, d in zip(vols, data)])
        out = [Sample(volume_to_channels(*chans), int(s.label), s.id) for s, *chans in zip(manifest, *channels)]
        d = self.run / "samples"
        d.mkdir(parents=True, exist_ok=True)
        save_samples(out, d / f"{arm}.npz")
        return out

    def train_arm(self, manifest: Manifest, samples: list[Sample], arm: str):
        cfg = self.cfg
        folds = kfold(manifest, cfg.k_folds, cfg.seed)
        by_id = {s.subject_id: s for s in samples}
        pairs = []
        for k, val_ids in enumerate(folds):
            val = [by_id[i] for i in val_ids]
            tr = [by_id[s.id] for s in manifest if s.id not in set(val_ids)]
            pairs.append((smote_balance(tr, cfg.smote_k, seed=int(np.random.default_rng([cfg.seed, k, 3]).integers(2**31))), val))
        shape = samples[0].input.shape
        model_cfg = ModelConfig.default(in_channels=shape[0], input_shape=shape[1:])
        out = self.run / "train" / arm
        out.mkdir(parents=True, exist_ok=True)
        (out / "folds.json").write_text(json.dumps({"folds": folds}, indent=1) + "\n")
        results = train(model_cfg, pairs, cfg.train_config(), out)
        return folds, results

    def evaluate_arm(self, folds, results, arm: str) -> dict:
        pooled = sum(r.metrics.confusion for r in results)
        fold_acc = [r.metrics.accuracy for r in results]
        summary = {
            "pooled": Metrics(pooled).to_dict(),
            "folds": [r.metrics.to_dict() for r in results],
            "fold_accuracy": fold_acc,
            "mean_fold_accuracy": float(np.mean(fold_acc)),
            "best_epochs": [r.best_epoch for r in results],
            "stopped_epochs": [r.stopped_epoch for r in results],
        }
        d = self.run / "evaluate" / arm
        d.mkdir(parents=True, exist_ok=True)
        (d / "metrics.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
        return summary

    def explain_arm(self, folds, results, samples: list[Sample], atlas: LabelVolume, like: Volume, arm: str):
        cfg = self.cfg
        by_id = {s.subject_id: s for s in samples}
        d = self.run / "explain" / arm
        d.mkdir(parents=True, exist_ok=True)
        per_class: dict[str, list] = {c: [] for c in CLASS_ORDER}
        rendered = {c: 0 for c in CLASS_ORDER}
        for ids, res in zip(folds, results):
            for sid in ids:
                s = by_id[sid]
                hm = grad_cam_3d(res.model, s.input, s.label, cfg.cam_layer, like)
                hm.save(d / f"{sid}_heatmap.nii")
                cls = CLASS_ORDER[s.label]
                per_class[cls].append(region_rank(hm, atlas, cfg.include_background, label=sid))
                if rendered[cls] < cfg.overlay_subjects:
                    base = like.with_data(s.input[0].transpose(2, 1, 0))
                    for axis in (0, 1, 2):
                        overlay_slices(base, hm, axis, None, d / "overlays", prefix=sid)
                    rendered[cls] += 1
        return {c: aggregate_reports(r, label=c) for c, r in per_class.items() if r}

    def report(self, summaries: dict, tables: dict) -> dict:
        d = self.run / "report"
        d.mkdir(parents=True, exist_ok=True)
        arms = {arm: summaries[arm]["pooled"] for arm in summaries}
        (d / "table2.md").write_text(render_ablation_table(arms))
        for arm, t in tables.items():
            (d / f"table1_{arm}.md").write_text(render_region_table(t))
            (d / f"regions_{arm}.csv").write_text(region_table_csv(t))
        summary = {arm: {"mean_fold_accuracy": s["mean_fold_accuracy"], "pooled_accuracy": s["pooled"]["accuracy"]}
                   for arm, s in summaries.items()}
        (d / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
        return summary

    # -- driver ---------------------------------------------------------
    def execute(self, ablate: bool = False) -> dict:
        self.run.mkdir(parents=True, exist_ok=True)
        (self.run / "config.json").write_text(json.dumps(self.cfg.identity(), indent=1, sort_keys=True) + "\n")
        arms = ARMS if ablate else (self.cfg.mode,)
        try:
            self.stage = "phantom"
            manifest = self.phantom()
            self.stage = "preprocess"
            template, atlas = self.load_template()
            fixed, masks, moving = self.preprocess(manifest, template)
            self.stage = "register"
            registered = self.register(manifest, fixed, moving)
            self.stage = "jacobian"
            maps = self.jacobian(manifest, registered)
            mask = atlas.labels > 0
            summaries, tables = {}, {}
            like = fixed[_modalities(self.cfg)[0]]
            for arm in arms:
                self.stage = f"train[{arm}]"
                samples = self.samples(manifest, registered, maps, mask, arm)
                folds, results = self.train_arm(manifest, samples, arm)
                self.stage = f"evaluate[{arm}]"
                summaries[arm] = self.evaluate_arm(folds, results, arm)
                self.stage = f"explain[{arm}]"
                tables[arm] = self.explain_arm(folds, results, samples, atlas, like, arm)
            self.stage = "report"
            summary = self.report(summaries, tables)
        finally:
            write_artifact_manifest(self.run)
        return summary


def save_samples(samples: list[Sample], path) -> None:
    np.savez(
        path,
        inputs=np.stack([s.input for s in samples]),
        labels=np.array([s.label for s in samples], dtype=np.int64),
        subject_ids=np.array([s.subject_id for s in samples]),
        synthetic=np.array([s.synthetic for s in samples]),
    )


def load_samples(path) -> list[Sample]:
    with np.load(path) as z:
        return [Sample(x, int(y), str(i), bool(syn))
                for x, y, i, syn in zip(z["inputs"], z["labels"], z["subject_ids"], z["synthetic"])]
