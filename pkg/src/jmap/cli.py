"""Command-line interface: one subcommand per pipeline stage plus ``pipeline``.

Exit codes: 0 ok, 2 configuration error, 3 stage failure, 4 invariant violation.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_INVARIANT = 0, 2, 3, 4

log = logging.getLogger("jmap")


def _threads() -> int:
    raw = os.environ.get("JMAP_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        from .pipeline import ConfigError

        raise ConfigError(f"JMAP_THREADS must be a positive integer, got {raw!r}")
    return n


def _out_file(path) -> Path:
    """``path`` as a Path, with its directory created."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _registration_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("registration")
    g.add_argument("--alpha", type=float, default=0.01, help="bending-energy weight")
    g.add_argument("--bins", type=int, default=32, help="Parzen histogram bins")
    g.add_argument("--pyramid-levels", type=int, default=3, help="resolution levels, factor 2 apart")
    g.add_argument("--iterations", type=int, default=60, help="B-spline iterations per level")
    g.add_argument("--affine-iterations", type=int, default=60, help="affine iterations per level")
    g.add_argument("--control-spacing", type=float, default=8.0, help="B-spline control spacing in voxels")


def _train_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--batch-size", type=int, default=15, help="minibatch size")
    g.add_argument("--learning-rate", type=float, default=1e-4, help="Adam learning rate")
    g.add_argument("--max-epochs", type=int, default=50, help="epochs per fold")
    g.add_argument("--patience", type=int, default=10, help="early-stopping patience in epochs")


# -- subcommand handlers --------------------------------------------------

def cmd_phantom(args) -> int:
    from .data.corpus import CorpusConfig, build_corpus

    cfg = CorpusConfig(dims=(args.dims,) * 3, per_class=args.per_class, atrophy_region=args.atrophy_region,
                       variation=args.variation, noise=args.noise, seed=args.seed)
    manifest = build_corpus(args.out, cfg, with_truth=args.with_truth)
    print(f"wrote {len(manifest)} subjects to {args.out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    from .volume import mask_brain, normalize_intensity, read_nifti, write_labels, write_nifti

    vol = normalize_intensity(read_nifti(args.input), args.lower_percentile, args.upper_percentile)
    masked, mask = mask_brain(vol, args.mask_threshold)
    write_nifti(masked, _out_file(args.output))
    if args.mask_output:
        write_labels(mask, _out_file(args.mask_output))
    print(f"{args.output}: {int(np.count_nonzero(mask.labels))} brain voxels")
    return EXIT_OK


def cmd_register(args) -> int:
    from .registration import RegistrationConfig, register_affine, register_bspline, save_bspline, warp
    from .volume import read_nifti, write_nifti

    cfg = RegistrationConfig(alpha=args.alpha, bins=args.bins, pyramid_levels=args.pyramid_levels,
                             iterations=args.iterations, affine_iterations=args.affine_iterations,
                             control_spacing=args.control_spacing, seed=args.seed)
    fixed, moving = read_nifti(args.fixed), read_nifti(args.moving)
    aff = register_affine(fixed, moving, cfg)
    bs, fld = register_bspline(fixed, moving, aff, cfg)
    prefix = _out_file(args.out)
    aff.save(f"{prefix}_affine.txt")
    save_bspline(bs, f"{prefix}_bspline.txt")
    fld.save(f"{prefix}_field")
    write_nifti(warp(moving, fld, fixed), f"{prefix}_warped.nii")
    print(f"affine {aff.status}, bspline {bs.status}")
    return EXIT_OK


def cmd_jacobian(args) -> int:
    from .morphometry import jacobian_map
    from .pipeline import InvariantError
    from .registration import DisplacementField

    jm = jacobian_map(DisplacementField.load(args.field), args.tolerance)
    if not np.all(np.isfinite(jm.det.data)):
        raise InvariantError("non-finite Jacobian determinant")
    jm.save(_out_file(args.out))
    hist = jm.class_histogram()
    print(" ".join(f"{k}={v}" for k, v in hist.items()))
    return EXIT_OK


def _bundle_from_manifest(args):
    from .data.dataset import Sample, read_manifest, volume_to_channels
    from .morphometry import cohort_standardize, standardize
    from .volume import read_labels, read_nifti

    manifest = read_manifest(args.manifest)
    mask = read_labels(args.mask).labels > 0 if args.mask else None
    channels = []
    for pattern in args.inputs:
        vols = [read_nifti(pattern.format(subject=s.id)) for s in manifest]
        if args.standardize == "cohort":
            data = cohort_standardize([v.data for v in vols], mask)
        else:
            data = [standardize(v.data, mask) for v in vols]
        channels.append([v.with_data(d) for v, d in zip(vols, data)])
    return [Sample(volume_to_channels(*chans), int(s.label), s.id) for s, *chans in zip(manifest, *channels)]


def cmd_balance(args) -> int:
    from .data.dataset import smote_balance
    from .pipeline import ConfigError, InvariantError, load_samples, save_samples

    if bool(args.samples) == bool(args.manifest):
        raise ConfigError("give exactly one of --samples or --manifest")
    if args.manifest and not args.inputs:
        raise ConfigError("--manifest needs --inputs")
    samples = load_samples(args.samples) if args.samples else _bundle_from_manifest(args)
    if args.k_neighbors == 0:
        save_samples(samples, _out_file(args.out))
        print(f"{len(samples)} samples, no oversampling")
        return EXIT_OK
    balanced = smote_balance(samples, args.k_neighbors, args.seed)
    counts = np.bincount([s.label for s in balanced])
    if len(set(counts[counts > 0].tolist())) != 1:
        raise InvariantError(f"class counts not balanced: {counts.tolist()}")
    save_samples(balanced, _out_file(args.out))
    print(f"{len(samples)} -> {len(balanced)} samples, per class {counts.tolist()}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .data.dataset import kfold, smote_balance
    from .net import ModelConfig, TrainConfig, train
    from .pipeline import load_samples

    samples = load_samples(args.samples)
    cfg = TrainConfig(batch_size=args.batch_size, learning_rate=args.learning_rate, max_epochs=args.max_epochs,
                      patience=args.patience, seed=args.seed)
    real = [s for s in samples if not s.synthetic]
    folds = kfold(real, args.folds, args.seed)
    by_id = {s.subject_id: s for s in real}
    pairs = []
    for k, val_ids in enumerate(folds):
        held = set(val_ids)
        tr = [s for s in real if s.subject_id not in held]
        if args.smote_k > 0:
            tr = smote_balance(tr, args.smote_k, seed=int(np.random.default_rng([args.seed, k, 3]).integers(2**31)))
        pairs.append((tr, [by_id[i] for i in val_ids]))
    shape = real[0].input.shape
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "folds.json").write_text(json.dumps({"folds": folds}, indent=1) + "\n")
    results = train(ModelConfig.default(in_channels=shape[0], input_shape=shape[1:]), pairs, cfg, out)
    for r in results:
        print(f"fold {r.fold}: best epoch {r.best_epoch}, stopped {r.stopped_epoch}, val acc {r.metrics.accuracy:.3f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .net import evaluate
    from .pipeline import load_samples

    samples = load_samples(args.samples)
    if args.subjects:
        keep = set(args.subjects)
        samples = [s for s in samples if s.subject_id in keep]
    metrics = evaluate(args.checkpoint, samples)
    text = json.dumps(metrics.to_dict(), indent=1, sort_keys=True) + "\n"
    if args.out:
        _out_file(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_explain(args) -> int:
    from .explain import grad_cam_3d
    from .net import load_checkpoint
    from .pipeline import load_samples
    from .volume import read_nifti

    model, _ = load_checkpoint(args.checkpoint)
    by_id = {s.subject_id: s for s in load_samples(args.samples)}
    if args.subject not in by_id:
        raise KeyError(f"subject {args.subject!r} not in {args.samples}")
    s = by_id[args.subject]
    cls = s.label if args.class_index is None else args.class_index
    like = read_nifti(args.like) if args.like else None
    hm = grad_cam_3d(model, s.input, cls, args.layer, like)
    hm.save(_out_file(args.out))
    print(f"{args.out}: class {cls}, layer {args.layer}, raw cam shape {hm.raw.shape}")
    return EXIT_OK


def cmd_rank_regions(args) -> int:
    from .explain import aggregate_reports, region_rank, region_table_csv, render_region_table
    from .volume import read_labels, read_nifti

    atlas = read_labels(args.atlas)
    reports = [region_rank(read_nifti(h), atlas, args.include_background, label=str(h)) for h in args.heatmap]
    report = aggregate_reports(reports, label=args.label)
    tables = {args.label: report}
    if args.out:
        _out_file(args.out).write_text(region_table_csv(tables))
    print(render_region_table(tables, args.decimals), end="")
    for name in report.flagged:
        print(f"warning: region {name} has no voxels", file=sys.stderr)
    return EXIT_OK


def cmd_render(args) -> int:
    from .explain import overlay_slices
    from .volume import read_nifti

    vol, heat = read_nifti(args.volume), read_nifti(args.heatmap)
    paths = []
    for axis in args.axis:
        paths += overlay_slices(vol, heat, axis, args.slices, args.out, args.prefix, args.png)
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_report(args) -> int:
    from .explain import read_region_csv, render_ablation_table, render_region_table

    arms = {}
    for item in args.metrics:
        name, _, path = item.partition("=")
        if not path:
            from .pipeline import ConfigError

            raise ConfigError(f"--metrics expects ARM=PATH, got {item!r}")
        doc = json.loads(Path(path).read_text())
        arms[name] = doc.get("pooled", doc)
    text = render_ablation_table(arms)
    for path in args.regions:
        text += "\n" + render_region_table(read_region_csv(Path(path).read_text()), args.decimals)
    if args.out:
        _out_file(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    from .pipeline import Pipeline, load_config

    overrides = list(args.set)
    for key in ("mode", "modality", "alpha", "bins", "seed"):
        value = getattr(args, key)
        if value is not None:
            overrides.append(f"{key}={value}")
    if args.out is not None:
        overrides.append(f"out_dir={args.out}")
    cfg = load_config(args.config, overrides)
    cfg.threads = _threads()
    pipe = Pipeline(cfg)
    try:
        summary = pipe.execute(ablate=args.ablate)
    except Exception as e:
        _error_record(pipe.run, pipe.stage, e)
        raise _Staged(pipe.stage, e) from e
    print(f"run directory: {pipe.run}")
    for arm, s in summary.items():
        print(f"{arm}: mean fold accuracy {s['mean_fold_accuracy']:.4f}, pooled accuracy {s['pooled_accuracy']:.4f}")
    return EXIT_OK


class _Staged(Exception):
    def __init__(self, stage: str, error: Exception):
        super().__init__(f"stage {stage} failed: {error}")
        self.stage, self.error = stage, error


def _error_record(run: Path, stage: str, error: Exception) -> None:
    run.mkdir(parents=True, exist_ok=True)
    record = {"stage": stage, "type": type(error).__name__, "message": str(error),
              "traceback": traceback.format_exception(type(error), error, error.__traceback__)}
    (run / "error.json").write_text(json.dumps(record, indent=1) + "\n")


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="jmap", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="logging verbosity")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, handler, help_):
        p = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt)
        p.set_defaults(handler=handler)
        return p

    p = add("phantom", cmd_phantom, "generate a synthetic corpus with a manifest and NIfTI scans")
    p.add_argument("--out", required=True, help="output root; scans go to <out>/<subject>/<modality>.nii")
    p.add_argument("--per-class", type=int, default=12, help="subjects per class")
    p.add_argument("--dims", type=int, default=32, help="cubic grid size")
    p.add_argument("--atrophy-region", type=int, default=3, help="atlas label that shrinks with class")
    p.add_argument("--variation", type=float, default=0.5, help="subject-level random deformation amplitude")
    p.add_argument("--noise", type=float, default=0.01, help="additive Gaussian noise sigma")
    p.add_argument("--seed", type=int, default=0, help="corpus seed")
    p.add_argument("--with-truth", action="store_true", help="also write ground-truth displacement fields")

    p = add("preprocess", cmd_preprocess, "percentile min-max normalisation and brain masking")
    p.add_argument("--input", required=True, help="input NIfTI")
    p.add_argument("--output", required=True, help="masked, normalised NIfTI")
    p.add_argument("--mask-output", help="optional label NIfTI for the brain mask")
    p.add_argument("--lower-percentile", type=float, default=1.0, help="lower clip percentile")
    p.add_argument("--upper-percentile", type=float, default=99.0, help="upper clip percentile")
    p.add_argument("--mask-threshold", type=float, default=None,
                   help="keep voxels above this fraction of the maximum; Otsu when omitted")

    p = add("register", cmd_register, "affine then B-spline registration of a moving scan to a fixed template")
    p.add_argument("--fixed", required=True, help="fixed (template) NIfTI")
    p.add_argument("--moving", required=True, help="moving (subject) NIfTI")
    p.add_argument("--out", required=True,
                   help="output prefix for _affine.txt, _bspline.txt, _field_v{x,y,z}.nii, _warped.nii")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    _registration_args(p)

    p = add("jacobian", cmd_jacobian, "Jacobian determinant, log-determinant and class maps of a field")
    p.add_argument("--field", required=True, help="displacement field prefix (reads _vx/_vy/_vz.nii)")
    p.add_argument("--out", required=True, help="output prefix for _det.nii, _logdet.nii, _class.nii")
    p.add_argument("--tolerance", type=float, default=1e-3, help="|det - 1| below this counts as no change")

    p = add("balance", cmd_balance, "build a sample bundle and balance it with SMOTE")
    p.add_argument("--samples", help="input .npz sample bundle")
    p.add_argument("--manifest", help="build the bundle from this manifest instead")
    p.add_argument("--inputs", nargs="+", default=[], metavar="PATTERN",
                   help="per-channel NIfTI path patterns with {subject}, e.g. jac/{subject}_det.nii")
    p.add_argument("--mask", help="label NIfTI; channels are standardised inside it and zeroed outside")
    p.add_argument("--standardize", choices=["cohort", "subject"], default="cohort",
                   help="pool mean and variance over all subjects, or use each scan's own")
    p.add_argument("--out", required=True, help="balanced .npz sample bundle")
    p.add_argument("--k-neighbors", type=int, default=5, help="same-class neighbours to draw from; 0 only writes the bundle")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")

    p = add("train", cmd_train, "k-fold training with early stopping; writes fold checkpoints and curves")
    p.add_argument("--samples", required=True, help=".npz sample bundle of real subjects")
    p.add_argument("--out", required=True, help="directory for fold<k>.ckpt, curves.csv, folds.json")
    p.add_argument("--folds", type=int, default=5, help="number of folds")
    p.add_argument("--smote-k", type=int, default=5, help="SMOTE neighbours for training folds; 0 disables")
    p.add_argument("--seed", type=int, default=0, help="fold, shuffle, dropout and init seed")
    _train_args(p)

    p = add("evaluate", cmd_evaluate, "confusion matrix and per-class metrics of a checkpoint")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--samples", required=True, help=".npz sample bundle")
    p.add_argument("--subjects", nargs="*", default=None, help="restrict to these subject ids")
    p.add_argument("--out", help="write metrics JSON here")

    p = add("explain", cmd_explain, "3D Grad-CAM heatmap of one subject")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--samples", required=True, help=".npz sample bundle holding the subject")
    p.add_argument("--subject", required=True, help="subject id")
    p.add_argument("--class-index", type=int, default=None, help="target class; the subject's label when omitted")
    p.add_argument("--layer", default="block3", help="conv block to explain")
    p.add_argument("--like", help="NIfTI whose geometry the heatmap inherits")
    p.add_argument("--out", required=True, help="heatmap NIfTI")

    p = add("rank-regions", cmd_rank_regions, "rank atlas regions by mean heatmap intensity")
    p.add_argument("--heatmap", nargs="+", required=True, help="heatmap NIfTI(s); several are averaged per region")
    p.add_argument("--atlas", required=True, help="label NIfTI with region names sidecar")
    p.add_argument("--label", default="heatmap", help="column label in the table")
    p.add_argument("--include-background", action="store_true", help="rank label 0 too")
    p.add_argument("--decimals", type=int, default=2, help="decimals in the printed table")
    p.add_argument("--out", help="write the ranking as CSV here")

    p = add("render", cmd_render, "heatmap overlays on orthogonal slices (PGM/PPM, optional PNG)")
    p.add_argument("--volume", required=True, help="anatomical NIfTI")
    p.add_argument("--heatmap", required=True, help="heatmap NIfTI on the same grid")
    p.add_argument("--axis", type=int, nargs="+", default=[0, 1, 2], choices=[0, 1, 2],
                   help="0 sagittal, 1 coronal, 2 axial")
    p.add_argument("--slices", type=int, nargs="*", default=None, help="slice indices; the centre when omitted")
    p.add_argument("--prefix", default="overlay", help="file name prefix")
    p.add_argument("--png", action="store_true", help="also write PNG (needs Pillow)")
    p.add_argument("--out", required=True, help="output directory")

    p = add("report", cmd_report, "markdown ablation table and region tables")
    p.add_argument("--metrics", nargs="+", required=True, metavar="ARM=PATH", help="metrics JSON per arm")
    p.add_argument("--regions", nargs="*", default=[], help="region CSVs from rank-regions or a pipeline run")
    p.add_argument("--decimals", type=int, default=2, help="decimals in region tables")
    p.add_argument("--out", help="write the markdown here")

    p = add("pipeline", cmd_pipeline, "run every stage; --ablate trains both the REG and the JM arm")
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--ablate", action="store_true", help="run both arms and write the ablation report")
    p.add_argument("--mode", choices=["REG", "JM"], default=None, help="model input when not ablating")
    p.add_argument("--modality", choices=["mri", "ct", "fused"], default=None, help="scans to use")
    p.add_argument("--alpha", type=float, default=None, help="bending-energy weight")
    p.add_argument("--bins", type=int, default=None, help="Parzen histogram bins")
    p.add_argument("--seed", type=int, default=None, help="pipeline seed (folds, SMOTE, training)")
    p.add_argument("--out", default=None, help="parent of the run-<hash> directory")
    return parser


def main(argv=None) -> int:
    from .net import CheckpointError
    from .pipeline import ConfigError, InvariantError
    from .volume import NiftiError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantError as e:
        print(f"invariant violation: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except _Staged as e:
        if isinstance(e.error, InvariantError):
            print(f"invariant violation in {e.stage}: {e.error}", file=sys.stderr)
            return EXIT_INVARIANT
        if isinstance(e.error, ConfigError):
            print(f"config error in {e.stage}: {e.error}", file=sys.stderr)
            return EXIT_CONFIG
        print(json.dumps({"stage": e.stage, "type": type(e.error).__name__, "message": str(e.error)}), file=sys.stderr)
        return EXIT_STAGE
    except (OSError, ValueError, KeyError, NiftiError, CheckpointError) as e:
        print(json.dumps({"stage": args.command, "type": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
