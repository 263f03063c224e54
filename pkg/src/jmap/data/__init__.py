"""Phantoms, manifests, splits, SMOTE and early fusion."""
from .corpus import CLASS_ATROPHY, CorpusConfig, build_corpus, corpus_specs, write_template
from .dataset import (
    CLASS_ORDER,
    ClassLabel,
    Manifest,
    Sample,
    Subject,
    cdr_to_class,
    channels_to_volume,
    fuse_early,
    kfold,
    read_manifest,
    smote_balance,
    split_by_subject,
    volume_to_channels,
    write_manifest,
)
from .phantom import MODALITIES, REGION_NAMES, Phantom, PhantomSpec, Template, build_template, generate_phantom

__all__ = [
    "CLASS_ATROPHY",
    "CLASS_ORDER",
    "ClassLabel",
    "CorpusConfig",
    "MODALITIES",
    "Manifest",
    "Phantom",
    "PhantomSpec",
    "REGION_NAMES",
    "Sample",
    "Subject",
    "Template",
    "build_corpus",
    "build_template",
    "cdr_to_class",
    "channels_to_volume",
    "corpus_specs",
    "fuse_early",
    "generate_phantom",
    "kfold",
    "read_manifest",
    "smote_balance",
    "split_by_subject",
    "volume_to_channels",
    "write_manifest",
    "write_template",
]
