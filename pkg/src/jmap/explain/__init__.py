"""Grad-CAM heatmaps, overlays and atlas region ranking."""
from .gradcam import DEFAULT_LAYER, Heatmap, class_activation, grad_cam_3d, normalize_map, upsample
from .overlay import overlay_slices, read_pnm, view_slice
from .regions import (
    RegionReport,
    RegionRow,
    aggregate_reports,
    read_region_csv,
    region_rank,
    region_table_csv,
    render_ablation_table,
    render_region_table,
)

__all__ = [
    "DEFAULT_LAYER",
    "Heatmap",
    "RegionReport",
    "RegionRow",
    "aggregate_reports",
    "class_activation",
    "grad_cam_3d",
    "normalize_map",
    "overlay_slices",
    "read_pnm",
    "read_region_csv",
    "region_rank",
    "region_table_csv",
    "render_ablation_table",
    "render_region_table",
    "upsample",
    "view_slice",
]
