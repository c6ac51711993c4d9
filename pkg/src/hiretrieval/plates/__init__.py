"""Synthetic licence plates: bitmap font, rendering, distortions and scenes."""

from .synth import (
    BoundingBox,
    PlateConfig,
    PlateRenderError,
    PlateSpec,
    Scene,
    SceneConfig,
    Shadow,
    center_crop,
    crop,
    generate_plates,
    generate_scenes,
    make_scene,
    overlay,
    random_spec,
    read_manifest,
    render,
    render_clean,
    resize_bilinear,
)

__all__ = [
    "BoundingBox",
    "PlateConfig",
    "PlateRenderError",
    "PlateSpec",
    "Scene",
    "SceneConfig",
    "Shadow",
    "center_crop",
    "crop",
    "generate_plates",
    "generate_scenes",
    "make_scene",
    "overlay",
    "random_spec",
    "read_manifest",
    "render",
    "render_clean",
    "resize_bilinear",
]
