"""Boundary labels, synthetic scenes, augmentation and dataset files."""

from .augment import TRAIN_SCALES, augment, hflip, resize_image, resize_nearest
from .boundary import extract_boundary
from .io import export_pgm, read_dataset, read_pgm, write_dataset
from .synth import SCENARIOS, DatasetSpec, SampleRecord, class_palette, gen_sample, generate_dataset

__all__ = [
    "SCENARIOS",
    "TRAIN_SCALES",
    "DatasetSpec",
    "SampleRecord",
    "augment",
    "class_palette",
    "export_pgm",
    "extract_boundary",
    "gen_sample",
    "generate_dataset",
    "hflip",
    "read_dataset",
    "read_pgm",
    "resize_image",
    "resize_nearest",
    "write_dataset",
]
