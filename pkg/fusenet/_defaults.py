"""
Run configuration presets.

``paper`` holds the full-scale settings (112 voxel patches at 2 mm, full
width networks, 60 epochs). ``desk`` shrinks volumes, patches and channel
counts so the whole pipeline runs on a CPU in minutes.
"""
from typing import Any, Dict


PRESETS: Dict[str, Dict[str, Any]] = {
    "desk": {
        "phantom": {
            "dims": [32, 32, 32],
            "spacing_mm": [2.5, 2.5, 2.5],
        },
        "synth": {
            "n_scans": 100,
            "diseased_fraction": 0.636,
            "multi_disease_rate": 0.0,
            "signal": "raw_visible",
            "seed": 0,
        },
        "preproc": {
            "target_spacing_mm": [2.5, 2.5, 2.5],
            "hu_window": [-1000.0, 800.0],
            "target_dims": [32, 32, 32],
            "interpolation": "cubic_bspline",
        },
        "segnet": {
            "stack_channels": [12, 12, 12],
            "dense_layers_per_stack": 2,
            "init_channels": 8,
            "skip_channels": 6,
            "prior_grid": 8,
        },
        "pretrain": {
            "epochs": 30,
            "lr": 1e-3,
            "seed": 0,
            "holdout": 5,
        },
        "select": {
            "k": 13,
        },
        "split": {
            "fractions": [0.675, 0.225, 0.10],
            "seed": 0,
        },
        "classifier": {
            "blocks_per_resolution": 1,
            "resolutions": 3,
            "base_channels": 8,
            "max_channels": 32,
        },
        "train": {
            "epochs": 12,
            "batch_size": 8,
            "lr_max": 1e-3,
            "lr_min": 1e-7,
            "decay_per_cycle": 1e-4,
            "seed": 0,
        },
        "patch": {
            "patch_dims": [32, 32, 32],
            "guide_labels": [2, 3],
        },
    },
    "paper": {
        "phantom": {
            "dims": [112, 112, 112],
            "spacing_mm": [2.0, 2.0, 2.0],
        },
        "synth": {
            "n_scans": 100,
            "diseased_fraction": 0.636,
            "multi_disease_rate": 0.1,
            "signal": "raw_visible",
            "seed": 0,
        },
        "preproc": {
            "target_spacing_mm": [2.0, 2.0, 2.0],
            "hu_window": [-1000.0, 800.0],
            "target_dims": [112, 112, 112],
            "interpolation": "cubic_bspline",
        },
        "segnet": {},
        "pretrain": {
            "epochs": 50,
            "lr": 1e-3,
            "seed": 0,
            "holdout": 5,
        },
        "select": {
            "k": 13,
        },
        "split": {
            "fractions": [0.675, 0.225, 0.10],
            "seed": 0,
        },
        "classifier": {},
        "train": {
            "epochs": 60,
            "batch_size": 16,
            "lr_max": 1e-3,
            "lr_min": 1e-7,
            "decay_per_cycle": 1e-4,
            "seed": 0,
        },
        "patch": {
            "patch_dims": [112, 112, 112],
            "guide_labels": [2, 3],
        },
    },
}

DEFAULT_PRESET = "desk"

#: Alternate preset names.
PRESET_ALIASES: Dict[str, str] = {"full": "paper"}


def preset_name(name: str) -> str:
    """
    Canonical preset name, resolving aliases.

    >>> preset_name("full")
    'paper'
    """
    return PRESET_ALIASES.get(name, name)
