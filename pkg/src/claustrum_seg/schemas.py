"""JSON schemas for every file the CLI reads or writes."""
from __future__ import annotations

import jsonschema

_num = {"type": "number"}
_int = {"type": "integer"}
_str = {"type": "string"}
_nullable_num = {"type": ["number", "null"]}
_pair = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}

WINDOW = {
    "type": "object",
    "properties": {"row0": _int, "col0": _int, "rows": _int, "cols": _int},
    "required": ["row0", "col0", "rows", "cols"],
    "additionalProperties": False,
}

CLASS_WEIGHTS = {
    "type": "object",
    "properties": {"w": _num, "one_minus_w": _num, "ci_pixels": _int, "total_pixels": _int},
    "required": ["w", "one_minus_w"],
}

ICC = {
    "type": ["object", "null"],
    "properties": {
        **{k: _nullable_num for k in ("ICC1", "ICC2", "ICC3", "ICC1k", "ICC2k", "ICC3k")},
        "types": {"type": "object"},
        "n_subjects": _int,
        "n_judges": _int,
        "note": _str,
    },
    "required": ["ICC1", "ICC2", "ICC3", "ICC1k", "ICC2k", "ICC3k", "n_subjects", "n_judges"],
}

UNET_CONFIG = {
    "type": "object",
    "properties": {
        "depth": {"type": "integer", "minimum": 1},
        "base_channels": {"type": "integer", "minimum": 1},
        "dropout_rate": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "bn_momentum": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "bn_epsilon": {"type": "number", "exclusiveMinimum": 0},
        "in_channels": {"type": "integer", "minimum": 1},
        "out_channels": {"type": "integer", "minimum": 1},
        "seed": _int,
    },
    "additionalProperties": False,
}

TRAIN_CONFIG = {
    "type": "object",
    "properties": {
        "learning_rate": {"type": "number", "exclusiveMinimum": 0},
        "adam_beta1": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "adam_beta2": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "adam_epsilon": {"type": "number", "exclusiveMinimum": 0},
        "l2_lambda": {"type": "number", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "max_epochs": {"type": "integer", "minimum": 1},
        "patience": {"type": "integer", "minimum": 1},
        "k_folds": {"type": "integer", "minimum": 2},
        "val_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "roi_margin": {"type": "integer", "minimum": 0},
        "threshold": {"type": "number", "minimum": 0, "maximum": 1},
        "seed": _int,
    },
    "additionalProperties": False,
}

AUGMENT_CONFIG = {
    "type": "object",
    "properties": {
        "elastic_alpha": {"type": "number", "minimum": 0},
        "elastic_sigma": {"type": "number", "exclusiveMinimum": 0},
        "max_rotation": {"type": "number", "minimum": 0},
        "max_translation": {"type": "number", "minimum": 0},
        "max_scale_delta": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "intensity_gain_range": _pair,
        "intensity_bias_range": _pair,
        "copies_per_sample": {"type": "integer", "minimum": 0},
        "seed": _int,
    },
    "additionalProperties": False,
}

RUN_CONFIG = {
    "type": "object",
    "properties": {"unet": UNET_CONFIG, "train": TRAIN_CONFIG, "augment": AUGMENT_CONFIG},
    "additionalProperties": False,
}

FOLD_REPORT = {
    "type": "object",
    "properties": {
        "fold_index": _int,
        "test_subjects": {"type": "array", "items": _str},
        "per_subject_dice": {"type": "object", "additionalProperties": _num},
        "mean_dice": _num,
        "epochs_trained": _int,
        "stop_reason": {"enum": ["early", "max"]},
        "best_epoch": _int,
        "window": WINDOW,
        "class_weights": CLASS_WEIGHTS,
        "provenance": {"type": "object"},
    },
    "required": ["fold_index", "test_subjects", "per_subject_dice", "mean_dice", "epochs_trained", "stop_reason"],
}

CV_REPORT = {
    "type": "object",
    "properties": {
        "aggregate_dice": _num,
        "folds": {"type": "array", "items": FOLD_REPORT},
        "assignments": {"type": "array", "items": {"type": "array", "items": _str}},
        "icc": ICC,
    },
    "required": ["aggregate_dice", "folds", "assignments", "icc"],
}

RUN_MANIFEST = {
    "type": "object",
    "properties": {
        "tool_version": _str,
        "seed": _int,
        "config": RUN_CONFIG,
        "phantom_config": {"type": ["object", "null"]},
        "fold_assignments": {"type": "array", "items": {"type": "array", "items": _str}},
        "checkpoints": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "properties": {"fold": _int, "window": WINDOW, "class_weights": CLASS_WEIGHTS},
                "required": ["fold", "window", "class_weights"],
            },
        },
        "normalization": _str,
        "inputs": {"type": "object", "additionalProperties": _str},
    },
    "required": ["tool_version", "seed", "config", "fold_assignments", "checkpoints", "normalization", "inputs"],
}

STATS_REPORT = {
    "type": "object",
    "properties": {
        "window": {"anyOf": [WINDOW, {"type": "null"}]},
        "slices": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "slice_id": _str,
                    "ci_pixels_before": _int,
                    "ci_pixels_after": _int,
                    "bg_pixels_before": _int,
                    "bg_pixels_after": _int,
                },
                "required": ["slice_id", "ci_pixels_before", "ci_pixels_after", "bg_pixels_before", "bg_pixels_after"],
            },
        },
        "aggregate": {"type": "object"},
    },
    "required": ["window", "slices", "aggregate"],
}

EVAL_REPORT = {
    "type": "object",
    "properties": {
        "per_subject_dice": {"type": "object", "additionalProperties": _num},
        "mean_dice": _num,
        "volumes": {"type": "object"},
        "icc": ICC,
    },
    "required": ["per_subject_dice", "mean_dice", "icc"],
}

PHANTOM_MANIFEST = {
    "type": "object",
    "properties": {
        "kind": {"const": "phantom_dataset"},
        "seed": _int,
        "config": {"type": "object"},
        "subjects": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {"subject_id": _str, "image": _str, "label": _str},
                "required": ["subject_id", "image", "label"],
            },
        },
        "foreground_fraction": _num,
    },
    "required": ["kind", "seed", "config", "subjects"],
}


class SchemaError(ValueError):
    pass


def validate(obj, schema, what: str = "document") -> None:
    """Raise SchemaError naming the offending field path."""
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(obj), key=lambda e: list(e.absolute_path))
    if errors:
        msgs = []
        for e in errors:
            path = "/".join(str(p) for p in e.absolute_path) or "<root>"
            msgs.append(f"{what}: {path}: {e.message}")
        raise SchemaError("\n".join(msgs))
