import copy
import json
import os
from typing import Optional

from jsonschema import validate, ValidationError

from dpersona import common
from dpersona.common import ConfigurationError

DEFAULTS = {
    "synthgen": {
        "height": 64,
        "width": 64,
        "num_raters": 4,
        "train": 200,
        "val": 20,
        "test": 50,
        "seed": 7,
        "offset_range": 2.0,
        "deformation_amplitude": 1.0,
        "flip_noise": 0.02,
        "profiles": None,
        "radius_range": [0.12, 0.22],
        "fourier_scale": 0.08,
        "blur_range": [1.0, 3.0],
        "noise_std": 0.3,
        "workers": 1,
    },
    "model": {
        "latent_dim": 6,
        "channels": [16, 32, 64],
        "encoder_channels": [16, 32, 64],
        "head_channels": 16,
        "proj_hidden": None,
        "groups": 4,
    },
    "stage1": {
        "epochs": 100,
        "learning_rate": 1e-4,
        "K": 10,
        "alpha": 1.0,
        "beta": 0.5,
        "l2": 1e-5,
        "batch_size": 16,
        "seed": 0,
        "kl_direction": "post_to_prior",
        "sigma_floor": 1e-6,
        "val_samples": 10,
        "augment": False,
    },
    "stage2": {
        "epochs": 200,
        "learning_rate": 1e-4,
        "M": 100,
        "seed": 0,
        "bank_policy": "resample_per_forward",
        "eval_bank_seed": 1234,
        "attention_scale": False,
        "batch_size": 16,
        "l2": 1e-5,
    },
    "metrics": {
        "samples": [10, 30, 50],
        "thresholds": [0.1, 0.3, 0.5, 0.7, 0.9],
        "binarize": 0.5,
        "seed": 0,
        "workers": 1,
        "overlays": 4,
    },
    "baselines": {
        "epochs": 100,
        "learning_rate": 1e-4,
        "batch_size": 16,
        "seed": 0,
        "l2": 1e-5,
        "staple_max_iters": 50,
        "staple_tol": 1e-6,
    },
    "ablation": {
        "K": [6, 8, 10, 12, 14],
        "beta": [0.01, 0.1, 0.5, 1.0, 2.0],
        "samples": 50,
    },
}

_number = {"type": "number"}
_int = {"type": "integer"}
_bool = {"type": "boolean"}
_num_pair = {"type": "array", "items": _number, "minItems": 2, "maxItems": 2}
_int_list = {"type": "array", "items": _int, "minItems": 1}
_num_list = {"type": "array", "items": _number, "minItems": 1}


def _section(properties: dict) -> dict:
    return {"type": "object", "properties": properties, "additionalProperties": False}


CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "synthgen": _section({
            "height": {"type": "integer", "minimum": 32},
            "width": {"type": "integer", "minimum": 32},
            "num_raters": _int,
            "train": {"type": "integer", "minimum": 1},
            "val": {"type": "integer", "minimum": 1},
            "test": {"type": "integer", "minimum": 1},
            "seed": _int,
            "offset_range": _number,
            "deformation_amplitude": {"type": "number", "minimum": 0},
            "flip_noise": {"type": "number", "minimum": 0, "maximum": 0.05},
            "profiles": {"anyOf": [{"type": "null"}, {"type": "array", "items": _section({
                "boundary_offset": _number,
                "deformation_amplitude": {"type": "number", "minimum": 0},
                "flip_noise": {"type": "number", "minimum": 0, "maximum": 0.05},
            })}]},
            "radius_range": _num_pair,
            "fourier_scale": {"type": "number", "minimum": 0},
            "blur_range": _num_pair,
            "noise_std": {"type": "number", "minimum": 0},
            "workers": {"type": "integer", "minimum": 1},
        }),
        "model": _section({
            "latent_dim": {"type": "integer", "minimum": 1},
            "channels": _int_list,
            "encoder_channels": _int_list,
            "head_channels": {"type": "integer", "minimum": 1},
            "proj_hidden": {"anyOf": [{"type": "null"}, {"type": "integer", "minimum": 1}]},
            "groups": {"type": "integer", "minimum": 1},
        }),
        "stage1": _section({
            "epochs": {"type": "integer", "minimum": 1},
            "learning_rate": _number,
            "K": {"type": "integer", "minimum": 2},
            "alpha": {"type": "number", "minimum": 0},
            "beta": {"type": "number", "minimum": 0},
            "l2": {"type": "number", "minimum": 0},
            "batch_size": {"type": "integer", "minimum": 1},
            "seed": _int,
            "kl_direction": {"enum": ["prior_to_post", "post_to_prior"]},
            "sigma_floor": {"type": "number", "minimum": 0},
            "val_samples": {"type": "integer", "minimum": 1},
            "augment": _bool,
        }),
        "stage2": _section({
            "epochs": {"type": "integer", "minimum": 0},
            "learning_rate": _number,
            "M": {"type": "integer", "minimum": 1},
            "seed": _int,
            "bank_policy": {"enum": ["resample_per_forward", "fixed_per_image"]},
            "eval_bank_seed": _int,
            "attention_scale": _bool,
            "batch_size": {"type": "integer", "minimum": 1},
            "l2": {"type": "number", "minimum": 0},
        }),
        "metrics": _section({
            "samples": _int_list,
            "thresholds": _num_list,
            "binarize": _number,
            "seed": _int,
            "workers": {"type": "integer", "minimum": 1},
            "overlays": {"type": "integer", "minimum": 0},
        }),
        "baselines": _section({
            "epochs": {"type": "integer", "minimum": 1},
            "learning_rate": _number,
            "batch_size": {"type": "integer", "minimum": 1},
            "seed": _int,
            "l2": {"type": "number", "minimum": 0},
            "staple_max_iters": {"type": "integer", "minimum": 1},
            "staple_tol": {"type": "number", "minimum": 0},
        }),
        "ablation": _section({
            "K": _int_list,
            "beta": _num_list,
            "samples": {"type": "integer", "minimum": 1},
        }),
    },
}


def _merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


class ExperimentConfig:
    """
    Nested experiment configuration.

    Precedence: built-in DEFAULTS < JSON config file < explicit overrides (command-line flags).
    Unknown keys are rejected by the schema at every nesting level.
    """
    def __init__(self, values: Optional[dict] = None):
        values = values or {}
        try:
            validate(values, CONFIG_SCHEMA)
        except ValidationError as e:
            raise ConfigurationError(f"Invalid config: {e.message} at {list(e.absolute_path)}") from e
        self.values = _merge(DEFAULTS, values)
        validate(self.values, CONFIG_SCHEMA)
        if self.values['synthgen']['num_raters'] < 2:
            raise ConfigurationError(f"synthgen.num_raters must be >= 2, got {self.values['synthgen']['num_raters']}")

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[dict] = None) -> 'ExperimentConfig':
        values = {}
        if path is not None:
            if not os.path.exists(path):
                raise ConfigurationError(f"Config file {path} does not exist!")
            with open(path, 'r') as f:
                values = json.load(f)
        if overrides:
            values = _merge(values, overrides)
        return cls(values)

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def with_overrides(self, overrides: dict) -> 'ExperimentConfig':
        return ExperimentConfig(_merge(self.values, overrides))

    def hash(self) -> str:
        return common.json_hash(self.values)

    def shape_hash(self) -> str:
        return shape_hash(
            latent_dim=self.values['model']['latent_dim'],
            num_raters=self.values['synthgen']['num_raters'],
            height=self.values['synthgen']['height'],
            width=self.values['synthgen']['width'],
        )

    def to_json(self) -> str:
        return json.dumps(self.values, sort_keys=True, indent=2)


def shape_hash(latent_dim: int, num_raters: int, height: int, width: int) -> str:
    return common.json_hash({"D": int(latent_dim), "R": int(num_raters), "H": int(height), "W": int(width)})
