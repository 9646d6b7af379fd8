"""
Run configuration: one JSON document drives every CLI command.

Missing keys are filled from the named presets in ``pipeline_constants``;
unknown keys are rejected. ``RunConfigValidator`` checks cross-module
invariants before any compute starts.
"""
import json
import os
from dataclasses import dataclass, field, fields

from models import AliTokError
from models.ar_generator import ARConfig
from models.kv_sampler import SamplingConfig
from models.optim import OptimizerConfig
from models.pipeline_constants import (
    TRAINING_BUDGETS, get_ar_preset, get_sampling_preset, get_tokenizer_preset,
)
from models.synthetic_data import SyntheticSpec
from models.tokenizer import TokConfig

SCHEMA_VERSION = 1
SECTIONS = (
    "tokenizer", "ar", "sampling", "data", "optimizer_tok", "optimizer_ar",
    "training", "seeds", "paths", "tracking",
)
# Fields of ARConfig that follow from the tokenizer and dataset rather than the config file
AR_DERIVED = {"vocab", "K", "H", "W", "classes"}
# Declared-only tokenizer keys: checked against the derived value, never passed on
TOKENIZER_CHECKED = {"K"}

TRAINING_KEYS = {"tok_steps", "tok2_steps", "ar_steps", "log_every", "eval_batch"}
SEED_KEYS = {"tokenizer", "ar", "sample"}
PATH_KEYS = {"data_dir", "run_dir"}
TRACKING_KEYS = {"enabled", "tracking_uri", "experiment"}


class ConfigValidationError(AliTokError, ValueError):
    pass


def _field_names(cls):
    return {f.name for f in fields(cls)}


def _reject_unknown(section, values, allowed):
    unknown = sorted(set(values) - set(allowed))
    if unknown:
        raise ConfigValidationError(f"[{section}] unknown keys: {unknown}")


@dataclass
class RunConfig:
    preset: str = "desk"
    ar_preset: str = "desk"
    sampling_preset: str = "no_cfg"
    tokenizer: dict = field(default_factory=dict)
    ar: dict = field(default_factory=dict)
    sampling: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    optimizer_tok: dict = field(default_factory=dict)
    optimizer_ar: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)
    tracking: dict = field(default_factory=dict)

    # --- typed views ---

    def tok_config(self):
        values = {k: v for k, v in self.tokenizer.items() if k not in TOKENIZER_CHECKED}
        return TokConfig(**values)

    def synthetic_spec(self):
        return SyntheticSpec(**self.data)

    def ar_config(self, tok_cfg=None):
        tok_cfg = tok_cfg or self.tok_config()
        return ARConfig.for_tokenizer(tok_cfg, classes=self.synthetic_spec().classes, **self.ar)

    def sampling_config(self):
        return SamplingConfig(**self.sampling)

    def optimizer_config(self, which):
        return OptimizerConfig(**(self.optimizer_tok if which == "tok" else self.optimizer_ar))

    def seed(self, stage):
        return int(self.seeds[stage])

    def path(self, *parts):
        return os.path.join(self.paths["run_dir"], *parts)

    def override_seed(self, seed):
        """Apply one seed to every stage and to the dataset spec."""
        for key in SEED_KEYS:
            self.seeds[key] = int(seed)
        self.data["seed"] = int(seed)

    def to_dict(self):
        payload = {"schema_version": SCHEMA_VERSION, "preset": self.preset,
                   "ar_preset": self.ar_preset, "sampling_preset": self.sampling_preset}
        payload.update({name: dict(getattr(self, name)) for name in SECTIONS})
        return payload


def default_sections(preset, ar_preset, sampling_preset):
    tokenizer = get_tokenizer_preset(preset)
    budget = TRAINING_BUDGETS.get(preset, TRAINING_BUDGETS["desk"])
    return {
        "tokenizer": tokenizer,
        "ar": get_ar_preset(ar_preset),
        "sampling": get_sampling_preset(sampling_preset),
        "data": {"image_h": tokenizer["image_h"], "image_w": tokenizer["image_w"]},
        "optimizer_tok": {"base_lr": 1e-4, "min_lr": 1e-5},
        "optimizer_ar": {"base_lr": 4e-4, "min_lr": 1e-5},
        "training": {**budget, "log_every": 50, "eval_batch": 32},
        "seeds": {"tokenizer": 0, "ar": 0, "sample": 0},
        "paths": {"data_dir": os.path.join("data", "synthetic"), "run_dir": os.path.join("reports", "run")},
        "tracking": {"enabled": False, "tracking_uri": None, "experiment": "alitok"},
    }


def run_config_from_dict(payload):
    payload = dict(payload)
    version = payload.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigValidationError(f"schema_version {version} is not supported (expected {SCHEMA_VERSION})")
    preset = payload.pop("preset", "desk")
    ar_preset = payload.pop("ar_preset", "desk")
    sampling_preset = payload.pop("sampling_preset", "no_cfg")
    _reject_unknown("root", payload, SECTIONS)

    try:
        sections = default_sections(preset, ar_preset, sampling_preset)
    except KeyError as e:
        raise ConfigValidationError(str(e.args[0])) from None

    allowed = {
        "tokenizer": _field_names(TokConfig) | TOKENIZER_CHECKED,
        "ar": _field_names(ARConfig) - AR_DERIVED,
        "sampling": _field_names(SamplingConfig),
        "data": _field_names(SyntheticSpec),
        "optimizer_tok": _field_names(OptimizerConfig),
        "optimizer_ar": _field_names(OptimizerConfig),
        "training": TRAINING_KEYS,
        "seeds": SEED_KEYS,
        "paths": PATH_KEYS,
        "tracking": TRACKING_KEYS,
    }
    for name, values in payload.items():
        if not isinstance(values, dict):
            raise ConfigValidationError(f"[{name}] must be an object, got {type(values).__name__}")
        _reject_unknown(name, values, allowed[name])
        sections[name].update(values)

    # data image size follows the tokenizer unless set explicitly
    tokenizer_section = payload.get("tokenizer", {})
    data_section = payload.get("data", {})
    for key in ("image_h", "image_w"):
        if key in tokenizer_section and key not in data_section:
            sections["data"][key] = sections["tokenizer"][key]

    return RunConfig(preset=preset, ar_preset=ar_preset, sampling_preset=sampling_preset, **sections)


def load_run_config(path=None):
    """Read and validate a config file; ``None`` gives the validated defaults."""
    payload = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                payload = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigValidationError(f"{path}: not valid JSON ({e})") from None
    cfg = run_config_from_dict(payload)
    RunConfigValidator.validate(cfg)
    return cfg


def write_run_config(cfg, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)


class RunConfigValidator:
    """Cross-module checks; constructor-level checks surface as section errors."""

    @staticmethod
    def validate(cfg, verbose=False):
        if verbose:
            print("\n🛡️ Running Run Config Validation...")

        typed = {}
        for section, build in (
            ("tokenizer", cfg.tok_config),
            ("data", cfg.synthetic_spec),
            ("sampling", cfg.sampling_config),
            ("optimizer_tok", lambda: cfg.optimizer_config("tok")),
            ("optimizer_ar", lambda: cfg.optimizer_config("ar")),
        ):
            try:
                typed[section] = build()
            except (TypeError, ValueError) as e:
                raise ConfigValidationError(f"Validator Error: [{section}] {e}") from None
        try:
            typed["ar"] = cfg.ar_config(typed["tokenizer"])
        except (TypeError, ValueError) as e:
            raise ConfigValidationError(f"Validator Error: [ar] {e}") from None

        tok, data = typed["tokenizer"], typed["data"]
        declared_k = cfg.tokenizer.get("K")
        if declared_k is not None and declared_k != tok.K:
            raise ConfigValidationError(
                f"Validator Error: K={declared_k} but prefix tokens require K = W = {tok.W}"
                if tok.use_prefix else f"Validator Error: K={declared_k} declared with prefix tokens disabled"
            )
        if tok.use_aux and not tok.use_prefix:
            raise ConfigValidationError("Validator Error: the auxiliary first-row loss needs prefix tokens")
        if tok.width % tok.heads:
            raise ConfigValidationError(f"Validator Error: tokenizer width {tok.width} not divisible by {tok.heads} heads")
        if tok.image_h % 4 or tok.image_w % 4:
            raise ConfigValidationError("Validator Error: image dims must be divisible by 4 for the feature loss")
        if not 0.0 < tok.usage_decay < 1.0:
            raise ConfigValidationError(f"Validator Error: usage_decay must lie in (0, 1), got {tok.usage_decay}")
        if tok.codebook_size < 2 or tok.codebook_size > 65536:
            raise ConfigValidationError("Validator Error: codebook_size must lie in [2, 65536] (u16 token files)")
        if tok.buffer_count < 0:
            raise ConfigValidationError("Validator Error: buffer_count must be non-negative")
        if (data.image_h, data.image_w) != (tok.image_h, tok.image_w):
            raise ConfigValidationError(
                f"Validator Error: data images {data.image_h}x{data.image_w} "
                f"differ from tokenizer input {tok.image_h}x{tok.image_w}"
            )
        for key in ("tok_steps", "tok2_steps", "ar_steps", "log_every", "eval_batch"):
            if int(cfg.training[key]) < 1:
                raise ConfigValidationError(f"Validator Error: training.{key} must be >= 1")

        if verbose:
            print(f"✅ Config Validation Passed: seq_len={tok.seq_len}, V={tok.codebook_size}, "
                  f"AR {typed['ar'].depth}x{typed['ar'].width}.")
        return typed
