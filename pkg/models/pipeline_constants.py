# pipeline_constants.py
# Centralized presets for the tokenizer, the AR generator, sampling and the ablation ladder.

TOKENIZER_PRESETS = {
    # 8x8 images, 2x2 patch grid: small enough for full-parameter gradient checks
    "micro": {
        "image_h": 8, "image_w": 8, "f": 4,
        "codebook_size": 8, "d_c": 4,
        "width": 16, "heads": 2, "enc_depth": 1, "dec_depth": 1, "dec2_depth": 1,
        "buffer_count": 2,
    },

    # CPU-trainable in minutes: 32x32 images, 8x8 grid, 8 prefix tokens
    "desk": {
        "image_h": 32, "image_w": 32, "f": 4,
        "codebook_size": 64, "d_c": 8,
        "width": 64, "heads": 4, "enc_depth": 2, "dec_depth": 2, "dec2_depth": 3,
        "buffer_count": 16,
    },

    # Full-size layout: 256x256, f=16, 16 prefix tokens, 64 buffer tokens (validated, not trained)
    "paper": {
        "image_h": 256, "image_w": 256, "f": 16,
        "codebook_size": 4096, "d_c": 32,
        "width": 768, "heads": 12, "enc_depth": 12, "dec_depth": 12, "dec2_depth": 12,
        "buffer_count": 64,
    },
}

AR_PRESETS = {
    "micro": {"width": 16, "heads": 2, "depth": 1},
    "desk": {"width": 128, "heads": 4, "depth": 4},
    "paper_b": {"width": 768, "heads": 12, "depth": 24},
    "paper_l": {"width": 1024, "heads": 16, "depth": 24},
    "paper_xl": {"width": 1280, "heads": 20, "depth": 32},
}

SAMPLING_PRESETS = {
    "no_cfg": {"temperature": 0.95, "use_cfg": False, "guidance_scale": 1.0, "scaler_power": 1.0},
    "cfg_b": {"temperature": 1.0, "use_cfg": True, "guidance_scale": 11.0, "scaler_power": 1.3},
    "cfg_l": {"temperature": 1.0, "use_cfg": True, "guidance_scale": 5.0, "scaler_power": 0.6},
    "cfg_xl": {"temperature": 1.0, "use_cfg": True, "guidance_scale": 8.0, "scaler_power": 1.4},
}

# Steps per run; "desk" matches the directional ablation budgets
TRAINING_BUDGETS = {
    "micro": {"tok_steps": 20, "tok2_steps": 20, "ar_steps": 20},
    "desk": {"tok_steps": 3000, "tok2_steps": 1500, "ar_steps": 5000},
}

# Tokenizer overrides per ablation row. Rows A and B must differ only in stage1_mask.
ABLATION_EXPERIMENTS = {
    "A": {"tokenizer": {"stage1_mask": "bidirectional", "use_prefix": False, "use_aux": False}, "stages": 1},
    "B": {"tokenizer": {"stage1_mask": "causal", "use_prefix": False, "use_aux": False}, "stages": 1},
    "C": {"tokenizer": {"stage1_mask": "causal", "use_prefix": True, "use_aux": False}, "stages": 1},
    "D": {"tokenizer": {"stage1_mask": "causal", "use_prefix": True, "use_aux": True}, "stages": 1},
    # longer schedule for both models, still a single tokenizer stage
    "E": {"tokenizer": {"stage1_mask": "causal", "use_prefix": True, "use_aux": True}, "stages": 1,
          "budget_factor": 2},
    "F": {"tokenizer": {"stage1_mask": "causal", "use_prefix": True, "use_aux": True}, "stages": 2},
}

DEFAULT_ABLATION_LABELS = ["A", "B", "C", "D", "F"]

# The active preset consumed when a run config does not name one
CURRENT_PRESET = "desk"
CURRENT_AR_PRESET = "desk"
CURRENT_SAMPLING = "no_cfg"


def get_tokenizer_preset(name=None):
    """Returns the TokConfig overrides for a preset (the active one by default)."""
    name = name or CURRENT_PRESET
    if name not in TOKENIZER_PRESETS:
        raise KeyError(f"unknown tokenizer preset {name!r}; choose from {sorted(TOKENIZER_PRESETS)}")
    return dict(TOKENIZER_PRESETS[name])


def get_ar_preset(name=None):
    name = name or CURRENT_AR_PRESET
    if name not in AR_PRESETS:
        raise KeyError(f"unknown AR preset {name!r}; choose from {sorted(AR_PRESETS)}")
    return dict(AR_PRESETS[name])


def get_sampling_preset(name=None):
    name = name or CURRENT_SAMPLING
    if name not in SAMPLING_PRESETS:
        raise KeyError(f"unknown sampling preset {name!r}; choose from {sorted(SAMPLING_PRESETS)}")
    return dict(SAMPLING_PRESETS[name])


def get_ablation_experiment(label):
    if label not in ABLATION_EXPERIMENTS:
        raise KeyError(f"unknown ablation label {label!r}; choose from {sorted(ABLATION_EXPERIMENTS)}")
    experiment = ABLATION_EXPERIMENTS[label]
    return {**experiment, "tokenizer": dict(experiment["tokenizer"])}
