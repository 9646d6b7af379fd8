import os
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from models import AliTokError
from models.analysis_metrics import (
    AnalysisError, attention_asymmetry, reconstruct_batches, split_row_errors,
)
from models.ar_generator import ARConfig, build_token_dataset, train_ar
from models.optim import OptimizerConfig
from models.pipeline_constants import DEFAULT_ABLATION_LABELS, get_ablation_experiment
from models.tokenizer import TokConfig, encode_split, train_tokenizer
from models.tracking import log_artifact
from models.vq_codebook import utilization

# --- Config ---
BASE_DIR = os.path.dirname(os.path.abspath(__file__))
OUTPUT_DIR = os.path.join(BASE_DIR, "..", "reports", "ablation")

ABLATION_COLUMNS = [
    "label", "seed", "stages", "ar_loss", "ar_accuracy", "recon_mse",
    "first_row_mse", "rest_mse", "utilization", "causal_share",
]
REQUIRED_FINITE = ["ar_loss", "ar_accuracy", "recon_mse", "first_row_mse", "utilization"]
# Only the decoder mask may separate the bidirectional baseline from the causal-decoder row
MASK_ONLY_PAIRS = [("A", "B")]
MIN_DISTINGUISHING_STEPS = 500

DIRECTIONAL_METRICS = ["ar_accuracy", "recon_mse", "first_row_mse", "causal_share"]
# (row, reference, metric, relation, factor, message): row <relation> factor * reference
DIRECTIONAL_CHECKS = [
    ("B", "A", "ar_accuracy", "at_least", 1.2, "causal decoder should raise AR accuracy to at least 1.2x the baseline"),
    ("B", "A", "recon_mse", "at_most", 1.5, "causal decoder should keep reconstruction within 1.5x of the baseline"),
    ("D", "C", "first_row_mse", "below", 1.0, "auxiliary loss should lower first-row error"),
    ("F", "D", "recon_mse", "at_most", 1.0, "stage-2 decoder should not worsen reconstruction"),
    ("F", "A", "causal_share", "above", 1.0, "stage-2 decoder attention should lean further back than the baseline"),
]
RELATIONS = {
    "at_least": lambda a, b: a >= b,
    "at_most": lambda a, b: a <= b,
    "below": lambda a, b: a < b,
    "above": lambda a, b: a > b,
}


class AblationConfigError(AliTokError, ValueError):
    pass


@dataclass
class AblationBudget:
    tok_steps: int = 3000
    tok2_steps: int = 1500
    ar_steps: int = 5000
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    attention_images: int = 16


@dataclass
class AblationRow:
    label: str
    seed: int
    stages: int
    ar_loss: float
    ar_accuracy: float
    recon_mse: float
    first_row_mse: float
    rest_mse: float
    utilization: float
    causal_share: float


def config_diff(a, b):
    """Keys whose values differ between two config dicts."""
    return sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))


def audit_ablation_configs(configs):
    """Rows A and B must differ only in the stage-1 decoder mask."""
    for left, right in MASK_ONLY_PAIRS:
        if left in configs and right in configs:
            diff = config_diff(configs[left].to_dict(), configs[right].to_dict())
            if diff != ["stage1_mask"]:
                raise AblationConfigError(f"ablation rows {left}/{right} must differ only in stage1_mask, got {diff}")
    return True


def directional_flags(frame):
    """
    Expected orderings at matched budget; violations are reported, not raised.

    Rows are compared per seed when the table has a ``seed`` column, otherwise
    on label means. Checks whose rows or metric values are missing are skipped.
    """
    metrics = [m for m in DIRECTIONAL_METRICS if m in frame.columns]
    groups = list(frame.groupby("seed")) if "seed" in frame.columns else [(None, frame)]
    flags = []
    for seed, part in groups:
        means = part.groupby("label")[metrics].mean()
        where = "" if seed is None else f" (seed {seed})"
        for row, reference, metric, relation, factor, message in DIRECTIONAL_CHECKS:
            if metric not in metrics or row not in means.index or reference not in means.index:
                continue
            a, b = means.loc[row, metric], means.loc[reference, metric]
            if np.isnan(a) or np.isnan(b):
                continue
            if not RELATIONS[relation](a, factor * b):
                flags.append(f"{row} vs {reference}{where}: {message} ({metric} {a:.5f} vs {b:.5f})")
    return flags


class AblationSuite:
    """Trains tokenizer + AR pairs for each ablation label and seed under one budget."""

    def __init__(self, dataset, budget, base_tok=None, ar_overrides=None, labels=None,
                 optimizer_tok=None, optimizer_ar=None, output_dir=OUTPUT_DIR, log_every=500):
        self.dataset = dataset
        self.budget = budget
        self.base_tok = dict(base_tok or {})
        self.ar_overrides = dict(ar_overrides or {})
        self.labels = list(labels or DEFAULT_ABLATION_LABELS)
        self.optimizer_tok = optimizer_tok or OptimizerConfig()
        self.optimizer_ar = optimizer_ar or OptimizerConfig(base_lr=4e-4, min_lr=1e-5)
        self.output_dir = output_dir
        self.log_every = log_every
        self.flags = []

    def configs(self):
        out = {}
        for label in self.labels:
            experiment = get_ablation_experiment(label)
            out[label] = TokConfig(**{**self.base_tok, **experiment["tokenizer"]})
        return out

    def _run_one(self, label, tok_cfg, seed):
        experiment = get_ablation_experiment(label)
        factor = int(experiment.get("budget_factor", 1))
        stages = int(experiment["stages"])
        print(f"\n🔎 Ablation {label} | seed {seed} | mask={tok_cfg.stage1_mask} "
              f"prefix={tok_cfg.use_prefix} aux={tok_cfg.use_aux} stages={stages}")

        model, tok_metrics = train_tokenizer(
            self.dataset, tok_cfg, 1, self.budget.tok_steps * factor, self.optimizer_tok, seed,
            log_every=self.log_every,
        )
        if stages == 2:
            model, _ = train_tokenizer(
                self.dataset, tok_cfg, 2, self.budget.tok2_steps * factor, self.optimizer_tok, seed,
                model=model, log_every=self.log_every,
            )

        eval_images = self.dataset.images("eval")
        recon = reconstruct_batches(model, eval_images, stages)
        recon_mse = float(np.mean((recon.astype(np.float64) - eval_images) ** 2))
        row1, rest = split_row_errors(recon, eval_images, tok_cfg.f)
        util = utilization(model.codebook, encode_split(model, self.dataset, "eval"))
        try:
            share = attention_asymmetry(model, eval_images[:self.budget.attention_images], stage=stages).causal_share
        except AnalysisError as e:
            print(f"⚠️ Warning: attention asymmetry skipped ({e})")
            share = float("nan")

        tokens = build_token_dataset(model, self.dataset, "train")
        ar_cfg = ARConfig.for_tokenizer(tok_cfg, classes=self.dataset.spec.classes, **self.ar_overrides)
        _, ar_metrics = train_ar(
            tokens, ar_cfg, self.budget.ar_steps * factor, self.optimizer_ar, seed, log_every=self.log_every,
        )
        tail = ar_metrics.tail(max(1, len(ar_metrics) // 10))

        return AblationRow(
            label=label, seed=int(seed), stages=stages,
            ar_loss=float(tail["loss"].mean()), ar_accuracy=float(tail["accuracy"].mean()),
            recon_mse=recon_mse, first_row_mse=row1, rest_mse=rest,
            utilization=float(util), causal_share=float(share),
        )

    def run_pipeline(self):
        print(f"🚀 Starting Ablation Suite: labels {self.labels}, seeds {self.budget.seeds}...")

        print("STEP 1: Auditing ablation configs...")
        configs = self.configs()
        audit_ablation_configs(configs)
        if min(self.budget.tok_steps, self.budget.ar_steps) < MIN_DISTINGUISHING_STEPS:
            self.flags.append(
                f"budget below {MIN_DISTINGUISHING_STEPS} steps; directional gaps may not be distinguishable"
            )

        print("STEP 2: Training tokenizer/AR pairs...")
        rows = []
        for label in self.labels:
            for seed in self.budget.seeds:
                row = self._run_one(label, configs[label], seed)
                bad = [k for k in REQUIRED_FINITE if not np.isfinite(getattr(row, k))]
                if bad:
                    raise AblationConfigError(f"ablation {label}/seed {seed} produced non-finite {bad}")
                rows.append(asdict(row))
        frame = pd.DataFrame(rows, columns=ABLATION_COLUMNS)

        print("STEP 3: Checking directional expectations...")
        self.flags.extend(directional_flags(frame))
        for flag in self.flags:
            print(f"⚠️ {flag}")
        if not self.flags:
            print("✅ All directional expectations hold at this budget.")

        if self.output_dir:
            os.makedirs(self.output_dir, exist_ok=True)
            path = os.path.join(self.output_dir, "ablation.csv")
            frame.to_csv(path, index=False)
            log_artifact(path)
            print(f"💾 Ablation table saved to: {path}")

        print("\n📊 Ablation summary (mean over seeds):")
        print(frame.groupby("label", sort=False)[ABLATION_COLUMNS[3:]].mean().to_string(float_format="%.5f"))
        return frame


def ablation_suite(dataset, budget, **kwargs):
    return AblationSuite(dataset, budget, **kwargs).run_pipeline()
