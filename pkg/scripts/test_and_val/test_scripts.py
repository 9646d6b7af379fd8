"""Runner and figure scripts, loaded from their files."""
import importlib.util
import json
from pathlib import Path

import numpy as np
import pandas as pd

ROOT = Path(__file__).resolve().parents[2]


def _load(relative):
    path = ROOT / relative
    spec = importlib.util.spec_from_file_location(path.stem, path)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def _fast_micro_config(tmp_path):
    payload = json.loads((ROOT / "configs" / "micro.json").read_text())
    payload["training"].update({"tok_steps": 2, "tok2_steps": 2, "ar_steps": 2})
    path = tmp_path / "micro_fast.json"
    path.write_text(json.dumps(payload))
    return str(path)


class TestFullPipelineRunner:
    def test_two_runs_match(self, tmp_path):
        runner = _load("scripts/run_full_pipeline.py")
        assert runner.run_full_pipeline(_fast_micro_config(tmp_path), str(tmp_path / "work"))
        assert (tmp_path / "work" / "run_a" / "ar.altk").exists()

    def test_mismatch_is_reported(self, tmp_path):
        runner = _load("scripts/run_full_pipeline.py")
        a, b = tmp_path / "a", tmp_path / "b"
        a.mkdir()
        b.mkdir()
        (a / "ar.altk").write_bytes(b"one")
        (b / "ar.altk").write_bytes(b"two")
        mismatches = runner.compare_runs(str(a), str(b))
        assert "ar.altk" in mismatches
        assert "tokenizer_stage1.altk (missing)" in mismatches


class TestFigures:
    def test_training_curves(self, tmp_path):
        steps = np.arange(5)
        pd.DataFrame({"step": steps, "loss_total": 1.0 / (steps + 1), "mse": 0.5, "perc": 0.2, "quant": 0.1,
                      "aux_mse": 0.0, "aux_perc": 0.0, "utilization": 0.5}).to_csv(tmp_path / "tok_stage1_metrics.csv", index=False)
        pd.DataFrame({"step": steps, "loss": 2.0 - 0.1 * steps, "accuracy": 0.1 * steps, "lr": 1e-4}).to_csv(
            tmp_path / "ar_metrics.csv", index=False)
        out = _load("scripts/visualization/plot_training_curves.py").plot_training_curves(str(tmp_path), str(tmp_path / "fig"))
        assert Path(out).stat().st_size > 0

    def test_attention_grid_round_trip(self, tmp_path):
        module = _load("scripts/visualization/plot_attention_grid.py")
        rows = [{"dr": dr, "dc": dc, "mass": (dr + 1) * 3 + dc + 1, "causal_share": 0.5}
                for dr in (-1, 0, 1) for dc in (-1, 0, 1)]
        pd.DataFrame(rows).to_csv(tmp_path / "attn_stats_stage1.csv", index=False)
        grid, share = module.load_grid(tmp_path / "attn_stats_stage1.csv")
        np.testing.assert_array_equal(grid, np.arange(9).reshape(3, 3))
        assert share == 0.5
        assert Path(module.plot_attention_grids(str(tmp_path), str(tmp_path / "fig"))).exists()

    def test_missing_inputs_return_none(self, tmp_path):
        assert _load("scripts/visualization/plot_attention_grid.py").plot_attention_grids(str(tmp_path)) is None
        assert _load("scripts/visualization/plot_ablation_bars.py").plot_ablation_bars(str(tmp_path / "x.csv")) is None

    def test_ablation_bars(self, tmp_path):
        frame = pd.DataFrame({"label": ["A", "A", "B"], "seed": [0, 1, 0], "ar_accuracy": [0.1, 0.2, 0.3],
                              "recon_mse": [0.01, 0.02, 0.01], "first_row_mse": [0.03, 0.02, 0.02]})
        frame.to_csv(tmp_path / "ablation.csv", index=False)
        out = _load("scripts/visualization/plot_ablation_bars.py").plot_ablation_bars(
            str(tmp_path / "ablation.csv"), str(tmp_path / "fig"))
        assert Path(out).exists()
