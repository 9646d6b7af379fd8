"""
Runs the whole pipeline twice from one config and checks that both runs
produce byte-identical checkpoints, token files and metric tables.

    python scripts/run_full_pipeline.py --config configs/micro.json
"""
import argparse
import json
import os
import sys

ROOT_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT_DIR not in sys.path:
    sys.path.insert(0, ROOT_DIR)

from alitok import cli_dispatch  # noqa: E402

# --- Config ---
DEFAULT_CONFIG = os.path.join(ROOT_DIR, "configs", "micro.json")
DEFAULT_WORK_DIR = os.path.join(ROOT_DIR, "reports", "determinism")

STAGES = [
    ["gen-data"],
    ["train-tok", "--stage", "1"],
    ["train-tok", "--stage", "2"],
    ["train-ar"],
    ["sample", "--class", "0", "--n", "2"],
    ["eval-recon", "--n", "1"],
    ["eval-acc"],
    ["export-codebook"],
]
COMPARED_FILES = [
    "tokenizer_stage1.altk", "tokenizer_stage2.altk", "ar.altk", "tokens_train.bin", "tokens_eval.bin",
    "tok_stage1_metrics.csv", "tok_stage2_metrics.csv", "ar_metrics.csv",
    "recon_stage1.csv", "recon_stage2.csv", "ar_eval.csv", "codebook.csv",
    os.path.join("samples", "class0_seed0_000.ppm"), os.path.join("samples", "class0_seed0_001.ppm"),
]


def _isolated_config(config_path, run_dir):
    with open(config_path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    payload["paths"] = {"data_dir": os.path.join(run_dir, "data"), "run_dir": run_dir}
    os.makedirs(run_dir, exist_ok=True)
    path = os.path.join(run_dir, "config.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
    return path


def run_once(config_path, run_dir):
    config = _isolated_config(config_path, run_dir)
    for argv in STAGES:
        print(f"\n▶️ alitok {' '.join(argv)}")
        code = cli_dispatch(argv + ["--config", config])
        if code != 0:
            raise RuntimeError(f"`{' '.join(argv)}` exited with code {code}")


def compare_runs(first, second):
    mismatches = []
    for name in COMPARED_FILES:
        a, b = os.path.join(first, name), os.path.join(second, name)
        if not (os.path.exists(a) and os.path.exists(b)):
            mismatches.append(f"{name} (missing)")
            continue
        with open(a, "rb") as fa, open(b, "rb") as fb:
            if fa.read() != fb.read():
                mismatches.append(name)
    return mismatches


def run_full_pipeline(config_path=DEFAULT_CONFIG, work_dir=DEFAULT_WORK_DIR):
    print("🚀 Starting Full Pipeline Determinism Check...")
    runs = [os.path.join(work_dir, "run_a"), os.path.join(work_dir, "run_b")]

    for i, run_dir in enumerate(runs, start=1):
        print(f"STEP {i}: Running the pipeline into {run_dir}...")
        run_once(config_path, run_dir)

    print("STEP 3: Comparing outputs byte for byte...")
    mismatches = compare_runs(*runs)
    if mismatches:
        print(f"❌ {len(mismatches)} output(s) differ between runs:")
        for name in mismatches:
            print(f"  - {name}")
        return False
    print(f"✅ Determinism Check Passed: {len(COMPARED_FILES)} outputs identical across two runs.")
    return True


def main():
    parser = argparse.ArgumentParser(description="Two-run determinism check of the full pipeline.")
    parser.add_argument("--config", default=DEFAULT_CONFIG)
    parser.add_argument("--work-dir", default=DEFAULT_WORK_DIR)
    args = parser.parse_args()
    try:
        ok = run_full_pipeline(args.config, args.work_dir)
    except Exception as e:
        print(f"❌ Critical Error in run_full_pipeline: {e}")
        sys.exit(2)
    sys.exit(0 if ok else 1)


if __name__ == "__main__":
    main()
