import argparse
import os
import sys
import subprocess

CURRENT_DIR = os.path.dirname(os.path.abspath(__file__))
ROOT_DIR = os.path.abspath(os.path.join(CURRENT_DIR, "..", ".."))

# Test modules, bottom-up: each layer only relies on the ones above it
TEST_MODULES = [
    "test_autodiff.py",
    "test_nn_blocks.py",
    "test_vq_codebook.py",
    "test_tokenizer.py",
    "test_ar_generator.py",
    "test_kv_sampler.py",
    "test_analysis_metrics.py",
    "test_ablation.py",
    "test_harness.py",
    "test_scripts.py",
]


def run_all_tests(slow=False):
    print("=" * 60)
    print("🧪 RUNNING ALITOK TEST SUITE" + (" (with training-budget checks)" if slow else ""))
    print("=" * 60)

    failed_tests = []
    passed_tests = []

    for module in TEST_MODULES:
        module_path = os.path.join(CURRENT_DIR, module)
        if not os.path.exists(module_path):
            print(f"⚠️ Warning: Test module not found: {module}")
            continue

        print(f"\n▶️ Running Tests: {module}...")
        cmd = [sys.executable, "-m", "pytest", "-q", module_path]
        if slow:
            cmd.append("--slow")
        result = subprocess.run(cmd, capture_output=True, text=True, cwd=ROOT_DIR)

        if result.returncode == 0:
            summary = result.stdout.strip().splitlines()[-1] if result.stdout.strip() else ""
            print(f"✅ PASSED: {module} {summary}")
            passed_tests.append(module)
        else:
            print(f"❌ FAILED: {module}")
            print(f"   Error Details:\n{result.stdout[-4000:] or result.stderr}")
            failed_tests.append(module)

    print("\n" + "=" * 60)
    print(f"📊 TEST SUITE SUMMARY: {len(passed_tests)} Passed | {len(failed_tests)} Failed")
    print("=" * 60)

    if failed_tests:
        print("\n🚨 CRITICAL: The following test modules failed:")
        for name in failed_tests:
            print(f"  - {name}")
        sys.exit(1)
    print("✨ All tests passed successfully!")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Run every alitok test module in its own process.")
    parser.add_argument("--slow", action="store_true", help="include training-budget tests")
    run_all_tests(parser.parse_args().slow)
