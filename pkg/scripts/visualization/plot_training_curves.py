import argparse
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd

# --- Config ---
BASE_DIR = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
DEFAULT_RUN_DIR = os.path.join(BASE_DIR, 'reports', 'desk')
FIGURES_DIR = os.path.join(BASE_DIR, 'reports', 'figures')

TOKENIZER_TERMS = ['mse', 'perc', 'quant', 'aux_mse', 'aux_perc']


def _read(run_dir, name):
    path = os.path.join(run_dir, name)
    if not os.path.exists(path):
        print(f"⚠️ Warning: {name} not found in {run_dir}, skipping.")
        return None
    return pd.read_csv(path)


def plot_training_curves(run_dir=DEFAULT_RUN_DIR, out_dir=FIGURES_DIR):
    stages = {n: _read(run_dir, f'tok_stage{n}_metrics.csv') for n in (1, 2)}
    ar = _read(run_dir, 'ar_metrics.csv')
    if all(v is None for v in stages.values()) and ar is None:
        print("❌ No metrics files found."); return None

    fig, axes = plt.subplots(1, 3, figsize=(18, 5))
    fig.suptitle(f'Training Curves: {os.path.basename(os.path.normpath(run_dir))}', fontsize=14, weight='bold')

    for n, frame in stages.items():
        if frame is None:
            continue
        axes[0].plot(frame['step'], frame['loss_total'], lw=2, label=f'stage {n} total')
        if n == 1:
            for term in TOKENIZER_TERMS:
                if frame[term].abs().sum() > 0:
                    axes[0].plot(frame['step'], frame[term], lw=1, alpha=0.6, label=term)
            axes[1].plot(frame['step'], frame['utilization'], color='#8e44ad', lw=2)
    axes[0].set_title('Tokenizer loss', loc='left')
    axes[0].set_yscale('log')
    axes[0].legend(fontsize=8)
    axes[1].set_title('Codebook utilization (stage 1)', loc='left')
    axes[1].set_ylim(0, 1.05)

    if ar is not None:
        axes[2].plot(ar['step'], ar['loss'], color='#e74c3c', lw=2, label='loss')
        twin = axes[2].twinx()
        twin.plot(ar['step'], 1.0 - ar['accuracy'], color='#27ae60', lw=1.5, label='error rate')
        twin.set_ylabel('error rate (1 - accuracy)')
    axes[2].set_title('AR generator', loc='left')

    for ax in axes:
        ax.set_xlabel('step')
        ax.grid(True, alpha=0.2)
    plt.tight_layout(rect=[0, 0, 1, 0.94])

    os.makedirs(out_dir, exist_ok=True)
    out_path = os.path.join(out_dir, 'training_curves.png')
    plt.savefig(out_path, dpi=150)
    plt.close(fig)
    print(f"✅ Saved Graph: {out_path}")
    return out_path


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Plot tokenizer and AR training curves from a run directory.")
    parser.add_argument('--run-dir', default=DEFAULT_RUN_DIR)
    parser.add_argument('--out', default=FIGURES_DIR)
    args = parser.parse_args()
    plot_training_curves(args.run_dir, args.out)
