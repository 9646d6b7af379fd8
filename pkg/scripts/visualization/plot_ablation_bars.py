import argparse
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd

# --- Config ---
BASE_DIR = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
DEFAULT_TABLE = os.path.join(BASE_DIR, 'reports', 'desk', 'ablation', 'ablation.csv')
FIGURES_DIR = os.path.join(BASE_DIR, 'reports', 'figures')

PANELS = [
    ('ar_accuracy', 'AR token accuracy', '#27ae60'),
    ('recon_mse', 'Reconstruction MSE', '#2980b9'),
    ('first_row_mse', 'First-row MSE', '#e67e22'),
]


def plot_ablation_bars(table=DEFAULT_TABLE, out_dir=FIGURES_DIR):
    if not os.path.exists(table):
        print(f"❌ Ablation table not found: {table}"); return None
    frame = pd.read_csv(table)
    grouped = frame.groupby('label', sort=False)
    means, stds = grouped.mean(numeric_only=True), grouped.std(numeric_only=True).fillna(0.0)

    fig, axes = plt.subplots(1, len(PANELS), figsize=(16, 4.5))
    fig.suptitle(f"Ablation ladder ({frame['seed'].nunique()} seed(s) per row)", fontsize=14, weight='bold')
    for ax, (column, title, color) in zip(axes, PANELS):
        ax.bar(means.index, means[column], yerr=stds[column], color=color, alpha=0.8, capsize=4)
        ax.set_title(title, loc='left')
        ax.grid(True, axis='y', alpha=0.2)

    plt.tight_layout(rect=[0, 0, 1, 0.92])
    os.makedirs(out_dir, exist_ok=True)
    out_path = os.path.join(out_dir, 'ablation_bars.png')
    plt.savefig(out_path, dpi=150)
    plt.close(fig)
    print(f"✅ Saved Graph: {out_path}")
    return out_path


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Bar charts of the ablation table, mean and std over seeds.")
    parser.add_argument('--table', default=DEFAULT_TABLE)
    parser.add_argument('--out', default=FIGURES_DIR)
    args = parser.parse_args()
    plot_ablation_bars(args.table, args.out)
