import argparse
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

# --- Config ---
BASE_DIR = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
DEFAULT_RUN_DIR = os.path.join(BASE_DIR, 'reports', 'desk')
FIGURES_DIR = os.path.join(BASE_DIR, 'reports', 'figures')


def load_grid(path):
    """Rebuild the 3x3 grid from the (dr, dc, mass) rows written by attn-stats."""
    frame = pd.read_csv(path)
    grid = np.zeros((3, 3))
    for dr, dc, mass in zip(frame['dr'], frame['dc'], frame['mass']):
        grid[int(dr) + 1, int(dc) + 1] = mass
    return grid, float(frame['causal_share'].iloc[0])


def plot_attention_grids(run_dir=DEFAULT_RUN_DIR, out_dir=FIGURES_DIR):
    found = [(n, os.path.join(run_dir, f'attn_stats_stage{n}.csv')) for n in (1, 2)]
    found = [(n, p) for n, p in found if os.path.exists(p)]
    if not found:
        print("❌ No attn_stats_stage*.csv files found (run `alitok.py attn-stats` first)."); return None

    fig, axes = plt.subplots(1, len(found), figsize=(5 * len(found), 4.5), squeeze=False)
    for ax, (stage, path) in zip(axes[0], found):
        grid, share = load_grid(path)
        im = ax.imshow(grid, cmap='viridis', vmin=0)
        for r in range(3):
            for c in range(3):
                ax.text(c, r, f'{grid[r, c]:.3f}', ha='center', va='center', color='white', fontsize=10)
        ax.set_xticks(range(3), ['-1', '0', '+1'])
        ax.set_yticks(range(3), ['-1', '0', '+1'])
        ax.set_xlabel('column offset')
        ax.set_ylabel('row offset')
        ax.set_title(f'Stage {stage} decoder | causal share {share:.3f}', fontsize=11, weight='bold')
        fig.colorbar(im, ax=ax, fraction=0.046)

    plt.tight_layout()
    os.makedirs(out_dir, exist_ok=True)
    out_path = os.path.join(out_dir, 'attention_grids.png')
    plt.savefig(out_path, dpi=150)
    plt.close(fig)
    print(f"✅ Saved Graph: {out_path}")
    return out_path


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Heatmaps of the 3x3 decoder attention neighbourhood.")
    parser.add_argument('--run-dir', default=DEFAULT_RUN_DIR)
    parser.add_argument('--out', default=FIGURES_DIR)
    args = parser.parse_args()
    plot_attention_grids(args.run_dir, args.out)
