import argparse
import json
import os

import matplotlib.pyplot as plt
import numpy as np
from scipy import stats


def parse_args():
    """
    Parse command line arguments.

    Returns:
        argparse.Namespace: The parsed arguments
    """
    parser = argparse.ArgumentParser(description='Plot pose errors before and after one updater step')
    parser.add_argument('--audit_path', type=str, default='runs/desk/reports/audit.json',
                        help='audit.json written by the audit stage')
    parser.add_argument('--output', type=str, default='data/images/update_error_histogram.png',
                        help='Where to save the figure')
    parser.add_argument('--show', action='store_true', help='Open an interactive window')
    return parser.parse_args()


args = parse_args()

# Read the audit report
with open(args.audit_path, 'r', encoding='utf-8') as file:
    audit = json.load(file)

before = np.asarray(audit["before"], dtype=float)
after = np.asarray(audit["after"], dtype=float)
print(f"Number of audited updates: {len(before)}")

plt.style.use('seaborn-v0_8-whitegrid')
plt.rcParams['axes.facecolor'] = 'white'
plt.rcParams['figure.facecolor'] = 'white'
plt.rcParams['font.family'] = 'Times New Roman'
plt.rcParams['font.size'] = 16
plt.rcParams['axes.titlesize'] = 24
plt.rcParams['axes.labelsize'] = 20
plt.rcParams['xtick.labelsize'] = 18
plt.rcParams['ytick.labelsize'] = 18

fig, ax = plt.subplots(figsize=(10, 6))

# 1 mm bins over the shared range
upper = max(before.max(), after.max())
bin_edges = np.arange(0.0, np.ceil(upper) + 1.0, 1.0)
x_values = np.linspace(0.0, upper, 1000)

for errors, color, curve, label in ((before, '#C0C0C0', '#5A5A5A', 'Before update'),
                                    (after, '#2E8B8B', '#2A2E8C', 'After update')):
    ax.hist(errors, bins=bin_edges.tolist(), alpha=0.7, color=color, edgecolor='white', linewidth=0.5,
            density=True, label=label)
    # gaussian_kde needs some spread
    if errors.size > 1 and np.ptp(errors) > 0:
        kde = stats.gaussian_kde(errors, bw_method='scott')
        ax.plot(x_values, kde(x_values), color=curve, linewidth=2)

for spine in ['top', 'right']:
    ax.spines[spine].set_visible(False)

ax.set_xlabel('Mean joint error (mm)', fontsize=20)
ax.set_ylabel('Frequency Distribution', fontsize=20)
ax.set_title('Pose Error Before and After One Update', fontsize=24, color='#2E8B57')
ax.legend(loc='upper left')

stats_text = (f"Updates: {len(before)}\n"
              f"Median before: {np.median(before):.2f}\n"
              f"Median after: {np.median(after):.2f}\n"
              f"Hinge satisfied: {100 * audit['satisfied_rate']:.1f}%\n"
              f"p-value: {audit['p_value']:.3g}")
ax.text(0.68, 0.95, stats_text, transform=ax.transAxes, fontsize=16, verticalalignment='top',
        fontfamily='Times New Roman', bbox=dict(facecolor='white', alpha=0.8, edgecolor='none', pad=5))

ax.yaxis.grid(True, linestyle='-', alpha=0.2)
ax.xaxis.grid(False)
ax.set_ylim(bottom=0)
plt.tight_layout()

os.makedirs(os.path.dirname(args.output) or '.', exist_ok=True)
plt.savefig(args.output, dpi=300, bbox_inches='tight')
print(f"Histogram with density curve saved as '{args.output}'")

if args.show:
    plt.show()
