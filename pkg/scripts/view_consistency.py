"""Cross-view spread of edited latents with and without reference alignment, per scene seed."""

import argparse

from gsedit.experiments import run_consistency_experiment

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--edit", default="hue_shift", choices=["hue_shift", "darken", "sharpen"])
    ap.add_argument("--strength", type=float, default=0.3)
    ap.add_argument("--lams", type=float, nargs="+", default=[0.0, 0.25, 0.5, 0.75, 1.0])
    a = ap.parse_args()
    print("seed  " + "  ".join(f"lam={x:<5g}" for x in a.lams))
    for seed in range(a.seeds):
        r = run_consistency_experiment(seed, a.edit, a.strength, tuple(a.lams))
        print(f"{seed:<4}  " + "  ".join(f"{r[x]:.5f}  " for x in a.lams))
