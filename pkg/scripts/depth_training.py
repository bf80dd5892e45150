"""Train the depth enhancer on synthetic renders and report held-out RMSE against bilinear upsampling."""

import argparse
import json

from gsedit.cimln import CimlnConfig, TrainConfig
from gsedit.experiments import DepthExperiment, run_depth_experiment

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--features", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    exp = DepthExperiment(train=TrainConfig(steps=a.steps, lr=a.lr, seed=a.seed),
                          model=CimlnConfig(features=a.features))
    print(json.dumps(run_depth_experiment(exp), indent=2))
