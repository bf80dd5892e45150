"""Generate a scene, optionally train a depth checkpoint, then run one edit end to end."""

import argparse
import json
from pathlib import Path

from gsedit.cimln import TrainConfig, save_checkpoint, train_self_supervised
from gsedit.pipeline import EditJob, edit_scene
from gsedit.splat import make_synthetic_scene, render, save_cameras, save_scene

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="demo_out")
    ap.add_argument("--edit", default="darken:0.5")
    ap.add_argument("--lam", type=float, default=0.5)
    ap.add_argument("--layout", default="cluster", choices=["cluster", "shell", "boxes"])
    ap.add_argument("--train-steps", type=int, default=0, help="0 skips depth enhancement")
    a = ap.parse_args()
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    s = make_synthetic_scene(0, 120, a.layout)
    save_scene(out / "scene.json", s["scene"])
    save_cameras(out / "cameras.json", s["orbit_cameras"])
    ckpt = None
    if a.train_steps:
        renders = [render(s["scene"], c) for c in s["orbit_cameras"]]
        save_checkpoint(train_self_supervised(renders, TrainConfig(steps=a.train_steps)), out / "ckpt")
        ckpt = str(out / "ckpt")
    job = EditJob(str(out / "scene.json"), str(out / "cameras.json"), edit=a.edit, lam=a.lam,
                  cimln_checkpoint=ckpt, out_dir=str(out / "edit"))
    res = edit_scene(job)
    print(json.dumps(res.report.to_json(), indent=2))
