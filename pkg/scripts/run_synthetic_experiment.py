"""Synthetic shift experiment: stage-1 baseline vs. full adaptation over several seeds.

Usage:
    python3 scripts/run_synthetic_experiment.py --out-dir runs/synthetic --seeds 0 1 2 3 4

Writes per-seed run directories plus ``summary.json`` with baseline and adapted
macro-F1, the confident-set accuracy after stage 2, and wall time.
"""
import argparse
import json
import time
from pathlib import Path

import numpy as np

from ecgda import cli
from ecgda.clusters import ClusterState, select_confident
from ecgda.net import BiClassifierNet
from ecgda.prep import PrepConfig
from ecgda.trainer import load_domain

HERE = Path(__file__).resolve().parent


def macro_f1(path: Path) -> float:
    classes = json.loads(path.read_text())["classes"]
    return float(np.mean([c["f1"] for c in classes.values() if c["f1"] is not None]))


def selection_accuracy(run: Path, target_dir: Path) -> dict:
    model, meta = BiClassifierNet.load(run / "stage2.ckpt")
    target, _ = load_domain(target_dir, "target", PrepConfig(), rr_mean=meta["rr_mean"])
    state = ClusterState.load(run / "clusters.txt")
    out = model.predict(target.waveforms, target.time_feats)
    chosen = select_confident(out["features"], out["probs"], out["probs1"], out["probs2"],
                              state.cc_s, state.m_ctr, state.m_dis)
    res = {"overall": float(np.mean(out["pred"] == target.labels)), "selected": None, "n_selected": len(chosen)}
    if chosen:
        idx, y = map(np.array, zip(*chosen))
        res["selected"] = float(np.mean(y == target.labels[idx]))
    return res


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", default="runs/synthetic")
    ap.add_argument("--config", default=str(HERE / "synthetic.cfg"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--shift", type=float, default=0.5)
    ap.add_argument("--n-source", type=int, default=2000)
    ap.add_argument("--n-target", type=int, default=2000)
    args = ap.parse_args()

    root = Path(args.out_dir)
    rows = []
    t_all = time.perf_counter()
    for seed in args.seeds:
        t0 = time.perf_counter()
        d = root / f"seed{seed}"
        cli.main(["gen-fixtures", "--out-dir", str(d / "data"), "--shift", str(args.shift), "--seed", str(seed),
                  "--n-source", str(args.n_source), "--n-target", str(args.n_target)])
        if cli.main(["run", "--config", args.config, "--seed", str(seed), "--source", str(d / "data" / "source"),
                     "--target", str(d / "data" / "target"), "--out-dir", str(d / "adapted")]):
            raise SystemExit(f"seed {seed}: run failed")
        cli.main(["eval", "--config", args.config, "--ckpt", str(d / "adapted" / "stage1.ckpt"),
                  "--data", str(d / "data" / "target"), "--out-dir", str(d / "baseline")])
        row = {"seed": seed, "baseline_macro_f1": macro_f1(d / "baseline" / "metrics.json"),
               "adapted_macro_f1": macro_f1(d / "adapted" / "metrics.json"),
               "selection": selection_accuracy(d / "adapted", d / "data" / "target"),
               "seconds": round(time.perf_counter() - t0, 1)}
        rows.append(row)
        print(f"seed {seed}: baseline {row['baseline_macro_f1']:.2f} adapted {row['adapted_macro_f1']:.2f} "
              f"({row['seconds']:.0f} s)", flush=True)

    gain = float(np.mean([r["adapted_macro_f1"] - r["baseline_macro_f1"] for r in rows]))
    summary = {"config": Path(args.config).read_text(), "shift": args.shift, "runs": rows, "mean_gain_pp": gain,
               "total_seconds": round(time.perf_counter() - t_all, 1)}
    (root / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"mean macro-F1 gain {gain:+.2f} pp -> {root / 'summary.json'}")


if __name__ == "__main__":
    main()
