"""The whole system through the command line, stage by stage.

Every library capability is also a `macforge` subcommand reading and
writing files, so the full loop (synthesize, train, embed, mine,
whiten, evaluate) runs without writing any Python. This script drives
the CLI with subprocess and narrates each artifact it produces.

Run from the repository root (about a minute):

    python demos/07_cli_pipeline.py
"""

import os
import subprocess
import sys
import tempfile


def run(label, *args):
    cmd = [sys.executable, "-m", "macforge", *args]
    print(f"\n$ macforge {' '.join(args)}", flush=True)
    proc = subprocess.run(cmd, capture_output=True, text=True)
    for line in proc.stdout.splitlines():
        print(f"  {line}")
    if proc.returncode != 0:
        print(proc.stderr, file=sys.stderr)
        raise SystemExit(f"{label} failed with exit {proc.returncode}")


def main():
    root = tempfile.mkdtemp(prefix="macforge_cli_")
    data = os.path.join(root, "data")
    run_dir = os.path.join(root, "run")
    db = os.path.join(root, "descriptors.macd")
    tuples = os.path.join(root, "tuples.mftp")
    proj = os.path.join(root, "projection.mfpw")
    print(f"working under {root}")

    # a small corpus so every stage finishes in seconds
    small = ["--set", "clusters=6", "--set", "images_min=8",
             "--set", "images_max=10", "--set", "points_min=60",
             "--set", "points_max=100", "--set", "image_size=48"]

    run("synth", "synth", "--out", data, "--seed", "5", *small)

    run("train", "train", "--scenes", os.path.join(data, "scenes"),
        "--images", os.path.join(data, "images"), "--out", run_dir,
        "--seed", "5", "--set", "max_epochs=3", "--set", "batch_tuples=2",
        "--set", "negatives=3", "--set", "pool_size=8",
        "--set", "candidate_negatives_per_cluster=8",
        "--set", "remine_per_epoch=1", "--set", "max_image_side=48",
        "--set", "val_fraction=0.25")
    best = os.path.join(run_dir, "best.mfck")
    print(f"  checkpoints: {sorted(os.listdir(run_dir))}")

    run("embed", "embed", "--checkpoint", best,
        "--images", os.path.join(data, "images"), "--out", db)

    run("mine", "mine", "--scenes", os.path.join(data, "scenes"),
        "--descriptors", db, "--out", tuples, "--seed", "5",
        "--set", "pool_size=8", "--set", "negatives=3",
        "--set", "candidate_negatives_per_cluster=8",
        "--set", "mine_all_queries=true")

    run("whiten", "whiten", "--descriptors", db, "--tuples", tuples,
        "--kind", "lw", "--out", proj)

    # queries and database must share a projection, so embed again with
    # the fitted whitening applied before evaluating at reduced dim
    db16 = os.path.join(root, "descriptors_lw16.macd")
    run("embed (projected)", "embed", "--checkpoint", best,
        "--images", os.path.join(data, "images"), "--out", db16,
        "--projection", proj, "--dim", "16")

    csv = os.path.join(root, "eval.csv")
    run("eval", "eval", "--db", db16, "--checkpoint", best,
        "--images", os.path.join(data, "images"),
        "--gt", os.path.join(data, "ground_truth.json"),
        "--mode", "Crop_X", "--projection", proj, "--dim", "16",
        "--out", csv, "--set", "max_image_side=48")
    with open(csv) as f:
        last = f.read().strip().splitlines()[-1]
    print(f"  final line of {os.path.basename(csv)}: {last}")

    print(f"\nartifacts left under {root} for inspection")


if __name__ == "__main__":
    main()
