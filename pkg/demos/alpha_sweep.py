"""Sweep the visual and attention stealth weights on a 3x3 grid.

Each grid cell is a full attack run with its own manifest; the parent run
collects ACC, ASR, visual l2 and attention l2 heatmaps.

    python3 demos/alpha_sweep.py [out_dir]
"""

from _common import out_dir, run, show_csv

root = out_dir("runs/demo_sweep")
run("pretrain", "--preset", "smoke", "--out", root / "clean")
run("sweep-alpha", "--preset", "smoke", "--out", root / "sweep",
    "--clean-model", root / "clean" / "clean_model.npz")
show_csv(root / "sweep" / "sweep.csv")
