"""Location and magnitude observations with fixed triggers.

Trains one backdoor per configuration (insertion mode, trigger norm, centre
pairs, corner pair) against a shared clean model and writes a TRE heatmap for
each. This is the slowest demo: roughly 10-20 minutes on one core.

    python3 demos/observations.py [out_dir]
"""

from _common import out_dir, run, show_csv

root = out_dir("runs/demo_observe")
run("observe", "--preset", "smoke", "--out", root)
show_csv(root / "observe" / "summary.csv")
