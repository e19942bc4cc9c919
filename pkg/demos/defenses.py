"""Run the defense suite against a backdoored model.

Reuses the attack from quickstart.py when present, otherwise runs it first.

    python3 demos/defenses.py [out_dir]
"""

from _common import out_dir, run, show_csv

root = out_dir("runs/demo_quickstart")
attack = root / "attack"
if not (attack / "manifest.json").is_file():
    run("attack", "--preset", "smoke", "--out", attack)

print("1. Patch drop / shuffle, DBAVT detection, BAVT and Gaussian filtering.")
run("defend", "--preset", "smoke", "--run", attack, "--out", root / "defend",
    "--payload", "random:k=1", "--payload", "random:k=20")
show_csv(root / "defend" / "defense_outcomes.csv")
show_csv(root / "defend" / "dbavt.csv")

print("\n2. STRIP entropy histogram (clean vs poisoned inputs).")
run("strip", "--preset", "smoke", "--run", attack, "--out", root / "strip")
show_csv(root / "strip" / "strip_histogram.csv")

print("\n3. Fine-pruning curve.")
run("prune", "--preset", "smoke", "--run", attack, "--out", root / "prune")
show_csv(root / "prune" / "prune_curve.csv")
