"""Train a clean model, implant a patch-wise backdoor and measure it.

Uses the smoke preset (synthetic gratings, a 3-block ViT), so the whole script
runs in a few minutes on one CPU core.

    python3 demos/quickstart.py [out_dir]
"""

from _common import out_dir, run, show_csv

root = out_dir("runs/demo_quickstart")

print("1. Pretrain a clean model and run the bi-level attack.")
run("attack", "--preset", "smoke", "--out", root / "attack")

print("\n2. Trigger robustness across every patch (TRE heatmap) and ASR per payload.")
run("eval-tre", "--preset", "smoke", "--run", root / "attack", "--out", root / "tre")
show_csv(root / "tre" / "attack_metrics.csv")
print("   heatmap:", root / "tre" / "tre.pgm")

print("\n3. Visual and attention stealth for two payloads.")
run("eval-stealth", "--preset", "smoke", "--run", root / "attack", "--out", root / "stealth",
    "--payload", "random:k=1", "--payload", "random:k=10")
show_csv(root / "stealth" / "visual_stealth.csv")
show_csv(root / "stealth" / "attention_stealth.csv")
