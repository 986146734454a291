"""Tour of the command-line interface on synthetic data.

Shells out to the installed ``patchmix`` entry point: self-checks first,
then a tiny pretraining run, nearest-neighbour evaluation of its final
checkpoint, a patch-mix image dump, and an attention-map dump. Run with
no arguments; artifacts land in a temporary directory.
"""

import re
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

if shutil.which("patchmix"):
    CLI = ["patchmix"]
else:
    CLI = [sys.executable, "-m", "patchmix.cli"]

root = Path(tempfile.mkdtemp(prefix="patchmix_cli_"))
print(f"artifacts under {root}")

TINY = [
    "--override", "data.train_per_class=16",
    "--override", "data.val_per_class=8",
    "--override", "train.epochs=6",
    "--override", "train.warmup_epochs=1",
    "--override", "train.batch_size=8",
    "--override", "train.mix_count=2",
]


# Every command echoes its resolved configuration first; the tour hides
# that block and shows only the lines specific to the command.
_ECHO = re.compile(r"^(#|(data|model|train|aug|eval|demo|check)\.|seed=|out=)")


def run(label: str, *args: str) -> None:
    cmd = CLI + list(args)
    print(f"\n$ {' '.join(cmd)}")
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        print(proc.stdout + proc.stderr)
        raise SystemExit(f"{label} exited with {proc.returncode}")
    for line in proc.stdout.splitlines():
        if not _ECHO.match(line):
            print(" ", line)


# Built-in verification commands: the mix against its loop oracle, and
# gradients against finite differences (including the detached branch).
run("oracle-check", "oracle-check", "--seed", "1")
run("grad-check", "grad-check", "--seed", "1")

# Tiny pretraining run on the default synthetic blobs.
run_dir = root / "run"
run("pretrain", "pretrain", "--seed", "3", "--out", str(run_dir), *TINY)
ckpt = run_dir / "checkpoint_final.bin"
assert ckpt.exists()

# Evaluate the checkpoint: weighted kNN over the frozen backbone.
eval_dir = root / "eval"
run(
    "eval-knn", "eval-knn", "--seed", "3", "--out", str(eval_dir), *TINY,
    "--override", f"eval.checkpoint={ckpt}",
    "--override", "eval.k=5",
)

# Same checkpoint under a linear probe on frozen features.
run(
    "eval-linear", "eval-linear", "--seed", "3", "--out", str(root / "lin"),
    *TINY,
    "--override", f"eval.checkpoint={ckpt}",
)

# Dump one mixed batch as images plus the plan as text.
demo_dir = root / "mixdemo"
run(
    "mix-demo", "mix-demo", "--seed", "5", "--out", str(demo_dir), *TINY,
    "--override", "demo.images=3",
    "--override", "demo.groups=3",
)
print(" ", sorted(p.name for p in demo_dir.iterdir()))

# Attention of the trained encoder on one validation image.
attn_dir = root / "attn"
run(
    "attn-dump", "attn-dump", "--seed", "3", "--out", str(attn_dir), *TINY,
    "--override", f"eval.checkpoint={ckpt}",
)
print(" ", sorted(p.name for p in attn_dir.iterdir()))

print("\nall commands exited 0")
