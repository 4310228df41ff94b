# The command-line pipeline end to end in a temporary directory:
# synth -> pseudo-gt -> fit -> eval -> export-obj.
import json
import subprocess
import sys
import tempfile
from pathlib import Path


def visfit(*args):
    cmd = [sys.executable, "-m", "visfit.cli", *map(str, args)]
    print("$ visfit", " ".join(map(str, args[:1])), "...")
    subprocess.run(cmd, check=True)


with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp)
    (root / "cfg.json").write_text(json.dumps({"synth": {"occluded_fraction": 0.4}, "fit": {"max_iters": 150}}))
    visfit("synth", "--seed", 7, "--config", root / "cfg.json", "--out", root / "synth")
    visfit("pseudo-gt", "--iuv", root / "synth/iuv.png", "--obs", root / "synth/obs.json", "--out", root / "pgt")
    visfit("fit", "--obs", root / "pgt/obs.json", "--prior", root / "synth/prior.json", "--config",
           root / "cfg.json", "--out", root / "fit")
    visfit("eval", "--pred", root / "fit/fit_result.json", "--gt", root / "synth/gt.json", "--csv",
           "--out", root / "eval")
    visfit("export-obj", "--params", root / "fit/fit_result.json", "--out", root / "again.obj")

    # seed 7 hides a whole hand ring; eval warns that PA-MPJPE exceeds MPJPE for this fit
    metrics = json.loads((root / "eval/metrics.json").read_text())
    print({k: round(v, 2) for k, v in metrics.items() if k.endswith("_mm")})
    print((root / "eval/metrics.csv").read_text())
    print("OBJ lines:", len((root / "again.obj").read_text().splitlines()))

    # an error exits 2 with a JSON line on stderr
    proc = subprocess.run([sys.executable, "-m", "visfit.cli", "fit", "--obs", root / "missing.json", "--out", root],
                          capture_output=True, text=True)
    print("exit", proc.returncode, proc.stderr.strip())
