"""Build the extension with cargo and exercise each binding once.

    python3 python/smoke.py
"""
import math
import os
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def build():
    subprocess.run(
        ["cargo", "build", "--release", "-p", "cisac-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    target = Path(os.environ.get("CARGO_TARGET_DIR", ROOT / "target")) / "release"
    lib = next(p for p in (target / "libcisac_py.so", target / "libcisac_py.dylib") if p.exists())
    dest = Path(tempfile.mkdtemp()) / "cisac_py.so"
    shutil.copy(lib, dest)
    sys.path.insert(0, str(dest.parent))


def main():
    build()
    import cisac_py

    toy = cisac_py.preset_toml("toy")
    assert "horizon = 10" in toy

    zf = cisac_py.zero_forcing("desk")
    print("zf-fpa on desk:", zf)

    rs = cisac_py.random_search("toy", budget=300)
    assert rs["feasible"] == 1.0 and rs["power"] > 0
    print("random search on toy:", rs)

    trace, bound = cisac_py.hcrlb([[4.0, 1.0, 0.0], [1.0, 2.0, 0.0], [0.0, 0.0, 5.0]], 1e-7)
    assert math.isclose(trace, bound[0][0] + bound[1][1])
    assert math.isclose(trace, 6.0 / 7.0, rel_tol=1e-12)

    curve = cisac_py.train("toy", episodes=3)
    assert len(curve["lambda"]) == 3 and min(curve["lambda"]) >= 0.0

    out = tempfile.mkdtemp()
    spec = 'name = "py_smoke"\nvar = "sigma_xi"\nvalues = [0.0, 1e-7]\nbudget = 50\n'
    csv, ok = cisac_py.run_experiment(spec, out)
    assert ok, csv
    print(open(csv).read().strip())

    try:
        cisac_py.zero_forcing("no-such-preset")
    except ValueError as e:
        print("error path ok:", e)
    else:
        raise AssertionError("bad preset accepted")
    print("smoke ok")


if __name__ == "__main__":
    main()
