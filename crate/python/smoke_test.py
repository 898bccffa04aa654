# SPDX-License-Identifier: MIT OR Apache-2.0
"""Builds the extension module and exercises it from Python.

    python3 python/smoke_test.py [--no-build]
"""

import argparse
import math
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def build() -> Path:
    subprocess.run(
        ["cargo", "build", "-p", "padprobe-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    return ROOT / "target" / "debug" / "libpadprobe_py.so"


def load(lib: Path):
    staging = Path(tempfile.mkdtemp(prefix="padprobe_py_"))
    shutil.copy(lib, staging / "padprobe_py.so")
    sys.path.insert(0, str(staging))
    import padprobe_py

    return padprobe_py


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--no-build", action="store_true", help="use the existing debug build")
    args = parser.parse_args()
    lib = ROOT / "target" / "debug" / "libpadprobe_py.so" if args.no_build else build()
    pp = load(lib)

    b = pp.Backend("toy-mmdit")
    p = b.tokenize("a red fox under a blue sky")
    assert len(p) == 16 and p.k == 7, p
    assert p.segments[0] == "BOS" and p.segments[-1] == "PAD"
    assert sum(p.keep_mask("prompt")) + sum(p.keep_mask("pads")) == len(p)

    full = b.generate("a red fox", 7)
    ite_full = b.ite("a red fox", "full", 7)
    assert full.features == ite_full.features
    assert math.isclose(sum(x * x for x in full.features), 1.0, rel_tol=1e-5)
    assert b.idp("a red fox", "full", 7).features == full.features

    leak = b.leakage("a red fox", 7)
    assert len(leak) == 8 and all(v > 0 for _, _, v in leak)
    mass = b.attention_mass("a red fox", 7)
    assert len(mass) == 16
    assert all(status != "fail" for _, status, _ in b.conformance())

    x = [[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]
    assert pp.kid(x, x) == 0.0
    assert pp.clip_score([1.0, 0.0], [1.0, 0.0]) == 1.0
    mean, std, n = pp.aggregate([1.0, 2.0, 3.0])
    assert (mean, std, n) == (2.0, 1.0, 3)

    try:
        b.ite("a fox", "bogus", 0)
    except ValueError as e:
        assert str(e).startswith("error[E_UNKNOWN_CONDITION]"), e
    else:
        raise AssertionError("unknown condition accepted")

    print(f"padprobe_py {pp.__version__}: smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
