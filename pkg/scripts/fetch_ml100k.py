"""Materialize MovieLens-100k ``u.data`` without direct access to grouplens.org.

The RecBole wheel on PyPI ships the full 100k interaction log as
``recbole/dataset_example/ml-100k/ml-100k.inter`` (same rows and order as the
official ``u.data``, plus a typed header). This script downloads that wheel via
pip, strips the header and writes a tab-separated ``u.data``.

    python scripts/fetch_ml100k.py [--out data/ml-100k/u.data]
"""

from __future__ import annotations

import argparse
import glob
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

MEMBER = "recbole/dataset_example/ml-100k/ml-100k.inter"
WHEEL_SPEC = "recbole==1.2.1"


def fetch(out: Path) -> Path:
    out.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", WHEEL_SPEC, "--no-deps", "-q", "-d", tmp],
            check=True,
        )
        wheel = glob.glob(str(Path(tmp) / "recbole-*.whl"))[0]
        with zipfile.ZipFile(wheel) as zf:
            lines = zf.read(MEMBER).decode("utf-8").splitlines()
    rows = lines[1:]
    if len(rows) != 100000:
        raise RuntimeError(f"unexpected row count {len(rows)}")
    out.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "data" / "ml-100k" / "u.data"))
    args = ap.parse_args()
    print(fetch(Path(args.out)))


if __name__ == "__main__":
    main()
