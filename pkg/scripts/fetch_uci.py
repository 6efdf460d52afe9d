"""Download the UCI household power dataset and store it as data/uci/power.npy.

The raw array has 8 columns in the order expected by
``aub.data.preprocess_power``: global active power, global reactive power,
voltage, global intensity, the three sub-meterings, and minute of day.
Rows with missing readings are dropped.

Checksums are trust-on-first-use: the first successful download records the
archive's SHA-256 in data/uci/checksums.json, and later runs refuse an
archive that does not match.  Pass --sha256 to pin a known digest instead.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import sys
import urllib.request
import zipfile
from pathlib import Path

import numpy as np

URL = "https://archive.ics.uci.edu/static/public/235/individual+household+electric+power+consumption.zip"
MEMBER = "household_power_consumption.txt"
ROOT = Path(__file__).resolve().parent.parent / "data" / "uci"


def sha256(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def check_digest(blob: bytes, pinned: str | None, ledger: Path) -> None:
    digest = sha256(blob)
    known = json.loads(ledger.read_text()) if ledger.exists() else {}
    expected = pinned or known.get(URL)
    if expected is None:
        known[URL] = digest
        ledger.write_text(json.dumps(known, indent=2, sort_keys=True) + "\n")
        print(f"recorded sha256 {digest} (first use)")
    elif expected != digest:
        sys.exit(f"checksum mismatch for {URL}: expected {expected}, got {digest}")


def parse_power(text: str) -> np.ndarray:
    rows = []
    for line in text.splitlines()[1:]:
        fields = line.split(";")
        if len(fields) != 9 or "?" in fields or "" in fields:
            continue
        hh, mm, _ = fields[1].split(":")
        rows.append([float(v) for v in fields[2:9]] + [60.0 * int(hh) + int(mm)])
    return np.asarray(rows, dtype=np.float64)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sha256", help="expected archive digest; overrides the recorded one")
    parser.add_argument("--archive", type=Path, help="use a local copy of the zip instead of downloading")
    args = parser.parse_args(argv)

    ROOT.mkdir(parents=True, exist_ok=True)
    if args.archive:
        blob = args.archive.read_bytes()
    else:
        with urllib.request.urlopen(URL, timeout=120) as resp:
            blob = resp.read()
    check_digest(blob, args.sha256, ROOT / "checksums.json")
    with zipfile.ZipFile(io.BytesIO(blob)) as zf:
        text = zf.read(MEMBER).decode("ascii")
    raw = parse_power(text)
    np.save(ROOT / "power.npy", raw)
    print(f"wrote {ROOT / 'power.npy'}: {raw.shape[0]} rows x {raw.shape[1]} columns")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
