"""Build the pre-encoded CSV fixtures under data/.

Sources are the copies of the UCI datasets bundled in two PyPI wheels:
  * keel-ds 0.2.5       -> keel_ds/data/balanced/raw/pima.dat (768 rows, 8 features)
  * responsibly 0.1.2   -> responsibly/dataset/adult/adult.data

Usage:
    pip download --no-deps keel-ds==0.2.5 responsibly==0.1.2 -d /tmp/wheels
    python3 scripts/prepare_data.py /tmp/wheels
"""
import csv
import glob
import io
import os
import random
import sys
import zipfile

OUT = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "data")

PIMA_COLUMNS = ["preg", "plas", "pres", "skin", "insu", "mass", "pedi", "age"]

ADULT_COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "education-num", "marital-status",
    "occupation", "relationship", "race", "sex", "capital-gain", "capital-loss",
    "hours-per-week", "native-country", "income",
]
ADULT_NUMERIC = ["age", "fnlwgt", "education-num", "capital-gain", "capital-loss", "hours-per-week"]
ADULT_SUBSET_ROWS = 6000
ADULT_SEED = 20240611


def wheel(pattern, wheels):
    hits = glob.glob(os.path.join(wheels, pattern))
    if not hits:
        sys.exit(f"missing wheel {pattern} in {wheels}")
    return zipfile.ZipFile(hits[0])


def pima(wheels):
    raw = wheel("keel_ds-*.whl", wheels).read("keel_ds/data/balanced/raw/pima.dat").decode()
    rows = [r.split(",") for r in raw.strip().splitlines()]
    assert len(rows) == 768
    with open(os.path.join(OUT, "diabetes.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(PIMA_COLUMNS + ["outcome"])
        for r in rows:
            w.writerow([v.strip() for v in r[:8]] + [1 if r[8].strip() == "tested_positive" else 0])


def adult(wheels):
    raw = wheel("responsibly-*.whl", wheels).read("responsibly/dataset/adult/adult.data").decode()
    rows = [
        [v.strip() for v in r]
        for r in csv.reader(io.StringIO(raw))
        if len(r) == len(ADULT_COLUMNS)
    ]
    categorical = [c for c in ADULT_COLUMNS[:-1] if c not in ADULT_NUMERIC]
    levels = {
        c: sorted({r[ADULT_COLUMNS.index(c)] for r in rows}) for c in categorical
    }
    # Column order: the 27-wide block first (workclass + education + sex),
    # then the remaining encoded columns, so contiguous partitioning gives the removed
    # client a 27-feature block.
    first = ["workclass", "education", "sex"]
    header, spec = [], []
    for c in first:
        for lv in levels[c]:
            header.append(f"{c}={lv}")
            spec.append((c, lv))
    for c in ADULT_COLUMNS[:-1]:
        if c in first:
            continue
        if c in ADULT_NUMERIC:
            header.append(c)
            spec.append((c, None))
        else:
            for lv in levels[c]:
                header.append(f"{c}={lv}")
                spec.append((c, lv))
    assert len(header) == 108, len(header)
    rng = random.Random(ADULT_SEED)
    subset = rng.sample(rows, ADULT_SUBSET_ROWS)
    with open(os.path.join(OUT, "adult_subset.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header + ["income"])
        for r in subset:
            out = []
            for c, lv in spec:
                v = r[ADULT_COLUMNS.index(c)]
                out.append(v if lv is None else (1 if v == lv else 0))
            out.append(1 if r[-1].startswith(">50K") else 0)
            w.writerow(out)


if __name__ == "__main__":
    wheels = sys.argv[1] if len(sys.argv) > 1 else "."
    os.makedirs(OUT, exist_ok=True)
    pima(wheels)
    adult(wheels)
