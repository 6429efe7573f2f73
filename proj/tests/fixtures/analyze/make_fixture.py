"""Builds the analyze fixture: a tied checkpoint, its manifest and the
expected per-branch CSVs computed by a brute-force scan.

Run from this directory: python3 make_fixture.py
"""

import json
import math
import random
import struct

LAYER = "mixed4b"
D, L, K = 12, 20, 3
BRANCHES = [("1x1", 0, 3), ("3x3", 3, 8), ("5x5", 8, 10), ("pool_proj", 10, 12)]


def f32(x):
    return struct.unpack("<f", struct.pack("<f", x))[0]


def features(rng):
    rows = []
    for i in range(L):
        row = [f32(rng.uniform(-1, 1)) for _ in range(D)]
        if i % 5 == 1:  # concentrated in one branch
            _, start, end = BRANCHES[(i // 5) % len(BRANCHES)]
            row = [v if start <= c < end else 0.0 for c, v in enumerate(row)]
        if i == 7:  # dead feature
            row = [0.0] * D
        rows.append(row)
    return rows


def write_checkpoint(path, rows, rng):
    enc_bias = [f32(rng.uniform(-0.1, 0.1)) for _ in range(L)]
    dec_bias = [f32(rng.uniform(-0.1, 0.1)) for _ in range(D)]
    with open(path, "wb") as f:
        f.write(b"SAECKPT1")
        f.write(struct.pack("<IIIB", D, L, K, 1))
        for row in rows:
            f.write(struct.pack("<%df" % D, *row))
        f.write(struct.pack("<%df" % L, *enc_bias))
        f.write(struct.pack("<%df" % D, *dec_bias))


def expected_csv(rows, name, start, end):
    lines = ["feature_id,branch,fraction"]
    for i, row in enumerate(rows):
        total = math.fsum(v * v for v in row)
        if total == 0.0:
            continue
        inside = math.fsum(v * v for v in row[start:end])
        lines.append("%s/f/%d,%s,%.9g" % (LAYER, i, name, math.sqrt(inside / total)))
    return "\n".join(lines) + "\n"


def main():
    rng = random.Random(20240611)
    rows = features(rng)
    write_checkpoint("fixture.ckpt", rows, rng)
    manifest = {
        "layer_name": LAYER,
        "d": D,
        "model_tag": "analyze-fixture",
        "branches": [{"name": n, "start": s, "end": e} for n, s, e in BRANCHES],
        "shards": [],
    }
    with open("manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    for name, start, end in BRANCHES:
        with open("expected_analyze_%s.csv" % name, "w") as f:
            f.write(expected_csv(rows, name, start, end))


if __name__ == "__main__":
    main()
