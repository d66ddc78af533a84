#!/usr/bin/env python3
"""Convert a 2-D .npy array (and optional label array) to embspace files.

    python convert_npy.py images.npy images.emb --modality image --normalize
    python convert_npy.py feats.npy out.emb --labels labels.npy --labels-out labels.csv
"""
import argparse
import json
import sys

import numpy as np


def write_emb(path, arr, modality, normalized, dtype):
    arr = np.asarray(arr, dtype="<f8")
    if arr.ndim != 2:
        raise SystemExit(f"expected a 2-D array, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise SystemExit("array contains non-finite values")
    header = {
        "version": 1,
        "count": int(arr.shape[0]),
        "dim": int(arr.shape[1]),
        "dtype": "f32le" if dtype == "f32" else "f64le",
        "modality": modality,
        "normalized": bool(normalized),
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, separators=(",", ":")).encode() + b"\n")
        f.write(arr.astype("<f4" if dtype == "f32" else "<f8").tobytes(order="C"))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("input")
    ap.add_argument("output")
    ap.add_argument("--modality", choices=["image", "text", "unspecified"], default="unspecified")
    ap.add_argument("--normalize", action="store_true", help="L2-normalize rows before writing")
    ap.add_argument("--dtype", choices=["f32", "f64"], default="f32")
    ap.add_argument("--labels", help=".npy of integer labels, one per row")
    ap.add_argument("--labels-out", help="CSV path for --labels")
    args = ap.parse_args(argv)

    arr = np.load(args.input)
    if args.normalize:
        norms = np.linalg.norm(arr, axis=1, keepdims=True)
        if (norms < 1e-12).any():
            raise SystemExit("cannot normalize zero rows")
        arr = arr / norms
    write_emb(args.output, arr, args.modality, args.normalize, args.dtype)

    if args.labels:
        labels = np.load(args.labels)
        if labels.shape != (arr.shape[0],):
            raise SystemExit(f"labels shape {labels.shape} does not match {arr.shape[0]} rows")
        out = args.labels_out or args.output.rsplit(".", 1)[0] + "_labels.csv"
        with open(out, "w") as f:
            f.write("index,label\n")
            for i, label in enumerate(labels.tolist()):
                f.write(f"{i},{int(label)}\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
