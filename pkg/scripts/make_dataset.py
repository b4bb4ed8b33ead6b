#!/usr/bin/env python3
"""Generate a synthetic desk-scale dataset in the CIFAR-10 binary layout.

The train split holds `--n-train` records across data_batch_*.bin files;
the test split goes to test_batch.bin.  Class textures are shared between
splits, sample noise is not.

Example:
    python scripts/make_dataset.py --out data/stand_in --n-train 14000 --n-test 2000
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from fedrepopt.data import synth_textures, write_cifar_binary


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True)
    ap.add_argument("--n-train", type=int, default=14000)
    ap.add_argument("--n-test", type=int, default=2000)
    ap.add_argument("--classes", type=int, default=10)
    ap.add_argument("--noise", type=float, default=3.0)
    ap.add_argument("--max-shift", type=int, default=4)
    ap.add_argument("--pattern-seed", type=int, default=4242)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    train, train_labels = synth_textures(
        args.n_train, args.classes, 32, args.pattern_seed, args.seed,
        noise=args.noise, max_shift=args.max_shift,
    )
    write_cifar_binary(args.out, train, train_labels, "train")
    test, test_labels = synth_textures(
        args.n_test, args.classes, 32, args.pattern_seed, args.seed + 1,
        noise=args.noise, max_shift=args.max_shift,
    )
    write_cifar_binary(args.out, test, test_labels, "test")
    print(f"wrote {args.n_train} train + {args.n_test} test records to {args.out}")


if __name__ == "__main__":
    main()
