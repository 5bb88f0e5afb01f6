"""Informational timings for the two-party operations; nothing is asserted.

    python3 benchmarks/bench_threshold.py [--bits 2048] [--runs 20]
"""
import argparse
import statistics
import time

from lngate.threshold_ecdsa import ChildIndex, derive_child, derive_commitment_point, keygen, sign


def timed(fn, runs):
    samples = []
    for i in range(runs):
        start = time.perf_counter()
        fn(i)
        samples.append((time.perf_counter() - start) * 1000)
    return statistics.median(samples), max(samples)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--bits", type=int, default=2048, help="Paillier modulus size")
    parser.add_argument("--runs", type=int, default=20)
    args = parser.parse_args()
    test_size = args.bits < 2048

    sv, cv = keygen(1, 2, paillier_bits=args.bits, allow_test_size=test_size)
    rows = [
        ("keygen", timed(lambda i: keygen(i, i + 1, paillier_bits=args.bits, allow_test_size=test_size),
                         max(1, args.runs // 5))),
        ("sign", timed(lambda i: sign(f"m{i}".encode(), sv, cv, ephemeral_seeds=(i, i + 1)), args.runs)),
        ("derive child", timed(lambda i: (derive_child(sv, ChildIndex(i)), derive_child(cv, ChildIndex(i))),
                               args.runs)),
        ("commitment point", timed(lambda i: derive_commitment_point(sv, cv, i, i), args.runs)),
    ]
    print(f"Paillier {args.bits} bits, median / max in ms")
    for name, (median, worst) in rows:
        print(f"  {name:18s} {median:9.1f} {worst:9.1f}")


if __name__ == "__main__":
    main()
