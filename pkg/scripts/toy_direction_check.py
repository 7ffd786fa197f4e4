"""Compare the four pipelines on the offline toy task.

Prints per-seed final test accuracy and stage-2 epochs to 90% train accuracy,
then the medians the direction check looks at.
"""
import argparse
import tempfile
import time

from bridged.toy import build_toy_task, direction_check


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--root", help="where to write the toy data (default: a temp dir)")
    args = ap.parse_args()

    t0 = time.perf_counter()
    with tempfile.TemporaryDirectory() as tmp:
        task = build_toy_task(args.root or tmp, seed=args.data_seed)
        res = direction_check(task, seeds=tuple(range(args.seeds)))
    for kind in res.accuracy:
        accs = " ".join(f"{a:.3f}" for a in res.accuracy[kind])
        print(f"{kind:10s} acc [{accs}] median {res.median_accuracy(kind):.3f}  "
              f"epochs-to-90% {res.convergence[kind]} median {res.median_convergence(kind):g}")
    ok_acc = res.median_accuracy("bridged++") >= res.median_accuracy("mixed")
    ok_conv = res.median_convergence("bridged") <= res.median_convergence("vanilla")
    print(f"bridged++ >= mixed: {ok_acc}; bridged converges no slower than vanilla: {ok_conv}")
    print(f"{time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
