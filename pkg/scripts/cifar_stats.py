"""Per-channel mean/std of a CIFAR binary training split (pixels scaled to [0, 1]).

    python3 scripts/cifar_stats.py /path/to/cifar-100-binary [--layout cifar100]

Prints JSON that can be pasted into a run config's ``data`` block as
``"mean"``/``"std"``; the library defaults were produced this way.
"""

import argparse
import json

from dhvt.harness.data import channel_stats, load_cifar_binary

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("directory")
    ap.add_argument("--layout", choices=["cifar100", "cifar10"])
    args = ap.parse_args()
    ds = load_cifar_binary(args.directory, "train", args.layout, normalize=False)
    mean, std = channel_stats(ds.images)
    print(json.dumps({"mean": [round(m, 4) for m in mean], "std": [round(s, 4) for s in std],
                      "images": len(ds)}))
