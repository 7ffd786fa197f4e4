"""Fit a toy denoiser on real-domain renderings, then learn a style token on a shifted set.

The shifted set is brighter than anything the denoiser saw, so the token has
something to absorb; the loss over the last window should sit below the first.
"""
import argparse

import numpy as np
import torch

from bridged.diffusion import ToyDenoiser, fit_toy_denoiser
from bridged.dsi import InversionConfig, save_token, train_style_token
from bridged.genesis import render_procedural
from bridged.toy import toy_dataset


def renderings(n_classes, per_class, size, domain, brightness, seed):
    out = {}
    for c in range(n_classes):
        imgs = [render_procedural(c, n_classes, size, seed * 100003 + c * 1009 + i, domain, brightness)
                for i in range(per_class)]
        out[c] = torch.from_numpy(np.stack(imgs)).permute(0, 3, 1, 2).float() / 255
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="toy_style.bt")
    args = ap.parse_args()

    ds = toy_dataset(4)
    den = ToyDenoiser(seed=args.seed)
    fit_toy_denoiser(den, renderings(4, 20, 16, "real", 0.0, 1), ds.class_names, steps=1500, seed=args.seed)
    target = renderings(4, 20, 16, "synthetic", 0.35, 2)
    cfg = InversionConfig(iterations=args.iterations, batch_size=16, learning_rate=1e-2, seed=args.seed)
    res = train_style_token(None, den, cfg, images_by_class=target, class_names=ds.class_names)
    w = max(1, args.iterations // 20)
    print(f"loss first {w}: {np.mean(res.losses[:w]):.4f}  last {w}: {np.mean(res.losses[-w:]):.4f}")
    save_token(res.token, args.out)
    print(f"token -> {args.out}")


if __name__ == "__main__":
    main()
