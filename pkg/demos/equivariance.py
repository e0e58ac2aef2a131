"""Shift an input window by whole pixels and compare against the shifted output.

At random weights the alias-free generator should commute with integer shifts
on the interior of the image (well above 40 dB PSNR).
"""

import argparse
import math

import torch

from unicoal.config import desk_model_config
from unicoal.generator import Generator, random_condition


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--resolution", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    torch.manual_seed(args.seed)
    r = args.resolution
    gen = Generator(desk_model_config(r)).eval()
    x = torch.full((1, gen.cfg.window, r, r), -1.0)
    q = r // 4
    x[..., q:3 * q, q:3 * q] = torch.rand(1, gen.cfg.window, 2 * q, 2 * q) * 2 - 1
    cond = random_condition(gen, 1, seed=args.seed)
    crop = r // 4

    with torch.no_grad():
        base = gen.generate_slice(x, cond)
        for shift in [(1, 0), (0, 2), (4, 4), (q // 2, 3)]:
            moved = gen.generate_slice(torch.roll(x, shift, (2, 3)), cond)
            diff = (moved - torch.roll(base, shift, (2, 3)))[..., crop:-crop, crop:-crop]
            mse = diff.square().mean().item()
            print(f"shift {shift}: {10 * math.log10(4 / max(mse, 1e-20)):.1f} dB")


if __name__ == "__main__":
    main()
