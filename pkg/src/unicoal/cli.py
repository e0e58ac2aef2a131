"""Command-line entry point: ``unicoal train|infer|eval|simulate-lr|filters``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 2, 3

logger = logging.getLogger("unicoal")


def _cmd_train(args) -> int:
    from .config import load_config
    from .train import Trainer

    cfg = load_config(args.config)
    if args.out_dir:
        cfg.train.out_dir = args.out_dir
    trainer = Trainer.resume(args.resume, out_dir=args.out_dir) if args.resume else Trainer(cfg)
    trainer.fit(args.steps)
    path = trainer.save(trainer.out_dir / "final.zip")
    print(json.dumps({"checkpoint": str(path), "step": trainer.step, "images_seen": trainer.images_seen}))
    return EXIT_OK


def _cmd_infer(args) -> int:
    from .inference import ReconstructionRequest, reconstruct_volume

    req = ReconstructionRequest(input=args.input, source_modality=args.source_modality,
                                target_modality=args.target_modality,
                                target_thickness=args.target_thickness, checkpoint=args.checkpoint,
                                seed=args.seed, output=args.output)
    vol = reconstruct_volume(req)
    print(json.dumps({"output": args.output, "slices": vol.num_slices, "thickness_mm": vol.thickness_mm}))
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .metrics import evaluate, write_report
    from .volume import read_volume

    masks = (args.pred_mask, args.gt_mask)
    if (masks[0] is None) != (masks[1] is None):
        raise ValueError("--pred-mask and --gt-mask must be given together")
    pm = read_volume(args.pred_mask).voxels > 0.5 if args.pred_mask else None
    gm = read_volume(args.gt_mask).voxels > 0.5 if args.gt_mask else None
    report = evaluate(read_volume(args.pred), read_volume(args.gt), pm, gm,
                      data_range=args.data_range, sheet_path=args.sheet)
    write_report(report, args.report)
    print(json.dumps(report))
    return EXIT_OK


def _cmd_simulate_lr(args) -> int:
    from .data import simulate_thick_slices
    from .volume import read_volume, write_volume

    vol = simulate_thick_slices(read_volume(args.input, modality=args.modality), args.dsf)
    write_volume(vol, args.output)
    print(json.dumps({"output": args.output, "slices": vol.num_slices, "thickness_mm": vol.thickness_mm}))
    return EXIT_OK


def _cmd_filters(args) -> int:
    from .aliasfree import build_schedule, frequency_response_table

    rows = frequency_response_table(build_schedule(args.layers, args.resolution), args.num_freqs)
    out = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        writer = csv.DictWriter(out, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if args.output:
            out.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unicoal", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a TOML/JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--resume")
    t.add_argument("--out-dir")
    t.add_argument("--steps", type=int, help="stop after this many further steps")
    t.set_defaults(func=_cmd_train)

    i = sub.add_parser("infer", help="reconstruct a volume at a target modality and thickness")
    i.add_argument("--input", required=True)
    i.add_argument("--source-modality", required=True)
    i.add_argument("--target-modality", required=True)
    i.add_argument("--target-thickness", type=float, required=True)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--output", required=True)
    i.set_defaults(func=_cmd_infer)

    e = sub.add_parser("eval", help="PSNR/SSIM(/DSC) report for a prediction")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--pred-mask")
    e.add_argument("--gt-mask")
    e.add_argument("--report", required=True)
    e.add_argument("--sheet", help="optional PNG contact sheet")
    e.add_argument("--data-range", type=float, default=2.0)
    e.set_defaults(func=_cmd_eval)

    s = sub.add_parser("simulate-lr", help="simulate a thick-slice acquisition")
    s.add_argument("--input", required=True)
    s.add_argument("--dsf", type=int, required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--modality")
    s.set_defaults(func=_cmd_simulate_lr)

    f = sub.add_parser("filters", help="per-layer filter frequency responses as CSV")
    f.add_argument("--resolution", type=int, default=256)
    f.add_argument("--layers", type=int, default=14)
    f.add_argument("--num-freqs", type=int, default=64)
    f.add_argument("--output")
    f.set_defaults(func=_cmd_filters)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .checkpoint import CheckpointError

    try:
        return args.func(args)
    except BrokenPipeError:
        return EXIT_OK
    except (ValueError, FileNotFoundError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001
        logger.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
