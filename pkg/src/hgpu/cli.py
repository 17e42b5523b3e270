"""``hgpu`` command line: gen-data | train | infer | eval | gradcheck.

Exit codes: 0 success, 1 verification or evaluation failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import metrics, synthdata, train, verify
from .config import ConfigError, RunConfig, load_config
from .model import HGPU

log = logging.getLogger("hgpu")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _write_resolved(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.txt").write_text(cfg.dump())


def _load_split(split_dir: Path) -> dict[str, synthdata.VideoSequence]:
    if not (split_dir / "manifest.txt").is_file():
        raise UsageError(f"no manifest.txt in {split_dir}")
    seqs = {}
    for seq_id, n_frames, _ in synthdata.read_manifest(split_dir):
        seq = synthdata.read_sequence(split_dir / seq_id)
        if len(seq) != n_frames:
            raise UsageError(f"{seq_id}: manifest says {n_frames} frames, found {len(seq)}")
        seqs[seq_id] = seq
    return seqs


def _sequence_dirs(path: Path) -> list[tuple[str, Path]]:
    """A split directory (with manifest) or a single sequence directory."""
    if (path / "manifest.txt").is_file():
        return [(seq_id, path / seq_id) for seq_id, _, _ in synthdata.read_manifest(path)]
    if any(path.glob("frame_*.ppm")) or any(path.glob("mask_*.pgm")):
        return [(path.name, path)]
    raise UsageError(f"{path} is neither a sequence nor a split directory")


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, seed=args.seed, dataset_root=args.out)
    root = Path(cfg.dataset_root)
    _write_resolved(cfg, root)
    counts = synthdata.generate_dataset(root, cfg.n_train, cfg.n_val, cfg.scene_config(), cfg.seed)
    print(f"wrote {counts['train']} train and {counts['val']} val sequences to {root}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, seed=args.seed, output_dir=args.out)
    root = Path(cfg.dataset_root)
    for split in ("train", "val"):
        if not (root / split / "manifest.txt").is_file():
            raise UsageError(f"dataset split missing: {root / split}")
    out = Path(cfg.output_dir)
    _write_resolved(cfg, out)
    train_seqs = _load_split(root / "train")
    val_seqs = _load_split(root / "val")
    model = HGPU(cfg.model_config())

    def report(epoch, history):
        print(f"epoch {epoch:3d} train_loss {history.train_loss[-1]:.6f} val_J {history.val_j[-1]:.4f}", flush=True)

    history = train.train_loop(model, train_seqs, val_seqs, cfg.train_config(), out, on_epoch=report)
    print(f"best val_J {max(history.val_j, default=0.0):.4f} at epoch {history.best_epoch}; "
          f"checkpoint {out / 'best.ckpt'}")
    return EXIT_OK


def cmd_infer(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    model, meta = train.load_model(ckpt)
    zero_flow = meta.get("train.zero_flow") == "True"
    src = Path(args.sequence)
    out = Path(args.out)
    dirs = _sequence_dirs(src)
    single = len(dirs) == 1 and not (src / "manifest.txt").is_file()
    for seq_id, d in dirs:
        seq = synthdata.read_sequence(d)
        probs = train.predict_sequence(model, seq, zero_flow)
        target = out if single else out / seq_id
        target.mkdir(parents=True, exist_ok=True)
        for k, p in enumerate(probs):
            (target / f"mask_{k:04d}.pgm").write_bytes(synthdata.write_pgm(metrics.binarize(p)))
            (target / f"prob_{k:04d}.npy").write_bytes(_npy_bytes(p))
    if not single:
        lines = [f"{seq_id} {len(list((out / seq_id).glob('mask_*.pgm')))} 0\n" for seq_id, _ in dirs]
        (out / "manifest.txt").write_text("".join(lines))
    print(f"predicted {len(dirs)} sequence(s) into {out}")
    return EXIT_OK


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr.astype("<f8"), allow_pickle=False)
    return buf.getvalue()


def _read_masks(d: Path) -> list[np.ndarray]:
    return [synthdata.read_pgm(p.read_bytes()) > 127 for p in sorted(d.glob("mask_*.pgm"))]


def cmd_eval(args) -> int:
    pred_root, gt_root = Path(args.pred), Path(args.gt)
    gt_dirs = _sequence_dirs(gt_root)
    single = len(gt_dirs) == 1 and not (gt_root / "manifest.txt").is_file()
    scores = []
    for seq_id, gd in gt_dirs:
        pd = pred_root if single else pred_root / seq_id
        gts, preds = _read_masks(gd), _read_masks(pd)
        if len(gts) != len(preds) or not gts:
            print(f"{seq_id}: {len(preds)} predicted vs {len(gts)} ground-truth masks", file=sys.stderr)
            return EXIT_FAIL
        scores += metrics.score_sequence(seq_id, preds, gts)
    report = metrics.aggregate(scores)
    out = Path(args.out) if args.out else pred_root
    out.mkdir(parents=True, exist_ok=True)
    (out / "scores.csv").write_text(metrics.scores_to_csv(scores))
    (out / "summary.json").write_text(report.to_json())
    print(report.to_json())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = verify.run_all(args.seed if args.seed is not None else 0, corrupt_op=args.corrupt_op)
    text = verify.format_report(results)
    sys.stdout.write(text)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "gradcheck.txt").write_text(text)
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hgpu", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", help="key = value run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help=out_help)

    common(sub.add_parser("gen-data", help="write a synthetic dataset"), "dataset root")
    common(sub.add_parser("train", help="train on a generated dataset"), "output directory")
    p = sub.add_parser("infer", help="predict masks for a sequence or split")
    common(p, "prediction directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sequence", required=True, help="sequence directory or split directory with manifest")
    p = sub.add_parser("eval", help="score predictions against ground truth")
    common(p, "report directory (defaults to --pred)")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p = sub.add_parser("gradcheck", help="finite-difference verification")
    common(p, "write the report here as well")
    p.add_argument("--corrupt-op", help=argparse.SUPPRESS)
    return parser


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.command == "infer" and args.out is None:
        print("hgpu infer: --out is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError, synthdata.NetpbmError) as exc:
        print(f"hgpu {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
