"""Command-line entry point.

    faceprotect make-data --config C --out DIR
    faceprotect train     --config C [--out RUN] [--resume CKPT]
    faceprotect protect   --ckpt CKPT INPUT_DIR OUTPUT_DIR
    faceprotect eval      --protocol {id,swap,quality,robust,alpha} --ckpt CKPT [--gate]

Exit codes: 0 success, 1 validation error, 2 runtime error, 3 gate failure.
Concurrent commands must use distinct run directories; nothing is locked.
"""
from __future__ import annotations

import argparse
import logging
import re
import sys
from pathlib import Path

from PIL import Image, PngImagePlugin

from . import config as C
from . import evaluate as ev
from . import pipeline as pl
from .checkpoint import CheckpointError
from .data import DatasetError, denormalize_u8, read_image
from .extractor import load_extractor
from .trainer import load_checkpoint, protect_array

log = logging.getLogger("faceprotect")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_GATE = 0, 1, 2, 3
PROTOCOLS = ("id", "swap", "quality", "robust", "alpha")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
SNAPSHOT = "config.snapshot"
EXTRACTOR = "extractor.bin"


class ValidationError(Exception):
    pass


class GateError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(message)


def _run_config(args) -> C.RunConfig:
    ckpt = getattr(args, "ckpt", None)
    run_dir = None if ckpt is None else (Path(ckpt) if Path(ckpt).is_dir() else Path(ckpt).parent)
    if getattr(args, "config", None):
        cfg = C.load(args.config)
    elif run_dir is not None and (run_dir / SNAPSHOT).is_file():
        cfg = C.load(run_dir / SNAPSHOT)
    else:
        cfg = C.RunConfig()
    return C.override(cfg, seed=getattr(args, "seed", None), resolution=getattr(args, "resolution", None),
                      out=getattr(args, "out", None))


def write_snapshot(cfg: C.RunConfig, run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / SNAPSHOT).write_text(f"# fingerprint={cfg.fingerprint()}\n" + cfg.dumps())


def checkpoint_epoch(path: Path) -> int:
    m = re.fullmatch(r"ckpt_epoch_(\d+)\.bin", path.name)
    return int(m.group(1)) if m else -1


def latest_checkpoint(run_dir: str | Path) -> Path:
    found = sorted(Path(run_dir).glob("ckpt_epoch_*.bin"), key=checkpoint_epoch)
    if not found:
        raise ValidationError(f"no checkpoints in {run_dir}")
    return found[-1]


def _load_state(path: str | Path):
    p = Path(path)
    if p.is_dir():
        p = latest_checkpoint(p)
    if not p.is_file():
        raise ValidationError(f"checkpoint not found: {p}")
    return load_checkpoint(p.read_bytes()), p


def _load_extractor(ckpt_path: Path, explicit: str | None):
    p = Path(explicit) if explicit else ckpt_path.parent / EXTRACTOR
    if not p.is_file():
        raise ValidationError(f"extractor not found: {p}")
    return load_extractor(p.read_bytes())


def cmd_make_data(args) -> int:
    cfg = _run_config(args)
    if args.seed is not None:
        cfg = C.override(cfg, data_seed=args.seed)
    path = pl.make_data(cfg, args.out)
    log.info("wrote %s", path)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    run_dir = Path(cfg.out)
    state = None
    if args.resume:
        state, path = _load_state(args.resume)
        if state.cfg.to_dict() != cfg.train.to_dict():
            raise ValidationError(f"{path} was trained with a different config")
        log.info("resuming from %s at step %d", path, state.step)
    write_snapshot(cfg, run_dir)
    data = pl.load_data(cfg)
    extractor = pl.get_extractor(cfg, data, run_dir / EXTRACTOR)
    pl.train_protector(cfg, data, extractor, run_dir=run_dir, state=state)
    log.info("training done; checkpoints in %s", run_dir)
    return EXIT_OK


def _png_info(fingerprint: str) -> PngImagePlugin.PngInfo:
    info = PngImagePlugin.PngInfo()
    info.add_text("fingerprint", fingerprint)
    return info


def cmd_protect(args) -> int:
    state, ckpt_path = _load_state(args.ckpt)
    extractor = _load_extractor(ckpt_path, args.extractor)
    src, dst = Path(args.input_dir), Path(args.output_dir)
    if not src.is_dir():
        raise ValidationError(f"input directory not found: {src}")
    files = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        log.warning("no images in %s; nothing to do", src)
        return EXIT_OK
    dst.mkdir(parents=True, exist_ok=True)
    fingerprint = C.RunConfig(train=state.cfg).fingerprint()
    failures = 0
    for f in files:
        try:
            img = read_image(f, state.cfg.resolution)
            out = denormalize_u8(protect_array(state, extractor, img[None])[0]).transpose(1, 2, 0)
            im = Image.fromarray(out)
            if f.suffix.lower() == ".png":
                im.save(dst / f.name, format="PNG", pnginfo=_png_info(fingerprint))
            else:
                im.save(dst / f.name)
        except Exception as e:  # keep going; report every bad file
            failures += 1
            log.error("%s: %s", f.name, e)
    log.info("protected %d/%d images into %s", len(files) - failures, len(files), dst)
    return EXIT_RUNTIME if failures else EXIT_OK


def _gate(protocol: str, rep: ev.EvalReport) -> list[str]:
    """Acceptance thresholds used by ``eval --gate``; returns the failures."""
    bad = []
    if protocol == "id":
        clean, prot = rep.row(condition="clean"), rep.row(condition="protected")
        if clean["acc1"] < 0.9:
            bad.append(f"clean acc1 {clean['acc1']:.3f} < 0.9")
        if prot["acc1"] > 0.5:
            bad.append(f"protected acc1 {prot['acc1']:.3f} > 0.5")
    elif protocol == "quality":
        q = rep.rows[0]
        if q["psnr"] < 25:
            bad.append(f"psnr {q['psnr']:.2f} < 25")
        if q["ssim"] < 0.9:
            bad.append(f"ssim {q['ssim']:.3f} < 0.9")
    elif protocol == "swap":
        for r in rep.rows:
            if r["swap_vs_swap"] > r["baseline_transfer"] - 0.2:
                bad.append(f"{r['swap_model']}: swap_vs_swap {r['swap_vs_swap']:.3f} "
                           f"> baseline {r['baseline_transfer']:.3f} - 0.2")
    elif protocol == "robust":
        base = rep.row(kind="none")["acc1"]
        for r in rep.rows:
            if r["value"] == "all" and abs(r["acc1"] - base) > 0.15:
                bad.append(f"{r['kind']}: acc1 {r['acc1']:.3f} vs none {base:.3f}")
    elif protocol == "alpha":
        if rep.rows[-1]["psnr"] > rep.rows[0]["psnr"]:
            bad.append("psnr at the largest alpha exceeds psnr at the smallest")
    return bad


def cmd_eval(args) -> int:
    if args.protocol not in PROTOCOLS:
        raise ValidationError(f"unknown protocol {args.protocol!r}; valid: {', '.join(PROTOCOLS)}")
    state, ckpt_path = _load_state(args.ckpt)
    cfg = _run_config(args)
    if args.alpha_grid:
        cfg = C.override(cfg, alpha_grid=tuple(float(a) for a in args.alpha_grid.split(",")))
    if state.cfg.resolution != cfg.train.resolution:
        raise ValidationError("checkpoint resolution differs from the config")
    run_dir = Path(args.out) if args.out else ckpt_path.parent
    extractor = _load_extractor(ckpt_path, args.extractor)
    data = pl.load_data(cfg)
    protected = protect_array(state, extractor, data.probe.images)
    p = args.protocol
    if p == "id":
        rep = pl.eval_id(cfg, data, extractor, protected)
    elif p == "swap":
        rep = pl.eval_swap(cfg, data, extractor, protected, pl.get_swap_models(cfg, data, extractor, run_dir))
    elif p == "quality":
        rep = pl.eval_quality(cfg, data, extractor, protected)
    elif p == "robust":
        rep = pl.eval_robust(cfg, data, extractor, protected)
    else:
        rep = pl.alpha_sweep(cfg, data, extractor)
    reports = run_dir / "reports"
    rep.write(reports)
    if p == "robust":
        for kind, sub in ev.split_by(rep, "kind").items():
            sub.write(reports, f"robust_{kind}")
    ev.write_plot(rep, run_dir / "plots" / f"{p}.png")
    for line in rep.to_csv().splitlines():
        print(line)
    if args.gate:
        bad = _gate(p, rep)
        if bad:
            raise GateError("; ".join(bad))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="faceprotect", description="Identity-protection toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_help):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="override the seed")
        p.add_argument("--resolution", type=int, help="override the image resolution")
        p.add_argument("--out", help=out_help)

    p = sub.add_parser("make-data", help="write the synthetic dataset and manifest")
    common(p, "dataset directory")
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train", help="train (or resume) a protector")
    common(p, "run directory")
    p.add_argument("--resume", help="checkpoint (or run directory) to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("protect", help="protect every image in a directory")
    p.add_argument("--ckpt", required=True, help="protector checkpoint or run directory")
    p.add_argument("--extractor", help="extractor file (default: next to the checkpoint)")
    p.add_argument("input_dir")
    p.add_argument("output_dir")
    p.set_defaults(func=cmd_protect)

    p = sub.add_parser("eval", help="run an evaluation protocol")
    common(p, "run directory for reports/ and plots/ (default: the checkpoint's)")
    p.add_argument("--protocol", required=True, help=f"one of {', '.join(PROTOCOLS)}")
    p.add_argument("--ckpt", required=True, help="protector checkpoint or run directory")
    p.add_argument("--extractor", help="extractor file (default: next to the checkpoint)")
    p.add_argument("--alpha-grid", help="comma-separated alphas for the alpha protocol")
    p.add_argument("--gate", action="store_true", help="exit 3 if acceptance thresholds fail")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, C.ConfigError, DatasetError, CheckpointError) as e:
        log.error("%s", e)
        return EXIT_INVALID
    except GateError as e:
        log.error("gate failed: %s", e)
        return EXIT_GATE
    except Exception as e:
        log.exception("runtime failure: %s", e)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
