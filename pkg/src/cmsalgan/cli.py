"""Command-line interface: synth, train, predict, eval, gradcheck, report.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from . import data as D
from . import metrics as M
from . import model as Mo
from . import trainer as Tr

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# config handling


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _tuplify(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def build_configs(config_path=None, overrides=(), preset: str = "toy", flags: dict | None = None) -> tuple:
    """(ModelConfig, TrainConfig) from preset < config file < --set < flags.

    Unknown sections or keys raise UsageError naming the key.
    """
    raw = {"model": {}, "train": {}}
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {config_path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {config_path} is not valid JSON: {exc}") from None
        for section, vals in loaded.items():
            if section not in raw:
                raise UsageError(f"unknown config section {section!r} (expected 'model' or 'train')")
            raw[section].update(vals)
    for item in overrides:
        key, sep, val = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or not name:
            raise UsageError(f"override {item!r} must look like section.key=value")
        if section not in raw:
            raise UsageError(f"unknown config key {key!r} (section must be 'model' or 'train')")
        raw[section][name] = _parse_value(val)
    for k, v in (flags or {}).items():
        section, _, name = k.partition(".")
        raw[section][name] = v

    model_fields = set(Mo.ModelConfig.__dataclass_fields__)
    train_fields = set(Tr.TrainConfig.__dataclass_fields__)
    for section, known in (("model", model_fields), ("train", train_fields)):
        for name in raw[section]:
            if name not in known:
                raise UsageError(f"unknown config key '{section}.{name}'")
    try:
        if preset == "paper":
            mcfg = Mo.ModelConfig.paper(**_tuplify(raw["model"]))
            tcfg = Tr.TrainConfig(**_tuplify(raw["train"]))
        else:
            mcfg = Mo.ModelConfig.toy(**_tuplify(raw["model"]))
            tcfg = Tr.TrainConfig.toy(**_tuplify(raw["train"]))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return mcfg, tcfg


# ---------------------------------------------------------------------------
# helpers


def _digest_files(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(x) for x in paths):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _dataset_files(root: Path, ids) -> list:
    files = []
    for sub in ("rgb", "depth", "gt"):
        files += [D._find(root, sub, i) for i in ids]
    return files


def write_manifest(out_dir: Path, command: str, payload: dict) -> None:
    body = {"command": command, "version": __version__, **payload}
    D.write_manifest(out_dir / "manifest.json", body)


def _resolve_list(root: Path, name):
    if name is None:
        for cand in ("train.txt", "all.txt"):
            if (root / cand).is_file():
                return root / cand
        return None
    p = Path(name)
    return p if p.is_file() else root / name


def _load(root, list_name, size):
    root = Path(root)
    list_file = _resolve_list(root, list_name)
    samples = D.load_dataset(root, list_file, size)
    if not samples:
        raise D.DatasetError(f"no samples found under {root}")
    return samples, list_file


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    mix = None
    if args.mode_mix:
        mix = {}
        for part in args.mode_mix.split(","):
            k, _, v = part.partition("=")
            try:
                mix[k.strip()] = float(v)
            except ValueError:
                raise UsageError(f"--mode-mix entry {part!r} must look like mode=weight") from None
    spec = D.SynthSpec(count=args.count, seed=args.seed, mode=args.mode, image_size=args.image_size,
                       texture_noise=args.texture_noise, depth_noise=args.depth_noise,
                       families=tuple(args.families), mode_mix=mix)
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if not 0.0 <= args.test_fraction < 1.0:
        raise UsageError("--test-fraction must be in [0, 1)")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise D.DatasetError(f"cannot create {out}: {exc}") from None
    samples = D.synth_generate(spec)
    D.save_dataset(samples, out, "all.txt")
    n_test = int(round(args.test_fraction * len(samples)))
    if n_test:
        D.write_list(out / "test.txt", [s.id for s in samples[:n_test]])
        D.write_list(out / "train.txt", [s.id for s in samples[n_test:]])
    modes = {}
    for s in samples:
        modes[s.mode] = modes.get(s.mode, 0) + 1
    write_manifest(out, "synth", {"spec": spec.to_dict(), "seed": args.seed, "mode": args.mode,
                                  "mode_counts": modes, "count": len(samples), "test_count": n_test})
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def _train_flags(args) -> dict:
    flags = {}
    if args.seed is not None:
        flags["train.seed"] = args.seed
    if args.epochs is not None:
        flags["train.epochs"] = args.epochs
    if args.max_steps is not None:
        flags["train.max_steps"] = args.max_steps
    if args.no_afl:
        flags["train.use_afl"] = False
    if args.no_edge:
        flags["model.use_edge"] = False
    if args.no_attention:
        flags["model.use_attention"] = False
    if args.stream:
        flags["model.stream"] = args.stream
    return flags


def cmd_train(args) -> int:
    out = Path(args.out)
    if args.resume:
        state = Tr.load_state(args.resume)
        if args.epochs is not None:
            state.train_cfg.epochs = args.epochs
        if args.max_steps is not None:
            state.train_cfg.max_steps = args.max_steps
        mcfg, tcfg = state.model_cfg, state.train_cfg
    else:
        # every config problem surfaces here, before anything touches disk
        mcfg, tcfg = build_configs(args.config, args.set or (), args.preset, _train_flags(args))
        state = None
        if out.exists() and any(out.iterdir()):
            raise UsageError(f"run directory {out} is not empty; pass --resume or choose a new path")
    root = Path(args.data)
    train, list_file = _load(root, args.list, mcfg.image_size)
    val = None
    if args.val_list:
        val, _ = _load(root, args.val_list, mcfg.image_size)

    out.mkdir(parents=True, exist_ok=True)
    files = _dataset_files(root, [s.id for s in train])
    write_manifest(out, "train", {
        "model": mcfg.to_dict(), "train": tcfg.to_dict(), "seed": tcfg.seed,
        "data": str(root), "list": str(list_file) if list_file else None,
        "n_train": len(train), "data_sha256": _digest_files(files),
        "resumed_from": str(args.resume) if args.resume else None,
        "finetune_edge": bool(args.finetune_edge),
    })

    def progress(row):
        if args.log_every and row["step"] % args.log_every == 0:
            print(f"step {row['step']:6d} epoch {row['epoch']:4d} total {row['total_generator']:.4f} "
                  f"fused {row['bce_fused']:.4f} adv_d {row['adv_discriminator']:.4f}", file=sys.stderr)

    state = Tr.train(train, tcfg, mcfg, run_dir=out, val=val, state=state, progress=progress)
    if args.finetune_edge:
        curve = Tr.finetune_edge(state, train, tcfg, run_dir=out)
        if curve:
            print(f"edge fine-tune: {curve[0]:.4f} -> {curve[-1]:.4f}")
    print(f"trained {state.step} steps ({state.epoch} epochs); run directory {out}")
    return EXIT_OK


def _check_compatible(params: dict, cfg: Mo.ModelConfig) -> None:
    ref = Mo.init_params(cfg, 0)
    missing = sorted(set(ref) - set(params))
    extra = sorted(set(params) - set(ref))
    bad = [k for k in ref if k in params and ref[k].shape != params[k].shape]
    if missing or extra or bad:
        detail = (missing + extra + bad)[:5]
        raise D.DatasetError(f"checkpoint does not match its model config (e.g. {', '.join(detail)})")


def cmd_predict(args) -> int:
    try:
        params, mcfg, header, _ = Mo.load_checkpoint(args.checkpoint)
    except FileNotFoundError:
        raise D.MissingFileError(f"checkpoint not found: {args.checkpoint}") from None
    except (ValueError, KeyError, OSError) as exc:
        raise D.DatasetError(f"cannot read checkpoint {args.checkpoint}: {exc}") from None
    _check_compatible(params, mcfg)
    root = Path(args.data)
    list_file = _resolve_list(root, args.list) if args.list else None
    if list_file is None and (root / "all.txt").is_file() and args.list is None:
        list_file = root / "all.txt"
    samples = D.load_dataset(root, list_file, mcfg.image_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    b = D.stack(samples)
    pred = Mo.predict(params, mcfg, b["rgb"], b["depth"], args.batch_size)
    for s, p in zip(samples, pred):
        img = np.clip(np.round(255.0 * p[0].astype(np.float64)), 0, 255).astype(np.uint8)
        Image.fromarray(img).save(out / f"{s.id}.png")
    write_manifest(out, "predict", {
        "checkpoint": str(args.checkpoint), "checkpoint_sha256": _digest_files([args.checkpoint]),
        "data": str(root), "n_images": len(samples), "seed": header.get("seed"),
        "data_sha256": _digest_files(_dataset_files(root, [s.id for s in samples])),
    })
    print(f"wrote {len(samples)} saliency maps to {out}")
    return EXIT_OK


def _map_dir(path: Path) -> dict:
    if (path / "gt").is_dir():
        path = path / "gt"
    if not path.is_dir():
        raise D.MissingFileError(f"directory not found: {path}")
    return {p.stem: p for p in sorted(path.iterdir()) if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp")}


def cmd_eval(args) -> int:
    preds = _map_dir(Path(args.pred))
    gts = _map_dir(Path(args.gt))
    only_p = sorted(set(preds) - set(gts))
    only_g = sorted(set(gts) - set(preds))
    if only_p or only_g:
        msg = ["prediction and ground-truth ids differ"]
        if only_p:
            msg.append(f"  predictions without ground truth: {', '.join(only_p)}")
        if only_g:
            msg.append(f"  ground truth without predictions: {', '.join(only_g)}")
        raise D.DatasetError("\n".join(msg))
    if not gts:
        raise D.DatasetError("no images to evaluate")
    ids = sorted(gts)
    pred_maps, gt_maps = [], []
    for i in ids:
        g = D.read_gray(gts[i]) >= 0.5
        p = D.read_gray(preds[i])
        if p.shape != g.shape:
            p = D.resize_bilinear(p[None], g.shape[0])[0] if g.shape[0] == g.shape[1] else p
            if p.shape != g.shape:
                raise D.ImageFormatError(f"{i}: prediction {p.shape} vs ground truth {g.shape}")
        pred_maps.append(p)
        gt_maps.append(g)
    cfg = M.MetricsConfig(n_thresholds=args.thresholds)
    report = M.evaluate_dataset(pred_maps, gt_maps, cfg, ids)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    M.write_report_csv(report, out / "report.csv")
    M.write_pr_csv(report, out / "pr.csv")
    (out / "summary.txt").write_text(M.format_summary(report))
    if args.svg:
        from .plotting import plot_pr_curves
        plot_pr_curves({"aggregate": (report.precision, report.recall)}, out / "pr", formats=("svg",))
    write_manifest(out, "eval", {
        "pred": str(args.pred), "gt": str(args.gt), "n_images": len(ids),
        "pred_sha256": _digest_files(preds.values()), "gt_sha256": _digest_files(gts.values()),
        "summary": report.summary(), "metrics": {"beta2": cfg.beta2, "s_alpha": cfg.s_alpha,
                                                 "n_thresholds": cfg.n_thresholds},
    })
    sys.stdout.write(M.format_summary(report))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_table
    rows = run_table(seed=args.seed, composite_elements=args.composite_elements)
    lines = ["name,kind,max_rel_error,tolerance,status"]
    for r in rows:
        lines.append(f"{r.name},{r.kind},{r.error:.3e},{r.tol:.0e},{'pass' if r.passed else 'FAIL'}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.csv").write_text(text)
        write_manifest(out, "gradcheck", {"seed": args.seed, "composite_elements": args.composite_elements,
                                          "passed": all(r.passed for r in rows)})
    return EXIT_OK if all(r.passed for r in rows) else EXIT_VERIFY


def cmd_report(args) -> int:
    from .plotting import plot_losses, plot_pr_curves
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fmts = tuple(args.format)
    rows_out = []
    figures = []
    for run in args.run or ():
        run = Path(run)
        loss_csv = run / "loss.csv"
        if not loss_csv.is_file():
            raise D.MissingFileError(f"no loss.csv in run directory {run}")
        hist = Tr.read_loss_csv(loss_csv)
        if hist:
            figures += plot_losses(hist, out / f"loss_{run.name}", formats=fmts, smooth=args.smooth)
            last = hist[-1]
            rows_out.append({"source": run.name, "kind": "run", "steps": last["step"],
                             "total_generator": last["total_generator"], "bce_fused": last["bce_fused"],
                             "maxF": "", "S": "", "MAE": ""})
    curves = {}
    for ev in args.eval or ():
        ev = Path(ev)
        if not (ev / "pr.csv").is_file() or not (ev / "report.csv").is_file():
            raise D.MissingFileError(f"{ev} is not an eval output directory (needs pr.csv and report.csv)")
        _, p, r = M.read_pr_csv(ev / "pr.csv")
        curves[ev.name] = (p, r)
        with open(ev / "report.csv", newline="") as fh:
            agg = [row for row in csv.DictReader(fh) if row["id"] == "aggregate"][0]
        rows_out.append({"source": ev.name, "kind": "eval", "steps": "", "total_generator": "",
                         "bce_fused": "", "maxF": agg["maxF"], "S": agg["S"], "MAE": agg["MAE"]})
    if curves:
        figures += plot_pr_curves(curves, out / "pr_curves", formats=fmts)
    if not rows_out:
        raise UsageError("report needs at least one --run or --eval directory")
    cols = ["source", "kind", "steps", "total_generator", "bce_fused", "maxF", "S", "MAE"]
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows_out)
    sys.stdout.write("\t".join(cols) + "\n")
    for r in rows_out:
        sys.stdout.write("\t".join(str(r[c]) for c in cols) + "\n")
    write_manifest(out, "report", {"runs": [str(r) for r in args.run or ()],
                                   "evals": [str(e) for e in args.eval or ()],
                                   "figures": [p.name for p in figures]})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="cmsalgan", description="Two-stream RGB-D saliency with cross-modality adversarial training.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic RGB-D dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, default=20, help="number of samples")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--mode", default="none", choices=D.MODES, help="corruption mode for every sample")
    p.add_argument("--mode-mix", help="per-sample mode weights, e.g. corrupt_rgb=0.5,corrupt_depth=0.5")
    p.add_argument("--image-size", type=int, default=64, help="side length in pixels")
    p.add_argument("--texture-noise", type=float, default=0.3, help="RGB texture level in [0, 1]")
    p.add_argument("--depth-noise", type=float, default=0.3, help="depth noise level in [0, 1]")
    p.add_argument("--families", nargs="+", default=list(D.FAMILIES), choices=D.FAMILIES, help="shape families")
    p.add_argument("--test-fraction", type=float, default=0.0,
                   help="hold out this fraction as test.txt (rest in train.txt)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True, help="dataset root with rgb/, depth/, gt/")
    p.add_argument("--list", help="split list (default: train.txt, else all.txt, else every gt file)")
    p.add_argument("--val-list", help="split list evaluated after every epoch")
    p.add_argument("--out", required=True, help="run directory (must be new or empty)")
    p.add_argument("--config", help="JSON file with 'model' and 'train' sections")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override (repeatable)")
    p.add_argument("--preset", choices=("toy", "paper"), default="toy", help="scale preset")
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--epochs", type=int, help="number of epochs")
    p.add_argument("--max-steps", type=int, help="stop after this many steps")
    p.add_argument("--no-afl", action="store_true", help="disable the adversarial modality loss")
    p.add_argument("--no-edge", action="store_true", help="disable the edge branch")
    p.add_argument("--no-attention", action="store_true", help="disable attention refinement")
    p.add_argument("--stream", choices=("rgb", "depth", "both"), help="active generator streams")
    p.add_argument("--finetune-edge", action="store_true", help="run the edge fine-tune after training")
    p.add_argument("--resume", help="continue from a checkpoint written by train")
    p.add_argument("--log-every", type=int, default=50, help="progress line interval in steps (0 = quiet)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write saliency maps for a dataset")
    p.add_argument("--checkpoint", required=True, help="checkpoint .npz")
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--list", help="split list (default: all.txt, else every gt file)")
    p.add_argument("--out", required=True, help="output directory for <id>.png maps")
    p.add_argument("--batch-size", type=int, default=8, help="inference batch size")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score saliency maps against ground truth")
    p.add_argument("--pred", required=True, help="directory of predicted maps")
    p.add_argument("--gt", required=True, help="ground-truth directory or dataset root")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--thresholds", type=int, default=256, help="number of PR thresholds")
    p.add_argument("--svg", action="store_true", help="also draw the PR curve as SVG")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seed", type=int, default=0, help="seed for inputs and sampled entries")
    p.add_argument("--composite-elements", type=int, default=8,
                   help="entries checked per parameter tensor in whole-graph checks")
    p.add_argument("--out", help="optional directory for gradcheck.csv and a manifest")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="render loss and PR figures with a summary table")
    p.add_argument("--run", action="append", help="training run directory (repeatable)")
    p.add_argument("--eval", action="append", help="eval output directory (repeatable)")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--format", nargs="+", default=["png"], choices=("png", "svg"), help="figure formats")
    p.add_argument("--smooth", type=int, default=1, help="moving-average window for loss curves")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (D.DatasetError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
