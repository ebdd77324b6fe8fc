"""Command-line entry point: ``semsplat <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 3 data or configuration error,
4 numerical failure (including a failed gradient check).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("semsplat")


class DataError(Exception):
    pass


def _save_png(path, image):
    from PIL import Image
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(image)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    else:
        arr = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _load_png(path):
    from PIL import Image
    if not Path(path).is_file():
        raise DataError(f"no image at {path}")
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def _scene(path):
    from .synth import load_scene
    if not Path(path).is_dir():
        raise DataError(f"scene directory {path} does not exist")
    try:
        return load_scene(path)
    except (FileNotFoundError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read scene {path}: {exc}") from exc


def _model(args):
    from . import checkpoint
    from .semantics import SceneModel
    try:
        ckpt = checkpoint.load(args.checkpoint)
    except (FileNotFoundError, checkpoint.CheckpointError) as exc:
        raise DataError(str(exc)) from exc
    if ckpt.codec is None:
        raise DataError("checkpoint carries no feature codec")
    model = SceneModel(ckpt.cloud, ckpt.field, ckpt.codec)
    if args.f64:
        model.settings.f64 = True
    return ckpt, model


def _frame(ds, view: int, time: float):
    frames = [f for f in ds.frames if f.view == view]
    if not frames:
        raise DataError(f"scene has no view {view}")
    return min(frames, key=lambda f: (abs(f.time - time), f.index))


def _ctx(ds, prompt, threshold):
    from .semantics import QueryContext
    if prompt not in ds.class_names:
        raise DataError(f"unknown prompt {prompt!r}; classes: {', '.join(ds.class_names)}")
    return QueryContext.from_dataset(ds, prompt, threshold)


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


# --- subcommands ------------------------------------------------------------------

def cmd_generate_scene(args):
    from .synth import SceneSpec, SpecValidation, bundled_spec, generate_scene
    try:
        if args.spec:
            spec = SceneSpec.from_dict(json.loads(Path(args.spec).read_text()))
        else:
            overrides = {}
            if args.background:
                overrides["background"] = args.background
            if args.noise_amplitude is not None:
                overrides["noise_amplitude"] = args.noise_amplitude
            spec = bundled_spec(args.preset, **overrides)
        ds = generate_scene(spec, seed=args.seed, out_dir=args.out)
    except (SpecValidation, KeyError, TypeError, FileNotFoundError, json.JSONDecodeError) as exc:
        raise DataError(f"invalid scene spec: {exc}") from exc
    print(f"wrote {len(ds.frames)} frames ({len(ds.train)} train, {len(ds.test)} held out) to {args.out}")
    return EXIT_OK


def cmd_train_codec(args):
    from . import checkpoint
    from .codec import CodecConfig, train_codec
    from .core import GaussianCloud
    ds = _scene(args.scene)
    cfg = CodecConfig(latent_dim=args.latent_dim, iterations=args.iters, metric=args.metric, seed=args.seed)
    log.info("codec config %s", json.dumps(cfg.__dict__, default=list))
    codec, loss = train_codec(ds.codebook, cfg)
    checkpoint.save(checkpoint.Checkpoint(GaussianCloud.empty(cfg.latent_dim), None, codec,
                                          {"codec_loss": loss}), args.out)
    print(f"codec reconstruction {cfg.metric} = {loss:.6f}; saved to {args.out}")
    return EXIT_OK


def cmd_train(args):
    from . import checkpoint
    from .trainer import ConfigError, TrainConfig, train
    ds = _scene(args.scene)
    raw = {}
    if args.config:
        if not Path(args.config).is_file():
            raise DataError(f"no config file at {args.config}")
        try:
            raw = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{args.config}: {exc}") from exc
        if not isinstance(raw, dict):
            raise DataError("config must be a flat key-value object")
    for item in args.set or []:
        if "=" not in item:
            raise DataError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        raw[k] = _parse_value(v)
    for key, val in (("coarse_iters", args.coarse_iters), ("fine_iters", args.fine_iters)):
        if val is not None:
            raw[key] = val
    if args.no_hgf:
        raw["hgf"] = False
    if args.no_hgg:
        raw["hgg"] = False
    raw["seed"] = args.seed
    if args.f64:
        raw["f64"] = True
    try:
        cfg = TrainConfig.from_dict(raw)
    except (ConfigError, TypeError) as exc:
        raise DataError(f"invalid config: {exc}") from exc
    log.info("train config %s", json.dumps(cfg.to_dict(), sort_keys=True))
    codec = None
    if args.codec:
        try:
            codec = checkpoint.load(args.codec).codec
        except (FileNotFoundError, checkpoint.CheckpointError) as exc:
            raise DataError(str(exc)) from exc
    try:
        result = train(ds, cfg, codec=codec, out_dir=args.out)
    except ConfigError as exc:
        raise DataError(str(exc)) from exc
    final = [r for r in result.log if "psnr" in r]
    msg = f" held-out PSNR {final[-1]['psnr']:.2f} dB" if final else ""
    print(f"trained {cfg.total_iters} iterations, {len(result.cloud)} Gaussians;{msg}; "
          f"checkpoint at {Path(args.out) / 'checkpoint.bin'}")
    return EXIT_OK


def cmd_render(args):
    ds = _scene(args.scene)
    _, model = _model(args)
    frame = _frame(ds, args.view, args.time)
    out = model.render(frame.camera, args.time)
    _save_png(args.out, out.color)
    from .metrics import psnr
    print(f"rendered view {args.view} at t={args.time:.3f} to {args.out}; "
          f"PSNR vs nearest GT frame {psnr(np.clip(out.color, 0, 1), frame.image):.2f} dB")
    return EXIT_OK


def cmd_query(args):
    from .semantics import relevance_map
    ds = _scene(args.scene)
    _, model = _model(args)
    frame = _frame(ds, args.view, args.time)
    rel, _ = relevance_map(model, frame.camera, args.time, _ctx(ds, args.prompt, args.threshold))
    _save_png(args.out, rel)
    print(f"relevance range [{rel.min():.3f}, {rel.max():.3f}] written to {args.out}")
    return EXIT_OK


def cmd_segment(args):
    from .metrics import iou
    from .semantics import relevance_map, segment
    ds = _scene(args.scene)
    _, model = _model(args)
    frame = _frame(ds, args.view, args.time)
    ctx = _ctx(ds, args.prompt, args.threshold)
    rel, _ = relevance_map(model, frame.camera, args.time, ctx)
    mask = segment(rel, args.threshold)
    if args.out:
        _save_png(args.out, mask)
    report = {"pixels": int(mask.sum())}
    if abs(frame.time - args.time) < 1e-9:
        cid = ds.class_id(args.prompt)
        gt = np.any([frame.classes[lvl] == cid for lvl in ("s", "m", "l")], axis=0)
        report["iou"] = iou(mask, gt)
    print(json.dumps(report))
    return EXIT_OK


def cmd_edit(args):
    from . import checkpoint
    from .semantics import Recolor, edit, select_gaussians
    ds = _scene(args.scene)
    ckpt, model = _model(args)
    if args.prompt not in ds.class_names:
        raise DataError(f"unknown prompt {args.prompt!r}")
    latent = model.codec.encode(ds.embedding(args.prompt))
    selection = select_gaussians(model.cloud, latent, args.threshold)
    spec = None
    if args.action == "recolor":
        if not args.target:
            raise DataError("recolor needs --target <image>")
        frame = _frame(ds, args.view, args.time)
        spec = Recolor(_load_png(args.target), frame.camera, args.time, args.iters)
        if spec.target.shape != frame.image.shape:
            raise DataError(f"target image shape {spec.target.shape} != {frame.image.shape}")
        if len(selection) == 0:
            raise DataError("selection is empty; lower --threshold")
    edited = edit(model, selection, args.action, spec)
    checkpoint.save(checkpoint.Checkpoint(edited.cloud, edited.field, edited.codec,
                                          {**ckpt.meta, "edit": args.action, "selected": int(len(selection))}),
                    args.out)
    print(f"{args.action}: {len(selection)} Gaussians selected; {len(edited.cloud)} remain; saved to {args.out}")
    return EXIT_OK


def cmd_topk(args):
    from .semantics import fraction_in_mask, topk_deformation
    ds = _scene(args.scene)
    _, model = _model(args)
    frame = _frame(ds, args.view, args.time)
    k = args.k if args.k is not None else max(1, int(round(args.fraction * len(model.cloud))))
    if k > len(model.cloud):
        raise DataError(f"k={k} exceeds cloud size {len(model.cloud)}")
    idx, norms, image = topk_deformation(model, args.time, k, frame.camera, args.position_only)
    if args.out:
        _save_png(args.out, image.color)
    state = model.deformed(args.time)
    pts = model.cloud.position[idx] if state is None else state.position[idx]
    print(json.dumps({"k": int(k), "max_norm": float(norms.max(initial=0.0)),
                      "inside_mask": fraction_in_mask(pts, frame.camera, frame.mask)}))
    return EXIT_OK


def cmd_eval(args):
    from .losses import texture_density
    from .metrics import MetricUndefined, masked_metrics, miou, psnr, ssim
    from .semantics import relevance_map, segment
    ds = _scene(args.scene)
    report = {"scene": str(args.scene)}
    if args.texture_density:
        report["texture_density"] = texture_density([f.image for f in ds.frames])
    if args.checkpoint:
        _, model = _model(args)
        frames = ds.test_frames or ds.frames
        ps, ss, mps, mss = [], [], [], []
        for f in frames:
            img = np.clip(model.render(f.camera, f.time).color, 0, 1)
            ps.append(psnr(img, f.image))
            ss.append(ssim(img, f.image))
            try:
                m = masked_metrics(img, f.image, f.mask)
                mps.append(m["psnr"])
                mss.append(m["ssim"])
            except MetricUndefined:
                pass
        report.update(psnr=float(np.mean(ps)), ssim=float(np.mean(ss)), psnr_min=float(np.min(ps)))
        if mps:
            report.update(masked_psnr=float(np.mean(mps)), masked_ssim=float(np.mean(mss)))
        if args.prompt:
            ctx = _ctx(ds, args.prompt, args.threshold)
            cid = ds.class_id(args.prompt)
            preds, gts = [], []
            for f in frames:
                rel, _ = relevance_map(model, f.camera, f.time, ctx)
                preds.append(segment(rel, args.threshold))
                gts.append(f.classes["l"] == cid)
            report["miou"] = miou(preds, gts)
    text = json.dumps(report, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def cmd_check_gradients(args):
    from .gradcheck import check_gradients
    ok = True
    for seed in range(args.seed, args.seed + args.scenes):
        rep = check_gradients(seed)
        print(f"scene seed {seed}: {'pass' if rep.passed else 'FAIL'}")
        print(rep.table())
        ok &= rep.passed
    return EXIT_OK if ok else EXIT_NUMERIC


# --- parser --------------------------------------------------------------------------

def _version_text():
    import numba
    import scipy
    return f"semsplat {__version__} (numpy {np.__version__}, scipy {scipy.__version__}, numba {numba.__version__})"


def build_parser() -> argparse.ArgumentParser:
    def globals_parser(suppress: bool):
        # subcommands repeat the global flags; SUPPRESS keeps them from
        # overwriting values given before the subcommand name
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        gp = argparse.ArgumentParser(add_help=False)
        gp.add_argument("--seed", type=int, default=d(0), help="random seed (default 0)")
        gp.add_argument("--threads", type=int, default=d(None), help="cap on rasterizer threads")
        gp.add_argument("--f64", action="store_true", default=d(False), help="64-bit parameters and accumulation")
        gp.add_argument("-v", "--verbose", action="store_true", default=d(False), help="log progress to stderr")
        return gp

    common = globals_parser(False)
    sub_common = globals_parser(True)

    p = argparse.ArgumentParser(prog="semsplat", description="Semantic dynamic Gaussian splatting toolkit.",
                                parents=[common])
    p.add_argument("--version", action="version", version=_version_text())
    sub = p.add_subparsers(dest="command", metavar="subcommand")

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text, parents=[sub_common])
        sp.set_defaults(func=func)
        return sp

    def scene_view(sp, need_ckpt=True):
        sp.add_argument("--scene", required=True, help="scene directory")
        if need_ckpt:
            sp.add_argument("--checkpoint", required=True, help="trained checkpoint file")
        sp.add_argument("--view", type=int, default=0, help="camera index in the rig")
        sp.add_argument("--time", type=float, default=0.0, help="timestamp in [0, 1]")

    from .synth import BUNDLED
    sp = add("generate-scene", cmd_generate_scene, "render a synthetic scene to disk")
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--preset", choices=BUNDLED)
    g.add_argument("--spec", help="JSON scene spec")
    sp.add_argument("--background", choices=("flat", "textured", "noise"))
    sp.add_argument("--noise-amplitude", type=float)
    sp.add_argument("--out", required=True)

    sp = add("train-codec", cmd_train_codec, "fit the feature autoencoder on a scene codebook")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--latent-dim", type=int, default=8)
    sp.add_argument("--iters", type=int, default=3000)
    sp.add_argument("--metric", choices=("l1", "l2"), default="l1")

    sp = add("train", cmd_train, "two-stage training")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--config", help="flat JSON object of TrainConfig fields")
    sp.add_argument("--out", required=True)
    sp.add_argument("--codec", help="checkpoint holding a trained codec")
    sp.add_argument("--coarse-iters", type=int)
    sp.add_argument("--fine-iters", type=int)
    sp.add_argument("--no-hgf", action="store_true", help="disable generation-weighted anchors")
    sp.add_argument("--no-hgg", action="store_true", help="disable the mask-weighted photometric loss")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")

    sp = add("render", cmd_render, "render a checkpoint from a scene camera")
    scene_view(sp)
    sp.add_argument("--out", required=True)

    sp = add("query", cmd_query, "relevance map for a prompt")
    scene_view(sp)
    sp.add_argument("--prompt", required=True)
    sp.add_argument("--threshold", type=float, default=0.6)
    sp.add_argument("--out", required=True)

    sp = add("segment", cmd_segment, "threshold a relevance map into a mask")
    scene_view(sp)
    sp.add_argument("--prompt", required=True)
    sp.add_argument("--threshold", type=float, default=0.6)
    sp.add_argument("--out")

    sp = add("edit", cmd_edit, "remove or recolor semantically selected Gaussians")
    scene_view(sp)
    sp.add_argument("--prompt", required=True)
    sp.add_argument("--threshold", type=float, default=0.9, help="cosine similarity cut-off")
    sp.add_argument("--action", choices=("remove", "recolor"), required=True)
    sp.add_argument("--target", help="target image for recolor")
    sp.add_argument("--iters", type=int, default=200)
    sp.add_argument("--out", required=True)

    sp = add("topk-deform", cmd_topk, "render the most deformed Gaussians")
    scene_view(sp)
    kg = sp.add_mutually_exclusive_group()
    kg.add_argument("--k", type=int)
    kg.add_argument("--fraction", type=float, default=0.1)
    sp.add_argument("--position-only", action="store_true")
    sp.add_argument("--out")

    sp = add("eval", cmd_eval, "metrics report for a scene and optional checkpoint")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--texture-density", action="store_true")
    sp.add_argument("--prompt", help="class for relevance segmentation mIoU")
    sp.add_argument("--threshold", type=float, default=0.6)
    sp.add_argument("--out")

    sp = add("check-gradients", cmd_check_gradients, "finite-difference gradient suite")
    sp.add_argument("--scenes", type=int, default=10, help="number of random scenes, seeds from --seed")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    print(f"resolved arguments: {json.dumps(resolved, sort_keys=True)}", file=sys.stderr)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return EXIT_USAGE
        import numba
        numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
    from .trainer import NumericalFailure
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
