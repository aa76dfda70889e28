"""Command-line entry point: ``planefield <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .alternating import TrainPlan, derive_seed, restore_state, run
from .config import load_config
from .data import generate_procedural, load_synthetic, make_corpus, save_png, write_synthetic
from .errors import ConfigError, FormatError, InputDomainError, NumericDomainError, PlaneFieldError
from .geometry import Camera
from .metrics import evaluate, export_plane_inspection
from .planes import PlaneSet
from .prior import PriorNet, denoising_loss, load_prior_sections, pretrain_prior, prior_sections
from .rendering import render_image, to_numpy_image

log = logging.getLogger("planefield")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# gen-scene


def cmd_gen_scene(args):
    ds, scene = generate_procedural(args.seed, args.images, args.res, jitter=args.jitter,
                                    n_test=args.test_images, n_primitives=args.primitives)
    out = Path(args.out)
    write_synthetic(ds, out)
    (out / "scene.json").write_text(json.dumps({
        "seed": args.seed, "images": args.images, "test_images": args.test_images, "res": args.res,
        "jitter": args.jitter, "primitives": [vars(p) for p in scene.primitives],
        "density_scale": scene.density_scale, "edge": scene.edge,
    }, indent=2))
    print(f"wrote {len(ds)} images to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# pretrain-prior


def pretrain_from_config(cfg, seed):
    pc, rc = cfg.section("prior"), cfg.section("refining")
    corpus = make_corpus(pc["corpus_size"], rc["latent_res"], rc["latent_channels"],
                         derive_seed(seed, "corpus"))
    held_out = make_corpus(32, rc["latent_res"], rc["latent_channels"], derive_seed(seed, "corpus-eval"))
    trace = []
    prior = pretrain_prior(corpus, pc["pretrain_steps"], derive_seed(seed, "prior-pretrain"),
                           base=pc["base"], rank=pc["rank"], lora_scale=pc["lora_scale"],
                           lr=pc["pretrain_lr"], batch_size=pc["batch_size"],
                           log=lambda s, v: trace.append((s, v)))
    with torch.no_grad():
        held = float(denoising_loss(prior, held_out, torch.Generator().manual_seed(derive_seed(seed, "eval-noise"))))
    return prior, trace, held


def cmd_pretrain_prior(args):
    cfg = load_config(args.config, args.set)
    seed = cfg.get("prior", "seed") if args.seed is None else args.seed
    prior, trace, held = pretrain_from_config(cfg, seed)
    meta = {"arch": prior.arch, "seed": seed, "steps": cfg.get("prior", "pretrain_steps"),
            "base_digest": prior.base_digest(), "heldout_denoising_loss": held}
    out = Path(args.out)
    ckpt.save_checkpoint(out, prior_sections(prior), meta)
    _write_csv(out.with_suffix(".csv"), ["step", "loss"], trace)
    print(f"prior checkpoint {out} sha256={ckpt.file_digest(out)} heldout_loss={held:.5f}")
    return EXIT_OK


def load_prior(path):
    sections, meta = ckpt.load_checkpoint(path)
    arch = meta["arch"]
    prior = PriorNet(arch["channels"], arch["base"], arch["rank"], arch["lora_scale"]).freeze()
    load_prior_sections(prior, sections)
    return prior


# ---------------------------------------------------------------------------
# train


def _load_scene(path):
    if not Path(path).is_dir():
        raise FormatError(f"{path}: dataset directory does not exist")
    return load_synthetic(path)


def _train(cfg, scene_path, out, prior_path=None, resume=False):
    plan = cfg.plan()
    dataset = _load_scene(scene_path)
    prior = None
    prior_info = None
    if plan.mode in ("refinedfields", "no-finetuning"):
        prior_path = prior_path or cfg.get("prior", "checkpoint") or None
        if prior_path:
            prior = load_prior(prior_path)
            prior_info = {"path": str(Path(prior_path).resolve()), "sha256": ckpt.file_digest(prior_path)}
        else:
            prior, _, held = pretrain_from_config(cfg, cfg.get("prior", "seed"))
            prior_info = {"pretrained_in_run": True, "base_digest": prior.base_digest(), "heldout_loss": held}
    extra = {"config_ini": cfg.to_ini(), "scene": str(Path(scene_path).resolve()), "prior": prior_info}
    result = run(plan, dataset, prior, out, resume=resume, extra_meta=extra)
    hist = result.history
    keys = sorted({k for h in hist for k in h})
    _write_csv(Path(out) / "metrics.csv", keys, [[h.get(k, "") for k in keys] for h in hist])
    _report_figures(out, hist)
    return result


def _report_figures(out, history):
    from .plotting import plot_fit_traces, plot_history

    out = Path(out)
    traces = {}
    for path in sorted(out.glob("fit_trace_*.csv")):
        with open(path) as fh:
            rows = [[float(v) for v in r] for r in list(csv.reader(fh))[1:]]
        traces[path.stem.replace("fit_trace_", "epoch ")] = rows
    plot_fit_traces(traces, out / "fit_traces.png")
    plot_history(history, out / "history.png")


def cmd_train(args):
    overrides = list(args.set)
    if args.manifest:
        manifest = json.loads(Path(args.manifest).read_text())
        tmp = Path(args.out) / "source_config.ini"
        tmp.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_text(manifest["config_ini"])
        config_path = tmp
        scene = args.scene or manifest["scene"]
        prior_path = args.prior or ((manifest.get("prior") or {}).get("path"))
    else:
        config_path = args.config
        scene = args.scene
        prior_path = args.prior
    if args.mode:
        overrides.append(f"run.mode={args.mode}")
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if scene is None:
        raise ConfigError("--scene", "a dataset directory is required")
    cfg = load_config(config_path, overrides)
    result = _train(cfg, scene, args.out, prior_path, args.resume)
    last = result.history[-1]
    refines = sum(1 for h in result.history if h.get("refine_steps"))
    print(f"mode={cfg.get('run', 'mode')} epochs={len(result.history)} refining_phases={refines} "
          f"test_psnr={last.get('test_psnr', float('nan')):.3f} checkpoint={result.final_checkpoint}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# render / eval / inspect


def load_run_checkpoint(path):
    sections, meta = ckpt.load_checkpoint(path)
    plan = TrainPlan.from_dict(meta["plan"])
    return restore_state(plan, sections, meta), plan, meta


def _pose_camera(args, dataset):
    pose = np.asarray(json.loads(Path(args.pose).read_text()), dtype=np.float64)
    ref = dataset.cameras[0] if dataset is not None and len(dataset) else None
    width = args.width or (ref.width if ref else 64)
    height = args.height or (ref.height if ref else width)
    angle = dataset.camera_angle_x if dataset is not None else np.radians(40.0)
    return Camera.from_fov(width, height, angle, pose)


def cmd_render(args):
    state, plan, meta = load_run_checkpoint(args.checkpoint)
    dataset = _load_scene(args.scene) if args.scene else None
    near = args.near or (dataset.near if dataset else None)
    far = args.far or (dataset.far if dataset else None)
    if near is None or far is None:
        raise ConfigError("--near/--far", "needed when no dataset is given")
    samples = args.samples or plan.eval_samples
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bg = dataset.background if dataset else (1.0, 1.0, 1.0)
    jobs = []
    if args.pose:
        jobs.append(("pose", _pose_camera(args, dataset), None))
    else:
        if dataset is None:
            raise ConfigError("--scene", "needed unless --pose is given")
        for k, i in enumerate(dataset.indices(args.split)):
            jobs.append((f"{args.split}_{k:03d}", dataset.cameras[i], dataset.images[i]))
    rows = []
    for name, cam, ref in jobs:
        img = to_numpy_image(render_image(state.planes, state.decoder, cam, near, far, samples,
                                          appearance=args.appearance, background=bg))
        save_png(out / f"{name}.png", img)
        if ref is not None:
            err = float(np.mean((img - ref) ** 2))
            rows.append((name, err, -10 * np.log10(err) if err > 0 else float("inf")))
    if rows:
        _write_csv(out / "render_metrics.csv", ["image", "mse", "psnr"], rows)
    print(f"rendered {len(jobs)} image(s) to {out}")
    return EXIT_OK


def cmd_eval(args):
    from .plotting import plot_metrics, plot_renders

    state, plan, meta = load_run_checkpoint(args.checkpoint)
    dataset = _load_scene(args.scene)
    # evaluation settings come from the config recorded with the run, if any
    cfg = load_config(text=meta.get("config_ini"))
    ev = cfg.section("eval")
    report, images = evaluate(state.planes, state.decoder, dataset, args.split, args.samples or plan.eval_samples,
                              seed=derive_seed(plan.seed, "eval-cli"), scene=Path(args.scene).name,
                              mode=plan.mode, appearance_epochs=ev["appearance_epochs"],
                              appearance_batch=ev["appearance_batch"], appearance_lr=ev["appearance_lr"],
                              return_images=True)
    print(report.table())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(report.to_csv())
        plot_metrics(report, out / "metrics.png")
        refs = [dataset.images[i] for i in dataset.indices(args.split)]
        plot_renders(images[:8], refs[:8], out / "renders.png", report.names[:8])
    return EXIT_OK


def cmd_inspect_planes(args):
    sections, _ = ckpt.load_checkpoint(args.checkpoint)
    if "planes" not in sections:
        raise FormatError(f"{args.checkpoint}: no planes section")
    planes = PlaneSet(sections["planes"], sections["aabb"])
    channels = "random" if args.channels == "random" else [int(c) for c in args.channels.split(",")]
    paths = export_plane_inspection(planes, channels, args.out, seed=args.seed, count=args.count)
    print(f"wrote {len(paths)} plane images to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="planefield", description="Plane-factored radiance fields with prior refining.")
    p.add_argument("--workers", type=int, default=None, help="cap on intra-op threads (default: all cores)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", help="render a procedural scene to a synthetic-format dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--images", type=int, default=16)
    g.add_argument("--test-images", type=int, default=4)
    g.add_argument("--res", type=int, default=64)
    g.add_argument("--jitter", type=float, default=0.0)
    g.add_argument("--primitives", type=int, default=4)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_scene)

    pp = sub.add_parser("pretrain-prior", help="pretrain and freeze the prior network")
    pp.add_argument("--config")
    pp.add_argument("--seed", type=int)
    pp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    pp.add_argument("--out", required=True)
    pp.set_defaults(func=cmd_pretrain_prior)

    t = sub.add_parser("train", help="run alternating fitting and refining")
    t.add_argument("--config")
    t.add_argument("--manifest", help="re-run the experiment recorded in a run.json")
    t.add_argument("--mode", choices=["refinedfields", "kplanes-ss", "no-prior", "no-finetuning"])
    t.add_argument("--scene")
    t.add_argument("--prior", help="pretrained prior checkpoint")
    t.add_argument("--seed", type=int)
    t.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    t.add_argument("--resume", action="store_true", help="continue from the last epoch checkpoint in --out")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render views from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--scene")
    r.add_argument("--split", default="test")
    r.add_argument("--pose", help="JSON file with a 4x4 camera-to-world matrix")
    r.add_argument("--width", type=int)
    r.add_argument("--height", type=int)
    r.add_argument("--near", type=float)
    r.add_argument("--far", type=float)
    r.add_argument("--samples", type=int)
    r.add_argument("--appearance", type=int, help="appearance table row (default: mean code)")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--scene", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--samples", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect-planes", help="export feature-plane channels as grayscale images")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--channels", default="random", help="comma-separated indices or 'random'")
    i.add_argument("--count", type=int, default=2)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_inspect_planes)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(args.workers or os.cpu_count() or 1)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericDomainError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InputDomainError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PlaneFieldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
