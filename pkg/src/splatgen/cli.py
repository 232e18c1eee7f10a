"""Command-line interface.

Verbs: make-dataset, train-traj, train-gmldm, generate, refine, render,
export, gradcheck. Every command is deterministic under --seed (one global
seed expanded into named per-stage streams). Errors exit with a stable
category code (see :mod:`splatgen.errors`).
"""

import argparse
import csv
import os
import sys

import numpy as np
import torch

from . import __version__
from .checkpoint import load_checkpoint
from .cameras import load_trajectory, save_trajectory
from .errors import ConfigError, MissingArtifactError, SplatgenError
from .gmldm import (
    GMLDM,
    GMLDMConfig,
    generate_scene,
    load_dataset,
    save_png,
    train_gmldm,
)
from .gmldm.autoencoder import ConvAutoencoder, latent_statistics, train_autoencoder
from .nncore import Adam
from .refiner import GMLDMPrior, Ldm2D, RefinerConfig, refine
from .seeding import substream_seed, torch_generator
from .splat import load_ply, render, save_ply
from .synth import DEFAULT_FAMILIES, DatasetSpec, make_dataset
from .trajdit import TrajDiT, TrajDiTConfig, sample_trajectory, train_traj_dit


def _write_loss_csv(path, rows, fields):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _class_id(model, name):
    if name not in model.class_names:
        raise ConfigError(
            f"unknown class {name!r}; checkpoint knows {model.class_names}"
        )
    return model.class_names.index(name) + 1


def _load_scene_pairs(dataset_dir):
    scenes, class_names = load_dataset(dataset_dir)
    return scenes, class_names


# ---------------------------------------------------------------- commands


def cmd_make_dataset(args):
    families = DEFAULT_FAMILIES
    spec = DatasetSpec(
        scenes_per_class=args.scenes_per_class,
        views=args.views,
        image_size=args.image_size,
        families=families,
        distinct_scene_classes=args.distinct_classes,
    )
    make_dataset(args.out, spec, args.seed)
    total = spec.scenes_per_class * len(families)
    print(f"wrote {total} scenes to {args.out}")


def cmd_train_traj(args):
    scenes, class_names = _load_scene_pairs(args.dataset)
    pairs = [(s.trajectory, s.class_id) for s in scenes]
    m = len(pairs[0][0])
    torch.manual_seed(substream_seed(args.seed, "init-traj"))
    if args.resume:
        model, extras = TrajDiT.load(args.resume)
        opt = Adam(model, lr=model.config.lr)
        opt.load_state_arrays(extras)
        set_stats = False
    else:
        config = TrajDiTConfig(
            num_blocks=args.blocks, hidden_size=args.hidden, num_heads=args.heads,
            max_frames=m, timesteps=args.timesteps,
        )
        model = TrajDiT(config, len(class_names), class_names)
        opt = None
        set_stats = True
    gen = torch_generator(args.seed, "train-traj")
    opt, history = train_traj_dit(
        model, pairs, args.steps, batch_size=args.batch_size, generator=gen,
        opt=opt, set_statistics=set_stats, verbose=True,
    )
    model.save(args.out, extra_arrays=opt.state_arrays())
    _write_loss_csv(args.out + ".loss.csv", history, ["step", "loss"])
    print(f"saved checkpoint to {args.out} (step {opt.step_count})")


def cmd_train_gmldm(args):
    scenes, class_names = _load_scene_pairs(args.dataset)
    m = len(scenes[0].trajectory)
    image_size = scenes[0].frames.shape[1]
    torch.manual_seed(substream_seed(args.seed, "init-gmldm"))
    if args.resume:
        model, extras = GMLDM.load(args.resume)
        opt = Adam(
            {n: p for n, p in model.named_parameters() if not n.startswith("autoencoder.")},
            lr=model.config.lr,
        )
        opt.load_state_arrays(extras)
    else:
        config = GMLDMConfig(
            dense_views=m, sparse_views=args.sparse_views, image_size=image_size,
            latent_size=args.latent_size or image_size // 4,
            autoencoder=args.autoencoder, base_channels=args.base_channels,
            supervision_views=args.supervision_views, timesteps=args.timesteps,
            lr=args.lr,
        )
        model = GMLDM(config, len(class_names), class_names)
        opt = None
        if args.autoencoder == "conv":
            images = torch.as_tensor(
                np.concatenate([s.frames for s in scenes]), dtype=torch.float32
            ).permute(0, 3, 1, 2)
            train_autoencoder(
                model.autoencoder, images, args.ae_steps,
                generator=torch_generator(args.seed, "train-ae"),
            )
            model.set_latent_statistics(*latent_statistics(model.autoencoder, images))
    gen = torch_generator(args.seed, "train-gmldm")
    opt, history = train_gmldm(
        model, scenes, args.steps, batch_size=args.batch_size, generator=gen,
        opt=opt, verbose=True,
    )
    model.save(args.out, extra_arrays=opt.state_arrays())
    _write_loss_csv(
        args.out + ".loss.csv", history, ["step", "loss", "loss_2d", "loss_3d"]
    )
    print(f"saved checkpoint to {args.out} (step {opt.step_count})")


def _load_refiner_prior(path):
    _, meta = load_checkpoint(path)
    kind = (meta or {}).get("model")
    if kind == "ldm2d":
        return Ldm2D.load(path), False
    if kind == "gmldm":
        model, _ = GMLDM.load(path)
        return GMLDMPrior(model), True
    raise ConfigError(f"{path}: cannot use a {kind!r} checkpoint as refiner prior")


def cmd_generate(args):
    traj_model, _ = TrajDiT.load(args.traj_ckpt)
    gm_model, _ = GMLDM.load(args.gmldm_ckpt)
    os.makedirs(args.out, exist_ok=True)
    trajectory = sample_trajectory(
        traj_model, _class_id(traj_model, args.prompt_class),
        num_steps=args.traj_steps, omega=args.traj_omega,
        generator=torch_generator(args.seed, "sample-traj"),
    )
    save_trajectory(os.path.join(args.out, "trajectory.txt"), trajectory)
    cloud = generate_scene(
        gm_model, trajectory, _class_id(gm_model, args.prompt_class),
        num_steps=args.steps, generator=torch_generator(args.seed, "generate-scene"),
    )
    if not args.no_refine:
        if args.refiner_ckpt:
            prior, cam_cond = _load_refiner_prior(args.refiner_ckpt)
        else:
            prior, cam_cond = GMLDMPrior(gm_model), True
        config = RefinerConfig(iterations=args.refine_iterations)
        rows = []
        cloud = refine(
            cloud, trajectory, prior, _class_id(gm_model, args.prompt_class),
            config, generator=torch_generator(args.seed, "refine"),
            log_fn=rows.append, use_camera_conditioning=cam_cond,
        )
        _write_loss_csv(
            os.path.join(args.out, "refine_log.csv"), rows,
            ["iter", "t", "loss_z", "loss_x"],
        )
    save_ply(os.path.join(args.out, "cloud.ply"), cloud)
    size = gm_model.config.image_size
    for i, cam in enumerate(trajectory.cameras):
        out = render(cloud, cam, (size, size))
        save_png(os.path.join(args.out, f"frame_{i:03d}.png"), np.clip(out.rgb, 0, 1))
    print(f"wrote trajectory, cloud and {len(trajectory)} frames to {args.out}")


def cmd_refine(args):
    cloud = load_ply(args.cloud)
    trajectory = load_trajectory(args.trajectory)
    prior, cam_cond = _load_refiner_prior(args.model)
    model = prior.gmldm if isinstance(prior, GMLDMPrior) else prior
    config = RefinerConfig(
        lambda_z=args.lambda_z, lambda_x=args.lambda_x, omega_cfg=args.omega,
        iterations=args.iterations, render_size=args.render_size,
    )
    rows = []

    def log(row):
        rows.append(row)
        print(
            f"iter={row['iter']} t={row['t']} loss_z={row['loss_z']:.6g} "
            f"loss_x={row['loss_x']:.6g}"
        )

    refined = refine(
        cloud, trajectory, prior, _class_id(model, args.prompt_class), config,
        generator=torch_generator(args.seed, "refine"), log_fn=log,
        use_camera_conditioning=cam_cond,
    )
    save_ply(args.out, refined)
    if args.log:
        _write_loss_csv(args.log, rows, ["iter", "t", "loss_z", "loss_x"])
    print(f"saved refined cloud to {args.out}")


def cmd_render(args):
    cloud = load_ply(args.cloud)
    trajectory = load_trajectory(args.trajectory)
    os.makedirs(args.out, exist_ok=True)
    for i, cam in enumerate(trajectory.cameras):
        out = render(cloud, cam, (args.resolution, args.resolution))
        save_png(os.path.join(args.out, f"frame_{i:03d}.png"), np.clip(out.rgb, 0, 1))
    print(f"rendered {len(trajectory)} frames to {args.out}")


def cmd_export(args):
    if bool(args.cloud) == bool(args.trajectory):
        raise ConfigError("export needs exactly one of --cloud or --trajectory")
    if args.cloud:
        cloud = load_ply(args.cloud)
        cloud.validate()
        save_ply(args.out, cloud)
        print(f"re-exported {len(cloud)} Gaussians to {args.out}")
    else:
        traj = load_trajectory(args.trajectory)
        for cam in traj.cameras:
            cam.validate()
        save_trajectory(args.out, traj)
        print(f"re-exported {len(traj)} cameras to {args.out}")


def cmd_gradcheck(args):
    from .gradchecks import run_all

    results = run_all(quick=args.quick)
    failed = 0
    for name, err, tol, ok in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: rel err {err:.3e} (tol {tol:g})")
        failed += 0 if ok else 1
    if failed:
        print(f"{failed} gradient check(s) failed", file=sys.stderr)
        return 5
    print(f"all {len(results)} gradient checks passed")
    return 0


# ----------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="splatgen", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("make-dataset", help="generate a synthetic scene dataset")
    d.add_argument("--out", required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--scenes-per-class", type=int, default=8)
    d.add_argument("--views", type=int, default=12)
    d.add_argument("--image-size", type=int, default=32)
    d.add_argument("--distinct-classes", action="store_true",
                   help="give every scene its own prompt class (overfit runs)")
    d.set_defaults(func=cmd_make_dataset)

    t = sub.add_parser("train-traj", help="train the trajectory diffusion transformer")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=4000)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--blocks", type=int, default=4)
    t.add_argument("--hidden", type=int, default=128)
    t.add_argument("--heads", type=int, default=4)
    t.add_argument("--timesteps", type=int, default=1000)
    t.add_argument("--resume", default=None)
    t.set_defaults(func=cmd_train_traj)

    g = sub.add_parser("train-gmldm", help="train the multi-view latent diffusion model")
    g.add_argument("--dataset", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--steps", type=int, default=4000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--batch-size", type=int, default=2)
    g.add_argument("--sparse-views", type=int, default=4)
    g.add_argument("--latent-size", type=int, default=0)
    g.add_argument("--base-channels", type=int, default=64)
    g.add_argument("--supervision-views", type=int, default=2)
    g.add_argument("--autoencoder", choices=("identity", "conv"), default="identity")
    g.add_argument("--ae-steps", type=int, default=2000)
    g.add_argument("--timesteps", type=int, default=1000)
    g.add_argument("--lr", type=float, default=3e-4)
    g.add_argument("--resume", default=None)
    g.set_defaults(func=cmd_train_gmldm)

    c = sub.add_parser("generate", help="text-class to trajectory + 3D Gaussians")
    c.add_argument("--traj-ckpt", required=True)
    c.add_argument("--gmldm-ckpt", required=True)
    c.add_argument("--class", dest="prompt_class", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--steps", type=int, default=100)
    c.add_argument("--traj-steps", type=int, default=100)
    c.add_argument("--traj-omega", type=float, default=1.0)
    c.add_argument("--no-refine", action="store_true")
    c.add_argument("--refiner-ckpt", default=None,
                   help="2D prior checkpoint; defaults to the GM-LDM itself")
    c.add_argument("--refine-iterations", type=int, default=1000)
    c.set_defaults(func=cmd_generate)

    r = sub.add_parser("refine", help="SDS++ refinement of a Gaussian cloud")
    r.add_argument("--cloud", required=True)
    r.add_argument("--trajectory", required=True)
    r.add_argument("--model", required=True, help="ldm2d or gmldm checkpoint")
    r.add_argument("--class", dest="prompt_class", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--iterations", type=int, default=1000)
    r.add_argument("--lambda-z", type=float, default=1.0)
    r.add_argument("--lambda-x", type=float, default=0.01)
    r.add_argument("--omega", type=float, default=7.5)
    r.add_argument("--render-size", type=int, default=0)
    r.add_argument("--log", default=None, help="write per-iteration CSV here")
    r.set_defaults(func=cmd_refine)

    v = sub.add_parser("render", help="render a cloud along a trajectory")
    v.add_argument("--cloud", required=True)
    v.add_argument("--trajectory", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--resolution", type=int, default=64)
    v.set_defaults(func=cmd_render)

    e = sub.add_parser("export", help="validate and re-emit a cloud or trajectory")
    e.add_argument("--cloud", default=None)
    e.add_argument("--trajectory", default=None)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_export)

    q = sub.add_parser("gradcheck", help="run all finite-difference suites")
    q.add_argument("--quick", action="store_true")
    q.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except SplatgenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return MissingArtifactError.exit_code


if __name__ == "__main__":
    sys.exit(main())
