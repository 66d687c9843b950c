"""Command-line entry point: ``immunolab <command> [--config FILE] [--key value ...]``.

Exit codes: 0 ok, 2 config error, 3 missing artifact, 4 numerical failure.
Failures print one line ``error: <category>: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .config import COMMAND_KEYS, ConfigError, RunConfig, log_level_from_env, read_config_file, resolve

logger = logging.getLogger("immunolab")

EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 2, 3, 4


class MissingArtifact(FileNotFoundError):
    pass


def _need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"{what} not found: {p}")
    return p


def _input_images(path) -> list[Path]:
    p = _need_file(path, "input")
    if p.is_dir():
        files = sorted(p.glob("*.ppm"))
        if not files:
            raise MissingArtifact(f"no .ppm images in {p}")
        return files
    return [p]


def _load_bundle(cfg: RunConfig):
    from .diffusion import ToyLdmBundle

    cfg.require("model")
    return ToyLdmBundle.load(_need_file(cfg["model"], "model checkpoint"))


def _load_manifest(path):
    from .data import read_manifest

    return read_manifest(_need_file(path, "dataset manifest"))


def _target(cfg: RunConfig, size: int):
    from .data import load_image
    from .immunizer import default_target

    image, prompt = default_target(size)
    if cfg.get("target_image"):
        image = load_image(_need_file(cfg["target_image"], "target image"))
    if cfg.get("target_prompt"):
        prompt = cfg["target_prompt"]
    return image, prompt


def _uap_config(cfg: RunConfig, loss: str, seed: int):
    from .immunizer import UapTrainConfig

    try:
        return UapTrainConfig(
            epsilon=cfg["epsilon"],
            step_size=cfg["step_size"],
            timesteps=cfg["timesteps"],
            epochs=cfg["epochs"],
            loss_kind=loss,
            sup_weight=cfg.get("sup_weight", 1.0),
            noise_space=cfg["noise_space"],
            n_prior_samples=cfg["n_prior_samples"],
            seed=seed,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _train_one(cfg: RunConfig, bundle, loss: str, data_free: bool):
    from .immunizer import train_uap, train_uap_datafree

    uc = _uap_config(cfg, loss, cfg.seed)
    try:
        uc.validate(bundle.schedule.k_max)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    x_tar, t_tar = _target(cfg, bundle.config.image_size)
    if data_free:
        return train_uap_datafree(bundle, "jigsaw", x_tar, t_tar, uc)
    cfg.require("data")
    manifest = _load_manifest(cfg["data"])
    images, prompts = manifest.load_images(), manifest.prompts
    if cfg.get("n_train"):
        images, prompts = images[: cfg["n_train"]], prompts[: cfg["n_train"]]
    return train_uap(bundle, images, prompts, x_tar, t_tar, uc)


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: RunConfig) -> None:
    from .data import gen_shapes_dataset

    m = gen_shapes_dataset(cfg["n"], cfg["size"], cfg.seed, cfg.out)
    logger.info("wrote %d images to %s", len(m), cfg.out)


def cmd_train_model(cfg: RunConfig) -> None:
    from .diffusion import pretrain_toy

    cfg.require("data")
    manifest = _load_manifest(cfg["data"])
    bundle = pretrain_toy(
        manifest.load_images(),
        manifest.prompts,
        steps=cfg["train_steps"],
        lr=cfg["lr"],
        seed=cfg.seed,
        vae_steps=cfg["vae_steps"],
        vae_lr=cfg["vae_lr"],
    )
    bundle.save(cfg.out / "bundle.ckpt")
    log = bundle.train_log
    with open(cfg.out / "train_log.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "step", "loss"])
        for stage in ("vae_loss", "denoiser_loss"):
            for i, v in enumerate(log[stage]):
                w.writerow([stage.removesuffix("_loss"), i, repr(v)])
        for i, v in enumerate(log["heldout_loss"]):
            w.writerow(["heldout", i, repr(v)])


def _write_loss_curve(path: Path, losses) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss"])
        for i, v in enumerate(losses, 1):
            w.writerow([i, repr(float(v))])


def cmd_train_uap(cfg: RunConfig) -> None:
    bundle = _load_bundle(cfg)
    loss = cfg["loss"]
    if cfg["data_free"] and loss not in ("inj", "map-inj"):
        if loss != "inj+sup":
            raise ConfigError(f"data-free training supports only inj or map-inj, got {loss!r}")
        loss = "inj"  # the default cannot apply without source prompts
    uap = _train_one(cfg, bundle, loss, cfg["data_free"])
    uap.save(cfg.out / "uap.uit1")
    _write_loss_curve(cfg.out / "loss_curve.csv", uap.metadata["loss_log"])


def cmd_immunize(cfg: RunConfig) -> None:
    from .data import load_image, save_image
    from .immunizer import Uap, immunize

    cfg.require("uap", "input")
    uap = Uap.load(_need_file(cfg["uap"], "uap"))
    for path in _input_images(cfg["input"]):
        save_image(immunize(load_image(path), uap), cfg.out / path.name)


def cmd_edit(cfg: RunConfig) -> None:
    from .data import load_image, save_image
    from .diffusion import edit_img2img

    cfg.require("input", "prompt")
    bundle = _load_bundle(cfg)
    path = _need_file(cfg["input"], "input")
    out = edit_img2img(bundle, load_image(path), cfg["prompt"], cfg["strength"], cfg["guidance"], cfg["steps"], cfg.seed)
    save_image(out, cfg.out / f"{path.stem}_edit.ppm")


def _edit_params(cfg: RunConfig):
    from .metrics import EditParams

    return EditParams(cfg["strength"], cfg["guidance"], cfg["steps"], cfg.get("prompt_column", 0))


def cmd_evaluate(cfg: RunConfig) -> None:
    from .immunizer import Uap
    from .metrics import ImmunizationEvaluator, run_experiment, uniform_noise_control

    cfg.require("uap", "data")
    bundle = _load_bundle(cfg)
    uap = Uap.load(_need_file(cfg["uap"], "uap"))
    manifest = _load_manifest(cfg["data"])
    params = _edit_params(cfg)
    report = run_experiment(bundle, uap, manifest, params, cfg["seeds"], cfg.out / "metrics.csv", cfg.out / "metrics.svg", "uap")
    if cfg["control"]:
        prompts = [r.edit_prompts[params.prompt_column] for r in manifest.records]
        ev = ImmunizationEvaluator(bundle, manifest.load_images(), prompts, cfg["seeds"], params, [r.path for r in manifest.records])
        ev.evaluate(uniform_noise_control(cfg["epsilon"], cfg.seed), "noise").to_csv(cfg.out / "control.csv")
    logger.info("mean ssim %.4f psnr %.2f", report.mean("ssim"), report.mean("psnr_db"))


def cmd_ablate(cfg: RunConfig) -> None:
    from .immunizer import immunize
    from .metrics import ImmunizationEvaluator, uniform_noise_control, write_bar_svg

    cfg.require("data")
    bundle = _load_bundle(cfg)
    held = _load_manifest(cfg.get("eval_data") or cfg["data"])
    params = _edit_params(cfg)
    prompts = [r.edit_prompts[params.prompt_column] for r in held.records]
    ev = ImmunizationEvaluator(bundle, held.load_images(), prompts, cfg["seeds"], params, [r.path for r in held.records])
    results = {"noise": ev.evaluate(uniform_noise_control(cfg["epsilon"], cfg.seed), "noise")}
    for variant in cfg["variants"]:
        data_free = variant.endswith("-df")
        loss = variant.removesuffix("-df")
        if data_free and loss not in ("inj", "map-inj"):
            raise ConfigError(f"unsupported data-free variant {variant!r}")
        uap = _train_one(cfg, bundle, loss, data_free)
        uap.save(cfg.out / f"uap_{variant}.uit1")
        results[variant] = ev.evaluate(lambda x, u=uap: immunize(x, u), variant)
    with open(cfg.out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", "psnr_db", "ssim", "feat_sim"])
        for name, rep in results.items():
            p, s, f = (rep.per_seed_mean(m) for m in ("psnr_db", "ssim", "feat_sim"))
            for seed in sorted(s):
                w.writerow([name, seed, repr(p[seed]), repr(s[seed]), repr(f[seed])])
            w.writerow([name, "mean", repr(rep.mean("psnr_db")), repr(rep.mean("ssim")), repr(rep.mean("feat_sim"))])
    write_bar_svg(cfg.out / "ablation.svg", {k: v.mean("ssim") for k, v in results.items()}, "edited SSIM (lower is stronger)")


def cmd_purify(cfg: RunConfig) -> None:
    from .data import load_image, save_image
    from .purify import make_purifier

    cfg.require("input")
    bundle = _load_bundle(cfg) if cfg["kind"] == "diffpure" else None
    try:
        purifier = make_purifier(cfg["kind"], cfg["param"], bundle, cfg["prompt"], cfg.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for path in _input_images(cfg["input"]):
        save_image(purifier.transform(load_image(path)), cfg.out / path.name)


def attention_grid(trace, scale: int = 4) -> list[np.ndarray]:
    """Per layer, one grayscale strip of token maps (tokens left to right), each map peak-normalized."""
    grids = []
    for maps in trace.attention_maps:
        a = maps[0]  # (HW, M) for the first item
        side = int(round(np.sqrt(a.shape[0])))
        tiles = []
        for t in range(a.shape[1]):
            m = a[:, t].reshape(side, side)
            m = m / max(float(m.max()), 1e-12)
            tiles.append(np.kron(m, np.ones((scale, scale))))
            tiles.append(np.ones((side * scale, 1)))
        grids.append(np.concatenate(tiles[:-1], axis=1))
    return grids


def cmd_attn_dump(cfg: RunConfig) -> None:
    from .data import load_image, save_pgm
    from .immunizer import Uap, immunize

    cfg.require("input", "prompt")
    bundle = _load_bundle(cfg)
    x = load_image(_need_file(cfg["input"], "input"))
    if cfg.get("uap"):
        x = immunize(x, Uap.load(_need_file(cfg["uap"], "uap")))
    k = cfg["timestep"]
    if not 0 <= k <= bundle.schedule.k_max:
        raise ConfigError(f"timestep must lie in [0, {bundle.schedule.k_max}], got {k}")
    z0 = bundle.encode(x[None].astype(bundle.dtype)).data
    eps = np.random.default_rng(cfg.seed).standard_normal(z0.shape).astype(bundle.dtype)
    zk = bundle.schedule.add_noise(z0, np.array([k]), eps)
    _, trace = bundle.forward_with_trace(zk, np.array([k]), bundle.embed([cfg["prompt"]]))
    for l, grid in enumerate(attention_grid(trace)):
        save_pgm(grid, cfg.out / f"attn_layer{l}.pgm")
    (cfg.out / "attn_tokens.txt").write_text("\n".join(bundle.embedder.tokenize(cfg["prompt"])) + "\n", encoding="utf-8")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-model": cmd_train_model,
    "train-uap": cmd_train_uap,
    "immunize": cmd_immunize,
    "edit": cmd_edit,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "purify": cmd_purify,
    "attn-dump": cmd_attn_dump,
}


# ---------------------------------------------------------------- parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="immunolab", description="Universal image immunization lab.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, keys in COMMAND_KEYS.items():
        p = sub.add_parser(name, help=COMMANDS[name].__doc__)
        p.add_argument("--config", help="key=value config file")
        for key, spec in keys.items():
            flag = "--" + key.replace("_", "-")
            if spec.parse.__name__ == "_bool":
                p.add_argument(flag, dest=key, nargs="?", const="true", default=None, help=spec.help)
            else:
                p.add_argument(flag, dest=key, default=None, help=spec.help)
    return parser


def _fail(category: str, message: str, code: int) -> int:
    print(f"error: {category}: {' '.join(str(message).split())}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        logging.basicConfig(level=log_level_from_env(), format="%(levelname)s %(name)s: %(message)s")
        args = build_parser().parse_args(argv)
        overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
        file_values = read_config_file(_need_file(args.config, "config file")) if args.config else {}
        cfg = resolve(args.command, file_values, overrides)
        cfg.write_snapshot()
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except FileNotFoundError as exc:
        return _fail("missing-artifact", exc, EXIT_MISSING)
    except FloatingPointError as exc:
        return _fail("numerical", exc, EXIT_NUMERIC)
    except ValueError as exc:
        # bad inputs that only show up once loaded (shapes, resolutions, formats)
        return _fail("usage", exc, EXIT_CONFIG)
    return 0


if __name__ == "__main__":
    sys.exit(main())
