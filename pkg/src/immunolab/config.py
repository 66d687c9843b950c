"""Key=value run configuration with typed keys per command."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable


class ConfigError(ValueError):
    """Bad config file, unknown key, or invalid value."""


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).replace(",", " ").split())


def _str_list(text) -> tuple[str, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(text)
    return tuple(v for v in str(text).replace(",", " ").split())


def _fraction(text) -> float:
    # accepts "0.04" as well as "10/255"
    s = str(text).strip()
    if "/" in s:
        num, den = s.split("/", 1)
        return float(num) / float(den)
    return float(s)


@dataclass(frozen=True)
class Key:
    parse: Callable[[Any], Any]
    default: Any = None
    help: str = ""


# shared keys
_COMMON = {
    "seed": Key(int, None, "random seed (required)"),
    "out": Key(str, "runs", "output directory"),
}
_MODEL = {"model": Key(str, None, "bundle checkpoint (.ckpt)")}
_DATA = {"data": Key(str, None, "dataset manifest.tsv")}
_EDIT = {
    "strength": Key(float, 0.8, "img2img strength in (0, 1]"),
    "guidance": Key(float, 7.5, "classifier-free guidance scale"),
    "steps": Key(int, 50, "sampling steps"),
}
_UAP = {
    "epsilon": Key(_fraction, 10 / 255, "L-inf budget, pixel scale"),
    "step_size": Key(_fraction, 1 / 255, "sign-step size"),
    "timesteps": Key(_int_list, (5, 10, 15, 20, 25), "diffusion timesteps, comma separated"),
    "epochs": Key(int, 20, "training epochs"),
    "loss": Key(str, "inj+sup", "loss kind"),
    "target_image": Key(str, None, "target image (PPM); built-in black triangle if unset"),
    "target_prompt": Key(str, None, "target prompt"),
    "data_free": Key(_bool, False, "train on the jigsaw prior instead of data"),
    "noise_space": Key(str, "latent", "latent or pixel"),
    "sup_weight": Key(float, 1.0, "weight of the suppression term"),
    "n_prior_samples": Key(int, 50, "prior samples per epoch when data-free"),
    "n_train": Key(int, 0, "use only the first n dataset images (0 = all)"),
}

COMMAND_KEYS: dict[str, dict[str, Key]] = {
    "gen-data": {**_COMMON, "n": Key(int, 200, "number of images"), "size": Key(int, 32, "image side")},
    "train-model": {
        **_COMMON,
        **_DATA,
        "train_steps": Key(int, 2000, "denoiser steps"),
        "lr": Key(float, 1e-3, "denoiser learning rate"),
        "vae_steps": Key(int, 1000, "VAE steps"),
        "vae_lr": Key(float, 2e-3, "VAE learning rate"),
    },
    "train-uap": {**_COMMON, **_MODEL, **_DATA, **_UAP},
    "immunize": {**_COMMON, "uap": Key(str, None, "uap.uit1"), "input": Key(str, None, "image file or directory")},
    "edit": {**_COMMON, **_MODEL, **_EDIT, "input": Key(str, None, "image file"), "prompt": Key(str, None, "edit prompt")},
    "evaluate": {
        **_COMMON,
        **_MODEL,
        **_DATA,
        **_EDIT,
        "uap": Key(str, None, "uap.uit1"),
        "seeds": Key(_int_list, (0, 1, 2, 3, 4), "edit seeds"),
        "prompt_column": Key(int, 0, "0 = object swap, 1 = background change"),
        "control": Key(_bool, False, "also report the uniform-noise control"),
        "epsilon": Key(_fraction, 10 / 255, "budget of the noise control"),
    },
    "ablate": {
        **_COMMON,
        **_MODEL,
        **_DATA,
        **_EDIT,
        **{k: v for k, v in _UAP.items() if k not in ("loss", "data_free", "sup_weight")},
        "variants": Key(_str_list, ("inj-df", "inj", "inj+sup"), "variants to train"),
        "eval_data": Key(str, None, "held-out manifest; training manifest if unset"),
        "seeds": Key(_int_list, (0, 1, 2, 3, 4), "edit seeds"),
    },
    "purify": {
        **_COMMON,
        "model": Key(str, None, "bundle checkpoint (diffpure only)"),
        "input": Key(str, None, "image file or directory"),
        "kind": Key(str, "jpeg", "jpeg, smooth or diffpure"),
        "param": Key(int, 75, "quality, kernel size or k_p"),
        "prompt": Key(str, "", "prompt for diffpure"),
    },
    "attn-dump": {
        **_COMMON,
        **_MODEL,
        "input": Key(str, None, "image file"),
        "prompt": Key(str, None, "conditioning prompt"),
        "timestep": Key(int, 25, "diffusion timestep"),
        "uap": Key(str, None, "optional uap.uit1 applied first"),
    },
}


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment line."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: cannot read config: {exc}") from exc
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{n}: expected key=value, got {raw!r}")
        key = key.strip().replace("-", "_")
        if key in out:
            raise ConfigError(f"{path}:{n}: duplicate key {key!r}")
        out[key] = val.strip()
    return out


@dataclass
class RunConfig:
    command: str
    values: dict[str, Any] = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.values[key]

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def out(self) -> Path:
        return Path(self.values["out"])

    def require(self, *keys: str) -> None:
        for key in keys:
            if self.values.get(key) in (None, ""):
                raise ConfigError(f"{self.command}: missing required key {key!r}")

    def snapshot(self) -> str:
        lines = [f"# resolved config for {self.command}"]
        for key in sorted(self.values):
            val = self.values[key]
            if isinstance(val, (list, tuple)):
                val = ",".join(str(v) for v in val)
            lines.append(f"{key} = {'' if val is None else val}")
        return "\n".join(lines) + "\n"

    def write_snapshot(self) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / f"{self.command}.config"
        path.write_text(self.snapshot(), encoding="utf-8")
        return path


def resolve(command: str, file_values: dict[str, str], overrides: dict[str, Any]) -> RunConfig:
    """Merge defaults, config-file values and flag overrides (highest priority)."""
    keys = COMMAND_KEYS[command]
    unknown = sorted(set(file_values) - set(keys))
    if unknown:
        raise ConfigError(f"{command}: unknown config key(s): {', '.join(unknown)}")
    values: dict[str, Any] = {k: spec.default for k, spec in keys.items()}
    merged = dict(file_values)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    for key, raw in merged.items():
        try:
            values[key] = keys[key].parse(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{command}: bad value for {key!r}: {raw!r} ({exc})") from exc
    if values.get("seed") is None:
        raise ConfigError(f"{command}: a seed is required (--seed or seed=)")
    return RunConfig(command, values)


LOG_LEVELS = {"error": 40, "info": 20, "debug": 10}


def log_level_from_env(env=None) -> int:
    env = os.environ if env is None else env
    name = env.get("IMMUNO_LOG", "error").strip().lower()
    if name not in LOG_LEVELS:
        raise ConfigError(f"IMMUNO_LOG must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    return LOG_LEVELS[name]
