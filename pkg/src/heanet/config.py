"""Run configuration: flat ``key = value`` files with ``#`` comments.

One file configures a training run: the model spec, the optimizer/loop
settings and the data. Every key is listed in :data:`KEYS`; unknown keys,
unparsable values and inconsistent settings are all reported together
before any work starts. The effective configuration (defaults filled in)
is echoed to the run directory as ``config.cfg``.

Presets ship with the package and can be named instead of a path:
``toy_cls``, ``toy_seg`` (the desk-scale acceptance runs) and ``paper``
(the full-size network with the 400-epoch schedule).
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Dict, Iterable, Optional

from .exceptions import ConfigError
from .model import ModelSpec
from .train import TrainConfig

# key -> (section, default, description)
KEYS: Dict[str, tuple] = {
    # model
    "task": ("model", "classification", "classification or segmentation"),
    "n_points": ("model", 1024, "points per input cloud"),
    "stages": ("model", (1024, 512, 256, 128), "point counts per level, comma separated, first == n_points"),
    "k": ("model", 32, "neighborhood size of the embedding and the local sampler"),
    "width": ("model", 128, "feature width of every stage"),
    "embed_hidden": ("model", 64, "hidden width of the embedding MLPs"),
    "heads": ("model", 4, "attention heads of the transformer blocks (must divide width)"),
    "num_classes": ("model", 40, "number of object classes"),
    "num_parts": ("model", 50, "number of part labels (segmentation)"),
    "fusion": ("model", "shared_index", "global/local fusion: shared_index or independent_sum"),
    "memory": ("model", "self", "cross-attention memory: self or stage_input"),
    "residual": ("model", True, "add the sampled input features back after each downsampling"),
    "embed_variant": ("model", "diff", "grouped embedding input: diff (neighbor - center) or neighbor"),
    "use_global": ("model", True, "include the random distant-point embedding branch"),
    "head_widths": ("model", (512, 256), "hidden widths of the classification head"),
    "decoder_norm": ("model", True, "batch-normalize the segmentation decoder layers"),
    "eval_seed": ("model", 0, "seed of the distant-point draws in eval mode"),
    # training
    "lr_init": ("train", 1e-4, "initial learning rate"),
    "lr_final": ("train", 1e-8, "final learning rate of the cosine schedule"),
    "epochs": ("train", 30, "training epochs"),
    "batch": ("train", 16, "batch size"),
    "weight_decay": ("train", 1e-5, "decoupled AdamW weight decay"),
    "dropout": ("train", 0.5, "dropout of the classification head"),
    "seed": ("train", 0, "seed of initialization, shuffling, dropout and neighbor draws"),
    "schedule": ("train", "epoch", "learning-rate update granularity: epoch or step"),
    "jitter": ("train", 0.0, "gaussian coordinate jitter (augmentation); 0 disables"),
    "rotate": ("train", False, "random rotation about the vertical axis (augmentation)"),
    "beta1": ("train", 0.9, "AdamW first-moment decay"),
    "beta2": ("train", 0.999, "AdamW second-moment decay"),
    "eps": ("train", 1e-8, "AdamW denominator epsilon"),
    # run
    "data": ("run", "", "dataset directory or synthetic description (overridden by --data)"),
    "eval_split": ("run", "test", "split scored after every epoch; empty disables"),
}

PRESETS = ("toy_cls", "toy_seg", "paper")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(key: str, text: str):
    default = KEYS[key][1]
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(default, tuple):
        return tuple(int(v) for v in text.split(",") if v.strip())
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


@dataclass
class RunConfig:
    values: dict
    source: str = "<defaults>"

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({k: v[1] for k, v in KEYS.items()})

    @classmethod
    def from_text(cls, text: str, source: str = "<string>", overrides: Iterable[str] = ()) -> "RunConfig":
        """Parse and validate; every problem is reported in one ConfigError."""
        values = {k: v[1] for k, v in KEYS.items()}
        problems, seen = [], set()
        lines = [(f"{source}:{i}", line) for i, line in enumerate(text.splitlines(), 1)]
        lines += [("--set", item) for item in overrides]
        for where, raw in lines:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep:
                problems.append(f"{where}: expected key = value, got {line!r}")
                continue
            if key not in KEYS:
                problems.append(f"{where}: unknown key {key!r}")
                continue
            if key in seen and where != "--set":
                problems.append(f"{where}: duplicate key {key!r}")
            seen.add(key)
            try:
                values[key] = _parse(key, value)
            except ValueError as exc:
                problems.append(f"{where}: bad value for {key!r}: {exc}")
        if problems:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
        cfg = cls(values, source)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path_or_preset: str, overrides: Iterable[str] = ()) -> "RunConfig":
        path = Path(path_or_preset)
        if not path.is_file() and path_or_preset in PRESETS:
            text = resources.files("heanet").joinpath("configs").joinpath(f"{path_or_preset}.cfg").read_text()
            return cls.from_text(text, f"preset:{path_or_preset}", overrides)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path_or_preset!r}: {exc.strerror or exc}") from None
        return cls.from_text(text, str(path), overrides)

    def __getitem__(self, key: str):
        return self.values[key]

    def validate(self) -> None:
        problems = []
        for build in (self.model_spec, self.train_config):
            try:
                build()
            except ConfigError as exc:
                problems.append(str(exc))
        if self["eval_split"] not in ("", "train", "test"):
            problems.append(f"eval_split must be train, test or empty, got {self['eval_split']!r}")
        if problems:
            raise ConfigError("invalid configuration: " + "; ".join(problems))

    def _section(self, name: str) -> dict:
        return {k: self.values[k] for k, v in KEYS.items() if v[0] == name}

    def model_spec(self) -> ModelSpec:
        return ModelSpec(**self._section("model"))

    def train_config(self) -> TrainConfig:
        section = self._section("train")
        section["task"] = self["task"]
        return TrainConfig(**section)

    def to_text(self) -> str:
        out = [f"# effective configuration (source: {self.source})"]
        for section in ("model", "train", "run"):
            out.append(f"\n# {section}")
            for key, (sec, _, doc) in KEYS.items():
                if sec == section:
                    out.append(f"{key} = {_format(self.values[key])}  # {doc}")
        return "\n".join(out) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())

    def replace(self, **updates) -> "RunConfig":
        unknown = sorted(set(updates) - set(KEYS))
        if unknown:
            raise ConfigError(f"unknown key(s): {', '.join(unknown)}")
        cfg = RunConfig({**self.values, **updates}, self.source)
        cfg.validate()
        return cfg


def preset(name: str, overrides: Optional[Dict[str, object]] = None) -> RunConfig:
    """A shipped preset, optionally with validated overrides."""
    cfg = RunConfig.load(name)
    return cfg.replace(**overrides) if overrides else cfg


def toy_classification_spec() -> ModelSpec:
    return preset("toy_cls").model_spec()


def toy_segmentation_spec() -> ModelSpec:
    return preset("toy_seg").model_spec()


def document() -> str:
    """Human-readable key reference (used by ``heanet train --help-config``)."""
    width = max(len(k) for k in KEYS)
    lines = []
    for section in ("model", "train", "run"):
        lines.append(f"[{section}]")
        for key, (sec, default, doc) in KEYS.items():
            if sec == section:
                lines.append(f"  {key.ljust(width)}  {doc} (default: {_format(default)})")
    return "\n".join(lines)


__all__ = ["KEYS", "PRESETS", "RunConfig", "preset", "document", "toy_classification_spec",
           "toy_segmentation_spec"]
