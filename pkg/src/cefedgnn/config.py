"""Flat key=value experiment configuration.

One `key=value` per line; blank lines and `#` comments allowed.  Unknown
keys are rejected with their line number, as are values that fail to
parse.  A config names its graph either by CSV paths (nodes/edges and
clients) or by inline generator fields (generator=... plus gen_* keys).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .datagen import GENERATORS, GenSpec
from .federation import ALGORITHMS, Hyperparams, ModelConfig
from .metrics import SplitSpec
from .models import ARCHITECTURES, LEAKY_RELU, TANH
from .privacy import DEFAULT_KNN, DEFAULT_PERCENTILES


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    nodes_path: Optional[str] = None
    edges_path: Optional[str] = None
    clients: Optional[int] = None
    genspec: Optional[GenSpec] = None
    task: str = "auto"
    hyper: Hyperparams = field(default_factory=Hyperparams)
    model: ModelConfig = field(default_factory=ModelConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    delta: float = 1e-4
    knn_k: int = DEFAULT_KNN
    percentiles: tuple[float, ...] = DEFAULT_PERCENTILES
    seed: int = 0
    repeats: int = 3
    out_dir: str = "out"
    compute_grad_norm: Optional[bool] = None
    timing: bool = False

    def validate(self) -> None:
        has_paths = self.nodes_path is not None and self.edges_path is not None
        if has_paths and self.clients is None:
            raise ConfigError("key 'clients' is required with nodes/edges paths")
        if not has_paths and self.genspec is None:
            raise ConfigError("config needs nodes+edges paths or generator fields")
        if self.task not in ("auto", "edge", "node"):
            raise ConfigError(f"task must be auto, edge, or node, got {self.task!r}")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if not (0.0 < self.delta < 1.0):
            raise ConfigError("delta must lie in (0, 1)")
        if self.knn_k < 1:
            raise ConfigError("knn_k must be >= 1")
        self.hyper.validate()
        self.split.validate()


def _parse_bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"invalid boolean {v!r}")


def _parse_grad_norm(v: str) -> Optional[bool]:
    if v.strip().lower() == "auto":
        return None
    return _parse_bool(v)


def _parse_choice(options) -> callable:
    def parse(v: str) -> str:
        s = v.strip().lower()
        if s not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return s
    return parse


def _parse_float_list(v: str) -> tuple[float, ...]:
    return tuple(float(x) for x in v.split(","))


# key -> (parser, setter(cfg, gen_overrides, value))
_KEYS = {
    "nodes": (str, lambda c, g, v: setattr(c, "nodes_path", v)),
    "edges": (str, lambda c, g, v: setattr(c, "edges_path", v)),
    "clients": (int, lambda c, g, v: (setattr(c, "clients", v),
                                      g.__setitem__("clients", v))),
    "generator": (_parse_choice(GENERATORS), lambda c, g, v: g.__setitem__("generator", v)),
    "n": (int, lambda c, g, v: g.__setitem__("n", v)),
    "feature_dim": (int, lambda c, g, v: g.__setitem__("feature_dim", v)),
    "density": (float, lambda c, g, v: g.__setitem__("density", v)),
    "pattern_count": (int, lambda c, g, v: g.__setitem__("pattern_count", v)),
    "pattern_length": (int, lambda c, g, v: g.__setitem__("pattern_length", v)),
    "illicit_ratio": (float, lambda c, g, v: g.__setitem__("illicit_ratio", v)),
    "imbalance": (float, lambda c, g, v: g.__setitem__("imbalance", v)),
    "num_blocks": (int, lambda c, g, v: g.__setitem__("num_blocks", v)),
    "p_intra": (float, lambda c, g, v: g.__setitem__("p_intra", v)),
    "p_inter": (float, lambda c, g, v: g.__setitem__("p_inter", v)),
    "feature_noise": (float, lambda c, g, v: g.__setitem__("feature_noise", v)),
    "task": (_parse_choice(("auto", "edge", "node")), lambda c, g, v: setattr(c, "task", v)),
    "rounds": (int, lambda c, g, v: setattr(c.hyper, "rounds", v)),
    "k_local": (int, lambda c, g, v: setattr(c.hyper, "k_local", v)),
    "eta": (float, lambda c, g, v: setattr(c.hyper, "eta", v)),
    "gamma": (float, lambda c, g, v: setattr(c.hyper, "gamma", v)),
    "beta": (float, lambda c, g, v: setattr(c.hyper, "beta", v)),
    "batch_size": (int, lambda c, g, v: setattr(c.hyper, "batch_size", v)),
    "fanout1": (int, lambda c, g, v: setattr(
        c.hyper, "fanouts", (v,) + tuple(c.hyper.fanouts[1:]))),
    "fanout2": (int, lambda c, g, v: setattr(
        c.hyper, "fanouts", tuple(c.hyper.fanouts[:1]) + (v,))),
    "algorithm": (_parse_choice(ALGORITHMS), lambda c, g, v: setattr(c.hyper, "algorithm", v)),
    "sigma0": (float, lambda c, g, v: setattr(c.hyper, "sigma0", v)),
    "sigma1": (float, lambda c, g, v: setattr(c.hyper, "sigma1", v)),
    "sigma2": (float, lambda c, g, v: setattr(c.hyper, "sigma2", v)),
    "clip_embed": (float, lambda c, g, v: setattr(c.hyper, "clip_embed", v)),
    "clip_model": (float, lambda c, g, v: setattr(c.hyper, "clip_model", v)),
    "arch": (_parse_choice(ARCHITECTURES), lambda c, g, v: setattr(c.model, "arch", v)),
    "hidden": (int, lambda c, g, v: setattr(
        c.model, "hidden_dims", (v,) * len(c.model.hidden_dims))),
    "layers": (int, lambda c, g, v: setattr(
        c.model, "hidden_dims", (c.model.hidden_dims[0],) * v)),
    "gin_eps": (float, lambda c, g, v: setattr(c.model, "gin_eps", v)),
    "activation": (_parse_choice((TANH, LEAKY_RELU)),
                   lambda c, g, v: setattr(c.model, "activation", v)),
    "class_weighting": (_parse_bool, lambda c, g, v: setattr(c.model, "class_weighting", v)),
    "split_train": (float, lambda c, g, v: setattr(c, "split", SplitSpec(
        v, c.split.val_frac, c.split.time_feature))),
    "split_val": (float, lambda c, g, v: setattr(c, "split", SplitSpec(
        c.split.train_frac, v, c.split.time_feature))),
    "time_feature_index": (int, lambda c, g, v: setattr(c, "split", SplitSpec(
        c.split.train_frac, c.split.val_frac, v))),
    "delta": (float, lambda c, g, v: setattr(c, "delta", v)),
    "knn_k": (int, lambda c, g, v: setattr(c, "knn_k", v)),
    "percentiles": (_parse_float_list, lambda c, g, v: setattr(c, "percentiles", v)),
    "seed": (int, lambda c, g, v: setattr(c, "seed", v)),
    "repeats": (int, lambda c, g, v: setattr(c, "repeats", v)),
    "out_dir": (str, lambda c, g, v: setattr(c, "out_dir", v)),
    "compute_grad_norm": (_parse_grad_norm,
                          lambda c, g, v: setattr(c, "compute_grad_norm", v)),
    "timing": (_parse_bool, lambda c, g, v: setattr(c, "timing", v)),
}

KNOWN_KEYS = tuple(sorted(_KEYS))


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    cfg = ExperimentConfig()
    gen_overrides: dict = {}
    saw_generator = False
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source} line {lineno}: expected key=value")
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _KEYS:
            raise ConfigError(f"{source} line {lineno}: unknown key {key!r}")
        parser, setter = _KEYS[key]
        try:
            parsed = parser(value)
        except ValueError as exc:
            raise ConfigError(f"{source} line {lineno}: key {key!r}: {exc}") from None
        setter(cfg, gen_overrides, parsed)
        if key == "generator":
            saw_generator = True
    if saw_generator:
        gen_overrides.setdefault("seed", cfg.seed)
        cfg.genspec = GenSpec(**gen_overrides)
    try:
        cfg.validate()
    except (ConfigError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path) as f:
        return parse_config(f.read(), source=str(path))
