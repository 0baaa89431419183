"""Flat ``key = value`` experiment configuration.

Keys are either top-level (``seed``, ``pca_dim`` ...) or prefixed with the
section they configure: ``synth.`` for :class:`SyntheticSpec`, ``am.`` for
:class:`AmConfig` and ``lm.`` for :class:`LmConfig`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from typing import Dict, Mapping, Optional

from .acoustic import AmConfig
from .errors import ValidationError
from .lm import LmConfig
from .synth import SyntheticSpec

# settings of the synthetic acoustic benchmark: a short stage-2 learning
# schedule and three alternating stage-2/3 passes
BENCHMARK_AM = dict(epochs=10, lr=0.02, adapt_lr=0.3, adapt_epochs=5, vat_lr=0.02, vat_epochs=5,
                    adapt_passes=3)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(annotation: str, text: str):
    text = text.strip()
    optional = annotation.startswith("Optional[")
    if optional:
        if text.lower() in ("none", ""):
            return None
        annotation = annotation[len("Optional["):-1]
    if annotation == "int":
        return int(text)
    if annotation == "float":
        return float(text)
    if annotation == "bool":
        return _parse_bool(text)
    if annotation.startswith("Tuple[int"):
        return tuple(int(v) for v in text.replace(",", " ").split())
    return text


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(map(str, value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class ExperimentConfig:
    seed: Optional[int] = None
    pca_dim: int = 100
    folds: int = 5
    aw: float = 1.0
    lw: float = 1.0
    fw: float = 0.0
    ensemble_mode: str = "log"
    synth: SyntheticSpec = field(default_factory=SyntheticSpec)
    am: AmConfig = field(default_factory=lambda: AmConfig(**BENCHMARK_AM))
    lm: LmConfig = field(default_factory=LmConfig)

    SECTIONS = ("synth", "am", "lm")

    def items(self) -> Dict[str, str]:
        """Every setting as text, keyed by its flat name."""
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in self.SECTIONS:
                for sub in fields(value):
                    if f.name in ("am", "lm") and sub.name == "seed":
                        continue  # the experiment seed drives every stage
                    out[f"{f.name}.{sub.name}"] = _fmt(getattr(value, sub.name))
            else:
                out[f.name] = _fmt(value)
        return out

    def text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in sorted(self.items().items()))

    def hash(self) -> str:
        return hashlib.sha256(self.text().encode()).hexdigest()

    def with_updates(self, updates: Mapping[str, str]) -> "ExperimentConfig":
        """Apply textual ``key -> value`` overrides; unknown keys are errors."""
        top = {f.name: f for f in fields(self) if f.name not in self.SECTIONS}
        sections = {name: dict() for name in self.SECTIONS}
        top_vals, errors = {}, []
        for key, text in updates.items():
            name, dot, sub = key.partition(".")
            try:
                if dot and name in self.SECTIONS:
                    sec_fields = {f.name: f for f in fields(getattr(self, name))}
                    if sub not in sec_fields or sub == "seed" and name != "synth":
                        errors.append(f"unknown key {key!r}")
                        continue
                    sections[name][sub] = _coerce(str(sec_fields[sub].type), text)
                elif not dot and key in top:
                    top_vals[key] = _coerce(str(top[key].type), text)
                else:
                    errors.append(f"unknown key {key!r}")
            except ValueError as exc:
                errors.append(f"{key}: {exc}")
        if errors:
            raise ValidationError("invalid configuration: " + "; ".join(errors))
        out = replace(self, **top_vals)
        for name, vals in sections.items():
            if vals:
                out = replace(out, **{name: replace(getattr(out, name), **vals)})
        return out

    def validate(self):
        bad = []
        if self.seed is None:
            bad.append("seed is required")
        if self.pca_dim < 1:
            bad.append("pca_dim must be >= 1")
        if self.folds < 2:
            bad.append("folds must be >= 2")
        if self.ensemble_mode not in ("log", "prob"):
            bad.append("ensemble_mode must be 'log' or 'prob'")
        if self.am.optimizer not in ("sgd", "adagrad") or self.am.adapt_optimizer not in ("sgd", "adagrad"):
            bad.append("am optimizers must be 'sgd' or 'adagrad'")
        if self.lm.optimizer not in ("sgd", "adagrad"):
            bad.append("lm.optimizer must be 'sgd' or 'adagrad'")
        for name, value in (("am.lr", self.am.lr), ("lm.lr", self.lm.lr), ("lm.clip", self.lm.clip)):
            if not value > 0:
                bad.append(f"{name} must be positive")
        if not 0.0 <= self.lm.dropout < 1.0:
            bad.append("lm.dropout must lie in [0, 1)")
        if self.am.adapt_passes < 1:
            bad.append("am.adapt_passes must be >= 1")
        n_train = self.synth.n_contexts * self.synth.utts_per_context
        if n_train < self.pca_dim + 1:
            bad.append(f"pca_dim {self.pca_dim} needs at least {self.pca_dim + 1} training "
                       f"utterances, the synthetic spec yields {n_train}")
        if self.pca_dim > self.synth.object_dim + self.synth.place_dim:
            bad.append("pca_dim exceeds the posterior dimension")
        try:
            self.synth.validate()
            self.synth.validate(lm=True)
        except ValidationError as exc:
            bad.append(str(exc))
        if bad:
            raise ValidationError("invalid configuration: " + "; ".join(bad))
        return self

    def am_config(self) -> AmConfig:
        return replace(self.am, seed=self.seed)

    def lm_config(self, conditioned: bool) -> LmConfig:
        return replace(self.lm, seed=self.seed, conditioned=conditioned)


def read_config_file(path) -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise ValidationError(f"cannot read config file {path}: {exc}") from exc
    with fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, eq, value = line.partition("=")
            if not eq or not key.strip():
                raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
            out[key.strip()] = value.strip()
    return out
