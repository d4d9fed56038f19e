"""Run configuration: a flat key=value file overridable by CLI flags.

Every field is validated up front and unknown keys are rejected, so a typo
fails the run before any work starts.  `dropout = -1` means "architecture
default" (0.1 for the Transformer, 0.2 for the LSTM).
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from bidiseq.training import TrainingConfig


class ConfigError(ValueError):
    """A configuration key or value is invalid; names the offender."""


ARCHITECTURES = ("transformer", "lstm")
STRATEGIES = ("two-pass", "fine-tune", "no-interaction")
DIRECTION_MODES = ("both", "l2r", "r2l")


@dataclass
class RunConfig:
    arch: str = "transformer"
    d_model: int = 64
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 128
    dropout: float = -1.0
    share_directions: bool = True
    separate_future_kv: bool = False
    beam_size: int = 4
    max_len: int = 32
    alpha: float = 0.6
    strategy: str = "fine-tune"
    direction_mode: str = "both"
    warmup_steps: int = 400
    label_smoothing: float = 0.1
    batch_size: int = 32
    max_epochs: int = 40
    eval_every: int = 1
    patience: int = 3
    fine_tune_fraction: float = 0.1
    pseudo_beam_size: int = 2
    pseudo_max_len: int = 48
    beta1: float = 0.9
    beta2: float = 0.998
    adam_eps: float = 1e-9
    two_pass_from_scratch: bool = False
    seed: int = 0

    def validate(self) -> "RunConfig":
        checks = [
            ("arch", self.arch in ARCHITECTURES),
            ("strategy", self.strategy in STRATEGIES),
            ("direction_mode", self.direction_mode in DIRECTION_MODES),
            ("d_model", self.d_model >= 1),
            ("layers", self.layers >= 1),
            ("heads", self.heads >= 1 and self.d_model % self.heads == 0),
            ("ffn_dim", self.ffn_dim >= 1),
            ("dropout", self.dropout == -1.0 or 0.0 <= self.dropout < 1.0),
            ("beam_size", self.beam_size >= 2 and self.beam_size % 2 == 0),
            ("max_len", self.max_len >= 1),
            ("alpha", self.alpha >= 0.0),
            ("warmup_steps", self.warmup_steps >= 1),
            ("label_smoothing", 0.0 <= self.label_smoothing < 1.0),
            ("batch_size", self.batch_size >= 1),
            ("max_epochs", self.max_epochs >= 0),
            ("eval_every", self.eval_every >= 1),
            ("patience", self.patience >= 1),
            ("fine_tune_fraction", 0.0 < self.fine_tune_fraction <= 1.0),
            ("pseudo_beam_size",
             self.pseudo_beam_size >= 2 and self.pseudo_beam_size % 2 == 0),
            ("pseudo_max_len", self.pseudo_max_len >= 1),
            ("beta1", 0.0 <= self.beta1 < 1.0),
            ("beta2", 0.0 <= self.beta2 < 1.0),
            ("adam_eps", self.adam_eps > 0.0),
        ]
        for name, ok in checks:
            if not ok:
                raise ConfigError(f"invalid value for {name!r}: {getattr(self, name)!r}")
        return self

    @property
    def dropout_resolved(self) -> float:
        if self.dropout >= 0.0:
            return self.dropout
        return 0.2 if self.arch == "lstm" else 0.1

    def items(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["dropout_resolved"] = self.dropout_resolved
        return {k: _render(v) for k, v in out.items()}

    def training_config(self) -> TrainingConfig:
        return TrainingConfig(
            beta1=self.beta1, beta2=self.beta2, adam_eps=self.adam_eps,
            warmup_steps=self.warmup_steps, label_smoothing=self.label_smoothing,
            batch_size=self.batch_size, max_epochs=self.max_epochs,
            eval_every=self.eval_every, patience=self.patience,
            fine_tune_fraction=self.fine_tune_fraction,
            pseudo_beam_size=self.pseudo_beam_size,
            pseudo_max_len=self.pseudo_max_len, length_penalty=self.alpha,
            direction_mode=self.direction_mode,
            two_pass_from_scratch=self.two_pass_from_scratch, seed=self.seed)

    def beam_config(self):
        from bidiseq.beam import BeamConfig
        return BeamConfig(beam_size=self.beam_size, max_len=self.max_len,
                          alpha=self.alpha)

    def build_model(self, vocab_size: int):
        from bidiseq.lstm import LstmConfig, LstmModel
        from bidiseq.transformer import TransformerConfig, TransformerModel
        if self.arch == "transformer":
            cfg = TransformerConfig(
                vocab_size=vocab_size, d_model=self.d_model, layers=self.layers,
                heads=self.heads, ffn_dim=self.ffn_dim,
                dropout=self.dropout_resolved,
                separate_future_kv=self.separate_future_kv)
            return TransformerModel(cfg, seed=self.seed)
        cfg = LstmConfig(vocab_size=vocab_size, d_model=self.d_model,
                         layers=self.layers, dropout=self.dropout_resolved,
                         share_directions=self.share_directions)
        return LstmModel(cfg, seed=self.seed)


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _parse_value(name: str, text: str, kind: type):
    text = text.strip()
    try:
        if kind is bool:
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError as exc:
        raise ConfigError(f"cannot parse value for {name!r}: {text!r}") from exc


def apply_overrides(config: RunConfig, overrides: dict) -> RunConfig:
    """Apply key -> string-value pairs; unknown keys are rejected by name."""
    kinds = {f.name: f.type for f in fields(RunConfig)}
    pythonic = {"int": int, "float": float, "str": str, "bool": bool}
    for key, raw in overrides.items():
        name = key.replace("-", "_")
        if name not in kinds:
            raise ConfigError(f"unknown configuration key {key!r}")
        kind = pythonic[kinds[name]] if isinstance(kinds[name], str) else kinds[name]
        setattr(config, name, raw if kind is str and not isinstance(raw, str)
                else _parse_value(name, str(raw), kind))
    return config


def read_config_file(path) -> dict:
    """Flat key=value lines; blanks and '#' comments ignored."""
    overrides = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}: line {lineno}: expected key=value")
        key, _, value = stripped.partition("=")
        overrides[key.strip()] = value.strip()
    return overrides


def load_run_config(config_path=None, overrides: dict | None = None) -> RunConfig:
    """File first, then explicit overrides, then validation."""
    config = RunConfig()
    if config_path is not None:
        apply_overrides(config, read_config_file(config_path))
    if overrides:
        apply_overrides(config, overrides)
    return config.validate()
