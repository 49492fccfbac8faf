"""Unified run configuration: one JSON document with model / training /
loss / corruption / inference / judge sections.

Unknown sections or keys are rejected. Every field has a default; corpus
and output paths live on the command line only. Flag values override file
values, which override defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import CorruptionConfig
from .judge import DEFAULT_USER_TEMPLATE, JudgeConfig
from .losses import BTConfig, LossConfig
from .model import DecodeConfig, ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Raised for unknown keys or malformed configuration files."""


DEFAULTS: dict[str, dict] = {
    "model": {
        "d_model": 64,
        "n_layers_enc": 2,
        "n_layers_dec": 2,
        "n_layers_ext": 2,
        "n_heads": 4,
        "d_ff": 128,
        "max_len": 64,
        "dropout": 0.0,
    },
    "training": {
        "lr": 1e-3,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "adam_eps": 1e-8,
        "batch_size": 16,
        "steps": 1000,
        "seed": 0,
        "checkpoint_every": 1000,
    },
    "loss": {
        "lambda": 1e-2,
        "bt_level": "sentence",
        "delta": 1e-4,
        "eps": 1e-8,
    },
    "corruption": {
        "drop_rate_range": [0.2, 0.5],
        "replace_rate_range": [0.1, 0.3],
        "emit_rate_tokens": False,
    },
    "inference": {
        "beta": 4.0,
        "decode_mode": "greedy",
        "beam_width": 1,
        "max_new_tokens": 32,
    },
    "judge": {
        "base_url": "https://api.openai.com/v1",
        "model_name": "gpt-3.5-turbo",
        "max_in_flight": 4,
        "max_retries": 3,
        "timeout_s": 30.0,
        "prompt_template": DEFAULT_USER_TEMPLATE,
    },
}


@dataclass
class RunConfig:
    values: dict[str, dict] = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path | None = None) -> "RunConfig":
        values = {section: dict(keys) for section, keys in DEFAULTS.items()}
        if path is not None:
            try:
                doc = json.loads(Path(path).read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from exc
            if not isinstance(doc, dict):
                raise ConfigError(f"{path}: top level must be an object")
            for section, keys in doc.items():
                if section not in values:
                    raise ConfigError(f"{path}: unknown section {section!r}")
                if not isinstance(keys, dict):
                    raise ConfigError(f"{path}: section {section!r} must be an object")
                for key, value in keys.items():
                    if key not in values[section]:
                        raise ConfigError(
                            f"{path}: unknown key {key!r} in section {section!r}")
                    values[section][key] = value
        return cls(values)

    def override(self, section: str, key: str, value) -> None:
        """Apply a flag override; None means the flag was not given."""
        if value is None:
            return
        if key not in self.values[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        self.values[section][key] = value

    def model_config(self, vocab_size: int) -> ModelConfig:
        m = self.values["model"]
        return ModelConfig(vocab_size=vocab_size, **m)

    def corruption_config(self) -> CorruptionConfig:
        c = self.values["corruption"]
        return CorruptionConfig(
            drop_rate_range=tuple(c["drop_rate_range"]),
            replace_rate_range=tuple(c["replace_rate_range"]),
            emit_rate_tokens=bool(c["emit_rate_tokens"]),
        )

    def train_config(self) -> TrainConfig:
        t = self.values["training"]
        lo = self.values["loss"]
        return TrainConfig(
            lr=t["lr"], adam_beta1=t["adam_beta1"], adam_beta2=t["adam_beta2"],
            adam_eps=t["adam_eps"], batch_size=int(t["batch_size"]),
            steps=int(t["steps"]), seed=int(t["seed"]),
            loss=LossConfig(lam=lo["lambda"], bt_level=lo["bt_level"]),
            bt=BTConfig(delta=lo["delta"], eps=lo["eps"]),
            corruption=self.corruption_config(),
            checkpoint_every=int(t["checkpoint_every"]),
        )

    def decode_config(self) -> DecodeConfig:
        i = self.values["inference"]
        return DecodeConfig(mode=i["decode_mode"], beam_width=int(i["beam_width"]),
                            max_new_tokens=int(i["max_new_tokens"]))

    def beta(self) -> float:
        return float(self.values["inference"]["beta"])

    def judge_config(self) -> JudgeConfig:
        j = self.values["judge"]
        return JudgeConfig(
            base_url=j["base_url"], model_name=j["model_name"],
            max_in_flight=int(j["max_in_flight"]), max_retries=int(j["max_retries"]),
            timeout_s=float(j["timeout_s"]), prompt_template=j["prompt_template"],
        )
