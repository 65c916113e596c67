"""Versioned TOML configuration for the CLI.

Precedence is built-in defaults < config file < command-line flags. Only the
API credential is read from the environment.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .entities import Recognizer, RuleRecognizer, SidecarRecognizer
from .gateway import LlmGateway, MockGateway, MockScript, RemoteGateway
from .policies import Policy, PolicyKind, PromptTemplate
from .scoring import DetectionConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GatewaySettings:
    backend: str = "mock"
    mock_script: str = ""
    endpoint: str = ""
    model: str = ""
    api_style: str = "completions"
    top_logprobs: int = 5
    temperature: float = 0.0
    max_retries: int = 3
    transcript: str = ""


@dataclass(frozen=True)
class EntitySettings:
    backend: str = "rule"
    sidecar: str = ""
    labels: tuple[str, ...] = ()


@dataclass(frozen=True)
class AppConfig:
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    k: int = 3
    m: int = 10
    tpr_threshold: float = 0.4
    strict_window: bool = False
    budget: int = 256
    prompt: PromptTemplate = field(default_factory=PromptTemplate)
    answer_mode: str = "pattern"
    answer_marker: str = "the answer is"
    stop_sequences: tuple[str, ...] = ()
    gateway: GatewaySettings = field(default_factory=GatewaySettings)
    entities: EntitySettings = field(default_factory=EntitySettings)
    concurrency: int = 1
    seed: int = 0
    log_level: str = "WARNING"

    def policy(self, kind: Policy | str) -> PolicyKind:
        return PolicyKind(Policy(kind), k=self.k, m=self.m, tpr_threshold=self.tpr_threshold,
                          detection=self.detection, strict_window=self.strict_window)

    def with_overrides(self, **values: Any) -> AppConfig:
        """Apply non-None flag values; dotted keys reach into nested sections."""
        top: dict[str, Any] = {}
        nested: dict[str, dict[str, Any]] = {}
        for key, value in values.items():
            if value is None:
                continue
            if "." in key:
                section, name = key.split(".", 1)
                nested.setdefault(section, {})[name] = value
            else:
                top[key] = value
        for section, vals in nested.items():
            top[section] = replace(getattr(self, section), **vals)
        return replace(self, **top)

    def make_gateway(self) -> LlmGateway:
        g = self.gateway
        if g.backend == "mock":
            if not g.mock_script:
                raise ConfigError("mock gateway needs a mock script (--mock-script or gateway.mock_script)")
            return MockGateway(MockScript.load(g.mock_script))
        if g.backend == "remote":
            if not g.endpoint or not g.model:
                raise ConfigError("remote gateway needs gateway.endpoint and gateway.model")
            return RemoteGateway(g.endpoint, g.model, api_style=g.api_style, max_retries=g.max_retries,
                                 transcript_path=g.transcript or None)
        raise ConfigError(f"unknown gateway backend {g.backend!r}")

    def make_recognizer(self) -> Recognizer:
        e = self.entities
        rule = RuleRecognizer(e.labels or None)
        if e.backend == "rule":
            return rule
        if e.backend == "sidecar":
            if not e.sidecar:
                raise ConfigError("sidecar entity backend needs entities.sidecar")
            return SidecarRecognizer.from_file(e.sidecar, fallback=rule, labels=e.labels or None)
        raise ConfigError(f"unknown entity backend {e.backend!r}")


def _resolve(base: Path, value: str) -> str:
    if not value:
        return value
    p = Path(value)
    return str(p if p.is_absolute() else base / p)


def load_config(path: str | Path | None = None) -> AppConfig:
    """Read a config file; ``None`` gives the built-in defaults."""
    if path is None:
        return AppConfig()
    path = Path(path)
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw, base=path.parent)


def config_from_dict(raw: dict[str, Any], base: Path = Path(".")) -> AppConfig:
    version = raw.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version!r}")
    det = raw.get("detection", {})
    pol = raw.get("policy", {})
    prm = raw.get("prompt", {})
    gw = raw.get("gateway", {})
    ent = raw.get("entities", {})
    ev = raw.get("eval", {})
    try:
        detection = DetectionConfig(**det)
        template_fields = {k: prm[k] for k in ("preamble", "question_format", "context_format",
                                               "context_separator") if k in prm}
        if prm.get("few_shot_file"):
            template_fields["few_shot"] = Path(_resolve(base, prm["few_shot_file"])).read_text(encoding="utf-8")
        gateway = GatewaySettings(**gw)
        gateway = replace(gateway, mock_script=_resolve(base, gateway.mock_script),
                          transcript=_resolve(base, gateway.transcript))
        entities = EntitySettings(backend=ent.get("backend", "rule"),
                                  sidecar=_resolve(base, ent.get("sidecar", "")),
                                  labels=tuple(ent.get("labels", ())))
        cfg = AppConfig(
            detection=detection,
            k=pol.get("k", 3),
            m=pol.get("m", 10),
            tpr_threshold=pol.get("tpr_threshold", 0.4),
            strict_window=pol.get("strict_window", False),
            budget=pol.get("budget", 256),
            prompt=PromptTemplate(**template_fields),
            answer_mode=prm.get("answer_mode", "pattern"),
            answer_marker=prm.get("answer_marker", "the answer is"),
            stop_sequences=tuple(prm.get("stop_sequences", ())),
            gateway=gateway,
            entities=entities,
            concurrency=ev.get("concurrency", 1),
            seed=raw.get("seed", 0),
            log_level=raw.get("log_level", "WARNING"),
        )
        cfg.policy(Policy.DRAD)  # validates k / m / tpr_threshold
    except (TypeError, ValueError, OSError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.budget < 1:
        raise ConfigError("policy.budget must be >= 1")
    if cfg.concurrency < 1:
        raise ConfigError("eval.concurrency must be >= 1")
    return cfg


def default_config_text() -> str:
    return resources.files("drad").joinpath("data/default.toml").read_text(encoding="utf-8")
