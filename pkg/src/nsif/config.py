"""Run configuration, JSON config files and provenance hashing."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from nsif.agents import AgentConfig, ConfigError

# keys that change how fast a run goes but never what it produces
_NOT_HASHED = ("workers",)


@dataclass
class RunConfig:
    seed: int = 0
    n_train: int = 2000
    n_valid_seen: int = 200
    n_valid_unseen: int = 200
    K: int = 3
    budget: int = 50
    workers: int = 1
    agent: AgentConfig = field(default_factory=AgentConfig)

    def validate(self) -> "RunConfig":
        for name in ("n_train", "n_valid_seen", "n_valid_unseen", "K", "budget", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        self.agent.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        agent = AgentConfig.from_dict(d.pop("agent", {}))
        try:
            return cls(agent=agent, **d).validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data)

    def merged(self, overrides: Optional[dict]) -> "RunConfig":
        """A copy with top-level and ``agent`` keys from ``overrides`` applied."""
        d = self.to_dict()
        for key, value in (overrides or {}).items():
            if key == "agent":
                d["agent"].update(value)
            else:
                d[key] = value
        return RunConfig.from_dict(d)

    def hash(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in _NOT_HASHED}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def provenance(self) -> dict:
        return {"config_hash": self.hash(), "seed": self.seed}
