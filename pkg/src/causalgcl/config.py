"""Pipeline configuration: a sectioned ``key = value`` file.

Grammar (``configparser`` INI dialect)::

    [section]
    key = value        ; comments start with ';' or '#'

Sections and keys are fixed by ``SCHEMA``; an unknown section or key is an
error, as is a missing required key. Relative paths are resolved against
the directory holding the config file. Booleans accept true/false/yes/no/1/0.
"""
from __future__ import annotations

import configparser
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

from .contrastive import TrainConfig
from .errors import ConfigError
from .graph import FORMATS
from .invariant import Stage1Config
from .splits import SplitSpec

REQUIRED = object()


def _fraction(v):
    return 0 < v < 1


def _positive(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _finite_nonneg(v):
    return math.isfinite(v) and v >= 0


# section -> key -> (type, default, check, help)
SCHEMA: dict[str, dict[str, tuple]] = {
    "data": {
        "format": (str, "tsv", lambda v: v in FORMATS, "movielens-dat or tsv"),
        "header": (bool, False, None, "tsv files start with a header row"),
        "interactions": ("path", None, None, "interaction log (temporal/popularity splits)"),
        "train": ("path", None, None, "training interactions (exposure split)"),
        "test": ("path", None, None, "test interactions (exposure split)"),
        "catalog": ("path", None, None, "item<TAB>title file used in prompts"),
        "labels": ("path", None, None, "user<TAB>item<TAB>causal|spurious table for the mock oracle"),
        "factors": ("path", None, None, "latent factor table for mock ADD decisions"),
    },
    "split": {
        "kind": (str, REQUIRED, lambda v: v in ("temporal", "popularity", "exposure"),
                 "temporal, popularity or exposure"),
        "train_frac": (float, 0.6, _fraction, "temporal: oldest fraction used for training"),
        "test_frac": (float, 0.2, _fraction, "fraction sent to test"),
    },
    "model": {
        "dim": (int, 64, _positive, "embedding width d"),
        "layers": (int, 3, _nonneg, "propagation layers L"),
    },
    "stage1": {
        "epochs": (int, 100, _positive, "generator epochs j"),
        "lr": (float, 1e-4, _positive, "gradient step"),
        "tau": (float, 0.7, lambda v: 0 < v <= 1, "invariant fraction"),
        "num_envs": (int, 4, _positive, "environments K"),
        "alpha": (float, 0.1, _finite_nonneg, "gradient-variance weight"),
        "beta": (float, 1.0, _finite_nonneg, "score-loss weight"),
        "env_refresh": (int, 0, _nonneg, "re-cluster every N epochs (0: once)"),
    },
    "edit": {
        "backend": (str, "mock", lambda v: v in ("mock", "http"), "mock or http"),
        "base_url": (str, "", None, "OpenAI-compatible endpoint root"),
        "model": (str, "default", None, "model name sent to the endpoint"),
        "api_key_env": (str, "OPENAI_API_KEY", None, "environment variable holding the API key"),
        "k": (int, 0, _nonneg, "candidates per side (0: ceil(frac * |E|))"),
        "frac": (float, 0.05, _fraction, "candidate fraction when k = 0"),
        "max_workers": (int, 4, _positive, "requests in flight"),
        "retries": (int, 3, _nonneg, "retries per request"),
        "backoff": (float, 1.0, _nonneg, "first retry delay in seconds, doubled per retry"),
        "timeout": (float, 30.0, _positive, "seconds per request"),
        "cache": ("path", None, None, "decision cache (default: <output>/decision_cache.jsonl)"),
        "propose_additions": (bool, False, None, "ask the adjudicator for new edges"),
        "per_user_limit": (int, 0, _nonneg, "addition candidates per user"),
    },
    "train": {
        "epochs": (int, 100, _positive, "main training epochs k"),
        "batch_size": (int, 256, _positive, "BPR triples per step"),
        "lr": (float, 1e-4, _positive, "gradient step"),
        "lam": (float, 0.05, _finite_nonneg, "BPR weight lambda"),
        "temperature": (float, 0.2, _positive, "contrastive temperature"),
        "negatives": (str, "batch", lambda v: v in ("batch", "typed"), "in-batch negative pool"),
        "backbone": (bool, False, None, "also train the BPR-only backbone for comparison"),
    },
    "eval": {
        "k": (int, 10, _positive, "cut-off K"),
        "projection": (bool, True, None, "export 2-D item coordinates"),
    },
    "run": {
        "seed": (int, 0, None, "global seed"),
        "output": ("path", REQUIRED, None, "output directory"),
        "deterministic": (bool, True, None, "logical clock and no wall-time columns"),
    },
}

# sections whose values each stage depends on (besides its input files)
STAGE_SECTIONS = {
    "split": ("data", "split"),
    "scores": ("model", "stage1"),
    "adjudicate": ("edit",),
    "train": ("model", "train"),
    "evaluate": ("model", "eval"),
}


def _coerce(section, key, kind, raw: str, base: Path):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind == "path":
            p = Path(raw.strip()).expanduser()
            return p if p.is_absolute() else (base / p)
        if kind is int:
            return int(raw.strip())
        if kind is float:
            return float(raw.strip())
        return raw.strip()
    except ValueError:
        name = "boolean" if kind is bool else getattr(kind, "__name__", kind)
        raise ConfigError(f"[{section}] {key}: cannot read {raw!r} as {name}") from None


@dataclass(frozen=True)
class PipelineConfig:
    values: dict  # section -> key -> value
    source: Path | None = None

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    @property
    def output(self) -> Path:
        return Path(self.values["run"]["output"])

    def override(self, section: str, **kw) -> "PipelineConfig":
        vals = {s: dict(v) for s, v in self.values.items()}
        for key, value in kw.items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key [{section}] {key}")
            vals[section][key] = value
        _validate(vals)
        return PipelineConfig(vals, self.source)

    def split_spec(self) -> SplitSpec:
        s = self.values["split"]
        return SplitSpec(s["kind"], s["train_frac"], s["test_frac"], self.seed)

    def stage1_config(self) -> Stage1Config:
        s, m = self.values["stage1"], self.values["model"]
        return Stage1Config(alpha=s["alpha"], beta=s["beta"], epochs=s["epochs"], lr=s["lr"], tau=s["tau"],
                            num_envs=s["num_envs"], layers=m["layers"], dim=m["dim"], seed=self.seed,
                            env_refresh=s["env_refresh"])

    def train_config(self) -> TrainConfig:
        t, m = self.values["train"], self.values["model"]
        return TrainConfig(lam=t["lam"], temperature=t["temperature"], batch_size=t["batch_size"],
                           epochs=t["epochs"], lr=t["lr"], seed=self.seed, layers=m["layers"], dim=m["dim"],
                           negatives=t["negatives"])

    def section_hash(self, sections) -> str:
        """Hash of the named sections plus the seed; file paths are left out (inputs are hashed by content)."""
        payload = {s: {k: v for k, v in self.values[s].items() if SCHEMA[s][k][0] != "path"} for s in sections}
        payload["seed"] = self.seed
        return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()

    def config_hash(self) -> str:
        return self.section_hash(tuple(SCHEMA))


def defaults() -> dict:
    return {s: {k: spec[1] for k, spec in keys.items() if spec[1] is not REQUIRED} for s, keys in SCHEMA.items()}


def _validate(vals: dict) -> None:
    for section, keys in SCHEMA.items():
        for key, (kind, default, check, _) in keys.items():
            if key not in vals[section]:
                raise ConfigError(f"missing required field [{section}] {key}")
            v = vals[section][key]
            if check is not None and v is not None and not check(v):
                raise ConfigError(f"[{section}] {key} = {v!r} is out of range ({SCHEMA[section][key][3]})")
    kind = vals["split"]["kind"]
    need = ("train", "test") if kind == "exposure" else ("interactions",)
    for key in need:
        if vals["data"].get(key) is None:
            raise ConfigError(f"missing required field [data] {key} (needed by the {kind} split)")
    if vals["split"]["train_frac"] + vals["split"]["test_frac"] > 1 + 1e-12:
        raise ConfigError("[split] train_frac + test_frac must not exceed 1")
    if vals["edit"]["backend"] == "http" and not vals["edit"]["base_url"]:
        raise ConfigError("missing required field [edit] base_url (needed by the http backend)")


def parse_config(text: str, base_dir=".", source=None) -> PipelineConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None,
                                       default_section="__no_defaults__")
    parser.optionxform = str  # keys are case-sensitive
    try:
        parser.read_string(text, source=str(source or "<config>"))
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    base = Path(base_dir)
    vals = defaults()
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key [{section}] {key}")
            vals[section][key] = _coerce(section, key, SCHEMA[section][key][0], raw, base)
    _validate(vals)
    return PipelineConfig(vals, Path(source) if source else None)


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), path.parent, path)


def check_paths(cfg: PipelineConfig) -> None:
    """Every configured input file must exist before a run starts."""
    for key, (kind, *_rest) in SCHEMA["data"].items():
        p = cfg["data"][key]
        if kind == "path" and p is not None and not Path(p).is_file():
            raise ConfigError(f"[data] {key}: file not found: {p}")
    cache = cfg["edit"]["cache"]
    if cache is not None and not Path(cache).parent.is_dir():
        raise ConfigError(f"[edit] cache: directory not found: {Path(cache).parent}")


def render_config(values: dict) -> str:
    """Inverse of ``parse_config`` for values holding plain types and paths."""
    out = []
    for section, keys in SCHEMA.items():
        lines = []
        for key in keys:
            v = values.get(section, {}).get(key)
            if v is None:
                continue
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{key} = {v}")
        if lines:
            out.append(f"[{section}]")
            out.extend(lines)
            out.append("")
    return "\n".join(out)
