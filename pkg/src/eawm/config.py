"""Run configuration: line-based ``section.key = value`` files with ``#`` comments."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

from .agent import ReturnConfig
from .envs import ENVS
from .errors import ConfigError, ContractViolation
from .events import NOMINAL, ORDINAL, VISUAL, ModalityConfig
from .losses import GesVariant
from .world_model import WorldModelConfig


@dataclass
class RunSection:
    env: str = "bouncing_ball"
    seed: int = 0
    total_steps: int = 50_000
    eval_interval: int = 10_000
    eval_episodes: int = 10
    train_every: int = 1
    prefill: int = 1000
    batch_size: int = 8
    seq_len: int = 16
    replay_capacity: int = 1_000_000
    max_episode_steps: int = 200


@dataclass
class EventSection:
    visual_mode: str = "agmm"
    agmm_components: int = 3
    agmm_learning_rate: float = 0.05
    agmm_weight_floor: float = 0.05
    agmm_initial_variance: float = (15 / 255) ** 2
    visual_threshold: float = 16.0
    visual_ges_threshold: float = 0.5
    visual_weight: float = 1.0
    ordinal_threshold: float = 0.1
    ordinal_ges_threshold: float = 1.0
    ordinal_weight: float = 0.1
    nominal_ges_threshold: float = 0.5
    nominal_weight: float = 0.1

    def agmm_params(self):
        return dict(K=self.agmm_components, learning_rate=self.agmm_learning_rate,
                    weight_floor=self.agmm_weight_floor,
                    initial_variance=self.agmm_initial_variance)


@dataclass
class GesSection:
    kind: str = "indicator"
    smoothing: float = 0.0005


@dataclass
class AgentSection(ReturnConfig):
    hidden: int = 64
    normalize_returns: bool = True


@dataclass
class AblationSection:
    disable_event_predictor: bool = False
    disable_ges: bool = False
    reconstruct_instead_of_predict: bool = False


_WM_FIELDS = ("deter", "hidden", "z_num", "z_class", "unimix", "free_bits", "kl_dyn", "kl_rep",
              "reward_bins", "bin_extent", "lr", "grad_clip", "beta_o", "beta_e", "omega",
              "focal_alpha", "focal_gamma")


@dataclass
class WorldModelSection:
    deter: int = 64
    hidden: int = 64
    z_num: int = 8
    z_class: int = 8
    unimix: float = 0.01
    free_bits: float = 1.0
    kl_dyn: float = 0.5
    kl_rep: float = 0.1
    reward_bins: int = 41
    bin_extent: float = 8.0
    lr: float = 1e-4
    grad_clip: float = 1000.0
    beta_o: float = 1.0
    beta_e: float = 0.5
    omega: float = 0.5
    focal_alpha: float = 0.15
    focal_gamma: float = 4.0


SECTIONS = {
    "run": RunSection,
    "world_model": WorldModelSection,
    "agent": AgentSection,
    "ges": GesSection,
    "events": EventSection,
    "ablation": AblationSection,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    world_model: WorldModelSection = field(default_factory=WorldModelSection)
    agent: AgentSection = field(default_factory=AgentSection)
    ges: GesSection = field(default_factory=GesSection)
    events: EventSection = field(default_factory=EventSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    def __post_init__(self):
        validate(self)

    # derived component configs

    def world_model_config(self):
        kw = {k: getattr(self.world_model, k) for k in _WM_FIELDS}
        if self.ablation.disable_event_predictor:
            kw["beta_e"] = 0.0
        return WorldModelConfig(**kw, ges_kind=self.ges.kind, ges_smoothing=self.ges.smoothing,
                                use_ges=not self.ablation.disable_ges,
                                reconstruct=self.ablation.reconstruct_instead_of_predict)

    def return_config(self):
        names = {f.name for f in fields(ReturnConfig)}
        return ReturnConfig(**{k: v for k, v in dataclasses.asdict(self.agent).items() if k in names})

    def ges_variant(self):
        return GesVariant(self.ges.kind, self.ges.smoothing)

    def modality_configs(self, env):
        """The env's modalities with thresholds and weights taken from this config."""
        ev = self.events
        out = []
        for m in env.modalities:
            if m.kind == VISUAL:
                kw = dict(event_threshold=ev.visual_threshold, ges_threshold=ev.visual_ges_threshold,
                          event_loss_weight=ev.visual_weight)
            elif m.kind == ORDINAL:
                kw = dict(event_threshold=ev.ordinal_threshold, ges_threshold=ev.ordinal_ges_threshold,
                          event_loss_weight=ev.ordinal_weight)
            else:
                kw = dict(ges_threshold=ev.nominal_ges_threshold, event_loss_weight=ev.nominal_weight)
            out.append(dataclasses.replace(m, **kw))
        return tuple(out)


def validate(cfg):
    """Check cross-field constraints; raises :class:`ConfigError` naming the key."""
    r = cfg.run
    if r.env not in ENVS:
        raise ConfigError(f"run.env: unknown environment {r.env!r}")
    for key in ("total_steps", "eval_episodes", "prefill"):
        if getattr(r, key) < 0:
            raise ConfigError(f"run.{key} must be non-negative")
    for key in ("eval_interval", "train_every", "batch_size", "seq_len", "replay_capacity",
                "max_episode_steps"):
        if getattr(r, key) <= 0:
            raise ConfigError(f"run.{key} must be positive")
    if cfg.events.visual_mode not in ("agmm", "primitive"):
        raise ConfigError(f"events.visual_mode must be 'agmm' or 'primitive'")
    checks = [
        ("world_model", cfg.world_model_config),
        ("agent", cfg.return_config),
        ("ges", cfg.ges_variant),
    ]
    for section, build in checks:
        try:
            build()
        except (ContractViolation, TypeError) as exc:
            raise ConfigError(f"{section}: {exc}") from None
    ev = cfg.events
    try:
        ModalityConfig(0, VISUAL, 1, ev.visual_threshold, ev.visual_ges_threshold, ev.visual_weight)
        ModalityConfig(0, ORDINAL, 1, ev.ordinal_threshold, ev.ordinal_ges_threshold,
                       ev.ordinal_weight, value_range=(1.0,))
        ModalityConfig(0, NOMINAL, 1, 1.0, ev.nominal_ges_threshold, ev.nominal_weight, num_classes=2)
    except ContractViolation as exc:
        raise ConfigError(f"events: {exc}") from None
    if not 0 < ev.agmm_learning_rate <= 1 or not 0 <= ev.agmm_weight_floor < 1:
        raise ConfigError("events.agmm_learning_rate / events.agmm_weight_floor out of range")
    if ev.agmm_components < 1 or ev.agmm_initial_variance <= 0:
        raise ConfigError("events.agmm_components / events.agmm_initial_variance must be positive")


def _coerce(key, text, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text.replace("_", ""))
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None


def parse_config(text, overrides=None):
    """Parse config text into a :class:`RunConfig`; unknown keys raise :class:`ConfigError`."""
    values = {name: {} for name in SECTIONS}
    lines = list(text.splitlines()) + [f"{k} = {v}" for k, v in (overrides or {}).items()]
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"{key}: keys must be written as section.key")
        section, name = key.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"{key}: unknown section {section!r}")
        defaults = {f.name: f.default for f in fields(SECTIONS[section])}
        if name not in defaults:
            raise ConfigError(f"{key}: unknown key")
        values[section][name] = _coerce(key, val, defaults[name])
    built = {}
    for s, v in values.items():
        try:
            built[s] = SECTIONS[s](**v)
        except ContractViolation as exc:
            raise ConfigError(f"{s}: {exc}") from None
    return RunConfig(**built)


def load_config(path, overrides=None):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, overrides)


def config_text(cfg):
    """Full snapshot of every key; parsing it gives back an equal config."""
    lines = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in fields(obj):
            lines.append(f"{section}.{f.name} = {getattr(obj, f.name)!r}".replace("'", ""))
        lines.append("")
    return "\n".join(lines)
