"""Run configuration: flat ``dotted.key = value`` files, presets and validation.

Resolution order is defaults, then preset, then file, then command-line
overrides.  ``RunConfig.resolved_text`` echoes every key so a run can be
reproduced from its own ``config.resolved``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
import hashlib
from pathlib import Path
from typing import Optional

from .errors import InvalidConfig
from .hjb import HjbParams
from .kernels import InteractionKernel
from .kinetic import InstantaneousFeedback
from .sparse_feedback import ControlBox, Penalty

CONTROLS = ("none", "ic-l1", "ic-l2", "ih-l1", "ih-l2")
KERNELS = ("bounded_confidence", "attraction_repulsion", "constant", "zero")

# kernel entries are fixed by the preset, the rest are defaults
PRESETS = {
    "hk": {"fixed": {"kernel.type": "bounded_confidence", "kernel.delta": 0.4},
           "defaults": {"gamma_bar": 0.3, "lambda": 0.05, "T": 40.0}},
    "ar": {"fixed": {"kernel.type": "attraction_repulsion", "kernel.a": 1.0,
                     "kernel.b": -1.0, "kernel.sigma": 1e-4},
           "defaults": {"gamma_bar": 0.25, "lambda": 0.1, "T": 10.0}},
    "custom": {"fixed": {}, "defaults": {}},
}

PAPER_SCALE = {"n_samples": 500_000, "epsilon": 5e-5}


@dataclass(frozen=True)
class RunConfig:
    preset: str = "custom"
    kernel_type: str = "bounded_confidence"
    kernel_delta: float = 0.4
    kernel_smoothing: float = 0.02
    kernel_a: float = 1.0
    kernel_b: float = -1.0
    kernel_sigma: float = 1e-4
    control: str = "none"
    control_target: float = 0.0
    control_u_min: float = -1.0
    control_u_max: float = 1.0
    control_dt: Optional[float] = None
    gamma_bar: float = 0.3
    lambda_: float = 0.05
    epsilon: float = 1e-3
    T: float = 40.0
    n_samples: int = 20_000
    seed: int = 0
    omega_min: float = -1.0
    omega_max: float = 1.0
    dx: float = 0.025
    hjb_n_nodes: int = 101
    hjb_n_controls: int = 21
    hjb_dt: float = 0.1
    hjb_tol: float = 1e-6
    hjb_max_policy_iters: int = 200
    output_n_frames: int = 100
    output_emit_svg: bool = True
    output_checkpoint_every: int = 0
    run_max_steps: int = 0

    def __post_init__(self):
        self.validate()

    # -- keys ---------------------------------------------------------------
    @staticmethod
    def key_of(attr: str) -> str:
        if attr == "lambda_":
            return "lambda"
        for prefix in ("kernel", "control", "omega", "hjb", "output", "run"):
            if attr.startswith(prefix + "_"):
                return prefix + "." + attr[len(prefix) + 1:]
        return attr

    @classmethod
    def attr_of(cls, key: str) -> str:
        for f in fields(cls):
            if cls.key_of(f.name) == key:
                return f.name
        raise InvalidConfig(key, "unknown key")

    # -- validation ---------------------------------------------------------
    def validate(self) -> None:
        def need(cond, key, reason):
            if not cond:
                raise InvalidConfig(key, reason)

        need(self.preset in PRESETS, "preset", f"must be one of {sorted(PRESETS)}")
        need(self.kernel_type in KERNELS, "kernel.type", f"must be one of {KERNELS}")
        need(self.control in CONTROLS, "control", f"must be one of {CONTROLS}")
        need(self.kernel_delta > 0, "kernel.delta", "must be positive")
        need(self.kernel_smoothing >= 0, "kernel.smoothing", "must be >= 0")
        need(self.kernel_sigma > 0, "kernel.sigma", "must be positive")
        need(self.control_u_min < self.control_u_max, "control.u_min",
             "must be below control.u_max")
        need(self.control_u_min <= 0 <= self.control_u_max, "control.u_min",
             "zero control must be admissible")
        need(self.control_dt is None or self.control_dt > 0, "control.dt",
             "must be positive or auto")
        need(self.gamma_bar >= 0, "gamma_bar", "must be >= 0")
        need(self.lambda_ > 0, "lambda", "must be positive")
        need(self.epsilon > 0, "epsilon", "must be positive")
        need(self.T > 0, "T", "must be positive")
        need(round(self.T / self.epsilon) >= 1, "T", "shorter than one step")
        need(self.n_samples >= 2, "n_samples", "must be at least 2")
        need(self.omega_min < self.omega_max, "omega.min", "must be below omega.max")
        need(self.omega_min <= self.control_target <= self.omega_max, "control.target",
             "must lie in omega")
        need(self.dx > 0, "dx", "must be positive")
        need(self.hjb_n_nodes >= 2, "hjb.n_nodes", "must be at least 2")
        need(self.hjb_n_controls >= 1 and self.hjb_n_controls % 2 == 1,
             "hjb.n_controls", "must be odd")
        need(self.hjb_dt > 0, "hjb.dt", "must be positive")
        need(self.hjb_tol > 0, "hjb.tol", "must be positive")
        need(self.hjb_max_policy_iters >= 1, "hjb.max_policy_iters", "must be >= 1")
        need(self.output_n_frames >= 1, "output.n_frames", "must be >= 1")
        need(self.output_checkpoint_every >= 0, "output.checkpoint_every", "must be >= 0")
        need(self.run_max_steps >= 0, "run.max_steps", "must be >= 0")
        for key, value in PRESETS[self.preset]["fixed"].items():
            need(getattr(self, self.attr_of(key)) == value, key,
                 f"fixed to {value} by preset {self.preset}")

    # -- derived objects ----------------------------------------------------
    @property
    def omega(self) -> tuple[float, float]:
        return (self.omega_min, self.omega_max)

    @property
    def box(self) -> ControlBox:
        return ControlBox(self.control_u_min, self.control_u_max)

    @property
    def penalty(self) -> Optional[Penalty]:
        return None if self.control == "none" else Penalty(self.control[3:])

    def kernel(self) -> InteractionKernel:
        if self.kernel_type == "bounded_confidence":
            return InteractionKernel.bounded_confidence(self.kernel_delta,
                                                        self.kernel_smoothing)
        if self.kernel_type == "attraction_repulsion":
            return InteractionKernel.attraction_repulsion(self.kernel_a, self.kernel_b,
                                                          self.kernel_sigma)
        if self.kernel_type == "constant":
            return InteractionKernel.constant()
        return InteractionKernel.zero()

    def instantaneous(self) -> InstantaneousFeedback:
        if self.penalty is None:
            raise InvalidConfig("control", "no penalty for control 'none'")
        return InstantaneousFeedback(self.gamma_bar, self.lambda_, self.control_target,
                                     self.penalty, self.box, self.control_dt)

    def hjb_params(self) -> HjbParams:
        return HjbParams(lam=self.lambda_, gamma_bar=self.gamma_bar, penalty=self.penalty,
                         dt=self.hjb_dt, target=self.control_target,
                         n_controls=self.hjb_n_controls, tol=self.hjb_tol,
                         max_policy_iters=self.hjb_max_policy_iters)

    def hjb_hash(self) -> str:
        """Content hash of every input that shapes the feedback table."""
        keys = [k for k in self.as_dict() if k.startswith(("kernel.", "hjb.", "omega."))
                and k != "hjb.max_policy_iters"]
        keys += ["control.target", "control.u_min", "control.u_max",
                 "gamma_bar", "lambda"]
        d = self.as_dict()
        blob = "\n".join(f"{k}={d[k]!r}" for k in sorted(keys))
        blob += f"\npenalty={self.penalty.value if self.penalty else None}"
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    # -- text round trip ----------------------------------------------------
    def as_dict(self) -> dict:
        return {self.key_of(f.name): getattr(self, f.name) for f in fields(self)}

    def resolved_text(self) -> str:
        lines = []
        for key, value in self.as_dict().items():
            if value is None:
                value = "auto"
            elif isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def _coerce(key: str, raw, kind):
    if raw is None or isinstance(raw, kind):
        return raw
    text = str(raw).strip()
    try:
        if kind is bool:
            if text.lower() in ("true", "yes", "1", "on"):
                return True
            if text.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            try:
                return int(text)
            except ValueError:
                pass
            # accept integral floats such as "2e4"
            as_float = float(text)
            if as_float != int(as_float):
                raise ValueError(text)
            return int(as_float)
        if kind is float:
            return float(text)
    except ValueError:
        raise InvalidConfig(key, f"cannot parse {text!r} as {kind.__name__}") from None
    return text


_TYPES = {"control_dt": float}


def _field_type(f) -> type:
    if f.name in _TYPES:
        return _TYPES[f.name]
    return {"float": float, "int": int, "bool": bool, "str": str}[f.type]


def parse_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    entries = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"{source}:{lineno}", "expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        RunConfig.attr_of(key)
        entries[key] = value
    return entries


def build_config(entries: Optional[dict] = None, **overrides) -> RunConfig:
    """Resolve defaults, preset, file entries and overrides (dotted keys)."""
    merged = dict(entries or {})
    merged.update({k: v for k, v in overrides.items() if v is not None})
    preset = str(merged.get("preset", "custom")).strip()
    if preset not in PRESETS:
        raise InvalidConfig("preset", f"must be one of {sorted(PRESETS)}")
    values = dict(PRESETS[preset]["defaults"])
    values.update(PRESETS[preset]["fixed"])
    for key, value in merged.items():
        if key in PRESETS[preset]["fixed"]:
            fixed = PRESETS[preset]["fixed"][key]
            coerced = _coerce(key, value, type(fixed))
            if coerced != fixed:
                raise InvalidConfig(key, f"fixed to {fixed} by preset {preset}")
        values[key] = value
    kwargs = {}
    by_name = {f.name: f for f in fields(RunConfig)}
    for key, value in values.items():
        name = RunConfig.attr_of(key)
        if name == "control_dt" and str(value).strip().lower() in ("auto", "none"):
            kwargs[name] = None
            continue
        kwargs[name] = _coerce(key, value, _field_type(by_name[name]))
    return RunConfig(**kwargs)


def load_config(path, **overrides) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InvalidConfig(str(path), f"cannot read: {exc.strerror}") from exc
    return build_config(parse_text(text, str(path)), **overrides)


def with_paper_scale(config: RunConfig) -> RunConfig:
    return replace(config, **PAPER_SCALE)
