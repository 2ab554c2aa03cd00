"""Scenario configuration.

A scenario document names a canned task (1 to 5) or a benchmark
condition and the knobs around it: plant noise and perturbation, trial
count, seed, time mode, output directory.  Controllet descriptors are
optional; when absent the task factory supplies the published defaults,
when present they are built instead of the factory's controllet and the
``active`` list says which of them start enabled.

The format is the shared key-value document (see kvdoc); every key is
schema checked and unknown keys are rejected with their line number.

    scenario:
      task: 4
      trials: 5
      seed: 0
      time: virtual
    plant:
      noise: default
      perturb: default

Exactly one of ``task`` and ``condition`` must be present.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import dynamics, kvdoc, model as model_io
from .controllets import (KINDS, AvoidanceConfig, CartesianGains, ContactGate,
                          ForceGains, JointGains, NullspaceGains, TankConfig)
from .plant import NoiseConfig
from .trajectories import CONDITIONS

TIME_MODES = ("virtual", "wall")

_CARTESIAN_KINDS = ("cartesian_impedance", "coupled_impedance", "unified_force")


@dataclass
class ControlletSpec:
    """One configured controllet: kind, owned robots, plain param tree.

    ``params`` keeps the schema-shaped values (floats, lists, nested
    dicts) so a spec can be re-emitted verbatim into a run snapshot;
    ``build_kwargs`` materializes the gain objects for Manager.build."""

    name: str
    kind: str
    robots: tuple[int, ...]
    params: dict = field(default_factory=dict)

    def build_kwargs(self) -> dict:
        p = self.params
        kw: dict = {}
        if "avoidance" in p:
            kw["avoidance"] = AvoidanceConfig(**p["avoidance"])
        if "singularity" in p:
            kw["singularity"] = dynamics.SingularityAvoidance(**p["singularity"])
        if self.kind == "joint_impedance":
            if "stiffness" in p or "damping" in p:
                kw["gains"] = JointGains(
                    stiffness=np.asarray(p.get("stiffness",
                                               JointGains().stiffness)),
                    damping=None if "damping" not in p else np.asarray(p["damping"]))
        elif self.kind in _CARTESIAN_KINDS:
            if "stiffness" in p or "damping" in p:
                kw["gains"] = CartesianGains(
                    stiffness=np.asarray(p.get("stiffness",
                                               CartesianGains().stiffness)),
                    damping=None if "damping" not in p else np.asarray(p["damping"]))
            if "nullspace" in p:
                ns = dict(p["nullspace"])
                if "posture" in ns:
                    ns["posture"] = np.asarray(ns["posture"])
                kw["nullspace"] = NullspaceGains(**ns)
            for flag in ("use_nullspace", "feedforward"):
                if flag in p:
                    kw[flag] = p[flag]
            if self.kind == "unified_force":
                if "force" in p:
                    kw["force_gains"] = ForceGains(**p["force"])
                if "tank" in p:
                    kw["tank"] = TankConfig(**p["tank"])
                if "gate" in p:
                    kw["gate"] = ContactGate(**p["gate"])
        return kw


@dataclass
class ScenarioConfig:
    task: int | None = None
    condition: str | None = None
    duration: float | None = None       # None: 10 s tasks, 30 s benchmarks
    trials: int | None = None           # None: 5 tasks, 1 benchmarks
    seed: int = 0
    time_mode: str = "virtual"
    out_dir: str | None = None
    robots: tuple[int, ...] | None = None
    model_paths: tuple[str, ...] = ()
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    perturb_factors: dict[int, dict] | str = "default"   # or "none" / explicit
    delay_ticks: int = 0
    controllets: tuple[ControlletSpec, ...] = ()
    active: tuple[str, ...] = ()

    def __post_init__(self):
        if (self.task is None) == (self.condition is None):
            raise ValueError("exactly one of task and condition must be set")
        if self.task is not None and self.task not in range(1, 6):
            raise ValueError(f"task must be 1..5, got {self.task}")
        if self.condition is not None and self.condition not in CONDITIONS:
            raise ValueError(f"condition must be one of {CONDITIONS}")
        if self.time_mode not in TIME_MODES:
            raise ValueError(f"time mode must be one of {TIME_MODES}")
        if self.duration is not None and not self.duration > 0.0:
            raise ValueError("duration must be positive")
        if self.trials is not None and self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.delay_ticks < 0:
            raise ValueError("delay_ticks must be >= 0")
        if self.robots is None:
            self.robots = (0,) if (self.task in (1, 2, 3, 4)) else (0, 1)
        else:
            self.robots = tuple(int(r) for r in self.robots)
        need_two = self.task == 5 or self.condition is not None
        if need_two and len(self.robots) != 2:
            raise ValueError("this scenario runs exactly 2 robots")
        if not need_two and len(self.robots) != 1:
            raise ValueError("this scenario runs exactly 1 robot")
        if self.model_paths and len(self.model_paths) not in (1, len(self.robots)):
            raise ValueError("model paths: give one, or one per robot")
        names = [c.name for c in self.controllets]
        if len(set(names)) != len(names):
            raise ValueError("duplicate controllet name")
        owned = set(self.robots)
        for c in self.controllets:
            if c.kind not in KINDS:
                raise ValueError(f"unknown controllet kind {c.kind!r}")
            if not set(c.robots) <= owned:
                raise ValueError(f"controllet {c.name!r} references a robot "
                                 "outside the scenario")
        for a in self.active:
            if a not in names:
                raise ValueError(f"active controllet {a!r} is not defined")
        if self.controllets and not self.active:
            self.active = tuple(names)

    # -- derived -----------------------------------------------------------

    @property
    def mode(self) -> str:
        return "task" if self.task is not None else "benchmark"

    def resolved_duration(self) -> float:
        if self.duration is not None:
            return float(self.duration)
        return 10.0 if self.mode == "task" else 30.0

    def resolved_trials(self) -> int:
        if self.trials is not None:
            return int(self.trials)
        return 5 if self.mode == "task" else 1

    def load_models(self) -> list:
        """Base hardware model per robot (bases are placed by the scene)."""
        if not self.model_paths:
            base = model_io.builtin()
            return [base for _ in self.robots]
        loaded = [model_io.load(p) for p in self.model_paths]
        if len(loaded) == 1:
            loaded = loaded * len(self.robots)
        ns = {m.n for m in loaded}
        if len(ns) != 1:
            raise ValueError("model files disagree on the chain length")
        return loaded

    def spawn_seed(self, *key: int) -> int:
        """Stable per-(trial, robot, role) stream derived from the seed."""
        ss = np.random.SeedSequence((self.seed,) + key)
        return int(ss.generate_state(1)[0])


# -- parsing ---------------------------------------------------------------


def _float_list(view: kvdoc.View, key: str) -> list[float]:
    toks = view.tokens(key)
    out = []
    for t in toks:
        try:
            out.append(float(t))
        except ValueError:
            raise kvdoc.DocError(view.line,
                                 f"'{key}': {t!r} is not a number") from None
    return out


def _section_floats(view: kvdoc.View, keys: tuple[str, ...],
                    lists: tuple[str, ...] = ()) -> dict:
    out = {}
    for k in keys:
        if view.has(k):
            out[k] = view.float(k)
    for k in lists:
        if view.has(k):
            out[k] = _float_list(view, k)
    view.finish()
    return out


def _parse_noise(view: kvdoc.View) -> NoiseConfig:
    if not view.has("noise"):
        return NoiseConfig()
    if not view.is_section("noise"):
        word = view.str("noise")
        if word == "default":
            return NoiseConfig()
        if word == "none":
            return NoiseConfig.silent()
        raise kvdoc.DocError(view.line_of("noise"),
                             "noise must be none, default or a section")
    sub = view.section("noise")
    cfg = NoiseConfig(q=sub.float("q", default=NoiseConfig.q),
                      qd=sub.float("qd", default=NoiseConfig.qd),
                      tau=sub.float("tau", default=NoiseConfig.tau),
                      wrench=sub.float("wrench", default=NoiseConfig.wrench))
    sub.finish()
    return cfg


def _parse_perturb(view: kvdoc.View):
    if not view.has("perturb"):
        return "default"
    if not view.is_section("perturb"):
        word = view.str("perturb")
        if word in ("default", "none"):
            return word
        raise kvdoc.DocError(view.line_of("perturb"),
                             "perturb must be none, default or a section")
    sub = view.section("perturb")
    factors: dict[int, dict] = {}
    for key in sub.keys():
        line = sub.line_of(key)
        if not key.startswith("link"):
            raise kvdoc.DocError(line, f"perturb entries are linkN, got {key!r}")
        try:
            link = int(key[4:]) - 1          # link4 is the fourth link
        except ValueError:
            raise kvdoc.DocError(line,
                                 f"perturb entries are linkN, got {key!r}") from None
        toks = sub.tokens(key)
        spec: dict = {}
        i = 0
        while i < len(toks):
            fname = toks[i]
            width = {"mass": 1, "com": 3, "inertia": 3}.get(fname)
            if width is None:
                raise kvdoc.DocError(line,
                                     f"unknown perturbation field {fname!r}")
            vals = toks[i + 1:i + 1 + width]
            if len(vals) != width:
                raise kvdoc.DocError(line, f"{fname} needs {width} factor(s)")
            try:
                nums = [float(v) for v in vals]
            except ValueError:
                raise kvdoc.DocError(line,
                                     f"{fname}: factors must be numbers") from None
            spec[fname] = nums[0] if width == 1 else nums
            i += 1 + width
        factors[link] = spec
    sub.finish()
    return factors


def _parse_controllet(name: str, view: kvdoc.View) -> ControlletSpec:
    kind = view.str("kind")
    if kind not in KINDS:
        raise kvdoc.DocError(view.line, f"unknown controllet kind {kind!r}")
    robots = tuple(int(t) for t in view.tokens("robots"))
    params: dict = {}
    if view.has("avoidance"):
        params["avoidance"] = _section_floats(
            view.section("avoidance"), ("gain", "margin"))
    if view.has("singularity"):
        params["singularity"] = _section_floats(
            view.section("singularity"), ("gain", "threshold", "fd_step"))
    if kind == "joint_impedance":
        for k in ("stiffness", "damping"):
            if view.has(k):
                params[k] = _float_list(view, k)
    else:
        for k in ("stiffness", "damping"):
            if view.has(k):
                vals = _float_list(view, k)
                if len(vals) != 6:
                    raise kvdoc.DocError(view.line, f"'{k}' expects 6 values")
                params[k] = vals
        if view.has("nullspace"):
            params["nullspace"] = _section_floats(
                view.section("nullspace"), ("stiffness", "damping"), ("posture",))
        for flag in ("use_nullspace", "feedforward"):
            if view.has(flag):
                params[flag] = view.flag(flag)
        if kind == "unified_force":
            if view.has("force"):
                params["force"] = _section_floats(
                    view.section("force"),
                    ("kp", "ki", "kd", "integral_limit", "derivative_cutoff_hz"))
            if view.has("tank"):
                params["tank"] = _section_floats(
                    view.section("tank"), ("capacity", "floor", "width"))
            if view.has("gate"):
                params["gate"] = _section_floats(
                    view.section("gate"), ("latch", "d_max"))
    view.finish()
    return ControlletSpec(name=name, kind=kind, robots=robots, params=params)


def parse_scenario(text: str, base_dir: str = ".") -> ScenarioConfig:
    doc = kvdoc.parse(text)
    top = kvdoc.View(doc)
    sc = top.section("scenario")
    task = sc.int("task", required=False)
    condition = sc.str("condition", required=False)
    duration = sc.float("duration", required=False)
    trials = sc.int("trials", required=False)
    seed = sc.int("seed", default=0)
    time_mode = sc.str("time", default="virtual")
    out_dir = sc.str("out", required=False)
    robots = None
    if sc.has("robots"):
        robots = tuple(int(t) for t in sc.tokens("robots"))
    model_paths: tuple[str, ...] = ()
    if sc.has("model"):
        model_paths = tuple(os.path.join(base_dir, t)
                            for t in sc.tokens("model"))
    sc.finish()

    noise = NoiseConfig()
    perturb = "default"
    delay_ticks = 0
    pl = top.section("plant", required=False)
    if pl is not None:
        noise = _parse_noise(pl)
        perturb = _parse_perturb(pl)
        delay_ticks = pl.int("delay_ticks", default=0)
        pl.finish()

    specs: list[ControlletSpec] = []
    cs = top.section("controllets", required=False)
    if cs is not None:
        for name in cs.keys():
            specs.append(_parse_controllet(name, cs.section(name)))
        cs.finish()
    active: tuple[str, ...] = ()
    if top.has("active"):
        active = tuple(top.tokens("active"))
    top.finish()

    try:
        return ScenarioConfig(
            task=task, condition=condition, duration=duration, trials=trials,
            seed=seed, time_mode=time_mode, out_dir=out_dir, robots=robots,
            model_paths=model_paths, noise=noise, perturb_factors=perturb,
            delay_ticks=delay_ticks, controllets=tuple(specs), active=active)
    except ValueError as exc:
        raise kvdoc.DocError(doc.line, str(exc)) from None


def load_scenario(path) -> ScenarioConfig:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    return parse_scenario(text, base_dir=os.path.dirname(os.fspath(path)) or ".")


# -- emission --------------------------------------------------------------


def snapshot(cfg: ScenarioConfig) -> str:
    """Document text for the run directory; parses back to an equal config."""
    scenario: dict = {}
    if cfg.task is not None:
        scenario["task"] = cfg.task
    else:
        scenario["condition"] = cfg.condition
    scenario["duration"] = cfg.resolved_duration()
    scenario["trials"] = cfg.resolved_trials()
    scenario["seed"] = cfg.seed
    scenario["time"] = cfg.time_mode
    if cfg.out_dir is not None:
        scenario["out"] = cfg.out_dir
    scenario["robots"] = list(cfg.robots)
    if cfg.model_paths:
        scenario["model"] = list(cfg.model_paths)

    n = cfg.noise
    plant: dict = {
        "noise": {"q": n.q, "qd": n.qd, "tau": n.tau, "wrench": n.wrench},
        "delay_ticks": cfg.delay_ticks,
    }
    if isinstance(cfg.perturb_factors, str):
        plant["perturb"] = cfg.perturb_factors
    else:
        block = {}
        for link, spec in sorted(cfg.perturb_factors.items()):
            toks: list = []
            for fname, val in spec.items():
                toks.append(fname)
                toks.extend(val if isinstance(val, list) else [val])
            block[f"link{link + 1}"] = toks
        plant["perturb"] = block
    out: dict = {"scenario": scenario, "plant": plant}

    if cfg.controllets:
        out["controllets"] = {
            c.name: {"kind": c.kind, "robots": list(c.robots), **c.params}
            for c in cfg.controllets}
        out["active"] = list(cfg.active)
    return kvdoc.emit(out)


def apply_perturbation(cfg: ScenarioConfig, model):
    """The reference-plant model for this scenario."""
    from .plant import default_perturbation, perturb
    if cfg.perturb_factors == "none":
        return model
    if cfg.perturb_factors == "default":
        return default_perturbation(model)
    return perturb(model, cfg.perturb_factors)
