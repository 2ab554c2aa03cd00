"""Closed-loop scenario execution.

One Execution wires a scene's reference source into the manager and
steps every plant once per tick.  On top of it sit the three experiment
drivers: run_task (twin nominal/reference executions and the six-channel
fidelity report), run_benchmark (loop cost, command transport delay and
the switch-latency trial), and run_identification (excitation on the
reference plant, regression, and the before/after fidelity comparison).

Loop order per tick: targets are applied, all plants are observed, the
manager computes and stamps commands at the tick boundary, the state is
recorded, and the plants integrate to the next boundary under the
environment wrench of the current state.  A stamped command is therefore
actuated half a tick after its write stamp; that transport is what the
delay report measures, and an extra configured command delay adds a
whole tick per slot on top.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import dynamics, kvdoc, model as model_io
from .config import ScenarioConfig, apply_perturbation, snapshot
from .controllets import (FLAG_FAULT, CartesianTarget, CoupledImpedance,
                          JointImpedance, JointTarget)
from .manager import Manager, SwitchRecord, WallClock
from .metrics import CHANNELS, FidelityReport, TimingReport, estimate_delay
from .plant import ContactWorld, NoiseConfig, Plant, PlantError
from .sysid import (IdentificationResult, apply_identified, excitation_scene,
                    identify, prepare)
from .trace import Trace, TraceRecorder
from .trajectories import TaskScene, benchmark_scene, task_scene

DT = 1e-3
READ_PHASE = 0.5                   # actuation point inside the tick, in dt
TIMING_BUDGETS = {"NF": 100e-6, "CA-MA": 250e-6}

_NOMINAL, _REFERENCE, _EXCITE = 0, 1, 2      # seed stream roles


def build_scene(cfg: ScenarioConfig) -> TaskScene:
    models = cfg.load_models()
    base = models[0]
    if cfg.mode == "task":
        scene = task_scene(cfg.task, base, duration=cfg.resolved_duration())
    else:
        scene = benchmark_scene(cfg.condition, base,
                                duration=cfg.resolved_duration())
    # distinct per-robot hardware keeps the scene's base placement
    for i, r in enumerate(scene.robots):
        m = models[i] if len(models) > 1 else base
        if m is not base:
            scene.models[r] = m.with_base(scene.models[r].base_R,
                                          scene.models[r].base_t)
    return scene


def make_plants(cfg: ScenarioConfig, scene: TaskScene, *, reference: bool,
                trial: int, sim_models: dict | None = None) -> dict[int, Plant]:
    """Simulation twin (clean, exact) or reference twin (the hardware
    stand-in: perturbed true dynamics, nominal firmware, sensor noise,
    command delay).  ``sim_models`` swaps the twin's true dynamics, e.g.
    for the identified model, while firmware and controller stay nominal."""
    out = {}
    for r in scene.robots:
        nominal = scene.models[r]
        if reference:
            out[r] = Plant(apply_perturbation(cfg, nominal), dt=DT,
                           seed=cfg.spawn_seed(trial, r, _REFERENCE),
                           noise=cfg.noise, firmware=nominal,
                           delay_ticks=cfg.delay_ticks, q0=scene.start[r])
        else:
            true = nominal if sim_models is None else sim_models[r]
            out[r] = Plant(true, dt=DT,
                           seed=cfg.spawn_seed(trial, r, _NOMINAL),
                           noise=NoiseConfig.silent(), firmware=nominal,
                           q0=scene.start[r])
    return out


class Execution:
    """One run: reference source -> manager -> plants, with capture.

    Collects per-tick compute cost, the command write/read streams for
    delay estimation, stamp coverage, and optionally the full trace."""

    def __init__(self, scene: TaskScene, plants: dict[int, Plant], *,
                 specs=None, active=None, clock=None, dt: float = DT):
        self.scene = scene
        self.plants = plants
        self.dt = float(dt)
        self.mgr = Manager(scene.models, dt=self.dt, clock=clock)
        self.world = ContactWorld(scene.surfaces)
        self.controllets: list = []
        if specs:
            by_name = {}
            for s in specs:
                c = self.mgr.build(s.kind, s.robots, **s.build_kwargs())
                by_name[s.name] = c
                self.controllets.append(c)
            for name in (active or by_name):
                self.mgr.install(by_name[name])
        else:
            c = self.mgr.build(scene.controllet, scene.robots, **scene.params)
            self.controllets.append(c)
            self.mgr.install(c)
        self.timing: list[float] = []
        self.overruns = 0
        self.unstamped = 0
        self.fault: str | None = None
        self.write_stream: tuple | None = None
        self.read_stream: tuple | None = None
        # run the compiled dynamics path once per model so first-call
        # compilation cost never lands inside a timed tick
        for r, m in scene.models.items():
            dynamics.dynamics(m, dynamics.JointState(
                q=plants[r].q, qd=plants[r].qd, tau=np.zeros(m.n)))

    def _apply_targets(self, t: float) -> None:
        src = self.scene.source
        if self.scene.shared_goal:
            p, R, tw = src.goal(t)
            for c in self.controllets:
                if isinstance(c, CoupledImpedance):
                    c.set_goal(p, R, tw)
            return
        tgts = src.targets(t)
        for c in self.controllets:
            wants_joint = isinstance(c, JointImpedance)
            for r in c.robots:
                tgt = tgts.get(r)
                if tgt is not None and wants_joint == isinstance(tgt, JointTarget):
                    c.set_target(r, tgt)

    def run(self, duration: float, *, pace: bool = False, on_tick=None,
            record: bool = True) -> Trace | None:
        robots = self.scene.robots
        n = self.scene.models[robots[0]].n
        n_ticks = int(round(duration / self.dt))
        rec = TraceRecorder(robots, n, n_ticks, dt=self.dt) if record else None
        r0 = robots[0]
        wt, rt = np.empty(n_ticks), np.empty(n_ticks)
        wv, rv = np.empty((n_ticks, n)), np.empty((n_ticks, n))
        wall0 = time.perf_counter()
        done = 0
        for tick in range(n_ticks):
            t = tick * self.dt
            if on_tick is not None:
                on_tick(tick)
            self._apply_targets(t)
            obs = {r: self.plants[r].observe() for r in robots}
            c0 = time.perf_counter()
            terms = self.mgr.tick(obs)
            self.timing.append(time.perf_counter() - c0)
            for r in robots:
                if self.mgr.bus.cmd_stamp[r] != tick:
                    self.unstamped += 1
            poses = {r: self.plants[r].ee_state() for r in robots}
            if rec is not None:
                rec.record(tick, obs, terms, poses)
            wrenches = self.world.solve(poses)
            wt[tick] = t
            wv[tick] = terms[r0].cmd
            try:
                for r in robots:
                    self.plants[r].step(terms[r].cmd, wrenches[r])
            except PlantError as exc:
                self.fault = str(exc)
                rt[tick] = t + READ_PHASE * self.dt
                rv[tick] = self.plants[r0].user
                done = tick + 1
                break
            rt[tick] = t + READ_PHASE * self.dt
            rv[tick] = self.plants[r0].user
            done = tick + 1
            if pace:
                deadline = wall0 + (tick + 1) * self.dt
                now = time.perf_counter()
                if now < deadline:
                    time.sleep(deadline - now)
                else:
                    self.overruns += 1
        self.write_stream = (wt[:done], wv[:done])
        self.read_stream = (rt[:done], rv[:done])
        return rec.finish() if rec is not None else None


def _execute(cfg: ScenarioConfig, trial: int, *, reference: bool,
             sim_models: dict | None = None):
    scene = build_scene(cfg)
    plants = make_plants(cfg, scene, reference=reference, trial=trial,
                         sim_models=sim_models)
    clock = WallClock() if cfg.time_mode == "wall" else None
    ex = Execution(scene, plants, specs=cfg.controllets or None,
                   active=cfg.active or None, clock=clock)
    trace = ex.run(cfg.resolved_duration(), pace=cfg.time_mode == "wall")
    return trace, ex


def _fault_flagged(trace: Trace) -> bool:
    return any(bool(np.any(trace.flags(r).astype(np.int64) & FLAG_FAULT))
               for r in trace.robots)


# -- task fidelity ---------------------------------------------------------


@dataclass
class TaskResult:
    config: ScenarioConfig
    reports: list[FidelityReport]
    average: FidelityReport
    out_dir: str | None = None

    def to_text(self) -> str:
        parts = [f"trial {i}\n{rep.to_text()}"
                 for i, rep in enumerate(self.reports)]
        parts.append(f"average\n{self.average.to_text()}")
        return "\n\n".join(parts)


def run_task(cfg: ScenarioConfig) -> TaskResult:
    if cfg.mode != "task":
        raise ValueError("run_task needs a task scenario")
    reports, pairs = [], []
    for trial in range(cfg.resolved_trials()):
        nom_trace, nom_ex = _execute(cfg, trial, reference=False)
        ref_trace, ref_ex = _execute(cfg, trial, reference=True)
        rep = FidelityReport.from_traces(nom_trace, ref_trace)
        fault = nom_ex.fault or ref_ex.fault
        if fault or _fault_flagged(nom_trace) or _fault_flagged(ref_trace):
            rep.valid = False
            rep.note = fault or "controllet fault flagged in trace"
        reports.append(rep)
        pairs.append((nom_trace, ref_trace))
    avg = FidelityReport.average(reports)
    result = TaskResult(cfg, reports, avg, out_dir=cfg.out_dir)
    if cfg.out_dir:
        _write_task_dir(cfg, pairs, reports, avg)
    return result


def _write_task_dir(cfg, pairs, reports, avg) -> None:
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    _write(out, "config.kv", snapshot(cfg))
    for i, ((nom, ref), rep) in enumerate(zip(pairs, reports)):
        nom.save(os.path.join(out, f"trial{i}.nominal.csv"))
        ref.save(os.path.join(out, f"trial{i}.reference.csv"))
        _write(out, f"trial{i}.report.kv", kvdoc.emit(rep.to_kv()))
    _write(out, "summary.kv", kvdoc.emit(avg.to_kv()))
    _write(out, "summary.txt",
           TaskResult(cfg, reports, avg).to_text() + "\n")


def _write(out_dir: str, name: str, text: str) -> None:
    with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
        fh.write(text)


# -- switching -------------------------------------------------------------


@dataclass
class SwitchReport:
    trials: int
    accepted: int
    latencies_ticks: list[int]
    mean_ms: float
    std_ms: float
    max_ticks: int
    unstamped: int

    @property
    def ok(self) -> bool:
        return (self.accepted == self.trials and self.max_ticks <= 2
                and self.unstamped == 0)

    def to_kv(self) -> dict:
        return {"switching": {"trials": self.trials, "accepted": self.accepted,
                              "mean_ms": self.mean_ms, "std_ms": self.std_ms,
                              "max_ticks": self.max_ticks,
                              "unstamped_ticks": self.unstamped,
                              "ok": self.ok}}

    def to_text(self) -> str:
        return (f"switching over {self.trials} trials: {self.accepted} "
                f"accepted, latency mean {self.mean_ms:.3f} ms "
                f"std {self.std_ms:.3f} ms, worst {self.max_ticks} tick(s), "
                f"{self.unstamped} unstamped tick(s)")


def switch_test(cfg: ScenarioConfig | None = None, *, trials: int = 50,
                spacing: int = 40) -> SwitchReport:
    """Hot-swap the scene's controllet back and forth `trials` times.

    Always runs in virtual time: the latency contract is in ticks, so
    wall pacing would only add noise.  Every request must activate its
    controllet within two ticks and no tick may go un-stamped."""
    base = cfg.load_models()[0] if cfg is not None else model_io.builtin()
    if cfg is not None and cfg.mode == "task":
        scene = task_scene(cfg.task, base)
    else:
        cond = cfg.condition if cfg is not None else "NF"
        scene = benchmark_scene(cond, base)
    plants = {r: Plant(scene.models[r], dt=DT, noise=NoiseConfig.silent(),
                       q0=scene.start[r]) for r in scene.robots}
    ex = Execution(scene, plants)
    spare = ex.mgr.build(scene.controllet, scene.robots, **scene.params)
    ex.controllets.append(spare)           # keeps receiving targets too
    flip = [ex.controllets[0], spare]
    pre = len(ex.mgr.records)

    def on_tick(tick: int) -> None:
        k, rem = divmod(tick, spacing)
        if rem == 0 and 1 <= k <= trials:
            ex.mgr.request_switch(flip[k % 2])

    ex.run((trials + 1) * spacing * DT, on_tick=on_tick, record=False)
    recs = ex.mgr.records[pre:]
    done = [r for r in recs if r.activation_tick is not None]
    lat_ms = [r.latency_s * 1e3 for r in done]
    return SwitchReport(
        trials=len(recs), accepted=len(done),
        latencies_ticks=[r.latency_ticks for r in done],
        mean_ms=float(np.mean(lat_ms)) if lat_ms else float("nan"),
        std_ms=float(np.std(lat_ms)) if lat_ms else float("nan"),
        max_ticks=max((r.latency_ticks for r in done), default=0),
        unstamped=ex.unstamped)


# -- benchmark -------------------------------------------------------------


@dataclass
class BenchmarkResult:
    config: ScenarioConfig
    condition: str
    timing: TimingReport
    delay_ms: float
    delay_ticks: int
    switch: SwitchReport
    flagged: bool
    trace: Trace
    out_dir: str | None = None

    def to_kv(self) -> dict:
        body = {"condition": self.condition,
                "delay_ms": self.delay_ms,
                "delay_extra_ticks": self.delay_ticks,
                "flagged": self.flagged}
        body.update(self.timing.to_kv())
        body.update(self.switch.to_kv())
        return {"benchmark": body}

    def to_text(self) -> str:
        flag = "  [FLAGGED: overrun rate above 1 percent]" if self.flagged else ""
        return "\n".join([
            f"benchmark {self.condition}{flag}",
            self.timing.to_text(),
            f"command transport {self.delay_ms:.3f} ms "
            f"({self.delay_ticks} extra tick(s) beyond the half-tick write-"
            "to-actuation phase)",
            self.switch.to_text()])


def run_benchmark(cfg: ScenarioConfig) -> BenchmarkResult:
    if cfg.mode != "benchmark":
        raise ValueError("run_benchmark needs a benchmark condition")
    trace, ex = _execute(cfg, 0, reference=True)
    timing = TimingReport.from_samples(
        ex.timing, budget=TIMING_BUDGETS.get(cfg.condition),
        condition=cfg.condition)
    wt, wv = ex.write_stream
    rt, rv = ex.read_stream
    delay_ms = estimate_delay(wt, wv, rt, rv)
    extra = int(round(delay_ms / (DT * 1e3) - READ_PHASE))
    switch = switch_test(cfg)
    flagged = (cfg.time_mode == "wall"
               and ex.overruns > 0.01 * max(1, len(ex.timing)))
    result = BenchmarkResult(cfg, cfg.condition, timing, delay_ms, extra,
                             switch, flagged, trace, out_dir=cfg.out_dir)
    if cfg.out_dir:
        out = cfg.out_dir
        os.makedirs(out, exist_ok=True)
        _write(out, "config.kv", snapshot(cfg))
        trace.save(os.path.join(out, "trace.csv"))
        _write(out, "report.kv", kvdoc.emit(result.to_kv()))
        _write(out, "report.txt", result.to_text() + "\n")
    return result


# -- identification experiment ---------------------------------------------


@dataclass
class IdentifyResult:
    config: ScenarioConfig
    identification: dict[int, IdentificationResult]
    models: dict[int, object]
    before: FidelityReport
    after: FidelityReport
    improvement: dict[int, float]        # fractional f_ee RMSE reduction
    tau_ratio: dict[int, float]          # after / before
    cerr_ratio: dict[int, float]
    excitation: dict[int, Trace] = field(default_factory=dict)
    out_dir: str | None = None

    def to_kv(self) -> dict:
        body: dict = {}
        for r in sorted(self.improvement):
            res = self.identification[r]
            body[f"robot_{r}"] = {
                "f_ee_reduction": self.improvement[r],
                "tau_ratio": self.tau_ratio[r],
                "control_error_ratio": self.cerr_ratio[r],
                "identifiable": res.identifiable,
                "condition_number": res.condition,
                "residual_rms": res.residual_rms,
            }
        body["before"] = self.before.to_kv()["fidelity"]
        body["after"] = self.after.to_kv()["fidelity"]
        return {"identification": body}

    def to_text(self) -> str:
        lines = []
        for r in sorted(self.improvement):
            lines.append(
                f"robot {r}: f_ee RMSE down "
                f"{100.0 * self.improvement[r]:.1f} percent, "
                f"tau ratio {self.tau_ratio[r]:.3f}, "
                f"control error ratio {self.cerr_ratio[r]:.3f}")
        lines.append("before:\n" + self.before.to_text())
        lines.append("after:\n" + self.after.to_text())
        return "\n".join(lines)


def run_identification(cfg: ScenarioConfig,
                       excite_duration: float = 20.0) -> IdentifyResult:
    """Excite the reference plant in free space, regress its inertial
    parameters from the noisy sensor streams, and re-run the scenario
    with the simulation twin's dynamics replaced by the identified model.

    The reference trace is produced once and reused for the before and
    after comparisons, so the report isolates the model change.  The
    controller and the firmware stay on the nominal model throughout,
    mirroring an identification performed on fixed hardware."""
    if cfg.mode != "task":
        raise ValueError("the identification experiment runs a task scenario")
    scene = build_scene(cfg)
    results: dict[int, IdentificationResult] = {}
    ident_models: dict = {}
    excitation: dict[int, Trace] = {}
    for r in scene.robots:
        nominal = scene.models[r]
        exc_scene = excitation_scene(nominal, duration=excite_duration)
        plant = Plant(apply_perturbation(cfg, nominal), dt=DT,
                      seed=cfg.spawn_seed(0, r, _EXCITE), noise=cfg.noise,
                      firmware=nominal, delay_ticks=cfg.delay_ticks,
                      q0=exc_scene.start[0])
        ex = Execution(exc_scene, {0: plant})
        tr = ex.run(exc_scene.duration)
        if ex.fault:
            raise PlantError(f"excitation run failed: {ex.fault}")
        excitation[r] = tr
        qs, qds, qdds, taus = prepare(tr.block(0, "q"), tr.block(0, "qd"),
                                      tr.block(0, "tau_meas"), DT)
        results[r] = identify(nominal, qs, qds, qdds, taus)
        ident_models[r] = apply_identified(nominal, results[r].params)

    ref_trace, _ = _execute(cfg, 0, reference=True)
    nom_trace, _ = _execute(cfg, 0, reference=False)
    fit_trace, _ = _execute(cfg, 0, reference=False, sim_models=ident_models)
    before = FidelityReport.from_traces(nom_trace, ref_trace)
    after = FidelityReport.from_traces(fit_trace, ref_trace)

    improvement, tau_ratio, cerr_ratio = {}, {}, {}
    for r in scene.robots:
        b, a = before.channels[r], after.channels[r]
        improvement[r] = (0.0 if b["f_ee"] == 0.0
                          else 1.0 - a["f_ee"] / b["f_ee"])
        tau_ratio[r] = float("inf") if b["tau"] == 0.0 else a["tau"] / b["tau"]
        cerr_ratio[r] = (float("inf") if b["control_error"] == 0.0
                         else a["control_error"] / b["control_error"])
    result = IdentifyResult(cfg, results, ident_models, before, after,
                            improvement, tau_ratio, cerr_ratio, excitation,
                            out_dir=cfg.out_dir)
    if cfg.out_dir:
        out = cfg.out_dir
        os.makedirs(out, exist_ok=True)
        _write(out, "config.kv", snapshot(cfg))
        for r in scene.robots:
            excitation[r].save(os.path.join(out, f"excitation{r}.csv"))
            _write(out, f"identified-model{r}.kv", ident_models[r].dumps())
            _write(out, f"parameters{r}.txt", results[r].report() + "\n")
        nom_trace.save(os.path.join(out, "before.nominal.csv"))
        fit_trace.save(os.path.join(out, "after.nominal.csv"))
        ref_trace.save(os.path.join(out, "reference.csv"))
        _write(out, "report.kv", kvdoc.emit(result.to_kv()))
        _write(out, "report.txt", result.to_text() + "\n")
    return result
