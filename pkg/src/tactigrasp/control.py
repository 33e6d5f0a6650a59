"""Grasp state machine with slip-driven grip-force regulation, closed against the simulator.

Sequence: trigger -> approach -> touch detected -> hold -> (slip -> regulate)* ->
release command -> done.  The force command only ever increases between
contact and release.
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Optional, Protocol

import numpy as np

from .errors import StateMachineError
from .sim import (
    GRAVITY,
    TOUCH_THRESHOLD,
    MarkerField,
    ObjectParams,
    SimScene,
    downsample,
    render_frame,
    step_contact_dynamics,
)
from .slip import SlipDebouncer


class GraspState(str, Enum):
    IDLE = "Idle"
    APPROACHING = "Approaching"
    CONTACT = "Contact"
    HOLDING = "Holding"
    REGULATING = "Regulating"
    RELEASING = "Releasing"
    DONE = "Done"
    FAILED = "Failed"


S = GraspState
LEGAL = {
    S.IDLE: {S.APPROACHING},
    S.APPROACHING: {S.CONTACT},
    S.CONTACT: {S.HOLDING},
    S.HOLDING: {S.REGULATING, S.RELEASING},
    S.REGULATING: {S.HOLDING},
    S.RELEASING: {S.DONE},
    S.DONE: set(),
    S.FAILED: set(),
}
TERMINAL = {S.DONE, S.FAILED}


def check_transition(src: GraspState, dst: GraspState) -> GraspState:
    if src in TERMINAL:
        raise StateMachineError(f"cannot leave terminal state {src.value}")
    if dst is not src and dst is not S.FAILED and dst not in LEGAL[src]:
        raise StateMachineError(f"illegal transition {src.value} -> {dst.value}")
    return dst


@dataclass(frozen=True)
class ControllerConfig:
    force_step: float = 0.5  # N added per tick while slipping
    rate: float = 30.0  # Hz
    f_max: float = 40.0
    f_initial: float = 1.0
    touch_threshold: float = 0.5
    slip_threshold: float = 0.5
    slip_debounce: int = 2
    approach_speed: float = 20.0  # mm/s
    approach_gap: float = 10.0  # mm between finger and object at trigger
    preload: float = 1.0  # N pressed by the finger at first contact
    actuator_tau: float = 0.1  # s, first-order lag
    timeout: float = 20.0  # s
    slip_timeout: float = 5.0  # s of uninterrupted slip before the object counts as dropped

    def __post_init__(self):
        if not self.force_step > 0:
            raise ValueError("force_step must be positive")
        if not self.f_max > self.force_step:
            raise ValueError("f_max must exceed force_step")
        if not self.timeout > 0:
            raise ValueError("timeout must be positive")
        if not 0.0 < self.touch_threshold < 1.0 or not 0.0 < self.slip_threshold < 1.0:
            raise ValueError("thresholds must be in (0, 1)")


def step_controller(state: GraspState, touch: float, slip: str, cfg: ControllerConfig,
                    force: float = 0.0, *, trigger: bool = False, release: bool = False):
    """One control tick.  ``slip`` is the debounced decision ("slip" / "stable").

    Returns ``(next_state, force_command, failure_reason)``.
    """
    if not 0.0 <= touch <= 1.0:
        raise ValueError(f"touch probability {touch} outside [0, 1]")
    if slip not in ("slip", "stable"):
        raise ValueError(f"slip decision must be 'slip' or 'stable', got {slip!r}")
    slipping = slip == "slip"
    nxt, cmd, reason = state, force, None

    if state is S.IDLE:
        nxt, cmd = (S.APPROACHING if trigger else S.IDLE), 0.0
    elif state is S.APPROACHING:
        nxt, cmd = (S.CONTACT, cfg.f_initial) if touch >= cfg.touch_threshold else (S.APPROACHING, 0.0)
    elif state is S.CONTACT:
        nxt, cmd = S.HOLDING, max(force, cfg.f_initial)
    elif state in (S.HOLDING, S.REGULATING):
        if slipping:
            if force >= cfg.f_max:
                nxt, cmd, reason = S.FAILED, cfg.f_max, "force limit"
            else:
                nxt, cmd = S.REGULATING, min(force + cfg.force_step, cfg.f_max)
        elif state is S.REGULATING:
            nxt = S.HOLDING
        elif release:
            nxt, cmd = S.RELEASING, 0.0
    elif state is S.RELEASING:
        nxt, cmd = S.DONE, 0.0
    check_transition(state, nxt)
    return nxt, cmd, reason


# -- detectors --------------------------------------------------------------

@dataclass
class Observation:
    t: float
    in_contact: bool
    grip_force: float
    slipping: bool
    frame: Optional[np.ndarray] = None
    clip: Optional[list] = None


class Detectors(Protocol):
    needs_frames: bool

    def touch(self, obs: Observation) -> float: ...

    def slip(self, obs: Observation) -> float: ...


class OracleDetectors:
    """Ground truth from the simulator, as probabilities 0/1."""

    needs_frames = False

    def touch(self, obs):
        return 1.0 if obs.in_contact and obs.grip_force > TOUCH_THRESHOLD else 0.0

    def slip(self, obs):
        return 1.0 if obs.slipping else 0.0


class ModelDetectors:
    """Trained touch/slip classifiers run on rendered frames."""

    needs_frames = True

    def __init__(self, touch_model, slip_model):
        self.touch_model = touch_model
        self.slip_model = slip_model
        self.frame_size = touch_model.config.image_size
        self.frames = slip_model.config.frames
        self.clip_factor = self.frame_size // slip_model.config.image_size

    def touch(self, obs):
        return float(self.touch_model.predict_proba(obs.frame)[1])

    def slip(self, obs):
        if obs.clip is None or len(obs.clip) < self.frames:
            return 0.0
        clip = downsample(np.stack(obs.clip[-self.frames:]), self.clip_factor)
        return float(self.slip_model.predict_proba(clip)[1])


def load_detectors(touch_checkpoint, slip_checkpoint) -> ModelDetectors:
    from .train import load_checkpoint

    return ModelDetectors(load_checkpoint(touch_checkpoint), load_checkpoint(slip_checkpoint))


# -- scenarios --------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    """Load script relative to the moment the grip is first established.

    ``lift``: after ``settle`` seconds the tangential load ramps to m g over
    ``lift_time``; ``fluid`` then adds mass in ``fluid_steps`` equal steps up
    to ``mass_factor`` times the initial mass.  Release is commanded ``hold``
    seconds after the last load change.
    """

    kind: str = "lift"
    settle: float = 0.3
    lift_time: float = 1.0
    pre_fluid: float = 1.0
    fluid_steps: int = 4
    fluid_interval: float = 1.0
    mass_factor: float = 2.0
    hold: float = 2.0

    def __post_init__(self):
        if self.kind not in ("lift", "fluid"):
            raise ValueError(f"unknown scenario {self.kind!r}")

    @property
    def fluid_start(self) -> float:
        return self.settle + self.lift_time + self.pre_fluid

    @property
    def release_after(self) -> float:
        end = self.settle + self.lift_time
        if self.kind == "fluid":
            end = self.fluid_start + (self.fluid_steps - 1) * self.fluid_interval
        return end + self.hold

    def mass(self, m0: float, since_hold: float) -> float:
        if self.kind != "fluid" or since_hold < self.fluid_start:
            return m0
        k = min(self.fluid_steps, int((since_hold - self.fluid_start) / self.fluid_interval) + 1)
        return m0 * (1.0 + (self.mass_factor - 1.0) * k / self.fluid_steps)

    def load(self, m0: float, since_hold: float, gravity: float = GRAVITY) -> float:
        if since_hold < self.settle:
            return 0.0
        ramp = min(1.0, (since_hold - self.settle) / self.lift_time)
        return self.mass(m0, since_hold) * gravity * ramp

    def final_mass(self, m0: float) -> float:
        return m0 * self.mass_factor if self.kind == "fluid" else m0


# -- episodes ---------------------------------------------------------------

@dataclass
class EpisodeTrace:
    records: list = field(default_factory=list)
    outcome: str = "failure"
    reason: Optional[str] = None
    final_state: str = GraspState.IDLE.value
    duration: float = 0.0
    peak_force: float = 0.0
    final_grip_force: float = 0.0
    required_force: float = 0.0
    regulating_phases: int = 0

    @property
    def success(self) -> bool:
        return self.outcome == "success"

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("records")
        return {"summary": True, **d}

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for r in self.records:
                f.write(json.dumps(r, sort_keys=True) + "\n")
            f.write(json.dumps(self.summary(), sort_keys=True) + "\n")

    def column(self, name: str) -> list:
        return [r[name] for r in self.records]


def run_episode(scene: SimScene, detectors: Optional[Detectors] = None,
                cfg: ControllerConfig = ControllerConfig(), scenario: Scenario | str = "lift",
                seed: int = 0, frame_size: int = 64) -> EpisodeTrace:
    """Tick the simulator and controller until Done, Failed or timeout."""
    if isinstance(scenario, str):
        scenario = Scenario(scenario)
    detectors = detectors or OracleDetectors()
    if getattr(detectors, "needs_frames", False):
        frame_size = detectors.frame_size
    scene = replace(scene, grip_force=0.0, tangential_load=0.0, seed=seed)
    m0 = scene.obj.mass
    dt = 1.0 / cfg.rate
    lag = 1.0 - math.exp(-dt / cfg.actuator_tau)
    fld = MarkerField.grid(frame_size, frame_size)
    debounce = SlipDebouncer(cfg.slip_threshold, cfg.slip_debounce)
    clip: deque = deque(maxlen=getattr(detectors, "frames", 8))

    trace = EpisodeTrace(required_force=scenario.final_mass(m0) * scene.gravity / scene.obj.friction)
    state, command, actuator, finger = S.IDLE, 0.0, 0.0, 0.0
    t_hold = None
    slip_run = 0.0
    prev_state = state
    tick = 0
    while True:
        t = tick * dt
        # physics
        actuator += (command - actuator) * lag
        if state is S.APPROACHING:
            finger = min(cfg.approach_gap, finger + cfg.approach_speed * dt)
        in_contact = finger >= cfg.approach_gap and state not in (S.RELEASING, S.DONE)
        grip = max(actuator, cfg.preload) if in_contact else 0.0
        since_hold = t - t_hold if t_hold is not None else -1.0
        mass = scenario.mass(m0, since_hold) if t_hold is not None else m0
        load = scenario.load(m0, since_hold, scene.gravity) if t_hold is not None else 0.0
        scene = replace(scene, grip_force=grip, tangential_load=load if in_contact else 0.0)
        fld, slipping = step_contact_dynamics(scene, fld, dt)
        slip_run = slip_run + dt if slipping else 0.0

        # sensing
        obs = Observation(t, in_contact, grip, slipping)
        if detectors.needs_frames:
            obs.frame = render_frame(scene, fld)
            clip.append(obs.frame)
            obs.clip = list(clip)
        p_touch = float(detectors.touch(obs))
        monitoring = state in (S.CONTACT, S.HOLDING, S.REGULATING)
        p_slip = float(detectors.slip(obs)) if monitoring else 0.0
        decision = debounce.update(p_slip) if monitoring else "stable"

        # control
        release = t_hold is not None and since_hold >= scenario.release_after
        prev_state = state
        state, command, reason = step_controller(state, p_touch, decision, cfg, command,
                                                 trigger=tick == 0, release=release)
        if state is S.HOLDING and t_hold is None:
            t_hold = t
        if state is S.REGULATING and prev_state is not S.REGULATING:
            trace.regulating_phases += 1
        if state is S.RELEASING:
            trace.final_grip_force = grip
        if reason is None and state not in TERMINAL and slip_run > cfg.slip_timeout:
            state, reason = check_transition(state, S.FAILED), "dropped"
        if reason is None and state not in TERMINAL and t >= cfg.timeout - 1e-9:
            state, reason = check_transition(state, S.FAILED), "timeout"

        trace.records.append({
            "t": round(t, 9), "state": state.value, "force_command": command,
            "grip_force": grip, "tangential_load": scene.tangential_load, "mass": mass,
            "touch_prob": p_touch, "slip_prob": p_slip, "slip_decision": decision,
            "slipping": slipping, "slip_distance": fld.slip_distance,
        })
        trace.peak_force = max(trace.peak_force, command)
        tick += 1
        if state in TERMINAL:
            trace.final_state = state.value
            trace.outcome = "success" if state is S.DONE else "failure"
            trace.reason = reason
            trace.duration = t
            return trace


def random_feasible_object(rng: np.random.Generator, cfg: ControllerConfig = ControllerConfig(),
                           mass_factor: float = 1.0, margin: float = 2.0) -> ObjectParams:
    """Object whose final load m g / mu (times ``mass_factor``) leaves ``margin`` N below F_max."""
    while True:
        mass = float(rng.uniform(0.05, 1.0))
        mu = float(rng.uniform(0.3, 1.2))
        if mass * mass_factor * GRAVITY / mu + margin <= cfg.f_max:
            return ObjectParams(name="random", mass=mass, friction=mu)
