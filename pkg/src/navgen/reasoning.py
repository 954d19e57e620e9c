"""Inference strategies over a model backend.

Both strategies roll the visual forecast forward through a sliding window of
the k most recent observations until the newest prediction clears the SSIM
threshold against the goal (checked after each prediction, so at least one
prediction always happens) or the step cap is hit. One-pass writes a single
instruction at the end from sampled representative frames; interleaved refines
the instruction after every prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .backends import ModelBackend, generate_instruction, predict_next_frame
from .errors import CountExceedsCandidates, ShapeMismatch
from .gridworld import EgoFrame
from .metrics import ssim

BY_THRESHOLD = "by_threshold"
BY_MAX_STEPS = "by_max_steps"


@dataclass
class ReasoningConfig:
    k: int = 2                 # visualization context size
    m: int | None = None       # instruction context size, defaults to k + 1
    tau: float = 0.7           # SSIM termination threshold
    max_steps: int | None = None

    def __post_init__(self):
        if self.k < 1:
            raise ShapeMismatch("context size k must be >= 1")
        if self.m is None:
            self.m = self.k + 1
        if not 0.0 < self.tau < 1.0:
            raise ShapeMismatch(f"tau must be in (0, 1), got {self.tau}")
        if self.max_steps is None:
            self.max_steps = 4 * (self.k + 16)
        if self.max_steps < 1:
            raise ShapeMismatch("max_steps must be >= 1")


@dataclass
class EpisodeResult:
    predicted_frames: list
    instruction: str
    instruction_history: list
    steps: int
    terminated: str

    def to_json(self, traj_id: str = "", strategy: str = "", frame_paths=None):
        return {
            "traj_id": traj_id,
            "strategy": strategy,
            "steps": self.steps,
            "terminated": self.terminated,
            "instruction": self.instruction,
            "instruction_history": list(self.instruction_history),
            "frame_paths": list(frame_paths or []),
        }


def sample_intermediates(candidates, count: int) -> list:
    """Uniform temporal stratification: floor((j+1)*|c|/(count+1)) for j < count."""
    if count < 0 or count > len(candidates):
        raise CountExceedsCandidates(
            f"cannot sample {count} from {len(candidates)} candidates")
    n = len(candidates)
    picked = []
    for j in range(count):
        idx = (j + 1) * n // (count + 1)
        if not picked or idx > picked[-1]:
            picked.append(idx)
    return picked


def _forecast(backend: ModelBackend, init_obs, goal, cfg: ReasoningConfig,
              on_step=None):
    """Shared prediction loop; returns (predictions, termination)."""
    window = list(init_obs)
    preds = []
    while True:
        assert len(window) == cfg.k
        o_hat = predict_next_frame(backend, window, goal)
        preds.append(o_hat)
        window = window[1:] + [o_hat]
        if on_step is not None:
            on_step(window, len(preds))
        if ssim(o_hat, goal) > cfg.tau:
            return preds, BY_THRESHOLD
        if len(preds) >= cfg.max_steps:
            return preds, BY_MAX_STEPS


def one_pass(backend: ModelBackend, init_obs, goal: EgoFrame,
             cfg: ReasoningConfig) -> EpisodeResult:
    """Forecast the whole trajectory first, then generate one instruction from
    the first observation, sampled intermediates, and the goal."""
    init_obs = list(init_obs)
    if len(init_obs) != cfg.k:
        raise ShapeMismatch(f"expected {cfg.k} initial observations, got {len(init_obs)}")
    preds, terminated = _forecast(backend, init_obs, goal, cfg)
    candidates = init_obs[1:] + preds
    count = min(cfg.m - 1, len(candidates))
    picked = sample_intermediates(candidates, count)
    frames = [init_obs[0]] + [candidates[i] for i in picked]
    instruction = generate_instruction(backend, frames, goal, prev_instruction=None)
    return EpisodeResult(predicted_frames=preds, instruction=instruction,
                         instruction_history=[], steps=len(preds),
                         terminated=terminated)


def interleaved(backend: ModelBackend, init_obs, goal: EgoFrame,
                cfg: ReasoningConfig) -> EpisodeResult:
    """Alternate next-frame prediction with instruction refinement; the final
    instruction is the last refinement."""
    init_obs = list(init_obs)
    if len(init_obs) != cfg.k:
        raise ShapeMismatch(f"expected {cfg.k} initial observations, got {len(init_obs)}")
    history = []

    def refine(window, _step):
        prev = history[-1] if history else ""
        history.append(generate_instruction(backend, window, goal, prev_instruction=prev))

    preds, terminated = _forecast(backend, init_obs, goal, cfg, on_step=refine)
    return EpisodeResult(predicted_frames=preds, instruction=history[-1],
                         instruction_history=history, steps=len(preds),
                         terminated=terminated)
