"""Model backends: the trainable toy model, a ground-truth oracle, and a
remote HTTP client, all behind one predict/generate contract.

Decoding is constrained by token-type masks: a frame prediction can only emit
visual ids and an instruction can only emit text ids or EOS, so outputs are
well-formed regardless of model quality.
"""

from __future__ import annotations

import base64
import json
import urllib.error
import urllib.request

import numpy as np

from .errors import BackendError, DecodeError, EmptyOutput
from .gridworld import EgoFrame, Trajectory
from .tokenizer import (
    INSTR,
    VIZ,
    UnifiedVocab,
    VisualCodebook,
    assemble_prompt,
    dequantize,
    quantize_frame,
)
from .toymodel import ToyModelParams, decode_step, prefill

MAX_INSTRUCTION_TOKENS = 64


class ModelBackend:
    """Contract: deterministic next-frame prediction and instruction generation."""

    capabilities = frozenset({"predict_frame", "generate_instruction"})
    context_limit = 1 << 30

    def predict_next_frame(self, context_frames, goal: EgoFrame) -> EgoFrame:
        raise NotImplementedError

    def generate_instruction(self, frames, goal: EgoFrame,
                             prev_instruction: str | None = None) -> str:
        raise NotImplementedError


def predict_next_frame(backend: ModelBackend, context_frames, goal: EgoFrame) -> EgoFrame:
    if "predict_frame" not in backend.capabilities:
        raise BackendError(f"{type(backend).__name__} cannot predict frames")
    return backend.predict_next_frame(list(context_frames), goal)


def generate_instruction(backend: ModelBackend, frames, goal: EgoFrame,
                         prev_instruction: str | None = None) -> str:
    if "generate_instruction" not in backend.capabilities:
        raise BackendError(f"{type(backend).__name__} cannot generate instructions")
    if not frames:
        raise BackendError("instruction generation needs at least one frame")
    return backend.generate_instruction(list(frames), goal, prev_instruction)


# ---------------------------------------------------------------------------
# toy model backend
# ---------------------------------------------------------------------------

class ToyBackend(ModelBackend):
    def __init__(self, params: ToyModelParams, vocab: UnifiedVocab,
                 codebook: VisualCodebook, frame_size: int):
        self.params = params
        self.vocab = vocab
        self.codebook = codebook
        self.frame_size = frame_size
        self.context_limit = params.config.context_len

    def _greedy(self, prefix_ids, allowed, stop_id=None, max_tokens=None):
        """Greedy decode over `allowed` vocabulary columns until stop/max."""
        allowed = np.asarray(allowed, dtype=np.int64)
        state, logits = prefill(self.params, prefix_ids)
        out = []
        while True:
            masked = np.asarray(logits, dtype=np.float64)[allowed]
            if not np.isfinite(masked).any():
                raise DecodeError("no eligible token under the decoding mask")
            tok = int(allowed[int(np.argmax(masked))])
            if stop_id is not None and tok == stop_id:
                break
            out.append(tok)
            if max_tokens is not None and len(out) >= max_tokens:
                break
            logits = decode_step(self.params, state, tok)
        return out

    def predict_next_frame(self, context_frames, goal):
        ctx_tokens = [quantize_frame(f, self.codebook) for f in context_frames]
        goal_tokens = quantize_frame(goal, self.codebook)
        seq = assemble_prompt(self.vocab, VIZ, ctx_tokens, goal_tokens, target=None)
        n = len(goal_tokens)
        allowed = np.arange(self.vocab.n_text, self.vocab.n_text + self.vocab.n_visual)
        toks = self._greedy(seq.ids, allowed, max_tokens=n)
        local = [self.vocab.visual_local(t) for t in toks]
        return dequantize(local, self.codebook, self.frame_size, self.frame_size)

    def generate_instruction(self, frames, goal, prev_instruction=None):
        ctx_tokens = [quantize_frame(f, self.codebook) for f in frames]
        goal_tokens = quantize_frame(goal, self.codebook)
        prev_ids = self.vocab.encode_text(prev_instruction) if prev_instruction else None
        seq = assemble_prompt(self.vocab, INSTR, ctx_tokens, goal_tokens,
                              target=None, prev_instruction=prev_ids)
        allowed = np.concatenate([np.arange(self.vocab.n_text), [self.vocab.eos]])
        toks = self._greedy(seq.ids, allowed, stop_id=self.vocab.eos,
                            max_tokens=MAX_INSTRUCTION_TOKENS)
        if not toks:
            raise EmptyOutput("model emitted EOS before any instruction token")
        return self.vocab.decode_text(toks)


# ---------------------------------------------------------------------------
# ground-truth oracle backend
# ---------------------------------------------------------------------------

class OracleBackend(ModelBackend):
    """Replays one trajectory: the next ground-truth frame per predict call and
    the ground-truth instruction verbatim. Construct one per episode."""

    def __init__(self, traj: Trajectory):
        self.traj = traj
        self._cursor = None

    def predict_next_frame(self, context_frames, goal):
        if self._cursor is None:
            self._cursor = len(context_frames)
        frames = self.traj.frames
        idx = min(self._cursor, len(frames) - 1)
        self._cursor += 1
        return frames[idx]

    def generate_instruction(self, frames, goal, prev_instruction=None):
        return self.traj.instruction


# ---------------------------------------------------------------------------
# remote backend
# ---------------------------------------------------------------------------

def _b64_frame(frame: EgoFrame) -> str:
    return base64.b64encode(frame.to_png_bytes()).decode("ascii")


def _frame_from_b64(data: str) -> EgoFrame:
    try:
        return EgoFrame.from_png_bytes(base64.b64decode(data))
    except Exception as exc:
        raise BackendError(f"remote returned an undecodable frame: {exc}") from exc


class RemoteBackend(ModelBackend):
    """JSON-over-HTTP client; frames travel as base64 PNG."""

    def __init__(self, base_url: str, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def _post(self, route: str, payload: dict) -> dict:
        req = urllib.request.Request(
            self.base_url + route,
            data=json.dumps(payload).encode(),
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                if resp.status != 200:
                    raise BackendError(f"remote returned HTTP {resp.status} for {route}")
                body = resp.read()
        except urllib.error.HTTPError as exc:
            raise BackendError(f"remote returned HTTP {exc.code} for {route}") from exc
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise BackendError(f"remote call {route} failed: {exc}") from exc
        try:
            return json.loads(body.decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise BackendError(f"remote returned malformed JSON for {route}") from exc

    def predict_next_frame(self, context_frames, goal):
        doc = self._post("/v1/predict_frame", {
            "context_frames": [_b64_frame(f) for f in context_frames],
            "goal_frame": _b64_frame(goal),
            "k": len(context_frames),
        })
        if "frame" not in doc:
            raise BackendError("remote predict_frame response missing 'frame'")
        return _frame_from_b64(doc["frame"])

    def generate_instruction(self, frames, goal, prev_instruction=None):
        doc = self._post("/v1/generate_instruction", {
            "frames": [_b64_frame(f) for f in frames],
            "goal_frame": _b64_frame(goal),
            "prev_instruction": prev_instruction if prev_instruction else None,
        })
        if "instruction" not in doc or not isinstance(doc["instruction"], str):
            raise BackendError("remote generate_instruction response missing 'instruction'")
        return doc["instruction"]
