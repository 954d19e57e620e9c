"""Image and text tokenization over one unified id space.

Images are cut into p x p patches and quantized against a k-means codebook of
normalized patch vectors; text uses a closed word-level vocabulary. Prompt
assembly interleaves bracketed visual spans with text and masks every input
position in the label stream so training loss only touches the target span.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadTokenId,
    ContextSizeMismatch,
    DimensionMismatch,
    GenerationFailed,
    TargetKindMismatch,
    TooFewPatches,
)
from .gridworld import LANDMARK_NAMES, ROOM_NAMES, EgoFrame
from .textnorm import split_words

MASKED = -100  # label value for positions excluded from the loss

VIZ = "viz"
INSTR = "instr"

TEMPLATE_WORDS = [
    "go", "straight", "turn", "left", "right", "then",
    "enter", "the", "until", "stop", "at",
]

UNK = "<unk>"

SPECIAL_NAMES = ["<bos>", "<eos>", "<img>", "</img>", "<sep>", "<pad>", "<viz>", "<instr>"]


def default_words() -> list:
    return [UNK] + TEMPLATE_WORDS + ROOM_NAMES + LANDMARK_NAMES + [".", ","]


# ---------------------------------------------------------------------------
# visual codebook
# ---------------------------------------------------------------------------

@dataclass
class VisualCodebook:
    """Embedding codebook of flattened normalized patches, entries on the 1/255 grid."""

    entries: np.ndarray  # (N, d) float64 in [0, 1]
    patch_size: int

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        if self.entries.ndim != 2 or self.entries.shape[0] < 2:
            raise DimensionMismatch("codebook needs at least 2 entries of equal dimension")
        if self.entries.min() < 0.0 or self.entries.max() > 1.0:
            raise DimensionMismatch("codebook entries must lie in [0, 1]")
        uniq = np.unique(self.entries, axis=0)
        if uniq.shape[0] != self.entries.shape[0]:
            raise GenerationFailed("codebook entries must be pairwise distinct")

    @property
    def n_entries(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def mse_to_all(self, entry_id: int) -> np.ndarray:
        """Mean squared distance from one entry to every entry, shape (N,)."""
        diff = self.entries - self.entries[entry_id]
        return (diff ** 2).mean(axis=1)


def build_codebook(patches, n_entries: int, seed: int, iterations: int = 25) -> VisualCodebook:
    """k-means over normalized patches: farthest-point init, fixed iteration count.

    Centroids are snapped to the 1/255 pixel grid so dequantize/quantize round
    trips are exact.
    """
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2:
        raise DimensionMismatch("patches must be a (count, dim) array")
    m = patches.shape[0]
    if m < n_entries:
        raise TooFewPatches(f"need at least {n_entries} patches, got {m}")

    rng = np.random.Generator(np.random.PCG64(seed))
    centers = [int(rng.integers(m))]
    d2 = ((patches - patches[centers[0]]) ** 2).mean(axis=1)
    while len(centers) < n_entries:
        nxt = int(np.argmax(d2))  # argmax takes the lowest index on ties
        centers.append(nxt)
        d2 = np.minimum(d2, ((patches - patches[nxt]) ** 2).mean(axis=1))
    cents = patches[centers].copy()

    for _ in range(iterations):
        dists = ((patches[:, None, :] - cents[None, :, :]) ** 2).mean(axis=2)
        assign = dists.argmin(axis=1)
        for j in range(n_entries):
            sel = patches[assign == j]
            if len(sel):
                cents[j] = sel.mean(axis=0)

    cents = np.round(cents * 255.0) / 255.0
    return VisualCodebook(cents, patch_size=_infer_patch(patches.shape[1]))


def _infer_patch(dim: int) -> int:
    p = round((dim / 3) ** 0.5)
    if 3 * p * p != dim:
        raise DimensionMismatch(f"patch dim {dim} is not 3*p^2 for integer p")
    return p


def frame_to_patches(frame: EgoFrame, patch_size: int) -> np.ndarray:
    """Row-major patch grid, each patch flattened row-major and normalized to [0, 1]."""
    h, w = frame.height, frame.width
    p = patch_size
    if h % p or w % p:
        raise DimensionMismatch(f"frame {w}x{h} not divisible by patch size {p}")
    px = frame.pixels.astype(np.float64) / 255.0
    grid = px.reshape(h // p, p, w // p, p, 3).transpose(0, 2, 1, 3, 4)
    return grid.reshape((h // p) * (w // p), 3 * p * p)


def quantize_frame(frame: EgoFrame, cb: VisualCodebook) -> list:
    """Nearest-codebook-entry id per patch (mean squared distance, ties to lowest id)."""
    patches = frame_to_patches(frame, cb.patch_size)
    if patches.shape[1] != cb.dim:
        raise DimensionMismatch(f"patch dim {patches.shape[1]} != codebook dim {cb.dim}")
    dists = ((patches[:, None, :] - cb.entries[None, :, :]) ** 2).mean(axis=2)
    return [int(i) for i in dists.argmin(axis=1)]


def dequantize(tokens, cb: VisualCodebook, height: int, width: int) -> EgoFrame:
    p = cb.patch_size
    if height % p or width % p:
        raise DimensionMismatch(f"target {width}x{height} not divisible by patch size {p}")
    n = (height // p) * (width // p)
    if len(tokens) != n:
        raise DimensionMismatch(f"expected {n} tokens for {width}x{height}, got {len(tokens)}")
    for t in tokens:
        if not 0 <= t < cb.n_entries:
            raise BadTokenId(f"visual token {t} outside [0, {cb.n_entries})")
    patches = cb.entries[np.asarray(tokens, dtype=np.int64)]
    px = np.round(patches * 255.0).astype(np.uint8)
    grid = px.reshape(height // p, width // p, p, p, 3).transpose(0, 2, 1, 3, 4)
    return EgoFrame(grid.reshape(height, width, 3))


def save_codebook(cb: VisualCodebook, path):
    with open(path, "wb") as fh:
        fh.write(b"NVCB")
        fh.write(struct.pack("<III", cb.n_entries, cb.dim, cb.patch_size))
        fh.write(cb.entries.astype("<f4").tobytes())


def load_codebook(path) -> VisualCodebook:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != b"NVCB":
            raise DimensionMismatch(f"bad codebook magic {magic!r}")
        n, d, p = struct.unpack("<III", fh.read(12))
        data = np.frombuffer(fh.read(n * d * 4), dtype="<f4").reshape(n, d)
    return VisualCodebook(data.astype(np.float64), patch_size=p)


# ---------------------------------------------------------------------------
# unified vocabulary and text tokenizer
# ---------------------------------------------------------------------------

@dataclass
class UnifiedVocab:
    """Contiguous id space: text ids, then visual ids, then special tokens."""

    words: list
    n_visual: int
    _word_to_id: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._word_to_id = {w: i for i, w in enumerate(self.words)}
        if len(self._word_to_id) != len(self.words):
            raise BadTokenId("duplicate words in vocabulary")
        if UNK not in self._word_to_id:
            raise BadTokenId(f"vocabulary must contain {UNK}")

    @property
    def n_text(self) -> int:
        return len(self.words)

    @property
    def size(self) -> int:
        return self.n_text + self.n_visual + len(SPECIAL_NAMES)

    def special(self, name: str) -> int:
        return self.n_text + self.n_visual + SPECIAL_NAMES.index(name)

    @property
    def bos(self):
        return self.special("<bos>")

    @property
    def eos(self):
        return self.special("<eos>")

    @property
    def img_start(self):
        return self.special("<img>")

    @property
    def img_end(self):
        return self.special("</img>")

    @property
    def sep(self):
        return self.special("<sep>")

    @property
    def pad(self):
        return self.special("<pad>")

    def task_tag(self, kind: str) -> int:
        return self.special("<viz>") if kind == VIZ else self.special("<instr>")

    def visual_id(self, local: int) -> int:
        if not 0 <= local < self.n_visual:
            raise BadTokenId(f"local visual token {local} outside [0, {self.n_visual})")
        return self.n_text + local

    def visual_local(self, token_id: int) -> int:
        if not self.n_text <= token_id < self.n_text + self.n_visual:
            raise BadTokenId(f"token {token_id} is not a visual id")
        return token_id - self.n_text

    def kind_of(self, token_id: int) -> str:
        if 0 <= token_id < self.n_text:
            return "text"
        if token_id < self.n_text + self.n_visual:
            return "visual"
        if token_id < self.size:
            return "special"
        raise BadTokenId(f"token {token_id} outside vocabulary of size {self.size}")

    def encode_text(self, text: str) -> list:
        unk = self._word_to_id[UNK]
        return [self._word_to_id.get(w, unk) for w in split_words(text)]

    def decode_text(self, ids) -> str:
        out = []
        for i in ids:
            if not 0 <= i < self.n_text:
                raise BadTokenId(f"token {i} outside text range [0, {self.n_text})")
            out.append(self.words[i])
        return " ".join(out)

    def to_json(self):
        return {"words": {w: i for i, w in enumerate(self.words)},
                "visual_count": self.n_visual,
                "specials": SPECIAL_NAMES}

    @classmethod
    def from_json(cls, doc):
        words = [None] * len(doc["words"])
        for w, i in doc["words"].items():
            words[i] = w
        return cls(words=words, n_visual=doc["visual_count"])


def default_vocab(n_visual: int) -> UnifiedVocab:
    return UnifiedVocab(words=default_words(), n_visual=n_visual)


def save_vocab(vocab: UnifiedVocab, path):
    with open(path, "w") as fh:
        json.dump(vocab.to_json(), fh, indent=1, sort_keys=True)


def load_vocab(path) -> UnifiedVocab:
    with open(path) as fh:
        return UnifiedVocab.from_json(json.load(fh))


# ---------------------------------------------------------------------------
# token sequences and prompt assembly
# ---------------------------------------------------------------------------

@dataclass
class TokenSequence:
    """Token ids with a parallel label stream; MASKED labels carry no loss."""

    ids: list
    labels: list

    def __post_init__(self):
        if len(self.ids) != len(self.labels):
            raise DimensionMismatch(
                f"ids/labels length mismatch: {len(self.ids)} vs {len(self.labels)}")

    def __len__(self):
        return len(self.ids)

    def unmasked_positions(self):
        return [i for i, l in enumerate(self.labels) if l != MASKED]


# tokenizer presets: (frame_size, patch_size, codebook_size)
PRESET_SMALL = {"frame_size": 32, "patch_size": 4, "codebook_size": 64}
# keeps 784 visual tokens per frame for higher-fidelity experiments
PRESET_FIDELITY = {"frame_size": 224, "patch_size": 8, "codebook_size": 512}


def tokens_per_frame(frame_size: int, patch_size: int) -> int:
    return (frame_size // patch_size) ** 2


def _frame_span(vocab, frame_tokens):
    return [vocab.img_start] + [vocab.visual_id(t) for t in frame_tokens] + [vocab.img_end]


def assemble_prompt(vocab: UnifiedVocab, kind: str, context_frames, goal_frame,
                    target=None, prev_instruction=None, expect_context=None) -> TokenSequence:
    """Build one training/inference sequence.

    Layout: BOS, task tag, bracketed context frame spans, bracketed goal span,
    optional previous-instruction text, SEP, target tokens, EOS. Labels are
    MASKED everywhere except the target tokens and the final EOS. With
    target=None the sequence stops at SEP (decoding prefix).
    """
    if kind not in (VIZ, INSTR):
        raise TargetKindMismatch(f"unknown prompt kind {kind!r}")
    if not context_frames:
        raise ContextSizeMismatch("at least one context frame is required")
    span_len = len(goal_frame)
    for f in context_frames:
        if len(f) != span_len:
            raise ContextSizeMismatch(
                f"frame token lengths differ: {len(f)} vs {span_len}")
    if expect_context is not None:
        if kind == VIZ and len(context_frames) != expect_context:
            raise ContextSizeMismatch(
                f"viz prompt needs exactly {expect_context} context frames, got {len(context_frames)}")
        if kind == INSTR and len(context_frames) > expect_context:
            raise ContextSizeMismatch(
                f"instr prompt allows at most {expect_context} frames, got {len(context_frames)}")
    if kind == VIZ and prev_instruction:
        raise TargetKindMismatch("prev_instruction is only valid for instruction prompts")

    ids = [vocab.bos, vocab.task_tag(kind)]
    for f in context_frames:
        ids.extend(_frame_span(vocab, f))
    ids.extend(_frame_span(vocab, goal_frame))
    if kind == INSTR and prev_instruction:
        for t in prev_instruction:
            if not 0 <= t < vocab.n_text:
                raise TargetKindMismatch(f"prev_instruction token {t} is not a text id")
        ids.extend(prev_instruction)
    ids.append(vocab.sep)
    labels = [MASKED] * len(ids)

    if target is not None:
        if kind == VIZ:
            if len(target) != span_len:
                raise TargetKindMismatch(
                    f"viz target must have {span_len} tokens, got {len(target)}")
            unified = [vocab.visual_id(t) for t in target]
        else:
            for t in target:
                if not 0 <= t < vocab.n_text:
                    raise TargetKindMismatch(f"instruction target token {t} is not a text id")
            unified = list(target)
        ids.extend(unified)
        labels.extend(unified)
        ids.append(vocab.eos)
        labels.append(vocab.eos)
    return TokenSequence(ids, labels)
