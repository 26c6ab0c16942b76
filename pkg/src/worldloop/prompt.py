"""Interleaved vision-action conversations and discrete motion prompts.

Three conversation layouts over the same content (system prompt, four
frames, four actions):

* multi_round    -- three human/agent rounds; all three agent action spans
  are supervised.
* single_round   -- one human turn holding the whole interleaved history;
  only the final action span is supervised.
* temporal_fusion -- the four frames mean-fused into a single visual slot,
  history actions concatenated; only the final span is supervised.

The motion prompt reduces a pair of consecutive control signals to one of
nine discrete driving states (steady/accelerating/decelerating x
straight/left/right) with a deterministic rule.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import codec
from .codec import Scheme, Vocab
from .env.vehicle import ControlSignal, VisionActionPair


class Role(IntEnum):
    SYSTEM = 0
    HUMAN_VISUAL = 1
    HUMAN_ACTION = 2
    AGENT_ACTION = 3
    STOP = 4


@dataclass(frozen=True)
class VisualSlot:
    start: int                      # first sequence position of the span
    frame_indices: tuple[int, ...]  # frames fused into this slot (usually one)


@dataclass
class Conversation:
    ids: np.ndarray        # int64 token ids
    roles: np.ndarray      # int8 Role values
    loss_mask: np.ndarray  # float64, 1.0 on supervised agent tokens + their stops
    visual_slots: tuple[VisualSlot, ...]
    n_img_tokens: int      # span length of each visual slot
    variant: str
    scheme_id: str

    def __len__(self):
        return len(self.ids)

    def debug_render(self, vocab: Vocab) -> str:
        lines = []
        for i, (tid, role, m) in enumerate(zip(self.ids, self.roles, self.loss_mask)):
            mark = "*" if m else " "
            lines.append(f"{i:4d} {mark} {Role(role).name:13s} {vocab.token(int(tid))}")
        return "\n".join(lines)


SYSTEM_PROMPT_LEN = 4  # fixed reserved-id prefix; content is structural only

VARIANTS = ("multi_round", "single_round", "temporal_fusion")


class _Builder:
    def __init__(self, vocab: Vocab, n_img_tokens: int):
        self.vocab = vocab
        self.n = n_img_tokens
        self.ids: list[int] = []
        self.roles: list[int] = []
        self.mask: list[float] = []
        self.slots: list[VisualSlot] = []

    def tok(self, token: str, role: Role, mask: float = 0.0):
        self.ids.append(self.vocab.id(token))
        self.roles.append(int(role))
        self.mask.append(mask)

    def tokens(self, tokens, role: Role, mask: float = 0.0):
        for t in tokens:
            self.tok(t, role, mask)

    def slot(self, frame_indices: tuple[int, ...]):
        self.slots.append(VisualSlot(len(self.ids), frame_indices))
        for _ in range(self.n):
            self.tok(codec.IMG, Role.HUMAN_VISUAL)

    def system(self):
        self.tok(codec.HUMAN, Role.SYSTEM)
        for _ in range(SYSTEM_PROMPT_LEN):
            self.tok(codec.SYS, Role.SYSTEM)

    def agent_span(self, tokens):
        self.tok(codec.AGENT, Role.SYSTEM)
        self.tokens(tokens, Role.AGENT_ACTION, 1.0)
        self.tok(codec.STOP, Role.STOP, 1.0)

    def open_agent(self):
        self.tok(codec.AGENT, Role.SYSTEM)

    def build(self, variant: str, scheme_id: str) -> Conversation:
        return Conversation(
            ids=np.array(self.ids, dtype=np.int64),
            roles=np.array(self.roles, dtype=np.int8),
            loss_mask=np.array(self.mask, dtype=np.float64),
            visual_slots=tuple(self.slots),
            n_img_tokens=self.n,
            variant=variant,
            scheme_id=scheme_id,
        )


def _encode_chain(pairs, target_action, scheme):
    """Token lists for A_{t-3..t-1} and (optionally) A_t, with the relative
    scheme chained on the true previous action."""
    actions = [p.action for p in pairs]
    encoded = []
    prev = None
    for a in actions:
        encoded.append(codec.encode_action(a, scheme, prev))
        prev = a
    target_tokens = None
    if target_action is not None:
        target_tokens = codec.encode_action(target_action, scheme, prev)
    return encoded, target_tokens


def _check_inputs(pairs):
    if len(pairs) != 3:
        raise ValueError(f"conversation needs exactly 3 history pairs, got {len(pairs)}")


def build_multi_round(
    pairs: list[VisionActionPair],
    current_frame,
    vocab: Vocab,
    scheme: Scheme,
    n_img_tokens: int = 64,
    target_action: ControlSignal | None = None,
) -> Conversation:
    """Round 1: human [sys, I_{t-3}, A_{t-3}, I_{t-2}], agent A_{t-2};
    round 2: human [I_{t-1}], agent A_{t-1}; round 3: human [I_t], agent
    A_t. All three agent spans supervised. Without ``target_action`` the
    sequence stops at the opened round-3 agent turn (inference form)."""
    _check_inputs(pairs)
    hist, target = _encode_chain(pairs, target_action, scheme)
    b = _Builder(vocab, n_img_tokens)
    b.system()
    b.slot((0,))
    b.tokens(hist[0], Role.HUMAN_ACTION)
    b.slot((1,))
    b.tok(codec.STOP, Role.STOP)
    b.agent_span(hist[1])
    b.tok(codec.HUMAN, Role.SYSTEM)
    b.slot((2,))
    b.tok(codec.STOP, Role.STOP)
    b.agent_span(hist[2])
    b.tok(codec.HUMAN, Role.SYSTEM)
    b.slot((3,))
    b.tok(codec.STOP, Role.STOP)
    if target is None:
        b.open_agent()
    else:
        b.agent_span(target)
    return b.build("multi_round", scheme.id)


def build_single_round(
    pairs: list[VisionActionPair],
    current_frame,
    vocab: Vocab,
    scheme: Scheme,
    n_img_tokens: int = 64,
    target_action: ControlSignal | None = None,
) -> Conversation:
    """One human turn with the whole interleaved history; only the final
    action span is supervised."""
    _check_inputs(pairs)
    hist, target = _encode_chain(pairs, target_action, scheme)
    b = _Builder(vocab, n_img_tokens)
    b.system()
    for i in range(3):
        b.slot((i,))
        b.tokens(hist[i], Role.HUMAN_ACTION)
    b.slot((3,))
    b.tok(codec.STOP, Role.STOP)
    if target is None:
        b.open_agent()
    else:
        b.agent_span(target)
    return b.build("single_round", scheme.id)


def build_temporal_fusion(
    pairs: list[VisionActionPair],
    current_frame,
    vocab: Vocab,
    scheme: Scheme,
    n_img_tokens: int = 64,
    target_action: ControlSignal | None = None,
) -> Conversation:
    """All four frames mean-fused into one visual slot; action tokens
    concatenated; only the final span is supervised."""
    _check_inputs(pairs)
    hist, target = _encode_chain(pairs, target_action, scheme)
    b = _Builder(vocab, n_img_tokens)
    b.system()
    b.slot((0, 1, 2, 3))
    for tokens in hist:
        b.tokens(tokens, Role.HUMAN_ACTION)
    b.tok(codec.STOP, Role.STOP)
    if target is None:
        b.open_agent()
    else:
        b.agent_span(target)
    return b.build("temporal_fusion", scheme.id)


BUILDERS = {
    "multi_round": build_multi_round,
    "single_round": build_single_round,
    "temporal_fusion": build_temporal_fusion,
}


def supervised_spans(conv: Conversation) -> list[tuple[int, int]]:
    """Contiguous [start, stop) runs of supervised positions."""
    idx = np.flatnonzero(conv.loss_mask > 0)
    spans = []
    if idx.size == 0:
        return spans
    start = prev = int(idx[0])
    for i in idx[1:]:
        i = int(i)
        if i != prev + 1:
            spans.append((start, prev + 1))
            start = i
        prev = i
    spans.append((start, prev + 1))
    return spans


# ---------------------------------------------------------------- motion


class Longitudinal(IntEnum):
    STEADY_SPEED = 0
    ACCELERATING = 1
    DECELERATING = 2


class Lateral(IntEnum):
    STRAIGHT = 0
    TURNING_LEFT = 1
    TURNING_RIGHT = 2


@dataclass(frozen=True)
class MotionPrompt:
    longitudinal: Longitudinal
    lateral: Lateral

    @property
    def index(self) -> int:
        """Stable id in [0, 9)."""
        return int(self.longitudinal) * 3 + int(self.lateral)

    def describe(self) -> str:
        return f"{self.longitudinal.name.lower()},{self.lateral.name.lower()}"


N_MOTION_CLASSES = 9


def classify_motion(
    prev: ControlSignal,
    cur: ControlSignal,
    eps_speed: float = 0.2,
    eps_steer: float = 0.05,
) -> MotionPrompt:
    """Deterministic rule replacing a language-model paraphrase: threshold
    the speed change and the current steer angle. Negative steer is a
    right turn."""
    dv = cur.speed - prev.speed
    if dv > eps_speed:
        longitudinal = Longitudinal.ACCELERATING
    elif dv < -eps_speed:
        longitudinal = Longitudinal.DECELERATING
    else:
        longitudinal = Longitudinal.STEADY_SPEED
    if cur.steer > eps_steer:
        lateral = Lateral.TURNING_LEFT
    elif cur.steer < -eps_steer:
        lateral = Lateral.TURNING_RIGHT
    else:
        lateral = Lateral.STRAIGHT
    return MotionPrompt(longitudinal, lateral)
