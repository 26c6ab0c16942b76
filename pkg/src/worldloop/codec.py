"""Control-signal <-> token-string codecs and the action-token vocabulary.

Four interchangeable encodings:

* absolute  -- value rounded to d decimals, scaled by 10^d into a signed
  integer, spelled digit by digit.
* relative  -- same integerization applied to the change since the
  previous signal; decoding chains on previously decoded values, so the
  quantization error never compounds past one step's bound.
* special   -- each field quantized into one of B uniform bins over its
  configured range, emitted as a single bin token.
* english   -- the rounded decimal spelled in words ("minus", digit
  words, "point").

Every scheme uses the same frame around the payload:

    <speed> <num_start> ... <num_end> <steer> <num_start> ... <num_end>
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import WorldloopError
from .env.vehicle import ControlSignal


class ParseError(WorldloopError):
    """Token stream malformed for the scheme; carries the bad position."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at token position {position})")
        self.position = position


# tokens shared by every scheme, in fixed id order
PAD, SYS, IMG, HUMAN, AGENT, STOP = "<pad>", "<sys>", "<img>", "<human>", "<agent>", "<stop>"
SPEED_TAG, STEER_TAG, NUM_START, NUM_END, MINUS = "<speed>", "<steer>", "<num_start>", "<num_end>", "-"
BASE_TOKENS = [PAD, SYS, IMG, HUMAN, AGENT, STOP, SPEED_TAG, STEER_TAG, NUM_START, NUM_END, MINUS]
DIGITS = [str(i) for i in range(10)]
DIGIT_WORDS = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"]
WORD_MINUS, WORD_POINT = "minus", "point"


@dataclass(frozen=True)
class AbsoluteNumber:
    decimals: int = 3

    @property
    def id(self) -> str:
        return f"absolute-d{self.decimals}"


@dataclass(frozen=True)
class RelativeDiff:
    decimals: int = 3

    @property
    def id(self) -> str:
        return f"relative-d{self.decimals}"


@dataclass(frozen=True)
class Num2English:
    decimals: int = 3

    @property
    def id(self) -> str:
        return f"english-d{self.decimals}"


@dataclass(frozen=True)
class SpecialToken:
    bins: int = 256
    speed_range: tuple[float, float] = (0.0, 15.0)
    steer_range: tuple[float, float] = (-0.5, 0.5)

    @property
    def id(self) -> str:
        return f"special-b{self.bins}"


Scheme = AbsoluteNumber | RelativeDiff | Num2English | SpecialToken

SCHEME_NAMES = ("absolute", "relative", "english", "special")


def make_scheme(name: str, decimals: int = 3, bins: int = 256,
                speed_range=(0.0, 15.0), steer_range=(-0.5, 0.5)) -> Scheme:
    if name == "absolute":
        return AbsoluteNumber(decimals)
    if name == "relative":
        return RelativeDiff(decimals)
    if name == "english":
        return Num2English(decimals)
    if name == "special":
        return SpecialToken(bins, tuple(speed_range), tuple(steer_range))
    raise ValueError(f"unknown scheme {name!r}, expected one of {SCHEME_NAMES}")


def _check_decimals(d: int):
    if d not in (0, 1, 2, 3):
        raise ValueError(f"decimals must be in 0..3, got {d}")


class Vocab:
    """Bijective token <-> id map with stable ids for a given scheme."""

    def __init__(self, tokens: list[str]):
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(tokens)}
        if len(self.token_to_id) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def id(self, token: str) -> int:
        try:
            return self.token_to_id[token]
        except KeyError:
            raise KeyError(f"token {token!r} not in vocabulary") from None

    def token(self, idx: int) -> str:
        return self.id_to_token[idx]

    def encode(self, tokens: list[str]) -> np.ndarray:
        return np.array([self.id(t) for t in tokens], dtype=np.int64)

    def decode(self, ids) -> list[str]:
        return [self.id_to_token[int(i)] for i in ids]

    def dump(self, path):
        Path(path).write_text(
            "".join(f"{t}\t{i}\n" for i, t in enumerate(self.id_to_token)), encoding="utf-8"
        )


def build_vocab(scheme: Scheme) -> Vocab:
    tokens = list(BASE_TOKENS) + list(DIGITS)
    if isinstance(scheme, Num2English):
        tokens += DIGIT_WORDS + [WORD_MINUS, WORD_POINT]
    if isinstance(scheme, SpecialToken):
        if scheme.bins < 2:
            raise ValueError(f"special scheme needs >= 2 bins, got {scheme.bins}")
        tokens += [f"<bin_{k}>" for k in range(scheme.bins)]
    return Vocab(tokens)


def round_half_away(x: float, decimals: int) -> int:
    """Round to ``decimals`` places, ties away from zero, scaled to int."""
    s = 10.0**decimals
    return int(math.copysign(math.floor(abs(x) * s + 0.5), x))


def _int_digits(n: int) -> list[str]:
    out = [MINUS] if n < 0 else []
    out += list(str(abs(n)))
    return out


def _english_words(n: int, decimals: int) -> list[str]:
    out = [WORD_MINUS] if n < 0 else []
    m = abs(n)
    scale = 10**decimals
    out += [DIGIT_WORDS[int(c)] for c in str(m // scale)]
    if decimals > 0:
        out.append(WORD_POINT)
        out += [DIGIT_WORDS[int(c)] for c in str(m % scale).zfill(decimals)]
    return out


def _bin_index(x: float, lo: float, hi: float, bins: int) -> tuple[int, bool]:
    clamped = x < lo or x > hi
    x = min(max(x, lo), hi)
    width = (hi - lo) / bins
    k = int(math.floor((x - lo) / width))
    return min(k, bins - 1), clamped


def _bin_center(k: int, lo: float, hi: float, bins: int) -> float:
    width = (hi - lo) / bins
    return lo + (k + 0.5) * width


def encode_action_full(a: ControlSignal, scheme: Scheme, prev: ControlSignal | None = None):
    """Encode one control signal; returns (tokens, clamped_flag)."""
    clamped = False

    def payload(value: float, prev_value: float | None, field: str) -> list[str]:
        nonlocal clamped
        if isinstance(scheme, AbsoluteNumber):
            _check_decimals(scheme.decimals)
            return _int_digits(round_half_away(value, scheme.decimals))
        if isinstance(scheme, RelativeDiff):
            _check_decimals(scheme.decimals)
            base = value if prev_value is None else prev_value
            n = round_half_away(value, scheme.decimals) - round_half_away(base, scheme.decimals)
            return _int_digits(n)
        if isinstance(scheme, Num2English):
            _check_decimals(scheme.decimals)
            return _english_words(round_half_away(value, scheme.decimals), scheme.decimals)
        lo, hi = scheme.speed_range if field == "speed" else scheme.steer_range
        k, was_clamped = _bin_index(value, lo, hi, scheme.bins)
        clamped = clamped or was_clamped
        return [f"<bin_{k}>"]

    tokens = [SPEED_TAG, NUM_START]
    tokens += payload(a.speed, None if prev is None else prev.speed, "speed")
    tokens += [NUM_END, STEER_TAG, NUM_START]
    tokens += payload(a.steer, None if prev is None else prev.steer, "steer")
    tokens.append(NUM_END)
    return tokens, clamped


def encode_action(a: ControlSignal, scheme: Scheme, prev: ControlSignal | None = None) -> list[str]:
    return encode_action_full(a, scheme, prev)[0]


class _Cursor:
    def __init__(self, tokens):
        self.tokens = list(tokens)
        self.pos = 0

    def next(self) -> str:
        if self.pos >= len(self.tokens):
            raise ParseError("unexpected end of stream", self.pos)
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, token: str):
        got = self.next()
        if got != token:
            raise ParseError(f"expected {token!r}, got {got!r}", self.pos - 1)

    def collect_until(self, token: str) -> list[str]:
        out = []
        while True:
            tok = self.next()
            if tok == token:
                return out
            out.append(tok)


def _parse_int_digits(payload: list[str], pos: int) -> int:
    if not payload:
        raise ParseError("empty number payload", pos)
    sign = 1
    digits = payload
    if payload[0] == MINUS:
        sign = -1
        digits = payload[1:]
        if not digits:
            raise ParseError("minus sign with no digits", pos)
    for i, d in enumerate(digits):
        if d not in DIGITS:
            raise ParseError(f"unexpected token {d!r} in number", pos + (1 if sign < 0 else 0) + i)
    return sign * int("".join(digits))


def _parse_english(payload: list[str], pos: int) -> float:
    if not payload:
        raise ParseError("empty number payload", pos)
    i = 0
    sign = 1.0
    if payload[0] == WORD_MINUS:
        sign = -1.0
        i = 1
    int_digits = []
    while i < len(payload) and payload[i] in DIGIT_WORDS:
        int_digits.append(DIGIT_WORDS.index(payload[i]))
        i += 1
    if not int_digits:
        raise ParseError("no integer digits in english number", pos + i)
    value = float(int("".join(str(d) for d in int_digits)))
    if i < len(payload):
        if payload[i] != WORD_POINT:
            raise ParseError(f"unexpected token {payload[i]!r} in english number", pos + i)
        i += 1
        frac_digits = []
        while i < len(payload) and payload[i] in DIGIT_WORDS:
            frac_digits.append(DIGIT_WORDS.index(payload[i]))
            i += 1
        if not frac_digits:
            raise ParseError("'point' with no fraction digits", pos + i)
        if i < len(payload):
            raise ParseError(f"trailing token {payload[i]!r} in english number", pos + i)
        value += int("".join(str(d) for d in frac_digits)) / 10.0 ** len(frac_digits)
    return sign * value


def _parse_bin(payload: list[str], pos: int, bins: int) -> int:
    if len(payload) != 1:
        raise ParseError(f"bin payload must be one token, got {len(payload)}", pos)
    tok = payload[0]
    if not (tok.startswith("<bin_") and tok.endswith(">")):
        raise ParseError(f"expected a bin token, got {tok!r}", pos)
    k = int(tok[5:-1])
    if not 0 <= k < bins:
        raise ParseError(f"bin index {k} out of range [0, {bins})", pos)
    return k


def decode_action(tokens, scheme: Scheme, prev: ControlSignal | None = None) -> ControlSignal:
    """Inverse of encode_action. Raises ParseError on malformed streams."""
    if isinstance(scheme, RelativeDiff) and prev is None:
        raise ValueError("relative scheme decoding requires the previous signal")
    cur = _Cursor(tokens)

    def field(tag: str, prev_value: float | None) -> float:
        cur.expect(tag)
        cur.expect(NUM_START)
        start = cur.pos
        payload = cur.collect_until(NUM_END)
        if isinstance(scheme, AbsoluteNumber):
            return _parse_int_digits(payload, start) / 10.0**scheme.decimals
        if isinstance(scheme, RelativeDiff):
            delta = _parse_int_digits(payload, start)
            base = round_half_away(prev_value, scheme.decimals)
            return (base + delta) / 10.0**scheme.decimals
        if isinstance(scheme, Num2English):
            return _parse_english(payload, start)
        k = _parse_bin(payload, start, scheme.bins)
        lo, hi = scheme.speed_range if tag == SPEED_TAG else scheme.steer_range
        return _bin_center(k, lo, hi, scheme.bins)

    speed = field(SPEED_TAG, None if prev is None else prev.speed)
    steer = field(STEER_TAG, None if prev is None else prev.steer)
    if cur.pos != len(cur.tokens):
        raise ParseError(f"trailing token {cur.tokens[cur.pos]!r} after action", cur.pos)
    return ControlSignal(speed, steer)
