"""Codec schemes: spec-pinned token layouts, round-trip quantization
bounds, vocabulary stability, parse errors."""

import numpy as np
import pytest

from worldloop.codec import (
    AbsoluteNumber,
    Num2English,
    ParseError,
    RelativeDiff,
    SpecialToken,
    build_vocab,
    decode_action,
    encode_action,
    encode_action_full,
    make_scheme,
    round_half_away,
)
from worldloop.env import ControlSignal


def payloads(tokens):
    """The two payloads between <num_start>/<num_end>."""
    out, cur, inside = [], None, False
    for t in tokens:
        if t == "<num_start>":
            cur, inside = [], True
        elif t == "<num_end>":
            out.append(cur)
            inside = False
        elif inside:
            cur.append(t)
    return out


# ---------------------------------------------------------------- layout


def test_absolute_zero_speed_payload_is_single_zero():
    toks = encode_action(ControlSignal(0.0, 0.0), AbsoluteNumber(3))
    assert toks[:2] == ["<speed>", "<num_start>"]
    assert payloads(toks)[0] == ["0"]


def test_absolute_d3_speed_6_5_is_6500():
    toks = encode_action(ControlSignal(6.5, 0.0), AbsoluteNumber(3))
    assert payloads(toks)[0] == ["6", "5", "0", "0"]


def test_absolute_layout_frame():
    toks = encode_action(ControlSignal(1.25, -0.375), AbsoluteNumber(2))
    sp, st = payloads(toks)
    assert sp == ["1", "2", "5"]
    assert st == ["-", "3", "8"]  # -0.375 rounds away from zero to -0.38
    assert toks[0] == "<speed>"
    assert toks[toks.index("<num_end>") + 1] == "<steer>"


def test_special_token_midpoint_bin():
    scheme = SpecialToken(bins=256)
    toks = encode_action(ControlSignal(0.0, 0.0), scheme)
    assert payloads(toks)[1] == ["<bin_128>"]  # steer 0 in [-0.5, 0.5]


def test_special_token_clamp_flag():
    scheme = SpecialToken(bins=256)
    _, clamped = encode_action_full(ControlSignal(99.0, 0.0), scheme)
    assert clamped
    _, clamped = encode_action_full(ControlSignal(5.0, 0.0), scheme)
    assert not clamped


def test_bin0_decodes_to_bin_center():
    scheme = SpecialToken(bins=2, speed_range=(0.0, 15.0), steer_range=(-0.5, 0.5))
    toks = ["<speed>", "<num_start>", "<bin_0>", "<num_end>",
            "<steer>", "<num_start>", "<bin_0>", "<num_end>"]
    a = decode_action(toks, scheme)
    assert a.steer == pytest.approx(-0.25)
    assert a.speed == pytest.approx(3.75)


def test_english_six_point_five():
    toks = encode_action(ControlSignal(6.5, 0.0), Num2English(1))
    assert payloads(toks)[0] == ["six", "point", "five"]


def test_english_minus_two_point_five_zero():
    toks = encode_action(ControlSignal(0.0, -2.5), Num2English(2))
    assert payloads(toks)[1] == ["minus", "two", "point", "five", "zero"]


def test_english_d0_has_no_point():
    toks = encode_action(ControlSignal(12.0, 0.0), Num2English(0))
    assert payloads(toks)[0] == ["one", "two"]


def test_relative_first_frame_emits_zero_diff():
    toks = encode_action(ControlSignal(7.3, 0.2), RelativeDiff(3), prev=None)
    assert payloads(toks) == [["0"], ["0"]]


def test_relative_diff_values():
    prev = ControlSignal(5.0, 0.1)
    toks = encode_action(ControlSignal(5.25, 0.05), RelativeDiff(2), prev=prev)
    assert payloads(toks) == [["2", "5"], ["-", "5"]]


def test_rounding_half_away_from_zero():
    assert round_half_away(0.5, 0) == 1
    assert round_half_away(-0.5, 0) == -1
    assert round_half_away(2.345, 2) == 235  # 234.5 rounds away
    assert round_half_away(-2.345, 2) == -235


# ---------------------------------------------------------------- round trip


@pytest.mark.parametrize("decimals", [0, 1, 2, 3])
def test_absolute_round_trip_bound(decimals):
    rng = np.random.default_rng(decimals)
    scheme = AbsoluteNumber(decimals)
    bound = 0.5 * 10.0**-decimals
    for _ in range(2500):
        a = ControlSignal(rng.uniform(0, 15), rng.uniform(-0.5, 0.5))
        d = decode_action(encode_action(a, scheme), scheme)
        assert abs(d.speed - a.speed) <= bound
        assert abs(d.steer - a.steer) <= bound


def test_relative_round_trip_bound_chained():
    rng = np.random.default_rng(1)
    scheme = RelativeDiff(3)
    bound = 0.5e-3
    # walk a chain: quantization error must stay within one step's bound
    true_prev = None
    decoded_prev = None
    for i in range(10_000):
        a = ControlSignal(rng.uniform(0, 15), rng.uniform(-0.5, 0.5))
        toks = encode_action(a, scheme, prev=true_prev)
        d = decode_action(toks, scheme, prev=decoded_prev if decoded_prev else a)
        assert abs(d.speed - a.speed) <= bound, f"step {i}"
        assert abs(d.steer - a.steer) <= bound, f"step {i}"
        true_prev, decoded_prev = a, d


def test_english_round_trip_bound():
    rng = np.random.default_rng(2)
    scheme = Num2English(3)
    for _ in range(2500):
        a = ControlSignal(rng.uniform(0, 15), rng.uniform(-0.5, 0.5))
        d = decode_action(encode_action(a, scheme), scheme)
        assert abs(d.speed - a.speed) <= 0.5e-3
        assert abs(d.steer - a.steer) <= 0.5e-3


def test_special_round_trip_bound():
    rng = np.random.default_rng(3)
    scheme = SpecialToken(bins=256)
    half_w_speed = 15.0 / 256 / 2
    half_w_steer = 1.0 / 256 / 2
    for _ in range(2500):
        a = ControlSignal(rng.uniform(0, 15), rng.uniform(-0.5, 0.5))
        d = decode_action(encode_action(a, scheme), scheme)
        assert abs(d.speed - a.speed) <= half_w_speed + 1e-12
        assert abs(d.steer - a.steer) <= half_w_steer + 1e-12


def test_decode_never_raises_on_encoder_output():
    rng = np.random.default_rng(4)
    schemes = [AbsoluteNumber(2), RelativeDiff(1), Num2English(3), SpecialToken(16)]
    prev = ControlSignal(1.0, 0.0)
    for scheme in schemes:
        for _ in range(200):
            a = ControlSignal(rng.uniform(0, 15), rng.uniform(-0.5, 0.5))
            decode_action(encode_action(a, scheme, prev=prev), scheme, prev=prev)


# ---------------------------------------------------------------- errors


def test_truncated_stream_raises_parse_error():
    toks = encode_action(ControlSignal(3.0, 0.1), AbsoluteNumber(3))
    with pytest.raises(ParseError):
        decode_action(toks[:-1], AbsoluteNumber(3))


def test_parse_error_carries_position():
    toks = ["<speed>", "<num_start>", "7", "oops", "<num_end>",
            "<steer>", "<num_start>", "1", "<num_end>"]
    with pytest.raises(ParseError) as err:
        decode_action(toks, AbsoluteNumber(3))
    assert err.value.position == 3


def test_empty_digits_raise():
    toks = ["<speed>", "<num_start>", "<num_end>",
            "<steer>", "<num_start>", "1", "<num_end>"]
    with pytest.raises(ParseError, match="empty"):
        decode_action(toks, AbsoluteNumber(3))


def test_relative_decode_requires_prev():
    toks = encode_action(ControlSignal(3.0, 0.1), RelativeDiff(3))
    with pytest.raises(ValueError, match="previous"):
        decode_action(toks, RelativeDiff(3))


# ---------------------------------------------------------------- vocab


def test_absolute_vocab_has_exactly_ten_digit_tokens():
    vocab = build_vocab(AbsoluteNumber(3))
    digits = [t for t in vocab.id_to_token if t in set("0123456789")]
    assert len(digits) == 10


def test_special_vocab_has_bins():
    vocab = build_vocab(SpecialToken(bins=256))
    bins = [t for t in vocab.id_to_token if t.startswith("<bin_")]
    assert len(bins) == 256


def test_vocab_stable_across_builds():
    a = build_vocab(Num2English(2))
    b = build_vocab(Num2English(2))
    assert a.id_to_token == b.id_to_token


def test_vocab_dump_format(tmp_path):
    vocab = build_vocab(AbsoluteNumber(3))
    path = tmp_path / "vocab.tsv"
    vocab.dump(path)
    lines = path.read_text().splitlines()
    assert len(lines) == vocab.size
    token, idx = lines[0].split("\t")
    assert vocab.id(token) == int(idx) == 0


def test_make_scheme_factory():
    assert make_scheme("absolute", decimals=2).id == "absolute-d2"
    assert make_scheme("special", bins=8).id == "special-b8"
    with pytest.raises(ValueError, match="unknown scheme"):
        make_scheme("nope")
