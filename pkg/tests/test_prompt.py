"""Conversation builders and motion classification."""

import numpy as np
import pytest

from worldloop import codec
from worldloop.codec import AbsoluteNumber, RelativeDiff, build_vocab, decode_action, encode_action
from worldloop.env import ControlSignal, VisionActionPair
from worldloop.prompt import (
    Lateral,
    Longitudinal,
    Role,
    build_multi_round,
    build_single_round,
    build_temporal_fusion,
    classify_motion,
    supervised_spans,
)

SCHEME = AbsoluteNumber(3)
VOCAB = build_vocab(SCHEME)
N_IMG = 64


def make_window(seed=0):
    rng = np.random.default_rng(seed)
    pairs = [
        VisionActionPair(rng.random((64, 64)), ControlSignal(rng.uniform(0, 15), rng.uniform(-0.5, 0.5)), t)
        for t in range(3)
    ]
    current = rng.random((64, 64))
    target = ControlSignal(rng.uniform(0, 15), rng.uniform(-0.5, 0.5))
    return pairs, current, target


def span_tokens(conv, span):
    toks = VOCAB.decode(conv.ids[span[0] : span[1]])
    assert toks[-1] == codec.STOP
    return toks[:-1]


def test_multi_round_mask_popcount():
    pairs, current, target = make_window()
    conv = build_multi_round(pairs, current, VOCAB, SCHEME, N_IMG, target_action=target)
    actions = [pairs[1].action, pairs[2].action, target]
    prevs = [pairs[0].action, pairs[1].action, pairs[2].action]
    expected = sum(len(encode_action(a, SCHEME, p)) for a, p in zip(actions, prevs)) + 3
    assert int(conv.loss_mask.sum()) == expected


def test_multi_round_visual_slot_count():
    pairs, current, target = make_window()
    conv = build_multi_round(pairs, current, VOCAB, SCHEME, N_IMG, target_action=target)
    assert len(conv.visual_slots) == 4
    assert [s.frame_indices for s in conv.visual_slots] == [(0,), (1,), (2,), (3,)]
    for s in conv.visual_slots:
        ids = conv.ids[s.start : s.start + N_IMG]
        assert (ids == VOCAB.id(codec.IMG)).all()
        assert (conv.roles[s.start : s.start + N_IMG] == int(Role.HUMAN_VISUAL)).all()


def test_multi_round_supervised_spans_decode_to_ground_truth():
    pairs, current, target = make_window(7)
    conv = build_multi_round(pairs, current, VOCAB, SCHEME, N_IMG, target_action=target)
    spans = supervised_spans(conv)
    assert len(spans) == 3
    truth = [pairs[1].action, pairs[2].action, target]
    for span, want in zip(spans, truth):
        got = decode_action(span_tokens(conv, span), SCHEME)
        assert got.speed == pytest.approx(want.speed, abs=0.5e-3)
        assert got.steer == pytest.approx(want.steer, abs=0.5e-3)


def test_multi_round_relative_spans_decode_with_chain():
    scheme = RelativeDiff(3)
    vocab = build_vocab(scheme)
    pairs, current, target = make_window(9)
    conv = build_multi_round(pairs, current, vocab, scheme, N_IMG, target_action=target)
    spans = supervised_spans(conv)
    truth = [pairs[1].action, pairs[2].action, target]
    prevs = [pairs[0].action, pairs[1].action, pairs[2].action]
    for span, want, prev in zip(spans, truth, prevs):
        toks = vocab.decode(conv.ids[span[0] : span[1]])[:-1]
        got = decode_action(toks, scheme, prev=prev)
        assert got.speed == pytest.approx(want.speed, abs=0.5e-3)
        assert got.steer == pytest.approx(want.steer, abs=0.5e-3)


def test_single_round_mask_is_final_span_only():
    pairs, current, target = make_window()
    conv = build_single_round(pairs, current, VOCAB, SCHEME, N_IMG, target_action=target)
    target_tokens = encode_action(target, SCHEME, pairs[2].action)
    assert int(conv.loss_mask.sum()) == len(target_tokens) + 1
    assert len(conv.visual_slots) == 4
    spans = supervised_spans(conv)
    assert len(spans) == 1
    got = decode_action(span_tokens(conv, spans[0]), SCHEME)
    assert got.speed == pytest.approx(target.speed, abs=0.5e-3)


def test_single_and_multi_round_agree_up_to_separators():
    pairs, current, target = make_window(3)
    multi = build_multi_round(pairs, current, VOCAB, SCHEME, N_IMG, target_action=target)
    single = build_single_round(pairs, current, VOCAB, SCHEME, N_IMG, target_action=target)
    seps = {VOCAB.id(t) for t in (codec.HUMAN, codec.AGENT, codec.STOP)}
    strip = lambda conv: [int(i) for i in conv.ids if int(i) not in seps]
    assert strip(multi) == strip(single)


def test_temporal_fusion_single_slot():
    pairs, current, target = make_window()
    conv = build_temporal_fusion(pairs, current, VOCAB, SCHEME, N_IMG, target_action=target)
    assert len(conv.visual_slots) == 1
    assert conv.visual_slots[0].frame_indices == (0, 1, 2, 3)
    target_tokens = encode_action(target, SCHEME, pairs[2].action)
    assert int(conv.loss_mask.sum()) == len(target_tokens) + 1


def test_builders_deterministic_and_inference_form():
    pairs, current, target = make_window(5)
    a = build_multi_round(pairs, current, VOCAB, SCHEME, N_IMG, target_action=target)
    b = build_multi_round(pairs, current, VOCAB, SCHEME, N_IMG, target_action=target)
    assert np.array_equal(a.ids, b.ids)
    assert np.array_equal(a.loss_mask, b.loss_mask)
    inf = build_multi_round(pairs, current, VOCAB, SCHEME, N_IMG)
    # inference form: the two teacher-forced intermediate spans remain,
    # the target span is absent, and the round-3 agent turn is open
    n_intermediate = sum(
        len(encode_action(a, SCHEME, p)) + 1
        for a, p in [(pairs[1].action, pairs[0].action), (pairs[2].action, pairs[1].action)]
    )
    assert int(inf.loss_mask.sum()) == n_intermediate
    assert VOCAB.token(int(inf.ids[-1])) == codec.AGENT
    # prefix property: the inference sequence is a prefix of the training one
    assert np.array_equal(a.ids[: len(inf.ids)], inf.ids)


def test_wrong_history_length_raises():
    pairs, current, target = make_window()
    with pytest.raises(ValueError, match="3 history"):
        build_multi_round(pairs[:2], current, VOCAB, SCHEME, N_IMG, target_action=target)


def test_debug_render_contains_roles(tmp_path):
    pairs, current, target = make_window()
    conv = build_multi_round(pairs, current, VOCAB, SCHEME, N_IMG, target_action=target)
    text = conv.debug_render(VOCAB)
    assert "AGENT_ACTION" in text and "HUMAN_VISUAL" in text
    assert len(text.splitlines()) == len(conv)


# ---------------------------------------------------------------- motion


def test_motion_steady_straight():
    a = ControlSignal(5.0, 0.0)
    m = classify_motion(a, a)
    assert m.longitudinal == Longitudinal.STEADY_SPEED
    assert m.lateral == Lateral.STRAIGHT


def test_motion_negative_steer_is_right_turn():
    m = classify_motion(ControlSignal(5.0, 0.0), ControlSignal(5.0, -0.3))
    assert m.lateral == Lateral.TURNING_RIGHT


def test_motion_positive_dv_is_accelerating():
    m = classify_motion(ControlSignal(5.0, 0.0), ControlSignal(6.0, 0.0))
    assert m.longitudinal == Longitudinal.ACCELERATING


def test_motion_indices_stable():
    m = classify_motion(ControlSignal(0.0, 0.0), ControlSignal(2.0, 0.4))
    assert m.index == int(Longitudinal.ACCELERATING) * 3 + int(Lateral.TURNING_LEFT)
    seen = set()
    for dv in (-1.0, 0.0, 1.0):
        for steer in (-0.3, 0.0, 0.3):
            seen.add(classify_motion(ControlSignal(5.0, 0.0), ControlSignal(5.0 + dv, steer)).index)
    assert seen == set(range(9))


def test_motion_scale_consistency():
    # growing an accelerating delta never flips the class
    prev = ControlSignal(5.0, 0.0)
    for dv in np.linspace(0.21, 10.0, 50):
        m = classify_motion(prev, ControlSignal(5.0 + dv, 0.0))
        assert m.longitudinal == Longitudinal.ACCELERATING
