"""Record stream format and simulator tests.

Statistical expectations (presence rate, confusion rows, dwell lengths,
score calibration) are checked with sampling oracles at pinned seeds.
"""

from __future__ import annotations

import numpy as np
import pytest

from seqannot.hmm import StateSpace
from seqannot.providers import (
    DEFAULT_STATE_NAMES,
    FrameRecord,
    RecordFormatError,
    RecordStream,
    SimConfig,
    default_emission,
    default_transitions,
    parse_records,
    serialize_records,
    simulate_records,
)

AB = StateSpace(("a", "b"))


def small_stream() -> RecordStream:
    records = [
        FrameRecord(0, True, (0.7, 0.3), None, 0),
        FrameRecord(1, True, (0.6, 0.4), 0.25, 0),
        FrameRecord(2, False, None, None, None),
        FrameRecord(3, True, (0.1, 0.9), None, 1),
    ]
    return RecordStream.from_records(AB, records)


# --- stream construction ------------------------------------------------------


def test_stream_round_trips_records():
    stream = small_stream()
    assert len(stream) == 4
    assert stream.record(1) == FrameRecord(1, True, (0.6, 0.4), 0.25, 0)
    assert stream.record(2) == FrameRecord(2, False, None, None, None)
    assert [r.frame_index for r in stream] == [0, 1, 2, 3]


def test_stream_rejects_probs_on_absent_frames():
    with pytest.raises(ValueError):
        RecordStream.from_records(AB, [FrameRecord(0, False, (0.5, 0.5), None, None)])
    with pytest.raises(ValueError):
        RecordStream.from_records(AB, [FrameRecord(0, True, None, None, None)])


def test_stream_rejects_bad_prob_sum():
    with pytest.raises(ValueError):
        RecordStream.from_records(AB, [FrameRecord(0, True, (0.7, 0.4), None, None)])


def test_stream_rejects_score_without_adjacent_present_pair():
    with pytest.raises(ValueError):
        RecordStream.from_records(AB, [FrameRecord(0, True, (0.5, 0.5), 0.5, None)])
    with pytest.raises(ValueError):
        RecordStream.from_records(
            AB,
            [
                FrameRecord(0, False, None, None, None),
                FrameRecord(1, True, (0.5, 0.5), 0.5, None),
            ],
        )
    # An index gap breaks adjacency even when both frames are present.
    with pytest.raises(ValueError):
        RecordStream.from_records(
            AB,
            [
                FrameRecord(0, True, (0.5, 0.5), None, None),
                FrameRecord(2, True, (0.5, 0.5), 0.5, None),
            ],
        )


def test_stream_rejects_non_increasing_indices():
    with pytest.raises(ValueError):
        RecordStream.from_records(
            AB,
            [
                FrameRecord(1, True, (0.5, 0.5), None, None),
                FrameRecord(1, True, (0.5, 0.5), None, None),
            ],
        )


def test_stream_rejects_empty():
    with pytest.raises(ValueError):
        RecordStream.from_records(AB, [])


# --- serialization ------------------------------------------------------------


def test_serialize_parse_round_trip_small():
    stream = small_stream()
    text = serialize_records(stream)
    again = parse_records(text)
    assert again == stream
    # Serializing the parse reproduces the exact bytes.
    assert serialize_records(again) == text


def test_round_trip_preserves_awkward_floats():
    probs = (0.1 + 0.2, 1.0 - (0.1 + 0.2))  # 0.30000000000000004 exactly
    stream = RecordStream.from_records(
        AB,
        [
            FrameRecord(0, True, probs, None, 0),
            FrameRecord(1, True, (0.25, 0.75), 1.0 / 3.0, None),
        ],
    )
    again = parse_records(serialize_records(stream))
    assert again.probs[0, 0] == probs[0]
    assert again.score[1] == 1.0 / 3.0
    assert again == stream


def test_parse_empty_input_is_an_error():
    with pytest.raises(RecordFormatError):
        parse_records("")
    with pytest.raises(RecordFormatError):
        parse_records("states\ta\tb\n")


def test_parse_errors_name_line_and_field():
    header = "states\ta\tb\n"
    good = "0\t1\t0.5\t0.5\tnull\ta\n"
    cases = [
        ("x\t1\t0.5\t0.5\tnull\tnull\n", "frame_index"),
        ("1\t2\t0.5\t0.5\tnull\tnull\n", "object_present"),
        ("1\t1\t0.5\tnull\tnull\tnull\n", "class_probs"),
        ("1\t1\t0.9\t0.3\tnull\tnull\n", "class_probs"),
        ("1\t1\t0.5\t0.5\t2.0\tnull\n", "change_score"),
        ("1\t1\t0.5\t0.5\tnull\tzzz\n", "ground_truth"),
        ("1\t1\t0.5\t0.5\n", "field count"),
    ]
    for bad_line, field in cases:
        with pytest.raises(RecordFormatError) as err:
            parse_records(header + good + bad_line)
        assert "line 3" in str(err.value)
        assert field in str(err.value)


def test_parse_requires_header():
    with pytest.raises(RecordFormatError):
        parse_records("0\t1\t0.5\t0.5\tnull\tnull\n")


def test_parse_rejects_score_after_gap():
    text = "states\ta\tb\n" "0\t0\tnull\tnull\tnull\tnull\n" "1\t1\t0.5\t0.5\t0.4\tnull\n"
    with pytest.raises(RecordFormatError) as err:
        parse_records(text)
    assert "line 3" in str(err.value)


def test_simulated_stream_round_trips():
    stream = simulate_records(SimConfig(length=5000, seed=42))
    again = parse_records(serialize_records(stream))
    assert again == stream


# --- simulator ----------------------------------------------------------------


def test_simulate_rejects_zero_length():
    with pytest.raises(ValueError):
        simulate_records(SimConfig(length=0, seed=1))


def test_simulate_is_deterministic_per_seed():
    a = simulate_records(SimConfig(length=3000, seed=9))
    b = simulate_records(SimConfig(length=3000, seed=9))
    c = simulate_records(SimConfig(length=3000, seed=10))
    assert a == b
    assert a != c


def test_default_matrices_are_valid():
    for n in (2, 3, 6):
        trans = default_transitions(n)
        emission = default_emission(n)
        assert np.allclose(trans.sum(axis=1), 1.0, atol=1e-12)
        assert np.allclose(emission.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(trans > 0) and np.all(emission >= 0)
    assert np.diag(default_emission(6)).mean() == pytest.approx(0.754, abs=1e-12)


def test_presence_rate_matches_config():
    stream = simulate_records(SimConfig(length=100000, seed=3))
    assert abs(stream.present.mean() - 0.794) < 0.01


def test_presence_rate_one_has_no_gaps():
    stream = simulate_records(SimConfig(length=500, seed=3, presence_rate=1.0))
    assert stream.present.all()
    assert not np.isnan(stream.score[1:]).any()


def test_decision_confusion_matches_emission():
    # Flat transitions give every state enough dwells for a tight estimate;
    # the default hub/glance chain would starve the glance rows.
    trans = np.full((6, 6), 0.1)
    np.fill_diagonal(trans, 0.5)
    config = SimConfig(length=100000, seed=21, true_transitions=trans)
    stream = simulate_records(config)
    emission = default_emission(len(DEFAULT_STATE_NAMES))
    decisions = np.nanargmax(stream.probs[stream.present], axis=1)
    truth = stream.truth[stream.present]
    for k in range(6):
        rows = decisions[truth == k]
        got = np.bincount(rows, minlength=6) / rows.size
        tv = 0.5 * np.abs(got - emission[k]).sum()
        assert tv < 0.02


def test_dwell_lengths_are_geometric():
    trans = np.full((3, 3), 0.05)
    np.fill_diagonal(trans, 0.9)
    config = SimConfig(
        length=100000,
        seed=8,
        states=("s0", "s1", "s2"),
        true_transitions=trans,
        emission=np.eye(3),
    )
    stream = simulate_records(config)
    truth = stream.truth
    change = np.flatnonzero(truth[1:] != truth[:-1]) + 1
    # Interior runs only: both ends observed.
    runs = np.diff(change)
    assert abs(runs.mean() - 10.0) / 10.0 < 0.05


def test_change_scores_calibrated_at_half():
    config = SimConfig(
        length=200000,
        seed=13,
        presence_rate=1.0,
        change_tpr=0.8,
        change_fpr=0.2,
        true_transitions=default_transitions(6, hub_diagonal=0.7, diagonal=0.7),
    )
    stream = simulate_records(config)
    truth = stream.truth
    is_transition = np.zeros(len(stream), dtype=bool)
    is_transition[1:] = truth[1:] != truth[:-1]
    scored = ~np.isnan(stream.score)
    fired = stream.score >= 0.5
    tpr = fired[scored & is_transition].mean()
    fpr = fired[scored & ~is_transition].mean()
    assert abs(tpr - 0.8) < 0.01
    assert abs(fpr - 0.2) < 0.01


def test_transition_scores_dominate_null_scores():
    stream = simulate_records(SimConfig(length=200000, seed=29, presence_rate=1.0))
    truth = stream.truth
    is_transition = np.zeros(len(stream), dtype=bool)
    is_transition[1:] = truth[1:] != truth[:-1]
    scored = ~np.isnan(stream.score)
    trans_scores = stream.score[scored & is_transition]
    null_scores = stream.score[scored & ~is_transition]
    for threshold in np.linspace(0.05, 0.95, 19):
        assert (trans_scores >= threshold).mean() >= (null_scores >= threshold).mean() - 0.01


def test_noiseless_config_pins_scores():
    config = SimConfig(
        length=2000, seed=5, presence_rate=1.0, change_tpr=1.0, change_fpr=0.0, score_noise=0.0
    )
    stream = simulate_records(config)
    truth = stream.truth
    is_transition = np.zeros(len(stream), dtype=bool)
    is_transition[1:] = truth[1:] != truth[:-1]
    scored = ~np.isnan(stream.score)
    assert (stream.score[scored & is_transition] == 1.0).all()
    assert (stream.score[scored & ~is_transition] < 0.1).all()
