"""Release gate: each test pins one externally promised behavior end to end.

Every check here runs against the public API only and is self-contained;
oracles are independent re-implementations (exhaustive search, product
loops, counting estimators), never the code under test.
"""

from __future__ import annotations

import json
import math
import threading
import time
import urllib.error
import urllib.request
from itertools import product

import numpy as np
import pytest

from seqannot.evaluation import (
    PipelineParams,
    SweepSpec,
    replay_metrics,
    sweep,
)
from seqannot.hmm import (
    HmmModel,
    StateSpace,
    estimate_emission,
    estimate_model,
    stable_state_score,
    unchanged_log_prob,
    viterbi,
)
from seqannot.providers import (
    RecordStream,
    SimConfig,
    default_emission,
    default_transitions,
    simulate_records,
)
from seqannot.pupil import BinaryImage, GrayImage, NoPupilError, extract_pupil, morphology
from seqannot.service import AnnotationService, RejectedLabelsError, make_server


def _random_model(rng, n):
    return HmmModel(
        StateSpace(tuple(f"s{k}" for k in range(n))),
        rng.dirichlet(np.ones(n)),
        rng.dirichlet(np.ones(n), size=n),
        rng.dirichlet(np.ones(n), size=n),
    )


def test_01_decoder_matches_exhaustive_search():
    rng = np.random.default_rng(11)
    started = time.perf_counter()
    for trial in range(200):
        n = int(rng.integers(2, 5))
        m = int(rng.integers(1, 9))
        model = _random_model(rng, n)
        obs = rng.integers(0, n, size=m)
        got = viterbi(model, obs)

        paths = np.array(list(product(range(n), repeat=m)))
        logp = np.log(model.priors)[paths[:, 0]] + np.log(model.emission)[paths[:, 0], obs[0]]
        for t in range(1, m):
            logp = logp + np.log(model.transitions)[paths[:, t - 1], paths[:, t]]
            logp = logp + np.log(model.emission)[paths[:, t], obs[t]]
        best = float(logp.max())

        assert abs(got.log_v_star - best) < 1e-9, trial
        mine = int(np.flatnonzero((paths == np.array(got.path)).all(axis=1))[0])
        assert logp[mine] > best - 1e-9, trial
        # distinct paths can tie bit-exactly (same factor multiset), so the
        # tuple itself is only pinned when the argmax is unique by a margin
        if (logp < best - 1e-6).sum() == logp.size - 1:
            assert got.path == tuple(int(s) for s in paths[int(np.argmax(logp))]), trial
    assert time.perf_counter() - started < 10.0


def test_02_unchanged_likelihood_matches_product_loop():
    rng = np.random.default_rng(11)
    for trial in range(1000):
        n = int(rng.choice((2, 3, 4, 6)))
        m = int(rng.integers(1, 13))
        model = _random_model(rng, n)
        obs = rng.integers(0, n, size=m)
        state = int(rng.integers(0, n))
        prod = float(model.emission[state, obs[0]])
        for t in range(1, m):
            prod *= float(model.transitions[state, state])
            prod *= float(model.emission[state, obs[t]])
        assert abs(unchanged_log_prob(model, obs, state) - math.log(prod)) < 1e-12, trial

    # uniform priors + identity emission: the ratio exceeds 1 and equals |S|
    # (up to log/exp rounding, far below every other tolerance in this file)
    for n in (2, 3, 4, 6):
        states = StateSpace(tuple(f"s{k}" for k in range(n)))
        model = HmmModel(states, np.full(n, 1.0 / n), rng.dirichlet(np.ones(n), size=n), np.eye(n))
        for m in (1, 3, 7):
            score = stable_state_score(model, np.full(m, n - 1, dtype=np.int64))
            assert score.best_state == n - 1
            assert score.v_u > 1.0
            assert abs(score.v_u - n) < 1e-12 * n


def _dwell_truth(rng, n, length, low=2, high=9):
    out: list[int] = []
    state = int(rng.integers(0, n))
    while len(out) < length:
        out.extend([state] * int(rng.integers(low, high)))
        state = (state + int(rng.integers(1, n))) % n
    del out[length:]
    while len(out) >= 2 and out[-1] != out[-2]:
        out.pop()
    return np.array(out, dtype=np.int64)


def test_03_noiseless_stream_needs_no_manual_frames():
    rng = np.random.default_rng(7)
    n = 6
    truth = _dwell_truth(rng, n, 4000)
    length = truth.size
    changed = np.flatnonzero(np.diff(truth) != 0) + 1
    dwells = np.diff(np.concatenate(([0], changed, [length])))
    assert dwells.min() >= 2

    probs = np.full((length, n), 0.02 / (n - 1))
    probs[np.arange(length), truth] = 0.98
    score = np.zeros(length)
    score[changed] = 1.0
    score[0] = np.nan
    stream = RecordStream(
        StateSpace(tuple(f"s{k}" for k in range(n))),
        np.arange(length, dtype=np.int64),
        np.ones(length, dtype=bool),
        probs,
        score,
        truth,
    )
    model = HmmModel(stream.states, np.full(n, 1.0 / n), default_transitions(n), np.eye(n))
    point = replay_metrics(stream, model, PipelineParams())
    assert point.manual_frames == 0
    assert point.accuracy == 1.0


def test_04_saturated_changes_give_no_reduction():
    rng = np.random.default_rng(7)
    n = 6
    length = 2500
    truth = rng.integers(0, n, size=length)
    probs = np.full((length, n), 1.0 / n)
    score = np.full(length, 0.95)
    score[0] = np.nan
    stream = RecordStream(
        StateSpace(tuple(f"s{k}" for k in range(n))),
        np.arange(length, dtype=np.int64),
        np.ones(length, dtype=bool),
        probs,
        score,
        truth,
    )
    model = HmmModel(stream.states, np.full(n, 1.0 / n), default_transitions(n), np.eye(n))
    point = replay_metrics(stream, model, PipelineParams())
    assert point.reduction_factor == 1.0
    assert point.manual_frames == point.total_frames
    assert point.accuracy == 1.0


def test_05_default_sweep_spans_pareto_frontier():
    assert abs(float(np.diag(default_emission(6)).mean()) - 0.754) < 1e-9
    spec = SweepSpec(
        config=SimConfig(length=10**6, seed=33, presence_rate=1.0),
        seed_frames=4000,
    )
    started = time.perf_counter()
    result = sweep(spec)
    assert time.perf_counter() - started < 300.0

    assert result.failures == ()
    frontier = [p for p, keep in zip(result.points, result.pareto) if keep]
    assert len(frontier) >= 3
    reductions = [p.reduction_factor for p in frontier]
    assert max(reductions) >= 5.0 * min(reductions)
    most = max(frontier, key=lambda p: p.reduction_factor)
    least = min(frontier, key=lambda p: p.reduction_factor)
    assert most.accuracy < least.accuracy


def test_06_simulator_presence_and_confusion_match_config():
    stream = simulate_records(SimConfig(length=10**5, seed=1))
    assert abs(float(stream.present.mean()) - 0.794) <= 0.01

    # balanced dwells so each truth row collects enough coherent draws for
    # the 0.02 bound to be above sampling noise
    transitions = np.full((6, 6), 0.08)
    np.fill_diagonal(transitions, 0.6)
    conf = simulate_records(
        SimConfig(length=10**5, seed=1, presence_rate=1.0, true_transitions=transitions)
    )
    emission = default_emission(6)
    decisions = conf.probs.argmax(axis=1)
    for k in range(6):
        rows = decisions[conf.truth == k]
        assert rows.size > 5000
        freq = np.bincount(rows, minlength=6) / rows.size
        assert 0.5 * float(np.abs(freq - emission[k]).sum()) < 0.02


def test_07_sweep_csv_is_byte_identical_across_runs():
    spec = SweepSpec(
        config=SimConfig(length=40000, seed=9, presence_rate=1.0),
        seed_frames=2000,
    )
    first = sweep(spec).to_csv()
    second = sweep(spec).to_csv()
    assert first.encode() == second.encode()


def test_08_pupil_geometry_and_morphology_laws():
    rng = np.random.default_rng(3)
    width, height = 48, 40
    frame = [(0.0, 0.0), (float(width), 0.0), (float(width), float(height)), (0.0, float(height))]
    yy, xx = np.mgrid[0:height, 0:width]
    for _ in range(100):
        # disk above the 2nd percentile of pixel mass, so the contrast
        # stretch keeps the image two-valued and the blob search exact
        radius = int(rng.integers(4, 9))
        cx = int(rng.integers(radius + 2, width - radius - 2))
        cy = int(rng.integers(radius + 2, height - radius - 2))
        disk = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius * radius
        eye = GrayImage.from_array(np.where(disk, 0.05, 0.9))
        got = extract_pupil(eye, frame)
        assert math.hypot(got.center[0] - cx, got.center[1] - cy) <= 1.0

    bar = np.full((height, width), 0.9)
    bar[18:22, 9:39] = 0.05  # 30x4 box, aspect 7.5
    with pytest.raises(NoPupilError):
        extract_pupil(GrayImage.from_array(bar), frame)

    for _ in range(1000):
        bits = rng.random((32, 32)) < rng.uniform(0.2, 0.8)
        img = BinaryImage.from_array(bits)
        for window in (3, 5):
            opened = morphology(img, "open", window)
            closed = morphology(img, "close", window)
            assert np.array_equal(morphology(opened, "open", window).bits, opened.bits)
            assert np.array_equal(morphology(closed, "close", window).bits, closed.bits)
            assert opened.bits.sum() <= bits.sum() <= closed.bits.sum()


def test_09_estimation_recovers_sampled_model():
    rng = np.random.default_rng(23)
    n = 6
    states = StateSpace(tuple(f"s{k}" for k in range(n)))
    priors = rng.dirichlet(np.full(n, 8.0))
    transitions = rng.dirichlet(np.full(n, 4.0), size=n)

    chains = np.empty((5000, 20), dtype=np.int64)
    chains[:, 0] = rng.choice(n, size=5000, p=priors)
    cumulative = transitions.cumsum(axis=1)
    for t in range(1, 20):
        u = rng.random(5000)
        chains[:, t] = (u[:, None] > cumulative[chains[:, t - 1]]).sum(axis=1)
    model = estimate_model(states, [row.tolist() for row in chains])
    assert 0.5 * float(np.abs(model.priors - priors).sum()) <= 0.05
    for k in range(n):
        assert 0.5 * float(np.abs(model.transitions[k] - transitions[k]).sum()) <= 0.05

    emission = rng.dirichlet(np.full(n, 6.0), size=n)
    truth = rng.integers(0, n, size=10**5)
    predicted = np.empty(truth.size, dtype=np.int64)
    cumulative = emission.cumsum(axis=1)
    u = rng.random(truth.size)
    predicted = (u[:, None] > cumulative[truth]).sum(axis=1)
    estimated = estimate_emission(states, predicted, truth)
    for k in range(n):
        assert 0.5 * float(np.abs(estimated[k] - emission[k]).sum()) <= 0.02


def _oracle_labels(stream, frames):
    names = stream.states.names
    return {str(f): names[int(stream.truth[stream.position(f)])] for f in frames}


def _http_json(method, url, body=None):
    data = json.dumps(body).encode() if body is not None else None
    request = urllib.request.Request(
        url, data=data, method=method, headers={"Content-Type": "application/json"}
    )
    try:
        with urllib.request.urlopen(request) as response:
            return response.status, json.loads(response.read())
    except urllib.error.HTTPError as err:
        return err.code, json.loads(err.read())


def test_10_queue_service_contract(tmp_path):
    params = PipelineParams(c_min=15.0, v_u_min=3.0)
    stream = simulate_records(SimConfig(length=240, seed=5, presence_rate=0.88))
    point = replay_metrics(stream, None, params, seed_frames=40)

    # leases hand entries out in enqueue order, and a submission that does
    # not cover the packet is rejected without losing the lease
    service = AnnotationService(stream, params, seed_frames=40)
    try:
        handed: list[int] = []
        rejected = False
        deadline = time.monotonic() + 30
        while not service.drained:
            assert service.wait_idle(10), "pipeline never settled"
            if service.drained:
                break
            entry = service.next_packet(60)
            if entry is None:
                assert time.monotonic() < deadline, "queue stalled"
                continue
            handed.append(entry["entry_id"])
            labels = _oracle_labels(stream, entry["frames"])
            if not rejected and len(labels) > 1:
                partial = dict(list(labels.items())[:-1])
                with pytest.raises(RejectedLabelsError) as excinfo:
                    service.submit_labels(entry["entry_id"], partial)
                assert excinfo.value.missing
                rejected = True
            service.submit_labels(entry["entry_id"], labels)
        assert rejected
        assert all(b > a for a, b in zip(handed, handed[1:]))
        progress = service.progress()
        assert progress["manual_frames"] == point.manual_frames
        assert progress["accuracy"] == point.accuracy
    finally:
        service.stop(timeout=2)

    # a journaled run survives a restart with identical durable state
    journal = tmp_path / "queue.journal"
    first = AnnotationService(stream, params, seed_frames=40, journal_path=journal)
    completed = 0
    try:
        while completed < 6:
            assert first.wait_idle(10)
            if first.drained:
                break
            entry = first.next_packet(60)
            if entry is None:
                continue
            first.submit_labels(entry["entry_id"], _oracle_labels(stream, entry["frames"]))
            completed += 1
        snapshot = first.queue_snapshot()
        partial_progress = first.progress()
    finally:
        first.stop(timeout=2)
    second = AnnotationService(stream, params, seed_frames=40, journal_path=journal)
    try:
        assert second.wait_idle(10)
        assert second.queue_snapshot() == snapshot
        assert second.progress() == partial_progress
    finally:
        second.stop(timeout=2)

    # a scripted oracle over plain HTTP drains the queue and lands on the
    # same counters as the in-process replay
    service = AnnotationService(stream, params, seed_frames=40)
    server = make_server(service, 0)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    base = f"http://127.0.0.1:{server.server_address[1]}"
    try:
        deadline = time.monotonic() + 30
        while True:
            status, reply = _http_json("GET", f"{base}/api/queue/next?lease=120")
            assert status == 200
            if reply["entry"] is None:
                if reply["drained"]:
                    break
                assert time.monotonic() < deadline, "queue stalled"
                time.sleep(0.005)
                continue
            entry = reply["entry"]
            status, ack = _http_json(
                "POST",
                f"{base}/api/queue/{entry['entry_id']}/labels",
                {"labels": _oracle_labels(stream, entry["frames"])},
            )
            assert status == 200 and ack["duplicate"] is False
        status, progress = _http_json("GET", f"{base}/api/progress")
        assert status == 200
        assert progress["state"] == "done"
        assert progress["total_frames"] == point.total_frames
        assert progress["manual_frames"] == point.manual_frames
        assert progress["auto_frames"] == point.auto_frames
        assert progress["reduction_factor"] == point.reduction_factor
        assert progress["accuracy"] == point.accuracy
    finally:
        server.shutdown()
        server.server_close()
        service.stop(timeout=2)
