import json
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualguide._validation import ValidationError
from dualguide.metrics import (COLUMNS, EvalParseError, EvalRecord, aggregate_report, bootstrap_coverage, iou,
                               load_eval, match_boxes, mean_iou, pairwise_cosine_mean, parse_eval)
from oracles import double_loop_cosine, raster_iou


def test_worked_example():
    assert iou((0, 0, 0.5, 0.5), (0.25, 0.25, 0.75, 0.75)) == pytest.approx(1 / 7, abs=1e-12)
    assert raster_iou((0, 0, 0.5, 0.5), (0.25, 0.25, 0.75, 0.75)) == pytest.approx(0.142857, abs=1e-3)


def test_iou_trivial_cases():
    assert iou((0.1, 0.2, 0.5, 0.6), (0.1, 0.2, 0.5, 0.6)) == 1.0
    assert iou((0, 0, 0.3, 0.3), (0.5, 0.5, 1, 1)) == 0.0
    assert iou((0, 0, 0.5, 0.5), (0.5, 0, 1, 0.5)) == 0.0


def test_iou_matches_raster():
    rng = np.random.default_rng(0)
    for _ in range(10):
        a, b = (tuple(np.sort(rng.random((2, 2)), axis=1).T.ravel()) for _ in range(2))
        assert abs(iou(a, b) - raster_iou(a, b)) < 1e-3


box = st.tuples(st.floats(0, 0.45), st.floats(0, 0.45), st.floats(0.5, 1), st.floats(0.5, 1))


@settings(max_examples=100, deadline=None)
@given(box, box)
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a) and 0.0 <= v <= 1.0
    assert (v == 1.0) == (a == b) or np.allclose(a, b)


def test_cosine_trivial_and_oracle():
    assert pairwise_cosine_mean([[1.0, 0], [1.0, 0]]) == pytest.approx(100.0)
    assert pairwise_cosine_mean([[1.0, 0], [0, 2.0]]) == pytest.approx(0.0)
    vs = np.random.default_rng(1).standard_normal((4, 7))
    assert abs(pairwise_cosine_mean(vs) - double_loop_cosine(vs)) <= 1e-9


def test_cosine_errors():
    with pytest.raises(ValidationError, match="vector 1"):
        pairwise_cosine_mean([[1.0, 0], [0, 0]], "fg")
    with pytest.raises(ValidationError):
        pairwise_cosine_mean([[1.0, 0]])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.1, 100), min_size=3, max_size=3), st.integers(0, 2**32 - 1))
def test_cosine_scale_invariant(scales, seed):
    vs = np.random.default_rng(seed).standard_normal((3, 5))
    assert pairwise_cosine_mean(vs * np.array(scales)[:, None]) == pytest.approx(pairwise_cosine_mean(vs), abs=1e-9)


def r(set_id, given, detected, image_id="0", **kw):
    return EvalRecord(set_id, image_id, given, detected, **kw)


def test_mean_iou_trivial():
    b = [0.1, 0.1, 0.6, 0.6]
    assert mean_iou([r("s", [b], [b])] * 3) == 100.0
    assert mean_iou([r("s", [b], [b]), r("s", [b], None)]) == 50.0
    with pytest.raises(ValidationError):
        mean_iou([])


def test_mean_iou_ten_pair_fixture():
    full, q = [0, 0, 1, 1], [0, 0, 0.5, 0.5]
    pairs = [
        (q, q),                                   # 1
        (q, [0.5, 0.5, 1, 1]),                    # 0
        (q, None),                                # 0, missing
        (q, [0, 0, 0.5, 0.25]),                   # 0.5
        (full, q),                                # 0.25
        (q, [0.25, 0.25, 0.75, 0.75]),            # 1/7
        (full, full),                             # 1
        ([0, 0, 0.5, 1], full),                   # 0.5
        ([0.5, 0.5, 1, 1], full),                 # 0.25
        (q, [0.6, 0.0, 0.9, 0.4]),                # 0
    ]
    recs = [r("s", [g], None if d is None else [d]) for g, d in pairs]
    hand = (1 + 0 + 0 + 0.5 + 0.25 + 1 / 7 + 1 + 0.5 + 0.25 + 0) / 10 * 100
    assert mean_iou(recs) == pytest.approx(hand, abs=1e-12)


def test_greedy_label_matching():
    dog, cat = [0, 0, 0.5, 0.5], [0.5, 0.5, 1, 1]
    given = [{"label": "dog", "box": dog}, {"label": "cat", "box": cat}]
    detected = [{"label": "cat", "box": cat}, {"label": "dog", "box": [0, 0, 0.5, 0.25]}]
    assert match_boxes(given, detected) == [0.5, 1.0]
    # unlabelled: the best pair is taken first
    assert match_boxes([dog, cat], [cat]) == [0.0, 1.0]
    assert match_boxes([dog, dog], [dog]) == [1.0, 0.0]


def _set(sid, fg, bg=None, n=2):
    return [r(sid, [[0, 0, 1, 1]], [[0, 0, 1, 1]], str(k), fg_embeds={"dino": fg[k]},
              bg_embeds={} if bg is None else {"clip": bg[k]}, clip_t=0.3) for k in range(n)]


def test_single_perfect_set():
    rep = aggregate_report(_set("a", [[1.0, 2.0], [2.0, 4.0]]))
    e = rep.scores["DINO-fg"]
    assert e.mean == pytest.approx(100.0) and e.ci[95][0] == e.ci[95][1] and e.ci[80][0] == e.ci[80][1]
    assert rep.scores["mIoU"].mean == 100.0 and rep.scores["CLIP-T"].mean == pytest.approx(30.0)
    assert rep.scores["CLIP-fg"] is None and rep.scores["LPIPS-bg"] is None


def test_two_sets_average():
    c60, c80 = 0.6, 0.8
    a = _set("a", [[1.0, 0.0], [c60, np.sqrt(1 - c60 ** 2)]])
    b = _set("b", [[1.0, 0.0], [c80, np.sqrt(1 - c80 ** 2)]])
    rep = aggregate_report(a + b)
    assert rep.scores["DINO-fg"].mean == pytest.approx(70.0)
    assert rep.scores["DINO-fg"].std == pytest.approx(np.std([60, 80], ddof=1))


def test_absent_family_when_fewer_than_two_vectors():
    recs = [r("a", [[0, 0, 1, 1]], None, fg_embeds={"dino": [1.0, 0.0]})]
    rep = aggregate_report(recs)
    assert rep.scores["DINO-fg"] is None and rep.scores["mIoU"].mean == 0.0
    assert rep.to_dict()["scores"]["DINO-fg"] is None


def test_permutation_invariance():
    rng = np.random.default_rng(2)
    recs = []
    for s in range(6):
        recs += [r(f"s{s}", [[0, 0, 0.5, 0.5]], [[0, 0, rng.uniform(0.3, 0.5), 0.5]], str(k),
                   fg_embeds={"dino": rng.standard_normal(4), "clip": rng.standard_normal(4)},
                   bg_embeds={"dino": rng.standard_normal(4)}, lpips={"fg": [rng.random()], "bg": [rng.random()]},
                   clip_t=rng.random()) for k in range(4)]
    base = json.dumps(aggregate_report(recs).to_dict(), sort_keys=True)
    shuffled = list(recs)
    random.Random(0).shuffle(shuffled)
    assert json.dumps(aggregate_report(shuffled).to_dict(), sort_keys=True) == base


def test_double_subject_consistency_per_subject():
    u = np.eye(3)
    recs = [r("d", [[0, 0, .5, .5], [.5, .5, 1, 1]], None, str(k), fg_embeds={"dino": [u[0], u[1]]}) for k in range(3)]
    assert aggregate_report(recs).scores["DINO-fg"].mean == pytest.approx(100.0)


def test_parse_and_load(tmp_path):
    doc = {"sets": [{"id": "a", "images": [{"given_boxes": [[0, 0, 1, 1]], "detected_boxes": None, "clip_t": 0.2}]}]}
    assert parse_eval(doc)[0].detected_boxes is None
    with pytest.raises(EvalParseError, match=r"\$\.sets\[0\]\.images\[0\]"):
        parse_eval({"sets": [{"id": "a", "images": [{"given_boxes": [[0, 0, 2, 1]]}]}]})
    p = tmp_path / "e.json"
    p.write_text("{\n  \"sets\": [,]}")
    with pytest.raises(EvalParseError, match=r"e\.json:2:12"):
        load_eval(p)


def test_csv_columns():
    header, rows = aggregate_report(_set("a", [[1.0, 0], [1.0, 0]])).csv_rows()
    assert header[0] == "metric" and [row[0] for row in rows] == list(COLUMNS)


def test_bootstrap_calibration():
    # 95% intervals on 20-set synthetic fixtures should contain the true mean in >= 95% of 200 trials
    coverage = bootstrap_coverage(n_sets=20, trials=200, level=95, seed=0)
    assert coverage >= 0.95, f"coverage {coverage:.3f}"
