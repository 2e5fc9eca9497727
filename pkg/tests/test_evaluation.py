import numpy as np
import pytest

from qarcnn.detector import GeneratorParams
from qarcnn.evaluation import BACKGROUND, evaluate
from qarcnn.ivfadc import build_index
from qarcnn.synthetic import SyntheticWorldSpec, generate_world


@pytest.fixture(scope="module")
def small_world():
    return generate_world(SyntheticWorldSpec(superclusters=2, images=3, val_images=3, test_images=6, seed=2))


def _oracle_params(world):
    """Classifier = pseudo-inverse of the category centers, regressor off."""
    cats = world.categories
    p = GeneratorParams.zeros(world.spec.embed_dim, world.spec.feature_dim, 2)
    emb = np.stack([world.words[c] for c in cats])
    targets = np.linalg.pinv(np.vstack([world.category_centers, world.background_center])).T[: len(cats)]
    p.W = np.linalg.lstsq(emb, targets, rcond=None)[0].T
    return p


def test_report_shape(small_world):
    w = small_world
    report = evaluate(GeneratorParams.initialize(w.spec.embed_dim, w.spec.feature_dim, 4), w.words,
                      w.annotations["test"], w.queries, features=w.features["test"], lexicon=w.lexicon)
    assert set(report) >= {"queries", "map", "iou_threshold", "localization", "localization_no_regression"}
    assert list(report["localization"]) == ["0.5", "0.6", "0.7", "0.8", "0.9"]
    for entry in report["queries"].values():
        assert {"positives", "ap", "pr@10", "pr@100", "false_alarms"} <= set(entry)
        assert sum(entry["false_alarms"].values()) <= 100


def test_oracle_detector_is_perfect_on_noise_free_world():
    w = generate_world(SyntheticWorldSpec(superclusters=2, images=3, val_images=3, test_images=6,
                                          feature_noise=0, proposal_jitter=0, seed=2))
    report = evaluate(_oracle_params(w), w.words, w.annotations["test"], w.queries,
                      features=w.features["test"], lexicon=w.lexicon)
    assert report["map"] == pytest.approx(1.0)
    assert report["localization"]["0.9"] == 1.0
    # regressor is zero, so both localization rows agree
    assert report["localization"] == report["localization_no_regression"]


def test_index_backed_evaluation(small_world):
    w = small_world
    p = _oracle_params(w)
    feats = w.features["test"]
    index = build_index(feats, nlist=2, m=4, ksub=16, seed=0)
    a = evaluate(p, w.words, w.annotations["test"], w.queries, index=index, nprobe=2, lexicon=w.lexicon)
    assert a["map"] > 0.5
    assert set(a["queries"]) == set(w.queries)


def test_false_alarm_labels(small_world):
    w = small_world
    report = evaluate(_oracle_params(w), w.words, w.annotations["test"], w.queries[:1],
                      features=w.features["test"], lexicon=w.lexicon)
    labels = set(report["queries"][w.queries[0]]["false_alarms"])
    assert labels <= set(w.categories) | {BACKGROUND}


def test_evaluate_needs_a_source(small_world):
    w = small_world
    with pytest.raises(ValueError):
        evaluate(GeneratorParams.zeros(2, 2, 1), w.words, [], [])
