from fractions import Fraction

import mpmath
import numpy as np
import pytest
import torch
from PIL import Image

from videofer.core import ConfigError, normalize_pixels
from videofer.dataio import FrameStore, SyntheticSpec, VideoAnnotation, frame_path, generate_synthetic_dataset, load_split
from videofer.inference import (
    CSV_HEADER,
    EnsembleConfig,
    PredictionRecord,
    ensemble_combine,
    middle_frame_index,
    predict_video,
    read_predictions,
    records_for_video,
    search_ensemble_weights,
    simplex_grid,
    write_predictions,
)
from videofer.models import BackboneConfig, TemporalHeadConfig, build_model


def random_probs(rng, shape):
    x = rng.gamma(0.5, size=shape)
    return x / x.sum(axis=-1, keepdims=True)


def _model(kind, seed=0):
    torch.manual_seed(seed)
    head = TemporalHeadConfig(kind, gru_hidden=16, tf_model_dim=16, tf_heads=2, tf_ffn_dim=32, dropout=0.0)
    return build_model(BackboneConfig("tiny"), head).eval()


@pytest.fixture(scope="module")
def videos(tmp_path_factory):
    root = tmp_path_factory.mktemp("pred")
    spec = SyntheticSpec(num_videos=3, frames_per_video=14, val_fraction=0.0)
    generate_synthetic_dataset(spec, root / "frames", root / "ann", seed=5)
    return load_split(root / "ann", "train", root / "frames"), FrameStore(root / "frames")


# -- window centre ---------------------------------------------------------------

@pytest.mark.parametrize("T,mid", [(9, 4), (1, 0), (3, 1)])
def test_middle_frame_index(T, mid):
    assert middle_frame_index(T) == mid


def test_middle_frame_index_rejects_even():
    with pytest.raises(ConfigError):
        middle_frame_index(8)


# -- ensemble --------------------------------------------------------------------

def test_identical_inputs_are_a_fixed_point():
    p = random_probs(np.random.default_rng(0), (5, 7))
    out = ensemble_combine([p, p, p], EnsembleConfig((0.2, 0.3, 0.5)))
    np.testing.assert_allclose(out, p, rtol=0, atol=1e-16)


def test_one_hot_arithmetic():
    eye = np.eye(7)
    out = ensemble_combine([eye[0], eye[1], eye[1]], EnsembleConfig((0.5, 0.25, 0.25)))
    np.testing.assert_array_equal(out, [0.5, 0.5, 0, 0, 0, 0, 0])


def test_weighted_mean_matches_exact_rationals():
    rng = np.random.default_rng(1)
    for _ in range(20):
        p = random_probs(rng, (3, 4, 7))
        w = rng.random(3)
        cfg = EnsembleConfig(tuple(w))
        got = ensemble_combine(p, cfg)
        wf = [Fraction(x) for x in cfg.weights]
        for i in range(4):
            for c in range(7):
                exact = sum(wf[k] * Fraction(p[k, i, c]) for k in range(3))
                assert abs(got[i, c] - float(exact)) <= 2e-16


def test_output_rows_stay_normalized():
    rng = np.random.default_rng(2)
    p = random_probs(rng, (3, 50, 7))
    out = ensemble_combine(p, EnsembleConfig((0.1, 0.6, 0.3)))
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, rtol=0, atol=1e-14)


def test_convexity_permutation_and_vertices_are_exact():
    rng = np.random.default_rng(3)
    for _ in range(50):
        p = random_probs(rng, (3, 6, 7))
        w = tuple(rng.random(3))
        out = ensemble_combine(p, EnsembleConfig(w))
        assert np.all(out >= p.min(axis=0)) and np.all(out <= p.max(axis=0))
        perm = rng.permutation(3)
        out_perm = ensemble_combine(p[perm], EnsembleConfig(tuple(np.asarray(w)[perm])))
        np.testing.assert_array_equal(out, out_perm)
        for k in range(3):
            vertex = tuple(float(i == k) for i in range(3))
            np.testing.assert_array_equal(ensemble_combine(p, EnsembleConfig(vertex)), p[k])


def test_logit_mode_matches_weighted_log_oracle():
    rng = np.random.default_rng(4)
    p = random_probs(rng, (3, 7)) * 0.98 + 0.02 / 7
    cfg = EnsembleConfig((0.5, 0.2, 0.3), mode="logit")
    got = ensemble_combine(p, cfg)
    z = [sum(mpmath.mpf(cfg.weights[k]) * mpmath.log(mpmath.mpf(p[k, c])) for k in range(3)) for c in range(7)]
    e = [mpmath.exp(v) for v in z]
    want = [float(v / sum(e)) for v in e]
    np.testing.assert_allclose(got, want, rtol=1e-13, atol=0)


def test_logit_mode_ignores_zero_weight_model_with_zeros():
    rng = np.random.default_rng(5)
    p = random_probs(rng, (3, 7))
    p[2] = np.eye(7)[0]
    got = ensemble_combine(p, EnsembleConfig((0.5, 0.5, 0.0), mode="logit"))
    assert np.isfinite(got).all()
    np.testing.assert_allclose(got.sum(), 1.0, atol=1e-15)


@pytest.mark.parametrize("weights", [(1, -1, 1), (0, 0, 0), (np.nan, 1, 1)])
def test_bad_weights_rejected(weights):
    with pytest.raises(ConfigError):
        EnsembleConfig(weights)


def test_weights_are_renormalized_only_when_needed():
    assert EnsembleConfig((2, 1, 1)).weights == (0.5, 0.25, 0.25)
    w = (0.1, 0.2, 0.7)
    assert EnsembleConfig(w).weights == w


def test_model_count_mismatch():
    with pytest.raises(ConfigError):
        ensemble_combine(np.full((2, 7), 1 / 7), EnsembleConfig())


# -- weight search ---------------------------------------------------------------

def test_simplex_grid_contains_vertices():
    grid = simplex_grid(3, 0.05)
    assert len(grid) == 231
    for v in [(1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)]:
        assert v in grid
    assert all(abs(sum(g) - 1) < 1e-12 for g in grid)


def test_search_is_never_worse_than_a_single_model():
    rng = np.random.default_rng(6)
    videos = [VideoAnnotation(f"v{i}", rng.integers(-1, 7, size=12), ".") for i in range(4)]
    model_probs = [{v.video_id: random_probs(rng, (12, 7)) for v in videos} for _ in range(3)]
    from videofer.inference import evaluate_probs

    best, report = search_ensemble_weights(videos, model_probs, step=0.25)
    assert abs(sum(best.weights) - 1) < 1e-12
    for mp in model_probs:
        assert report.e_total >= evaluate_probs(videos, mp).e_total


# -- CSV -------------------------------------------------------------------------

def test_csv_layout_and_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    records = records_for_video("a", random_probs(rng, (2, 7))) + records_for_video("b", random_probs(rng, (1, 7)))
    path = tmp_path / "p.csv"
    write_predictions(records, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 4
    assert lines[0].split(",") == CSV_HEADER
    back = read_predictions(path)
    assert [(r.video_id, r.frame_index, r.pred) for r in back] == [(r.video_id, r.frame_index, r.pred) for r in records]
    for a, b in zip(records, back):
        np.testing.assert_allclose(a.probs, b.probs, rtol=1e-8)


def test_pred_column_is_argmax():
    r = PredictionRecord("v", 0, np.array([0.1, 0.05, 0.5, 0.05, 0.1, 0.1, 0.1]))
    assert r.pred == 2


def test_unsorted_records_rejected(tmp_path):
    p = np.full(7, 1 / 7)
    with pytest.raises(ValueError):
        write_predictions([PredictionRecord("b", 0, p), PredictionRecord("a", 0, p)], tmp_path / "x.csv")
    with pytest.raises(ValueError):
        write_predictions([PredictionRecord("a", 0, p), PredictionRecord("a", 0, p)], tmp_path / "x.csv")


# -- prediction ------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["static", "gru", "transformer"])
def test_predict_video_shape_and_rows(kind, videos):
    anns, store = videos
    probs = predict_video(_model(kind), anns[0], store)
    assert probs.shape == (len(anns[0]), 7)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


@pytest.mark.parametrize("kind", ["gru", "transformer"])
def test_interior_frames_equal_many_to_many_middle(kind, videos):
    anns, store = videos
    model = _model(kind)
    ann = anns[1]
    got = predict_video(model, ann, store, T=9, return_logits=True)
    for f in range(4, len(ann) - 4):
        clip = torch.from_numpy(store.frames(ann.video_id, range(f - 4, f + 5))[None])
        with torch.no_grad():
            want = model(clip)[0, 4].double().numpy()
        np.testing.assert_array_equal(got[f], want)


@pytest.mark.parametrize("kind", ["gru", "transformer"])
def test_constant_video_gives_constant_predictions(kind, tmp_path):
    img = np.random.default_rng(8).integers(0, 256, size=(112, 112, 3), dtype=np.uint8)
    (tmp_path / "c").mkdir()
    for f in range(6):
        Image.fromarray(img).save(frame_path(tmp_path, "c", f), format="PNG")
    ann = VideoAnnotation("c", np.zeros(6, dtype=np.int64), tmp_path / "c")
    probs = predict_video(_model(kind), ann, FrameStore(tmp_path), T=5)
    for row in probs[1:]:
        np.testing.assert_array_equal(row, probs[0])


def test_static_prediction_is_framewise(videos):
    anns, store = videos
    model = _model("static")
    ann = anns[2]
    got = predict_video(model, ann, store, return_logits=True)
    with torch.no_grad():
        want = model(torch.from_numpy(store.frames(ann.video_id, [3])[None]))[0, 0].double().numpy()
    np.testing.assert_array_equal(got[3], want)


def test_store_frames_are_normalized_pixels(videos):
    anns, store = videos
    raw = store.raw(anns[0].video_id, 0)
    np.testing.assert_array_equal(store.frames(anns[0].video_id, [0])[0], normalize_pixels(raw))
