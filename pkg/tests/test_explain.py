import numpy as np
import pytest

from radarseq.explain import (
    grad_cam, pca_2d, permutation_importance, project_embeddings, sector_heat_share, write_cams,
    write_importance_csv, write_projection_csv,
)
from radarseq.model import build_model
from radarseq.render import RadarGeometry, decode_pgm, render_batch, render_padding

from test_trainer import SMALL, toy_dataset


def _window(n_pad=0, seed=0):
    imgs = render_batch(np.random.default_rng(seed).uniform(0, 1, (50, 14)))
    imgs[:n_pad] = render_padding()
    return imgs


def test_cam_maps_normalized_and_nonnegative():
    m = build_model("cnn_lstm")
    cams = grad_cam(m, _window())
    assert len(cams) == 50
    for c in cams:
        assert c.heat.shape == (32, 32) and c.heat.min() >= 0
        assert c.is_zero or np.isclose(c.heat.max(), 1.0)
    assert not all(c.is_zero for c in cams)
    assert all(p.grad is None for p in m.params.values())


def test_zero_classifier_gives_zero_maps():
    m = build_model("cnn_lstm")
    m.params["head.w"].data[:] = 0
    with pytest.warns(UserWarning, match="zero"):
        cams = grad_cam(m, _window())
    assert all(c.is_zero for c in cams)


def test_padding_gets_no_heat_with_zero_input_weights():
    m = build_model("cnn_lstm", hidden_size=8)
    for k, v in m.params.items():
        if k.startswith("lstm.0") and k.endswith("w_ih"):
            v.data[:] = 0
    # with the first layer blind to its input, no frame receives gradient at all
    with pytest.warns(UserWarning):
        cams = grad_cam(m, _window(n_pad=20))
    assert all(c.is_zero for c in cams[:20])


def test_cnn_only_heat_only_on_last_frame():
    m = build_model("cnn_only")
    cams = grad_cam(m, _window(seed=1))
    assert all(c.is_zero for c in cams[:-1])
    with pytest.raises(TypeError):
        grad_cam(build_model("raw_lstm"), _window())


def test_sector_heat_share():
    heat = np.ones((32, 32))
    s = sector_heat_share(heat)
    assert s.shape == (14,) and np.isclose(s.sum(), 1)
    assert np.all(sector_heat_share(np.zeros((32, 32))) == 0)


def test_cam_pgm_dump(tmp_path):
    cams = grad_cam(build_model("cnn_lstm"), _window())
    paths = write_cams(tmp_path, "c00001", "2024-03-01", cams[:3])
    assert paths[0].name == "c00001_2024-03-01_t00.pgm"
    back = decode_pgm(paths[1].read_bytes())
    assert np.abs(back - cams[1].heat).max() <= 0.5 / 255 + 1e-9


def test_constant_feature_has_zero_importance(tmp_path):
    m = build_model("cnn_only", **SMALL)
    ds = toy_dataset(60, seed=2, split="test")
    # a feature whose normalized values are all equal: shuffling changes nothing
    ds.features[:] = 0.25
    ds.frames[1:] = render_batch(ds.features[1:], RadarGeometry(8, 8))
    res = permutation_importance(m, ds, features=["ltv"], repeats=3)
    assert res[0].importance == 0.0 and res[0].feature == "ltv" and res[0].repeats == 3
    with pytest.warns(UserWarning, match="noisy"):
        permutation_importance(build_model("raw_lstm", **SMALL), ds.subset(np.arange(60) < 40),
                               features=[0], repeats=2)
    write_importance_csv(tmp_path / "imp.csv", res)
    assert (tmp_path / "imp.csv").read_text().startswith("feature,importance,se,repeats")


def test_pca_properties_against_full_eigendecomposition():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, 6)) @ rng.normal(size=(6, 6))
    p = pca_2d(X)
    np.testing.assert_allclose(p.components @ p.components.T, np.eye(2), atol=1e-10)
    cov = np.cov(p.coords.T)
    assert abs(cov[0, 1]) < 1e-9 and cov[0, 0] >= cov[1, 1]
    vals = np.sort(np.linalg.eigvalsh(np.cov(X.T)))[::-1]
    np.testing.assert_allclose(np.diag(cov), vals[:2], rtol=1e-9)
    np.testing.assert_allclose(p.explained, vals[:2] / vals.sum(), rtol=1e-9)
    # row order only flips signs (which the sign convention removes)
    q = pca_2d(X[rng.permutation(40)])
    np.testing.assert_allclose(np.abs(q.components), np.abs(p.components), atol=1e-10)


def test_pca_degenerate_and_too_small():
    p = pca_2d(np.tile([1.0, 2.0, 3.0], (5, 1)))
    assert p.degenerate and p.explained is None and np.all(p.coords == 0)
    with pytest.raises(ValueError):
        pca_2d(np.zeros((2, 3)))


def test_project_embeddings_csv(tmp_path):
    m = build_model("cnn_lstm", **SMALL)
    ds = toy_dataset(20, seed=4, split="test")
    p = project_embeddings(m, ds)
    assert p.coords.shape == (20, 2)
    write_projection_csv(tmp_path / "p.csv", ds, p)
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "courier_id,end_date,label,pc1,pc2" and len(lines) == 21
    with pytest.raises(ValueError):
        project_embeddings(m, ds.subset(np.arange(20) < 2))
