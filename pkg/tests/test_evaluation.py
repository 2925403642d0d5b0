import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hardcycle.corpus import generate_corpus, write_corpus
from hardcycle.evaluation import (
    BenchmarkResult,
    C1,
    evaluate_benchmark,
    psnr,
    ssim,
    tiled_predict,
)
from hardcycle.imaging import mosaic, save_image
from hardcycle.model import BilinearDemosaicer, CnnDemosaicer, ModelSpec, init_params

import oracles

images = arrays(np.float64, (12, 13, 3), elements=st.floats(0, 1))


class Identity:
    """Cheating predictor that knows the ground truth; used to test plumbing."""

    def __init__(self, lookup):
        self.lookup = lookup

    def predict(self, m, pattern):
        return self.lookup[m.tobytes()]


def test_psnr_analytic():
    a = np.full((8, 8, 3), 0.3)
    assert psnr(a, a) == 100.0
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_psnr_matches_scalar_loop():
    rng = np.random.default_rng(0)
    a, b = rng.random((6, 7, 3)), rng.random((6, 7, 3))
    assert psnr(a, b) == pytest.approx(oracles.psnr(a, b), rel=1e-12)


def test_psnr_clamps_and_checks_shape():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a - 1.0) == 100.0
    with pytest.raises(ValueError):
        psnr(a, np.zeros((4, 5, 3)))


def test_psnr_decreases_with_noise():
    rng = np.random.default_rng(1)
    a = rng.uniform(0.3, 0.7, (8, 8, 3))
    noise = rng.uniform(-1, 1, a.shape)
    vals = [psnr(a, a + s * noise) for s in (0.01, 0.05, 0.1, 0.2)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


@given(images, images)
@settings(max_examples=25, deadline=None)
def test_psnr_symmetric(a, b):
    assert psnr(a, b) == psnr(b, a)


def test_ssim_matches_window_loop():
    rng = np.random.default_rng(2)
    a = rng.random((14, 13, 3))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(oracles.ssim(a, b), rel=1e-10)


def test_ssim_constant_closed_form():
    a, b = np.full((16, 16, 3), 0.2), np.full((16, 16, 3), 0.7)
    expected = (2 * 0.2 * 0.7 + C1) / (0.2 ** 2 + 0.7 ** 2 + C1)
    assert ssim(a, b) == pytest.approx(expected, abs=1e-12)


@given(images, images)
@settings(max_examples=25, deadline=None)
def test_ssim_properties(a, b):
    assert ssim(a, a) == 1.0
    s = ssim(a, b)
    assert -1.0 <= s <= 1.0
    assert s == pytest.approx(ssim(b, a), abs=1e-12)


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 20, 3)), np.zeros((10, 20, 3)))


def test_result_roundtrip_and_means():
    res = BenchmarkResult.from_rows("d", [("a", 30.0, 0.9), ("b", 40.0, 0.7)])
    assert res.mean_psnr == 35.0 and res.mean_ssim == pytest.approx(0.8)
    back = BenchmarkResult.from_dict(json.loads(res.to_json()))
    assert back == res
    assert res.to_csv().splitlines()[0] == "image_id,psnr,ssim"


def test_tiling_matches_whole_image_for_local_model():
    # receptive field of a 1-block net is 3 packed pixels per side, well inside the overlap
    params = init_params(ModelSpec(blocks=1, width=4, expansion=2))
    model = CnnDemosaicer(params)
    img = np.random.default_rng(3).random((70, 94, 3))
    m = mosaic(img).data
    whole = model.predict(m, "GRBG")
    tiled = tiled_predict(model, m, tile=32, overlap=8)
    np.testing.assert_allclose(tiled, whole, atol=1e-5)
    bil = tiled_predict(BilinearDemosaicer(), m, tile=32, overlap=8)
    np.testing.assert_allclose(bil, BilinearDemosaicer().predict(m, "GRBG"), atol=1e-15)


def test_benchmark_identity_and_order(tmp_path, caplog):
    rng = np.random.default_rng(4)
    imgs = {}
    for name in ("c", "a", "b"):
        img = np.round(rng.random((16, 18, 3)) * 255) / 255
        save_image(img, tmp_path / f"{name}.png")
        imgs[name] = img
    (tmp_path / "broken.ppm").write_bytes(b"P6 4 4 255\n")
    lookup = {mosaic(v).data.tobytes(): v for v in imgs.values()}
    res = evaluate_benchmark(Identity(lookup), tmp_path)
    assert [r[0] for r in res.per_image] == ["a", "b", "c"]
    assert all(r[1] == 100.0 and r[2] == 1.0 for r in res.per_image)
    assert "broken.ppm" in caplog.text


def test_benchmark_bilinear_means_and_constants(tmp_path):
    rng = np.random.default_rng(5)
    for i in range(3):
        save_image(np.round(rng.random((16, 16, 3)) * 255) / 255, tmp_path / f"{i}.ppm")
    res = evaluate_benchmark(BilinearDemosaicer(), tmp_path)
    assert res.mean_psnr == pytest.approx(sum(r[1] for r in res.per_image) / 3, rel=1e-15)
    assert res.mean_ssim == pytest.approx(sum(r[2] for r in res.per_image) / 3, rel=1e-15)
    flat = tmp_path / "flat"
    flat.mkdir()
    save_image(np.full((17, 20, 3), 0.6), flat / "x.png")  # odd height is cropped
    assert evaluate_benchmark(BilinearDemosaicer(), flat).per_image[0][1] == 100.0


def test_benchmark_with_index_and_errors(tmp_path):
    c = generate_corpus(4, 16, seed=0)
    write_corpus(c, tmp_path / "ds")
    res = evaluate_benchmark(BilinearDemosaicer(), tmp_path / "ds", ids=c.val_ids)
    assert [int(r[0]) for r in res.per_image] == sorted(c.val_ids)
    (tmp_path / "empty").mkdir()
    with pytest.raises(ValueError):
        evaluate_benchmark(BilinearDemosaicer(), tmp_path / "empty")
    with pytest.raises(FileNotFoundError):
        evaluate_benchmark(BilinearDemosaicer(), tmp_path / "nope")
