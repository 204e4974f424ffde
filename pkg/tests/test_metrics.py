"""Metrics and loss terms against scalar-loop oracles and closed forms."""

import math

import numpy as np
import pytest

from ispforge import metrics as M
from ispforge.errors import ShapeError

from oracles import sobel_mag_loop, ssim_loop


@pytest.fixture
def pair():
    r = np.random.default_rng(7)
    return r.random((1, 3, 32, 32)), r.random((1, 3, 32, 32))


def flat(a):
    return [float(v) for v in np.ravel(a)]


class TestPsnr:
    def test_twenty_db(self):
        x = np.full((1, 3, 8, 8), 0.5)
        assert abs(M.psnr(x, x + 0.1) - 20.0) <= 1e-9

    def test_cap(self, pair):
        assert M.psnr(pair[0], pair[0]) == 100.0

    def test_loop(self, pair):
        p, t = flat(pair[0]), flat(pair[1])
        mse = sum((a - b) ** 2 for a, b in zip(p, t)) / len(p)
        assert abs(M.psnr(*pair) - 10 * math.log10(1 / mse)) <= 1e-6

    def test_monotone_in_noise(self):
        r = np.random.default_rng(0)
        x = r.random((1, 3, 16, 16))
        sign = np.sign(r.standard_normal(x.shape))
        vals = [M.psnr(x, x + a * sign) for a in (0.01, 0.05, 0.1)]
        assert vals[0] > vals[1] > vals[2]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            M.psnr(np.zeros((1, 3, 4, 4)), np.zeros((1, 3, 4, 5)))


class TestSsim:
    def test_self(self, pair):
        assert abs(M.ssim(pair[0], pair[0]) - 1.0) <= 1e-6

    def test_constants(self):
        v = M.ssim(np.ones((1, 1, 16, 16)), np.zeros((1, 1, 16, 16)))
        assert v == pytest.approx(9.999000099990002e-05, rel=1e-9)

    def test_symmetric_and_range(self, pair):
        a, b = pair
        assert M.ssim(a, b) == pytest.approx(M.ssim(b, a), abs=1e-12)
        m = M.ssim_map(a, 1 - a)
        assert m.min() >= -1 and m.max() <= 1

    def test_loop_oracle(self, pair):
        assert abs(M.ssim(*pair) - ssim_loop(*pair)) <= 1e-5

    def test_too_small(self):
        with pytest.raises(ShapeError):
            M.ssim(np.zeros((1, 3, 10, 20)), np.zeros((1, 3, 10, 20)))


class TestPointwise:
    def test_loops(self, pair):
        p, t = flat(pair[0]), flat(pair[1])
        n = len(p)
        assert abs(M.l1(*pair) - sum(abs(a - b) for a, b in zip(p, t)) / n) <= 1e-5
        assert abs(M.mse(*pair) - sum((a - b) ** 2 for a, b in zip(p, t)) / n) <= 1e-5
        ref = sum(math.sqrt((a - b) ** 2 + 1e-6) for a, b in zip(p, t)) / n - 1e-3
        assert abs(M.charbonnier(*pair) - ref) <= 1e-5

    def test_charbonnier_cases(self):
        x = np.zeros((1, 3, 4, 4))
        assert M.charbonnier(x, x) == 0
        assert abs(M.charbonnier(x, x + 1) - 1.0) <= 1e-3
        with pytest.raises(ValueError):
            M.charbonnier(x, x, eps=0)

    def test_cosine(self, pair):
        a, b = pair
        assert M.cosine_loss(a, a) == pytest.approx(0, abs=1e-12)
        assert M.cosine_loss(np.zeros((1, 3, 2, 2)), a[..., :2, :2]) == 1.0
        red = np.zeros((1, 3, 2, 2))
        red[:, 0] = 1
        green = np.zeros((1, 3, 2, 2))
        green[:, 1] = 1
        assert M.cosine_loss(red, green) == pytest.approx(1.0)
        assert abs(M.cosine_loss(a, 2 * b) - M.cosine_loss(a, b)) <= 1e-6
        ref = 0.0
        for y in range(32):
            for x in range(32):
                pv, tv = a[0, :, y, x], b[0, :, y, x]
                dot = sum(float(u) * float(v) for u, v in zip(pv, tv))
                nrm = math.sqrt(sum(float(u) ** 2 for u in pv)) * math.sqrt(sum(float(v) ** 2 for v in tv))
                ref += 1 - dot / max(nrm, 1e-8)
        assert abs(M.cosine_loss(a, b) - ref / 1024) <= 1e-5


class TestPatch:
    def test_rectified_weights(self):
        pred = np.zeros((1, 1, 8, 16))
        target = np.zeros((1, 1, 8, 16))
        pred[..., :8] = 0.1
        pred[..., 8:] = 0.2
        w = M.patch_weights(pred, target, p=8)
        np.testing.assert_allclose(w.ravel(), [math.exp(0.1), math.exp(0.2)], rtol=1e-12)
        ref = (math.exp(0.1) * 0.1 + math.exp(0.2) * 0.2) / (math.exp(0.1) + math.exp(0.2))
        assert M.patch_loss(pred, target, p=8) == pytest.approx(ref, rel=1e-12)

    def test_literal_clamped(self):
        x = np.zeros((1, 1, 8, 8))
        w = M.patch_weights(x, x, mode="literal")
        assert np.all(np.isfinite(w)) and w.max() <= math.exp(200)
        assert w.max() == pytest.approx(math.exp(80))

    @pytest.mark.parametrize("mode", ["rectified", "literal"])
    def test_identical_zero(self, pair, mode):
        assert M.patch_loss(pair[0], pair[0], mode=mode) == 0.0

    @pytest.mark.parametrize("mode", ["rectified", "literal"])
    def test_loop(self, pair, mode):
        a, b = pair
        num = den = 0.0
        npatch = 0
        for c in range(3):
            for py in range(4):
                for px in range(4):
                    d = [float(a[0, c, py * 8 + i, px * 8 + j] - b[0, c, py * 8 + i, px * 8 + j])
                         for i in range(8) for j in range(8)]
                    m = sum(d) / 64
                    v = sum((x - m) ** 2 for x in d) / 64
                    e = abs(m) + v if mode == "rectified" else 1 / (abs(m) + 1e-2) + 1 / (v + 1e-2)
                    w = math.exp(min(e, 80))
                    num += w * sum(abs(x) for x in d) / 64
                    den += w
                    npatch += 1
        assert M.patch_loss(a, b, mode=mode) == pytest.approx(num / den, abs=1e-5)

    def test_errors(self, pair):
        with pytest.raises(ShapeError):
            M.patch_loss(*pair, p=5)
        with pytest.raises(ValueError):
            M.patch_loss(*pair, eps=0)
        with pytest.raises(ValueError):
            M.patch_loss(*pair, mode="inverse")


class TestHistogram:
    def test_normalized(self, pair):
        h = M.soft_histogram(pair[0])
        np.testing.assert_allclose(h.sum(-1), 1, atol=1e-5)

    def test_zero_vs_one(self):
        # frozen from a scalar evaluation of the kernel sums: 2.0 per channel
        v = M.histogram_loss(np.zeros((1, 3, 4, 4)), np.ones((1, 3, 4, 4)))
        assert v == pytest.approx(3 * 2.0, abs=1e-9)

    def test_loop(self, pair):
        a, b = pair
        centers = [(k + 0.5) / 32 for k in range(32)]
        s = 1 / 32
        total = 0.0
        for c in range(3):
            hs = []
            for img in (a, b):
                h = [sum(math.exp(-(float(v) - mu) ** 2 / (2 * s * s)) for v in img[0, c].ravel()) / 1024
                     for mu in centers]
                z = sum(h)
                hs.append([v / z for v in h])
            total += sum(abs(u - v) for u, v in zip(*hs))
        assert abs(M.histogram_loss(a, b) - total) <= 1e-5

    def test_bins(self, pair):
        with pytest.raises(ValueError):
            M.histogram_loss(*pair, bins=1)


class TestEdge:
    def test_cases(self, pair):
        assert M.edge_loss(pair[0], pair[0]) == 0
        assert M.edge_loss(np.full((1, 3, 8, 8), 0.2), np.full((1, 3, 8, 8), 0.9)) == pytest.approx(0, abs=1e-12)

    def test_loop(self, pair):
        a, b = pair
        ref = np.mean(np.abs(sobel_mag_loop(a[0]) - sobel_mag_loop(b[0])))
        assert abs(M.edge_loss(a, b) - ref) <= 1e-5


class TestSpec:
    def test_parse(self):
        s = M.LossSpec.parse("l1:1, ssim:0.2, patch(p=8 mode=literal):0.5, histogram")
        assert [(t.name, t.weight) for t in s.terms] == [("l1", 1), ("ssim", .2), ("patch", .5), ("histogram", 1)]
        assert s.terms[2].params == {"p": 8, "mode": "literal"}
        assert M.LossSpec.parse(str(s)) == s

    @pytest.mark.parametrize("bad", ["", "l1:-1", "vgg:1", "patch(q=3):1", "l1:x", "l1(eps):1"])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            M.LossSpec.parse(bad)

    def test_all_terms_zero_on_identical(self, pair):
        x = pair[0]
        for name in M.TERMS:
            assert M.LossTerm(name).value(x, x) == pytest.approx(0, abs=1e-12), name

    def test_all_terms_nonnegative(self, pair):
        for name in M.TERMS:
            assert M.LossTerm(name).value(*pair) >= 0

    def test_evaluate(self, pair):
        x = pair[0]
        r = M.evaluate(x, x, "l1:1")
        assert r.total == 0 and r.psnr == 100
        a = M.evaluate(*pair, "l1:1").total
        assert M.evaluate(*pair, "l1:2").total == pytest.approx(2 * a)
        mixed = M.evaluate(*pair, "l1:1,ssim:0.2,edge:0.5")
        assert mixed.total == pytest.approx(M.l1(*pair) + 0.2 * (1 - M.ssim(*pair)) + 0.5 * M.edge_loss(*pair))
        assert set(mixed.terms) == {"l1", "ssim", "edge"}

    def test_evaluate_small_images(self):
        x = np.zeros((1, 3, 8, 8))
        assert math.isnan(M.evaluate(x, x).ssim)
