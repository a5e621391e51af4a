import csv
import io
import math

import numpy as np
import pytest
import torch

from sar2opt.diffusion import ShapeError
from sar2opt.metrics import (
    EMBEDDERS,
    MetricReport,
    evaluate,
    frechet_distance,
    get_embedder,
    psnr,
    ssim,
    stats_proj_embedder,
)


def seeded(seed):
    g = torch.Generator()
    g.manual_seed(seed)
    return g


class TestPSNR:
    def test_quarter_mse(self):
        # Computed by hand: mse 0.25 -> -10*log10(0.25) = 6.020599913279624.
        a = torch.zeros(3, 4, 4)
        b = torch.full((3, 4, 4), 0.5)
        assert psnr(a, b) == pytest.approx(6.020599913279624, abs=1e-9)

    def test_hundredth_mse(self):
        # 0.1 is not exactly representable in float32, so allow the tiny
        # rounding this induces in the mse.
        a = torch.zeros(3, 4, 4)
        b = torch.full((3, 4, 4), 0.1)
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-6)

    def test_identical_is_infinite(self):
        a = torch.rand(3, 8, 8, generator=seeded(0))
        assert math.isinf(psnr(a, a))

    def test_monotonic_in_noise(self):
        truth = torch.rand(3, 16, 16, generator=seeded(1))
        noise = torch.randn(3, 16, 16, generator=seeded(2))
        values = [psnr((truth + a * noise).clamp(0, 1), truth) for a in (0.05, 0.15, 0.4)]
        assert values[0] > values[1] > values[2]

    def test_symmetry(self):
        a = torch.rand(3, 8, 8, generator=seeded(3))
        b = torch.rand(3, 8, 8, generator=seeded(4))
        assert psnr(a, b) == pytest.approx(psnr(b, a), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            psnr(torch.zeros(3, 4, 4), torch.zeros(3, 4, 5))


class TestSSIM:
    def test_self_is_one(self):
        a = torch.rand(3, 16, 16, generator=seeded(5))
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_constant_pair_closed_form(self):
        # Two constant images: means 0 and 1, zero variances, zero covariance.
        # SSIM = (2*0*1 + C1)(2*0 + C2) / ((0+1) + C1)((0+0) + C2)
        #      = C1 / (1 + C1) with C1 = 0.01^2.
        a = torch.zeros(1, 16, 16)
        b = torch.ones(1, 16, 16)
        want = 1e-4 / (1 + 1e-4)
        assert ssim(a, b) == pytest.approx(want, rel=1e-9)

    def test_monotonic_in_noise(self):
        truth = torch.rand(3, 32, 32, generator=seeded(6))
        noise = torch.randn(3, 32, 32, generator=seeded(7))
        values = [ssim((truth + a * noise).clamp(0, 1), truth) for a in (0.02, 0.1, 0.3)]
        assert values[0] > values[1] > values[2]

    def test_symmetry(self):
        a = torch.rand(3, 16, 16, generator=seeded(8))
        b = torch.rand(3, 16, 16, generator=seeded(9))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-9)

    def test_image_smaller_than_window(self):
        with pytest.raises(ValueError):
            ssim(torch.zeros(3, 8, 8), torch.zeros(3, 8, 8))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ssim(torch.zeros(3, 16, 16), torch.zeros(3, 16, 17))


class TestFrechet:
    def test_identical_sets_zero(self):
        x = np.random.default_rng(0).normal(size=(64, 5))
        assert frechet_distance(x, x) == pytest.approx(0.0, abs=1e-6)

    def test_one_dimensional_unit_shift(self):
        # Both sets have sample variance 1 (ddof=1); means differ by 1, so
        # d^2 = (mu1-mu2)^2 + (s1 - s2)^2 = 1.
        base = np.array([[-1.0 / math.sqrt(2)], [1.0 / math.sqrt(2)]])
        assert frechet_distance(base, base + 1.0) == pytest.approx(1.0, abs=1e-9)

    def test_diagonal_closed_form(self):
        # Construct sets whose sample covariances are exactly diagonal by
        # scaling orthogonal, zero-mean columns. For diagonal covariances
        # d^2 = |m1-m2|^2 + sum_i (sqrt(v1_i) - sqrt(v2_i))^2.
        cols = np.array(
            [
                [1.0, 1.0],
                [1.0, -1.0],
                [-1.0, 1.0],
                [-1.0, -1.0],
            ]
        )
        # Sample variance of each column is 4/3 with ddof=1; rescale to 1.
        unit = cols / math.sqrt(4.0 / 3.0)
        x = unit * np.sqrt([2.0, 3.0])
        y = unit * np.sqrt([5.0, 7.0]) + np.array([1.0, -2.0])
        want = (1.0 + 4.0) + (math.sqrt(2) - math.sqrt(5)) ** 2 + (math.sqrt(3) - math.sqrt(7)) ** 2
        assert frechet_distance(x, y) == pytest.approx(want, rel=1e-9)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(32, 4))
        y = rng.normal(size=(32, 4)) + 0.5
        assert frechet_distance(x, y) == pytest.approx(frechet_distance(y, x), rel=1e-9)

    def test_requires_2d(self):
        with pytest.raises(ShapeError):
            frechet_distance(np.zeros(5), np.zeros(5))

    def test_requires_two_samples(self):
        with pytest.raises(ValueError):
            frechet_distance(np.zeros((1, 3)), np.zeros((4, 3)))

    def test_warns_when_underdetermined(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 8))
        with pytest.warns(RuntimeWarning):
            frechet_distance(x, x + 0.1)


class TestEmbedder:
    def test_default_dimension(self):
        emb = stats_proj_embedder()
        assert emb.name == "stats-proj-70"
        assert emb.dim == 70
        out = emb.embed(torch.rand(3, 64, 64, generator=seeded(10)))
        assert out.shape == (70,)

    def test_registry(self):
        assert "stats-proj-70" in EMBEDDERS
        assert get_embedder("stats-proj-70").dim == 70
        with pytest.raises(KeyError):
            get_embedder("inception-v3")

    def test_deterministic(self):
        emb = stats_proj_embedder()
        img = torch.rand(3, 32, 32, generator=seeded(11))
        assert np.array_equal(emb.embed(img), emb.embed(img))

    def test_fid_self_is_zero(self):
        emb = stats_proj_embedder()
        imgs = [torch.rand(3, 32, 32, generator=seeded(20 + i)) for i in range(80)]
        feats = emb.embed_all(imgs)
        assert feats.shape == (80, 70)
        assert frechet_distance(feats, feats) == pytest.approx(0.0, abs=1e-6)

    def test_fid_monotonic_in_noise(self):
        emb = stats_proj_embedder()
        truth = [torch.rand(3, 32, 32, generator=seeded(100 + i)) for i in range(80)]
        ref = emb.embed_all(truth)
        dists = []
        for k, amp in enumerate((0.05, 0.2, 0.5)):
            noisy = [
                (img + amp * torch.randn(img.shape, generator=seeded(500 + 100 * k + i))).clamp(0, 1)
                for i, img in enumerate(truth)
            ]
            dists.append(frechet_distance(emb.embed_all(noisy), ref))
        assert dists[0] < dists[1] < dists[2]

    def test_grayscale_input_tiled(self):
        emb = stats_proj_embedder()
        out = emb.embed(torch.rand(1, 32, 32, generator=seeded(12)))
        assert out.shape == (70,)


class TestEvaluate:
    def make_pairs(self, n=3, size=16):
        pairs = []
        for i in range(n):
            truth = torch.rand(3, size, size, generator=seeded(1000 + i))
            gen = (truth + 0.1 * torch.randn(3, size, size, generator=seeded(2000 + i))).clamp(0, 1)
            pairs.append((f"img{i}", gen, truth))
        return pairs

    def test_means_match_rows(self):
        report = evaluate(self.make_pairs())
        assert report.count == 3
        assert report.mean_psnr == pytest.approx(
            sum(r[1] for r in report.rows) / 3, abs=1e-9
        )
        assert report.mean_ssim == pytest.approx(
            sum(r[2] for r in report.rows) / 3, abs=1e-9
        )
        assert report.fid is None

    def test_rows_match_direct_scalars(self):
        pairs = self.make_pairs()
        report = evaluate(pairs)
        for (pid, gen, truth), (rid, p, s) in zip(pairs, report.rows):
            assert rid == pid
            assert p == pytest.approx(psnr(gen, truth), abs=1e-12)
            assert s == pytest.approx(ssim(gen, truth), abs=1e-12)

    def test_csv_layout(self):
        report = evaluate(self.make_pairs())
        text = report.to_csv()
        rows = list(csv.reader(io.StringIO(text)))
        assert rows[0] == ["id", "psnr", "ssim"]
        assert len(rows) == 4
        assert rows[1][0] == "img0"
        float(rows[1][1])
        float(rows[1][2])

    def test_infinite_psnr_serialized(self):
        truth = torch.rand(3, 16, 16, generator=seeded(42))
        report = evaluate([("same", truth.clone(), truth)])
        assert "same,inf," in report.to_csv()
        assert math.isinf(report.mean_psnr)

    def test_with_fid(self):
        # 8 pairs is fewer than the 70-dim embedding needs for a full-rank
        # covariance, so the distance comes with a warning but still works.
        with pytest.warns(RuntimeWarning, match="rank-deficient"):
            report = evaluate(self.make_pairs(8), embedder=get_embedder("stats-proj-70"))
        assert report.fid is not None and report.fid >= 0
        assert report.embedder_name == "stats-proj-70"
        assert "fid=" in report.summary()

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            evaluate([])

    def test_summary_format(self):
        report = evaluate(self.make_pairs())
        s = report.summary()
        assert s.startswith("pairs=3 ")
        assert "mean_psnr=" in s and "mean_ssim=" in s

    def test_two_pair_csv_is_bitwise_reproducible(self):
        a = evaluate(self.make_pairs(2)).to_csv()
        b = evaluate(self.make_pairs(2)).to_csv()
        assert a == b

    def test_report_is_plain_data(self):
        report = evaluate(self.make_pairs(1))
        assert isinstance(report, MetricReport)
        assert isinstance(report.rows[0][1], float)
