import csv
import json

import numpy as np
import pytest
import torch

from gmmsep.datagen import drum_band, render_mixture, synth_stem
from gmmsep.dsp import AudioClip, istft, stft
from gmmsep.separator import (_crossfade, embedding_views, export_embedding_views, load_model,
                              pca, query_gaussian, query_masks, query_separate, separate,
                              separate_masks)


def band_energy(x, sr, lo, hi):
    P = np.abs(np.fft.rfft(x)) ** 2
    f = np.fft.rfftfreq(len(x), 1 / sr)
    inside = (f >= lo) & (f <= hi)
    return P[inside].sum(), P[~inside].sum()


@pytest.fixture(scope="module")
def model(small_run):
    return load_model(small_run["checkpoint"])


@pytest.fixture(scope="module")
def mixture(small_run):
    return render_mixture(small_run["test"][0])


class TestSeparate:
    def test_mono_shapes(self, model, mixture):
        mix, _ = mixture
        out = separate(mix, model)
        assert list(out) == list(model.classes)
        assert all(c.samples.shape == mix.samples.shape for c in out.values())

    def test_stereo_is_channelwise(self, model, mixture, small_run):
        a, _ = mixture
        b, _ = render_mixture(small_run["test"][1])
        stereo = separate(AudioClip(np.stack([a.samples[0], b.samples[0]]), 16000), model)
        left, right = separate(a, model), separate(b, model)
        for c in model.classes:
            np.testing.assert_array_equal(stereo[c].samples[0], left[c].samples[0])
            np.testing.assert_array_equal(stereo[c].samples[1], right[c].samples[0])

    def test_bit_identical(self, small_run, mixture):
        mix, _ = mixture
        a = separate(mix, small_run["checkpoint"])
        b = separate(mix, small_run["checkpoint"])
        assert all(np.array_equal(a[c].samples, b[c].samples) for c in a)

    def test_masks_bounded_and_stems_sum_to_mixture(self, model, mixture):
        mix, _ = mixture
        masks, feats = separate_masks(mix.samples[0], model)
        assert masks.min() >= 0 and masks.max() <= 1
        out = separate(mix, model)
        total = sum(c.samples for c in out.values())
        err = np.linalg.norm(total - mix.samples) / np.linalg.norm(mix.samples)
        assert err < 0.05

    def test_all_ones_masks_give_c_times_mixture(self, model, mixture):
        mix, _ = mixture
        X = stft(mix, model.frontend.stft_config)
        stems = [istft(X.with_values(X.values * 1.0)).samples for _ in model.classes]
        np.testing.assert_allclose(sum(stems), len(model.classes) * mix.samples, atol=1e-9)

    def test_long_input_is_chunked(self, model):
        x = synth_stem("vocals", 2.6, 16000, 0).samples[0] + synth_stem("bass", 2.6, 16000, 0).samples[0]
        out = separate(AudioClip(x, 16000), model)
        assert all(c.num_samples == len(x) for c in out.values())
        total = sum(c.samples[0] for c in out.values())
        assert np.linalg.norm(total - x) / np.linalg.norm(x) < 0.05

    def test_crossfade_identity(self, rng):
        x = rng.standard_normal(1000)
        y = _crossfade(x, 128, lambda s: s[None] * 2.0)
        np.testing.assert_allclose(y[0], 2 * x, atol=1e-12)

    def test_wrong_rate(self, model):
        with pytest.raises(ValueError, match="resample"):
            separate(AudioClip(np.zeros(8000), 8000), model)

    def test_empty(self, model):
        with pytest.raises(ValueError):
            separate(AudioClip(np.zeros((1, 0)), 16000), model)


class TestQuery:
    def test_self_query_mask_max_is_one(self, model, mixture):
        mix, _ = mixture
        g = query_gaussian(mix, model)
        mel, lin, _ = query_masks(mix.samples[0], g, model)
        assert mel.max() == 1.0 and mel.min() >= 0
        assert lin.min() >= 0 and lin.max() <= 1

    def test_silent_bins_get_low_values(self, model):
        tone = synth_stem("vocals", 1.0, 16000, 5)
        x = tone.samples[0].copy()
        x[8000:] = 0.0
        g = query_gaussian(tone, model, variance_floor=1e-4)
        mel, _, _ = query_masks(x, g, model)
        silent = mel[mel.shape[0] // 2 + 4:]
        assert np.median(silent) < 0.01 * mel.max()

    def test_density_oracle_on_embeddings(self, rng):
        from scipy.stats import multivariate_normal
        from gmmsep.classgmm import fit_single_gaussian, likelihood_mask
        tonal = rng.normal([0.8, -0.5, 0.2], 0.05, size=(200, 3))
        silent = rng.normal([-0.6, 0.4, -0.7], 0.05, size=(50, 3))
        V = np.concatenate([tonal[:100], silent])
        g = fit_single_gaussian(torch.tensor(tonal), floor=0.05)
        m = likelihood_mask(torch.tensor(V), g).numpy()
        dens = multivariate_normal(g.means[0].numpy(), np.diag(g.full_variances()[0].numpy()))
        oracle = dens.logpdf(V)
        np.testing.assert_allclose(m, np.exp(oracle - oracle.max()), rtol=1e-9, atol=1e-300)
        assert m[100:].max() < 1e-3 * m.max()

    def test_short_query(self, model, mixture):
        with pytest.raises(ValueError, match="frame"):
            query_separate(AudioClip(np.ones(100), 16000), mixture[0], model)

    def test_baseline_has_no_embeddings(self, tmp_path, small_run):
        from gmmsep.trainer import desk_config
        base = desk_config(baseline=True).build_model()
        with pytest.raises(ValueError, match="baseline"):
            query_separate(mixture_clip(small_run), mixture_clip(small_run), base)

    def test_fixed_floor(self, model, mixture):
        g = query_gaussian(mixture[0], model, variance_floor=1e-4)
        h = query_gaussian(mixture[0], model)
        assert (h.variances >= g.variances).all()
        assert h.variances.min() >= model.gaussian_params().detach().full_variances().mean() - 1e-6


def mixture_clip(run):
    return render_mixture(run["test"][0])[0]


def test_query_two_class_disjoint_bands(desk_runs, desk_data):
    """A drum stem pulls its own band out of a drums + bass mixture."""
    model = load_model(desk_runs.get("sphr-tied")["checkpoint"])
    lo, hi = drum_band(16000)
    spec = desk_data["test"][0]
    _, stems = render_mixture(spec)
    mix = AudioClip(stems["drums"].samples + stems["bass"].samples, 16000)
    out = query_separate(stems["drums"], mix, model).samples[0]
    ei, eo = band_energy(out, 16000, lo, hi)
    mi, mo = band_energy(mix.samples[0], 16000, lo, hi)
    assert ei / mi >= 0.8
    assert eo / mo <= 0.2


class TestInspect:
    def test_pca_reconstructs(self, rng):
        X = rng.normal(size=(200, 5)) @ rng.normal(size=(5, 5))
        mean, comps, var = pca(X)
        assert np.all(np.diff(var) <= 1e-12)
        rec = (X - mean) @ comps.T @ comps
        assert np.max(np.abs(rec - (X - mean))) < 1e-8

    def test_export(self, model, mixture, tmp_path):
        views = export_embedding_views(mixture[0], model, tmp_path)
        with open(tmp_path / "pca.csv") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["frame", "mel_bin", "pc1", "pc2", "label"]
        assert len(rows) - 1 == len(views.labels)
        assert {r[4] for r in rows[1:]} <= set(model.classes)
        assert views.explained[0] >= views.explained[1]
        K = model.net_config.embedding_dim
        grid = np.loadtxt(tmp_path / "dim_0.csv", delimiter=",")
        assert grid.shape == (model.frontend.mel_bins, views.grids.shape[2])
        assert len(list(tmp_path.glob("dim_*.csv"))) == K
        side = json.loads((tmp_path / "gaussians.json").read_text())
        assert side["kind"] == "sphr-tied" and len(side["means"]) == 4
        assert np.all(np.array(side["variances"]) > 0)

    def test_views_reconstruct_centered_embeddings(self, model, mixture):
        v = embedding_views(mixture[0], model)
        X = v.grids.transpose(2, 1, 0)[v.bins[:, 0], v.bins[:, 1]]
        rec = (X - v.mean) @ v.components.T @ v.components
        assert np.max(np.abs(rec - (X - v.mean))) < 1e-8
