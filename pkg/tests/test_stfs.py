"""Descriptor sampling branches: draws, pooling, determinism, eval isolation."""

import numpy as np
import pytest

from spikereid import stfs
from spikereid.stfs import SamplerSeed, global_descriptor, sample_spatial, sample_temporal
from spikereid.tensor import Tensor


def stamp_steps(t, b=1, c=1, h=2, w=2):
    """Tensor whose value at step i is the constant i, so pooled vectors
    reveal which steps were drawn."""
    data = np.zeros((t, b, c, h, w))
    for i in range(t):
        data[i] = float(i)
    return Tensor(data.reshape(t * b, c, h, w))


class TestTemporal:
    def test_k_is_half_of_t(self):
        for t in (2, 4, 8, 7, 5):
            vecs = sample_temporal(stamp_steps(t), SamplerSeed(0), time_steps=t)
            assert len(vecs) == t // 2

    def test_t2_draws_single_index(self):
        vecs = sample_temporal(stamp_steps(2), SamplerSeed(3), time_steps=2)
        assert len(vecs) == 1
        assert float(vecs[0].data) in (0.0, 1.0)

    def test_constant_map_gives_constant_vectors(self, rng):
        y = Tensor(np.full((8, 3, 5, 4), 2.75))
        for v in sample_temporal(y, SamplerSeed(1), time_steps=8):
            assert np.allclose(v.data, 2.75, atol=1e-7)

    def test_indices_distinct(self):
        # step-stamped values identify the drawn indices
        for trial in range(50):
            vecs = sample_temporal(stamp_steps(8), SamplerSeed(trial), time_steps=8)
            drawn = [int(round(float(v.data))) for v in vecs]
            assert len(set(drawn)) == len(drawn)

    def test_uniform_frequency(self):
        # acceptance: with T=8, each index drawn with frequency 0.5 +/- 0.02
        t = 8
        counts = np.zeros(t)
        n_draws = 10_000
        sampler = SamplerSeed(777)
        y = stamp_steps(t)
        for _ in range(n_draws):
            for v in sample_temporal(y, sampler, time_steps=t):
                counts[int(round(float(v.data)))] += 1
        freqs = counts / n_draws
        assert np.all(np.abs(freqs - 0.5) < 0.02), freqs

    def test_needs_two_steps(self):
        with pytest.raises(ValueError):
            sample_temporal(stamp_steps(1), SamplerSeed(0), time_steps=1)


class TestSpatial:
    def test_forced_split_on_2x2(self, rng):
        y = Tensor(np.arange(4, dtype=np.float64).reshape(1, 1, 1, 2, 2).reshape(1, 1, 2, 2))
        vecs = sample_spatial(y, SamplerSeed(0), time_steps=1)
        got = [float(v.data) for v in vecs]
        assert got == [0.0, 1.0, 2.0, 3.0]  # ul, ur, ll, lr single cells

    def test_constant_map(self):
        y = Tensor(np.full((6, 2, 5, 4), -1.5))
        for v in sample_spatial(y, SamplerSeed(2), time_steps=6):
            assert np.allclose(v.data, -1.5, atol=1e-7)

    def test_quadrants_partition_the_map(self):
        # sums over quadrants weighted by their cell counts recompose the map sum
        t, b, c, h, w = 4, 2, 3, 5, 6
        data = np.random.default_rng(0).normal(size=(t, b, c, h, w))
        y = Tensor(data.reshape(t * b, c, h, w))
        sampler = SamplerSeed(5)
        vecs = sample_spatial(y, sampler, time_steps=t)
        # recover the split by comparing against all possible splits
        matched = False
        for hr in range(1, h):
            for wr in range(1, w):
                areas = [hr * wr, hr * (w - wr), (h - hr) * wr, (h - hr) * (w - wr)]
                total = sum(v.data * a * t for v, a in zip(vecs, areas))
                if np.allclose(total, data.sum(axis=(0, 3, 4)), atol=1e-8):
                    matched = True
        assert matched

    def test_split_avoids_empty_patches(self):
        y = Tensor(np.zeros((2, 1, 2, 2)))
        for trial in range(100):
            vecs = sample_spatial(y, SamplerSeed(trial), time_steps=2)
            assert all(np.isfinite(v.data).all() for v in vecs)

    def test_needs_2x2(self):
        with pytest.raises(ValueError):
            sample_spatial(Tensor(np.zeros((2, 1, 1, 4))), SamplerSeed(0), time_steps=2)


class TestGlobal:
    def test_constant_map(self):
        y = Tensor(np.full((8, 4, 3, 2), 0.25))
        v = global_descriptor(y, time_steps=8)
        assert np.allclose(v.data, 0.25, atol=1e-7)

    def test_single_cell_mass(self):
        t, c, h, w = 4, 2, 3, 3
        data = np.zeros((t, 1, c, h, w))
        data[2, 0, 1, 0, 2] = 7.0
        v = global_descriptor(Tensor(data.reshape(t, c, h, w)), time_steps=t)
        assert v.data[0, 0] == 0.0
        assert abs(v.data[0, 1] - 7.0 / (t * h * w)) < 1e-12

    def test_equals_mean_of_all_step_pools(self, rng):
        # pooling every step then averaging equals the global pool
        t, b, c, h, w = 6, 2, 3, 4, 5
        data = rng.normal(size=(t, b, c, h, w))
        y = Tensor(data.reshape(t * b, c, h, w))
        g = global_descriptor(y, time_steps=t)
        per_step = data.mean(axis=(3, 4))
        assert np.abs(g.data - per_step.mean(axis=0)).max() < 1e-12


class TestSamplerSeed:
    def test_reproducible_from_seed_and_counter(self):
        a = SamplerSeed(42, counter=3)
        b = SamplerSeed(42, counter=3)
        assert a.next_rng().integers(0, 1000, 5).tolist() == \
               b.next_rng().integers(0, 1000, 5).tolist()

    def test_counter_advances(self):
        s = SamplerSeed(7)
        first = s.next_rng().integers(0, 1000, 5)
        second = s.next_rng().integers(0, 1000, 5)
        assert s.counter == 2
        assert not np.array_equal(first, second)

    def test_identical_seeds_reproduce_branches(self, rng):
        y = Tensor(np.random.default_rng(0).normal(size=(8, 3, 4, 4)))
        va = sample_temporal(y, SamplerSeed(9), time_steps=8)
        vb = sample_temporal(y, SamplerSeed(9), time_steps=8)
        for a, b in zip(va, vb):
            assert np.array_equal(a.data, b.data)


class TestEvalIsolation:
    def test_eval_forward_never_samples(self):
        from spikereid.model import ModelConfig, SpikingReIDNet
        cfg = ModelConfig(time_steps=2, height=8, width=8, widths=(4, 4, 4, 4),
                          num_classes=2)
        net = SpikingReIDNet(cfg, rng=np.random.default_rng(0))
        net.eval()
        stfs.reset_call_counts()
        x = np.random.default_rng(1).poisson(0.4, size=(2 * 3, 2, 8, 8)).astype(np.float32)
        import spikereid.tensor as tt
        with tt.no_grad():
            net.forward(x)
        assert stfs.CALL_COUNTS == {"temporal": 0, "spatial": 0}

    def test_train_forward_does_sample(self):
        from spikereid.model import ModelConfig, SpikingReIDNet
        cfg = ModelConfig(time_steps=4, height=16, width=16, widths=(4, 4, 4, 4),
                          num_classes=2)
        net = SpikingReIDNet(cfg, rng=np.random.default_rng(0))
        net.train()
        stfs.reset_call_counts()
        x = np.random.default_rng(1).poisson(0.4, size=(4 * 3, 2, 16, 16)).astype(np.float32)
        net.forward(x, sampler=SamplerSeed(0))
        assert stfs.CALL_COUNTS == {"temporal": 1, "spatial": 1}
