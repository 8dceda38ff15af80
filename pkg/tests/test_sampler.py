import math

import numpy as np
import pytest
import torch

from cadm.predictor import NoisePredictor, PredictorConfig
from cadm.sampler import (
    SamplerConfig,
    clipped_eps,
    ensemble_infer,
    ensemble_soft,
    member_generator,
    sample_once,
)
from cadm.schedule import make_linear_schedule, predict_x0, scaled_linear_schedule


class ZeroNoise:
    def __call__(self, x_t, I_a, I_b, t):
        return torch.zeros_like(x_t)


class ConstantNoise:
    def __init__(self, c):
        self.c = c

    def __call__(self, x_t, I_a, I_b, t):
        return torch.full_like(x_t, self.c)


def pair(size=16, n=1, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand((n, 3, size, size), generator=g), torch.rand((n, 3, size, size), generator=g)


def tiny_model(seed=0):
    torch.manual_seed(seed)
    m = NoisePredictor(PredictorConfig(base_channels=8, time_embed_dim=8), 16)
    with torch.no_grad():
        m.decoder.head.weight.normal_(0, 0.2)
    return m.eval()


def test_output_contract():
    a, b = pair(n=2)
    out = sample_once(a, b, tiny_model(), scaled_linear_schedule(30), member_generator(0, 0))
    assert out.shape == (2, 1, 16, 16)
    assert out.min() >= 0 and out.max() <= 1


def test_repeat_runs_bit_identical():
    a, b = pair()
    m, s = tiny_model(), scaled_linear_schedule(25)
    r1 = sample_once(a, b, m, s, member_generator(3, 1))
    r2 = sample_once(a, b, m, s, member_generator(3, 1))
    assert torch.equal(r1, r2)


def test_two_step_chain_against_closed_form():
    s = make_linear_schedule(2, 0.1, 0.4)
    a, b = pair(size=4)
    out = sample_once(a, b, ZeroNoise(), s, member_generator(5, 0), clip_denoised=False)
    g = member_generator(5, 0)
    x2 = torch.randn((1, 1, 4, 4), generator=g).double().numpy()
    z = torch.randn((1, 1, 4, 4), generator=g).double().numpy()
    a1, a2 = 0.9, 0.6
    var2 = (1 - a1) / (1 - a1 * a2) * 0.4
    x1 = x2 / math.sqrt(a2) + math.sqrt(var2) * z
    x0 = x1 / math.sqrt(a1)
    expected = np.clip((x0 + 1) / 2, 0, 1)
    np.testing.assert_allclose(out.double().numpy(), expected, atol=1e-6)


class Oracle:
    """Returns the exact noise that separates ``x_t`` from a known ``x_0``."""

    def __init__(self, x0, sched):
        self.x0, self.sched = x0, sched

    def __call__(self, x_t, I_a, I_b, t):
        abar = float(self.sched.alpha_bars[int(t[0]) - 1])
        return (x_t - math.sqrt(abar) * self.x0) / math.sqrt(1 - abar)


@pytest.mark.parametrize("clip", [True, False])
def test_exact_noise_recovers_label(clip):
    s = scaled_linear_schedule(50)
    a, b = pair(size=8, n=2)
    label = (torch.rand((2, 1, 8, 8), generator=torch.Generator().manual_seed(1)) > 0.7).double()
    out = sample_once(a.double(), b.double(), Oracle(2 * label - 1, s), s, member_generator(0, 0), clip)
    torch.testing.assert_close(out, label, atol=1e-9, rtol=0)


def test_clipping_keeps_implied_x0_in_range():
    s = scaled_linear_schedule(20)
    x = torch.randn(1, 1, 4, 4, dtype=torch.float64)
    eps = clipped_eps(x, 20, torch.full_like(x, -3.0), s)
    assert predict_x0(x, 20, eps, s).abs().max() <= 1 + 1e-9


def test_single_member_ensemble_equals_sample_once():
    a, b = pair()
    m, s = tiny_model(), scaled_linear_schedule(20)
    cfg = SamplerConfig(steps=20, ensemble_size=1, threshold=0.5, seed=11)
    cm = ensemble_infer(a, b, m, s, cfg)
    ref = sample_once(a, b, m, s, member_generator(11, 0))
    assert np.array_equal(cm.soft, ref[:, 0].numpy())
    assert np.array_equal(cm.binary, (cm.soft >= 0.5).astype(np.uint8))


def test_identical_members_give_member_value():
    # T=1 chain with zero predicted noise is deterministic given x_T, so fix x_T's source
    s = make_linear_schedule(1, 0.5, 0.5)
    a, b = pair(size=4)
    cfg = SamplerConfig(steps=1, ensemble_size=4, seed=0)
    soft, members = ensemble_soft(a, b, ConstantNoise(0.0), s, cfg, members=True)
    assert torch.allclose(soft, members.mean(0))
    # with the noise fully explained by the predictor, every member ends at the same x_0
    class Explain:
        def __call__(self, x_t, I_a, I_b, t):
            return x_t / math.sqrt(0.5)

    soft, members = ensemble_soft(a, b, Explain(), s, cfg, members=True)
    for m in members:
        torch.testing.assert_close(m, torch.full_like(m, 0.5), atol=1e-6, rtol=0)
    torch.testing.assert_close(soft, members[0], atol=1e-6, rtol=0)


def test_member_independent_of_ensemble_size():
    a, b = pair()
    m, s = tiny_model(), scaled_linear_schedule(15)
    _, small = ensemble_soft(a, b, m, s, SamplerConfig(15, 2, 0.5, 7), members=True)
    _, big = ensemble_soft(a, b, m, s, SamplerConfig(15, 5, 0.5, 7), members=True)
    assert torch.equal(small[0], big[0]) and torch.equal(small[1], big[1])


def test_member_streams_differ():
    x = torch.randn(8, generator=member_generator(0, 0))
    y = torch.randn(8, generator=member_generator(0, 1))
    z = torch.randn(8, generator=member_generator(1, 0))
    assert not torch.equal(x, y) and not torch.equal(x, z)


def test_ensemble_mean_reduces_spread():
    a, b = pair()
    m, s = tiny_model(), scaled_linear_schedule(10)
    singles, means = [], []
    for rep in range(5):
        cfg = SamplerConfig(10, 25, 0.5, 100 + rep)
        soft, members = ensemble_soft(a, b, m, s, cfg, members=True)
        singles.append(members[0])
        means.append(soft)
    single_sd = torch.stack(singles).std(0).mean()
    mean_sd = torch.stack(means).std(0).mean()
    assert mean_sd < single_sd


@pytest.mark.parametrize("kw", [{"ensemble_size": 0}, {"steps": 0}, {"threshold": 1.0}, {"threshold": 0.0}])
def test_bad_sampler_config(kw):
    with pytest.raises(ValueError):
        SamplerConfig(**kw)
