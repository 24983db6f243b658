import pytest
import torch

from subjvid.errors import InvalidArgument, NumericError, ShapeError
from subjvid.flow_matching import euler_sample, fm_loss, make_training_pair


def latent(seed=0, shape=(2, 4, 8, 8, 3)):
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


@pytest.mark.parametrize("t", [0.0, 0.25, 0.5, 0.75, 1.0])
def test_interpolation_identities(t):
    x1, x0 = latent(1), latent(2)
    p = make_training_pair(x1, t, x0=x0)
    assert torch.equal(p.v, x1 - x0)
    torch.testing.assert_close(p.xt, t * x1 + (1 - t) * x0, atol=4e-16, rtol=4e-16)
    if t == 0.0:
        assert torch.equal(p.xt, x0)
    if t == 1.0:
        assert torch.equal(p.xt, x1)


def test_per_sample_timesteps():
    x1, x0 = latent(1), latent(2)
    t = torch.tensor([0.0, 1.0], dtype=torch.float64)
    p = make_training_pair(x1, t, x0=x0)
    assert torch.equal(p.xt[0], x0[0])
    assert torch.equal(p.xt[1], x1[1])


def test_degenerate_pair():
    x = latent(3)
    for t in (0.0, 0.3, 1.0):
        p = make_training_pair(x, t, x0=x.clone())
        assert torch.equal(p.v, torch.zeros_like(x))
        assert torch.equal(p.xt, x)


def test_noise_is_seeded():
    x1 = latent(4)
    a = make_training_pair(x1, 0.5, torch.Generator().manual_seed(9))
    b = make_training_pair(x1, 0.5, torch.Generator().manual_seed(9))
    assert torch.equal(a.x0, b.x0)


def test_bad_timestep():
    with pytest.raises(InvalidArgument):
        make_training_pair(latent(), 1.5)


def test_loss_basic():
    x = latent(5)
    assert fm_loss(x, x).item() == 0.0
    assert fm_loss(x + 1, x).item() == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ShapeError):
        fm_loss(x, x[0])


def test_loss_matches_loop_oracle():
    a, b = latent(6).numpy(), latent(7).numpy()
    total = 0.0
    for u, w in zip(a.reshape(-1).tolist(), b.reshape(-1).tolist()):
        total += (u - w) ** 2
    oracle = total / a.size
    got = fm_loss(torch.from_numpy(a), torch.from_numpy(b)).item()
    assert abs(got - oracle) <= 1e-12 * oracle


def test_euler_constant_field_exact():
    c = latent(8)
    x0 = latent(9)
    for steps in (1, 3, 32):
        out = euler_sample(lambda x, t, cond: cond, c, steps, None, tuple(c.shape),
                           dtype=torch.float64, x0=x0)
        torch.testing.assert_close(out, x0 + c, atol=1e-12, rtol=0)


def test_euler_reproducible():
    f = lambda x, t, cond: -x * t[:, None]
    a = euler_sample(f, None, 16, torch.Generator().manual_seed(1), (3, 5))
    b = euler_sample(f, None, 16, torch.Generator().manual_seed(1), (3, 5))
    assert torch.equal(a, b)


def test_euler_nan_reports_step():
    def f(x, t, cond):
        return x * float("nan") if t[0] > 0.4 else torch.zeros_like(x)
    with pytest.raises(NumericError, match="step 3"):
        euler_sample(f, None, 5, None, (1, 2))


def test_euler_learned_constant_field():
    """A tiny model fit to v = a recovers the closed-form endpoint x0 + a."""
    torch.manual_seed(0)
    a = torch.tensor([0.7, -1.2, 2.0])
    net = torch.nn.Sequential(torch.nn.Linear(4, 32), torch.nn.SiLU(), torch.nn.Linear(32, 3))
    opt = torch.optim.Adam(net.parameters(), lr=1e-2)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, 2000)
    g = torch.Generator().manual_seed(0)
    for _ in range(2000):
        x0 = torch.randn(64, 3, generator=g)
        x1 = x0 + a
        p = make_training_pair(x1, torch.rand(64, generator=g), x0=x0)
        pred = net(torch.cat([p.xt, p.t[:, None]], dim=1))
        loss = fm_loss(pred, p.v)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
    x0 = torch.randn(16, 3, generator=g)
    out = euler_sample(lambda x, t, _: net(torch.cat([x, t[:, None]], 1)), None, 32, None, (16, 3), x0=x0)
    assert (out - (x0 + a)).abs().max().item() < 1e-2
