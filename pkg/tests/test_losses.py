import math

import numpy as np
import pytest
import torch

from provsod import imaging, labels, losses


@pytest.fixture(autouse=True)
def double_precision():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def binary_target(rng, shape=(8, 8)):
    q = (rng.uniform(size=shape) < 0.35).astype(np.float64)
    q[0, 0] = 1.0
    q[-1, -1] = 0.0
    return torch.tensor(q)


def soft_target(rng, shape=(8, 8)):
    q = rng.uniform(0.05, 0.9, size=shape)
    q[rng.uniform(size=shape) < 0.2] = 1.0
    q[0, 0] = 1.0
    return torch.tensor(q)


def oracle_nss(p, f):
    p, f = p.ravel(), f.ravel()
    total = 0.0
    for i in range(p.size):
        zf = (f[i] - f.mean()) / math.sqrt(f.var() + 1e-12)
        zp = (p[i] - p.mean()) / math.sqrt(p.var() + 1e-12)
        total += (zf - zp) * f[i]
    return total / f.sum()


def oracle_cc(p, q):
    p, q = p.ravel(), q.ravel()
    cov = np.mean((p - p.mean()) * (q - q.mean()))
    return cov / (math.sqrt(p.var() + 1e-12) * math.sqrt(q.var() + 1e-12))


def oracle_kld(p, q, eps=1e-8):
    p, q = p.ravel() / p.sum(), q.ravel() / q.sum()
    return sum(qi * math.log(qi / (pi + eps)) for pi, qi in zip(p, q) if qi > 0)


def central_difference(fn, x, h=1e-6):
    g = torch.zeros_like(x)
    flat = x.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = fn(x).item()
        flat[i] = old - h
        down = fn(x).item()
        flat[i] = old
        g.view(-1)[i] = (up - down) / (2 * h)
    return g


def gradient_error(fn, p):
    p = p.clone().requires_grad_(True)
    fn(p).backward()
    fd = central_difference(fn, p.detach().clone())
    return (torch.linalg.norm(p.grad - fd) / torch.linalg.norm(fd).clamp_min(1e-12)).item()


# ------------------------------------------------------------------ peak set

def test_peak_set_examples(rng):
    q = binary_target(rng)
    f = losses.peak_set(q)
    assert torch.equal(f, q > 0.5)
    smooth = torch.tensor(rng.uniform(0, 0.9, size=(6, 6)))
    with pytest.raises(ValueError):
        losses.peak_set(smooth)
    assert isinstance(losses.peak_set(q.numpy()), np.ndarray)


def test_peak_set_of_body_attention_target():
    gt = np.zeros((64, 64), bool)
    gt[20:44, 18:40] = True
    q = labels.body_attention_target(gt)
    core = imaging.dilate(gt, labels.default_dilate_radius(gt.shape))
    # pixels closer to the core edge than the kernel reach lose a little mass
    reach = int(3.0 * labels.default_sigma(gt.shape) + 0.5)
    f = losses.peak_set(q)
    assert np.array_equal(f, imaging.erode(core, reach))
    assert f[gt].all()
    assert not f[~core].any()


# --------------------------------------------------------------------- terms

def test_nss_examples(rng):
    f = binary_target(rng)
    assert losses.nss_prime(f.clone(), f) == 0.0
    p = torch.tensor(rng.uniform(size=(8, 8)))
    assert losses.nss_prime(p, f).item() == pytest.approx(oracle_nss(p.numpy(), f.numpy()), abs=1e-9)
    assert losses.nss_prime(1 - f, f).item() > 0
    with pytest.raises(ValueError):
        losses.nss_prime(p, torch.zeros(8, 8))


def test_cc_examples(rng):
    q = soft_target(rng)
    # the variance guard shifts these by about 1e-12 / var
    assert losses.cc(q, q).item() == pytest.approx(1.0, abs=1e-9)
    assert losses.cc(1 - q, q).item() == pytest.approx(-1.0, abs=1e-9)
    assert losses.cc_prime(q, q).item() == pytest.approx(0.0, abs=1e-9)
    assert losses.cc_prime(1 - q, q).item() == pytest.approx(2.0, abs=1e-9)
    with pytest.raises(ValueError):
        losses.cc(torch.ones(4), torch.ones(4))
    p = torch.tensor(rng.uniform(size=(8, 8)))
    assert losses.cc(p, q).item() == pytest.approx(oracle_cc(p.numpy(), q.numpy()), abs=1e-9)
    assert losses.cc_prime(p, q).item() == pytest.approx(1 - oracle_cc(p.numpy(), q.numpy()), abs=1e-9)
    big = torch.tensor(np.random.default_rng(0).uniform(size=(64, 64)))
    other = torch.tensor(np.random.default_rng(1).uniform(size=(64, 64)))
    assert abs(losses.cc(big, other).item()) < 0.1


def test_kld_examples(rng):
    q = soft_target(rng)
    assert abs(losses.kld(q, q).item()) <= 1e-6
    p = torch.tensor(rng.uniform(0.1, 1, size=(8, 8)))
    assert losses.kld(p, q).item() == pytest.approx(oracle_kld(p.numpy(), q.numpy()), abs=1e-9)
    four_q = torch.tensor([[0.5, 0.5], [0.0, 0.0]])
    four_p = torch.full((2, 2), 0.25)
    assert losses.kld(four_p, four_q).item() == pytest.approx(math.log(2), abs=1e-6)
    spike_q = torch.zeros(8, 8)
    spike_q[0, 0] = 1
    hole_p = torch.ones(8, 8)
    hole_p[0, 0] = 0
    assert losses.kld(hole_p, spike_q).item() > 10


def test_kld_lower_bound(rng):
    for _ in range(20):
        p = torch.tensor(rng.uniform(size=(8, 8)))
        q = torch.tensor(rng.uniform(size=(8, 8)))
        assert losses.kld(p, q).item() >= -1e-6


def test_affine_invariance(rng):
    q = soft_target(rng)
    f = losses.peak_set(q)
    p = torch.tensor(rng.uniform(size=(8, 8)))
    for a, b in ((2.0, 0.3), (0.1, -0.5), (7.0, 3.0)):
        assert losses.cc(a * p + b, q).item() == pytest.approx(losses.cc(p, q).item(), abs=1e-6)
        assert losses.nss_prime(a * p + b, f).item() == pytest.approx(losses.nss_prime(p, f).item(), abs=1e-6)


def test_constant_prediction_is_finite(rng):
    q = soft_target(rng)
    p = torch.full((8, 8), 0.3)
    for v in (losses.nss_prime(p, losses.peak_set(q)), losses.cc(p, q), losses.kld(p, q)):
        assert math.isfinite(v.item())


# ---------------------------------------------------------- composite losses

def test_body_attention_loss_is_sum_of_terms(rng):
    q = soft_target(rng)
    p = torch.tensor(rng.uniform(size=(8, 8)))
    expect = oracle_nss(p.numpy(), (q.numpy() >= 254.5 / 255).astype(float)) \
        + 1 - oracle_cc(p.numpy(), q.numpy()) + oracle_kld(p.numpy(), q.numpy())
    assert losses.body_attention_loss(p, q).item() == pytest.approx(expect, abs=1e-9)


def test_zero_at_binary_target(rng):
    q = binary_target(rng)
    assert losses.body_attention_loss(q, q).item() <= 1e-5
    assert losses.total_locating_loss([q] * 5, q).item() <= 5e-5


def test_soft_target_self_loss_is_not_zero(rng):
    # the peak mask sits inside the NSS' bracket, so a soft target never matches it exactly
    q = soft_target(rng)
    assert losses.body_attention_loss(q, q).item() > 1e-3


def test_total_loss_levels(rng):
    q = binary_target(rng)
    p = torch.tensor(rng.uniform(size=(8, 8)))
    stack = [q, q, p, q, q]
    total = losses.total_locating_loss(stack, q).item()
    assert total == pytest.approx(losses.body_attention_loss(p, q).item(), abs=5e-5)
    others = [torch.tensor(rng.uniform(size=(8, 8))) for _ in range(5)]
    a = losses.total_locating_loss(others, q).item()
    b = losses.total_locating_loss(others[::-1], q).item()
    assert a == pytest.approx(b, abs=1e-12)
    with pytest.raises(ValueError):
        losses.total_locating_loss(others[:4], q)


def test_batched_shapes_average(rng):
    qs = [binary_target(rng) for _ in range(3)]
    ps = [torch.tensor(rng.uniform(size=(8, 8))) for _ in range(3)]
    each = [losses.body_attention_loss(p, q).item() for p, q in zip(ps, qs)]
    b3 = losses.body_attention_loss(torch.stack(ps), torch.stack(qs)).item()
    b4 = losses.body_attention_loss(torch.stack(ps)[:, None], torch.stack(qs)[:, None]).item()
    assert b3 == pytest.approx(np.mean(each), abs=1e-12)
    assert b4 == pytest.approx(np.mean(each), abs=1e-12)


# ------------------------------------------------------------------ gradients

@pytest.mark.parametrize("term", ["nss", "cc", "kld", "body"])
def test_gradients_match_finite_differences(term):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        q = soft_target(rng)
        f = losses.peak_set(q)
        p = torch.tensor(rng.uniform(0.05, 0.95, size=(8, 8)))
        fn = {"nss": lambda x: losses.nss_prime(x, f),
              "cc": lambda x: losses.cc_prime(x, q),
              "kld": lambda x: losses.kld(x, q),
              "body": lambda x: losses.body_attention_loss(x, q)}[term]
        worst = max(worst, gradient_error(fn, p))
    assert worst < 1e-4


def test_descent_reaches_the_target(rng):
    q = binary_target(rng, (12, 12))
    z = torch.zeros(12, 12, requires_grad=True)
    with torch.no_grad():
        z.add_(torch.tensor(rng.normal(scale=0.1, size=(12, 12))))
    opt = torch.optim.Adam([z], lr=0.3)
    start = losses.total_locating_loss([torch.sigmoid(z)] * 5, q).item()
    for _ in range(1000):
        loss = losses.total_locating_loss([torch.sigmoid(z)] * 5, q)
        opt.zero_grad()
        loss.backward()
        opt.step()
    end = losses.total_locating_loss([torch.sigmoid(z)] * 5, q).item()
    # every term is non-negative for a binary target, so zero is the global minimum
    assert end < 0.01 and end < 1e-3 * start
    assert losses.cc(torch.sigmoid(z), q).item() > 0.99


def test_balanced_bce(rng):
    t = torch.tensor((rng.uniform(size=(1, 1, 8, 8)) < 0.2).astype(float))
    good = losses.balanced_bce((t * 2 - 1) * 20, t).item()
    bad = losses.balanced_bce((1 - 2 * t) * 20, t).item()
    assert good < 1e-6 < bad
    # both classes contribute equally when every pixel is wrong with the same margin
    all_neg = losses.balanced_bce(torch.full_like(t, -20.0), t).item()
    all_pos = losses.balanced_bce(torch.full_like(t, 20.0), t).item()
    assert all_neg == pytest.approx(all_pos, rel=1e-6)
