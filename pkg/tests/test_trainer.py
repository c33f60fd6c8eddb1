import numpy as np
import pytest
import torch

from sbbridge.datasets import DatasetSpec, generate
from sbbridge.potential import GmmPotential, drift
from sbbridge.trainer import (
    BridgeSample,
    SbbConfig,
    config_hash,
    dsm_loss,
    sample_bridge,
    train,
    train_beta_large,
)


def toy_data(n=400, seed=0):
    src = generate(DatasetSpec("gaussian1d", n, seed=seed, mean=1.0, var=2.0)).points
    tgt = generate(DatasetSpec("gaussian1d", n, seed=seed + 1, mean=0.0, var=1.0)).points
    return src, tgt


def test_bridge_pinned_at_start_and_end():
    y0 = np.array([[1.0, 2.0]])
    yT = np.array([[-3.0, 0.5]])
    b = sample_bridge(y0, yT, T=1.0, epsilon=1.0, rng=0, t=0.0)
    np.testing.assert_array_equal(b.yt, y0)
    b_end = sample_bridge(y0, yT, T=1.0, epsilon=1.0, rng=0, t=1.0 - 1e-12)
    assert np.abs(b_end.yt - yT).max() < 1e-5


def test_bridge_midpoint_variance():
    n = 100_000
    y0 = np.zeros((n, 1))
    yT = np.zeros((n, 1))
    eps, T = 1.3, 1.0
    b = sample_bridge(y0, yT, T=T, epsilon=eps, rng=5, t=T / 2)
    var = b.yt.var()
    expected = eps * T / 4
    se = expected * np.sqrt(2.0 / n)   # var of sample variance for gaussians
    assert abs(var - expected) < 3 * se


def test_bridge_rejects_bad_input():
    with pytest.raises(ValueError):
        sample_bridge(np.array([[np.nan]]), np.array([[0.0]]), 1.0, 1.0, 0)
    with pytest.raises(ValueError):
        sample_bridge(np.zeros((1, 1)), np.zeros((1, 1)), 1.0, 1.0, 0, t=1.0)


def test_dsm_loss_zero_when_drift_equals_target():
    pot = GmmPotential(torch.zeros(1), torch.zeros((1, 1)), torch.zeros((1, 1)), 1.0)
    yt = np.array([[0.4]])
    t = np.array([0.3])
    s = drift(pot, 0.3, torch.as_tensor(yt)).detach().numpy()
    target_yT = yt + s * (1.0 - 0.3)
    batch = BridgeSample(y0=yt, yT=target_yT, t=t, yt=yt, target=s)
    assert float(dsm_loss(pot, batch)) == 0.0


def test_dsm_loss_batch_permutation_invariant():
    rng = np.random.default_rng(2)
    pot = GmmPotential(
        torch.as_tensor(rng.standard_normal(3)),
        torch.as_tensor(rng.standard_normal((3, 2))),
        torch.zeros((3, 2), dtype=torch.float64),
        1.0,
    )
    b = sample_bridge(rng.standard_normal((64, 2)), rng.standard_normal((64, 2)), 1.0, 1.0, rng)
    perm = rng.permutation(64)
    shuffled = BridgeSample(b.y0[perm], b.yT[perm], b.t[perm], b.yt[perm], b.target[perm])
    assert float(dsm_loss(pot, b)) == pytest.approx(float(dsm_loss(pot, shuffled)), rel=1e-12)


def test_dsm_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    pot = GmmPotential(
        torch.as_tensor(rng.standard_normal(2)),
        torch.as_tensor(rng.standard_normal((2, 2))),
        torch.as_tensor(rng.uniform(-0.5, 0.5, (2, 2))),
        epsilon=1.2,
    ).requires_grad_()
    b = sample_bridge(rng.standard_normal((16, 2)), rng.standard_normal((16, 2)), 1.0, 1.2, rng)
    loss = dsm_loss(pot, b)
    loss.backward()
    step = 1e-6
    for p in pot.parameters():
        grad = p.grad.reshape(-1)
        flat = p.data.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            up = float(dsm_loss(pot, b).detach())
            flat[i] = orig - step
            down = float(dsm_loss(pot, b).detach())
            flat[i] = orig
            fd = (up - down) / (2 * step)
            assert abs(grad[i].item() - fd) / max(abs(fd), 1e-6) < 1e-4


def test_config_validation_and_hash():
    with pytest.raises(ValueError):
        SbbConfig(T_tilde=1.0)
    with pytest.raises(ValueError):
        SbbConfig(beta=-2.0)
    with pytest.warns(RuntimeWarning):
        SbbConfig(beta=0.5, T=1.0)     # below the 1/T attainment threshold
    cfg = SbbConfig(beta=float("inf"))
    assert cfg.beta is None
    a = config_hash({"x": 1, "y": [1, 2]})
    b = config_hash({"y": [1, 2], "x": 1})
    assert a == b and len(a) == 12


def test_train_smoke_structure_and_determinism():
    src, tgt = toy_data()
    cfg = SbbConfig(beta=10.0, J=3, K=2, n_epoch=120, batch_size=64, seed=7,
                    deterministic=True)
    pot1, net1, rep1 = train(cfg, src, tgt)
    pot2, net2, rep2 = train(cfg, src, tgt)
    assert rep1.dsm_losses == rep2.dsm_losses
    assert rep1.z_losses == rep2.z_losses
    for a, b in zip(pot1.parameters(), pot2.parameters()):
        np.testing.assert_array_equal(a.detach().numpy(), b.detach().numpy())
    assert len(rep1.dsm_losses) == 2
    assert all(np.isfinite(c).all() for c in rep1.dsm_losses)
    assert rep1.config_hash == rep2.config_hash
    assert rep1.wall_clock_s > 0


def test_train_checkpoints(tmp_path):
    src, tgt = toy_data(n=200)
    cfg = SbbConfig(beta=10.0, J=2, K=2, n_epoch=60, batch_size=32, seed=1)
    train(cfg, src, tgt, checkpoint_dir=tmp_path)
    assert (tmp_path / "potential_k1.json").exists()
    assert (tmp_path / "net_k1.json").exists()


def test_beta_large_huge_beta_matches_infinite_limit():
    # with beta = 1e12 the endpoint correction vanishes, so the run must
    # track the identity-map path drawing the identical randomness stream
    src, tgt = toy_data(n=300)
    common = dict(J=3, K=2, n_epoch=100, batch_size=64, seed=3)
    pot_inf, _, rep_inf = train(SbbConfig(beta=None, **common), src, tgt)
    pot_big, rep_big = train_beta_large(
        SbbConfig(beta=1e12, variant="beta_large", **common), src, tgt
    )
    for a, b in zip(pot_inf.parameters(), pot_big.parameters()):
        np.testing.assert_allclose(a.detach().numpy(), b.detach().numpy(), atol=1e-6)
    np.testing.assert_allclose(
        np.concatenate(rep_inf.dsm_losses), np.concatenate(rep_big.dsm_losses), rtol=1e-9
    )


def test_beta_large_first_iteration_uses_raw_endpoints():
    # single outer iteration consumes the same stream as the identity path
    src, tgt = toy_data(n=300)
    common = dict(J=3, K=1, n_epoch=50, batch_size=64, seed=9)
    pot_inf, _, _ = train(SbbConfig(beta=None, **common), src, tgt)
    pot_bl, _ = train_beta_large(SbbConfig(beta=5.0, variant="beta_large", **common), src, tgt)
    for a, b in zip(pot_inf.parameters(), pot_bl.parameters()):
        np.testing.assert_array_equal(a.detach().numpy(), b.detach().numpy())


def test_beta_large_head_to_head_w2_within_2x_of_full():
    from sbbridge.evaluation import w2_exact
    from sbbridge.sampler import infer

    src, tgt = toy_data(n=1000, seed=20)
    x0 = generate(DatasetSpec("gaussian1d", 1000, seed=30, mean=1.0, var=2.0)).points
    fresh_tgt = generate(DatasetSpec("gaussian1d", 1000, seed=31)).points
    common = dict(J=5, K=4, n_epoch=2000, batch_size=256, seed=4)

    cfg_full = SbbConfig(beta=100.0, **common)
    pot_f, net_f, _ = train(cfg_full, src, tgt)
    w2_full = w2_exact(infer(pot_f, net_f, x0, cfg_full, 40), fresh_tgt).value

    cfg_bl = SbbConfig(beta=100.0, variant="beta_large", **common)
    pot_b, _ = train_beta_large(cfg_bl, src, tgt)
    w2_bl = w2_exact(infer(pot_b, None, x0, cfg_bl, 40), fresh_tgt).value

    assert w2_bl < 2.0 * max(w2_full, 0.05)


def test_train_rejects_bad_shapes():
    with pytest.raises(ValueError):
        train(SbbConfig(), np.zeros((0, 1)), np.zeros((5, 1)))
    with pytest.raises(ValueError):
        train(SbbConfig(), np.zeros((5, 1)), np.zeros((5, 2)))
    with pytest.raises(ValueError):
        train_beta_large(SbbConfig(beta=None), np.zeros((5, 1)), np.zeros((5, 1)))
