import numpy as np
import pytest
import torch

from sais.encoding import EncodingConfig
from sais.lie import TwistVector, compose_alignment
from sais.network import (HyperSdfNet, LocalSurfaceModel, LossWeights, NetworkConfig, alignment_matrices,
                          alignment_transform, batch_loss, gradients, inference_loss, load_checkpoint,
                          predict_sdf, save_checkpoint, sphere_gate)

SMALL = NetworkConfig(code_dim=8, width=16, hidden_layers=2, hyper_width=16, encoding=EncodingConfig(2),
                      init_radius=0.3)


def small_model(config=SMALL, seed=0, radius=1.0):
    return LocalSurfaceModel(HyperSdfNet(config, seed=seed), radius)


def test_zero_code_is_geometric_init():
    model = small_model()
    d0 = predict_sdf(model, np.zeros(8), np.zeros(6), np.ones(3), [0, 0, 0])
    far = predict_sdf(model, np.zeros(8), np.zeros(6), np.ones(3), [0.9, 0, 0])
    assert d0 < 0 < far


def test_zero_code_reproduces_base_exactly():
    net = HyperSdfNet(SMALL, seed=3)
    params = net.sdf_params(torch.zeros(1, 8, dtype=torch.float64))
    torch.manual_seed(0)
    from sais.network import _geometric_init

    base = _geometric_init(SMALL, torch.Generator().manual_seed(3), torch.float64)
    for name, t in base.items():
        assert torch.allclose(params[name][0], t, atol=1e-12)


def test_partial_prediction_shares_tail():
    cfg = NetworkConfig(code_dim=4, width=8, hidden_layers=2, hyper_width=8, predicted_layers=1,
                        encoding=EncodingConfig(1))
    net = HyperSdfNet(cfg)
    assert set(net.shared) == {"w1", "b1", "w2", "b2"}
    out = net.sdf_params(torch.randn(3, 4, dtype=torch.float64))
    assert out["w0"].shape == (3, 8, 9) and out["w1"].shape == (8, 8)
    with pytest.raises(ValueError):
        NetworkConfig(hidden_layers=2, predicted_layers=4)


def test_forward_shapes_and_code_check():
    net = HyperSdfNet(SMALL)
    out = net(torch.zeros(2, 8, dtype=torch.float64), torch.zeros(2, 5, 3, dtype=torch.float64))
    assert out.shape == (2, 5)
    with pytest.raises(ValueError):
        net(torch.zeros(2, 7, dtype=torch.float64), torch.zeros(2, 5, 3, dtype=torch.float64))


def test_torch_alignment_matches_numpy():
    rng = np.random.default_rng(0)
    for theta in (0.0, 1e-6, 1e-4, 0.3, 2.5):
        axis = rng.normal(size=3)
        beta = np.concatenate([axis / np.linalg.norm(axis) * theta, rng.normal(size=3)])
        scale = rng.uniform(0.5, 1.5, size=3)
        want = compose_alignment(TwistVector.from_vector(beta), scale).matrix
        assert np.allclose(alignment_transform(beta, scale), want, atol=1e-12)


def test_alignment_gradient_at_zero_is_finite():
    beta = torch.zeros(1, 6, dtype=torch.float64, requires_grad=True)
    lin, tr = alignment_matrices(beta, torch.ones(1, 3, dtype=torch.float64))
    (lin.sum() + tr.sum()).backward()
    assert torch.all(torch.isfinite(beta.grad))


def test_sphere_gate():
    x = torch.tensor([[[0.0, 0.0, 0.5], [0.0, 0.0, 1.5]]])
    assert sphere_gate(x, 1.0).tolist() == [[True, False]]


def _batch(model, b=2, n=64, seed=0):
    g = torch.Generator().manual_seed(seed)
    codes = torch.randn(b, 8, generator=g, dtype=torch.float64) * 0.1
    betas = torch.randn(b, 6, generator=g, dtype=torch.float64) * 0.1
    scales = 1 + torch.randn(b, 3, generator=g, dtype=torch.float64) * 0.05
    x = torch.rand(b, n, 3, generator=g, dtype=torch.float64) * 1.6 - 0.8
    s = torch.rand(b, n, generator=g, dtype=torch.float64) * 0.2 - 0.1
    return codes, betas, scales, x, s


def test_loss_excludes_samples_outside_sphere():
    model = small_model(radius=0.5)
    codes, betas, scales, x, s = _batch(model)
    far = x.clone()
    far[:, :, 0] += 10.0  # push every sample out of the sphere
    loss = batch_loss(model, codes, betas * 0, scales * 0 + 1, far, s)
    assert torch.all(loss.counts == 0)
    assert torch.all(loss.sdf == 0)


def test_loss_terms_weighted():
    model = small_model()
    codes, betas, scales, x, s = _batch(model)
    w = LossWeights(sdf=2.0, shape=3.0, translation=5.0, scale=7.0)
    loss = inference_loss(model, codes, betas, scales, x, s, w, unsigned=False, reduction="sum")
    per = 2 * loss.sdf + 3 * loss.shape + 5 * loss.translation + 7 * loss.scale
    assert torch.allclose(loss.per_instance, per)
    assert torch.isclose(loss.total, per.sum())
    tr = batch_loss(model, codes, betas, scales, x, s, w)
    assert torch.isclose(tr.total, (2 * tr.sdf + 3 * tr.shape + 5 * tr.translation).mean())


def test_unsigned_residual_uses_magnitude():
    model = small_model()
    codes, betas, scales, x, s = _batch(model)
    a = inference_loss(model, codes, betas, scales, x, s.abs(), unsigned=True)
    pred, xa = model.field(codes, betas, scales, x)
    mask = sphere_gate(xa, model.sphere_radius)
    want = ((pred.abs() - s.abs()).abs() * mask).sum(-1) / mask.sum(-1)
    assert torch.allclose(a.sdf, want)
    flags = torch.ones_like(s, dtype=torch.bool)
    assert torch.allclose(inference_loss(model, codes, betas, scales, x, s.abs(), unsigned=flags).sdf, want)


def test_summed_inference_keeps_candidates_independent():
    model = small_model()
    codes, betas, scales, x, s = _batch(model, b=3)
    for t in (codes, betas, scales):
        t.requires_grad_(True)
    full = gradients(inference_loss(model, codes, betas, scales, x, s), [codes, betas, scales])
    one = [t[1:2].detach().clone().requires_grad_(True) for t in (codes, betas, scales)]
    single = gradients(inference_loss(model, *one, x[1:2], s[1:2]), one)
    for g_full, g_one in zip(full, single):
        assert torch.allclose(g_full[1:2], g_one, atol=1e-10)


def _fd_check(model, rng, h=1e-5):
    codes, betas, scales, x, s = _batch(model, seed=int(rng.integers(1 << 30)))
    # keep samples away from the gate boundary so a step cannot flip them
    with torch.no_grad():
        _, xa = model.field(codes, betas, scales, x)
        r = xa.norm(dim=-1)
        keep = (r - model.sphere_radius).abs() > 1e-3
    tensors = [codes, betas, scales] + [p for p in model.net.parameters()]
    for t in tensors:
        t.requires_grad_(True)

    def loss_fn():
        return inference_loss(model, codes, betas, scales, x, s, valid=keep, unsigned=False).total

    grads = gradients(loss_fn(), tensors)
    worst = 0.0
    with torch.no_grad():
        for t, g in zip(tensors, grads):
            d = torch.as_tensor(rng.normal(size=tuple(t.shape)), dtype=t.dtype)
            d /= d.norm()
            t += h * d
            up = loss_fn()
            t -= 2 * h * d
            down = loss_fn()
            t += h * d
            fd = float((up - down) / (2 * h))
            an = float((g * d).sum())
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    return worst


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    cfg = NetworkConfig(code_dim=8, width=16, hidden_layers=3, hyper_width=16, encoding=EncodingConfig(2))
    for seed in range(5):
        model = LocalSurfaceModel(HyperSdfNet(cfg, seed=seed), 0.7)
        assert _fd_check(model, rng) < 1e-4


def test_checkpoint_roundtrip(tmp_path):
    model = small_model(radius=0.2)
    model.residual_mean, model.residual_std = 0.01, 0.002
    model.extra = {"note": "x"}
    codes = np.random.default_rng(0).normal(size=(3, 8))
    save_checkpoint(model, tmp_path / "m.ckpt", {"codes": codes})
    loaded, extra = load_checkpoint(tmp_path / "m.ckpt")
    assert np.array_equal(extra["codes"], codes)
    assert loaded.sphere_radius == 0.2 and loaded.threshold(2) == pytest.approx(0.014)
    assert loaded.extra == {"note": "x"}
    x = np.random.default_rng(1).normal(size=(20, 3)) * 0.2
    a = predict_sdf(model, codes[0], np.zeros(6), np.ones(3), x)
    b = predict_sdf(loaded, codes[0], np.zeros(6), np.ones(3), x)
    assert np.array_equal(a, b)


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"nope" * 10)
    with pytest.raises(ValueError):
        load_checkpoint(p)


def test_model_validates():
    with pytest.raises(ValueError):
        LocalSurfaceModel(HyperSdfNet(SMALL), 0.0)
    with pytest.raises(ValueError):
        LocalSurfaceModel(HyperSdfNet(SMALL), 1.0, residual_mean=float("nan"))
