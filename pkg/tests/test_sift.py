"""Perturbation-consistency regulariser: normalisation, R_adv, pathways."""

import numpy as np
import numpy.testing as npt
import pytest

from desklm.data import MaskedBatch
from desklm.errors import ConfigError
from desklm.model import Model, ModelConfig
from desklm.sift import SiftConfig, normalize_embeddings, sift_loss, symmetric_kl
from desklm.tensor import Tape, Tensor


def cfg_model(dropout=0.0, seed=20):
    cfg = ModelConfig(vocab_size=13, max_len=12, L=1, d=8, heads=2, ffn=16,
                      k=3, n_emd=1, dropout=dropout)
    return Model(cfg, seed=seed)


def small_batch():
    x = np.array([[2, 7, 8, 9, 3, 0], [2, 10, 11, 3, 0, 0]], dtype=np.int64)
    xt = x.copy()
    xt[0, 2] = 4
    xt[1, 1] = 4
    real = np.array([[1, 1, 1, 1, 1, 0], [1, 1, 1, 1, 0, 0]], dtype=bool)
    return MaskedBatch(x=x, x_tilde=xt, positions=[[2], [1]], real=real)


def test_normalize_embeddings_standardises():
    rng = np.random.default_rng(0)
    e = Tensor(rng.normal(3.0, 7.0, (5, 16)))
    out = normalize_embeddings(e).data
    npt.assert_allclose(out.mean(axis=1), np.zeros(5), atol=1e-9)
    npt.assert_allclose(out.var(axis=1), np.ones(5), atol=1e-9)


def test_normalize_embeddings_scale_invariant():
    rng = np.random.default_rng(1)
    e = rng.normal(0.0, 2.0, (4, 12))
    base = normalize_embeddings(Tensor(e)).data
    for c in (10.0, 0.01, 1e3):
        scaled = normalize_embeddings(Tensor(c * e)).data
        npt.assert_allclose(scaled, base, atol=1e-9)


def test_symmetric_kl_properties():
    rng = np.random.default_rng(2)
    a = Tensor(rng.normal(0, 1, (6, 9)))
    b = Tensor(rng.normal(0, 1, (6, 9)))
    kl_ab = symmetric_kl(a, b).item()
    kl_ba = symmetric_kl(b, a).item()
    assert kl_ab > 0
    npt.assert_allclose(kl_ab, kl_ba, rtol=1e-12)
    self_kl = symmetric_kl(a, a).item()
    npt.assert_allclose(self_kl, 0.0, atol=1e-15)


def test_disabled_and_lambda_zero_are_bitwise_identical():
    m = cfg_model(dropout=0.1)
    batch = small_batch()
    losses = {}
    for name, cfg in (
        ("off", SiftConfig(enabled=False)),
        ("lam0", SiftConfig(enabled=True, lam=0.0)),
    ):
        with Tape() as tape:
            loss = sift_loss(batch, m, cfg, mode="mlm", seed=3)
        losses[name] = loss.item()
    assert losses["off"] == losses["lam0"]  # bitwise


def test_plain_path_matches_forward_mlm_when_no_dropout():
    m = cfg_model(dropout=0.0)
    batch = small_batch()
    plain = sift_loss(batch, m, SiftConfig(enabled=False), mode="mlm", seed=4)
    direct = m.forward_mlm(batch)
    assert plain.item() == direct.item()


def test_r_adv_nonnegative_and_tiny_at_tiny_epsilon():
    m = cfg_model()
    batch = small_batch()
    cfg = SiftConfig(enabled=True, epsilon=1e-8, ascent_steps=1, lam=1.0)
    loss, task, r_adv = sift_loss(batch, m, cfg, mode="mlm", seed=5,
                                  return_parts=True)
    assert r_adv.item() >= 0.0
    assert r_adv.item() < 1e-10
    npt.assert_allclose(loss.item(), task.item() + r_adv.item(), rtol=1e-12)


def test_r_adv_grows_with_epsilon():
    m = cfg_model()
    batch = small_batch()
    values = []
    for eps in (1e-4, 1e-2, 1.0):
        cfg = SiftConfig(enabled=True, epsilon=eps, ascent_steps=2,
                         ascent_lr=eps / 2, lam=1.0)
        _, _, r_adv = sift_loss(batch, m, cfg, mode="mlm", seed=6,
                                return_parts=True)
        values.append(r_adv.item())
    assert values[0] >= 0
    assert values[2] > values[0]


def test_gradients_flow_into_params_not_leaked_from_ascent():
    m = cfg_model()
    batch = small_batch()
    cfg = SiftConfig(enabled=True, epsilon=1e-2, ascent_steps=2, lam=0.5)
    with Tape() as tape:
        loss = sift_loss(batch, m, cfg, mode="mlm", seed=7)
    tape.backward(loss)
    grads = {n: p.grad for n, p in m.params.items() if p.grad is not None}
    assert "tok_emb" in grads
    assert any(np.abs(g).max() > 0 for g in grads.values())
    # regulariser changes the gradient relative to a plain run
    m2 = cfg_model()
    with Tape() as tape2:
        plain = sift_loss(batch, m2, SiftConfig(enabled=False), mode="mlm", seed=7)
    tape2.backward(plain)
    diff = np.abs(m.params["tok_emb"].grad - m2.params["tok_emb"].grad).max()
    assert diff > 0


def test_sift_determinism():
    batch = small_batch()
    cfg = SiftConfig(enabled=True, epsilon=1e-2, ascent_steps=2, lam=1.0)
    vals = []
    for _ in range(2):
        m = cfg_model(dropout=0.1, seed=21)
        with Tape():
            vals.append(sift_loss(batch, m, cfg, mode="mlm", seed=8).item())
    assert vals[0] == vals[1]


def test_sift_arlm_mode():
    m = cfg_model()
    rows = [np.array([2, 7, 8, 9, 3]), np.array([2, 10, 3])]
    cfg = SiftConfig(enabled=True, epsilon=1e-2, ascent_steps=1, lam=1.0)
    loss, task, r_adv = sift_loss(rows, m, cfg, mode="arlm", seed=9,
                                  return_parts=True)
    assert np.isfinite(loss.item())
    assert r_adv.item() >= 0
    with pytest.raises(ConfigError):
        sift_loss(rows, m, cfg, mode="span", seed=9)


def test_sift_config_validation():
    with pytest.raises(ConfigError):
        SiftConfig(epsilon=-1.0)
    with pytest.raises(ConfigError):
        SiftConfig(ascent_steps=-1)
    with pytest.raises(ConfigError):
        SiftConfig(lam=-0.5)
