import json

import numpy as np
import pytest
import torch

from datta.model import (
    DattaModel,
    GaussianPositionalEncoding,
    ModelConfig,
    ShapeError,
    count_parameters,
    grl,
    load_checkpoint,
    save_checkpoint,
)


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return DattaModel(ModelConfig()).eval()


def test_shapes(model):
    c, maps = model.extractor.forward_features(torch.rand(1, 30, 220))
    assert c.shape == (1, 32)
    assert len(maps) == 4
    assert all(m.shape == (1, 55, 32) for m in maps)
    assert ModelConfig().n_tokens == 54


def test_identical_inputs_identical_rows(model):
    x = torch.rand(1, 30, 220).repeat(2, 1, 1)
    _, maps = model.extractor.forward_features(x)
    for m in maps:
        assert torch.equal(m[0], m[1])


def test_sensitivity(model):
    x = torch.zeros(1, 30, 220)
    y = x.clone()
    y[0, 4, 17] = 1.0
    assert not torch.equal(model.extractor(x), model.extractor(y))


def test_upto_truncates(model):
    c, maps = model.extractor.forward_features(torch.rand(2, 30, 220), upto=1)
    assert c is None and len(maps) == 1


@pytest.mark.parametrize("shape", [(30, 220), (1, 31, 220), (1, 30, 200)])
def test_shape_error(model, shape):
    with pytest.raises(ShapeError):
        model.extractor(torch.rand(*shape))


def test_head_probabilities(model):
    out = model(torch.rand(5, 30, 220), with_domain=True)
    for p in (out.activity_probs, out.domain_probs):
        assert torch.all(p > 0)
        assert torch.allclose(p.sum(-1), torch.ones(5), atol=1e-5)
    assert out.activity_probs.shape == (5, 6) and out.domain_probs.shape == (5, 7)


def test_zero_head_is_uniform():
    m = DattaModel(ModelConfig()).eval()
    for p in m.activity_head.parameters():
        torch.nn.init.zeros_(p)
    with torch.no_grad():
        probs = m(torch.rand(3, 30, 220)).activity_probs
    assert torch.allclose(probs, torch.full_like(probs, 1 / 6), atol=1e-7)
    assert abs(float(probs[0, 0]) - 0.1667) < 1e-4


def test_domain_head_sees_class_token_only(model):
    x = torch.rand(2, 30, 220)
    c = model.extractor(x)
    out = model(x, with_domain=True)
    assert torch.allclose(out.domain_logits, model.domain_head(c))


def test_eval_determinism(model):
    x = torch.rand(4, 30, 220)
    assert torch.equal(model(x).activity_logits, model(x).activity_logits)


def test_parameter_budget():
    n = count_parameters(DattaModel(ModelConfig()))
    assert 30_600 <= n <= 51_000


def test_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig(n_encoder_layers=3)
    with pytest.raises(ValueError):
        ModelConfig(embed_dim=30, n_heads=4)


# -- gradient reversal --------------------------------------------------------------

def test_grl_forward_identity():
    x = torch.randn(7, 3)
    assert torch.equal(grl(x, 3.0), x)


def test_grl_scalar_chain():
    x = torch.tensor(1.5, requires_grad=True)
    w = torch.tensor(0.7)
    (w * grl(x, 2.0)).backward()
    assert torch.isclose(x.grad, -2 * w)


def test_grl_zero_lambda_blocks_gradient():
    x = torch.randn(4, requires_grad=True)
    grl(x, 0.0).pow(2).sum().backward()
    assert torch.all(x.grad == 0)


def test_grl_negative_lambda_rejected():
    with pytest.raises(ValueError):
        grl(torch.ones(1), -1.0)


def test_grl_toy_graph_finite_difference():
    # three scalar parameters: u -> h = tanh(a*u) -> grl -> y = (b*h + c)^2
    params = torch.tensor([0.8, -1.3, 0.4], dtype=torch.float64)

    def loss(p, lambd=None):
        a, b, c = p
        h = torch.tanh(a * 0.9)
        if lambd is not None:
            h = grl(h, lambd)
        return (b * h + c) ** 2

    lambd = 0.5
    p = params.clone().requires_grad_(True)
    loss(p, lambd).backward()
    eps = 1e-6
    fd = torch.zeros(3, dtype=torch.float64)
    for i in range(3):
        e = torch.zeros(3, dtype=torch.float64)
        e[i] = eps
        fd[i] = (loss(params + e) - loss(params - e)) / (2 * eps)
    # only the parameter upstream of the GRL sees the reversal
    expected = torch.stack([-lambd * fd[0], fd[1], fd[2]])
    assert torch.allclose(p.grad, expected, rtol=1e-4)


def test_positional_encoding_shape_and_learnable():
    pe = GaussianPositionalEncoding(54, 32)
    x = torch.zeros(2, 54, 32)
    out = pe(x)
    assert out.shape == x.shape and torch.all(out > 0) and torch.all(out <= 1)
    assert pe.centers.requires_grad and pe.log_widths.requires_grad


# -- checkpoints -----------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, model):
    save_checkpoint(model, tmp_path / "ckpt", {"note": "x"})
    back = load_checkpoint(tmp_path / "ckpt")
    for (k, v), (k2, v2) in zip(model.state_dict().items(), back.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)
    manifest = json.loads((tmp_path / "ckpt" / "manifest.json").read_text())
    assert manifest["dtype"] == "float32" and manifest["byteorder"] == "little"
    assert manifest["config_hash"] == model.cfg.digest() and manifest["note"] == "x"
    x = torch.rand(2, 30, 220)
    assert torch.equal(back(x).activity_logits, model(x).activity_logits)


def test_checkpoint_hash_mismatch(tmp_path, model):
    from datta.model import load_tensors, save_tensors

    save_checkpoint(model, tmp_path)
    path = tmp_path / "model.safetensors"
    tensors, meta = load_tensors(path)
    save_tensors(tensors, path, meta | {"config_hash": "0" * 16})
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path)
