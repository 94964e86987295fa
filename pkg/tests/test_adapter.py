import math

import numpy as np
import pytest
import torch

from segreplay.adapter import (
    AdapterConfig,
    FileEmbeddingProvider,
    HashedEmbeddingProvider,
    PromptEmbedding,
    TaskAdapter,
    embed_prompt,
    init_adapter,
    recalibrate,
    render_prompt,
)
from segreplay.errors import ConfigurationError
from segreplay.taskgen import AppearanceParams, TaskSpec


def _spec(modality="MRI", region="heart", objective="ventricle segmentation"):
    return TaskSpec(
        task_id=1,
        name="demo",
        code="D",
        modality=modality,
        region=region,
        objective=objective,
        num_classes=2,
        appearance=AppearanceParams(0.0, 1.0, 0.0),
        geometry="nested_ellipse",
        image_size=32,
        seed=0,
    )


def test_render_prompt_template():
    assert render_prompt(_spec()) == ["MRI images", "of heart", "for ventricle segmentation"]


def test_render_prompt_varies_only_changed_slot():
    a = render_prompt(_spec())
    b = render_prompt(_spec(objective="atrium segmentation"))
    assert a[0] == b[0] and a[1] == b[1] and a[2] != b[2]


def test_render_prompt_deterministic():
    assert render_prompt(_spec()) == render_prompt(_spec())


def test_render_prompt_empty_slot():
    with pytest.raises(ConfigurationError):
        render_prompt(_spec(region="  "))


def test_hashed_provider_determinism_and_norm():
    provider = HashedEmbeddingProvider(dim=64)
    row1 = provider.embed("MRI images")
    row2 = HashedEmbeddingProvider(dim=64).embed("MRI images")
    assert np.array_equal(row1, row2)
    assert abs(np.linalg.norm(row1) - 1.0) < 1e-6


def test_hashed_provider_distinct_tokens():
    provider = HashedEmbeddingProvider(dim=32)
    rows = [provider.embed(t) for t in ("alpha", "beta", "gamma")]
    for i in range(3):
        for j in range(i + 1, 3):
            assert np.linalg.norm(rows[i] - rows[j]) > 0


def test_embed_prompt_shape():
    provider = HashedEmbeddingProvider(dim=16)
    emb = embed_prompt(provider, ["a", "b", "c"], task_id=2)
    assert emb.tokens.shape == (3, 16)
    assert emb.task_id == 2
    with pytest.raises(ValueError):
        embed_prompt(provider, [], task_id=2)


def test_file_provider_round_trip(tmp_path):
    path = tmp_path / "emb.tsv"
    path.write_text("tok a\t1.0,0.0,0.5\ntok b\t-0.25,2.0,0.125\n")
    provider = FileEmbeddingProvider(path)
    assert provider.dim == 3
    assert np.allclose(provider.embed("tok b"), [-0.25, 2.0, 0.125])
    with pytest.raises(KeyError, match="tok c"):
        provider.embed("tok c")


def test_recalibrate_gamma_zero_is_identity():
    cfg = AdapterConfig(dim=8, ratio=2, gamma_init=0.0)
    adapter = init_adapter(1, cfg, torch.Generator().manual_seed(0))
    with torch.no_grad():  # non-zero psi so only gamma=0 protects identity
        adapter.up.weight.copy_(torch.randn_like(adapter.up.weight))
        adapter.up.bias.copy_(torch.randn_like(adapter.up.bias))
    e = PromptEmbedding(tokens=torch.randn(3, 8), task_id=1)
    w = recalibrate(adapter, e)
    assert torch.equal(w.tokens, e.tokens)


def test_recalibrate_zero_psi_is_identity():
    cfg = AdapterConfig(dim=8, ratio=2, gamma_init=0.7)
    adapter = TaskAdapter(1, cfg)
    with torch.no_grad():
        adapter.down.weight.zero_()
        adapter.up.weight.zero_()
        adapter.up.bias.zero_()
    e = PromptEmbedding(tokens=torch.randn(3, 8), task_id=1)
    assert torch.equal(recalibrate(adapter, e).tokens, e.tokens)


def test_recalibrate_hand_matrix_oracle():
    cfg = AdapterConfig(dim=2, ratio=1, gamma_init=0.5)
    adapter = TaskAdapter(1, cfg).double()
    w1 = [[0.3, -0.7], [1.1, 0.4]]
    w2 = [[-0.2, 0.9], [0.6, -1.3]]
    b2 = [0.05, -0.15]
    with torch.no_grad():
        adapter.down.weight.copy_(torch.tensor(w1, dtype=torch.float64))
        adapter.up.weight.copy_(torch.tensor(w2, dtype=torch.float64))
        adapter.up.bias.copy_(torch.tensor(b2, dtype=torch.float64))
    e = PromptEmbedding(tokens=torch.tensor([[1.0, 0.0]], dtype=torch.float64), task_id=1)
    out = recalibrate(adapter, e).tokens[0]

    def gelu(x):
        return x * 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))

    h = [gelu(w1[0][0] * 1.0 + w1[0][1] * 0.0), gelu(w1[1][0] * 1.0 + w1[1][1] * 0.0)]
    psi = [
        w2[0][0] * h[0] + w2[0][1] * h[1] + b2[0],
        w2[1][0] * h[0] + w2[1][1] * h[1] + b2[1],
    ]
    expected = [1.0 + 0.5 * psi[0], 0.0 + 0.5 * psi[1]]
    assert abs(float(out[0]) - expected[0]) < 1e-9
    assert abs(float(out[1]) - expected[1]) < 1e-9


def test_adapter_parameter_budget():
    d, r = 64, 4
    adapter = TaskAdapter(1, AdapterConfig(dim=d, ratio=r))
    count = sum(p.numel() for p in adapter.parameters())
    assert count <= 2 * d * d // r + d + 1


def test_recalibrate_dimension_mismatch():
    adapter = TaskAdapter(1, AdapterConfig(dim=8, ratio=2))
    e = PromptEmbedding(tokens=torch.randn(3, 6), task_id=1)
    with pytest.raises(ValueError):
        recalibrate(adapter, e)


def test_gamma_gradient_flows():
    cfg = AdapterConfig(dim=4, ratio=2, gamma_init=0.1)
    adapter = init_adapter(1, cfg, torch.Generator().manual_seed(1))
    with torch.no_grad():
        adapter.up.weight.copy_(torch.randn_like(adapter.up.weight))
    e = PromptEmbedding(tokens=torch.randn(2, 4), task_id=1)
    recalibrate(adapter, e).tokens.square().sum().backward()
    assert adapter.gamma.grad is not None
    assert float(adapter.gamma.grad.abs()) > 0
    assert adapter.down.weight.grad is not None
