import pytest
import torch

from helpers import brute_match
from satvsr.csna import CrossScaleAggregation, aggregate, build_pyramid, cross_scale_match, level_candidates


@pytest.fixture(autouse=True)
def double_default():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def test_pyramid_constant_and_shapes():
    m = torch.full((1, 3, 16, 24), 0.7)
    pyr = build_pyramid(m)
    assert len(pyr) == 4
    for l, lev in enumerate(pyr):
        assert lev.shape[-2:] == (16 // 2 ** l, 24 // 2 ** l)
        assert torch.max(torch.abs(lev - 0.7)) < 1e-9
    assert pyr[0] is m


def test_pyramid_block_mean():
    m = torch.tensor([[1.0, 2.0], [3.0, 4.0]]).view(1, 1, 2, 2)
    assert build_pyramid(m, 1)[1].item() == 2.5


def test_pyramid_preserves_global_mean():
    m = torch.randn(2, 4, 32, 16)
    for lev in build_pyramid(m):
        assert abs(lev.mean().item() - m.mean().item()) < 1e-9


def test_pyramid_divisibility():
    with pytest.raises(ValueError):
        build_pyramid(torch.zeros(1, 1, 12, 16))


def test_match_exact_copy():
    P = 4
    q = torch.randn(1, 1, 2, P, P)
    level = torch.zeros(1, 2, 8, 8)
    level[0, :, 4:, :4] = q[0, 0]
    level[0, 0, :4, :4] = 0
    level[0, 1, :4, 4:] = 1.0  # nonzero but orthogonal-ish candidates
    _, idx, sim = cross_scale_match(q, level, P)
    assert idx.item() == 2
    assert sim.item() == pytest.approx(1.0, abs=1e-12)


def test_match_tie_index_zero():
    q = torch.randn(1, 3, 2, 4, 4)
    level = torch.ones(1, 2, 8, 8)
    _, idx, _ = cross_scale_match(q, level, 4)
    assert torch.all(idx == 0)


@pytest.mark.parametrize("seed", range(50))
def test_match_brute_force(seed):
    g = torch.Generator().manual_seed(seed)
    P = 4
    query = torch.randn(1, 1, 3, P, P, generator=g)
    level = torch.randn(1, 3, 16, 16, generator=g)
    matched, idx, sim = cross_scale_match(query, level, P)
    bi, bs = brute_match(query[0, 0], level[0], P)
    assert idx.item() == bi
    assert abs(sim.item() - bs) < 1e-12
    r, c = divmod(bi, 4)
    assert torch.equal(matched[0, 0], level[0, :, r * P:(r + 1) * P, c * P:(c + 1) * P])


def test_degenerate_small_level_resized():
    level = torch.randn(1, 2, 2, 2)
    cand = level_candidates(level, 4)
    assert cand.shape == (1, 1, 2, 4, 4)
    # bilinear resize keeps the mean of a 2x2 map under 2x upsampling
    assert torch.allclose(cand.mean(dim=(-2, -1)), level.mean(dim=(-2, -1)))


def test_reflect_padding_for_nondivisible_level():
    cand = level_candidates(torch.randn(1, 1, 6, 6), 4)
    assert cand.shape == (1, 4, 1, 4, 4)


def test_aggregate_gate_off_depends_only_on_query():
    torch.manual_seed(0)
    conv = torch.nn.Conv2d(8, 2, 3, 1, 1)
    q = torch.randn(1, 2, 4, 4)
    m1 = [torch.randn(1, 2, 4, 4) for _ in range(3)]
    m2 = [torch.randn(1, 2, 4, 4) for _ in range(3)]
    zeros = [torch.zeros(1, 1, 1, 1)] * 3
    a, b = aggregate(q, m1, zeros, conv), aggregate(q, m2, zeros, conv)
    assert torch.equal(a, b)
    expect = conv(torch.cat([q, torch.zeros(1, 6, 4, 4)], dim=1))
    assert torch.equal(a, expect)


def test_aggregate_zero_inputs():
    conv = torch.nn.Conv2d(8, 2, 3, 1, 1)
    torch.nn.init.zeros_(conv.bias)
    z = torch.zeros(1, 2, 4, 4)
    out = aggregate(z, [z, z, z], [torch.ones(1)] * 3, conv)
    assert torch.count_nonzero(out) == 0
    with pytest.raises(ValueError):
        aggregate(z, [z, z, torch.zeros(1, 2, 2, 2)], [torch.ones(1)] * 3, conv)


def test_gates_in_unit_interval_and_finite():
    torch.manual_seed(1)
    mod = CrossScaleAggregation(4, 4)
    q = torch.randn(1, 4, 4, 4, 4) * 50
    gates = mod.gates(q, [torch.randn(1, 4, 4, 4, 4) for _ in range(3)])
    for g in gates:
        assert torch.all((g > 0) & (g < 1))
    with torch.no_grad():
        torch.nn.init.normal_(mod.aggr.weight)
    assert torch.isfinite(mod(torch.randn(2, 4, 16, 16))).all()


def test_gate_gradient_finite_differences():
    torch.manual_seed(2)
    mod = CrossScaleAggregation(3, 4)
    with torch.no_grad():
        torch.nn.init.normal_(mod.aggr.weight, std=0.3)
        torch.nn.init.normal_(mod.aggr.bias, std=0.3)
    m = torch.randn(1, 3, 8, 8)
    target = torch.randn(1, 3, 8, 8)
    loss = lambda: ((mod(m) - target) ** 2).sum()
    params = [p for lin in mod.gate for p in lin.parameters()]
    grads = torch.autograd.grad(loss(), params)
    h = 1e-5
    for p, g in zip(params, grads):
        num = torch.zeros_like(p)
        with torch.no_grad():
            for i in range(p.numel()):
                flat = p.view(-1)
                old = flat[i].item()
                flat[i] = old + h
                up = loss().item()
                flat[i] = old - h
                down = loss().item()
                flat[i] = old
                num.view(-1)[i] = (up - down) / (2 * h)
        rel = (g - num).abs().max() / max(g.abs().max().item(), 1e-12)
        assert rel < 1e-4
