from __future__ import annotations

import math

import pytest
import torch

from tucan.capsule_core import PrimaryCapsulesDown, PrimaryCapsulesUp, deroute, project_votes, route, squash
from tucan.errors import ShapeError


def _routing_oracle(votes, iterations):
    """Step-by-step routing for one sample, plain Python lists."""
    n_in, n_out, dim = len(votes), len(votes[0]), len(votes[0][0])
    logits = [[0.0] * n_out for _ in range(n_in)]
    for iteration in range(iterations):
        coupling = []
        for i in range(n_in):
            exps = [math.exp(value) for value in logits[i]]
            coupling.append([value / sum(exps) for value in exps])
        entities = []
        for j in range(n_out):
            s = [sum(coupling[i][j] * votes[i][j][d] for i in range(n_in)) for d in range(dim)]
            squared = sum(value * value for value in s)
            scale = math.sqrt(squared) / (1.0 + squared) if squared else 0.0
            entities.append([value * scale for value in s])
        if iteration < iterations - 1:
            for i in range(n_in):
                for j in range(n_out):
                    logits[i][j] += sum(votes[i][j][d] * entities[j][d] for d in range(dim))
    return entities, coupling


def test_squash_closed_forms() -> None:
    zero = squash(torch.zeros(1, 4, dtype=torch.float64))
    assert torch.equal(zero, torch.zeros(1, 4, dtype=torch.float64))

    unit = torch.tensor([[0.6, 0.8]], dtype=torch.float64)
    out = squash(unit)
    assert float(out.norm()) == pytest.approx(0.5, abs=1e-9)
    assert torch.allclose(out / out.norm(), unit, atol=1e-12)

    ten = torch.tensor([[6.0, 8.0]], dtype=torch.float64)
    out = squash(ten)
    assert float(out.norm()) == pytest.approx(100.0 / 101.0, abs=1e-9)
    assert torch.allclose(out / out.norm(), ten / 10.0, atol=1e-12)


def test_squash_range_is_monotone_and_below_one() -> None:
    norms = torch.linspace(0.0, 50.0, 200, dtype=torch.float64)
    vectors = torch.stack([norms, torch.zeros_like(norms)], dim=-1)
    squashed = squash(vectors).norm(dim=-1)
    assert (squashed < 1.0).all() and (squashed >= 0.0).all()
    assert (squashed[1:] > squashed[:-1]).all()


def test_route_single_pair() -> None:
    votes = torch.tensor([[[[0.3, -0.4, 1.2]]]], dtype=torch.float64)
    result = route(votes, iterations=3)
    assert torch.equal(result.coupling, torch.ones(1, 1, 1, dtype=torch.float64))
    assert torch.allclose(result.entities[0, 0], squash(votes[0, 0, 0]), atol=1e-15)


def test_route_identical_votes_give_uniform_coupling() -> None:
    vote = torch.randn(1, 3, 1, 4, dtype=torch.float64)
    votes = vote.expand(1, 3, 5, 4).contiguous()
    result = route(votes, iterations=4)
    assert torch.allclose(result.coupling, torch.full((1, 3, 5), 0.2, dtype=torch.float64), atol=1e-12)


def test_route_matches_step_by_step_oracle() -> None:
    votes = [
        [[0.5, -0.2], [0.1, 0.9]],
        [[0.4, 0.3], [-0.7, 0.2]],
    ]
    result = route(torch.tensor([votes], dtype=torch.float64), iterations=3)
    entities, coupling = _routing_oracle(votes, 3)
    assert torch.allclose(result.entities[0], torch.tensor(entities, dtype=torch.float64), atol=1e-9, rtol=0)
    assert torch.allclose(result.coupling[0], torch.tensor(coupling, dtype=torch.float64), atol=1e-9, rtol=0)


def test_route_coupling_simplex_and_entity_norms() -> None:
    torch.manual_seed(0)
    votes = torch.randn(2, 12, 6, 5, dtype=torch.float64)
    result = route(votes, iterations=3)
    assert (result.coupling >= 0).all()
    assert torch.allclose(result.coupling.sum(dim=2), torch.ones(2, 12, dtype=torch.float64), atol=1e-6)
    assert (result.entities.norm(dim=-1) < 1.0).all()
    again = route(votes, iterations=3)
    assert torch.equal(again.entities, result.entities)


def test_route_is_permutation_equivariant_in_outputs() -> None:
    torch.manual_seed(1)
    votes = torch.randn(1, 6, 4, 3, dtype=torch.float64)
    permutation = torch.tensor([2, 0, 3, 1])
    base = route(votes, iterations=3)
    permuted = route(votes[:, :, permutation], iterations=3)
    assert torch.allclose(permuted.entities, base.entities[:, permutation], atol=1e-12)
    assert torch.allclose(permuted.coupling, base.coupling[:, :, permutation], atol=1e-12)


def test_route_errors() -> None:
    with pytest.raises(ShapeError):
        route(torch.zeros(1, 3, 0, 4))
    with pytest.raises(ValueError):
        route(torch.zeros(1, 3, 2, 4), iterations=0)


def test_project_votes_identity_zero_and_loop_oracle() -> None:
    torch.manual_seed(2)
    u = torch.randn(2, 3, 4, dtype=torch.float64)

    identity = torch.eye(4, dtype=torch.float64).expand(3, 2, 4, 4)
    votes = project_votes(u, identity)
    for j in range(2):
        assert torch.equal(votes[:, :, j], u)
    assert torch.equal(project_votes(u, torch.zeros(3, 2, 4, 4, dtype=torch.float64)), torch.zeros(2, 3, 2, 4, dtype=torch.float64))

    weights = torch.randn(3, 2, 5, 4, dtype=torch.float64)
    votes = project_votes(u, weights)
    assert votes.shape == (2, 3, 2, 5)
    for b in range(2):
        for i in range(3):
            for j in range(2):
                assert torch.allclose(votes[b, i, j], weights[i, j] @ u[b, i], atol=1e-12)


def test_project_votes_rejects_dimension_mismatch() -> None:
    with pytest.raises(ShapeError):
        project_votes(torch.zeros(1, 3, 4), torch.zeros(3, 2, 5, 6))
    with pytest.raises(ShapeError):
        project_votes(torch.zeros(1, 2, 4), torch.zeros(3, 2, 5, 4))


def test_deroute_inverts_an_orthogonal_projection() -> None:
    torch.manual_seed(3)
    rotation, _ = torch.linalg.qr(torch.randn(3, 3, dtype=torch.float64))
    u = torch.randn(1, 1, 3, dtype=torch.float64)
    weights = rotation.reshape(1, 1, 3, 3)
    routing = route(project_votes(u, weights), iterations=3)
    reconstructed = deroute(routing.entities, rotation.T.reshape(1, 1, 3, 3))
    assert torch.allclose(reconstructed, squash(u), atol=1e-12)


def test_deroute_zero_weights_and_shapes() -> None:
    entities = torch.randn(2, 10, 16)
    assert torch.equal(deroute(entities, torch.zeros(1800, 10, 8, 16)), torch.zeros(2, 1800, 8))
    with pytest.raises(ShapeError):
        deroute(entities, torch.zeros(1800, 9, 8, 16))


def test_routing_gradients_match_finite_differences() -> None:
    torch.manual_seed(4)
    u = squash(torch.randn(1, 3, 2, dtype=torch.float64))
    weights = torch.randn(3, 3, 2, 2, dtype=torch.float64, requires_grad=True)

    def entities(w: torch.Tensor) -> torch.Tensor:
        return route(project_votes(u, w), iterations=3).entities

    assert torch.autograd.gradcheck(entities, (weights,), eps=1e-6, atol=1e-8, rtol=1e-4)


def test_primary_capsule_modules_canonical_shapes() -> None:
    torch.manual_seed(5)
    pcd = PrimaryCapsulesDown(in_channels=16, grid_size=15, kernel_size=2)
    bank, routing = pcd(torch.randn(2, 16, 16, 16))
    assert bank.u.shape == (2, 8 * 15 * 15, 8)
    assert bank.grid_shape == (8, 15, 15)
    assert routing.entities.shape == (2, 10, 16)
    assert routing.coupling.shape == (2, 1800, 10)

    pcu = PrimaryCapsulesUp(grid_size=15, out_channels=256)
    u_r = deroute(routing.entities, pcu.deroute_weights)
    assert u_r.shape == bank.u.shape
    assert pcu(routing).shape == (2, 256, 15, 15)


def test_primary_capsules_reject_wrong_grid() -> None:
    pcd = PrimaryCapsulesDown(in_channels=4, grid_size=3, kernel_size=2)
    with pytest.raises(ShapeError):
        pcd(torch.randn(1, 4, 6, 6))
