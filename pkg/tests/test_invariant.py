import numpy as np
import pytest

from causalgcl.errors import ConfigError
from causalgcl.invariant import (EnvironmentRisk, RiskModel, Stage1Config, Stage1Objective, grad_variance,
                                 score_loss, train_scores)
from causalgcl.numerics import ParameterSet

from helpers import random_graph, stage1_instance


def test_grad_variance_examples():
    assert grad_variance([[1.0, 0.0], [0.0, 1.0]]) == pytest.approx(0.5, abs=1e-12)
    assert grad_variance([[3.0, -1.0]] * 4) < 1e-12
    assert grad_variance([EnvironmentRisk(0, 1.0, np.array([2.0])), EnvironmentRisk(1, 1.0, np.array([0.0]))]) \
        == pytest.approx(1.0)
    with pytest.raises(ValueError):
        grad_variance([])
    with pytest.raises(ValueError):
        grad_variance([[1.0], [1.0, 2.0]])


def test_score_loss():
    assert score_loss([1.0], [0.5]) == pytest.approx(np.log(2))
    assert np.isfinite(score_loss([1.0, 0.0], [0.0, 1.0]))


def test_hvp_matches_gradient_differences():
    rng = np.random.default_rng(0)
    for _ in range(5):
        g, p, dec, envs, layers = stage1_instance(rng)
        model = RiskModel(g, dec, layers)
        v = rng.standard_normal(p.size)
        eps = 1e-6
        plus = model.risk(p.unflatten(p.flatten() + eps * v), envs[0]).grad
        minus = model.risk(p.unflatten(p.flatten() - eps * v), envs[0]).grad
        fd = (plus - minus) / (2 * eps)
        np.testing.assert_allclose(model.hvp(p, envs[0], v), fd, atol=1e-6)


def test_objective_parts_add_up():
    g, p, dec, envs, layers = stage1_instance(np.random.default_rng(4))
    obj = Stage1Objective(g, dec, envs, 0.3, 0.7, layers)
    parts = obj.evaluate(p)
    assert parts.total == pytest.approx(parts.mean_risk + 0.3 * parts.penalty + 0.7 * parts.score)


def test_config_validation():
    with pytest.raises(ConfigError):
        Stage1Config(tau=0.0)
    with pytest.raises(ConfigError):
        Stage1Config(alpha=float("nan"))
    with pytest.raises(ConfigError):
        Stage1Config(epochs=0)


def test_train_scores_runs_and_is_deterministic(tmp_path):
    g = random_graph(np.random.default_rng(5), max_nodes=20, min_edges=10)
    cfg = Stage1Config(epochs=3, lr=0.1, dim=4, num_envs=2, layers=2)
    p1, s1, rows = train_scores(g, cfg, log_path=tmp_path / "log.csv")
    p2, s2, _ = train_scores(g, cfg)
    assert np.array_equal(s1.values, s2.values)
    assert np.array_equal(p1.flatten(), p2.flatten())
    assert len(rows) == 3
    assert (tmp_path / "log.csv").read_text().startswith("epoch,objective,mean_risk,penalty,score_loss,num_envs")


def test_stage1_descends():
    g = random_graph(np.random.default_rng(6), max_nodes=20, min_edges=12)
    _, _, rows = train_scores(g, Stage1Config(epochs=15, lr=0.05, dim=4, num_envs=2, layers=1))
    assert rows[-1]["objective"] < rows[0]["objective"]
