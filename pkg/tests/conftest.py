import numpy as np
import pytest

from dyncausal.synth import ConfoundedEdge, InconsistentEdge, ScenarioSpec, generate


def small_spec(seed: int = 0, **kw) -> ScenarioSpec:
    base = dict(D=3, T=12, L=1, K=2, n_k=60, sparsity=0.6, dynamics="sinusoid", seed=seed)
    base.update(kw)
    return ScenarioSpec(**base)


def recovery_spec(seed: int = 0, **kw) -> ScenarioSpec:
    """Five variables, sixty steps, three clients; one confounded pair, one
    edge missing on the last client."""
    base = dict(D=5, T=60, L=1, K=3, n_k=300, sparsity=0.3, dynamics="sinusoid",
                confounded_edges=(ConfoundedEdge(3, 4, (0.3, -0.3, 0.0), (1.0, 1.0)),),
                inconsistent_edges=(InconsistentEdge(0, 1, (2,), None, 0.5),), seed=seed)
    base.update(kw)
    return ScenarioSpec(**base)


@pytest.fixture
def small_data():
    spec = small_spec()
    panels, truth = generate(spec)
    return spec, panels, truth


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
