import numpy as np
import pytest

from gradtree.batch import init_params
from gradtree.trees import build_path_tables


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_params(rng, height, input_dim, num_outputs=1, num_layers=1, hidden=None, scale=1.0):
    """Random layered model with entries sized to keep activations O(1)."""
    from gradtree.batch import OverparamSpec

    if hidden is None:
        hidden = tuple(rng.integers(2, 6) for _ in range(num_layers - 1))
    spec = OverparamSpec(num_layers, tuple(int(h) for h in hidden))
    params = init_params(height, input_dim, num_outputs, spec, rng, task="reg")
    if scale != 1.0:
        from gradtree.trees import TreeParams

        params = TreeParams(
            params.height, params.input_dim, params.num_outputs,
            tuple(scale * w for w in params.layers), params.leaves,
        )
    return params


@pytest.fixture
def tables2():
    return build_path_tables(2)
