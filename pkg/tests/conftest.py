import numpy as np
import pytest

from battdiag.data_model import ChargingSegment
from battdiag.gbdt import TreeEnsemble, TreeNode


def make_segment(
    n_samples=40,
    n_cells=4,
    n_probes=2,
    vehicle_id="veh-a",
    segment_index=0,
    cycle_count=None,
    label=None,
    cell_voltages=None,
    temperatures=None,
    current=None,
    soc=None,
    pack_voltage=None,
    timestamps=None,
):
    """Hand-buildable segment with sane defaults for every channel."""
    t = np.arange(n_samples) * 10.0 if timestamps is None else np.asarray(timestamps, float)
    n = t.shape[0]
    if cell_voltages is None:
        ramp = 3.5 + 0.5 * np.arange(n) / max(1, n - 1)
        cell_voltages = np.tile(ramp, (n_cells, 1))
    cell_voltages = np.asarray(cell_voltages, float)
    if pack_voltage is None:
        pack_voltage = cell_voltages.sum(axis=0)
    if current is None:
        current = np.full(n, 50.0)
    if soc is None:
        soc = np.linspace(20.0, 80.0, n)
    if temperatures is None:
        temperatures = np.full((n_probes, n), 25.0)
    return ChargingSegment(
        vehicle_id=vehicle_id,
        segment_index=segment_index,
        timestamps=t,
        pack_voltage=np.asarray(pack_voltage, float),
        current=np.asarray(current, float),
        soc=np.asarray(soc, float),
        cell_voltages=cell_voltages,
        temperatures=np.asarray(temperatures, float),
        cycle_count=cycle_count,
        label=label,
    )


def random_tree(rng, depth, leaf_prob=0.25):
    if depth == 0 or rng.random() < leaf_prob:
        return TreeNode(value=float(rng.normal()))
    return TreeNode(
        feature_index=int(rng.integers(10)),
        threshold=float(rng.normal()),
        left=random_tree(rng, depth - 1, leaf_prob),
        right=random_tree(rng, depth - 1, leaf_prob),
    )


def random_ensemble(rng, max_trees=5, max_depth=3):
    return TreeEnsemble(
        base_score=float(rng.normal()),
        learning_rate=float(rng.uniform(0.05, 1.0)),
        trees=[random_tree(rng, max_depth) for _ in range(int(rng.integers(1, max_trees + 1)))],
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
