import json
import re

import numpy as np
import pytest

from kvflows.calculus import CompositeFunctional, LinearFunctional, PairInteractionFunctional
from kvflows.cli import resolve_config_path
from kvflows.config import (
    Budgets,
    build_field,
    build_functional,
    build_manifold,
    build_measure,
    build_system,
    config_from_dict,
    load_config,
)
from kvflows.errors import ConfigInvalid

MINIMAL = {"initial_measure": {"kind": "uniform", "particles": 4}}


def with_(**kw):
    d = json.loads(json.dumps(MINIMAL))
    d.update(kw)
    return d


def test_minimal_config_gets_defaults():
    cfg = config_from_dict(MINIMAL)
    assert cfg.manifold.kind == "sphere" and cfg.manifold.dim == 2
    assert cfg.solver.scheme == "heun" and cfg.suites == []
    assert cfg.budgets == Budgets()
    d = cfg.to_dict()
    # the resolved document is a fixed point
    assert config_from_dict(d).to_dict() == d


@pytest.mark.parametrize("bad, where", [
    ({"colour": 1}, "config"),
    ({"manifold": {"kind": "cube"}}, "manifold.kind"),
    ({"manifold": {"kind": "sphere", "radius": 2}}, "manifold"),
    ({"solver": {"dt": -1.0}}, "solver"),
    ({"solver": {"scheme": "rk4"}}, "solver"),
    ({"budgets": {"replicas": 1}}, "budgets.replicas"),
    ({"budgets": {"nope": 1}}, "budgets"),
    ({"budgets": {"dt_ladder": []}}, "budgets.dt_ladder"),
    ({"seed": -3}, "config.seed"),
    ({"seed": 1.5}, "config.seed"),
    ({"suites": ["simulate", "fly"]}, "suites"),
    ({"fields": {"diffusion": [{"kind": "rotation", "axis": [1, 0]}]}}, "fields.diffusion[0].axis"),
    ({"fields": {"drift": {"kind": "kernel", "kernel": {"kind": "magnetic"}}}}, "fields.drift.kernel.kind"),
    ({"fields": {"diffusion": [{"kind": "constant", "vector": [0, 0, 1]}]}, "budgets": {"noise_indices": [2]}},
     "budgets.noise_indices"),
    ({"functionals": [{"name": "a", "kind": "linear", "observable": {"kind": "coordinate", "index": 3}}]},
     "functionals[0].observable.index"),
    ({"functionals": [{"name": "a", "kind": "linear", "observable": {"kind": "coordinate", "index": 0}}] * 2},
     "functionals"),
    ({"initial_measure": {"kind": "points", "points": [[1.0, 0.0]]}}, "initial_measure.points"),
])
def test_invalid_configs_name_the_offending_key(bad, where):
    with pytest.raises(ConfigInvalid, match=re.escape(where)):
        config_from_dict(with_(**bad))


def test_missing_initial_measure():
    with pytest.raises(ConfigInvalid, match="initial_measure"):
        config_from_dict({})


def test_uniform_on_euclidean_rejected():
    with pytest.raises(ConfigInvalid):
        config_from_dict(with_(manifold={"kind": "euclidean", "dim": 2}))


def test_points_off_manifold_rejected_at_build():
    cfg = config_from_dict(with_(initial_measure={"kind": "points", "points": [[2.0, 0, 0]]}))
    with pytest.raises(ConfigInvalid):
        build_measure(cfg.initial_measure, build_manifold(cfg.manifold), cfg.seed)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigInvalid):
        load_config(tmp_path / "missing.json")
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    with pytest.raises(ConfigInvalid):
        load_config(p)


@pytest.mark.parametrize("name", ["additive-gaussian", "alignment-sphere"])
def test_bundled_configs_load(name):
    cfg = load_config(resolve_config_path(name))
    sys_ = build_system(cfg)
    assert sys_.n_noise >= 1
    assert build_measure(cfg.initial_measure, sys_.manifold, cfg.seed).size >= 1


def test_builders_produce_expected_objects():
    cfg = load_config(resolve_config_path("alignment-sphere"))
    M = build_manifold(cfg.manifold)
    kinds = [type(build_functional(d, M)) for d in cfg.functionals]
    assert kinds == [LinearFunctional, CompositeFunctional]
    pair = build_functional({"name": "p", "kind": "pair", "kernel": {"kind": "alignment", "kappa": 1.0}}, M)
    assert isinstance(pair, PairInteractionFunctional)
    x = np.array([[0.0, 0.0, 1.0]])
    V = build_field({"kind": "rotation", "axis": [1.0, 0, 0], "scale": 2.0}, M)
    np.testing.assert_allclose(V.evaluate(x, x, np.ones(1)), [[0.0, -2.0, 0.0]], atol=1e-15)
    Z = build_field({"kind": "zero"}, M)
    assert np.all(Z.evaluate(x, x, np.ones(1)) == 0)


def test_measure_is_seeded():
    cfg = config_from_dict(with_(initial_measure={"kind": "cap", "particles": 5}))
    M = build_manifold(cfg.manifold)
    a = build_measure(cfg.initial_measure, M, 1)
    b = build_measure(cfg.initial_measure, M, 1)
    c = build_measure(cfg.initial_measure, M, 2)
    assert np.array_equal(a.points, b.points) and not np.array_equal(a.points, c.points)


def test_overrides_revalidate():
    cfg = config_from_dict(MINIMAL)
    assert cfg.with_overrides(seed=9, replicas=50).budgets.replicas == 50
    with pytest.raises(ConfigInvalid):
        cfg.with_overrides(replicas=0)
