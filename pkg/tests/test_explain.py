import math
import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from goalchoice.dcm import BetaParams, DcmFeatures, DcmVariant, compute_features, mnl_probabilities
from goalchoice.errors import ContractError
from goalchoice.explain import (
    decompose, explain_predictions, read_decomposition_csv, render_report, render_svg, write_decomposition_csv,
)
from goalchoice.grid import build_grid
from goalchoice.train import train

from conftest import frame_instance, small_instances


def _grid():
    return build_grid(np.array([0.0, 0.0, 5.0, 0.0, math.pi / 2]), 3.0)


def _random_features(rng, K, variant=DcmVariant.DCM1):
    return DcmFeatures(
        dir=rng.uniform(0, math.pi, K), occ=rng.exponential(size=K), col=rng.exponential(size=K),
        occup=rng.exponential(size=K), variant=variant,
    )


def test_zero_beta_gives_nn_scores():
    grid = _grid()
    rng = np.random.default_rng(0)
    nn = rng.normal(size=len(grid))
    dec = decompose(frame_instance(), grid, _random_features(rng, len(grid)), BetaParams(), nn)
    assert np.array_equal(dec.s, nn)
    assert np.array_equal(dec.pi, mnl_probabilities(nn))
    assert not dec.dcm().any()


def test_additivity_random_cases():
    grid = _grid()
    K = len(grid)
    rng = np.random.default_rng(1)
    for n in range(1000):
        variant = DcmVariant.DCM1 if n % 2 else DcmVariant.DCM2
        f = _random_features(rng, K, variant)
        b = BetaParams.from_vector(rng.normal(scale=2, size=len(variant.coefficients)), variant)
        nn = rng.normal(size=K)
        dec = decompose("case", grid, f, b, nn)
        # independent oracle: one matrix product per goal
        want = f.matrix() @ b.vector(variant) + nn
        assert np.max(np.abs(dec.s - want)) <= 1e-9
        assert np.max(np.abs(dec.dcm() + dec.contributions["nn"] - dec.s)) <= 1e-9
        assert dec.chosen == int(np.argmax(want))


def test_no_neighbour_maps_are_zero():
    inst = frame_instance()
    grid = build_grid(inst.target_obs()[-1], inst.scene.horizon)
    f = compute_features(grid, inst, "1")
    dec = decompose(inst, grid, f, BetaParams(-2.0, 0.3, -0.5), np.zeros(len(grid)))
    assert not dec.contributions["occ"].any() and not dec.contributions["col"].any()
    assert dec.contributions["dir"].any()


def test_csv_rows_and_round_trip(tmp_path):
    grid = _grid()
    rng = np.random.default_rng(2)
    dec = decompose("a", grid, _random_features(rng, len(grid)), BetaParams(-1.0, 0.5, -0.2), rng.normal(size=15))
    path = tmp_path / "d.csv"
    write_decomposition_csv(dec, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 1 + 15
    assert lines[0] == "goal,x,y,ring,angle,dir,occ,col,nn,s,pi,chosen"
    back = read_decomposition_csv(path, "a")
    assert back.chosen == dec.chosen
    for name in dec.contributions:
        assert np.array_equal(back.contributions[name], dec.contributions[name])
    assert np.array_equal(back.s, dec.s) and np.array_equal(back.goals, dec.goals)


def _panels(svg_text):
    return re.findall(r'<g id="panel-([^"]+)"', svg_text)


@pytest.mark.parametrize("variant,n_features", [(DcmVariant.DCM1, 3), (DcmVariant.DCM2, 2)])
def test_svg_panel_count(tmp_path, variant, n_features):
    grid = _grid()
    rng = np.random.default_rng(3)
    b = BetaParams.from_vector(np.ones(n_features), variant)
    dec = decompose("a", grid, _random_features(rng, len(grid), variant), b, rng.normal(size=15))
    render_svg(dec, tmp_path / "a.svg")
    panels = _panels((tmp_path / "a.svg").read_text())
    assert len(panels) == 3 + n_features
    assert panels[:3] == ["predictions", "nn", "dcm"]


def test_svg_without_dcm_has_three_panels(tmp_path):
    dec = decompose("a", _grid(), None, None, np.arange(15.0))
    render_svg(dec, tmp_path / "a.svg")
    assert _panels((tmp_path / "a.svg").read_text()) == ["predictions", "nn", "dcm"]


def test_rerender_from_csv_is_byte_identical(tmp_path):
    inst = frame_instance([(3, 10, 0.0, 2.0)])
    grid = build_grid(inst.target_obs()[-1], inst.scene.horizon)
    f = compute_features(grid, inst, "1")
    dec = decompose(inst, grid, f, BetaParams(-2.0, 0.3, -0.5), np.linspace(-1, 1, len(grid)))
    csv_path, svg_path = render_report(dec, grid, None, tmp_path / "first")
    again = read_decomposition_csv(csv_path, inst.instance_id)
    render_svg(again, tmp_path / "second.svg")
    assert svg_path.read_bytes() == (tmp_path / "second.svg").read_bytes()


def test_contract_errors():
    grid = _grid()
    rng = np.random.default_rng(4)
    f = _random_features(rng, 15)
    with pytest.raises(ContractError):
        decompose("a", grid, f, BetaParams(-1.0), np.zeros(14))
    with pytest.raises(ContractError):
        decompose("a", grid, _random_features(rng, 9), BetaParams(-1.0), np.zeros(15))
    with pytest.raises(ContractError):
        decompose("a", grid, f, None, np.zeros(15))
    with pytest.raises(ContractError):
        decompose("a", grid, None, BetaParams(-1.0), np.zeros(15))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), scale=st.floats(0.0, 5.0))
def test_pi_is_softmax_of_total(seed, scale):
    rng = np.random.default_rng(seed)
    f = _random_features(rng, 15)
    b = BetaParams.from_vector(rng.normal(scale=scale, size=3), DcmVariant.DCM1)
    dec = decompose("a", _grid(), f, b, rng.normal(size=15))
    assert abs(dec.pi.sum() - 1) <= 1e-12 and dec.chosen == int(np.argmax(dec.s))


def test_model_explanations_match_predictions(tmp_path, tiny_train_config):
    insts = small_instances(4)
    model = train(insts, tiny_train_config).model
    decs = explain_predictions(model, insts, tmp_path)
    preds = model.predict(insts)
    for dec, pred in zip(decs, preds):
        assert dec.chosen == pred.goal
        assert np.max(np.abs(dec.s - pred.s)) <= 1e-9
    index = (tmp_path / "explain.csv").read_text().splitlines()
    assert len(index) == 1 + len(insts)
    assert len(list(tmp_path.glob("*.svg"))) == len(insts)
