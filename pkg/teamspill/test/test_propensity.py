from io import BytesIO
from pathlib import Path

import numpy
import pytest
from scipy import special

from ..basic import ConfigError, InvalidDataError, UndefinedLevelError, StratificationError
from ..propensity import (
    ModelKind, PropensityFit, PropensityTable, FeatureBasis,
    multinomial_loss_and_grad, fit_multinomial_linear, fit_boosted_trees, fit_propensity,
    predict_propensities, cross_validate, stabilize_weights, BOOSTED_GRID, _score_summary,
    )


def _band_data(n_rows: int, seed: int) -> tuple[numpy.ndarray, numpy.ndarray]:
    """
    One informative feature; class 1 inside a band, class 0 outside.
    """
    rng = numpy.random.default_rng(seed)
    x = rng.uniform(size=(n_rows, 2))
    cats = (numpy.abs(x[:, 0] - 0.5) < 0.2).astype(numpy.int64)
    return x, cats


def test_model_kind() -> None:
    assert ModelKind.parse('linear') == ModelKind.MultinomialLinear
    assert ModelKind.parse('boosted') == ModelKind.BoostedTrees
    assert ModelKind.parse(ModelKind.BoostedTrees) == ModelKind.BoostedTrees
    with pytest.raises(ConfigError):
        ModelKind.parse('forest')


def test_loss_gradient() -> None:
    rng = numpy.random.default_rng(0)
    design = numpy.hstack([numpy.ones((40, 1)), rng.normal(size=(40, 2))])
    onehot = numpy.eye(3)[rng.integers(0, 3, size=40)]
    hh = 1e-6
    for _ in range(100):
        coef = rng.normal(scale=2, size=(3, 3))
        _loss, grad = multinomial_loss_and_grad(coef, design, onehot, l2=0.1)
        numeric = numpy.zeros_like(coef)
        for idx in numpy.ndindex(coef.shape):
            up = coef.copy()
            down = coef.copy()
            up[idx] += hh
            down[idx] -= hh
            numeric[idx] = (multinomial_loss_and_grad(up, design, onehot, l2=0.1)[0]
                            - multinomial_loss_and_grad(down, design, onehot, l2=0.1)[0]) / (2 * hh)
        scale = max(numpy.linalg.norm(grad), numpy.linalg.norm(numeric), 1e-8)
        assert numpy.linalg.norm(grad - numeric) / scale < 1e-4


def test_score_summary() -> None:
    probs = numpy.array([[0.7, 0.2, 0.1], [0.1, 0.1, 0.8], [0.5, 0.3, 0.2]])
    log_loss, accuracy = _score_summary(probs, numpy.array([0, 1, 0]))
    assert log_loss == pytest.approx(-(numpy.log(0.7) + numpy.log(0.1) + numpy.log(0.5)) / 3)
    assert accuracy == pytest.approx(2 / 3)

    # a class never observed still counts as a column
    log_loss, accuracy = _score_summary(probs[:2], numpy.array([0, 0]))
    assert log_loss == pytest.approx(-(numpy.log(0.7) + numpy.log(0.1)) / 2)
    assert accuracy == 0.5


def test_constant_feature() -> None:
    features = numpy.full((100, 1), 3.0)
    cats = numpy.array([0] * 20 + [1] * 30 + [2] * 50)
    for kind in ('linear', 'boosted'):
        fit = fit_propensity(kind, features, cats)
        probs = fit.predict(numpy.array([[3.0], [-10.0], [50.0]]))
        for row in probs:
            assert row.tolist() == pytest.approx([0.2, 0.3, 0.5], abs=1e-6)


def test_boosted_no_rounds() -> None:
    x, cats = _band_data(300, 1)
    fit = fit_boosted_trees(x, cats, n_rounds=0)
    frequency = numpy.bincount(cats) / cats.size
    assert fit.predict(x[:5]) == pytest.approx(numpy.tile(frequency, (5, 1)))


def test_separable() -> None:
    x = numpy.concatenate([numpy.linspace(-2, -1, 50), numpy.linspace(1, 2, 50)])[:, None]
    cats = numpy.array([0] * 50 + [1] * 50)
    fit = fit_multinomial_linear(x, cats, degree=1)
    assert fit.diagnostics['accuracy'] == 1.0
    assert fit.trace is not None
    losses = fit.trace.losses
    assert all(bb <= aa for aa, bb in zip(losses, losses[1:], strict=False))
    assert losses[-1] < 0.05


def test_calibration() -> None:
    rng = numpy.random.default_rng(3)
    n_rows = 100_000
    x = rng.normal(size=(n_rows, 2))
    coef = numpy.array([
        [0.0, 0.5, -0.5],
        [0.0, 1.0, -1.0],
        [0.0, -0.5, 1.5],
        ])
    true_probs = special.softmax(numpy.hstack([numpy.ones((n_rows, 1)), x]) @ coef, axis=1)
    cats = (rng.uniform(size=(n_rows, 1)) > true_probs.cumsum(axis=1)).sum(axis=1)

    fit = fit_multinomial_linear(x, cats)
    predicted = fit.predict(x)
    assert predicted.sum(axis=1) == pytest.approx(numpy.ones(n_rows))
    assert numpy.abs(predicted - true_probs).mean() < 0.02


def test_boosted_beats_linear_on_band() -> None:
    x, cats = _band_data(2000, 4)
    linear = fit_multinomial_linear(x, cats, degree=1)
    boosted = fit_boosted_trees(x, cats, max_depth=2, n_rounds=20)
    assert boosted.diagnostics['accuracy'] >= linear.diagnostics['accuracy']
    assert boosted.diagnostics['accuracy'] > 0.9

    losses = boosted.diagnostics['round_losses']
    assert len(losses) == 20
    assert all(bb <= aa + 1e-12 for aa, bb in zip(losses, losses[1:], strict=False))


def test_boosted_config_errors() -> None:
    x, cats = _band_data(50, 5)
    with pytest.raises(ConfigError):
        fit_boosted_trees(x, cats, max_depth=0)
    with pytest.raises(ConfigError):
        fit_boosted_trees(x, cats, learning_rate=0)
    with pytest.raises(ConfigError):
        fit_boosted_trees(x, cats, learning_rate=1.5)


def test_fit_input_errors() -> None:
    x, cats = _band_data(50, 6)
    with pytest.raises(InvalidDataError, match=r'\[2\]'):
        fit_multinomial_linear(x, cats, levels=[0, 1, 2])
    with pytest.raises(InvalidDataError):
        fit_multinomial_linear(x, numpy.zeros(50, dtype=int))
    bad = x.copy()
    bad[3, 1] = numpy.nan
    with pytest.raises(InvalidDataError):
        fit_multinomial_linear(bad, cats)

    fit = fit_multinomial_linear(x, cats)
    with pytest.raises(InvalidDataError):
        fit.predict(x[:, :1])


def test_feature_basis_rank() -> None:
    rng = numpy.random.default_rng(7)
    a = rng.normal(size=200)
    features = numpy.column_stack([a, 2 * a, rng.normal(size=200)])
    basis = FeatureBasis.fit(features, 1)
    assert basis.rank == 2
    design = basis(features)
    assert design.T @ design / 200 == pytest.approx(numpy.eye(2), abs=1e-8)


def test_predictions_follow_rows() -> None:
    x, cats = _band_data(400, 8)
    fit = fit_boosted_trees(x, cats, n_rounds=5)
    perm = numpy.random.default_rng(0).permutation(400)
    assert predict_propensities(fit, x[perm]) == pytest.approx(predict_propensities(fit, x)[perm])


def test_cross_validate() -> None:
    x, cats = _band_data(500, 9)
    report = cross_validate(x, cats, [dict(gg, n_rounds=5) for gg in BOOSTED_GRID], 5, seed=1)
    assert report.folds == 5
    assert len(report.accuracy) == 5
    assert all(0 <= aa <= 1 for aa in report.accuracy)
    assert report.selected in [dict(gg, n_rounds=5) for gg in BOOSTED_GRID]
    assert report.to_dict()['kind'] == 'boosted'

    single = cross_validate(x, cats, [{'degree': 2}], 3, kind='linear')
    assert single.selected == {'degree': 2}
    assert single.best_index == 0


def test_cross_validate_duplicated_rows() -> None:
    features = numpy.ones((100, 1))
    cats = numpy.array([0, 1] * 50)
    report = cross_validate(features, cats, [{}], 5, kind='linear')
    assert numpy.var(report.fold_log_loss[0]) == pytest.approx(0)
    assert numpy.var(report.accuracy) == pytest.approx(0)


def test_cross_validate_sparse_category() -> None:
    x, cats = _band_data(100, 10)
    cats[0] = 2
    with pytest.raises(StratificationError):
        cross_validate(x, cats, [{}], 5, kind='linear')
    with pytest.raises(ConfigError):
        cross_validate(x, cats, [{}], 1)
    with pytest.raises(ConfigError):
        cross_validate(x, cats, [], 5)


def test_stabilize_weights() -> None:
    probs = numpy.array([[0.2, 0.3, 0.5], [0.001, 0.009, 0.99]])
    assert (stabilize_weights(probs, 0) == probs).all()

    assert stabilize_weights([0.001, 0.999], 0.01).tolist() == pytest.approx([0.01, 0.99])

    out = stabilize_weights(probs, 0.05)
    assert out.sum(axis=1) == pytest.approx([1, 1])
    assert (out >= 0.05 - 1e-12).all()
    assert out[0].tolist() == pytest.approx([0.2, 0.3, 0.5])
    assert (1 / out).max() <= (1 / probs).max()


def test_stabilize_errors() -> None:
    with pytest.raises(ConfigError):
        stabilize_weights([0.5, 0.5], 0.5)
    with pytest.raises(ConfigError):
        stabilize_weights([0.5, 0.5], -0.1)
    with pytest.raises(ConfigError):
        stabilize_weights(numpy.full((1, 30), 1 / 30), 0.04)


def test_propensity_table() -> None:
    x, cats = _band_data(60, 11)
    fit = fit_multinomial_linear(x, cats)
    rows = numpy.arange(60) < 40
    table = PropensityTable.from_fit(fit, x, rows, 0.01)
    assert table.values.shape == (60, 2)
    assert numpy.isnan(table.values[40:]).all()
    assert table.values[:40].sum(axis=1) == pytest.approx(numpy.ones(40))
    with pytest.raises(UndefinedLevelError) as info:
        table.column(7)
    assert info.value.level == 7

    with pytest.raises(InvalidDataError):
        PropensityTable([0, 1, 2], numpy.ones((3, 2)), 2)


@pytest.mark.parametrize('kind', ['linear', 'boosted'])
def test_artifact(kind: str, tmp_path: Path) -> None:
    x, cats = _band_data(200, 12)
    fit = fit_propensity(kind, x, cats, threshold=1)
    path = tmp_path / f'{kind}.psm'
    fit.save(path)

    loaded = PropensityFit.load(path)
    assert loaded == fit
    assert loaded.kind == ModelKind.parse(kind)
    assert loaded.levels == (0, 1)
    assert loaded.threshold == 1
    assert loaded.diagnostics == fit.diagnostics
    assert (loaded.predict(x) == fit.predict(x)).all()


def test_artifact_corruption() -> None:
    x, cats = _band_data(100, 13)
    data = bytearray(fit_multinomial_linear(x, cats).to_bytes())

    flipped = data.copy()
    flipped[20] ^= 0xff
    with pytest.raises(InvalidDataError, match='Checksum'):
        PropensityFit.read(BytesIO(bytes(flipped)))

    with pytest.raises(InvalidDataError):
        PropensityFit.read(BytesIO(bytes(data[:-10])))
    with pytest.raises(InvalidDataError):
        PropensityFit.read(BytesIO(b'\x00\x01'))
    with pytest.raises(InvalidDataError):
        PropensityFit.read(BytesIO(bytes(data) + b'\x00'))
