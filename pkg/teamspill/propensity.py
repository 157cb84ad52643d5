"""
Multiclass exposure propensity models, P(level(M) = l | X = x).

Two interchangeable model kinds are provided:
  - `fit_multinomial_linear()`: softmax regression on a (whitened) polynomial basis,
        fit by gradient descent with backtracking.
  - `fit_boosted_trees()`: multiclass gradient boosting, one regression tree per
        class per round, fit to the softmax gradients.

Fitted models are held in a `PropensityFit`, which can be written to and read back
 from a small versioned binary artifact (see `PropensityFit.write()`).
"""
from typing import IO, Any, Self
from collections.abc import Sequence, Mapping
from enum import Enum
from io import BytesIO
from pathlib import Path
import json
import logging
import math
import warnings

import numpy
from numpy.typing import NDArray, ArrayLike
from scipy import linalg, special
from sklearn import metrics
from sklearn.model_selection import StratifiedKFold
from sklearn.tree import DecisionTreeRegressor

from .basic import (
    ConfigError, InvalidDataError, UndefinedLevelError, StratificationError, EOFError,
    read_uint, write_uint, read_float64, write_float64, read_bstring, write_bstring,
    read_f64_array, write_f64_array, read_int_array, write_int_array,
    read_magic_bytes, write_magic_bytes, Validation,
    )


logger = logging.getLogger(__name__)


'''
    Constants
'''
FORMAT_VERSION: int = 1

DEFAULT_LEARNING_RATE: float = 0.3
DEFAULT_MAX_DEPTH: int = 6
DEFAULT_N_ROUNDS: int = 50
DEFAULT_EPSILON: float = 0.01

LINEAR_GRID: tuple[dict[str, Any], ...] = ({'degree': 1}, {'degree': 2}, {'degree': 3})
BOOSTED_GRID: tuple[dict[str, Any], ...] = ({'max_depth': 2}, {'max_depth': 4}, {'max_depth': 6})


class ModelKind(Enum):
    """
    Propensity model family. Values are the artifact's kind codes.
    """
    MultinomialLinear = 0
    BoostedTrees = 1

    @property
    def cli_name(self) -> str:
        return {ModelKind.MultinomialLinear: 'linear', ModelKind.BoostedTrees: 'boosted'}[self]

    @staticmethod
    def parse(name: 'str | ModelKind') -> 'ModelKind':
        if isinstance(name, ModelKind):
            return name
        for kind in ModelKind:
            if name == kind.cli_name:
                return kind
        raise ConfigError(f'Unknown propensity model "{name}", expected "linear" or "boosted"')


'''
    Input preparation
'''
def _as_features(features: ArrayLike) -> NDArray[numpy.float64]:
    xx = numpy.asarray(features, dtype=numpy.float64)
    if xx.ndim == 1:
        xx = xx[:, None]
    if xx.ndim != 2 or xx.shape[1] < 1:
        raise InvalidDataError(f'Features must be a (rows, features) matrix, got shape {xx.shape}')
    if not numpy.isfinite(xx).all():
        bad = numpy.flatnonzero(~numpy.isfinite(xx).all(axis=1))
        raise InvalidDataError(f'Non-finite feature values in {bad.size} rows (first: row {bad[0]})')
    return xx


def _prepare(
        features: ArrayLike,
        categories: ArrayLike,
        levels: Sequence[int] | None,
        ) -> tuple[NDArray[numpy.float64], NDArray[numpy.int64], tuple[int, ...]]:
    """
    Validate training data and map categories onto column indices.

    Returns:
        (features, class index per row, levels)
    """
    xx = _as_features(features)
    cats = numpy.asarray(categories, dtype=numpy.int64).ravel()
    if cats.size != xx.shape[0]:
        raise InvalidDataError(f'{xx.shape[0]} feature rows but {cats.size} categories')
    present = numpy.unique(cats)
    if levels is None:
        levels = tuple(present.tolist())
    else:
        levels = tuple(sorted(int(ll) for ll in levels))
        empty = sorted(set(levels) - set(present.tolist()))
        if empty:
            raise InvalidDataError(f'No training rows for categories {empty}')
        unknown = sorted(set(present.tolist()) - set(levels))
        if unknown:
            raise InvalidDataError(f'Training rows have categories {unknown} outside the requested set {list(levels)}')
    if len(levels) < 2:
        raise InvalidDataError(f'Need at least 2 distinct categories to fit a propensity model, got {list(levels)}')
    index = numpy.searchsorted(numpy.array(levels), cats)
    return xx, index, levels


def _one_hot(index: NDArray[numpy.int64], n_classes: int) -> NDArray[numpy.float64]:
    onehot = numpy.zeros((index.size, n_classes))
    onehot[numpy.arange(index.size), index] = 1
    return onehot


def _score_summary(probs: NDArray[numpy.float64], index: NDArray[numpy.int64]) -> tuple[float, float]:
    """
    (log-loss, accuracy) of predicted probabilities against true class indices.
    """
    labels = numpy.arange(probs.shape[1])
    return (float(metrics.log_loss(index, probs, labels=labels)),
            float(metrics.accuracy_score(index, numpy.argmax(probs, axis=1))))


'''
    Multinomial linear model
'''
class FeatureBasis:
    """
    Per-feature polynomial expansion (no cross terms), centered and whitened
     with a rank-revealing QR decomposition of the training design.
    """
    degree: int
    shift: NDArray[numpy.float64]
    """per-feature mean of the raw training features"""

    scale: NDArray[numpy.float64]
    """per-feature standard deviation (1 for constant features)"""

    center: NDArray[numpy.float64]
    """column means of the expanded training design"""

    columns: NDArray[numpy.int64]
    """expanded columns kept after the rank cut"""

    transform: NDArray[numpy.float64]
    """maps kept columns onto an orthonormal (times sqrt(n)) basis"""

    def __init__(
            self,
            degree: int,
            shift: NDArray[numpy.float64],
            scale: NDArray[numpy.float64],
            center: NDArray[numpy.float64],
            columns: NDArray[numpy.int64],
            transform: NDArray[numpy.float64],
            ) -> None:
        self.degree = degree
        self.shift = shift
        self.scale = scale
        self.center = center
        self.columns = columns
        self.transform = transform

    @property
    def rank(self) -> int:
        return int(self.columns.size)

    def expand(self, features: NDArray[numpy.float64]) -> NDArray[numpy.float64]:
        zz = (features - self.shift) / self.scale
        return numpy.hstack([zz ** kk for kk in range(1, self.degree + 1)])

    def __call__(self, features: NDArray[numpy.float64]) -> NDArray[numpy.float64]:
        centered = self.expand(features) - self.center
        return centered[:, self.columns] @ self.transform

    @staticmethod
    def fit(features: NDArray[numpy.float64], degree: int) -> 'FeatureBasis':
        n_rows = features.shape[0]
        shift = features.mean(axis=0)
        scale = features.std(axis=0)
        scale[scale <= 1e-12 * (1 + numpy.abs(shift))] = 1.0

        basis = FeatureBasis(degree, shift, scale, numpy.zeros(0), numpy.zeros(0, dtype=numpy.int64), numpy.zeros((0, 0)))
        expanded = basis.expand(features)
        basis.center = expanded.mean(axis=0)
        centered = expanded - basis.center

        _q, rr, pivots = linalg.qr(centered, mode='economic', pivoting=True)
        diag = numpy.abs(numpy.diag(rr))
        cutoff = max(diag[0] * 1e-10 if diag.size else 0.0, 1e-8 * math.sqrt(n_rows))
        rank = int(numpy.count_nonzero(diag > cutoff))
        basis.columns = numpy.asarray(pivots[:rank], dtype=numpy.int64)
        if rank:
            basis.transform = linalg.solve_triangular(rr[:rank, :rank], numpy.eye(rank)) * math.sqrt(n_rows)
        if rank < expanded.shape[1]:
            logger.debug(f'Basis rank {rank} of {expanded.shape[1]} expanded columns')
        return basis

    def write(self, stream: IO[bytes]) -> int:
        size = write_uint(stream, self.degree)
        size += write_f64_array(stream, self.shift)
        size += write_f64_array(stream, self.scale)
        size += write_f64_array(stream, self.center)
        size += write_int_array(stream, self.columns)
        size += write_f64_array(stream, self.transform)
        return size

    @staticmethod
    def read(stream: IO[bytes]) -> 'FeatureBasis':
        degree = read_uint(stream)
        shift = read_f64_array(stream)
        scale = read_f64_array(stream)
        center = read_f64_array(stream)
        columns = read_int_array(stream)
        transform = read_f64_array(stream)
        return FeatureBasis(degree, shift, scale, center, columns, transform)


def _with_intercept(design: NDArray[numpy.float64]) -> NDArray[numpy.float64]:
    return numpy.hstack([numpy.ones((design.shape[0], 1)), design])


def multinomial_loss_and_grad(
        coef: NDArray[numpy.float64],
        design: NDArray[numpy.float64],
        onehot: NDArray[numpy.float64],
        l2: float = 0.0,
        ) -> tuple[float, NDArray[numpy.float64]]:
    """
    Mean multinomial log-loss of a softmax-linear model, and its gradient.

    Args:
        coef: Coefficients, shape `(n_columns, n_classes)`.
        design: Design matrix (intercept column included), shape `(n_rows, n_columns)`.
        onehot: One-hot class indicators, shape `(n_rows, n_classes)`.
        l2: Ridge penalty on the non-intercept rows of `coef`.

    Returns:
        (loss, gradient with the shape of `coef`)
    """
    n_rows = design.shape[0]
    scores = design @ coef
    log_norm = special.logsumexp(scores, axis=1)
    loss = float(numpy.sum(log_norm - numpy.sum(onehot * scores, axis=1)) / n_rows)
    probs = numpy.exp(scores - log_norm[:, None])
    grad = design.T @ (probs - onehot) / n_rows
    if l2:
        loss += 0.5 * l2 * float(numpy.sum(coef[1:] ** 2))
        grad[1:] += l2 * coef[1:]
    return loss, grad


class LinearModel:
    """
    Fitted softmax-linear model on a `FeatureBasis`
    """
    basis: FeatureBasis
    coef: NDArray[numpy.float64]
    """shape (basis.rank + 1, n_classes); first row is the intercept"""

    def __init__(self, basis: FeatureBasis, coef: NDArray[numpy.float64]) -> None:
        self.basis = basis
        self.coef = coef

    def scores(self, features: NDArray[numpy.float64]) -> NDArray[numpy.float64]:
        return _with_intercept(self.basis(features)) @ self.coef

    def write(self, stream: IO[bytes]) -> int:
        return self.basis.write(stream) + write_f64_array(stream, self.coef)

    @staticmethod
    def read(stream: IO[bytes]) -> 'LinearModel':
        basis = FeatureBasis.read(stream)
        coef = read_f64_array(stream)
        return LinearModel(basis, coef)


class DescentTrace:
    """
    Record of a gradient-descent run
    """
    losses: list[float]
    n_iter: int
    converged: bool
    stop_reason: str

    def __init__(self, losses: list[float], n_iter: int, converged: bool, stop_reason: str) -> None:
        self.losses = losses
        self.n_iter = n_iter
        self.converged = converged
        self.stop_reason = stop_reason


def _gradient_descent(
        coef: NDArray[numpy.float64],
        design: NDArray[numpy.float64],
        onehot: NDArray[numpy.float64],
        l2: float,
        max_iter: int,
        tol: float,
        ) -> tuple[NDArray[numpy.float64], DescentTrace]:
    """
    Gradient descent with Armijo backtracking. The step halves until the
     sufficient-decrease condition holds, and grows by 1.5x after each
     accepted step (capped at 64).
    """
    step = 1.0
    loss, grad = multinomial_loss_and_grad(coef, design, onehot, l2)
    losses = [loss]
    for it in range(max_iter):
        gnorm2 = float(numpy.sum(grad ** 2))
        if math.sqrt(gnorm2) < tol:
            return coef, DescentTrace(losses, it, True, 'gradient norm below tolerance')
        while True:
            candidate = coef - step * grad
            cand_loss, cand_grad = multinomial_loss_and_grad(candidate, design, onehot, l2)
            if cand_loss <= loss - 0.5 * step * gnorm2:
                break
            step /= 2
            if step < 1e-14:
                return coef, DescentTrace(losses, it, False, 'line search failed')
        coef, loss, grad = candidate, cand_loss, cand_grad
        losses.append(loss)
        step = min(step * 1.5, 64.0)
        if it % 200 == 0:
            logger.debug(f'iteration {it}: loss {loss:.6g}, |grad| {math.sqrt(gnorm2):.3g}')

    gnorm = float(numpy.linalg.norm(grad))
    converged = gnorm < tol
    return coef, DescentTrace(losses, max_iter, converged,
                              'gradient norm below tolerance' if converged else 'max iterations reached')


def fit_multinomial_linear(
        features: ArrayLike,
        categories: ArrayLike,
        *,
        levels: Sequence[int] | None = None,
        threshold: int | None = None,
        degree: int | None = None,
        l2: float = 0.0,
        max_iter: int = 2000,
        tol: float = 1e-6,
        ) -> 'PropensityFit':
    """
    Fit a softmax-linear propensity model by minimizing the mean multinomial
     log-loss.

    Args:
        features: Covariates, shape `(n_rows, n_features)` (or 1-D for a single covariate).
        categories: Truncated exposure level of each row.
        levels: Category set to model (default: levels present in `categories`).
            Every requested level must have training rows.
        threshold: Truncation threshold the levels were derived with (default: largest level).
        degree: Polynomial degree per feature (default: 3 for a single feature, else 1).
        l2: Ridge penalty.
        max_iter: Iteration limit.
        tol: Gradient-norm tolerance.

    Returns:
        Fitted `PropensityFit`; `diagnostics` reports convergence.

    Raises:
        InvalidDataError: for non-finite features, fewer than 2 categories,
            or requested categories without training rows.
        ConfigError: for invalid options.
    """
    xx, index, levels = _prepare(features, categories, levels)
    if degree is None:
        degree = 3 if xx.shape[1] == 1 else 1
    if degree < 1:
        raise ConfigError(f'degree must be >= 1, got {degree}')
    if max_iter < 0 or tol <= 0 or l2 < 0:
        raise ConfigError(f'Invalid optimizer settings max_iter={max_iter}, tol={tol}, l2={l2}')

    basis = FeatureBasis.fit(xx, degree)
    design = _with_intercept(basis(xx))
    onehot = _one_hot(index, len(levels))
    coef = numpy.zeros((design.shape[1], len(levels)))
    coef[0] = numpy.log(onehot.mean(axis=0))

    coef, trace = _gradient_descent(coef, design, onehot, l2, max_iter, tol)
    if not trace.converged:
        logger.warning(f'Multinomial fit stopped without converging: {trace.stop_reason} after {trace.n_iter} iterations')

    model = LinearModel(basis, coef)
    fit = PropensityFit(ModelKind.MultinomialLinear, levels, threshold or max(levels), xx.shape[1], model)
    fit.diagnostics = _diagnostics(fit, xx, index)
    fit.diagnostics.update(n_iter=trace.n_iter, converged=trace.converged, stop_reason=trace.stop_reason, degree=degree)
    fit.trace = trace
    logger.info(f'Fit multinomial-linear propensity model on {xx.shape[0]} rows, {len(levels)} categories:'
                f' log-loss {fit.diagnostics["log_loss"]:.4f}, {trace.stop_reason}')
    return fit


'''
    Boosted trees
'''
class RegressionTree:
    """
    Binary regression tree stored as parallel node arrays.
    Leaves have `left == right == -1`.
    """
    feature: NDArray[numpy.int64]
    threshold: NDArray[numpy.float64]
    left: NDArray[numpy.int64]
    right: NDArray[numpy.int64]
    value: NDArray[numpy.float64]

    def __init__(
            self,
            feature: NDArray[numpy.int64],
            threshold: NDArray[numpy.float64],
            left: NDArray[numpy.int64],
            right: NDArray[numpy.int64],
            value: NDArray[numpy.float64],
            ) -> None:
        self.feature = feature
        self.threshold = threshold
        self.left = left
        self.right = right
        self.value = value

    def apply(self, features: NDArray[numpy.float32]) -> NDArray[numpy.int64]:
        """
        Leaf index reached by each row. Comparisons are made in float32,
         matching how the splits were found.
        """
        node = numpy.zeros(features.shape[0], dtype=numpy.int64)
        rows = numpy.arange(features.shape[0])
        active = self.left[node] >= 0
        while active.any():
            idx = rows[active]
            here = node[idx]
            go_left = features[idx, self.feature[here]] <= self.threshold[here]
            node[idx] = numpy.where(go_left, self.left[here], self.right[here])
            active = self.left[node] >= 0
        return node

    def predict(self, features: NDArray[numpy.float32]) -> NDArray[numpy.float64]:
        return self.value[self.apply(features)]

    def write(self, stream: IO[bytes]) -> int:
        size = write_int_array(stream, self.feature)
        size += write_f64_array(stream, self.threshold)
        size += write_int_array(stream, self.left)
        size += write_int_array(stream, self.right)
        size += write_f64_array(stream, self.value)
        return size

    @staticmethod
    def read(stream: IO[bytes]) -> 'RegressionTree':
        feature = read_int_array(stream)
        threshold = read_f64_array(stream)
        left = read_int_array(stream)
        right = read_int_array(stream)
        value = read_f64_array(stream)
        if not (feature.size == threshold.size == left.size == right.size == value.size):
            raise InvalidDataError('Regression tree node arrays have differing lengths')
        return RegressionTree(feature, threshold, left, right, value)


class TreeEnsemble:
    """
    Fitted multiclass boosted-tree model: `init` scores plus one tree per class per round.
    """
    init: NDArray[numpy.float64]
    trees: list[list[RegressionTree]]
    """trees[round][class]"""

    learning_rate: float
    max_depth: int

    def __init__(
            self,
            init: NDArray[numpy.float64],
            trees: list[list[RegressionTree]],
            learning_rate: float,
            max_depth: int,
            ) -> None:
        self.init = init
        self.trees = trees
        self.learning_rate = learning_rate
        self.max_depth = max_depth

    def scores(self, features: NDArray[numpy.float64]) -> NDArray[numpy.float64]:
        x32 = features.astype(numpy.float32)
        out = numpy.tile(self.init, (features.shape[0], 1))
        for round_trees in self.trees:
            for kk, tree in enumerate(round_trees):
                out[:, kk] += tree.predict(x32)
        return out

    def write(self, stream: IO[bytes]) -> int:
        size = write_float64(stream, self.learning_rate)
        size += write_uint(stream, self.max_depth)
        size += write_f64_array(stream, self.init)
        size += write_uint(stream, len(self.trees))
        for round_trees in self.trees:
            for tree in round_trees:
                size += tree.write(stream)
        return size

    @staticmethod
    def read(stream: IO[bytes]) -> 'TreeEnsemble':
        learning_rate = read_float64(stream)
        max_depth = read_uint(stream)
        init = read_f64_array(stream)
        n_rounds = read_uint(stream)
        trees = [[RegressionTree.read(stream) for _ in range(init.size)] for _ in range(n_rounds)]
        return TreeEnsemble(init, trees, learning_rate, max_depth)


def _newton_tree(
        features: NDArray[numpy.float64],
        x32: NDArray[numpy.float32],
        grad: NDArray[numpy.float64],
        hess: NDArray[numpy.float64],
        max_depth: int,
        min_samples_leaf: int,
        reg_lambda: float,
        learning_rate: float,
        ) -> RegressionTree:
    """
    Grow a tree on the residual `grad` and replace its leaf values with
     damped Newton steps, `learning_rate * sum(grad) / (sum(hess) + reg_lambda)`.
    """
    reg = DecisionTreeRegressor(max_depth=max_depth, min_samples_leaf=min_samples_leaf, random_state=0)
    reg.fit(features, grad)
    nodes = reg.tree_
    tree = RegressionTree(
        numpy.asarray(nodes.feature, dtype=numpy.int64),
        numpy.asarray(nodes.threshold, dtype=numpy.float64),
        numpy.asarray(nodes.children_left, dtype=numpy.int64),
        numpy.asarray(nodes.children_right, dtype=numpy.int64),
        numpy.zeros(nodes.node_count),
        )
    leaves = tree.apply(x32)
    g_sum = numpy.bincount(leaves, weights=grad, minlength=nodes.node_count)
    h_sum = numpy.bincount(leaves, weights=hess, minlength=nodes.node_count)
    tree.value = learning_rate * g_sum / (h_sum + reg_lambda)
    return tree


def fit_boosted_trees(
        features: ArrayLike,
        categories: ArrayLike,
        *,
        levels: Sequence[int] | None = None,
        threshold: int | None = None,
        learning_rate: float = DEFAULT_LEARNING_RATE,
        max_depth: int = DEFAULT_MAX_DEPTH,
        n_rounds: int = DEFAULT_N_ROUNDS,
        min_samples_leaf: int = 5,
        reg_lambda: float = 1.0,
        ) -> 'PropensityFit':
    """
    Multiclass gradient boosting on the softmax log-loss.

    Scores start at the log class frequencies. Each round, for every class,
     a regression tree is grown on the gradient `onehot - p` and its leaves are
     set to `learning_rate * sum(g) / (sum(h) + reg_lambda)` with
     `h = 2 p (1 - p)`.

    Args:
        features: Covariates, shape `(n_rows, n_features)`.
        categories: Truncated exposure level of each row.
        levels: Category set to model (default: levels present in `categories`).
        threshold: Truncation threshold the levels were derived with.
        learning_rate: Shrinkage, in (0, 1].
        max_depth: Tree depth, >= 1.
        n_rounds: Number of boosting rounds (0 gives the class frequencies).
        min_samples_leaf: Minimum training rows per leaf.
        reg_lambda: L2 regularization of leaf values.

    Returns:
        Fitted `PropensityFit`; `diagnostics['round_losses']` holds the
            training log-loss after each round.

    Raises:
        ConfigError: for invalid hyperparameters.
        InvalidDataError: as for `fit_multinomial_linear()`.
    """
    if max_depth < 1:
        raise ConfigError(f'max_depth must be >= 1, got {max_depth}')
    if not 0 < learning_rate <= 1:
        raise ConfigError(f'learning_rate must be in (0, 1], got {learning_rate}')
    if n_rounds < 0 or min_samples_leaf < 1 or reg_lambda < 0:
        raise ConfigError(f'Invalid boosting settings n_rounds={n_rounds}, min_samples_leaf={min_samples_leaf},'
                          f' reg_lambda={reg_lambda}')

    xx, index, levels = _prepare(features, categories, levels)
    x32 = xx.astype(numpy.float32)
    onehot = _one_hot(index, len(levels))
    init = numpy.log(onehot.mean(axis=0))
    scores = numpy.tile(init, (xx.shape[0], 1))

    trees: list[list[RegressionTree]] = []
    round_losses = []
    for rr in range(n_rounds):
        probs = special.softmax(scores, axis=1)
        grad = onehot - probs
        hess = numpy.maximum(2 * probs * (1 - probs), 1e-16)
        round_trees = [
            _newton_tree(xx, x32, grad[:, kk], hess[:, kk], max_depth, min_samples_leaf, reg_lambda, learning_rate)
            for kk in range(len(levels))]
        for kk, tree in enumerate(round_trees):
            scores[:, kk] += tree.predict(x32)
        trees.append(round_trees)
        round_losses.append(_score_summary(special.softmax(scores, axis=1), index)[0])
        logger.debug(f'round {rr}: training log-loss {round_losses[-1]:.6g}')

    model = TreeEnsemble(init, trees, learning_rate, max_depth)
    fit = PropensityFit(ModelKind.BoostedTrees, levels, threshold or max(levels), xx.shape[1], model)
    fit.diagnostics = _diagnostics(fit, xx, index)
    fit.diagnostics.update(n_rounds=n_rounds, learning_rate=learning_rate, max_depth=max_depth,
                           round_losses=round_losses)
    logger.info(f'Fit boosted-tree propensity model ({n_rounds} rounds, depth {max_depth}) on {xx.shape[0]} rows:'
                f' log-loss {fit.diagnostics["log_loss"]:.4f}')
    return fit


'''
    Fitted model
'''
class PropensityFit:
    """
    Fitted propensity model for a fixed, ordered set of exposure levels.

    Binary artifact layout:
        magic bytes
        format version: uint
        kind: uint (`ModelKind` value)
        threshold: uint
        levels: int array
        n_features: uint
        model parameters (kind-specific)
        diagnostics: bstring (JSON)
        validation: u32 crc32 of everything above
    """
    kind: ModelKind
    levels: tuple[int, ...]
    """modeled exposure levels, one probability column each"""

    threshold: int
    n_features: int
    model: LinearModel | TreeEnsemble

    diagnostics: dict[str, Any]
    """training log-loss, accuracy, per-class support and optimizer details"""

    trace: DescentTrace | None
    """gradient-descent record (multinomial-linear fits only; not serialized)"""

    def __init__(
            self,
            kind: ModelKind,
            levels: Sequence[int],
            threshold: int,
            n_features: int,
            model: LinearModel | TreeEnsemble,
            diagnostics: dict[str, Any] | None = None,
            ) -> None:
        self.kind = kind
        self.levels = tuple(int(ll) for ll in levels)
        self.threshold = int(threshold)
        self.n_features = int(n_features)
        self.model = model
        self.diagnostics = {} if diagnostics is None else diagnostics
        self.trace = None

    def predict(self, features: ArrayLike) -> NDArray[numpy.float64]:
        """
        Predicted level probabilities, one row per unit and one column per
         entry of `levels`. Rows sum to 1.

        Raises:
            InvalidDataError: if the feature dimension differs from training.
        """
        xx = _as_features(features)
        if xx.shape[1] != self.n_features:
            raise InvalidDataError(f'Model was trained on {self.n_features} features, got {xx.shape[1]}')
        return special.softmax(self.model.scores(xx), axis=1)

    def write(self, stream: IO[bytes]) -> int:
        """
        Write the binary artifact to a stream.

        Args:
            stream: Stream to write to.

        Returns:
            Number of bytes written.
        """
        body = BytesIO()
        write_magic_bytes(body)
        write_uint(body, FORMAT_VERSION)
        write_uint(body, self.kind.value)
        write_uint(body, self.threshold)
        write_int_array(body, self.levels)
        write_uint(body, self.n_features)
        self.model.write(body)
        write_bstring(body, json.dumps(self.diagnostics, sort_keys=True).encode())

        data = body.getvalue()
        size = stream.write(data)
        size += Validation.of(data).write(stream)
        return size

    @staticmethod
    def read(stream: IO[bytes]) -> 'PropensityFit':
        """
        Read a binary artifact written by `write()`.

        Raises:
            InvalidDataError: on bad magic bytes, unknown version or kind, or checksum mismatch.
            EOFError: if the stream ends early or continues past the end.
        """
        data = stream.read()
        if len(data) < 4:
            raise EOFError(f'Propensity artifact too short ({len(data)} bytes)')
        body, trailer = data[:-4], data[-4:]
        Validation.read(BytesIO(trailer)).check(body)

        src = BytesIO(body)
        read_magic_bytes(src)
        version = read_uint(src)
        if version != FORMAT_VERSION:
            raise InvalidDataError(f'Unsupported propensity artifact version {version}')
        kind_code = read_uint(src)
        try:
            kind = ModelKind(kind_code)
        except ValueError:
            raise InvalidDataError(f'Unknown propensity model kind {kind_code}') from None
        threshold = read_uint(src)
        levels = tuple(read_int_array(src).tolist())
        n_features = read_uint(src)
        model: LinearModel | TreeEnsemble
        if kind == ModelKind.MultinomialLinear:
            model = LinearModel.read(src)
        else:
            model = TreeEnsemble.read(src)
        diagnostics = json.loads(read_bstring(src).decode())
        if src.read(1):
            raise EOFError('Propensity artifact continues past expected end')
        return PropensityFit(kind, levels, threshold, n_features, model, diagnostics)

    def save(self, path: str | Path) -> None:
        with Path(path).open('wb') as ff:
            self.write(ff)

    @staticmethod
    def load(path: str | Path) -> 'PropensityFit':
        with Path(path).open('rb') as ff:
            return PropensityFit.read(ff)

    def to_bytes(self) -> bytes:
        buf = BytesIO()
        self.write(buf)
        return buf.getvalue()

    def __eq__(self, other: Any) -> bool:
        return isinstance(other, PropensityFit) and self.to_bytes() == other.to_bytes()

    def __repr__(self) -> str:
        return f'PropensityFit({self.kind.cli_name}, levels={list(self.levels)}, n_features={self.n_features})'


def _diagnostics(fit: PropensityFit, features: NDArray[numpy.float64], index: NDArray[numpy.int64]) -> dict[str, Any]:
    log_loss, accuracy = _score_summary(fit.predict(features), index)
    support = numpy.bincount(index, minlength=len(fit.levels))
    return {
        'n_rows': int(features.shape[0]),
        'log_loss': log_loss,
        'accuracy': accuracy,
        'support': {str(ll): int(nn) for ll, nn in zip(fit.levels, support, strict=True)},
        }


def fit_propensity(
        kind: ModelKind | str,
        features: ArrayLike,
        categories: ArrayLike,
        **options,
        ) -> PropensityFit:
    """
    Fit a model of the given kind; `options` go to the kind's fitting function.
    """
    kind = ModelKind.parse(kind)
    if kind == ModelKind.MultinomialLinear:
        return fit_multinomial_linear(features, categories, **options)
    return fit_boosted_trees(features, categories, **options)


def predict_propensities(fit: PropensityFit, features: ArrayLike) -> NDArray[numpy.float64]:
    """
    Probability matrix, one row per unit and one column per `fit.levels` entry.
    """
    return fit.predict(features)


'''
    Cross-validation
'''
class CvReport:
    """
    Result of `cross_validate()`.
    """
    folds: int
    kind: ModelKind
    grid: list[dict[str, Any]]

    mean_log_loss: list[float]
    """mean held-out log-loss, per grid point"""

    fold_accuracy: list[list[float]]
    """held-out accuracy per grid point, per fold"""

    fold_log_loss: list[list[float]]
    """held-out log-loss per grid point, per fold"""

    best_index: int

    def __init__(
            self,
            folds: int,
            kind: ModelKind,
            grid: list[dict[str, Any]],
            fold_accuracy: list[list[float]],
            fold_log_loss: list[list[float]],
            ) -> None:
        self.folds = folds
        self.kind = kind
        self.grid = grid
        self.fold_accuracy = fold_accuracy
        self.fold_log_loss = fold_log_loss
        self.mean_log_loss = [math.fsum(ll) / len(ll) for ll in fold_log_loss]
        self.best_index = int(numpy.argmin(self.mean_log_loss))

    @property
    def selected(self) -> dict[str, Any]:
        return dict(self.grid[self.best_index])

    @property
    def accuracy(self) -> list[float]:
        """held-out accuracy of the selected grid point, per fold"""
        return self.fold_accuracy[self.best_index]

    def to_dict(self) -> dict[str, Any]:
        return {
            'folds': self.folds,
            'kind': self.kind.cli_name,
            'grid': self.grid,
            'mean_log_loss': self.mean_log_loss,
            'fold_accuracy': self.fold_accuracy,
            'fold_log_loss': self.fold_log_loss,
            'selected': self.selected,
            }


def cross_validate(
        features: ArrayLike,
        categories: ArrayLike,
        grid: Sequence[Mapping[str, Any]],
        k_folds: int = 5,
        *,
        kind: ModelKind | str = ModelKind.BoostedTrees,
        seed: int = 0,
        ) -> CvReport:
    """
    Stratified k-fold search over a hyperparameter grid.

    Args:
        features: Covariates.
        categories: Truncated exposure level of each row.
        grid: Candidate option sets for the model kind's fitting function.
        k_folds: Number of folds, >= 2.
        kind: Model kind.
        seed: Fold-shuffling seed.

    Returns:
        `CvReport`; the selected grid point minimizes mean held-out log-loss
            (earliest wins ties).

    Raises:
        ConfigError: if `k_folds < 2` or the grid is empty.
        StratificationError: if some training fold is missing a category.
    """
    if k_folds < 2:
        raise ConfigError(f'k_folds must be >= 2, got {k_folds}')
    if not grid:
        raise ConfigError('Cross-validation grid is empty')
    kind = ModelKind.parse(kind)
    xx, index, levels = _prepare(features, categories, None)
    cats = numpy.array(levels)[index]

    splitter = StratifiedKFold(n_splits=k_folds, shuffle=True, random_state=seed % 2**32)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter('ignore', UserWarning)
            splits = list(splitter.split(xx, cats))
    except ValueError as err:
        raise StratificationError(f'Cannot split into {k_folds} folds ({err}); merge sparse categories,'
                                  ' e.g. with a lower truncation threshold') from err

    counts = numpy.bincount(index, minlength=len(levels))
    for train, _test in splits:
        missing = sorted(set(levels) - set(numpy.unique(cats[train]).tolist()))
        if missing:
            rare = {ll: int(nn) for ll, nn in zip(levels, counts, strict=True) if ll in missing}
            raise StratificationError(f'A training fold has no rows of categories {missing} (total rows {rare});'
                                      ' merge sparse categories, e.g. with a lower truncation threshold')

    fold_accuracy = []
    fold_log_loss = []
    for options in grid:
        accs = []
        losses = []
        for train, test in splits:
            fit = fit_propensity(kind, xx[train], cats[train], levels=levels, **options)
            log_loss, accuracy = _score_summary(fit.predict(xx[test]), index[test])
            accs.append(accuracy)
            losses.append(log_loss)
        fold_accuracy.append(accs)
        fold_log_loss.append(losses)

    report = CvReport(k_folds, kind, [dict(gg) for gg in grid], fold_accuracy, fold_log_loss)
    logger.info(f'Cross-validation selected {report.selected} (mean held-out log-loss {report.mean_log_loss[report.best_index]:.4f})')
    return report


'''
    Weight stabilization
'''
def stabilize_weights(probabilities: ArrayLike, epsilon: float = DEFAULT_EPSILON) -> NDArray[numpy.float64]:
    """
    Raise every probability to at least `epsilon`, taking the extra mass
     proportionally from the unclipped entries of the same row (repeated until
     no rescaled entry falls below `epsilon`). Rows keep summing to 1, and the
     largest inverse-probability weight never grows with `epsilon`.

    Example: `(0.001, 0.999)` with `epsilon=0.01` becomes `(0.01, 0.99)`.

    Args:
        probabilities: Row-stochastic matrix (a 1-D array is treated as one row).
        epsilon: Floor, in [0, 0.5); `epsilon * n_columns` must not exceed 1.

    Returns:
        Clipped probabilities, same shape as the input.

    Raises:
        ConfigError: for an invalid `epsilon`.
    """
    probs = numpy.array(probabilities, dtype=numpy.float64)
    squeeze = probs.ndim == 1
    probs = numpy.atleast_2d(probs)
    if not 0 <= epsilon < 0.5:
        raise ConfigError(f'epsilon must be in [0, 0.5), got {epsilon}')
    if epsilon * probs.shape[1] > 1:
        raise ConfigError(f'epsilon={epsilon} is infeasible for {probs.shape[1]} categories')
    if epsilon == 0:
        return probs[0] if squeeze else probs

    clipped = probs < epsilon
    out = probs
    for _ in range(probs.shape[1]):
        free = 1 - epsilon * clipped.sum(axis=1, keepdims=True)
        rest = numpy.where(clipped, 0.0, probs).sum(axis=1, keepdims=True)
        with numpy.errstate(invalid='ignore', divide='ignore'):
            out = numpy.where(clipped, epsilon, probs * (free / rest))
        grown = clipped | (out < epsilon)
        if (grown == clipped).all():
            break
        clipped = grown

    n_clipped = int(clipped.sum())
    if n_clipped:
        logger.debug(f'Clipped {n_clipped} propensities to {epsilon}')
    return out[0] if squeeze else out


class PropensityTable:
    """
    Per-unit level probabilities aligned with a dataset's players.
     Rows of units outside the modeled population are NaN.
    """
    levels: tuple[int, ...]
    values: NDArray[numpy.float64]
    """shape (n_players, len(levels))"""

    threshold: int

    def __init__(self, levels: Sequence[int], values: NDArray[numpy.float64], threshold: int) -> None:
        self.levels = tuple(int(ll) for ll in levels)
        self.values = numpy.asarray(values, dtype=numpy.float64)
        self.threshold = int(threshold)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.levels):
            raise InvalidDataError(f'Propensity matrix shape {self.values.shape} does not match {len(self.levels)} levels')

    def column(self, level: int) -> NDArray[numpy.float64]:
        """
        Probability of `level` for every unit.

        Raises:
            UndefinedLevelError: if the model was fit without `level`.
        """
        if level not in self.levels:
            raise UndefinedLevelError(f'Propensity model covers levels {list(self.levels)}, not {level}', level)
        return self.values[:, self.levels.index(level)]

    @classmethod
    def from_fit(
            cls: type[Self],
            fit: PropensityFit,
            features: NDArray[numpy.float64],
            rows: NDArray[numpy.bool_],
            epsilon: float = DEFAULT_EPSILON,
            ) -> Self:
        """
        Predict for the selected rows and apply `stabilize_weights()`.
        """
        values = numpy.full((features.shape[0], len(fit.levels)), numpy.nan)
        values[rows] = stabilize_weights(fit.predict(features[rows]), epsilon)
        return cls(fit.levels, values, fit.threshold)
