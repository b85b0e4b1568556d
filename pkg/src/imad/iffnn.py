"""Interpretable feed-forward classifier and per-feature attribution.

The model is a logistic regression whose weight vector is not a fixed
parameter but is computed from the input by a stack of tanh layers:

    v_0 = x
    v_i = tanh(W1_i v_{i-1} + b1_i)        i = 1..l
    w(x) = W2 v_l + b2
    y = sigmoid(w(x) . x + b)

Because the pre-sigmoid logit is an exact inner product, every prediction
decomposes as logit = sum_j w(x)_j x_j + b, and the signed products
w(x)_j * x_j are per-feature impacts: positive pushes toward the positive
class, negative away, magnitude is strength.  Setting W2 = 0 collapses the
model to plain logistic regression with weights b2.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array, check_X_y

from . import tensor as T
from .optim import Adam, EarlyStopping
from .tensor import Initializer, Tensor


def default_hidden_dims(input_dim, n_layers=2):
    return [max(64, input_dim // 4)] * n_layers


class IffnnModel:
    """Tensor-level model: hidden tanh stack, weight generator, scalar bias."""

    def __init__(self, input_dim, hidden_dims=None, seed=0, init=None):
        if input_dim < 1:
            raise ValueError("input_dim must be positive")
        self.input_dim = int(input_dim)
        self.hidden_dims = list(hidden_dims) if hidden_dims is not None else \
            default_hidden_dims(input_dim)
        init = init or Initializer(seed)
        dims = [self.input_dim] + self.hidden_dims
        self.hidden = [
            (init.matrix(dims[i], dims[i + 1]), init.zeros((dims[i + 1],)))
            for i in range(len(dims) - 1)
        ]
        self.w2 = init.matrix(dims[-1], self.input_dim)
        self.b2 = init.zeros((self.input_dim,))
        self.bias = init.zeros((1, 1))

    def forward(self, x: Tensor):
        """Returns (confidence y, weight vector w(x), logit), all tensors."""
        if x.shape != (1, self.input_dim):
            raise T.ShapeError(f"iffnn: expected input shape (1, {self.input_dim}), got {x.shape}")
        h = x
        for w, b in self.hidden:
            h = T.tanh(T.add(T.matmul(h, w), b))
        weights = T.add(T.matmul(h, self.w2), self.b2)
        logit = T.add(T.matmul(weights, T.transpose(x)), self.bias)
        return T.sigmoid(logit), weights, logit

    def loss(self, x: Tensor, label) -> Tensor:
        _, _, logit = self.forward(x)
        return T.bce_with_logits(logit, float(label))

    def parameters(self):
        out = {}
        for i, (w, b) in enumerate(self.hidden):
            out[f"hidden{i}.w"] = w
            out[f"hidden{i}.b"] = b
        out["w2"] = self.w2
        out["b2"] = self.b2
        out["bias"] = self.bias
        return out

    def load_parameters(self, values):
        for name, p in self.parameters().items():
            p.data = values[name].astype(np.float64).copy()


def iffnn_forward(x, model: IffnnModel):
    """Confidence in (0,1) and the input-conditioned weight vector, as arrays."""
    y, weights, _ = model.forward(Tensor(np.asarray(x, dtype=np.float64).reshape(1, -1)))
    return y.item(), weights.data.reshape(-1)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False


def train_iffnn(model: IffnnModel, X, y, lr=1e-4, batch_size=32, max_epochs=50,
                patience=5, val_fraction=0.1, seed=0, X_val=None, y_val=None):
    """Adam + early stopping on validation loss; restores the best checkpoint."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.shape[0] == 0:
        raise ValueError("cannot train on an empty dataset")
    if set(np.unique(y)) - {0.0, 1.0}:
        raise ValueError("labels must be 0 or 1")
    rng = np.random.default_rng(seed)
    if X_val is None:
        n_val = max(1, int(round(val_fraction * len(X)))) if len(X) > 1 else 0
        order = rng.permutation(len(X))
        val_idx, train_idx = order[:n_val], order[n_val:]
        if len(train_idx) == 0:
            train_idx = val_idx
        X_val, y_val = X[val_idx], y[val_idx]
        X, y = X[train_idx], y[train_idx]

    params = model.parameters()
    opt = Adam(params, lr=lr)
    stopper = EarlyStopping(params, patience=patience)
    history = TrainHistory()
    for epoch in range(max_epochs):
        order = rng.permutation(len(X))
        total = 0.0
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            opt.zero_grad()
            for idx in batch:
                loss = model.loss(Tensor(X[idx : idx + 1]), y[idx])
                total += loss.item()
                T.backward(T.scale(loss, 1.0 / len(batch)))
            opt.step()
        history.train_loss.append(total / len(X))

        val_losses = []
        correct = 0
        with T.no_grad():
            for i in range(len(X_val)):
                yi, _, logit = model.forward(Tensor(X_val[i : i + 1]))
                val_losses.append(T.bce_with_logits(logit, y_val[i]).item())
                correct += int((yi.item() > 0.5) == bool(y_val[i]))
        val_loss = float(np.mean(val_losses)) if val_losses else history.train_loss[-1]
        history.val_loss.append(val_loss)
        history.val_accuracy.append(correct / max(1, len(X_val)))
        if stopper.update(val_loss, epoch):
            history.stopped_early = True
            break
    stopper.restore_best()
    history.best_epoch = stopper.best_epoch
    return history


# ---------------------------------------------------------------------------
# attribution


@dataclass
class Factor:
    description: str
    value: float | None       # raw feature value; None for the code group
    impact: float
    index: int                 # first flat index of the factor


@dataclass
class AttributionReport:
    """Decomposition of one prediction, shaped for the detection report.

    The completeness identity logit == sum(impacts) + bias holds by
    construction and is stored for verification.
    """

    file: str
    prediction: str
    confidence: float
    logit: float
    bias: float
    factors: list[Factor]
    top_factors: list[Factor]
    code_impact: float | None
    functions: list[tuple[str, float]]
    degenerate_code: bool = False

    def completeness_residual(self):
        return self.logit - (sum(f.impact for f in self.factors) + self.bias)

    def to_dict(self):
        return {
            "file": self.file,
            "prediction": self.prediction,
            "confidence": self.confidence,
            "logit": self.logit,
            "bias": self.bias,
            "code_impact": self.code_impact,
            "degenerate_code": self.degenerate_code,
            "top_factors": [
                {"description": f.description, "value": f.value, "impact": f.impact}
                for f in self.top_factors
            ],
            "factors": [
                {"description": f.description, "value": f.value, "impact": f.impact}
                for f in self.factors
            ],
            "influential_functions": [
                {"name": name, "summed_attention": weight} for name, weight in self.functions
            ],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_table(self):
        """Aligned human-readable report: file, verdict, factors, functions."""
        lines = [
            f"File: {self.file}",
            f"Prediction: {self.prediction}",
            f"Confidence: {_format_confidence(self.confidence)}",
            "",
            f"Primary factors leading to the prediction of {self.prediction}",
        ]
        rows = [("Feature description", "Feature value", "Impact")]
        for f in self.top_factors:
            value = "N/A" if f.value is None else _format_number(f.value)
            rows.append((f.description, value, f"{f.impact:+.2f}"))
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        for idx, row in enumerate(rows):
            lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
            if idx == 0:
                lines.append("  ".join("-" * w for w in widths))
        lines.append("")
        lines.append("Most influential assembly functions")
        if self.functions:
            for name, weight in self.functions:
                lines.append(f"{name}  (summed attention {weight:.3f})")
        else:
            lines.append("(no assembly code available)")
        return "\n".join(lines)


def _format_confidence(y):
    # 4 significant digits; only shows 100% if the value itself rounds there
    return f"{y * 100:.4g}%"


def _format_number(v):
    if v == int(v):
        return str(int(v))
    return f"{v:.4g}"


def attribute(feature_vector, model: IffnnModel, function_weights=None,
              function_names=None, file_name="<input>", top_k=5,
              raw_values=None, degenerate_code=False) -> AttributionReport:
    """Attribution report for one segmented input.

    Per-feature impacts are w(x)_j * x_j on the model's input scale; the code
    segment is collapsed to a single "Assembly code" factor by summing its
    impacts.  Top factors are the largest impacts when the prediction is
    malicious and the smallest (most negative) when benign, ties broken by
    feature index.  Assembly functions are ranked by relay attention summed
    over heads.
    """
    if not hasattr(feature_vector, "segments"):
        raise TypeError("attribute needs a SegmentedFeatureVector (segment map required)")
    x = feature_vector.values
    y, weights, logit = model.forward(Tensor(x.reshape(1, -1)))
    confidence = y.item()
    impacts = weights.data.reshape(-1) * x
    display_values = raw_values if raw_values is not None else x

    code_start, code_end = feature_vector.segments["code"]
    factors = []
    code_impact = None
    if code_end > code_start:
        code_impact = float(impacts[code_start:code_end].sum())
        factors.append(Factor("Assembly code", None, code_impact, code_start))
    for j in range(code_end, len(x)):
        factors.append(Factor(feature_vector.name_of(j), float(display_values[j]),
                              float(impacts[j]), j))

    malicious = confidence > 0.5
    ranked = sorted(factors, key=lambda f: ((-f.impact if malicious else f.impact), f.index))
    names = function_names or []
    fweights = [] if function_weights is None else list(map(float, function_weights))
    functions = [
        (names[i] if i < len(names) else f"function_{i}", w)
        for i, w in sorted(enumerate(fweights), key=lambda kv: -kv[1])
    ]
    return AttributionReport(
        file=file_name,
        prediction="malicious" if malicious else "benign",
        confidence=confidence,
        logit=logit.item(),
        bias=model.bias.item(),
        factors=factors,
        top_factors=ranked[:top_k],
        code_impact=code_impact,
        functions=functions,
        degenerate_code=degenerate_code,
    )


# ---------------------------------------------------------------------------
# sklearn estimator


class IffnnClassifier(BaseEstimator, ClassifierMixin):
    """Binary classifier wrapper with the scikit-learn estimator API.

    ``feature_impacts`` exposes the per-feature decomposition of the logit for
    each row: impacts.sum(axis=1) + intercept equals the decision function.
    """

    def __init__(self, hidden_dims=None, lr=1e-2, batch_size=32, max_epochs=200,
                 patience=10, val_fraction=0.1, seed=0):
        self.hidden_dims = hidden_dims
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.val_fraction = val_fraction
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        classes = np.unique(y)
        if len(classes) != 2:
            raise ValueError("IffnnClassifier is a binary classifier")
        self.classes_ = classes
        binary = (y == classes[1]).astype(np.float64)
        self.model_ = IffnnModel(X.shape[1], hidden_dims=self.hidden_dims, seed=self.seed)
        self.history_ = train_iffnn(
            self.model_, X, binary, lr=self.lr, batch_size=self.batch_size,
            max_epochs=self.max_epochs, patience=self.patience,
            val_fraction=self.val_fraction, seed=self.seed)
        return self

    def decision_function(self, X):
        self._check_fitted()
        X = check_array(X, dtype=np.float64)
        out = np.empty(len(X))
        with T.no_grad():
            for i in range(len(X)):
                _, _, logit = self.model_.forward(Tensor(X[i : i + 1]))
                out[i] = logit.item()
        return out

    def predict_proba(self, X):
        logits = self.decision_function(X)
        pos = 1.0 / (1.0 + np.exp(-logits))
        return np.column_stack([1.0 - pos, pos])

    def predict(self, X):
        self._check_fitted()
        return np.where(self.decision_function(X) > 0, self.classes_[1], self.classes_[0])

    def feature_impacts(self, X):
        self._check_fitted()
        X = check_array(X, dtype=np.float64)
        out = np.empty_like(X)
        with T.no_grad():
            for i in range(len(X)):
                _, weights, _ = self.model_.forward(Tensor(X[i : i + 1]))
                out[i] = weights.data.reshape(-1) * X[i]
        return out

    @property
    def intercept_(self):
        self._check_fitted()
        return self.model_.bias.item()

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("IffnnClassifier is not fitted")


def brute_force_lr_optimum(X, y, grid=None):
    """Grid-search oracle for the best plain logistic regression BCE on (X, y).

    Used to certify claims of the form "no linear model can do better than L"
    on tiny datasets; returns the minimal mean BCE over the grid.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if grid is None:
        grid = np.linspace(-8.0, 8.0, 33)
    best = math.inf
    for w1 in grid:
        for w2 in grid:
            for b in grid:
                z = X[:, 0] * w1 + X[:, 1] * w2 + b
                loss = np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z))))
                best = min(best, float(loss))
    return best
