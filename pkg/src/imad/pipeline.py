"""Staged training: masked-instruction, clone, then two-pass top-level.

The stages must run in order

    mam -> clone -> toplevel-code-only -> toplevel-full

because each later stage starts from the previous stage's parameters:

* ``mam`` trains the block-level encoder (plus instruction embeddings and the
  prediction head) to recover a masked instruction from its block.
* ``clone`` trains the function-level encoder to give clone pairs cosine +1
  and non-clones -1, while fine-tuning the block-level encoder underneath.
* the top-level stages train the executable-level encoder together with the
  interpretable classifier -- first on the code vector alone, then re-fitting
  the classifier on the full feature vector -- with the two lower encoders
  frozen (their function vectors are precomputed once per corpus).

``TrainingPipeline`` adds the artifact plumbing: stage gating against
checkpoints on disk, per-stage metrics CSVs, and JSON run manifests.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats as scipy_stats
from sklearn.ensemble import RandomForestClassifier

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import read_jsonl, sha256_file
from .features import FeatureSchema, FeatureStandardizer, build_vocabulary
from .galaxy import GalaxyConfig, GalaxyModel, encode_tokens, load_vocabularies
from .iffnn import IffnnModel, default_hidden_dims
from .optim import Adam, EarlyStopping
from .tensor import Tensor

STAGES = ("mam", "clone", "toplevel-code-only", "toplevel-full")


class StageOrderError(RuntimeError):
    """A stage was requested before its prerequisite stage completed."""

    def __init__(self, stage, required):
        self.stage = stage
        self.required = required
        super().__init__(f"stage {stage!r} requires completed stage {required!r}")


def required_stage(stage):
    idx = STAGES.index(stage)
    return STAGES[idx - 1] if idx > 0 else None


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    val_fraction: float = 0.1
    seed: int = 0

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_metric: float  # stage-specific accuracy


@dataclass
class StageResult:
    stage: str
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")
    stopped_early: bool = False
    extra: dict = field(default_factory=dict)

    def metrics_rows(self):
        return [
            [e.epoch, f"{e.train_loss:.8f}", f"{e.val_loss:.8f}", f"{e.val_metric:.6f}"]
            for e in self.epochs
        ]

    def to_dict(self):
        return {
            "stage": self.stage,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "stopped_early": self.stopped_early,
            "epochs": [e.__dict__ for e in self.epochs],
            "extra": self.extra,
        }


def split_train_val(n, val_fraction, rng, labels=None):
    """Index split; stratified by label when labels are given."""
    if labels is None:
        order = rng.permutation(n)
        n_val = max(1, int(round(val_fraction * n))) if n > 1 else 0
        return order[n_val:], order[:n_val]
    labels = np.asarray(labels)
    train_idx, val_idx = [], []
    for value in np.unique(labels):
        members = np.flatnonzero(labels == value)
        members = members[rng.permutation(len(members))]
        n_val = max(1, int(round(val_fraction * len(members)))) if len(members) > 1 else 0
        val_idx.extend(members[:n_val])
        train_idx.extend(members[n_val:])
    return (np.array(sorted(train_idx), dtype=int),
            np.array(sorted(val_idx), dtype=int))


def _run_epochs(stage, params, samples_train, samples_val, loss_fn, metric_fn, cfg,
                rng, progress=None):
    """Shared Adam + early-stopping loop over per-sample loss closures."""
    opt = Adam(params, lr=cfg.lr)
    stopper = EarlyStopping(params, patience=cfg.patience)
    result = StageResult(stage=stage)
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(samples_train))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            opt.zero_grad()
            for idx in batch:
                loss = loss_fn(samples_train[idx], rng)
                total += loss.item()
                T.backward(T.scale(loss, 1.0 / len(batch)))
            opt.step()
        train_loss = total / max(1, len(samples_train))

        val_losses, metric_hits = [], []
        with T.no_grad():
            for sample in samples_val:
                loss, hit = metric_fn(sample)
                val_losses.append(loss)
                metric_hits.append(hit)
        val_loss = float(np.mean(val_losses)) if val_losses else train_loss
        val_metric = float(np.mean(metric_hits)) if metric_hits else 0.0
        result.epochs.append(EpochRecord(epoch, train_loss, val_loss, val_metric))
        if progress:
            progress(result.epochs[-1])
        if stopper.update(val_loss, epoch):
            result.stopped_early = True
            break
    stopper.restore_best()
    result.best_epoch = stopper.best_epoch
    result.best_val_loss = stopper.best_loss
    return result


# ---------------------------------------------------------------------------
# corpus record adapters


def mam_block_from_record(record, opcode_vocab, operand_vocab):
    code = encode_tokens(record["functions"], opcode_vocab, operand_vocab)
    return code.functions[0].blocks[0]


def clone_pair_from_record(record, opcode_vocab, operand_vocab):
    code = encode_tokens(record["functions"], opcode_vocab, operand_vocab)
    if len(code.functions) != 2:
        raise ValueError(f"clone record {record.get('id')} must hold exactly two functions")
    return code.functions[0], code.functions[1], int(record["label"])


def executable_from_record(record, opcode_vocab, operand_vocab):
    return encode_tokens(record["functions"], opcode_vocab, operand_vocab)


# ---------------------------------------------------------------------------
# stage trainers


def train_mam(model: GalaxyModel, blocks, cfg: TrainConfig, progress=None) -> StageResult:
    """Masked-instruction pre-training of the block-level encoder."""
    if not blocks:
        raise ValueError("empty masked-prediction corpus")
    rng = np.random.default_rng(cfg.seed)
    train_idx, val_idx = split_train_val(len(blocks), cfg.val_fraction, rng)
    train = [blocks[i] for i in train_idx]
    val = [blocks[i] for i in val_idx]
    # fixed mask positions make validation losses comparable across epochs
    val_positions = [int(rng.integers(len(b))) for b in val]

    params = {}
    params.update(model.component_parameters("satellite_planet"))
    params.update(model.component_parameters("mam_head"))

    def loss_fn(block, sample_rng):
        pos = int(sample_rng.integers(len(block)))
        return model.mam_loss(block.masked(pos), pos, block.instructions[pos])

    def metric_fn(indexed):
        block, pos = indexed
        original = block.instructions[pos]
        masked = block.masked(pos)
        loss = model.mam_loss(masked, pos, original).item()
        opc_logits = model._mam_logits(masked, pos)[0]
        hit = int(np.argmax(opc_logits.data) == original.opcode_id)
        return loss, hit

    return _run_epochs("mam", params, train, list(zip(val, val_positions)),
                       loss_fn, metric_fn, cfg, rng, progress)


def mam_opcode_accuracy(model, blocks, positions):
    """Top-1 masked-opcode accuracy at fixed mask positions."""
    hits = 0
    with T.no_grad():
        for block, pos in zip(blocks, positions):
            logits = model._mam_logits(block.masked(pos), pos)[0]
            hits += int(np.argmax(logits.data) == block.instructions[pos].opcode_id)
    return hits / max(1, len(blocks))


def train_clone(model: GalaxyModel, pairs, cfg: TrainConfig, progress=None) -> StageResult:
    """Clone-similarity training of the function-level encoder.

    Minimizes (cos - label)^2 with labels +1/-1; fine-tunes the block-level
    encoder simultaneously.  Tracks threshold-0 pair accuracy on validation.
    """
    if not pairs:
        raise ValueError("empty clone-pair corpus")
    labels = [p[2] for p in pairs]
    pos, neg = labels.count(1), labels.count(-1)
    if min(pos, neg) == 0 or max(pos, neg) / max(1, min(pos, neg)) > 1.5:
        warnings.warn(f"clone pair labels are unbalanced: {pos} clones vs {neg} non-clones")
    rng = np.random.default_rng(cfg.seed)
    train_idx, val_idx = split_train_val(len(pairs), cfg.val_fraction, rng, labels=labels)
    train = [pairs[i] for i in train_idx]
    val = [pairs[i] for i in val_idx]

    params = {}
    params.update(model.component_parameters("satellite_planet"))
    params.update(model.component_parameters("planet_star"))

    def loss_fn(pair, _rng):
        f1, f2, label = pair
        return T.mse(model.clone_score(f1, f2), Tensor(float(label)))

    def metric_fn(pair):
        f1, f2, label = pair
        cos = model.clone_score(f1, f2).item()
        return (cos - label) ** 2, int((cos > 0) == (label > 0))

    return _run_epochs("clone", params, train, val, loss_fn, metric_fn, cfg, rng, progress)


def clone_pair_accuracy(model, pairs):
    """Threshold-0 accuracy: cosine > 0 predicts a clone pair."""
    hits = 0
    with T.no_grad():
        for f1, f2, label in pairs:
            hits += int((model.clone_score(f1, f2).item() > 0) == (label > 0))
    return hits / max(1, len(pairs))


def precompute_function_vectors(model, executables):
    """Frozen lower-level forward: per-executable (n_functions x d_model) arrays."""
    out = []
    with T.no_grad():
        for code in executables:
            if len(code.functions) == 0:
                out.append(np.zeros((0, model.config.d_model)))
            else:
                out.append(np.vstack([
                    model.encode_function(f).data for f in code.functions]))
    return out


class ToplevelNet:
    """Executable-level encoder + classifier over precomputed function vectors."""

    def __init__(self, model: GalaxyModel, iffnn: IffnnModel, static_width, mode,
                 zero_code=False):
        if mode not in ("code-only", "full"):
            raise ValueError(f"unknown top-level mode {mode!r}")
        self.model = model
        self.iffnn = iffnn
        self.mode = mode
        self.zero_code = zero_code
        self.static_width = static_width

    def code_vector(self, function_vectors):
        d = self.model.config.d_model
        if self.zero_code or function_vectors.shape[0] == 0:
            return Tensor(np.zeros((1, d))), None
        stacked = T.add(Tensor(function_vectors),
                        self.model._pe(function_vectors.shape[0]))
        out = self.model.star_galaxy(stacked)
        return out.relay, out.relay_weights

    def forward(self, function_vectors, static_row):
        v_code, relay_weights = self.code_vector(function_vectors)
        if self.mode == "code-only":
            x = v_code
        else:
            x = T.concat([v_code, Tensor(static_row.reshape(1, -1))], axis=1)
        y, weights, logit = self.iffnn.forward(x)
        return y, logit, relay_weights

    def loss(self, function_vectors, static_row, label):
        _, logit, _ = self.forward(function_vectors, static_row)
        return T.bce_with_logits(logit, float(label))

    def parameters(self):
        params = {}
        if not self.zero_code:
            params.update(self.model.component_parameters("star_galaxy"))
        params.update({f"iffnn.{k}": v for k, v in self.iffnn.parameters().items()})
        return params


def train_toplevel(model: GalaxyModel, executables, static_matrix, labels, mode,
                   cfg: TrainConfig, iffnn=None, zero_code=False, function_vectors=None,
                   iffnn_hidden=None, progress=None):
    """One top-level pass; returns (net, StageResult).

    ``mode`` "code-only" feeds the classifier just the code vector (width
    d_model); "full" feeds the whole concatenated feature vector with a fresh
    classifier.  The two lower encoder levels stay frozen throughout; their
    function vectors are precomputed (pass ``function_vectors`` to reuse).
    ``zero_code`` freezes the code vector at zero for ablations.
    """
    labels = np.asarray(labels, dtype=int)
    static_matrix = np.asarray(static_matrix, dtype=np.float64)
    if len(executables) != len(labels):
        raise ValueError("executables and labels differ in length")
    rng = np.random.default_rng(cfg.seed)

    model.set_trainable(["satellite_planet", "planet_star"], False)
    try:
        if function_vectors is None:
            function_vectors = precompute_function_vectors(model, executables)

        d = model.config.d_model
        static_width = static_matrix.shape[1] if static_matrix.ndim == 2 else 0
        input_dim = d if mode == "code-only" else d + static_width
        if iffnn is None:
            hidden = iffnn_hidden or default_hidden_dims(input_dim)
            iffnn = IffnnModel(input_dim, hidden_dims=hidden, seed=cfg.seed)
        net = ToplevelNet(model, iffnn, static_width, mode, zero_code=zero_code)

        train_idx, val_idx = split_train_val(len(labels), cfg.val_fraction, rng,
                                             labels=labels)
        def sample(i):
            static_row = static_matrix[i] if static_width else np.zeros(0)
            return (function_vectors[i], static_row, labels[i])

        train = [sample(i) for i in train_idx]
        val = [sample(i) for i in val_idx]

        def loss_fn(s, _rng):
            return net.loss(*s)

        def metric_fn(s):
            fv, static_row, label = s
            y, logit, _ = net.forward(fv, static_row)
            return T.bce_with_logits(logit, float(label)).item(), int((y.item() > 0.5) == bool(label))

        result = _run_epochs(f"toplevel-{mode}", net.parameters(), train, val,
                             loss_fn, metric_fn, cfg, rng, progress)
        result.extra["mode"] = mode
        result.extra["zero_code"] = zero_code
        return net, result
    finally:
        model.set_trainable(["satellite_planet", "planet_star"], True)


def toplevel_accuracy(net, executables_fv, static_matrix, labels):
    hits = 0
    with T.no_grad():
        for fv, static_row, label in zip(executables_fv, static_matrix, labels):
            y, _, _ = net.forward(fv, static_row)
            hits += int((y.item() > 0.5) == bool(label))
    return hits / max(1, len(labels))


# ---------------------------------------------------------------------------
# feature importance analysis


def information_gain(x, y, n_bins=16):
    """Mutual information (bits) between a quantile-binned feature and labels.

    Constant features carry no information and return 0.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    edges = np.unique(np.quantile(x, np.linspace(0, 1, n_bins + 1)[1:-1]))
    bins = np.digitize(x, edges)

    def entropy(labels):
        if len(labels) == 0:
            return 0.0
        _, counts = np.unique(labels, return_counts=True)
        p = counts / counts.sum()
        return float(-(p * np.log2(p)).sum())

    h_y = entropy(y)
    h_y_given = 0.0
    for b in np.unique(bins):
        member = y[bins == b]
        h_y_given += len(member) / len(y) * entropy(member)
    return h_y - h_y_given


@dataclass
class ImportanceReport:
    feature_names: list[str]
    ig_scores: np.ndarray
    gini_scores: np.ndarray
    attribution_counts: np.ndarray
    spearman: dict[str, float]

    def rank(self, scores):
        """1 = most important; ties get average ranks."""
        return scipy_stats.rankdata(-np.asarray(scores))

    def to_dict(self):
        return {
            "features": [
                {
                    "name": name,
                    "information_gain": float(self.ig_scores[i]),
                    "gini_importance": float(self.gini_scores[i]),
                    "attribution_count": int(self.attribution_counts[i]),
                }
                for i, name in enumerate(self.feature_names)
            ],
            "spearman": self.spearman,
        }


def feature_importance_analysis(static_matrix, labels, attribution_counts,
                                feature_names, n_bins=16, rf_seed=0) -> ImportanceReport:
    """Rank features by information gain, Gini importance, and attribution frequency.

    ``attribution_counts[j]`` counts how often feature j appeared among the
    top factors of a prediction.  Gini importances come from a small random
    forest (25 trees, depth 8).  Pairwise Spearman rank correlations are
    reported between the three rankings.
    """
    X = np.asarray(static_matrix, dtype=np.float64)
    y = np.asarray(labels, dtype=int)
    counts = np.asarray(attribution_counts, dtype=float)
    if X.shape[1] != len(feature_names) or X.shape[1] != len(counts):
        raise ValueError("feature axis mismatch between matrix, counts, and names")

    ig = np.array([information_gain(X[:, j], y, n_bins=n_bins) for j in range(X.shape[1])])
    forest = RandomForestClassifier(n_estimators=25, max_depth=8, random_state=rf_seed)
    forest.fit(X, y)
    gini = forest.feature_importances_

    def rho(a, b):
        # a constant ranking has no defined correlation; report 0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            value = scipy_stats.spearmanr(a, b).statistic
        return float(value) if np.isfinite(value) else 0.0

    spearman = {
        "attribution_vs_ig": rho(counts, ig),
        "attribution_vs_gini": rho(counts, gini),
        "ig_vs_gini": rho(ig, gini),
    }
    return ImportanceReport(list(feature_names), ig, gini, counts, spearman)


# ---------------------------------------------------------------------------
# pipeline orchestration (checkpoints, manifests, metrics files)


class TrainingPipeline:
    """Runs stages against a corpus directory, persisting artifacts per stage.

    Artifacts in ``model_dir``: ``<stage>.ckpt``, ``metrics_<stage>.csv`` and
    ``run_<stage>.json``.  A stage loads the previous stage's checkpoint; a
    missing prerequisite is a ``StageOrderError``.
    """

    def __init__(self, corpus_dir, model_dir, galaxy_config=None, train_config=None,
                 seed=0, string_threshold=2, import_threshold=2):
        self.corpus_dir = Path(corpus_dir)
        self.model_dir = Path(model_dir)
        self.model_dir.mkdir(parents=True, exist_ok=True)
        self.galaxy_config = galaxy_config or GalaxyConfig()
        self.train_config = train_config or TrainConfig(seed=seed)
        self.seed = int(seed)
        self.string_threshold = string_threshold
        self.import_threshold = import_threshold

    # -- artifact paths ------------------------------------------------------

    def checkpoint_path(self, stage):
        return self.model_dir / f"{stage}.ckpt"

    def _corpus_file(self, name):
        path = self.corpus_dir / name
        if not path.exists():
            raise FileNotFoundError(f"corpus file missing: {path}")
        return path

    # -- model assembly ------------------------------------------------------

    def fresh_model(self):
        opcode_vocab, operand_vocab = load_vocabularies(self._corpus_file("vocab.json"))
        return GalaxyModel(opcode_vocab, operand_vocab, self.galaxy_config, seed=self.seed)

    def model_from_checkpoint(self, stage):
        config, values = load_checkpoint(self.checkpoint_path(stage))
        model = GalaxyModel(
            _vocab_from_config(config, "opcodes"),
            _vocab_from_config(config, "operands"),
            GalaxyConfig.from_dict(config["galaxy"]),
            seed=config.get("seed", 0),
        )
        model.load_parameters({k.removeprefix("galaxy."): v for k, v in values.items()
                               if k.startswith("galaxy.")})
        return model, config, values

    def _require_stage(self, stage):
        prerequisite = required_stage(stage)
        if prerequisite and not self.checkpoint_path(prerequisite).exists():
            raise StageOrderError(stage, prerequisite)

    # -- stages ----------------------------------------------------------------

    def run_stage(self, stage, progress=None):
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
        self._require_stage(stage)
        runner = {
            "mam": self._run_mam,
            "clone": self._run_clone,
            "toplevel-code-only": lambda p: self._run_toplevel("code-only", p),
            "toplevel-full": lambda p: self._run_toplevel("full", p),
        }[stage]
        result = runner(progress)
        self._write_metrics(stage, result)
        return result

    def _run_mam(self, progress):
        model = self.fresh_model()
        records = read_jsonl(self._corpus_file("mam.jsonl"))
        blocks = [mam_block_from_record(r, model.opcode_vocab, model.operand_vocab)
                  for r in records]
        result = train_mam(model, blocks, self.train_config, progress)
        self._save(model, "mam", result)
        return result

    def _run_clone(self, progress):
        model, _, _ = self.model_from_checkpoint("mam")
        records = read_jsonl(self._corpus_file("clone.jsonl"))
        pairs = [clone_pair_from_record(r, model.opcode_vocab, model.operand_vocab)
                 for r in records]
        result = train_clone(model, pairs, self.train_config, progress)
        self._save(model, "clone", result)
        return result

    def _run_toplevel(self, mode, progress):
        previous = "clone" if mode == "code-only" else "toplevel-code-only"
        model, prev_config, prev_values = self.model_from_checkpoint(previous)
        records = read_jsonl(self._corpus_file("executables.jsonl"))
        executables = [executable_from_record(r, model.opcode_vocab, model.operand_vocab)
                       for r in records]
        labels = [int(r["label"]) for r in records]

        schema = None
        standardizer = None
        static_matrix = np.zeros((len(records), 0))
        if mode == "full":
            schema, standardizer, static_matrix = self._fit_static_features(records, labels)

        net, result = train_toplevel(model, executables, static_matrix, labels, mode,
                                     self.train_config, progress=progress)
        stage = f"toplevel-{mode}"
        extra_params = {f"iffnn.{k}": v for k, v in net.iffnn.parameters().items()}
        extra_config = {"iffnn_hidden": net.iffnn.hidden_dims,
                        "iffnn_input_dim": net.iffnn.input_dim}
        if mode == "full":
            extra_params["standardizer.mean"] = standardizer.mean_
            extra_params["standardizer.scale"] = standardizer.scale_
            extra_config["feature_schema"] = schema.to_dict()
            extra_config["log1p_columns"] = list(standardizer.log1p_columns)
        self._save(model, stage, result, extra_params=extra_params,
                   extra_config=extra_config)
        return result

    def _fit_static_features(self, records, labels):
        """Freeze vocabularies and the standardizer on the training split only."""
        rng = np.random.default_rng(self.train_config.seed)
        train_idx, _ = split_train_val(len(records), self.train_config.val_fraction,
                                       rng, labels=labels)
        train_records = [records[i] for i in train_idx]
        schema = FeatureSchema(
            build_vocabulary((r.get("strings", []) for r in train_records),
                             self.string_threshold),
            build_vocabulary((r.get("imports", []) for r in train_records),
                             self.import_threshold),
        )
        raw = np.stack([
            schema.static_vector(r.get("strings", []), r.get("imports", []),
                                 r.get("header", {}))
            for r in records
        ])
        standardizer = FeatureStandardizer(log1p_columns=schema.log1p_columns())
        standardizer.fit(raw[train_idx])
        return schema, standardizer, standardizer.transform(raw)

    # -- persistence -----------------------------------------------------------

    def _save(self, model, stage, result, extra_params=None, extra_config=None):
        config = {
            "stage": stage,
            "seed": self.seed,
            "galaxy": model.config.to_dict(),
            "vocabularies": {
                "opcodes": model.opcode_vocab.token_to_id,
                "operands": model.operand_vocab.token_to_id,
            },
            "train": self.train_config.to_dict(),
            "corpus_hashes": self._corpus_hashes(),
        }
        if extra_config:
            config.update(extra_config)
        params = {f"galaxy.{k}": v for k, v in model.parameters().items()}
        if extra_params:
            params.update(extra_params)
        save_checkpoint(self.checkpoint_path(stage), config, params)

        manifest = {
            "stage": stage,
            "seed": self.seed,
            "config": config | {"vocabularies": "(embedded in checkpoint)"},
            "result": result.to_dict(),
            "checkpoint": sha256_file(self.checkpoint_path(stage)),
        }
        (self.model_dir / f"run_{stage}.json").write_text(
            json.dumps(manifest, sort_keys=True, indent=1))

    def _corpus_hashes(self):
        out = {}
        for name in ("mam.jsonl", "clone.jsonl", "executables.jsonl", "vocab.json"):
            path = self.corpus_dir / name
            if path.exists():
                out[name] = sha256_file(path)
        return out

    def _write_metrics(self, stage, result):
        with open(self.model_dir / f"metrics_{stage}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss", "val_metric"])
            writer.writerows(result.metrics_rows())


def _vocab_from_config(config, key):
    from .galaxy import Vocabulary

    return Vocabulary({t: int(i) for t, i in config["vocabularies"][key].items()})
