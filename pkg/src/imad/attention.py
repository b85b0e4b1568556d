"""Multi-head attention and star-topology transformer layers.

A star layer updates each sequence item ("satellite") from a tiny context --
its two neighbors, itself, and a shared relay node -- and then updates the
relay by attending over the whole updated sequence.  Satellite work is
constant per item and the relay pass is one attention over n rows, so a layer
costs O(n) instead of the O(n^2) of all-pairs attention.

Two variants are provided: the plain star layer (context includes the raw
input embedding, no feed-forward sub-block) and the star-plus layer (drops
the embedding from the context, adds a pointwise feed-forward sub-block after
each attention).  The star-plus variant is the default everywhere; the plain
one is kept for ablations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


def positional_encoding(position, d_model):
    """Sinusoidal position vector: even slots sin(i / 10000^(2k/d)), odd slots cos."""
    if position < 0:
        raise ValueError("position must be nonnegative")
    pe = np.zeros(d_model)
    half = (d_model + 1) // 2
    k = np.arange(half)
    angle = position / np.power(10000.0, 2.0 * k / d_model)
    pe[0::2] = np.sin(angle)
    pe[1::2] = np.cos(angle[: d_model // 2])
    return pe


def positional_encoding_matrix(n, d_model):
    return np.stack([positional_encoding(i, d_model) for i in range(n)])


class LayerNorm:
    """Learnable affine layer normalization over the last axis (eps 1e-5)."""

    def __init__(self, d_model, init, affine=True):
        if affine:
            self.gain = init.ones((d_model,))
            self.bias = init.zeros((d_model,))
        else:
            self.gain = Tensor(np.ones(d_model))
            self.bias = Tensor(np.zeros(d_model))
        self.affine = affine

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias)

    def parameters(self, prefix=""):
        if not self.affine:
            return {}
        return {prefix + "gain": self.gain, prefix + "bias": self.bias}


class FeedForward:
    """Pointwise two-layer network: relu(x W1 + b1) W2 + b2."""

    def __init__(self, d_model, d_ff, init):
        self.w1 = init.matrix(d_model, d_ff)
        self.b1 = init.zeros((d_ff,))
        self.w2 = init.matrix(d_ff, d_model)
        self.b2 = init.zeros((d_model,))

    def __call__(self, x):
        hidden = T.relu(T.add(T.matmul(x, self.w1), self.b1))
        return T.add(T.matmul(hidden, self.w2), self.b2)

    def parameters(self, prefix=""):
        return {prefix + "w1": self.w1, prefix + "b1": self.b1,
                prefix + "w2": self.w2, prefix + "b2": self.b2}


def _shift_rows(mat, boundary):
    """(previous, next) row-shifted copies with zero or ring boundary rows.

    Shifting commutes with the row-wise linear projections applied before it,
    which is what lets neighbor keys/values reuse one projection pass.
    """
    n, d = mat.shape
    if n == 1:
        if boundary == "ring":
            return mat, mat
        zero = Tensor(np.zeros((1, d)))
        return zero, zero
    body_prev = T.narrow(mat, 0, 0, n - 1)
    body_next = T.narrow(mat, 0, 1, n - 1)
    if boundary == "ring":
        first = T.narrow(mat, 0, 0, 1)
        last = T.narrow(mat, 0, n - 1, 1)
        return T.concat([last, body_prev], axis=0), T.concat([body_next, first], axis=0)
    zero = Tensor(np.zeros((1, d)))
    return T.concat([zero, body_prev], axis=0), T.concat([body_next, zero], axis=0)


class MultiHeadAttention:
    """Multi-head scaled dot-product attention.

    Head i's query/key/value projections are d_model x d_k matrices, stored
    side by side as column blocks of one fused matrix (``head_weights`` gives
    the per-head views); the concatenated heads pass through an output
    projection.  ``scale`` selects the softmax temperature: "d_model" divides
    scores by sqrt(d_model), "d_k" by sqrt(d_k).
    """

    def __init__(self, d_model, n_heads, init, scale="d_model"):
        if d_model % n_heads != 0:
            raise ValueError(f"head count {n_heads} must divide d_model {d_model}")
        if scale not in ("d_model", "d_k"):
            raise ValueError(f"unknown scale variant {scale!r}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_k = d_model // n_heads
        self._inv_scale = 1.0 / math.sqrt(d_model if scale == "d_model" else self.d_k)

        def fused():
            blocks = [init.matrix(d_model, self.d_k).data for _ in range(n_heads)]
            return Tensor(np.hstack(blocks), requires_grad=True)

        self.wq = fused()
        self.wk = fused()
        self.wv = fused()
        self.wo = init.matrix(n_heads * self.d_k, d_model)

    def head_weights(self, i):
        """Per-head (W_i^Q, W_i^K, W_i^V) views of the fused matrices."""
        sl = slice(i * self.d_k, (i + 1) * self.d_k)
        return self.wq.data[:, sl], self.wk.data[:, sl], self.wv.data[:, sl]

    def _split_heads(self, x):
        return T.split(x, [self.d_k] * self.n_heads, axis=1)

    def __call__(self, q, attended):
        """Attend ``q`` (1 x d_model) over ``attended`` (n x d_model).

        Returns the attended output row and the per-head softmax weights as an
        (n_heads x n) tensor, exposed so callers can rank attended items.
        """
        if q.shape[-1] != self.d_model or attended.shape[-1] != self.d_model:
            raise T.ShapeError(
                f"attention: widths {q.shape[-1]}/{attended.shape[-1]} != d_model {self.d_model}"
            )
        qh = self._split_heads(T.matmul(q, self.wq))
        kh = self._split_heads(T.matmul(attended, self.wk))
        vh = self._split_heads(T.matmul(attended, self.wv))
        scores = [T.matmul(qh[i], T.transpose(kh[i])) for i in range(self.n_heads)]
        weights = T.softmax(T.scale(T.concat(scores, axis=0), self._inv_scale), axis=-1)
        weight_rows = T.split(weights, [1] * self.n_heads, axis=0)
        heads = [T.matmul(weight_rows[i], vh[i]) for i in range(self.n_heads)]
        return T.matmul(T.concat(heads, axis=1), self.wo), weights

    def attend_neighborhood(self, hidden, aligned=(), rows=(), boundary="zero"):
        """Row-parallel attention of every item over its own local context.

        Item i (query: ``hidden`` row i) attends over the slots
        [h_{i-1}, h_i, h_{i+1}, *aligned_i, *rows]: ``aligned`` matrices
        contribute their row i, ``rows`` are single (1 x d_model) context
        items shared by all queries.  Equivalent to calling the attention
        per item over its stacked context matrix, at O(n) total cost.
        """
        n = hidden.shape[0]
        qh = self._split_heads(T.matmul(hidden, self.wq))
        k_self = T.matmul(hidden, self.wk)
        v_self = T.matmul(hidden, self.wv)
        k_prev, k_next = _shift_rows(k_self, boundary)
        v_prev, v_next = _shift_rows(v_self, boundary)
        slot_k = [k_prev, k_self, k_next] + [T.matmul(a, self.wk) for a in aligned] \
            + [T.matmul(r, self.wk) for r in rows]
        slot_v = [v_prev, v_self, v_next] + [T.matmul(a, self.wv) for a in aligned] \
            + [T.matmul(r, self.wv) for r in rows]
        n_aligned_slots = 3 + len(aligned)

        heads = []
        for i in range(self.n_heads):
            sl = slice(i * self.d_k, (i + 1) * self.d_k)
            cols = []
            for c, k in enumerate(slot_k):
                k_i = T.narrow(k, 1, i * self.d_k, self.d_k)
                if c < n_aligned_slots:
                    cols.append(T.tsum(T.mul(qh[i], k_i), axis=1, keepdims=True))
                else:
                    cols.append(T.matmul(qh[i], T.transpose(k_i)))
            weights = T.softmax(T.scale(T.concat(cols, axis=1), self._inv_scale), axis=-1)
            mixed = None
            for c, v in enumerate(slot_v):
                v_i = T.narrow(v, 1, i * self.d_k, self.d_k)
                contrib = T.mul(T.narrow(weights, 1, c, 1), v_i)
                mixed = contrib if mixed is None else T.add(mixed, contrib)
            heads.append(mixed)
        return T.matmul(T.concat(heads, axis=1), self.wo)

    def parameters(self, prefix=""):
        return {prefix + "wq": self.wq, prefix + "wk": self.wk,
                prefix + "wv": self.wv, prefix + "wo": self.wo}


@dataclass
class SequenceState:
    """Hidden states flowing through a star-layer stack."""

    hidden: Tensor            # n x d_model satellite states
    relay: Tensor             # 1 x d_model relay state
    embeddings: Tensor | None = None  # retained only by the plain star variant


class StarPlusLayer:
    """One star-plus layer: satellite update then relay update.

    Satellite i attends (with its previous state as query) over the context
    [h_{i-1}; h_i; h_{i+1}; s], then passes through ReLU, layer norm, the
    shared pointwise feed-forward block, ReLU, and a second layer norm.  The
    relay attends over the updated sequence and runs the same feed-forward
    sub-block with its own layer norms.
    """

    context_slots = 4

    def __init__(self, d_model, n_heads, d_ff, init, scale="d_model", boundary="zero",
                 affine_norm=True):
        if boundary not in ("zero", "ring"):
            raise ValueError(f"unknown boundary mode {boundary!r}")
        self.d_model = d_model
        self.boundary = boundary
        self.satellite_attn = MultiHeadAttention(d_model, n_heads, init, scale=scale)
        self.relay_attn = MultiHeadAttention(d_model, n_heads, init, scale=scale)
        self.ffn = FeedForward(d_model, d_ff, init)
        self.norm_sat_attn = LayerNorm(d_model, init, affine=affine_norm)
        self.norm_sat_ffn = LayerNorm(d_model, init, affine=affine_norm)
        self.norm_relay_attn = LayerNorm(d_model, init, affine=affine_norm)
        self.norm_relay_ffn = LayerNorm(d_model, init, affine=affine_norm)

    def context_for(self, state: SequenceState, i):
        """Context matrix of satellite i (boundary rows are zeros or ring wraps)."""
        prev_mat, next_mat = _shift_rows(state.hidden, self.boundary)
        return T.concat(
            [
                T.narrow(prev_mat, 0, i, 1),
                T.narrow(state.hidden, 0, i, 1),
                T.narrow(next_mat, 0, i, 1),
                state.relay,
            ],
            axis=0,
        )

    def update_satellites(self, hidden, relay):
        attended = self.satellite_attn.attend_neighborhood(
            hidden, rows=[relay], boundary=self.boundary)
        normed = self.norm_sat_attn(T.relu(attended))
        return self.norm_sat_ffn(T.relu(self.ffn(normed)))

    def update_relay(self, relay, hidden_new):
        attended, weights = self.relay_attn(relay, hidden_new)
        normed = self.norm_relay_attn(T.relu(attended))
        return self.norm_relay_ffn(T.relu(self.ffn(normed))), weights

    def __call__(self, state: SequenceState):
        hidden_new = self.update_satellites(state.hidden, state.relay)
        relay_new, weights = self.update_relay(state.relay, hidden_new)
        return SequenceState(hidden_new, relay_new, state.embeddings), weights

    def parameters(self, prefix=""):
        out = {}
        out.update(self.satellite_attn.parameters(prefix + "sat_attn."))
        out.update(self.relay_attn.parameters(prefix + "relay_attn."))
        out.update(self.ffn.parameters(prefix + "ffn."))
        out.update(self.norm_sat_attn.parameters(prefix + "norm_sat_attn."))
        out.update(self.norm_sat_ffn.parameters(prefix + "norm_sat_ffn."))
        out.update(self.norm_relay_attn.parameters(prefix + "norm_relay_attn."))
        out.update(self.norm_relay_ffn.parameters(prefix + "norm_relay_ffn."))
        return out


class StarLayer:
    """Plain star layer: context keeps the raw embedding, no feed-forward block."""

    context_slots = 5

    def __init__(self, d_model, n_heads, init, scale="d_model", boundary="zero",
                 affine_norm=True):
        if boundary not in ("zero", "ring"):
            raise ValueError(f"unknown boundary mode {boundary!r}")
        self.d_model = d_model
        self.boundary = boundary
        self.satellite_attn = MultiHeadAttention(d_model, n_heads, init, scale=scale)
        self.relay_attn = MultiHeadAttention(d_model, n_heads, init, scale=scale)
        self.norm_sat = LayerNorm(d_model, init, affine=affine_norm)
        self.norm_relay = LayerNorm(d_model, init, affine=affine_norm)

    def context_for(self, state: SequenceState, i):
        """Context matrix [prev; self; next; embedding; relay] of satellite i."""
        prev_mat, next_mat = _shift_rows(state.hidden, self.boundary)
        return T.concat(
            [
                T.narrow(prev_mat, 0, i, 1),
                T.narrow(state.hidden, 0, i, 1),
                T.narrow(next_mat, 0, i, 1),
                T.narrow(state.embeddings, 0, i, 1),
                state.relay,
            ],
            axis=0,
        )

    def __call__(self, state: SequenceState):
        if state.embeddings is None:
            raise ValueError("star layer requires the embedding matrix in the state")
        attended = self.satellite_attn.attend_neighborhood(
            state.hidden, aligned=[state.embeddings], rows=[state.relay],
            boundary=self.boundary)
        hidden_new = self.norm_sat(T.relu(attended))
        relay_att, weights = self.relay_attn(state.relay, hidden_new)
        relay_new = self.norm_relay(T.relu(relay_att))
        return SequenceState(hidden_new, relay_new, state.embeddings), weights

    def parameters(self, prefix=""):
        out = {}
        out.update(self.satellite_attn.parameters(prefix + "sat_attn."))
        out.update(self.relay_attn.parameters(prefix + "relay_attn."))
        out.update(self.norm_sat.parameters(prefix + "norm_sat."))
        out.update(self.norm_relay.parameters(prefix + "norm_relay."))
        return out


@dataclass
class EncoderOutput:
    relay: Tensor           # 1 x d_model sequence representation
    hidden: Tensor          # n x d_model per-item outputs
    relay_weights: Tensor   # top-layer relay attention, n_heads x n


class StarPlusEncoder:
    """A stack of star(-plus) layers reducing a sequence to its relay vector.

    The relay starts as the mean of the input rows; after T layers the relay
    state is the sequence representation.  The top layer's relay attention
    weights are returned for attribution.
    """

    def __init__(self, d_model, n_heads, d_ff, n_layers, init, variant="star_plus",
                 scale="d_model", boundary="zero", affine_norm=True):
        if n_layers < 1:
            raise ValueError("encoder needs at least one layer")
        self.d_model = d_model
        self.variant = variant
        if variant == "star_plus":
            self.layers = [
                StarPlusLayer(d_model, n_heads, d_ff, init, scale=scale,
                              boundary=boundary, affine_norm=affine_norm)
                for _ in range(n_layers)
            ]
        elif variant == "star":
            self.layers = [
                StarLayer(d_model, n_heads, init, scale=scale,
                          boundary=boundary, affine_norm=affine_norm)
                for _ in range(n_layers)
            ]
        else:
            raise ValueError(f"unknown layer variant {variant!r}")

    def __call__(self, inputs: Tensor) -> EncoderOutput:
        if inputs.shape[0] < 1:
            raise ValueError("cannot encode an empty sequence")
        relay = T.tmean(inputs, axis=0, keepdims=True)
        state = SequenceState(
            hidden=inputs,
            relay=relay,
            embeddings=inputs if self.variant == "star" else None,
        )
        weights = None
        for layer in self.layers:
            state, weights = layer(state)
        return EncoderOutput(relay=state.relay, hidden=state.hidden, relay_weights=weights)

    def parameters(self, prefix=""):
        out = {}
        for idx, layer in enumerate(self.layers):
            out.update(layer.parameters(f"{prefix}layer{idx}."))
        return out
