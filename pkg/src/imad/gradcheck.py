"""Gradient verification by central finite differences."""

from __future__ import annotations

import numpy as np

from .tensor import GraphError, Tensor, no_grad


def grad_check(f, x: Tensor, h=1e-5):
    """Max relative error of analytic d f(x)/dx against central differences.

    ``f`` must map ``x`` to a scalar tensor by rebuilding its graph on every
    call (it may close over other tensors).  The relative error at each
    coordinate is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if h <= 0:
        raise ValueError("grad_check: step must be positive")
    x.grad = None
    out = f(x)
    if not isinstance(out, Tensor) or out.size != 1:
        raise GraphError("grad_check: f must return a scalar tensor")
    out.backward()
    if x.grad is None:
        analytic = np.zeros_like(x.data)
    else:
        analytic = x.grad.copy()
    x.grad = None

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f(x).item()
            flat[i] = orig - h
            lo = f(x).item()
            flat[i] = orig
            num_flat[i] = (hi - lo) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check_params(build_loss, params: dict[str, Tensor], h=1e-5):
    """Run ``grad_check`` against every named parameter; return name -> error.

    ``build_loss`` takes no arguments and rebuilds the scalar loss from the
    current parameter values.
    """
    return {
        name: grad_check(lambda _t, _b=build_loss: _b(), p, h=h)
        for name, p in params.items()
    }


def gradcheck_suite(seed=0, h=1e-5):
    """Finite-difference checks over every layer type, on small random inputs.

    Covers the star-plus satellite and relay sub-blocks, the masked-prediction
    head, the clone cosine loss, and the interpretable classifier; each is
    checked against its inputs and a representative parameter.  Returns
    component name -> max relative error.
    """
    from . import tensor as T
    from .attention import StarPlusLayer
    from .galaxy import (AssemblyFunction, BasicBlock, GalaxyConfig, GalaxyModel,
                         Instruction, Vocabulary)
    from .iffnn import IffnnModel
    from .tensor import Initializer

    rng = np.random.default_rng(seed)
    results = {}

    # width 12 keeps the toy model clear of fully-dead ReLU rows, which the
    # eps-stabilized layer norm would pin to exactly zero
    d, heads, d_ff, n = 12, 2, 16, 3
    layer = StarPlusLayer(d, heads, d_ff, Initializer(seed))
    hidden = Tensor(0.5 * rng.normal(size=(n, d)), requires_grad=True)
    relay = Tensor(0.5 * rng.normal(size=(1, d)), requires_grad=True)
    # fixed random readouts: a plain sum of a layer-norm output is identically
    # zero at unit gain, which would leave nothing for the check to measure
    readout_h = Tensor(rng.normal(size=(n, d)))
    readout_r = Tensor(rng.normal(size=(1, d)))

    def satellite_loss():
        return T.tsum(T.mul(layer.update_satellites(hidden, relay), readout_h))

    results["sptl_satellite/input"] = grad_check(lambda _x: satellite_loss(), hidden, h=h)
    results["sptl_satellite/wq"] = grad_check(
        lambda _x: satellite_loss(), layer.satellite_attn.wq, h=h)
    results["sptl_satellite/ffn_w1"] = grad_check(
        lambda _x: satellite_loss(), layer.ffn.w1, h=h)

    def relay_loss():
        return T.tsum(T.mul(layer.update_relay(relay, hidden)[0], readout_r))

    results["sptl_relay/input"] = grad_check(lambda _x: relay_loss(), hidden, h=h)
    results["sptl_relay/query"] = grad_check(lambda _x: relay_loss(), relay, h=h)
    results["sptl_relay/wk"] = grad_check(lambda _x: relay_loss(), layer.relay_attn.wk, h=h)

    opcode_vocab = Vocabulary.from_tokens(["opA", "opB", "opC"])
    operand_vocab = Vocabulary.from_tokens(["r0", "r1", "k0"])
    model = GalaxyModel(opcode_vocab, operand_vocab,
                        GalaxyConfig(d_model=12, n_heads=2, d_ff=16, block_layers=1,
                                     function_layers=1, executable_layers=1,
                                     mam_hidden_layers=1),
                        seed=seed)
    # touch every vocabulary row so no embedding row is left with an exactly
    # zero gradient (those rows would only measure finite-difference noise)
    v = len(opcode_vocab)
    block = BasicBlock(tuple(
        Instruction(i % v, i % v, (i + 1) % v) for i in range(v)))
    masked = block.masked(1)

    def mam_loss():
        return model.mam_loss(masked, 1, block.instructions[1])

    results["mam_head/embedding"] = grad_check(
        lambda _x: mam_loss(), model.opcode_embedding, h=h)
    results["mam_head/classifier_w"] = grad_check(
        lambda _x: mam_loss(), model.mam_head.classifiers[0][0][0], h=h)

    f1 = AssemblyFunction((block, block.masked(2)))
    f2 = AssemblyFunction((BasicBlock(tuple(
        Instruction((i + 3) % v, (i + 5) % v, i % v) for i in range(v))),))

    def clone_loss():
        return T.mse(model.clone_score(f1, f2), Tensor(1.0))

    results["clone_cosine/embedding"] = grad_check(
        lambda _x: clone_loss(), model.operand_embedding, h=h)
    results["clone_cosine/planet_wv"] = grad_check(
        lambda _x: clone_loss(), model.planet_star.layers[0].satellite_attn.wv, h=h)

    iffnn = IffnnModel(5, hidden_dims=[6, 6], seed=seed)
    x = Tensor(rng.normal(size=(1, 5)), requires_grad=True)

    def iffnn_loss():
        return T.bce_with_logits(iffnn.forward(x)[2], 1.0)

    results["iffnn/input"] = grad_check(lambda _x: iffnn_loss(), x, h=h)
    results["iffnn/w2"] = grad_check(lambda _x: iffnn_loss(), iffnn.w2, h=h)
    results["iffnn/hidden_w"] = grad_check(lambda _x: iffnn_loss(), iffnn.hidden[0][0], h=h)
    return results
