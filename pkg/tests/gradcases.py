"""Finite-difference gradient cases for every kernel and the assembled model."""

import numpy as np

from nsanet.model import ModelConfig, NSANet, Variant
from nsanet.nn import gradcheck, ops
from nsanet.nn.losses import VOID, ce_loss, focal_loss, wce_loss


def _away_from_zero(rng, shape, gap=1e-2):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap, x)


def _distinct(rng, shape):
    """Values spaced >= 1e-3 apart so max-pool winners never swap under eps."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 1e-3 + rng.uniform(-0.2, 0.2)).reshape(shape)


def _linear_probe(forward, backward, inputs, out_shape, rng):
    r = rng.normal(size=out_shape)

    def fn():
        out, cache = forward()
        grads = backward(r, cache)
        return float(np.sum(out * r)), grads
    return fn


def conv_case(rng):
    x = rng.normal(size=(2, 3, 4, 4, 4))
    w = rng.normal(size=(2, 3, 3, 3, 3)) * 0.3
    b = rng.normal(size=2)
    inputs = {"x": x, "w": w, "b": b}
    fn = _linear_probe(lambda: ops.conv3d_forward(x, w, b),
                       lambda r, c: dict(zip(("x", "w", "b"), ops.conv3d_backward(r, c))),
                       inputs, (2, 2, 4, 4, 4), rng)
    return fn, inputs


def pointwise_case(rng):
    x = rng.normal(size=(2, 3, 2, 2, 2))
    w = rng.normal(size=(4, 3))
    b = rng.normal(size=4)
    inputs = {"x": x, "w": w, "b": b}
    fn = _linear_probe(lambda: ops.pointwise_conv_forward(x, w, b),
                       lambda r, c: dict(zip(("x", "w", "b"), ops.pointwise_conv_backward(r, c))),
                       inputs, (2, 4, 2, 2, 2), rng)
    return fn, inputs


def batchnorm_case(rng, mode="train"):
    x = rng.normal(size=(2, 3, 2, 3, 2)) * 2 + 1
    g = rng.uniform(0.5, 1.5, 3)
    b = rng.normal(size=3)
    state = {"running_mean": rng.normal(size=3), "running_var": rng.uniform(0.5, 2, 3)}
    frozen = {k: v.copy() for k, v in state.items()}
    inputs = {"x": x, "gamma": g, "beta": b}

    def forward():
        st = {k: v.copy() for k, v in frozen.items()}
        return ops.batchnorm_forward(x, g, b, st, mode)
    fn = _linear_probe(forward,
                       lambda r, c: dict(zip(("x", "gamma", "beta"), ops.batchnorm_backward(r, c))),
                       inputs, x.shape, rng)
    return fn, inputs


def relu_case(rng):
    x = _away_from_zero(rng, (2, 2, 2, 2, 2))
    inputs = {"x": x}
    fn = _linear_probe(lambda: ops.relu_forward(x),
                       lambda r, c: {"x": ops.relu_backward(r, c)}, inputs, x.shape, rng)
    return fn, inputs


def sigmoid_case(rng):
    x = rng.normal(size=(2, 1, 2, 2, 2)) * 3
    inputs = {"x": x}
    fn = _linear_probe(lambda: ops.sigmoid_forward(x),
                       lambda r, c: {"x": ops.sigmoid_backward(r, c)}, inputs, x.shape, rng)
    return fn, inputs


def softmax_case(rng):
    x = rng.normal(size=(2, 2, 2, 2, 2)) * 2
    inputs = {"x": x}
    fn = _linear_probe(lambda: ops.softmax2_forward(x),
                       lambda r, c: {"x": ops.softmax2_backward(r, c)}, inputs, x.shape, rng)
    return fn, inputs


def maxpool_case(rng):
    x = _distinct(rng, (2, 2, 4, 4, 4))
    inputs = {"x": x}
    fn = _linear_probe(lambda: ops.maxpool2_forward(x),
                       lambda r, c: {"x": ops.maxpool2_backward(r, c)}, inputs, (2, 2, 2, 2, 2), rng)
    return fn, inputs


def upsample_case(rng):
    x = rng.normal(size=(1, 2, 2, 3, 2))
    inputs = {"x": x}
    fn = _linear_probe(lambda: ops.upsample2_forward(x),
                       lambda r, c: {"x": ops.upsample2_backward(r, c)}, inputs, (1, 2, 4, 6, 4), rng)
    return fn, inputs


def _loss_case(rng, loss):
    z = rng.normal(size=(2, 2, 2, 2, 3))
    target = rng.integers(0, 2, size=(2, 2, 2, 3))
    target[0, 0, 0, 0] = VOID
    inputs = {"logits": z}

    def fn():
        p, cache = ops.softmax2_forward(z)
        value, dp = loss(p, target)
        return value, {"logits": ops.softmax2_backward(dp, cache)}
    return fn, inputs


def wce_case(rng):
    return _loss_case(rng, lambda p, t: wce_loss(p, t, (1.0, 7.5)))


def ce_case(rng):
    return _loss_case(rng, ce_loss)


def focal_case(rng):
    return _loss_case(rng, lambda p, t: focal_loss(p, t, gamma=2.0))


OP_CASES = {
    "conv3d": conv_case, "pointwise_conv": pointwise_case, "batchnorm_train": batchnorm_case,
    "batchnorm_eval": lambda rng: batchnorm_case(rng, "eval"), "relu": relu_case,
    "sigmoid": sigmoid_case, "softmax2": softmax_case, "maxpool2": maxpool_case,
    "upsample2": upsample_case, "wce": wce_case, "ce": ce_case, "focal": focal_case,
}


def op_reports(seed=0):
    out = {}
    for name, case in OP_CASES.items():
        fn, inputs = case(np.random.default_rng(seed))
        out[name] = gradcheck(fn, inputs)
    return out


def gate_case(rng):
    from nsanet.model import AttentionGate

    class Host:
        dtype = np.float64

        def __init__(self):
            self.params, self.grads = {}, {}
            self._rng = rng

        new_param = NSANet.new_param

    host = Host()
    gate = AttentionGate(host, "g", c_x=3, c_g=4, c_int=2)
    x = rng.normal(size=(2, 3, 2, 2, 2))
    g = rng.normal(size=(2, 4, 2, 2, 2))
    r = rng.normal(size=(2, 1, 2, 2, 2))
    inputs = {"x": x, "g": g, **host.params}

    def fn():
        host.grads = {}
        alpha = gate.forward(x, g)
        dx, dg = gate.backward(r)
        return float(np.sum(alpha * r)), {"x": dx, "g": dg, **host.grads}
    return fn, inputs


def model_case(variant=Variant.AET, depth=2, base=4, edge=8, seed=0, **kw):
    """Depth-``depth`` model on a 1 x 2 x edge^3 input with WCE on random targets."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(depth=depth, base_channels=base, in_channels=2, variant=variant,
                      seed=seed, **kw)
    net = NSANet(cfg, dtype=np.float64)
    for k in net.params:
        if k.endswith(("gamma", "beta", ".bx", "psi.b", "head.b")):
            net.params[k] = net.params[k] + rng.normal(scale=0.1, size=net.params[k].shape)
    x = rng.normal(size=(1, 2, edge, edge, edge))
    priors = [rng.uniform(0, 1, size=(1, 1) + (edge // 2 ** l,) * 3) for l in range(depth)]
    target = rng.integers(0, 2, size=(1, edge, edge, edge))
    inputs = {"input": x, **net.params}

    def fn():
        probs = net.forward(x, priors, mode="train")
        loss, dprobs = wce_loss(probs, target, (1.0, 3.0))
        dx = net.backward(dprobs)
        return loss, {"input": dx, **net.grads}
    return fn, inputs, net


def model_report(variant=Variant.AET, max_checks=25, seed=0, **kw):
    fn, inputs, _ = model_case(variant, seed=seed, **kw)
    return gradcheck(fn, inputs, max_checks=max_checks, seed=seed)
