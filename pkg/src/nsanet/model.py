"""Dual-attention 3D encoder-decoder and its ablation variants.

Variant wiring:

* ``AET``    gates only in the decoder: local additive gate on each skip,
             then global prior scaling of the fused features.
* ``FIT_V1`` adds a local gate to every encoder block.
* ``FIT_V2`` adds local gate and global prior scaling to every encoder block.
* ``NONE``   plain 3D U-Net, no gates and no prior.

Level ``l`` runs at spatial edge ``edge / 2**l`` with ``base_channels * 2**l``
feature channels.
"""

from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from .nn import ops


class Variant(str, Enum):
    AET = "AET"
    FIT_V1 = "FIT_V1"
    FIT_V2 = "FIT_V2"
    NONE = "NONE"


@dataclass
class ModelConfig:
    depth: int = 4
    base_channels: int = 32
    in_channels: int = 2
    out_classes: int = 2
    variant: Variant = Variant.AET
    use_prior: bool = True
    prior_gating: str = "affine"   # affine: x * (1 + P); raw: x * P
    skip_gating: str = "mul"       # mul: alpha * E; sum: E + alpha
    seed: int = 0

    def __post_init__(self):
        self.variant = Variant(self.variant)
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.out_classes != 2:
            raise ValueError("only two-class output is supported")
        if self.prior_gating not in ("affine", "raw"):
            raise ValueError(f"prior_gating must be affine or raw, got {self.prior_gating!r}")
        if self.skip_gating not in ("mul", "sum"):
            raise ValueError(f"skip_gating must be mul or sum, got {self.skip_gating!r}")

    def channels(self, level):
        return self.base_channels * 2 ** level

    def check_edge(self, edge):
        if edge % 2 ** (self.depth - 1):
            raise ValueError(
                f"grid edge {edge} not divisible by 2**(depth-1) = {2 ** (self.depth - 1)}")

    @property
    def encoder_gates(self):
        return self.variant in (Variant.FIT_V1, Variant.FIT_V2)

    @property
    def encoder_prior(self):
        return self.use_prior and self.variant is Variant.FIT_V2

    @property
    def decoder_gates(self):
        return self.variant is not Variant.NONE

    @property
    def decoder_prior(self):
        return self.use_prior and self.variant in (Variant.AET, Variant.FIT_V2)

    def to_text(self):
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, Variant):
                value = value.value
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        kwargs = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = (s.strip() for s in line.partition("="))
            kwargs[key] = value
        types = {"depth": int, "base_channels": int, "in_channels": int,
                 "out_classes": int, "seed": int,
                 "use_prior": lambda v: v.lower() in ("1", "true", "yes")}
        for key, conv in types.items():
            if key in kwargs:
                kwargs[key] = conv(kwargs[key])
        return cls(**kwargs)


def prior_scale(prior, mode):
    return 1.0 + prior if mode == "affine" else prior


class _Layer:
    def __init__(self, net, prefix):
        self.net = net
        self.prefix = prefix

    def p(self, name):
        return self.net.params[f"{self.prefix}.{name}"]

    def add_grad(self, name, g):
        key = f"{self.prefix}.{name}"
        grads = self.net.grads
        if key in grads:
            grads[key] = grads[key] + g
        else:
            grads[key] = g


class DoubleConv(_Layer):
    """(conv3x3x3 -> batchnorm -> relu) x 2."""

    def __init__(self, net, prefix, c_in, c_out):
        super().__init__(net, prefix)
        for i, ci in ((1, c_in), (2, c_out)):
            net.new_param(f"{prefix}.conv{i}.w", (c_out, ci, 3, 3, 3), fan_in=ci * 27)
            net.new_param(f"{prefix}.bn{i}.gamma", (c_out,), init="ones")
            net.new_param(f"{prefix}.bn{i}.beta", (c_out,), init="zeros")
            net.new_bn_state(f"{prefix}.bn{i}", c_out)
        self.c_out = c_out

    @property
    def _zero(self):
        return np.zeros(self.c_out, dtype=self.net.dtype)

    def forward(self, x, mode):
        self.caches = []
        for i in (1, 2):
            # no conv bias: the following batchnorm cancels it
            x, c_conv = ops.conv3d_forward(x, self.p(f"conv{i}.w"), self._zero)
            x, c_bn = ops.batchnorm_forward(
                x, self.p(f"bn{i}.gamma"), self.p(f"bn{i}.beta"),
                self.net.bn_state[f"{self.prefix}.bn{i}"], mode)
            x, c_relu = ops.relu_forward(x)
            self.caches.append((c_conv, c_bn, c_relu))
        return x

    def backward(self, dout):
        for i in (2, 1):
            c_conv, c_bn, c_relu = self.caches[i - 1]
            dout = ops.relu_backward(dout, c_relu)
            dout, dgamma, dbeta = ops.batchnorm_backward(dout, c_bn)
            self.add_grad(f"bn{i}.gamma", dgamma)
            self.add_grad(f"bn{i}.beta", dbeta)
            dout, dw, _ = ops.conv3d_backward(dout, c_conv)
            self.add_grad(f"conv{i}.w", dw)
        self.caches = None
        return dout


class AttentionGate(_Layer):
    """Additive gate: ``alpha = sigmoid(psi(relu(W_x x + W_g g)))``, one channel."""

    def __init__(self, net, prefix, c_x, c_g, c_int=None):
        super().__init__(net, prefix)
        c_int = c_int or max(1, c_x // 2)
        net.new_param(f"{prefix}.wx", (c_int, c_x), fan_in=c_x)
        net.new_param(f"{prefix}.bx", (c_int,), init="zeros")
        net.new_param(f"{prefix}.wg", (c_int, c_g), fan_in=c_g)
        net.new_param(f"{prefix}.psi.w", (1, c_int), fan_in=c_int)
        net.new_param(f"{prefix}.psi.b", (1,), init="zeros")

    def forward(self, x, g):
        if x.shape[2:] != g.shape[2:]:
            raise ValueError(f"gate resolution mismatch: x {x.shape[2:]} vs g {g.shape[2:]}")
        theta_x, c_x = ops.pointwise_conv_forward(x, self.p("wx"), self.p("bx"))
        zero = np.zeros(self.p("wg").shape[0], dtype=x.dtype)
        theta_g, c_g = ops.pointwise_conv_forward(g, self.p("wg"), zero)
        act, c_relu = ops.relu_forward(theta_x + theta_g)
        logit, c_psi = ops.pointwise_conv_forward(act, self.p("psi.w"), self.p("psi.b"))
        alpha, c_sig = ops.sigmoid_forward(logit)
        self.cache = (c_x, c_g, c_relu, c_psi, c_sig)
        return alpha

    def backward(self, dalpha):
        c_x, c_g, c_relu, c_psi, c_sig = self.cache
        d = ops.sigmoid_backward(dalpha, c_sig)
        d, dw, db = ops.pointwise_conv_backward(d, c_psi)
        self.add_grad("psi.w", dw)
        self.add_grad("psi.b", db)
        d = ops.relu_backward(d, c_relu)
        dx, dw, db = ops.pointwise_conv_backward(d, c_x)
        self.add_grad("wx", dw)
        self.add_grad("bx", db)
        dg, dw, _ = ops.pointwise_conv_backward(d, c_g)
        self.add_grad("wg", dw)
        self.cache = None
        return dx, dg


def gate_combine(features, alpha, mode):
    return features * alpha if mode == "mul" else features + alpha


def gate_combine_backward(dout, features, alpha, mode):
    if mode == "mul":
        return dout * alpha, (dout * features).sum(axis=1, keepdims=True)
    return dout, dout.sum(axis=1, keepdims=True)


class NSANet:
    """Functional network: explicit ``forward`` then ``backward`` into ``self.grads``."""

    def __init__(self, cfg, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params = {}
        self.bn_state = {}
        self.grads = {}
        self._rng = np.random.default_rng(cfg.seed)
        c = cfg.channels
        self.enc = []
        self.enc_gates = []
        for level in range(cfg.depth):
            c_in = cfg.in_channels if level == 0 else c(level - 1)
            self.enc.append(DoubleConv(self, f"enc{level}", c_in, c(level)))
            if cfg.encoder_gates:
                self.enc_gates.append(AttentionGate(self, f"enc{level}.gate", c(level), c_in))
        self.dec = {}
        self.dec_gates = {}
        for level in range(cfg.depth - 2, -1, -1):
            if cfg.decoder_gates:
                self.dec_gates[level] = AttentionGate(
                    self, f"dec{level}.gate", c(level), c(level + 1))
            self.dec[level] = DoubleConv(self, f"dec{level}", c(level + 1) + c(level), c(level))
        self.new_param("head.w", (cfg.out_classes, c(0)), fan_in=c(0))
        self.new_param("head.b", (cfg.out_classes,), init="zeros")
        self._rng = None

    def new_param(self, name, shape, init="he", fan_in=None):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        if init == "he":
            arr = self._rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        elif init == "zeros":
            arr = np.zeros(shape)
        else:
            arr = np.ones(shape)
        self.params[name] = arr.astype(self.dtype)

    def new_bn_state(self, name, channels):
        self.bn_state[name] = {"running_mean": np.zeros(channels, dtype=self.dtype),
                               "running_var": np.ones(channels, dtype=self.dtype)}

    def astype(self, dtype):
        self.dtype = np.dtype(dtype)
        for k in self.params:
            self.params[k] = self.params[k].astype(self.dtype)
        for st in self.bn_state.values():
            for key in st:
                st[key] = st[key].astype(self.dtype)
        return self

    def state_tensors(self):
        """Parameters and running statistics as one flat name -> array dict."""
        out = dict(self.params)
        for name, st in self.bn_state.items():
            out[f"{name}.running_mean"] = st["running_mean"]
            out[f"{name}.running_var"] = st["running_var"]
        return out

    def load_state_tensors(self, tensors):
        for name in self.params:
            if name not in tensors:
                raise KeyError(f"checkpoint missing tensor {name}")
            if tensors[name].shape != self.params[name].shape:
                raise ValueError(f"shape mismatch for {name}: "
                                 f"{tensors[name].shape} vs {self.params[name].shape}")
            self.params[name] = np.asarray(tensors[name], dtype=self.dtype).copy()
        for name, st in self.bn_state.items():
            for key in ("running_mean", "running_var"):
                st[key] = np.asarray(tensors[f"{name}.{key}"], dtype=self.dtype).copy()

    def _check_inputs(self, x, priors):
        cfg = self.cfg
        if x.ndim != 5 or x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected input (B, {cfg.in_channels}, D, H, W), got {x.shape}")
        for edge in x.shape[2:]:
            cfg.check_edge(edge)
        needs_prior = cfg.encoder_prior or cfg.decoder_prior
        if needs_prior:
            if priors is None or len(priors) < cfg.depth:
                raise ValueError(f"variant {cfg.variant.value} needs a {cfg.depth}-level prior pyramid")
            for level in range(cfg.depth):
                want = (x.shape[0], 1) + tuple(n // 2 ** level for n in x.shape[2:])
                if priors[level].shape != want:
                    raise ValueError(f"prior level {level} has shape {priors[level].shape}, "
                                     f"expected {want}")

    def forward(self, x, priors=None, mode="train"):
        """Return class probabilities (B, 2, D, H, W).

        Args:
            x: input features (B, C_in, D, H, W).
            priors: list of per-level prior maps, level ``l`` shaped
                (B, 1, D/2**l, H/2**l, W/2**l); required for prior-using variants.
            mode: ``train`` (batch statistics) or ``eval`` (running statistics).
        """
        cfg = self.cfg
        self._check_inputs(x, priors)
        x = x.astype(self.dtype, copy=False)
        scales = None
        if priors is not None and (cfg.encoder_prior or cfg.decoder_prior):
            scales = [prior_scale(p.astype(self.dtype, copy=False), cfg.prior_gating)
                      for p in priors[:cfg.depth]]
        tape = {"scales": scales, "enc": [], "dec": {}}
        feats = []
        h = x
        for level in range(cfg.depth):
            pool_cache = None
            if level > 0:
                h, pool_cache = ops.maxpool2_forward(h)
            inp = h
            h = self.enc[level].forward(inp, mode)
            rec = {"pool": pool_cache}
            if cfg.encoder_gates:
                alpha = self.enc_gates[level].forward(h, inp)
                rec["gate"] = (h, alpha)
                h = gate_combine(h, alpha, cfg.skip_gating)
            if cfg.encoder_prior:
                h = h * scales[level]
            tape["enc"].append(rec)
            feats.append(h)
        d = feats[-1]
        for level in range(cfg.depth - 2, -1, -1):
            up, up_cache = ops.upsample2_forward(d)
            skip = feats[level]
            rec = {"up": up_cache, "c_up": up.shape[1]}
            if cfg.decoder_gates:
                alpha = self.dec_gates[level].forward(skip, up)
                rec["gate"] = (skip, alpha)
                skip = gate_combine(skip, alpha, cfg.skip_gating)
            fused = np.concatenate([up, skip], axis=1)
            if cfg.decoder_prior:
                fused = fused * scales[level]
            d = self.dec[level].forward(fused, mode)
            tape["dec"][level] = rec
        logits, head_cache = ops.pointwise_conv_forward(d, self.params["head.w"], self.params["head.b"])
        probs, sm_cache = ops.softmax2_forward(logits)
        tape["head"] = head_cache
        tape["softmax"] = sm_cache
        self._tape = tape
        return probs

    def backward(self, dprobs):
        """Accumulate parameter gradients into ``self.grads``; return input gradient."""
        cfg = self.cfg
        tape = self._tape
        scales = tape["scales"]
        self.grads = {}
        d = ops.softmax2_backward(dprobs, tape["softmax"])
        d, dw, db = ops.pointwise_conv_backward(d, tape["head"])
        self.grads["head.w"] = dw
        self.grads["head.b"] = db
        dfeats = [None] * cfg.depth
        # decoder runs from the finest level back up to the bottleneck
        for level in range(0, cfg.depth - 1):
            rec = tape["dec"][level]
            d = self.dec[level].backward(d)
            if cfg.decoder_prior:
                d = d * scales[level]
            c_up = rec["c_up"]
            dup, dskip = d[:, :c_up], d[:, c_up:]
            if cfg.decoder_gates:
                skip, alpha = rec["gate"]
                dskip, dalpha = gate_combine_backward(dskip, skip, alpha, cfg.skip_gating)
                dx, dg = self.dec_gates[level].backward(dalpha)
                dskip = dskip + dx
                dup = dup + dg
            dfeats[level] = dskip
            d = ops.upsample2_backward(dup, rec["up"])
        dfeats[cfg.depth - 1] = d
        dh = None
        for level in range(cfg.depth - 1, -1, -1):
            dh = dfeats[level] if dh is None else dh + dfeats[level]
            rec = tape["enc"][level]
            if cfg.encoder_prior:
                dh = dh * scales[level]
            dinp_gate = None
            if cfg.encoder_gates:
                h, alpha = rec["gate"]
                dh, dalpha = gate_combine_backward(dh, h, alpha, cfg.skip_gating)
                dx, dinp_gate = self.enc_gates[level].backward(dalpha)
                dh = dh + dx
            dh = self.enc[level].backward(dh)
            if dinp_gate is not None:
                dh = dh + dinp_gate
            if rec["pool"] is not None:
                dh = ops.maxpool2_backward(dh, rec["pool"])
        self._tape = None
        return dh


def predict(probs):
    """Hard labels from (B, 2, ...) scores; exact ties go to noise (1)."""
    return (probs[:, 1] >= probs[:, 0]).astype(np.int8)
