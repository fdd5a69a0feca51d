"""Plain 3D U-Net assembled directly from the kernel primitives.

Shares no wiring code with the model class, only the per-op kernels, so a
bitwise match isolates wiring mistakes from kernel rounding.
"""

import numpy as np

from nsanet.nn import ops


def primitive_unet(params, x, depth, eps=1e-5):
    def block(prefix, h):
        for i in (1, 2):
            w = params[f"{prefix}.conv{i}.w"]
            h, _ = ops.conv3d_forward(h, w, np.zeros(w.shape[0], dtype=h.dtype))
            state = {"running_mean": np.zeros(w.shape[0]), "running_var": np.ones(w.shape[0])}
            h, _ = ops.batchnorm_forward(h, params[f"{prefix}.bn{i}.gamma"],
                                         params[f"{prefix}.bn{i}.beta"], state, "train", eps)
            h, _ = ops.relu_forward(h)
        return h

    skips = []
    h = x
    for level in range(depth):
        if level:
            h, _ = ops.maxpool2_forward(h)
        h = block(f"enc{level}", h)
        skips.append(h)
    for level in range(depth - 2, -1, -1):
        up, _ = ops.upsample2_forward(h)
        h = block(f"dec{level}", np.concatenate([up, skips[level]], axis=1))
    logits, _ = ops.pointwise_conv_forward(h, params["head.w"], params["head.b"])
    return ops.softmax2_forward(logits)[0]


def parity_case(depth=3, base=4, edge=8, seed=0, batch=2):
    """NONE-variant model in f64 with perturbed norms, an 8^3 input, and its output."""
    from nsanet.model import ModelConfig, NSANet, Variant

    rng = np.random.default_rng(seed)
    net = NSANet(ModelConfig(depth=depth, base_channels=base, in_channels=2,
                             variant=Variant.NONE, seed=seed), dtype=np.float64)
    for k in net.params:
        if "bn" in k or k == "head.b":
            net.params[k] = net.params[k] + rng.normal(scale=0.2, size=net.params[k].shape)
    x = rng.normal(size=(batch, 2, edge, edge, edge))
    return net, x, net.forward(x, mode="train")
