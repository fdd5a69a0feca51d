"""Voxel classification losses over softmax probabilities.

All losses take ``probs`` of shape (B, 2, D, H, W) and an integer ``target``
of shape (B, D, H, W) holding 0, 1, or ``VOID``.  Void voxels contribute
neither loss nor gradient.  Each returns ``(loss, dprobs)``.
"""

import numpy as np

VOID = -1
_PROB_FLOOR = 1e-12


def _gather(probs, target):
    valid = target != VOID
    count = int(valid.sum())
    if count == 0:
        raise ValueError("target has no labelled voxels (all void)")
    t = np.where(valid, target, 0).astype(np.intp)
    p_t = np.take_along_axis(probs, t[:, None], axis=1)[:, 0]
    return valid, count, t, p_t


def _scatter(grad_t, t, probs):
    dprobs = np.zeros_like(probs)
    np.put_along_axis(dprobs, t[:, None], grad_t[:, None].astype(probs.dtype), axis=1)
    return dprobs


def wce_loss(probs, target, weights=(1.0, 1.0)):
    """Mean over labelled voxels of ``-w[t] * log p[t]``."""
    valid, count, t, p_t = _gather(probs, target)
    w = np.asarray(weights, dtype=np.float64)[t]
    p_safe = np.maximum(p_t, _PROB_FLOOR)
    terms = np.where(valid, -w * np.log(p_safe), 0.0)
    loss = float(terms.sum(dtype=np.float64) / count)
    grad_t = np.where(valid, -w / p_safe, 0.0) / count
    return loss, _scatter(grad_t, t, probs)


def ce_loss(probs, target):
    return wce_loss(probs, target, (1.0, 1.0))


def focal_loss(probs, target, gamma=2.0, alpha=1.0):
    """Mean of ``-alpha * (1 - p_t)**gamma * log p_t`` over labelled voxels."""
    valid, count, t, p_t = _gather(probs, target)
    p_safe = np.maximum(p_t, _PROB_FLOOR)
    one_minus = 1.0 - p_t
    log_p = np.log(p_safe)
    mod = one_minus ** gamma
    terms = np.where(valid, -alpha * mod * log_p, 0.0)
    loss = float(terms.sum(dtype=np.float64) / count)
    if gamma == 0:
        dmod = np.zeros_like(one_minus)
    else:
        dmod = -gamma * one_minus ** (gamma - 1)
    grad_t = -alpha * (dmod * log_p + mod / p_safe)
    grad_t = np.where(valid, grad_t, 0.0) / count
    return loss, _scatter(grad_t, t, probs)


def make_loss(name, class_weights=(1.0, 1.0), gamma=2.0):
    """Return a ``loss(probs, target)`` callable for ``CE``, ``FL`` or ``WCE``."""
    name = name.upper()
    if name == "CE":
        return ce_loss
    if name == "WCE":
        return lambda probs, target: wce_loss(probs, target, class_weights)
    if name == "FL":
        return lambda probs, target: focal_loss(probs, target, gamma=gamma)
    raise ValueError(f"unknown loss {name!r} (expected CE, FL or WCE)")
