"""Shared test helpers: an independent finite-difference oracle for whole
models driven by the training loss."""

import numpy as np

from voxelseg import losses
from voxelseg.layers import Mode, make_rng


def model_loss_fd_check(model, x, labels, seed=0, samples_per_tensor=4, step=1e-5,
                        floor=1e-6):
    """Max relative error between analytic and central finite-difference
    gradients of the scalar Jacc2 loss, probing a few coordinates of every
    parameter tensor and of the input.

    The model must be float64.  Stochastic draws are frozen by re-seeding
    the forward rng identically for every evaluation.
    """
    x = np.asarray(x, dtype=np.float64)
    y = losses.one_hot(labels, model.spec.num_classes, dtype=np.float64)

    def loss_value():
        return losses.jacc2_loss(y, model.forward(x, Mode.TRAIN, make_rng(seed)))

    probs = model.forward(x, Mode.TRAIN, make_rng(seed))
    _, dprobs = losses.jacc2_loss_and_grad(y, probs)
    dx = model.backward(dprobs)
    analytic = dict(model.gradients())
    analytic["<input>"] = dx

    tensors = dict(model.parameters())
    tensors["<input>"] = x

    pick = make_rng(seed + 1)
    worst = 0.0
    worst_name = None
    for name, arr in tensors.items():
        grad = analytic[name] if name != "<input>" else analytic["<input>"]
        flat, gflat = arr.reshape(-1), np.asarray(grad).reshape(-1)
        n = flat.size
        coords = pick.choice(n, size=min(samples_per_tensor, n), replace=False)
        for c in coords:
            old = flat[c]
            h = step * max(1.0, abs(old))
            flat[c] = old + h
            f1 = loss_value()
            flat[c] = old - h
            f2 = loss_value()
            flat[c] = old
            fd = (f1 - f2) / (2.0 * h)
            err = abs(gflat[c] - fd) / max(abs(gflat[c]), abs(fd), floor)
            if err > worst:
                worst, worst_name = err, (name, int(c))
    return worst, worst_name
