import numpy as np

from phmm import tensor as T
from phmm.model import GaussianNoise
from phmm.training import elbo_batch


def elbo_value(model, xs, ys, beta, noise_seed) -> float:
    """ELBO with frozen noise: recreating the seeded stream replays draws."""
    obj, _ = elbo_batch(model, xs, ys, beta, GaussianNoise(noise_seed))
    return float(obj.data)


def check_all_param_gradients(model, xs, ys, beta=1.0, noise_seed=0,
                              eps=1e-5, names=None):
    """Max relative error of analytic ELBO gradients vs central differences.

    Relative error per coordinate is |analytic - numeric| / max(1, |analytic|).
    ``names`` restricts the check to a subset of parameter names.
    """
    model.zero_grad()
    with T.Tape():
        obj, _ = elbo_batch(model, xs, ys, beta, GaussianNoise(noise_seed))
        loss = -1.0 * obj
    T.backward(loss)

    worst = 0.0
    worst_name = None
    for name, p in model.named_parameters():
        if names is not None and name not in names:
            continue
        analytic = -(p.grad if p.grad is not None else np.zeros(p.shape))
        flat = p.data.reshape(-1)
        a_flat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = elbo_value(model, xs, ys, beta, noise_seed)
            flat[i] = orig - eps
            lo = elbo_value(model, xs, ys, beta, noise_seed)
            flat[i] = orig
            numeric = (hi - lo) / (2 * eps)
            rel = abs(a_flat[i] - numeric) / max(1.0, abs(a_flat[i]))
            if rel > worst:
                worst, worst_name = rel, f"{name}[{i}]"
    return worst, worst_name
