"""Central finite-difference oracle, independent of autograd."""
import numpy as np
import torch


def check_gradients(params, loss_fn, h=1e-5, max_entries=40, rng=None):
    """Largest relative error between accumulated gradients and central differences.

    ``loss_fn`` recomputes the scalar loss from the current parameter values.
    Entries are subsampled per parameter to keep the check fast.
    """
    rng = rng or np.random.default_rng(0)
    params.zero_grad()
    params.backward(loss_fn())
    worst = 0.0
    for name, p in params.items():
        if not p.requires_grad:
            continue
        analytic = p.grad.detach().numpy().ravel()
        flat = p.data.view(-1)
        picks = np.arange(flat.numel())
        if len(picks) > max_entries:
            picks = rng.choice(picks, max_entries, replace=False)
        for i in picks:
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
            numeric = (up - down) / (2 * h)
            err = abs(numeric - analytic[i])
            scale = max(abs(numeric), abs(analytic[i]))
            if scale < 1e-3:
                rel = 0.0 if err < 1e-7 else err / max(scale, 1e-12)
            else:
                rel = err / scale
            worst = max(worst, rel)
    return worst
