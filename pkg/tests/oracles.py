"""Reference computations kept independent of the package code paths."""
import itertools

import numpy as np
import torch


def brute_min_ade(proposals, gt, agent_mask=None):
    """proposals [..., F, T, 2] -> mean over agents of min over modes (explicit loops)."""
    p = np.asarray(proposals, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    lead = p.shape[:-3]
    out = []
    for idx in itertools.product(*(range(k) for k in lead)):
        if agent_mask is not None and not agent_mask[idx]:
            continue
        best = np.inf
        for f in range(p.shape[-3]):
            total = 0.0
            for t in range(p.shape[-2]):
                dx = p[idx + (f, t, 0)] - g[idx + (t, 0)]
                dy = p[idx + (f, t, 1)] - g[idx + (t, 1)]
                total += (dx * dx + dy * dy) ** 0.5
            best = min(best, total / p.shape[-2])
        out.append(best)
    return sum(out) / len(out)


def brute_min_fde(proposals, gt, agent_mask=None):
    p = np.asarray(proposals, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    lead = p.shape[:-3]
    out = []
    for idx in itertools.product(*(range(k) for k in lead)):
        if agent_mask is not None and not agent_mask[idx]:
            continue
        best = np.inf
        for f in range(p.shape[-3]):
            dx = p[idx + (f, -1, 0)] - g[idx + (-1, 0)]
            dy = p[idx + (f, -1, 1)] - g[idx + (-1, 1)]
            best = min(best, (dx * dx + dy * dy) ** 0.5)
        out.append(best)
    return sum(out) / len(out)


def central_difference(fn, tensors, eps=1e-6):
    """Numerical gradient of scalar ``fn()`` w.r.t. each tensor (modified in place, restored)."""
    grads = []
    with torch.no_grad():
        for x in tensors:
            g = torch.zeros_like(x)
            flat, gflat = x.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = float(fn())
                flat[i] = orig - eps
                lo = float(fn())
                flat[i] = orig
                gflat[i] = (hi - lo) / (2 * eps)
            grads.append(g)
    return grads


def relative_gradient_error(fn, tensors, eps=1e-6):
    for x in tensors:
        x.grad = None
    fn().backward()
    auto = torch.cat([x.grad.reshape(-1) for x in tensors])
    numeric = torch.cat([g.reshape(-1) for g in central_difference(fn, tensors, eps)])
    return float((auto - numeric).norm() / numeric.norm().clamp(min=1e-12))


def monte_carlo_kl(mean_a, logvar_a, mean_b, logvar_b, n=1_000_000, seed=0):
    """KL(A || B) for diagonal Gaussians from n samples of A (one agent)."""
    rng = np.random.default_rng(seed)
    sa, sb = np.exp(0.5 * logvar_a), np.exp(0.5 * logvar_b)
    x = mean_a + sa * rng.standard_normal((n, len(mean_a)))
    log_a = -0.5 * (((x - mean_a) / sa) ** 2) - np.log(sa) - 0.5 * np.log(2 * np.pi)
    log_b = -0.5 * (((x - mean_b) / sb) ** 2) - np.log(sb) - 0.5 * np.log(2 * np.pi)
    return float((log_a - log_b).sum(1).mean())
