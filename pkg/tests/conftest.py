import itertools

import numpy as np
import pytest
import torch

from asageo import kernels


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(params=["python", "cython"])
def backend(request, monkeypatch):
    """Run a test against each kernel implementation via the dispatch module."""
    impl = kernels.get_backend(request.param)
    for name in ("kmeans_1d", "nearest_indices", "ranking_metrics"):
        monkeypatch.setattr(kernels, name, getattr(impl, name))
    return request.param


def central_differences(fn, x: torch.Tensor, step: float = 1e-3) -> torch.Tensor:
    """Gradient of scalar ``fn`` at ``x`` by central differences, one entry at a time."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            up = float(fn(x))
            flat[i] = orig - step
            down = float(fn(x))
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
    return grad


def analytic_gradient(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    return x.grad.detach()


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    scale = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / scale


def best_contiguous_sse(q, k: int) -> float:
    """Exhaustive optimum over all contiguous partitions of sorted ``q`` into ``k`` groups."""
    s = np.sort(np.asarray(q, dtype=np.float64))
    n = len(s)
    best = np.inf
    for cuts in itertools.combinations(range(1, n), k - 1):
        bounds = [0, *cuts, n]
        sse = 0.0
        for a, b in zip(bounds[:-1], bounds[1:]):
            g = s[a:b]
            sse += float(((g - g.mean()) ** 2).sum())
        best = min(best, sse)
    return best


def well_separated(rng, n: int, k: int, balanced: bool = True, gap: float = 10.0, spread: float = 0.5):
    """Clusters ``gap`` apart with half-width ``spread``; returns shuffled values and sizes."""
    if balanced:
        # equal sizes with n >= 2k put exactly one floor-rounded seed in every cluster
        if n % k or (k > 1 and n < 2 * k):
            raise ValueError("balanced instances need n divisible by k and n >= 2k")
        sizes = np.full(k, n // k)
    else:
        sizes = rng.multinomial(n - k, np.ones(k) / k) + 1
    q = np.concatenate([rng.uniform(-spread, spread, s) + gap * c for c, s in enumerate(sizes)])
    rng.shuffle(q)
    return q, sizes
