import numpy as np
import pytest
import torch


def randomize_(module: torch.nn.Module, seed: int = 0, scale: float = 0.3) -> torch.nn.Module:
    """Overwrite every parameter with small Gaussian values (zero-init heads would hide gradients)."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return module


def _flat_grad(g, like):
    return torch.zeros_like(like) if g is None else g


def fd_gradcheck(fn, inputs, params=(), eps=1e-6, rtol=1e-4, floor=1e-6, max_elems=48, seed=0):
    """Central finite differences against autograd, norm-wise relative error.

    ``fn`` maps the input tensors to any tensor; it is scalarized with a fixed
    random projection. Every input element is probed; parameters are probed on
    at most ``max_elems`` random entries each. Tensors whose gradient is
    identically zero (e.g. a bias cancelled by a following normalization)
    are compared against ``floor`` times the overall gradient norm instead
    of their own vanishing norm.
    Returns the worst relative error.
    """
    inputs = [x.detach().clone().double().requires_grad_(True) for x in inputs]
    params = list(params)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        proj = torch.randn(fn(*inputs).shape, generator=gen, dtype=torch.float64)

    def scalar():
        return (fn(*inputs) * proj).sum()

    for p in params:
        if p.grad is not None:
            p.grad = None
    loss = scalar()
    targets = inputs + params
    grads = torch.autograd.grad(loss, targets, allow_unused=True)
    overall = torch.sqrt(sum((_flat_grad(g, t).double() ** 2).sum() for t, g in zip(targets, grads))).item()
    worst = 0.0
    rng = np.random.default_rng(seed)
    for k, (t, g) in enumerate(zip(targets, grads)):
        g = _flat_grad(g, t).reshape(-1)
        flat = t.data.view(-1)
        idx = np.arange(flat.numel())
        if k >= len(inputs) and len(idx) > max_elems:
            idx = rng.choice(idx, max_elems, replace=False)
        num = torch.zeros(len(idx), dtype=torch.float64)
        with torch.no_grad():
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = scalar().item()
                flat[i] = orig - eps
                down = scalar().item()
                flat[i] = orig
                num[j] = (up - down) / (2 * eps)
        ana = g[torch.as_tensor(idx)].detach()
        scale = max(num.norm().item(), ana.norm().item(), floor * overall, 1e-12)
        err = (ana - num).norm().item() / scale
        worst = max(worst, err)
        assert err < rtol, f"gradient mismatch: relative error {err:.3e} on tensor of shape {tuple(t.shape)}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
