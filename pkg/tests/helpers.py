import torch


def condition_(module: torch.nn.Module, std: float = 0.5, codebook_std: float = 2.0, seed: int = 0) -> torch.nn.Module:
    """Redraw toy weights so every probed gradient is well above finite-difference round-off.

    The 0.02 default init, and biases that swamp the token content, leave
    toy-sized attention layers seeing near-identical tokens; their q/k
    gradients then sit around 1e-12. Here linear weights are N(0, std^2),
    biases zero, norm gains 1 + N(0, 0.04), and a codebook (if any) is spread
    wide so soft code mixtures stay distinct.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            noise = torch.randn(p.shape, generator=gen, dtype=p.dtype)
            if name.endswith("codebook"):
                p.copy_(noise * codebook_std)
            elif "norm" in name:
                p.copy_(1 + 0.2 * noise)
            elif name.endswith("bias") and not name.endswith("rel_bias"):
                p.zero_()
            else:
                p.copy_(noise * std)
    return module


def split_structural_zeros(module: torch.nn.Module):
    """(checkable params, key-projection biases).

    A key bias adds the same constant to every logit in a softmax row, so its
    true gradient is identically zero and a relative error is meaningless.
    """
    check, zeros = [], []
    for name, p in module.named_parameters():
        if not p.requires_grad:
            continue
        (zeros if name.endswith("k_proj.bias") else check).append(p)
    return check, zeros


def assert_structural_zero(loss, params, tol=1e-12):
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    for g in grads:
        assert g is None or g.abs().max().item() < tol
