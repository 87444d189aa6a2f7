"""Small worlds and configs shared by the slower tests."""

from stgkd.trainer import TrainConfig
from stgkd.world import WorldConfig, generate_corpus, split_corpus


def tiny_world(**kw) -> WorldConfig:
    base = dict(T=3, total_frames=48, d_obj=12, d_geometry=4, d_2d=6, d_3d=4, max_distractors=1, n_max=3)
    return WorldConfig(**{**base, **kw})


def tiny_dataset(n=20, **kw):
    return split_corpus(generate_corpus(tiny_world(**kw), n))


def tiny_config(**kw) -> TrainConfig:
    base = dict(batch_size=4, epochs=2, d_model=8, n_heads=2, n_layers=1, d_ff=16, dropout=0.0, gcn_layers=2, max_len=8)
    return TrainConfig(**{**base, **kw})


def finite_difference_errors(loss, params, eps=1e-5, floor=1e-5):
    """Relative errors between autograd and central differences for every element of ``params``.

    ``loss`` is a zero-argument callable returning a scalar tensor. The
    denominator is floored so exact-zero gradients compare against roundoff.
    """
    import torch

    for p in params:
        p.grad = None
    loss().backward()
    errors = []
    with torch.no_grad():
        for p in params:
            flat, grad = p.view(-1), p.grad.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss().item()
                flat[i] = orig - eps
                down = loss().item()
                flat[i] = orig
                num, ana = (up - down) / (2 * eps), grad[i].item()
                errors.append(abs(num - ana) / max(abs(num), abs(ana), floor))
    return errors
