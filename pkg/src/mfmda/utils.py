import hashlib
import random

import numpy as np
import torch


def seed_everything(seed):
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


def make_generator(seed):
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def param_hash(params):
    """SHA-256 over the raw bytes of a parameter iterable or state dict."""
    if isinstance(params, dict):
        items = [params[k] for k in sorted(params)]
    else:
        items = list(params)
    h = hashlib.sha256()
    for t in items:
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def count_params(params):
    return sum(p.numel() for p in params)


def batches(n, batch_size, gen):
    """Yield index tensors of one shuffled epoch."""
    perm = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


def check_divergence(losses, initial, patience=100, factor=10.0):
    """True when the last ``patience`` losses all exceed ``factor`` x initial."""
    if len(losses) < patience:
        return False
    return all(v > factor * initial for v in losses[-patience:])
