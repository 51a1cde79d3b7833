"""Central finite-difference oracle shared by the network tests."""

import numpy as np

from errornav.network import ArchConfig, forward_batch, init_params, loss

TINY = ArchConfig(obs_height=8, obs_width=8, history_len=2, horizon=3,
                  conv_channels=(4, 8, 8), action_hidden=8, action_embed=8,
                  hidden=8, head_hidden=8)


def kink_margin(params, images, actions, arch):
    """Smallest |pre-activation| over every leaky-ReLU unit in the network."""
    cache = {}
    forward_batch(params, images, actions, arch, cache)
    pre = [cache[f"conv{i}"][1] for i in range(1, len(arch.conv_channels) + 1)]
    pre += [cache["a1"], cache["a2"], cache["z1"]]
    return min(np.abs(z).min() for z in pre)


def tiny_problem(seed, batch=3, arch=TINY, margin=1e-3):
    """Random tiny network and batch whose leaky-ReLU units all sit at least
    ``margin`` away from the kink, so a central difference with step 1e-4
    never straddles a non-differentiable point."""
    rng = np.random.default_rng(seed)
    params = init_params(arch, seed)
    # scale up so activations leave the near-linear regime
    params = {k: v * 2.0 for k, v in params.items()}
    while True:
        images = rng.uniform(0, 1, (batch, arch.history_len, arch.obs_channels,
                                    arch.obs_height, arch.obs_width))
        actions = rng.uniform(-1, 1, (batch, arch.horizon, 2))
        targets = rng.uniform(0, 2, batch)
        if kink_margin(params, images, actions, arch) > margin:
            return params, images, actions, targets


def numeric_grad(params, images, actions, targets, arch, h=1e-4):
    grads = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for idx in range(flat.size):
            old = flat[idx]
            flat[idx] = old + h
            up = loss(params, images, actions, targets, arch)
            flat[idx] = old - h
            down = loss(params, images, actions, targets, arch)
            flat[idx] = old
            gflat[idx] = (up - down) / (2 * h)
        grads[name] = g
    return grads


def relative_error(a, b, floor=1e-7):
    return np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)
