"""Pure numpy MLP kernel (fallback backend).

Network: ``h_{l+1} = silu(h_l @ W_l + b_l)`` for hidden layers, linear output.
Weights are stored ``(fan_in, fan_out)``, row-major float64.
"""

import numpy as np


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def mlp_forward(h0, weights, biases):
    """Return ``(output, cache)``; ``cache`` feeds :func:`mlp_backward`."""
    acts = [h0]
    pre = []
    sig = []
    h = h0
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = h @ w
        z += b
        if i == last:
            h = z
        else:
            s = _sigmoid(z)
            pre.append(z)
            sig.append(s)
            h = z * s
            acts.append(h)
    return h, (acts, pre, sig)


def mlp_predict(h0, weights, biases):
    return mlp_forward(h0, weights, biases)[0]


def mlp_backward(cache, weights, grad_out):
    """Return ``(grad_weights, grad_biases, grad_input)``."""
    acts, pre, sig = cache
    n_layers = len(weights)
    gw = [None] * n_layers
    gb = [None] * n_layers
    dz = np.ascontiguousarray(grad_out, dtype=np.float64)
    for i in range(n_layers - 1, -1, -1):
        gw[i] = acts[i].T @ dz
        gb[i] = dz.sum(axis=0)
        dh = dz @ weights[i].T
        if i > 0:
            z = pre[i - 1]
            s = sig[i - 1]
            dz = dh * (s * (1.0 + z * (1.0 - s)))
        else:
            dz = dh
    return gw, gb, dz
