"""Pure-numpy MLP kernels: the fallback backend.

Mirrors the compiled extension in fedfair._mlpcore. Both implement the
same two entry points over a flat float64 parameter vector packed layer
by layer as (weight row-major [out, in], bias [out]).

act codes: 0 = relu, 1 = tanh. The output layer is always linear.
"""

import numpy as np

RELU = 0
TANH = 1


def forward(flat, sizes, act, X):
    """Run the network, returning [X, hidden_1, ..., hidden_{L-1}, logits].

    Hidden entries are post-activation values; the last entry is the raw
    logits. Post-activation values are enough to rebuild the activation
    derivative for both relu and tanh.
    """
    acts = [X]
    a = X
    off = 0
    n_layers = len(sizes) - 1
    for layer in range(n_layers):
        nin = sizes[layer]
        nout = sizes[layer + 1]
        W = flat[off : off + nout * nin].reshape(nout, nin)
        off += nout * nin
        b = flat[off : off + nout]
        off += nout
        z = a @ W.T + b
        if layer == n_layers - 1:
            a = z
        elif act == RELU:
            a = np.maximum(z, 0.0)
        else:
            a = np.tanh(z)
        acts.append(a)
    return acts


def backward(flat, sizes, act, acts, dout, want_param_grad=True, want_input_grad=False):
    """Reverse pass from an output cotangent.

    dout is dLoss/dlogits with shape [n, C]. Returns (dflat, dX); either
    may be None when not requested.
    """
    n_layers = len(sizes) - 1
    dflat = np.zeros(flat.shape[0]) if want_param_grad else None
    offsets = []
    off = 0
    for layer in range(n_layers):
        nin = sizes[layer]
        nout = sizes[layer + 1]
        offsets.append((off, nin, nout))
        off += nout * nin + nout

    d = dout
    dX = None
    for layer in range(n_layers - 1, -1, -1):
        off, nin, nout = offsets[layer]
        W = flat[off : off + nout * nin].reshape(nout, nin)
        a_prev = acts[layer]
        if want_param_grad:
            dflat[off : off + nout * nin] = (d.T @ a_prev).ravel()
            dflat[off + nout * nin : off + nout * nin + nout] = d.sum(axis=0)
        if layer == 0 and not want_input_grad:
            break
        da = d @ W
        if layer == 0:
            dX = da
            break
        a = acts[layer]  # post-activation output of layer-1's successor
        if act == RELU:
            d = da * (a > 0.0)
        else:
            d = da * (1.0 - a * a)
    return dflat, dX
