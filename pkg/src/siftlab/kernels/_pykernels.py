"""Reference numpy kernels. Same arithmetic, same operation order as ``_ckernels``."""
import numpy as np


def gather_add(acc, grad_flat, idx):
    acc += grad_flat[idx]


def sparse_adamw(delta, base, m, v, g, lr, beta1, beta2, eps, weight_decay, bc1, bc2):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mhat = m / bc1
    vhat = v / bc2
    if weight_decay != 0.0:
        delta -= (lr * weight_decay) * (base + delta)
    delta -= lr * mhat / (np.sqrt(vhat) + eps)


def scatter_merge(flat_param, idx, base, delta):
    flat_param[idx] = base + delta
