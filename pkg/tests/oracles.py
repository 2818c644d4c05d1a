"""Brute-force reference implementations used only by the tests.

Each one is written directly from its definition, with explicit loops and
no shared code with the package.
"""

import math

import numpy as np


def conv3d_direct(x, w, b):
    n, X, Y, Z, cin = x.shape
    k = w.shape[0]
    cout = w.shape[4]
    out = np.zeros((n, X - k + 1, Y - k + 1, Z - k + 1, cout))
    for s in range(n):
        for a in range(X - k + 1):
            for bb in range(Y - k + 1):
                for c in range(Z - k + 1):
                    for o in range(cout):
                        acc = b[o]
                        for i in range(k):
                            for j in range(k):
                                for l in range(k):
                                    for m in range(cin):
                                        acc += x[s, a + i, bb + j, c + l, m] * w[i, j, l, m, o]
                        out[s, a, bb, c, o] = acc
    return out


def auc_pairwise(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    concordant = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                concordant += 1.0
            elif p == q:
                concordant += 0.5
    return concordant / (len(pos) * len(neg))


def trilinear_point(data, sx, sy, sz):
    """Blend of the 8 neighbours of one (already clamped) source coordinate."""
    nx, ny, nz = data.shape
    x0, y0, z0 = int(math.floor(sx)), int(math.floor(sy)), int(math.floor(sz))
    x1, y1, z1 = min(x0 + 1, nx - 1), min(y0 + 1, ny - 1), min(z0 + 1, nz - 1)
    fx, fy, fz = sx - x0, sy - y0, sz - z0
    total = 0.0
    for xi, wx in ((x0, 1 - fx), (x1, fx)):
        for yi, wy in ((y0, 1 - fy), (y1, fy)):
            for zi, wz in ((z0, 1 - fz), (z1, fz)):
                total += wx * wy * wz * float(data[xi, yi, zi])
    return total


def resize_reference(data, target):
    out = np.zeros(target)
    src = []
    for n_in, n_out in zip(data.shape, target):
        src.append([min(max((i + 0.5) * n_in / n_out - 0.5, 0.0), n_in - 1) for i in range(n_out)])
    for i in range(target[0]):
        for j in range(target[1]):
            for l in range(target[2]):
                out[i, j, l] = trilinear_point(data, src[0][i], src[1][j], src[2][l])
    return out


def adam_scalar(theta, grad_fn, steps, lr, b1=0.9, b2=0.999, eps=1e-7):
    """Adam on a list of python floats, one coordinate at a time."""
    theta = list(theta)
    m = [0.0] * len(theta)
    v = [0.0] * len(theta)
    trajectory = []
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        for i in range(len(theta)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            mh = m[i] / (1 - b1 ** t)
            vh = v[i] / (1 - b2 ** t)
            theta[i] = theta[i] - lr * mh / (math.sqrt(vh) + eps)
        trajectory.append(list(theta))
    return trajectory


def parameter_hand_sum(input_channels, filters, dense_units):
    """Trainable and total parameter counts summed layer by layer."""
    trainable = 0
    frozen = 0
    cin = input_channels
    for f in filters:
        trainable += f * 3 * 3 * 3 * cin + f  # conv weights + biases
        trainable += f + f                    # gamma, beta
        frozen += f + f                       # running mean, var
        cin = f
    trainable += cin * dense_units + dense_units
    trainable += dense_units + 1
    return trainable, trainable + frozen
