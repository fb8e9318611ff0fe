"""Independent reference implementations used as test oracles.

Everything here is deliberately written the slow, obvious way and stays
independent of the library code paths it checks.
"""

import math

import numpy as np


def conv2d_6loop(x, w, b):
    """Direct-summation 3x3 cross-correlation, padding 1, stride 1."""
    n, c_in, h, wd = x.shape
    c_out = w.shape[0]
    xp = np.zeros((n, c_in, h + 2, wd + 2), dtype=np.float64)
    xp[:, :, 1:-1, 1:-1] = x
    y = np.zeros((n, c_out, h, wd), dtype=np.float64)
    for ni in range(n):
        for o in range(c_out):
            for i in range(h):
                for j in range(wd):
                    acc = 0.0
                    for c in range(c_in):
                        for di in range(3):
                            for dj in range(3):
                                acc += float(w[o, c, di, dj]) * float(xp[ni, c, i + di, j + dj])
                    y[ni, o, i, j] = acc + float(b[o])
    return y


def gelu_scalar(v):
    return v * 0.5 * (1.0 + math.erf(v / math.sqrt(2.0)))


def encoder_logits_oracle(params, stats, x):
    """Scripted recomputation of the encoder forward pass (eval-mode BN),
    in float64, using only loops/plain numpy."""
    def bn(a, gamma, beta, mean, var):
        return gamma.reshape(1, -1, 1, 1) * (a - mean.reshape(1, -1, 1, 1)) \
            / np.sqrt(var.reshape(1, -1, 1, 1) + 1e-5) + beta.reshape(1, -1, 1, 1)

    def pool(a):
        n, c, h, w = a.shape
        out = np.zeros((n, c, h // 2, w // 2))
        for i in range(h // 2):
            for j in range(w // 2):
                out[:, :, i, j] = a[:, :, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max(axis=(2, 3))
        return out

    gelu = np.vectorize(gelu_scalar)
    a = conv2d_6loop(x.astype(np.float64), params["enc.conv1.w"], params["enc.conv1.b"])
    a = bn(a, *(params[f"enc.bn1.{k}"].astype(np.float64) for k in ("gamma", "beta")),
           stats["enc.bn1.running_mean"].astype(np.float64),
           stats["enc.bn1.running_var"].astype(np.float64))
    z1 = pool(gelu(a))
    a = conv2d_6loop(z1, params["enc.conv2.w"], params["enc.conv2.b"])
    a = bn(a, *(params[f"enc.bn2.{k}"].astype(np.float64) for k in ("gamma", "beta")),
           stats["enc.bn2.running_mean"].astype(np.float64),
           stats["enc.bn2.running_var"].astype(np.float64))
    z2 = pool(gelu(a))
    flat = z2.reshape(z2.shape[0], -1)
    z3 = gelu(flat @ params["enc.fc1.w"].T.astype(np.float64) + params["enc.fc1.b"])
    return z3 @ params["enc.fc2.w"].T.astype(np.float64) + params["enc.fc2.b"]


def energy_oracle(z1, z2, z3, z4, params, target):
    """Direct scalar recomputation of the energy formula for one image."""
    g3 = params["gen.g3.w"].astype(np.float64) @ z4 + params["gen.g3.b"]
    g2 = (params["gen.g2.w"].astype(np.float64) @ z3 + params["gen.g2.b"]).reshape(64, 8, 8)
    up = np.zeros((64, 16, 16))
    for i in range(16):
        for j in range(16):
            up[:, i, j] = z2[:, i // 2, j // 2]
    g1 = conv2d_6loop(up[None], params["gen.g1.w"], params["gen.g1.b"])[0]
    total = 0.0
    for latent, pred in ((z1, g1), (z2, g2), (z3, g3)):
        total += 0.5 * float(np.mean((latent.astype(np.float64) - pred) ** 2))
    if target is not None:
        z = z4.astype(np.float64)
        logp = z - (z.max() + math.log(np.exp(z - z.max()).sum()))
        total += -float((target * logp).sum())
    return total


def auroc2_pairs(margins, correct):
    """Exhaustive O(n^2) pair enumeration with 0.5 tie credit."""
    pos = [m for m, c in zip(margins, correct) if c]
    neg = [m for m, c in zip(margins, correct) if not c]
    if not pos or not neg:
        return None
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def pearson_direct(xs, ys):
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    num = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    den = math.sqrt(sum((x - mx) ** 2 for x in xs) * sum((y - my) ** 2 for y in ys))
    return num / den


def build_mirror_decoder_model(seed=3):
    """TinyConvPCN crafted so the K-way margin equals the log-softmax margin.

    With zero readout bias, equal-norm fc2 rows, and g3 set to n3 times the
    transposed readout, the level-3 energy term is an affine function of
    the feedforward logit at the clamped class, so at the feedforward
    configuration the energy margin reduces to the log-softmax margin
    exactly: the constructed limit of a converged mirror decoder.
    """
    from pcnlab.model import init_model
    from pcnlab.rng import RngStream
    rng = RngStream(seed)
    m = init_model("pcn", rng.child("model"))
    w4 = rng.normal((10, 256)) * 1.0
    w4 /= np.linalg.norm(w4, axis=1, keepdims=True)  # equal row norms
    w4 *= 0.02
    m.params["enc.fc2.w"][:] = w4
    m.params["enc.fc2.b"][:] = 0.0
    m.params["gen.g3.w"][:] = 256.0 * w4.T
    m.params["gen.g3.b"][:] = 0.0
    # keep lower chain small so settling stays gentle
    m.params["gen.g2.w"] *= 0.1
    m.params["gen.g1.w"] *= 0.1
    return m


def build_class0_aligned_toy(n_inputs=6, seed=11):
    """Model plus inputs where the generative chain reproduces class-0
    features: g3's column 0 is set to the mean feedforward z3 of the
    inputs, every other column is pushed far away.

    Returns (model, images); argmin_k E_k must be 0 on these inputs.
    """
    from pcnlab.model import encoder_forward, init_model
    from pcnlab.rng import RngStream
    rng = RngStream(seed)
    m = init_model("pcn", rng.child("model"))
    base = rng.normal((1, 3, 32, 32)) * 0.5
    jitter = rng.normal((n_inputs, 3, 32, 32)) * 0.01
    images = (base + jitter).astype(np.float32)
    z3ff = encoder_forward(m, images)[3]
    m.params["gen.g3.w"][:] = 0.0
    m.params["gen.g3.b"][:] = 0.0
    m.params["gen.g3.w"][:, 0] = z3ff.mean(axis=0)
    for k in range(1, 10):
        m.params["gen.g3.w"][:, k] = -z3ff.mean(axis=0) * (1.0 + 0.1 * k)
    return m, images
