"""TinyConvPCN and its two halves.

TinyConvPCN pairs a four-stage convolutional encoder with a three-link
generative chain predicting each latent from the one above:

    encoder: conv(3->32) BN GELU pool -> conv(32->64) BN GELU pool
             -> fc(4096->256) GELU -> fc(256->10)
    chain:   g3 linear 10->256; g2 linear 256->4096 (reshaped 64x8x8);
             g1 upsample x2 then conv 64->32

TinyFFN is the encoder alone (backprop baseline); TinyDecoder is the chain
alone (post-hoc reconstruction training). Parameter counts: encoder
1,070,986 + chain 1,073,952 = 2,144,938 total.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .rng import RngStream

LATENT_SHAPES = {1: (32, 16, 16), 2: (64, 8, 8), 3: (256,), 4: (10,)}
LATENT_SIZES = {l: int(np.prod(s)) for l, s in LATENT_SHAPES.items()}
N_CLASSES = 10

ENCODER_SHAPES = {
    "enc.conv1.w": (32, 3, 3, 3),
    "enc.conv1.b": (32,),
    "enc.bn1.gamma": (32,),
    "enc.bn1.beta": (32,),
    "enc.conv2.w": (64, 32, 3, 3),
    "enc.conv2.b": (64,),
    "enc.bn2.gamma": (64,),
    "enc.bn2.beta": (64,),
    "enc.fc1.w": (256, 4096),
    "enc.fc1.b": (256,),
    "enc.fc2.w": (10, 256),
    "enc.fc2.b": (10,),
}
GENERATIVE_SHAPES = {
    "gen.g3.w": (256, 10),
    "gen.g3.b": (256,),
    "gen.g2.w": (4096, 256),
    "gen.g2.b": (4096,),
    "gen.g1.w": (32, 64, 3, 3),
    "gen.g1.b": (32,),
}
STAT_SHAPES = {
    "enc.bn1.running_mean": (32,),
    "enc.bn1.running_var": (32,),
    "enc.bn2.running_mean": (64,),
    "enc.bn2.running_var": (64,),
}


@dataclass
class PcnModel:
    """Parameter/statistic container; `kind` selects which halves exist."""

    kind: str  # "pcn" | "ffn" | "decoder"
    params: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)

    @property
    def has_encoder(self) -> bool:
        return self.kind in ("pcn", "ffn")

    @property
    def has_generative(self) -> bool:
        return self.kind in ("pcn", "decoder")


def _init_weight(rng: RngStream, shape, fan_in: int, dtype) -> np.ndarray:
    # fan-in scaled uniform (Kaiming-uniform style); biases are zeroed
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, shape, dtype=dtype)


def _fan_in(shape) -> int:
    if len(shape) == 4:  # conv (out, in, kh, kw)
        return shape[1] * shape[2] * shape[3]
    return shape[1]  # linear (out, in)


def init_model(kind: str, rng: RngStream, dtype=np.float32) -> PcnModel:
    """Deterministically initialise a model from an RngStream.

    Weights draw in a fixed name order so the same seed always yields the
    same parameters; BN scale is 1, shift 0, running stats (0, 1).
    """
    shapes: dict = {}
    if kind in ("pcn", "ffn"):
        shapes.update(ENCODER_SHAPES)
    if kind in ("pcn", "decoder"):
        shapes.update(GENERATIVE_SHAPES)
    if not shapes:
        raise ValueError(f"unknown model kind: {kind}")
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".w"):
            params[name] = _init_weight(rng.child("init", name), shape, _fan_in(shape), dtype)
        elif name.endswith(".gamma"):
            params[name] = np.ones(shape, dtype=dtype)
        else:  # biases and BN shift
            params[name] = np.zeros(shape, dtype=dtype)
    stats = {}
    if kind in ("pcn", "ffn"):
        for name, shape in STAT_SHAPES.items():
            stats[name] = (np.ones if name.endswith("var") else np.zeros)(shape, dtype=dtype)
    return PcnModel(kind=kind, params=params, stats=stats)


def param_count(model: PcnModel) -> int:
    """Trainable scalars: includes BN scale/shift, excludes running stats."""
    return sum(int(p.size) for p in model.params.values())


def encoder_forward(model: PcnModel, x: np.ndarray, train: bool = False, want_cache: bool = False):
    """Amortised forward pass: returns the four latent initialisations.

    x: (N, 3, 32, 32) normalised images. Returns dict {1: z1ff, ..., 4: z4ff};
    with want_cache=True also returns the intermediate cache needed for
    encoder_backward. z4ff are the logits the softmax baseline reads.
    """
    if not model.has_encoder:
        raise ValueError(f"model kind '{model.kind}' has no encoder")
    if x.ndim != 4 or x.shape[1:] != (3, 32, 32):
        raise ops.ShapeError(f"encoder expects (N, 3, 32, 32), got {x.shape}")
    p, s = model.params, model.stats

    a1 = ops.conv2d_forward(x, p["enc.conv1.w"], p["enc.conv1.b"])
    b1, bn1_cache = ops.batchnorm_forward(
        a1, p["enc.bn1.gamma"], p["enc.bn1.beta"],
        s["enc.bn1.running_mean"], s["enc.bn1.running_var"], train)
    g1, cdf1 = ops.gelu_forward_cached(b1)
    z1, pool1_idx = ops.maxpool2_forward(g1)

    a2 = ops.conv2d_forward(z1, p["enc.conv2.w"], p["enc.conv2.b"])
    b2, bn2_cache = ops.batchnorm_forward(
        a2, p["enc.bn2.gamma"], p["enc.bn2.beta"],
        s["enc.bn2.running_mean"], s["enc.bn2.running_var"], train)
    g2, cdf2 = ops.gelu_forward_cached(b2)
    z2, pool2_idx = ops.maxpool2_forward(g2)

    z2f = z2.reshape(z2.shape[0], -1)
    h3 = ops.linear_forward(z2f, p["enc.fc1.w"], p["enc.fc1.b"])
    z3, cdf3 = ops.gelu_forward_cached(h3)
    z4 = ops.linear_forward(z3, p["enc.fc2.w"], p["enc.fc2.b"])

    zff = {1: z1, 2: z2, 3: z3, 4: z4}
    if not want_cache:
        return zff
    cache = {
        "x": x, "a1": a1, "bn1": bn1_cache, "b1": b1, "cdf1": cdf1,
        "g1_shape": g1.shape, "pool1_idx": pool1_idx, "z1": z1,
        "a2": a2, "bn2": bn2_cache, "b2": b2, "cdf2": cdf2,
        "g2_shape": g2.shape, "pool2_idx": pool2_idx,
        "z2f": z2f, "h3": h3, "cdf3": cdf3, "z3": z3,
    }
    return zff, cache


def encoder_backward(model: PcnModel, cache, g_out: dict):
    """Backprop through the encoder from injected latent-output gradients.

    g_out maps level -> gradient at that level's encoder output (any of
    1..4, missing levels contribute zero). Returns encoder param grads.
    """
    p = model.params
    grads = {}
    n = cache["z2f"].shape[0]

    g_z4 = g_out.get(4)
    if g_z4 is not None:
        g_z3, grads["enc.fc2.w"], grads["enc.fc2.b"] = ops.linear_backward(
            cache["z3"], p["enc.fc2.w"], g_z4)
    else:
        g_z3 = np.zeros((n, 256), dtype=cache["z3"].dtype)
        grads["enc.fc2.w"] = np.zeros_like(p["enc.fc2.w"])
        grads["enc.fc2.b"] = np.zeros_like(p["enc.fc2.b"])
    if 3 in g_out:
        g_z3 = g_z3 + g_out[3]

    g_h3 = ops.gelu_backward(cache["h3"], g_z3, cdf=cache["cdf3"])
    g_z2f, grads["enc.fc1.w"], grads["enc.fc1.b"] = ops.linear_backward(
        cache["z2f"], p["enc.fc1.w"], g_h3)
    g_z2 = g_z2f.reshape(n, *LATENT_SHAPES[2])
    if 2 in g_out:
        g_z2 = g_z2 + g_out[2]

    g_g2 = ops.maxpool2_backward(cache["pool2_idx"], g_z2, cache["g2_shape"])
    g_b2 = ops.gelu_backward(cache["b2"], g_g2, cdf=cache["cdf2"])
    g_a2, grads["enc.bn2.gamma"], grads["enc.bn2.beta"] = ops.batchnorm_backward(
        cache["bn2"], g_b2)
    g_z1, grads["enc.conv2.w"], grads["enc.conv2.b"] = ops.conv2d_backward(
        cache["z1"], p["enc.conv2.w"], g_a2)
    if 1 in g_out:
        g_z1 = g_z1 + g_out[1]

    g_g1 = ops.maxpool2_backward(cache["pool1_idx"], g_z1, cache["g1_shape"])
    g_b1 = ops.gelu_backward(cache["b1"], g_g1, cdf=cache["cdf1"])
    g_a1, grads["enc.bn1.gamma"], grads["enc.bn1.beta"] = ops.batchnorm_backward(
        cache["bn1"], g_b1)
    _, grads["enc.conv1.w"], grads["enc.conv1.b"] = ops.conv2d_backward(
        cache["x"], p["enc.conv1.w"], g_a1)
    return grads


def generative_predict(model: PcnModel, level: int, upper: np.ndarray) -> np.ndarray:
    """Top-down prediction of latent `level` from the latent above it."""
    if not model.has_generative:
        raise ValueError(f"model kind '{model.kind}' has no generative chain")
    p = model.params
    n = upper.shape[0]
    if level == 3:
        if upper.shape[1:] != LATENT_SHAPES[4]:
            raise ops.ShapeError(f"level-3 prediction needs z4 {LATENT_SHAPES[4]}, got {upper.shape}")
        return ops.linear_forward(upper, p["gen.g3.w"], p["gen.g3.b"])
    if level == 2:
        if upper.shape[1:] != LATENT_SHAPES[3]:
            raise ops.ShapeError(f"level-2 prediction needs z3 {LATENT_SHAPES[3]}, got {upper.shape}")
        flat = ops.linear_forward(upper, p["gen.g2.w"], p["gen.g2.b"])
        return flat.reshape(n, *LATENT_SHAPES[2])
    if level == 1:
        if upper.shape[1:] != LATENT_SHAPES[2]:
            raise ops.ShapeError(f"level-1 prediction needs z2 {LATENT_SHAPES[2]}, got {upper.shape}")
        up = ops.upsample2_forward(upper)
        return ops.conv2d_forward(up, p["gen.g1.w"], p["gen.g1.b"])
    raise ValueError(f"invalid generative level: {level}")


def encoder_half(model: PcnModel) -> PcnModel:
    """View of the encoder parameters as a TinyFFN (shared arrays)."""
    params = {k: v for k, v in model.params.items() if k.startswith("enc.")}
    return PcnModel(kind="ffn", params=params, stats=dict(model.stats))


def combine(encoder: PcnModel, decoder: PcnModel) -> PcnModel:
    """Assemble a full PCN from a trained encoder and decoder (shared arrays)."""
    params = {}
    params.update({k: v for k, v in encoder.params.items() if k.startswith("enc.")})
    params.update({k: v for k, v in decoder.params.items() if k.startswith("gen.")})
    return PcnModel(kind="pcn", params=params, stats=dict(encoder.stats))
