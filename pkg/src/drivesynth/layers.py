"""Strided windowed-mixing layers on the autodiff tape.

A down layer folds each non-overlapping 2x2 spatial window into the channel
axis and mixes it with one matrix; an up layer does the reverse. Leading
(batch/frame) axes pass through untouched.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tape, Tensor


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w (+ b)`` over the last axis of an arbitrary-rank ``x``."""
    lead = x.shape[:-1]
    n = int(np.prod(lead)) if lead else 1
    if w.shape[0] != x.shape[-1]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} vs weight {w.shape}")
    out = ad.matmul(ad.reshape(x, (n, x.shape[-1])), w)
    if b is not None:
        ones = x.tape.constant(np.ones((n, 1)))
        out = ad.add(out, ad.matmul(ones, ad.reshape(b, (1, w.shape[1]))))
    return ad.reshape(out, lead + (w.shape[1],))


def space_to_depth(x: Tensor) -> Tensor:
    *lead, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"space_to_depth: spatial dims {h}x{w} not even")
    r = len(lead)
    y = ad.reshape(x, (*lead, h // 2, 2, w // 2, 2, c))
    axes = list(range(r)) + [r, r + 2, r + 1, r + 3, r + 4]
    y = ad.permute(y, axes)
    return ad.reshape(y, (*lead, h // 2, w // 2, 4 * c))


def depth_to_space(x: Tensor) -> Tensor:
    *lead, h, w, c4 = x.shape
    if c4 % 4:
        raise ShapeError(f"depth_to_space: channels {c4} not divisible by 4")
    c = c4 // 4
    r = len(lead)
    y = ad.reshape(x, (*lead, h, w, 2, 2, c))
    axes = list(range(r)) + [r, r + 2, r + 1, r + 3, r + 4]
    y = ad.permute(y, axes)
    return ad.reshape(y, (*lead, 2 * h, 2 * w, c))


def down_mix(x: Tensor, w: Tensor, b: Tensor, act: bool = True) -> Tensor:
    y = linear(space_to_depth(x), w, b)
    return ad.relu(y) if act else y


def up_mix(x: Tensor, w: Tensor, b: Tensor, act: bool = True) -> Tensor:
    y = depth_to_space(linear(x, w, b))
    return ad.relu(y) if act else y


class StridedCodec:
    """Three 2x down layers + projection, mirrored by projection + three 2x up layers.

    ``params`` is a plain dict of float64 arrays so it can be serialized,
    copied and bound onto any tape.
    """

    n_stages = 3

    def __init__(self, in_channels: int, latent_channels: int, out_channels: int,
                 hidden: int = 16, params: dict | None = None, seed: int = 0,
                 zero_bias: bool = False):
        self.in_channels = in_channels
        self.latent_channels = latent_channels
        self.out_channels = out_channels
        self.hidden = hidden
        self.params = params if params is not None else self._init(seed, zero_bias)

    def _init(self, seed, zero_bias):
        rng = np.random.default_rng(seed)
        h = self.hidden
        p = {}

        def dense(name, fan_in, fan_out):
            p[name + ".w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out))
            p[name + ".b"] = (np.zeros(fan_out) if zero_bias
                              else rng.normal(0.0, 0.01, fan_out))

        c = self.in_channels
        for i in range(self.n_stages):
            dense(f"enc{i}", 4 * c, h)
            c = h
        dense("enc_proj", h, self.latent_channels)
        dense("dec_proj", self.latent_channels, h)
        for i in range(self.n_stages):
            out = self.out_channels if i == self.n_stages - 1 else h
            dense(f"dec{i}", h, 4 * out)
        return p

    @property
    def factor(self) -> int:
        return 2 ** self.n_stages

    def bind(self, tape: Tape, trainable: bool = True) -> dict:
        make = tape.leaf if trainable else tape.constant
        return {k: make(v) for k, v in self.params.items()}

    def encode_t(self, x: Tensor, p: dict) -> Tensor:
        *_, h, w, c = x.shape
        if h % self.factor or w % self.factor:
            raise ShapeError(f"spatial dims {h}x{w} not divisible by {self.factor}")
        if c != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} channels, got {c}")
        for i in range(self.n_stages):
            x = down_mix(x, p[f"enc{i}.w"], p[f"enc{i}.b"])
        return linear(x, p["enc_proj.w"], p["enc_proj.b"])

    def decode_logits_t(self, z: Tensor, p: dict) -> Tensor:
        if z.shape[-1] != self.latent_channels:
            raise ShapeError(f"expected {self.latent_channels} latent channels, got {z.shape[-1]}")
        x = ad.relu(linear(z, p["dec_proj.w"], p["dec_proj.b"]))
        for i in range(self.n_stages):
            last = i == self.n_stages - 1
            x = up_mix(x, p[f"dec{i}.w"], p[f"dec{i}.b"], act=not last)
        return x

    def decode_t(self, z: Tensor, p: dict) -> Tensor:
        return ad.sigmoid(self.decode_logits_t(z, p))

    def encode_array(self, x: np.ndarray) -> np.ndarray:
        tape = Tape(record=False)
        return self.encode_t(tape.constant(x), self.bind(tape, trainable=False)).value

    def decode_array(self, z: np.ndarray) -> np.ndarray:
        tape = Tape(record=False)
        return self.decode_t(tape.constant(z), self.bind(tape, trainable=False)).value

    def zero_decoder(self):
        for k in self.params:
            if k.startswith("dec"):
                self.params[k] = np.zeros_like(self.params[k])
        return self
