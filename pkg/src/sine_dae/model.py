"""Convolutional encoder and cosine kernel-bank decoder."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import grad
from .grad import DimensionError, Tape, Var

DECODER_KINDS = ("mod-cos", "cos", "conv")


class ConfigError(ValueError):
    """Invalid model or training configuration."""


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 800  # C
    kernel_len: int = 2048  # L
    stride: int = 256  # S
    dil_kernel_len: int = 5  # L'
    dilation: int = 10  # D
    decoder: str = "mod-cos"
    squared: bool = True  # use f**2 as the carrier frequency

    def __post_init__(self):
        if self.decoder not in DECODER_KINDS:
            raise ConfigError(f"unknown decoder kind {self.decoder!r}; expected one of {DECODER_KINDS}")
        for name in ("channels", "kernel_len", "stride", "dil_kernel_len", "dilation"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Trainable parameters in checkpoint order."""
        c, l = self.channels, self.kernel_len
        shapes = {"conv1": (c, 1, l), "conv2": (c, c, self.dil_kernel_len)}
        if self.decoder == "conv":
            shapes["w"] = (c, l)
        else:
            shapes["f"] = (c,)
            shapes["phi"] = (c,)
            if self.decoder == "mod-cos":
                shapes["b"] = (c, l)
        return shapes

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Squared carriers tile [0, 0.5) uniformly; weights are U(+-1/sqrt(fan_in))."""
    c, l = config.channels, config.kernel_len
    shapes = config.param_shapes()

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    params = {
        "conv1": uniform(shapes["conv1"], l),
        "conv2": uniform(shapes["conv2"], c * config.dil_kernel_len),
    }
    if config.decoder == "conv":
        params["w"] = uniform(shapes["w"], l)
        return params
    eff = np.arange(c) / (2.0 * c)
    params["f"] = np.sqrt(eff) if config.squared else eff
    params["phi"] = np.zeros(c)
    if config.decoder == "mod-cos":
        params["b"] = uniform(shapes["b"], l)
    return params


class SineDAE:
    """Encoder ``E`` (strided conv -> dilated conv + residual -> ReLU) and decoder ``D``.

    ``params`` is a plain dict of float64 arrays keyed as in
    :meth:`ModelConfig.param_shapes`; training mutates it in place.
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        shapes = config.param_shapes()
        if set(params) != set(shapes):
            raise ConfigError(f"parameter names {sorted(params)} do not match {sorted(shapes)}")
        for name, shape in shapes.items():
            if params[name].shape != shape:
                raise DimensionError(f"{name}: expected {shape}, got {params[name].shape}")
        self.params = {k: np.asarray(params[k], dtype=np.float64) for k in shapes}

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int | np.random.Generator = 0) -> "SineDAE":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        return cls(config, init_params(config, rng))

    def copy(self) -> "SineDAE":
        return SineDAE(self.config, {k: v.copy() for k, v in self.params.items()})

    # -- geometry ----------------------------------------------------------

    def frames(self, n: int) -> int:
        return grad.frame_count(n, self.config.stride)

    def front_padding(self, n: int) -> tuple[int, int]:
        return grad.same_frames_padding(n, self.config.kernel_len, self.config.stride)

    def dilated_padding(self) -> tuple[int, int]:
        return grad.same_length_padding(self.config.dil_kernel_len, self.config.dilation)

    # -- numpy inference path ---------------------------------------------

    def preactivation(self, x: np.ndarray) -> np.ndarray:
        """``r + h`` before the ReLU, shaped like :meth:`encode`'s output."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim not in (1, 2):
            raise DimensionError(f"expected a waveform or a batch of waveforms, got shape {x.shape}")
        xb = x.reshape(-1, 1, x.shape[-1])
        n, cfg = x.shape[-1], self.config
        h = grad.conv1d(xb, self.params["conv1"], cfg.stride, 1, self.front_padding(n), self.frames(n))
        r = grad.conv1d(h, self.params["conv2"], 1, cfg.dilation, self.dilated_padding(), h.shape[-1])
        z = r + h
        return z[0] if x.ndim == 1 else z

    def encode(self, x: np.ndarray) -> np.ndarray:
        """Representation ``A`` of shape ``(C, T)`` (or ``(B, C, T)`` for a batch)."""
        return np.maximum(self.preactivation(x), 0.0)

    def kernels(self) -> np.ndarray:
        """Decoder kernel bank ``W`` of shape ``(C, L)``."""
        p, cfg = self.params, self.config
        if cfg.decoder == "conv":
            return p["w"].copy()
        return grad.modulated_cosine(p["f"], p["phi"], p.get("b"), cfg.kernel_len, cfg.squared)

    def decode(self, a: np.ndarray, n: int) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64)
        if a.shape[-2] != self.config.channels:
            raise DimensionError(f"representation has {a.shape[-2]} rows, model has {self.config.channels}")
        if a.shape[-1] != self.frames(n):
            raise DimensionError(f"{a.shape[-1]} frames inconsistent with length {n}")
        return grad.conv_transpose1d(a, self.kernels(), self.config.stride, n)

    def autoencode(self, x: np.ndarray) -> np.ndarray:
        return self.decode(self.encode(x), np.shape(x)[-1])

    # -- tape path ----------------------------------------------------------

    def bind(self, tape: Tape) -> dict[str, Var]:
        return {name: tape.param(name, value) for name, value in self.params.items()}

    def encode_on(self, tape: Tape, pv: dict[str, Var], x: np.ndarray) -> Var:
        """Differentiable encoder for a batch ``(B, N)``; returns ``(B, C, T)``."""
        n, cfg = x.shape[-1], self.config
        xv = tape.const(np.asarray(x, dtype=np.float64).reshape(-1, 1, n))
        h = tape.conv1d(xv, pv["conv1"], cfg.stride, 1, self.front_padding(n), self.frames(n))
        r = tape.conv1d(h, pv["conv2"], 1, cfg.dilation, self.dilated_padding(), h.shape[-1])
        return tape.relu(tape.add(r, h))

    def kernels_on(self, tape: Tape, pv: dict[str, Var]) -> Var:
        cfg = self.config
        if cfg.decoder == "conv":
            return pv["w"]
        return tape.modulated_cosine(pv["f"], pv["phi"], pv.get("b"), cfg.kernel_len, cfg.squared)

    def decode_on(self, tape: Tape, pv: dict[str, Var], a: Var, n: int) -> Var:
        return tape.conv_transpose1d(a, self.kernels_on(tape, pv), self.config.stride, n)

    # -- kernel ordering ---------------------------------------------------

    def effective_frequencies(self) -> np.ndarray | None:
        if self.config.decoder == "conv":
            return None
        f = self.params["f"]
        return f * f if self.config.squared else f.copy()

    def sort_kernels(self, co_permute: bool = True) -> np.ndarray:
        """Reorder kernels by ascending effective frequency (stable); returns the permutation.

        With ``co_permute`` the encoder channels follow the same permutation, so
        ``decode(encode(x))`` is unchanged. The plain ``conv`` decoder has no
        frequencies and is left alone (identity permutation).
        """
        eff = self.effective_frequencies()
        c = self.config.channels
        if eff is None:
            return np.arange(c)
        perm = np.argsort(eff, kind="stable")
        if np.array_equal(perm, np.arange(c)):
            return perm
        apply_permutation(self.params, perm, self.config, co_permute)
        return perm


def apply_permutation(
    arrays: dict[str, np.ndarray], perm: np.ndarray, config: ModelConfig, co_permute: bool = True
) -> None:
    """Permute the channel axes of a parameter-shaped dict in place."""
    for name in ("f", "phi", "b", "w"):
        if name in arrays:
            arrays[name] = arrays[name][perm]
    if co_permute:
        arrays["conv1"] = arrays["conv1"][perm]
        arrays["conv2"] = arrays["conv2"][perm][:, perm]


def model_from_dict(d: dict) -> ModelConfig:
    fields = {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = set(d) - fields
    if unknown:
        raise ConfigError(f"unknown model fields: {sorted(unknown)}")
    return ModelConfig(**d)


def flatten_params(params: dict[str, np.ndarray], order: Iterable[str]) -> np.ndarray:
    return np.concatenate([params[k].reshape(-1) for k in order])
