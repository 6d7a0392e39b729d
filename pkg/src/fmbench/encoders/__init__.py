"""Pluggable frozen encoders, the toy reference encoder, and feature dumps."""

from __future__ import annotations

from .base import Encoder, EncoderDescriptor, FeatureMap, encode_slice
from .dump import FeatureDump, read_feature_dump, write_feature_dump
from .plugin import SubprocessEncoder
from .toy import ToyEncoder, toy_encode


def make_encoder(spec: str) -> Encoder:
    """Build an encoder from a CLI spec string.

    ``toy:seed=7,dim=64[,res=512]`` for the reference encoder,
    ``plugin:CMD ARG...`` for a subprocess plugin.
    """
    kind, _, rest = spec.partition(":")
    if kind == "toy":
        params = {}
        for part in rest.split(","):
            if part:
                k, _, v = part.partition("=")
                params[k.strip()] = int(v)
        return ToyEncoder(seed=params.get("seed", 0),
                          embed_dim=params.get("dim", 64),
                          input_resolution=params.get("res", 512))
    if kind == "plugin":
        return SubprocessEncoder(rest.split())
    raise ValueError(f"unknown encoder spec {spec!r} (expected toy:... or plugin:...)")


__all__ = [
    "Encoder", "EncoderDescriptor", "FeatureDump", "FeatureMap",
    "SubprocessEncoder", "ToyEncoder", "encode_slice", "make_encoder",
    "read_feature_dump", "toy_encode", "write_feature_dump",
]
