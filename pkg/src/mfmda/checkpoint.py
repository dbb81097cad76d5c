"""Versioned checkpoint container shared by all trainable components."""

import os

import torch

from .errors import MissingArtifact

FORMAT_VERSION = 1


def save_checkpoint(path, kind, payload):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    torch.save({"format_version": FORMAT_VERSION, "kind": kind, "payload": payload}, path)


def load_checkpoint(path, kind):
    if not os.path.exists(path):
        raise MissingArtifact(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    version = blob.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    if blob.get("kind") != kind:
        raise ValueError(f"{path}: expected a {kind!r} checkpoint, found {blob.get('kind')!r}")
    return blob["payload"]
