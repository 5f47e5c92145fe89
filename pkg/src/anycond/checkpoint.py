"""Checkpoint container: a versioned binary file with a JSON header.

Parameters are stored as raw little-endian float64 blobs, so a save/load
round trip reproduces inference outputs bit-exactly; the JSON header carries
everything needed to rebuild the networks and the input encoding (schema,
standardization stats, training config, and the energy-input layout
descriptor with its field order and widths).
"""

from __future__ import annotations

import io
import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError
from .proposal import HeadLayout
from .schema import FeatureSchema, Standardization

MAGIC = b"ACND"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    schema: FeatureSchema
    standardization: Standardization
    config: dict
    proposal_params: nn.NetworkParams
    energy_params: nn.NetworkParams
    layout_descriptor: list[tuple[str, int]]
    best_val_ll: float = -math.inf
    seed_lineage: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @property
    def head_layout(self) -> HeadLayout:
        return HeadLayout(
            schema=self.schema,
            n_components=int(self.config["n_components"]),
            latent_dim=int(self.config["latent_dim"]),
        )

    @property
    def scale_floor(self) -> float:
        return float(self.config["scale_floor"])

    @property
    def e_max(self) -> float:
        return float(self.config["e_max"])

    def save(self, path: str) -> None:
        """Atomic write: temp file in the destination directory, then rename."""
        blob = io.BytesIO()
        arrays = []
        for prefix, params in (("proposal", self.proposal_params), ("energy", self.energy_params)):
            for i, dense in enumerate(params.dense_layers()):
                for part, arr in (("w", dense.w), ("b", dense.b)):
                    arrays.append(
                        {"name": f"{prefix}/{i}/{part}", "shape": list(arr.shape), "offset": blob.tell()}
                    )
                    blob.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        header = {
            "format_version": self.format_version,
            "schema": self.schema.to_dict(),
            "standardization": {
                "mean": self.standardization.mean.tolist(),
                "std": self.standardization.std.tolist(),
            },
            "config": self.config,
            "layout_descriptor": [[name, int(w)] for name, w in self.layout_descriptor],
            "best_val_ll": None if not math.isfinite(self.best_val_ll) else self.best_val_ll,
            "seed_lineage": self.seed_lineage,
            "proposal_structure": _structure(self.proposal_params),
            "energy_structure": _structure(self.energy_params),
            "arrays": arrays,
        }
        header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
        payload = blob.getvalue()
        dirname = os.path.dirname(os.path.abspath(path))
        fd, tmp = tempfile.mkstemp(dir=dirname, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(MAGIC)
                f.write(struct.pack("<I", self.format_version))
                f.write(struct.pack("<Q", len(header_bytes)))
                f.write(header_bytes)
                f.write(payload)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        with open(path, "rb") as f:
            if f.read(4) != MAGIC:
                raise ConfigError(f"{path}: not a checkpoint file")
            (version,) = struct.unpack("<I", f.read(4))
            if version > FORMAT_VERSION:
                raise ConfigError(
                    f"{path}: checkpoint format version {version} is newer than supported {FORMAT_VERSION}"
                )
            (header_len,) = struct.unpack("<Q", f.read(8))
            header = json.loads(f.read(header_len).decode("utf-8"))
            payload = f.read()
        blobs = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            start = spec["offset"]
            arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
            blobs[spec["name"]] = arr.astype(np.float64).reshape(shape)
        proposal = _params_from_blobs(header["proposal_structure"], blobs, "proposal")
        energy = _params_from_blobs(header["energy_structure"], blobs, "energy")
        best = header["best_val_ll"]
        return cls(
            schema=FeatureSchema.from_dict(header["schema"]),
            standardization=Standardization(
                mean=np.asarray(header["standardization"]["mean"], dtype=np.float64),
                std=np.asarray(header["standardization"]["std"], dtype=np.float64),
            ),
            config=header["config"],
            proposal_params=proposal,
            energy_params=energy,
            layout_descriptor=[(name, int(w)) for name, w in header["layout_descriptor"]],
            best_val_ll=-math.inf if best is None else float(best),
            seed_lineage=header["seed_lineage"],
            format_version=version,
        )


def _structure(params: nn.NetworkParams) -> dict:
    return {
        "input_dim": params.input_dim,
        "hidden_dim": params.hidden_dim,
        "n_blocks": params.n_blocks,
        "output_dim": params.output_dim,
    }


def _params_from_blobs(structure: dict, blobs: dict, prefix: str) -> nn.NetworkParams:
    params = nn.build_residual_mlp(
        input_dim=structure["input_dim"],
        hidden_dim=structure["hidden_dim"],
        n_blocks=structure["n_blocks"],
        output_dim=structure["output_dim"],
        rng=np.random.default_rng(0),
    )
    for i, dense in enumerate(params.dense_layers()):
        w = blobs[f"{prefix}/{i}/w"]
        b = blobs[f"{prefix}/{i}/b"]
        if w.shape != dense.w.shape or b.shape != dense.b.shape:
            raise ConfigError(f"checkpoint array {prefix}/{i} does not match declared structure")
        dense.w = w
        dense.b = b
    return params
