"""Forward-hook capture of LayerNorm mappings from a transformer.

For every LayerNorm in the model (network order), one forward pass records the
layer input ``x`` and output ``y``; the per-channel affine transform is removed
with the layer's own weights, ``y_pre = (y - b) / (w + eps)``, and a uniform
sample over the pooled (token, feature) cells is written as a mapping file the
scalarnorm toolkit loads directly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from scalarnorm import MappingDataset, save_mappings

__all__ = ["ExtractionManifest", "LayerRecord", "CaptureError", "extract",
           "find_normalization_layers"]


class CaptureError(RuntimeError):
    """A capture hook failed or produced inconsistent tensors."""


@dataclass(frozen=True)
class LayerRecord:
    """Per-layer entry: file, sample count, and capture sanity statistics."""

    name: str
    file: str
    samples: int
    eps: float
    sha256: str
    max_abs_token_mean: float
    min_token_var: float
    max_token_var: float


@dataclass
class ExtractionManifest:
    """What was captured and where it went; validates its own file checksums."""

    model_id: str
    layer_names: list[str]
    batch_description: str
    seed: int
    layers: list[LayerRecord] = field(default_factory=list)

    def save(self, path) -> None:
        payload = {
            "model_id": self.model_id,
            "layer_names": self.layer_names,
            "batch_description": self.batch_description,
            "seed": self.seed,
            "layers": [asdict(rec) for rec in self.layers],
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        payload = json.loads(Path(path).read_text())
        manifest = cls(model_id=payload["model_id"], layer_names=payload["layer_names"],
                       batch_description=payload["batch_description"],
                       seed=payload["seed"])
        manifest.layers = [LayerRecord(**rec) for rec in payload["layers"]]
        return manifest

    def verify(self, directory) -> None:
        """Check layer-count consistency and that every referenced file exists
        with a matching checksum."""
        if len(self.layers) != len(self.layer_names):
            raise CaptureError("manifest layer records do not match layer names")
        for rec in self.layers:
            path = Path(directory) / rec.file
            if not path.exists():
                raise CaptureError(f"missing mapping file {rec.file}")
            if _sha256(path) != rec.sha256:
                raise CaptureError(f"checksum mismatch for {rec.file}")


def _sha256(path) -> str:
    digest = hashlib.sha256()
    digest.update(Path(path).read_bytes())
    return digest.hexdigest()


def find_normalization_layers(model: nn.Module) -> list[tuple[str, nn.LayerNorm]]:
    """All LayerNorm submodules in registration (network) order."""
    return [(name, module) for name, module in model.named_modules()
            if isinstance(module, nn.LayerNorm)]


def _pre_affine_targets(module: nn.LayerNorm, y: torch.Tensor) -> torch.Tensor:
    eps = module.eps
    w = module.weight.detach() if module.weight is not None \
        else torch.ones(module.normalized_shape[-1], dtype=y.dtype)
    b = module.bias.detach() if module.bias is not None \
        else torch.zeros(module.normalized_shape[-1], dtype=y.dtype)
    return (y - b) / (w + eps)


def _sanity_check(name: str, x: torch.Tensor, y_pre: torch.Tensor, eps: float) -> tuple:
    """Recompute the normalization from the captured inputs and compare against
    the inverted targets; also gather per-token output statistics."""
    x64 = x.double()
    mu = x64.mean(dim=-1, keepdim=True)
    var = x64.var(dim=-1, unbiased=False, keepdim=True)
    recomputed = (x64 - mu) / torch.sqrt(var + eps)
    drift = float((recomputed - y_pre.double()).abs().max())
    if drift > 1e-4:
        raise CaptureError(f"{name}: inverted targets drift {drift:.2e} from "
                           "recomputed normalization (> 1e-4)")
    token_means = y_pre.double().mean(dim=-1)
    token_vars = y_pre.double().var(dim=-1, unbiased=False)
    return (float(token_means.abs().max()), float(token_vars.min()),
            float(token_vars.max()))


def extract(model: nn.Module, batch: torch.Tensor, out_dir,
            samples_per_layer: int = 50_000, seed: int = 0,
            model_id: str = "custom") -> ExtractionManifest:
    """Run one forward pass, capture every LayerNorm, and write one mapping
    file per layer plus ``manifest.json``.

    Sampling over the pooled (token, feature) cells is uniform without
    replacement and deterministic given ``seed``. Layers with fewer cells than
    ``samples_per_layer`` are an error; reduce the target or grow the batch.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    layers = find_normalization_layers(model)
    if not layers:
        raise CaptureError("model contains no LayerNorm modules")

    captured: dict[str, tuple[torch.Tensor, torch.Tensor]] = {}
    handles = []

    def make_hook(layer_name):
        def hook(module, inputs, output):
            if not inputs or not isinstance(output, torch.Tensor):
                raise CaptureError(f"{layer_name}: unexpected hook signature")
            captured[layer_name] = (inputs[0].detach(), output.detach())

        return hook

    for name, module in layers:
        handles.append(module.register_forward_hook(make_hook(name)))
    try:
        model.eval()
        with torch.no_grad():
            model(batch)
    finally:
        for handle in handles:
            handle.remove()

    missing = [name for name, _ in layers if name not in captured]
    if missing:
        raise CaptureError(f"no activations captured for {missing}")

    manifest = ExtractionManifest(
        model_id=model_id,
        layer_names=[name for name, _ in layers],
        batch_description=f"tensor{tuple(batch.shape)} dtype={batch.dtype}",
        seed=seed,
    )
    for index, (name, module) in enumerate(layers):
        x, y = captured[name]
        y_pre = _pre_affine_targets(module, y)
        max_abs_mean, min_var, max_var = _sanity_check(name, x, y_pre, module.eps)
        x_cells = x.reshape(-1).double().numpy()
        y_cells = y_pre.reshape(-1).double().numpy()
        if x_cells.size < samples_per_layer:
            raise CaptureError(
                f"{name}: {x_cells.size} cells < samples_per_layer={samples_per_layer}")
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))
        chosen = rng.choice(x_cells.size, size=samples_per_layer, replace=False)
        dataset = MappingDataset(name, x_cells[chosen], y_cells[chosen],
                                 split_tag="full", provenance="extracted")
        filename = f"{name.replace('/', '_')}.snmap"
        save_mappings(dataset, out / filename)
        manifest.layers.append(LayerRecord(
            name=name, file=filename, samples=samples_per_layer, eps=module.eps,
            sha256=_sha256(out / filename), max_abs_token_mean=max_abs_mean,
            min_token_var=min_var, max_token_var=max_var))
    manifest.save(out / "manifest.json")
    manifest.verify(out)
    return manifest
