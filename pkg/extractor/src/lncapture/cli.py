"""Capture CLI: run a model forward pass and emit per-layer mapping files."""

from __future__ import annotations

import argparse
import sys

import torch

from .capture import extract
from .models import load_model, random_batch


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="lncapture",
        description="Capture LayerNorm mappings from a vision transformer")
    parser.add_argument("--model", default="torchvision/vit_b_16",
                        help="model id, e.g. torchvision/vit_b_16[:pretrained]")
    parser.add_argument("--out", required=True)
    parser.add_argument("--samples", type=int, default=50_000,
                        help="points sampled per layer (default 50000)")
    parser.add_argument("--batch-size", type=int, default=2)
    parser.add_argument("--input-shape", default="3,224,224",
                        help="comma-separated input shape without the batch axis")
    parser.add_argument("--images", default=None,
                        help="optional .pt tensor file to use instead of random inputs")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    model = load_model(args.model)
    if args.images is not None:
        batch = torch.load(args.images, weights_only=True)
        if not isinstance(batch, torch.Tensor):
            print("error: --images must contain a tensor", file=sys.stderr)
            return 1
    else:
        shape = tuple(int(v) for v in args.input_shape.split(","))
        batch = random_batch(shape, args.batch_size, args.seed)
    manifest = extract(model, batch, args.out, samples_per_layer=args.samples,
                       seed=args.seed, model_id=args.model)
    print(f"captured {len(manifest.layers)} normalization layers -> {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
