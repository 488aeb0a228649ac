"""Write torchvision ResNet weights in the archive format the C++ loader reads.

    python tools/export_torchvision_weights.py resnet101 weights/resnet101.pt
    python tools/export_torchvision_weights.py resnet50 weights/resnet50.pt --random

The scripted module keeps torchvision's parameter and buffer names, which are
the names the C++ encoder registers; the classifier is ignored on load.
"""

import argparse
from pathlib import Path

import torch
import torchvision

DEFAULT_WEIGHTS = {"resnet50": "IMAGENET1K_V1", "resnet101": "IMAGENET1K_V1"}


def export(variant: str, out: Path, random: bool = False, seed: int = 0) -> Path:
    if variant not in DEFAULT_WEIGHTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {sorted(DEFAULT_WEIGHTS)}")
    torch.manual_seed(seed)
    weights = None if random else DEFAULT_WEIGHTS[variant]
    model = getattr(torchvision.models, variant)(weights=weights).eval()
    out.parent.mkdir(parents=True, exist_ok=True)
    torch.jit.script(model).save(str(out))
    return out


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("variant", choices=sorted(DEFAULT_WEIGHTS))
    parser.add_argument("out", type=Path)
    parser.add_argument("--random", action="store_true", help="random initialization instead of ImageNet weights")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    print(export(args.variant, args.out, args.random, args.seed))


if __name__ == "__main__":
    main()
