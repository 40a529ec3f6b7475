"""Save ImageNet backbones as ``<backbone>.keras`` files for ``histoens``.

Usage: python scripts/fetch_weights.py OUT_DIR [--input-size 128]

Needs tensorflow and network access to the Keras weight store. Each model is
saved headless at the configured input size; feature extraction then cuts at
the last pooling layer (VGG: block5_pool, DenseNet: global average pool) or
takes the final map as-is (MobileNet, 4 x 4 x 1024 at 128 px).
"""

import argparse
from pathlib import Path

BUILDERS = {
    "vgg16": ("VGG16", {}),
    "vgg19": ("VGG19", {}),
    "mobilenet": ("MobileNet", {}),
    "densenet169": ("DenseNet169", {"pooling": "avg"}),
    "densenet201": ("DenseNet201", {"pooling": "avg"}),
}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--input-size", type=int, default=128)
    ap.add_argument("--only", nargs="*", choices=sorted(BUILDERS))
    args = ap.parse_args(argv)

    from tensorflow import keras

    args.out_dir.mkdir(parents=True, exist_ok=True)
    for name in args.only or BUILDERS:
        cls, extra = BUILDERS[name]
        model = getattr(keras.applications, cls)(
            include_top=False, weights="imagenet", input_shape=(args.input_size, args.input_size, 3), **extra)
        path = args.out_dir / f"{name}.keras"
        model.save(path)
        print(f"{name}: {path} output {model.output_shape}")


if __name__ == "__main__":
    main()
