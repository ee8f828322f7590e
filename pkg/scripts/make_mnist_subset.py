# -*- coding: utf-8 -*-
# ------------------------------------------------------------------------------
#
#   Copyright 2024 Valory AG
#
#   Licensed under the Apache License, Version 2.0 (the "License");
#   you may not use this file except in compliance with the License.
#   You may obtain a copy of the License at
#
#       http://www.apache.org/licenses/LICENSE-2.0
#
#   Unless required by applicable law or agreed to in writing, software
#   distributed under the License is distributed on an "AS IS" BASIS,
#   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
#   See the License for the specific language governing permissions and
#   limitations under the License.
#
# ------------------------------------------------------------------------------

"""
Write a desk-scale MNIST subset.

Reads the four MNIST IDX files from a directory and writes the first
--train/--test examples of each split as IDX files that the `idx` dataset kind
can load. It is assumed the script is run from the repository root.
"""

from pathlib import Path

import click
from aea.helpers.logging import setup_logger

from packages.valory.weightnorm.data import load_idx, write_idx


_logger = setup_logger("weightnorm.scripts.make_mnist_subset")

SPLITS = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(source: Path, stem: str) -> Path:
    """Raw or gzipped file of a split."""
    for candidate in (source / stem, source / f"{stem}.gz"):
        if candidate.is_file():
            return candidate
    raise click.ClickException(f"Cannot find {stem} in {source}")


@click.command(name="make-mnist-subset")
@click.argument("source", type=click.Path(exists=True, file_okay=False))
@click.argument("destination", type=click.Path(file_okay=False))
@click.option("--train", "train_size", type=int, default=1000, show_default=True, help="Training examples.")
@click.option("--test", "test_size", type=int, default=1000, show_default=True, help="Test examples.")
def main(source: str, destination: str, train_size: int, test_size: int) -> None:
    """Copy the first examples of each MNIST split."""
    for split, size in (("train", train_size), ("test", test_size)):
        images_stem, labels_stem = SPLITS[split]
        images, labels = load_idx(_find(Path(source), images_stem), _find(Path(source), labels_stem))
        write_idx(Path(destination) / images_stem, images[:size], "images")
        write_idx(Path(destination) / labels_stem, labels[:size], "labels")
        _logger.info(f"Wrote {min(size, images.shape[0])} {split} examples to {destination}")


if __name__ == "__main__":
    main()  # pylint: disable=no-value-for-parameter
