"""Regenerate the synthetic smoke datasets under data/."""

import json
from pathlib import Path

from coughpipe.audio import COUGH_LABELS, PRETRAIN_LABELS, Label, load_manifest, write_manifest
from coughpipe.audio import Manifest
from coughpipe.synth import write_dataset

ROOT = Path(__file__).resolve().parent.parent / "data"

SMOKE_CV = {
    "features": {"M": [13], "F": [512, 1024], "S": [70]},
    "classifier": {"conv_filters": [24], "kernel_size": [2], "dropout": [0.1], "dense_units": [16],
                   "batch_size": [64]},
    "train": {"max_epochs": 60, "patience": 10, "dtype": "float32"},
    "seed": 0,
}

SMOKE_TRANSFER = {
    "features": {"M": [13], "F": [512], "S": [70]},
    "classifier": {"learning_rate": [0.001], "batch_size": [64]},
    "train": {"max_epochs": 60, "patience": 15, "dtype": "float32"},
    "pretrain": {"features": {"M": 13, "F": 512, "S": 70}, "conv_filters": [8, 8, 8],
                 "dense_units": [64, 32], "max_epochs": 60, "patience": 15, "learning_rate": 0.001,
                 "batch_size": 32},
    "seed": 0,
}


def main():
    three = write_dataset(ROOT / "smoke3", COUGH_LABELS, 30, seed=1)
    full = load_manifest(three)
    two = [e for e in full if e.label in (Label.TB, Label.COVID19)]
    write_manifest(Manifest(tuple(two), full.root), ROOT / "smoke3" / "manifest_two_class.csv")
    write_dataset(ROOT / "pretrain", PRETRAIN_LABELS, 60, seed=5)
    (ROOT / "smoke_cv.json").write_text(json.dumps(SMOKE_CV, indent=2) + "\n")
    (ROOT / "smoke_transfer.json").write_text(json.dumps(SMOKE_TRANSFER, indent=2) + "\n")


if __name__ == "__main__":
    main()
