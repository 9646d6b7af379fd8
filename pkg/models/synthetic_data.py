import json
import os
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from models import AliTokError
from models.image_io import write_ppm

# --- Config ---
BASE_DIR = os.path.dirname(os.path.abspath(__file__))
OUTPUT_DIR = os.path.join(BASE_DIR, "..", "data", "synthetic")
MANIFEST_NAME = "manifest.parquet"


class DatasetValidationError(AliTokError, ValueError):
    pass


@dataclass
class SyntheticSpec:
    """Class-conditional oriented stripe images; (class, index, seed) -> image is pure."""

    classes: int = 8
    images_per_class: int = 64
    eval_per_class: int = 8
    image_h: int = 32
    image_w: int = 32
    noise_amplitude: float = 0.1
    seed: int = 0
    base_frequency: float = 2.0
    frequency_step: float = 0.5

    def __post_init__(self):
        if self.classes < 1 or self.images_per_class < 2:
            raise DatasetValidationError("SyntheticSpec: need at least 1 class and 2 images per class")
        if not 0 < self.eval_per_class < self.images_per_class:
            raise DatasetValidationError("SyntheticSpec: eval_per_class must leave a non-empty train split")
        if self.noise_amplitude < 0:
            raise DatasetValidationError("SyntheticSpec: noise_amplitude must be non-negative")


def gen_image(spec, class_id, index):
    """Stripes at angle c*pi/C with a class-specific frequency, plus seeded noise."""
    if not 0 <= class_id < spec.classes:
        raise DatasetValidationError(f"class id {class_id} outside [0, {spec.classes})")
    scale = float(max(spec.image_h, spec.image_w))
    ys, xs = np.mgrid[0:spec.image_h, 0:spec.image_w] / scale
    angle = class_id * np.pi / spec.classes
    frequency = spec.base_frequency + class_id * spec.frequency_step
    wave = xs * np.cos(angle) + ys * np.sin(angle)
    channels = [
        0.5 + 0.5 * np.sin(2.0 * np.pi * frequency * wave + 2.0 * np.pi * (k / 3.0 + class_id / spec.classes))
        for k in range(3)
    ]
    image = np.stack(channels, axis=-1)
    if spec.noise_amplitude > 0:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([spec.seed, class_id, index])))
        image = image + rng.uniform(-spec.noise_amplitude, spec.noise_amplitude, image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def build_manifest(spec):
    """One row per image; the last eval_per_class indices of each class form the eval split."""
    rows = []
    for class_id in range(spec.classes):
        for index in range(spec.images_per_class):
            split = "eval" if index >= spec.images_per_class - spec.eval_per_class else "train"
            rows.append({"class_id": class_id, "index": index, "split": split, "seed": spec.seed})
    return pd.DataFrame(rows, columns=["class_id", "index", "split", "seed"])


class SplitValidator:
    """Train/eval manifest QA."""

    @staticmethod
    def validate(manifest, spec):
        print("\n🛡️ Running Split Validation...")
        train = manifest[manifest["split"] == "train"]
        eval_ = manifest[manifest["split"] == "eval"]

        train_keys = set(zip(train["class_id"], train["index"]))
        eval_keys = set(zip(eval_["class_id"], eval_["index"]))
        leak = train_keys & eval_keys
        if leak:
            raise DatasetValidationError(f"Validator Error: images in both splits: {sorted(leak)[:5]}...")

        expected = set(range(spec.classes))
        for name, frame in (("train", train), ("eval", eval_)):
            missing = expected - set(frame["class_id"])
            if missing:
                raise DatasetValidationError(f"Validator Error: classes {sorted(missing)} missing from {name} split")

        if (manifest["seed"] != spec.seed).any():
            raise DatasetValidationError("Validator Error: manifest seed does not match the dataset spec")

        print(f"✅ Split Validation Passed: {len(train):,} train / {len(eval_):,} eval images, disjoint.")
        return True


class SyntheticDataset:
    """Regenerates images on demand from the manifest."""

    def __init__(self, spec, manifest=None):
        self.spec = spec
        self.manifest = build_manifest(spec) if manifest is None else manifest.reset_index(drop=True)
        self._splits = {
            name: frame.reset_index(drop=True)
            for name, frame in self.manifest.groupby("split", sort=True)
        }
        self._cache = {}

    @classmethod
    def load(cls, data_dir, spec):
        path = os.path.join(data_dir, MANIFEST_NAME)
        if not os.path.exists(path):
            return cls(spec)
        manifest = pd.read_parquet(path)
        SplitValidator.validate(manifest, spec)
        return cls(spec, manifest)

    def split(self, name):
        if name not in self._splits:
            raise DatasetValidationError(f"unknown split {name!r}; have {sorted(self._splits)}")
        return self._splits[name]

    def split_size(self, name):
        return len(self.split(name))

    def image(self, class_id, index):
        key = (int(class_id), int(index))
        if key not in self._cache:
            self._cache[key] = gen_image(self.spec, *key)
        return self._cache[key]

    def images(self, name, positions=None):
        frame = self.split(name)
        if positions is not None:
            frame = frame.iloc[np.asarray(positions)]
        return np.stack([self.image(c, i) for c, i in zip(frame["class_id"], frame["index"])])

    def labels(self, name, positions=None):
        frame = self.split(name)
        if positions is not None:
            frame = frame.iloc[np.asarray(positions)]
        return frame["class_id"].to_numpy(dtype=np.int64)


class SyntheticDataPreparer:
    """Writes the split manifest, metadata and per-class PPM previews."""

    def __init__(self, spec, output_dir=OUTPUT_DIR):
        self.spec = spec
        self.output_dir = output_dir
        os.makedirs(self.output_dir, exist_ok=True)

    def run_pipeline(self):
        print("🚀 Starting Synthetic Data Pipeline...")

        print("STEP 1: Building split manifest...")
        manifest = build_manifest(self.spec)
        SplitValidator.validate(manifest, self.spec)

        print("STEP 2: Exporting manifest to Parquet...")
        manifest_path = os.path.join(self.output_dir, MANIFEST_NAME)
        manifest.to_parquet(manifest_path, index=False)

        print("STEP 3: Writing per-class previews...")
        preview_dir = os.path.join(self.output_dir, "previews")
        for class_id in range(self.spec.classes):
            write_ppm(gen_image(self.spec, class_id, 0), os.path.join(preview_dir, f"class{class_id}.ppm"))

        with open(os.path.join(self.output_dir, "dataset_metadata.json"), "w") as f:
            json.dump({"spec": asdict(self.spec), "rows": len(manifest)}, f, indent=4, sort_keys=True)

        print(f"💾 Success! Manifest and previews ready at: {self.output_dir}")
        return SyntheticDataset(self.spec, manifest)
