"""On-disk dataset format and loaders.

A dataset directory holds one ``.npz`` container per sample (arrays: image,
intensity, consensus) plus a plain-text ``manifest.txt``. The manifest
records the generation parameters as a JSON header line and one
whitespace-separated record per sample: id, seed, split, coverage,
has_cirrus. Regenerating from the recorded seeds reproduces every sample
bit for bit.
"""

import dataclasses
import json
from pathlib import Path

import numpy as np

from .synth import AnnotatorSpec, CirrusParams, CirrusSample, generate_cirrus_sample

MANIFEST_NAME = "manifest.txt"
SPLITS = ("train", "val", "test")


def params_to_dict(params: CirrusParams) -> dict:
    d = dataclasses.asdict(params)
    d["annotators"] = [dataclasses.asdict(a) for a in params.annotators]
    return d


def params_from_dict(d: dict) -> CirrusParams:
    d = dict(d)
    d["annotators"] = tuple(AnnotatorSpec(**a) for a in d.get("annotators", []))
    return CirrusParams(**d)


def split_sizes(n, fractions=(0.7, 0.15, 0.15)):
    """Split rule: train and val round down, test takes the remainder."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {fractions}")
    train = int(n * fractions[0])
    val = int(n * fractions[1])
    return train, val, n - train - val


def save_sample(directory, sample_id, sample: CirrusSample):
    path = Path(directory) / f"{sample_id}.npz"
    np.savez(path, image=sample.image, intensity=sample.intensity,
             consensus=sample.consensus, seed=np.int64(sample.seed),
             has_cirrus=np.bool_(sample.has_cirrus))
    return path


def load_sample(path) -> CirrusSample:
    with np.load(path) as f:
        return CirrusSample(image=f["image"], intensity=f["intensity"],
                            consensus=f["consensus"], seed=int(f["seed"]),
                            has_cirrus=bool(f["has_cirrus"]))


def sample_seed(base_seed, index):
    return int(base_seed) * 1_000_003 + int(index)


def make_dataset(n, out_path, split=(0.7, 0.15, 0.15),
                 params: CirrusParams | None = None, base_seed=0) -> Path:
    """Generate and persist n samples plus a manifest; returns the manifest path."""
    if n < 1:
        raise ValueError(f"need n >= 1 samples, got {n}")
    if params is None:
        params = CirrusParams()
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    n_train, n_val, n_test = split_sizes(n, split)
    assignments = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test

    records = []
    for i in range(n):
        seed = sample_seed(base_seed, i)
        sample = generate_cirrus_sample(seed, params=params)
        sample_id = f"sample_{i:05d}"
        save_sample(out, sample_id, sample)
        cov = float((sample.consensus >= 0.5).mean())
        records.append((sample_id, seed, assignments[i], cov, sample.has_cirrus))

    n_with = sum(1 for r in records if r[4])
    covs = [r[3] for r in records if r[4]]
    stats = {
        "n": n,
        "prevalence": n_with / n,
        "mean_coverage_when_present": float(np.mean(covs)) if covs else 0.0,
    }
    manifest = out / MANIFEST_NAME
    with open(manifest, "w") as f:
        f.write("# cirrusseg dataset manifest v1\n")
        f.write(f"# base_seed: {base_seed}\n")
        f.write(f"# split_rule: train=floor({split[0]}*n) val=floor({split[1]}*n) test=remainder\n")
        f.write(f"# params: {json.dumps(params_to_dict(params))}\n")
        f.write(f"# stats: {json.dumps(stats)}\n")
        f.write("# columns: id seed split coverage has_cirrus\n")
        for sample_id, seed, assigned, cov, has in records:
            f.write(f"{sample_id} {seed} {assigned} {cov:.6f} {int(has)}\n")
    return manifest


class DatasetManifest:
    """Parsed manifest: per-sample records plus the generation parameters."""

    def __init__(self, directory):
        self.directory = Path(directory)
        manifest = self.directory / MANIFEST_NAME
        if not manifest.exists():
            raise FileNotFoundError(f"no {MANIFEST_NAME} in {self.directory}")
        self.params = None
        self.base_seed = None
        self.stats = {}
        self.records = []
        for line in manifest.read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("params:"):
                    self.params = params_from_dict(json.loads(body[len("params:"):]))
                elif body.startswith("stats:"):
                    self.stats = json.loads(body[len("stats:"):])
                elif body.startswith("base_seed:"):
                    self.base_seed = int(body[len("base_seed:"):])
                continue
            sample_id, seed, assigned, cov, has = line.split()
            self.records.append({
                "id": sample_id,
                "seed": int(seed),
                "split": assigned,
                "coverage": float(cov),
                "has_cirrus": bool(int(has)),
            })

    def split(self, name):
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}; expected one of {SPLITS}")
        return [r for r in self.records if r["split"] == name]

    def sample_path(self, sample_id) -> Path:
        return self.directory / f"{sample_id}.npz"

    def regenerate(self, record) -> CirrusSample:
        return generate_cirrus_sample(record["seed"], params=self.params)


class SplitView:
    """Indexable view over one split; items are (image, consensus) float32
    arrays of shape [H, W]."""

    def __init__(self, manifest: DatasetManifest, split_name):
        self.manifest = manifest
        self.records = manifest.split(split_name)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, idx):
        sample = load_sample(self.manifest.sample_path(self.records[idx]["id"]))
        return sample.image, sample.consensus
