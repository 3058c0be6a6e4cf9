"""Synthetic embedding generator with known ground-truth correspondence.

Concepts are random unit vectors in a shared latent space; two fixed
full-rank linear maps push them into a fake CLIP space and a fake
multilingual space.  Every emitted vector is Norm(map(z) + noise), so
same-concept vectors cluster and cross-space pairs share latent
identity without any space sharing coordinates.  This makes training
and evaluation verifiable with no real encoder anywhere.
"""

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .bank import EmbeddingBank, LabeledBank, write_labeled_bank
from .numerics import Rng, gaussian, unit_rows


@dataclass
class SynthConfig:
    latent_dim: int = 16
    clip_dim: int = 64
    multi_dim: int = 96
    n_concepts: int = 100
    samples_per_concept: int = 60
    heldout_per_concept: int = 5
    map_noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.latent_dim > min(self.clip_dim, self.multi_dim):
            raise ValueError("latent_dim must not exceed either output dim")
        if self.n_concepts < 2:
            raise ValueError("need at least 2 concepts")
        if min(self.latent_dim, self.samples_per_concept, self.heldout_per_concept) < 1:
            raise ValueError("counts must be >= 1")
        if self.map_noise < 0:
            raise ValueError("map_noise must be >= 0")


@dataclass
class SynthDataset:
    queries_c: LabeledBank
    queries_m: LabeledBank
    image_bank: LabeledBank
    multiling_bank: LabeledBank
    heldout_images: LabeledBank
    heldout_texts: LabeledBank
    config: SynthConfig = field(repr=False, default=None)


def _full_rank_map(rng: Rng, out_dim: int, latent_dim: int) -> np.ndarray:
    for _ in range(5):
        m = gaussian(rng, out_dim * latent_dim, 1.0).reshape(out_dim, latent_dim)
        if np.linalg.matrix_rank(m) == latent_dim:
            return m
    raise RuntimeError("could not draw a full-rank map")


def _emit(concepts, lin_map, per_concept, noise, rng):
    """per_concept noisy observations of each concept, concept-major order."""
    n_concepts, _ = concepts.shape
    out_dim = lin_map.shape[0]
    clean = concepts @ lin_map.T
    reps = np.repeat(clean, per_concept, axis=0)
    eps = gaussian(rng, reps.size, 1.0).reshape(reps.shape) * noise
    data = unit_rows(reps + eps)
    labels = np.repeat(np.arange(n_concepts), per_concept)
    return data.astype(np.float32), labels


def generate(cfg: SynthConfig) -> SynthDataset:
    """Draw the full dataset; identical configs give identical bytes.

    Row i of queries_c and queries_m share one latent draw, mimicking
    one English sentence passing through two encoders; heldout_images
    and heldout_texts are index-paired the same way.
    """
    root = Rng(cfg.seed)
    z = unit_rows(
        gaussian(root.spawn(0), cfg.n_concepts * cfg.latent_dim, 1.0).reshape(
            cfg.n_concepts, cfg.latent_dim
        )
    )
    map_c = _full_rank_map(root.spawn(1), cfg.clip_dim, cfg.latent_dim)
    map_m = _full_rank_map(root.spawn(2), cfg.multi_dim, cfg.latent_dim)

    def labeled(stream, lin_map, per_concept, space, modality, language):
        data, labels = _emit(z, lin_map, per_concept, cfg.map_noise, root.spawn(stream))
        meta = {
            "space": space,
            "modality": modality,
            "language": language,
            "encoder_id": "synthetic",
        }
        return LabeledBank(bank=EmbeddingBank(data=data, meta=meta), labels=labels)

    return SynthDataset(
        queries_c=labeled(3, map_c, cfg.samples_per_concept, "clip", "text", "en"),
        queries_m=labeled(4, map_m, cfg.samples_per_concept, "multilingual", "text", "en"),
        image_bank=labeled(5, map_c, cfg.samples_per_concept, "clip", "image", "zxx"),
        multiling_bank=labeled(6, map_m, cfg.samples_per_concept, "multilingual", "text", "mul"),
        heldout_images=labeled(7, map_c, cfg.heldout_per_concept, "clip", "image", "zxx"),
        heldout_texts=labeled(8, map_m, cfg.heldout_per_concept, "multilingual", "text", "mul"),
        config=cfg,
    )


_FILE_STEMS = (
    ("queries_c", "queries_clip.ueb"),
    ("queries_m", "queries_multi.ueb"),
    ("image_bank", "image_bank.ueb"),
    ("multiling_bank", "multiling_bank.ueb"),
    ("heldout_images", "heldout_images.ueb"),
    ("heldout_texts", "heldout_texts.ueb"),
)


def write_dataset(data: SynthDataset, out_dir) -> dict:
    """Write all banks (+ labels) under out_dir; returns the artifact manifest."""
    import os

    os.makedirs(str(out_dir), exist_ok=True)
    artifacts = {}
    for attr, stem in _FILE_STEMS:
        path = os.path.join(str(out_dir), stem)
        write_labeled_bank(getattr(data, attr), path)
        artifacts[attr] = path
    manifest = {"config": asdict(data.config), "artifacts": artifacts}
    manifest_path = os.path.join(str(out_dir), "dataset.json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest
