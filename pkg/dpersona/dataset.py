"""
Split archives and in-memory datasets.

Archive format (one file per split, `<split>.safetensors`), written with safetensors' numpy API:

    images       [N, 1, H, W]  float32
    annotations  [N, R, H, W]  uint8 (binary)
    true_masks   [N, H, W]     uint8 (binary)

Sample ids and seeds live in the JSON manifest (`manifest.json`) next to the archives. safetensors stores raw
little-endian buffers with a sorted header, so archives round-trip bit-exactly and identical arrays give
identical bytes. Fused-label archives for crowdsourcing baselines use the same layout with R = 1.
"""
import os
from typing import Iterator, List, Optional, Sequence

import numpy as np
import torch
from safetensors.numpy import save_file, load_file

from dpersona import common
from dpersona.common import ArtifactError, ContractViolation

MANIFEST = "manifest.json"


def split_path(data_dir: str, split: str) -> str:
    return os.path.join(data_dir, f"{split}.safetensors")


def save_arrays(path: str, images: np.ndarray, annotations: np.ndarray, true_masks: np.ndarray):
    if images.ndim != 4 or images.shape[1] != 1:
        raise ContractViolation(f"images must be [N, 1, H, W], got {images.shape}")
    if annotations.shape[0] != images.shape[0] or annotations.shape[2:] != images.shape[2:]:
        raise ContractViolation(f"annotations {annotations.shape} do not match images {images.shape}")
    save_file({
        "images": np.ascontiguousarray(images, dtype=np.float32),
        "annotations": np.ascontiguousarray(annotations, dtype=np.uint8),
        "true_masks": np.ascontiguousarray(true_masks, dtype=np.uint8),
    }, path)


def save_split(data_dir: str, split: str, samples: Sequence) -> str:
    path = split_path(data_dir, split)
    save_arrays(
        path,
        np.stack([s.image for s in samples])[:, None],
        np.stack([s.annotations for s in samples]),
        np.stack([s.true_mask for s in samples]),
    )
    return path


def write_manifest(data_dir: str, manifest):
    common.write_json(os.path.join(data_dir, MANIFEST), manifest.to_dict())


def load_manifest(data_dir: str):
    from dpersona.synthgen import DatasetManifest
    path = os.path.join(data_dir, MANIFEST)
    if not os.path.exists(path):
        raise ArtifactError(f"No dataset manifest at {path}; run gen-data first")
    return DatasetManifest.from_dict(common.read_json(path))


class MultiRaterDataset(torch.utils.data.Dataset):
    """
    Class to hold one split in memory.
    Args:
    - images: [N, 1, H, W] float32
    - annotations: [N, R, H, W] uint8, rater order is the dataset contract (rank 0 first)
    - true_masks: [N, H, W] uint8
    - sample_ids: list of N strings
    """
    def __init__(self, images: np.ndarray, annotations: np.ndarray, true_masks: np.ndarray,
                 sample_ids: Optional[List[str]] = None, name: str = "custom"):
        self.name = name
        self.images = torch.from_numpy(np.asarray(images, dtype=np.float32))
        self.annotations = torch.from_numpy(np.asarray(annotations, dtype=np.uint8))
        self.true_masks = torch.from_numpy(np.asarray(true_masks, dtype=np.uint8))
        self.sample_ids = list(sample_ids) if sample_ids is not None else [f"{name}-{i:05d}" for i in range(len(self.images))]
        if not (len(self.images) == len(self.annotations) == len(self.true_masks) == len(self.sample_ids)):
            raise ContractViolation("images, annotations, true_masks and sample_ids must have equal length")

    @classmethod
    def load(cls, data_dir: str, split: str, archive: Optional[str] = None) -> 'MultiRaterDataset':
        path = archive if archive is not None else split_path(data_dir, split)
        if not os.path.exists(path):
            raise ArtifactError(f"Missing archive {path}")
        arrays = load_file(path)
        ids = None
        manifest_path = os.path.join(data_dir, MANIFEST)
        if os.path.exists(manifest_path):
            ids = common.read_json(manifest_path)['sample_ids'].get(split)
        return cls(arrays['images'], arrays['annotations'], arrays['true_masks'], ids, name=split)

    @classmethod
    def from_samples(cls, samples: Sequence, name: str = "custom") -> 'MultiRaterDataset':
        return cls(
            np.stack([s.image for s in samples])[:, None],
            np.stack([s.annotations for s in samples]),
            np.stack([s.true_mask for s in samples]),
            [s.sample_id for s in samples], name=name,
        )

    def save(self, path: str):
        save_arrays(path, self.images.numpy(), self.annotations.numpy(), self.true_masks.numpy())

    def with_annotations(self, annotations: np.ndarray, name: Optional[str] = None) -> 'MultiRaterDataset':
        return MultiRaterDataset(self.images.numpy(), annotations, self.true_masks.numpy(), self.sample_ids,
                                 name=name or self.name)

    @property
    def num_raters(self) -> int:
        return self.annotations.shape[1]

    @property
    def image_size(self):
        return tuple(self.images.shape[-2:])

    def __len__(self):
        return len(self.images)

    def __getitem__(self, idx):
        return self.images[idx], self.annotations[idx], idx

    def __repr__(self) -> str:
        return f"{self.name}(N={len(self)}, R={self.num_raters}, HxW={self.image_size})"


def augment_batch(images: torch.Tensor, annotations: torch.Tensor, rng: np.random.Generator):
    """
    Random flips and 90-degree rotations applied jointly to each image and all of its annotations.
    """
    images, annotations = images.clone(), annotations.clone()
    for b in range(images.shape[0]):
        k = int(rng.integers(4))
        flip = bool(rng.integers(2))
        img, ann = images[b], annotations[b]
        if flip:
            img, ann = img.flip(-1), ann.flip(-1)
        if k and img.shape[-1] == img.shape[-2]:
            img, ann = torch.rot90(img, k, (-2, -1)), torch.rot90(ann, k, (-2, -1))
        images[b], annotations[b] = img, ann
    return images, annotations


def iterate_batches(dataset: MultiRaterDataset, batch_size: int, rng: Optional[np.random.Generator] = None,
                    shuffle: bool = True, augment: bool = False) -> Iterator:
    """
    Yields (images [B,1,H,W] float, annotations [B,R,H,W] float, indices [B]) in a seeded order.
    """
    order = np.arange(len(dataset))
    if shuffle:
        if rng is None:
            raise ContractViolation("Shuffled batches need a seeded rng")
        order = rng.permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        idx = torch.from_numpy(order[start:start + batch_size])
        images, annotations = dataset.images[idx], dataset.annotations[idx]
        if augment:
            images, annotations = augment_batch(images, annotations, rng)
        yield images, annotations.float(), idx
