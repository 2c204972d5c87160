"""
Procedural multi-rater benchmark.

Every sample is an ambiguous-boundary blob image with R annotations produced by simulated raters whose
styles go from conservative (eroded masks) to aggressive (dilated masks). All artifacts are a pure function
of the synthgen config and its master seed.
"""
from dataclasses import dataclass, field, asdict
from functools import partial
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage
from scipy.stats import spearmanr
from tqdm import tqdm
from tqdm.contrib.concurrent import process_map

from dpersona import common
from dpersona.common import ContractViolation, ConfigurationError
from dpersona.evaluation.metrics import dice

GENERATOR_VERSION = "1.0"
MIN_FOREGROUND = 16
MAX_RETRIES = 10
BAND_WIDTH = 3.0
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class RaterProfile:
    rank_index: int
    boundary_offset: float
    deformation_amplitude: float = 0.0
    flip_noise: float = 0.0

    def __post_init__(self):
        if self.rank_index < 0:
            raise ConfigurationError(f"rank_index must be >= 0, got {self.rank_index}")
        if not 0.0 <= self.flip_noise <= 0.05:
            raise ConfigurationError(f"flip_noise must be in [0, 0.05], got {self.flip_noise}")
        if self.deformation_amplitude < 0:
            raise ConfigurationError(f"deformation_amplitude must be >= 0, got {self.deformation_amplitude}")


def validate_profiles(profiles: List[RaterProfile]):
    if [p.rank_index for p in profiles] != list(range(len(profiles))):
        raise ConfigurationError("Rater profiles must be listed in rank order 0..R-1")
    offsets = [p.boundary_offset for p in profiles]
    if any(b <= a for a, b in zip(offsets, offsets[1:])):
        raise ConfigurationError(f"boundary_offset must be strictly increasing with rank, got {offsets}")


def default_profiles(num_raters: int, offset_range: float = 2.0, deformation_amplitude: float = 1.0,
                     flip_noise: float = 0.02) -> List[RaterProfile]:
    """
    Evenly spaced offsets in [-offset_range, offset_range]: rank 0 erodes the most, rank R-1 dilates the most.
    """
    if num_raters < 2:
        raise ConfigurationError(f"At least two raters are required, got {num_raters}")
    offsets = np.linspace(-offset_range, offset_range, num_raters)
    return [RaterProfile(i, float(o), deformation_amplitude, flip_noise) for i, o in enumerate(offsets)]


def profiles_from_config(cfg: dict) -> List[RaterProfile]:
    if cfg.get('profiles'):
        profiles = [RaterProfile(i, **p) for i, p in enumerate(cfg['profiles'])]
        if len(profiles) != cfg['num_raters']:
            raise ConfigurationError(f"{len(profiles)} profiles given for {cfg['num_raters']} raters")
    else:
        profiles = default_profiles(cfg['num_raters'], cfg['offset_range'], cfg['deformation_amplitude'], cfg['flip_noise'])
    validate_profiles(profiles)
    return profiles


@dataclass(frozen=True)
class ShapeConfig:
    radius_range: Tuple[float, float] = (0.12, 0.22)
    fourier_scale: float = 0.08
    harmonics: Tuple[int, ...] = (2, 3, 4)
    blur_range: Tuple[float, float] = (1.0, 3.0)
    noise_std: float = 0.3

    @classmethod
    def from_config(cls, cfg: dict) -> 'ShapeConfig':
        return cls(radius_range=tuple(cfg['radius_range']), fourier_scale=cfg['fourier_scale'],
                   blur_range=tuple(cfg['blur_range']), noise_std=cfg['noise_std'])


@dataclass
class ShapeParams:
    center: Tuple[float, float]
    radii: Tuple[float, float]
    angle: float
    coefficients: np.ndarray  # [len(harmonics), 2] cosine / sine amplitudes
    harmonics: Tuple[int, ...]
    blur_sigma: float = 0.0
    contrast: float = 0.0


@dataclass
class BaseShape:
    mask: np.ndarray
    image: np.ndarray
    params: ShapeParams


@dataclass
class MultiRaterSample:
    image: np.ndarray          # [H, W] float32, zero mean / unit variance
    annotations: np.ndarray    # [R, H, W] uint8
    true_mask: np.ndarray      # [H, W] uint8, evaluation only
    sample_id: str
    seed: int


@dataclass
class DatasetManifest:
    counts: dict
    height: int
    width: int
    num_raters: int
    profiles: list
    master_seed: int
    generator_version: str = GENERATOR_VERSION
    sample_ids: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)
    config_hash: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> 'DatasetManifest':
        return cls(**d)

    def rater_profiles(self) -> List[RaterProfile]:
        return [RaterProfile(**p) for p in self.profiles]


def _draw_shape_params(rng: np.random.Generator, H: int, W: int, cfg: ShapeConfig) -> ShapeParams:
    size = min(H, W)
    center = (rng.uniform(0.35, 0.65) * H, rng.uniform(0.35, 0.65) * W)
    radii = (rng.uniform(*cfg.radius_range) * size, rng.uniform(*cfg.radius_range) * size)
    angle = rng.uniform(0.0, np.pi)
    scales = np.array([cfg.fourier_scale * 2.0 / k for k in cfg.harmonics])
    coefficients = rng.normal(size=(len(cfg.harmonics), 2)) * scales[:, None]
    return ShapeParams(center, radii, angle, coefficients, tuple(cfg.harmonics))


def star_convex_mask(H: int, W: int, params: ShapeParams) -> np.ndarray:
    """
    Pixels whose normalized elliptic radius lies within the Fourier-perturbed boundary r(phi).
    Zero coefficients give the plain ellipse.
    """
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    dy, dx = yy - params.center[0], xx - params.center[1]
    c, s = np.cos(params.angle), np.sin(params.angle)
    u = (dx * c + dy * s) / params.radii[1]
    v = (-dx * s + dy * c) / params.radii[0]
    phi = np.arctan2(v, u)
    r = np.ones_like(phi)
    for k, (a_k, b_k) in zip(params.harmonics, params.coefficients):
        r += a_k * np.cos(k * phi) + b_k * np.sin(k * phi)
    r = np.maximum(r, 0.2)
    return u * u + v * v <= r * r


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask)
    if n <= 1:
        return mask
    sizes = ndimage.sum(mask, labels, index=np.arange(1, n + 1))
    return labels == (1 + int(np.argmax(sizes)))


def standardize(image: np.ndarray) -> np.ndarray:
    return ((image - image.mean()) / (image.std() + 1e-8)).astype(np.float32)


def generate_base_shape(rng: np.random.Generator, H: int, W: int, cfg: ShapeConfig = ShapeConfig()) -> BaseShape:
    """
    Draws one connected star-convex blob and renders its blurred, noisy, standardized intensity image.
    Degenerate blobs are redrawn from a derived sub-seed, at most MAX_RETRIES times.
    """
    if H < 32 or W < 32:
        raise ContractViolation(f"Images must be at least 32x32, got {H}x{W}")

    for attempt in range(MAX_RETRIES + 1):
        params = _draw_shape_params(rng, H, W, cfg)
        mask = _largest_component(star_convex_mask(H, W, params))
        if mask.sum() >= MIN_FOREGROUND:
            break
        rng = np.random.default_rng([int(rng.integers(0, 2**62)), attempt + 1])
    else:
        raise RuntimeError(f"Could not generate a blob with >= {MIN_FOREGROUND} foreground pixels after {MAX_RETRIES} retries")

    params.blur_sigma = float(rng.uniform(*cfg.blur_range))
    params.contrast = float(rng.uniform(1.0, 2.0))
    intensity = ndimage.gaussian_filter(mask.astype(np.float64) * params.contrast, params.blur_sigma)
    intensity = intensity + rng.normal(0.0, cfg.noise_std, size=(H, W))
    return BaseShape(mask.astype(np.uint8), standardize(intensity), params)


def signed_distance(mask: np.ndarray) -> np.ndarray:
    """
    Half-pixel signed distance to the boundary: negative inside, positive outside.
    """
    mask = mask.astype(bool)
    inside = ndimage.distance_transform_edt(mask)
    outside = ndimage.distance_transform_edt(~mask)
    return np.where(mask, -(inside - 0.5), outside - 0.5)


def offset_mask(mask: np.ndarray, offset: float) -> np.ndarray:
    if offset == 0:
        return mask.astype(bool)
    return signed_distance(mask) < offset


def smooth_warp(mask: np.ndarray, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    H, W = mask.shape
    smoothness = max(H, W) / 8.0
    displacement = ndimage.gaussian_filter(rng.normal(size=(2, H, W)), sigma=(0, smoothness, smoothness))
    displacement *= amplitude / max(np.abs(displacement).max(), 1e-12)
    coords = np.mgrid[0:H, 0:W].astype(np.float64) + displacement
    warped = ndimage.map_coordinates(mask.astype(np.float64), coords, order=1, mode='constant', cval=0.0)
    return warped >= 0.5


def rater_annotate(true_mask: np.ndarray, profile: RaterProfile, rng: np.random.Generator) -> np.ndarray:
    """
    Simulated annotation: smooth warp, then signed morphological offset, then flips inside a band
    around the boundary. Never returns an empty mask.
    """
    if not true_mask.any():
        raise ContractViolation("rater_annotate needs a nonempty true mask")

    mask = true_mask.astype(bool)
    if profile.deformation_amplitude > 0:
        mask = smooth_warp(mask, profile.deformation_amplitude, rng)
    mask = offset_mask(mask, profile.boundary_offset)
    if profile.flip_noise > 0 and mask.any():
        band = np.abs(signed_distance(mask)) < BAND_WIDTH
        mask = mask ^ ((rng.random(mask.shape) < profile.flip_noise) & band)

    if not mask.any():
        depth = ndimage.distance_transform_edt(true_mask.astype(bool))
        mask[np.unravel_index(np.argmax(depth), depth.shape)] = True
    return mask.astype(np.uint8)


def generate_sample(sample_id: str, seed: int, H: int, W: int, profiles: List[RaterProfile],
                    shape_cfg: ShapeConfig = ShapeConfig()) -> MultiRaterSample:
    rng = np.random.default_rng(seed)
    shape = generate_base_shape(rng, H, W, shape_cfg)
    annotations = np.stack([rater_annotate(shape.mask, p, rng) for p in profiles])
    return MultiRaterSample(shape.image, annotations, shape.mask, sample_id, seed)


def _generate_one(args, H, W, profiles, shape_cfg):
    sample_id, seed = args
    return generate_sample(sample_id, seed, H, W, profiles, shape_cfg)


def generate_split(split: str, count: int, master_seed: int, H: int, W: int, profiles: List[RaterProfile],
                   shape_cfg: ShapeConfig = ShapeConfig(), workers: int = 1) -> List[MultiRaterSample]:
    ids = [f"{split}-{i:05d}" for i in range(count)]
    jobs = [(sid, common.derive_seed(master_seed, sid)) for sid in ids]
    fn = partial(_generate_one, H=H, W=W, profiles=profiles, shape_cfg=shape_cfg)
    if workers > 1:
        return process_map(fn, jobs, max_workers=workers, chunksize=8, desc=f"gen {split}")
    return [fn(job) for job in tqdm(jobs, desc=f"gen {split}", leave=False)]


def rater_statistics(annotations: np.ndarray) -> dict:
    """
    Mean foreground area per rater, the rank/area Spearman coefficient and pairwise cross-rater Dice.
    annotations: [N, R, H, W]
    """
    N, R = annotations.shape[:2]
    areas = annotations.reshape(N, R, -1).sum(-1).mean(0)
    rho = spearmanr(np.arange(R), areas).correlation if R > 1 and np.ptp(areas) > 0 else 0.0
    cross = np.eye(R)
    for i in range(R):
        for j in range(i + 1, R):
            cross[i, j] = cross[j, i] = float(np.mean([dice(a[i], a[j]) for a in annotations]))
    return {
        "mean_area": [float(a) for a in areas],
        "rank_area_spearman": float(rho),
        "cross_rater_dice": cross.round(6).tolist(),
    }


def build_dataset(cfg: dict, out_dir: str, force: bool = False, logger: common.Logger = common.EmptyLogger(),
                  config_hash: Optional[str] = None) -> DatasetManifest:
    """
    Generates train/val/test splits from the synthgen config section and writes them as archives
    plus manifest.json under out_dir.
    """
    from dpersona.dataset import save_split, write_manifest

    R = cfg['num_raters']
    if R < 2:
        raise ConfigurationError(f"At least two raters are required, got R={R}")
    for split in SPLITS:
        if cfg[split] < 1:
            raise ConfigurationError(f"Split '{split}' needs at least one sample")
    common.ensure_fresh_dir(out_dir, force=force, logger=logger)

    H, W, seed = cfg['height'], cfg['width'], cfg['seed']
    profiles = profiles_from_config(cfg)
    shape_cfg = ShapeConfig.from_config(cfg)

    manifest = DatasetManifest(
        counts={s: cfg[s] for s in SPLITS}, height=H, width=W, num_raters=R,
        profiles=[asdict(p) for p in profiles], master_seed=seed, config_hash=config_hash,
    )
    for split in SPLITS:
        samples = generate_split(split, cfg[split], seed, H, W, profiles, shape_cfg, workers=cfg.get('workers', 1))
        save_split(out_dir, split, samples)
        manifest.sample_ids[split] = [s.sample_id for s in samples]
        manifest.seeds[split] = [s.seed for s in samples]
        manifest.stats[split] = rater_statistics(np.stack([s.annotations for s in samples]))
        logger.log(f"{split}: {len(samples)} samples, mean rater areas {manifest.stats[split]['mean_area']}")

    rho = manifest.stats['test']['rank_area_spearman']
    if rho < 0.9:
        logger.log_check(f"Rank/area Spearman on the test split is {rho:.3f} (< 0.9)")
    write_manifest(out_dir, manifest)
    return manifest
