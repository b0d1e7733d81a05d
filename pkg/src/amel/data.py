"""Synthetic multi-domain live/spoof data.

Each domain renders the same underlying scene: a smooth radial "face" bump
over a low-amplitude plane-wave background texture. Spoof samples carry a
superimposed periodic grid (the depth-flattening artifact), with a
per-domain period and amplitude. Domains differ in per-channel color gain
and bias, blur radius, background texture frequency and the grid parameters;
the background frequency of one domain deliberately sits near another
domain's grid frequency so a single shared decision rule transfers poorly
across domains while the per-domain rule stays clean.

Depth targets are analytic: a radial bump peaking at exactly 1.0 for live
samples and the all-zero map for spoof samples.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataFormatError


@dataclass(frozen=True)
class DomainSpec:
    """Style and spoof-artifact parameters of one synthetic domain.

    Two specs with equal fields generate identical distributions; the sample
    stream is a pure function of ``rng_seed``.
    """

    domain_id: int
    color_gain: tuple[float, float, float]
    color_bias: tuple[float, float, float]
    blur_radius: float
    texture_freq: float
    grid_period: float
    grid_amplitude: float
    rng_seed: int

    def validate(self) -> None:
        if any(g <= 0 for g in self.color_gain):
            raise ConfigError("color_gain", "gains must be positive")
        if self.blur_radius < 0:
            raise ConfigError("blur_radius", "must be non-negative")
        if self.grid_period <= 0:
            raise ConfigError("grid_period", "must be positive")


@dataclass
class Sample:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    label: int  # 0 = spoof, 1 = live
    depth: np.ndarray  # [1, d, d] float32
    domain_id: int


@dataclass(frozen=True)
class DomainRelevanceKnob:
    """Places the target domain at controlled distance ``delta`` from the
    chosen source; delta=0 clones the source distribution exactly."""

    source_index: int = 0
    delta: float = 0.0

    def validate(self) -> None:
        if self.delta < 0:
            raise ConfigError("relevance_delta", "must be non-negative")
        if self.source_index < 0:
            raise ConfigError("relevance_source", "must be non-negative")


def _render_sample(
    spec: DomainSpec,
    live: bool,
    rng: np.random.Generator,
    image_hw: int,
    depth_hw: int,
) -> Sample:
    H = image_hw
    yy, xx = np.meshgrid(np.linspace(0, 1, H), np.linspace(0, 1, H), indexing="ij")
    cx = 0.5 + rng.uniform(-0.08, 0.08)
    cy = 0.5 + rng.uniform(-0.08, 0.08)
    r0 = rng.uniform(0.26, 0.34)
    face = np.exp(-(((xx - cx) ** 2 + (yy - cy) ** 2)) / (2.0 * r0**2))

    orient = rng.uniform(0, 2 * np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(
        2 * np.pi * spec.texture_freq * (xx * np.cos(orient) + yy * np.sin(orient)) + phase
    )
    base = 0.55 * face + 0.18 * (0.5 + 0.5 * wave) + 0.08

    if not live:
        px, py = rng.uniform(0, 2 * np.pi, 2)
        gx = np.sin(2 * np.pi * xx * H / spec.grid_period + px)
        gy = np.sin(2 * np.pi * yy * H / spec.grid_period + py)
        base = base + spec.grid_amplitude * gx * gy

    noise = rng.normal(0.0, 0.02, size=(3, H, H))
    img = np.empty((3, H, H), dtype=np.float64)
    for c in range(3):
        img[c] = spec.color_gain[c] * base + spec.color_bias[c] + noise[c]
    if spec.blur_radius > 0:
        img = ndimage.gaussian_filter(img, sigma=(0.0, spec.blur_radius, spec.blur_radius))
    img = np.clip(img, 0.0, 1.0).astype(np.float32)

    if live:
        dyy, dxx = np.meshgrid(
            np.linspace(0, 1, depth_hw), np.linspace(0, 1, depth_hw), indexing="ij"
        )
        bump = np.exp(
            -(((dxx - cx) ** 2 + (dyy - cy) ** 2)) / (2.0 * (0.8 * r0) ** 2)
        )
        depth = (bump / bump.max()).astype(np.float32)[None]
    else:
        depth = np.zeros((1, depth_hw, depth_hw), dtype=np.float32)
    return Sample(image=img, label=int(live), depth=depth, domain_id=spec.domain_id)


def generate_domain(
    spec: DomainSpec,
    n_live: int,
    n_spoof: int,
    image_hw: int = 32,
    depth_hw: int = 16,
) -> list[Sample]:
    """Render one domain's samples, fully determined by ``spec.rng_seed``."""
    if n_live < 0 or n_spoof < 0:
        raise ConfigError("sizes", "sample counts must be non-negative")
    spec.validate()
    rng = np.random.default_rng(spec.rng_seed)
    samples = [_render_sample(spec, True, rng, image_hw, depth_hw) for _ in range(n_live)]
    samples += [_render_sample(spec, False, rng, image_hw, depth_hw) for _ in range(n_spoof)]
    return samples


# Per-domain style table; background texture frequencies are chosen to sit
# near a different domain's grid frequency (grid period p -> freq hw/p).
_GAIN_TABLE = [
    (1.25, 0.85, 0.85),
    (0.85, 1.25, 0.85),
    (0.85, 0.85, 1.25),
    (1.15, 1.15, 0.75),
]
_BIAS_TABLE = [
    (0.06, 0.0, 0.0),
    (0.0, 0.06, 0.0),
    (0.0, 0.0, 0.06),
    (0.03, 0.0, 0.03),
]
_BLUR_TABLE = [0.0, 0.6, 1.0, 0.3]
_TEXTURE_TABLE = [4.5, 3.2, 8.0, 6.0]
_PERIOD_TABLE = [4.0, 7.0, 10.0, 5.5]
_AMP_TABLE = [0.22, 0.26, 0.30, 0.24]


def default_source_specs(k: int, seed: int = 0) -> list[DomainSpec]:
    """K well-separated source-domain styles."""
    if k < 1:
        raise ConfigError("num_sources", "need at least one source domain")
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(k):
        j = i % len(_GAIN_TABLE)
        wobble = 1.0 + 0.08 * (i // len(_GAIN_TABLE))
        specs.append(
            DomainSpec(
                domain_id=i,
                color_gain=tuple(g * wobble for g in _GAIN_TABLE[j]),
                color_bias=_BIAS_TABLE[j],
                blur_radius=_BLUR_TABLE[j] * wobble,
                texture_freq=_TEXTURE_TABLE[j] * wobble,
                grid_period=_PERIOD_TABLE[j] * wobble,
                grid_amplitude=_AMP_TABLE[j],
                rng_seed=int(rng.integers(2**32)),
            )
        )
    return specs


def perturb_spec(spec: DomainSpec, delta: float, new_id: int, new_seed: int) -> DomainSpec:
    """Shift a spec by ``delta`` along a fixed style direction."""
    return replace(
        spec,
        domain_id=new_id,
        color_gain=tuple(
            g * (1.0 + delta * d) for g, d in zip(spec.color_gain, (0.3, -0.2, 0.25))
        ),
        color_bias=tuple(b + delta * 0.04 for b in spec.color_bias),
        blur_radius=spec.blur_radius + delta * 0.4,
        texture_freq=spec.texture_freq * (1.0 + delta * 0.3),
        grid_period=spec.grid_period * (1.0 + delta * 0.25),
        grid_amplitude=spec.grid_amplitude * (1.0 - delta * 0.3),
        rng_seed=new_seed,
    )


@dataclass
class DomainData:
    spec: DomainSpec
    images: np.ndarray  # [N, 3, H, W] float32
    labels: np.ndarray  # [N] uint8
    depths: np.ndarray  # [N, 1, d, d] float32

    @property
    def size(self) -> int:
        return self.images.shape[0]


class Dataset:
    """In-memory multi-domain dataset with positional domain indexing."""

    def __init__(self, domains: list[DomainData], image_hw: int, depth_hw: int):
        self.domains = domains
        self.image_hw = image_hw
        self.depth_hw = depth_hw

    @property
    def num_domains(self) -> int:
        return len(self.domains)

    def sample_batch(self, domain: int, n: int, rng: np.random.Generator):
        d = self.domains[domain]
        idx = rng.choice(d.size, size=n, replace=False)
        return d.images[idx], d.labels[idx], d.depths[idx]

    def domain_arrays(self, domain: int):
        d = self.domains[domain]
        return d.images, d.labels, d.depths

    def subset(self, domain_indices: Sequence[int]) -> "Dataset":
        return Dataset(
            [self.domains[i] for i in domain_indices], self.image_hw, self.depth_hw
        )


def _pack_domain(samples: list[Sample], spec: DomainSpec) -> DomainData:
    if samples:
        images = np.stack([s.image for s in samples])
        labels = np.array([s.label for s in samples], dtype=np.uint8)
        depths = np.stack([s.depth for s in samples])
    else:
        images = np.zeros((0, 3, 1, 1), dtype=np.float32)
        labels = np.zeros((0,), dtype=np.uint8)
        depths = np.zeros((0, 1, 1, 1), dtype=np.float32)
    return DomainData(spec=spec, images=images, labels=labels, depths=depths)


def build_dataset(
    specs: Sequence[DomainSpec],
    n_live: int,
    n_spoof: int,
    image_hw: int = 32,
    depth_hw: int = 16,
) -> Dataset:
    domains = [
        _pack_domain(generate_domain(s, n_live, n_spoof, image_hw, depth_hw), s) for s in specs
    ]
    return Dataset(domains, image_hw, depth_hw)


def make_benchmark(
    k: int,
    relevance: DomainRelevanceKnob,
    n_live: int,
    n_spoof: int,
    image_hw: int = 32,
    depth_hw: int = 16,
    seed: int = 0,
) -> Dataset:
    """K source domains plus one target domain derived from source
    ``relevance.source_index`` at style distance ``relevance.delta``.

    The target is the last domain of the returned dataset.
    """
    relevance.validate()
    if relevance.source_index >= k:
        raise ConfigError("relevance_source", f"source index {relevance.source_index} >= K={k}")
    specs = default_source_specs(k, seed=seed)
    target_seed = int(np.random.default_rng(seed + 1).integers(2**32))
    target = perturb_spec(
        specs[relevance.source_index], relevance.delta, new_id=k, new_seed=target_seed
    )
    return build_dataset(list(specs) + [target], n_live, n_spoof, image_hw, depth_hw)


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------

DATASET_MAGIC = b"AMELDS1"
DATASET_VERSION = 1


def write_dataset(dataset: Dataset, path) -> None:
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(
            struct.pack(
                "<5I",
                DATASET_VERSION,
                dataset.num_domains,
                dataset.image_hw,
                dataset.image_hw,
                dataset.depth_hw,
            )
        )
        f.write(struct.pack(f"<{dataset.num_domains}I", *[d.size for d in dataset.domains]))
        for d in dataset.domains:
            s = d.spec
            f.write(
                struct.pack(
                    "<i10dQ",
                    s.domain_id,
                    *s.color_gain,
                    *s.color_bias,
                    s.blur_radius,
                    s.texture_freq,
                    s.grid_period,
                    s.grid_amplitude,
                    s.rng_seed,
                )
            )
        for d in dataset.domains:
            for i in range(d.size):
                f.write(np.ascontiguousarray(d.images[i], dtype="<f4").tobytes())
                f.write(struct.pack("<B", int(d.labels[i])))
                f.write(np.ascontiguousarray(d.depths[i], dtype="<f4").tobytes())


def _read_exact(f, n: int, section: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise DataFormatError(f"unexpected end of dataset file while reading {section}")
    return buf


def read_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        magic = _read_exact(f, len(DATASET_MAGIC), "magic")
        if magic != DATASET_MAGIC:
            raise DataFormatError(f"bad magic {magic!r}; not a dataset file")
        version, k, h, w, d = struct.unpack("<5I", _read_exact(f, 20, "header"))
        if version != DATASET_VERSION:
            raise DataFormatError(f"unsupported dataset version {version}")
        counts = struct.unpack(f"<{k}I", _read_exact(f, 4 * k, "per-domain counts"))
        specs = []
        for i in range(k):
            raw = struct.unpack("<i10dQ", _read_exact(f, 4 + 80 + 8, f"domain {i} spec"))
            specs.append(
                DomainSpec(
                    domain_id=raw[0],
                    color_gain=tuple(raw[1:4]),
                    color_bias=tuple(raw[4:7]),
                    blur_radius=raw[7],
                    texture_freq=raw[8],
                    grid_period=raw[9],
                    grid_amplitude=raw[10],
                    rng_seed=raw[11],
                )
            )
        domains = []
        img_bytes = 3 * h * w * 4
        dep_bytes = d * d * 4
        for i, (spec, n) in enumerate(zip(specs, counts)):
            images = np.empty((n, 3, h, w), dtype=np.float32)
            labels = np.empty((n,), dtype=np.uint8)
            depths = np.empty((n, 1, d, d), dtype=np.float32)
            for j in range(n):
                images[j] = np.frombuffer(
                    _read_exact(f, img_bytes, f"domain {i} sample {j} image"), dtype="<f4"
                ).reshape(3, h, w)
                labels[j] = struct.unpack(
                    "<B", _read_exact(f, 1, f"domain {i} sample {j} label")
                )[0]
                depths[j] = np.frombuffer(
                    _read_exact(f, dep_bytes, f"domain {i} sample {j} depth"), dtype="<f4"
                ).reshape(1, d, d)
            domains.append(DomainData(spec=spec, images=images, labels=labels, depths=depths))
        trailing = f.read(1)
        if trailing:
            raise DataFormatError("trailing bytes after the final sample section")
    return Dataset(domains, h, d)
