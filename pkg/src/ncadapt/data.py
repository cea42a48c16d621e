"""Synthetic multi-domain segmentation benchmark and binary tensor files.

Each domain is a deterministic recipe: soft-edged ellipse fields thresholded
at 0.5 for labels, with per-domain intensity transforms, Gaussian noise, a
smooth bias field, and its own resolution. Domains share label semantics but
shift the input distribution, which is what puts pressure on continual
training. Images and labels travel as RTI files: "RTI1" magic, u8 rank,
little-endian u32 extents, then row-major little-endian float32 payload.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Rng

RTI_MAGIC = b"RTI1"


class DataError(Exception):
    """Bad or inconsistent data files / recipes."""


@dataclass(frozen=True)
class DomainSpec:
    """Recipe for one synthetic domain; generation is a pure function of it.

    `polarity` controls which side of the intensity axis the blobs live on:
    "bright" keeps the soft field as is, "dark" inverts it (1 - field) so
    blobs are darker than the background, "mixed" flips a per-case coin.
    Labels always mark the blob region, whatever the polarity.
    """

    name: str
    resolution: tuple = (32, 32)
    n_cases: int = 20
    n_ellipses: tuple = (1, 2)
    radius_range: tuple = (0.14, 0.30)
    edge_softness: float = 0.10
    intensity_scale: float = 1.0
    intensity_shift: float = 0.0
    noise_sigma: float = 0.02
    bias_amplitude: float = 0.0
    polarity: str = "bright"
    seed: int = 0

    def __post_init__(self):
        for e in self.resolution:
            if e < 16:
                raise ValueError(f"domain resolution extents must be >= 16, got {self.resolution}")
        if self.n_cases < 1:
            raise ValueError("n_cases must be >= 1")
        lo, hi = self.n_ellipses
        if not 1 <= lo <= hi:
            raise ValueError("n_ellipses range must satisfy 1 <= lo <= hi")
        if self.polarity not in ("bright", "dark", "mixed"):
            raise ValueError(f"polarity must be bright, dark, or mixed, got {self.polarity!r}")

    def canonical_json(self) -> str:
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        d["n_ellipses"] = list(self.n_ellipses)
        d["radius_range"] = list(self.radius_range)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    def spec_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def _ellipse_field(spec: DomainSpec, rng: Rng) -> np.ndarray:
    h, w = spec.resolution
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    count = rng.integers(spec.n_ellipses[0], spec.n_ellipses[1])
    field = np.zeros((h, w), dtype=np.float64)
    for _ in range(count):
        cy, cx = rng.uniform((2,), 0.25, 0.75)
        ry = rng.uniform((1,), *spec.radius_range)[0]
        rx = rng.uniform((1,), *spec.radius_range)[0]
        r = np.sqrt(((gy - cy) / ry) ** 2 + ((gx - cx) / rx) ** 2)
        contrib = 1.0 / (1.0 + np.exp((r - 1.0) / spec.edge_softness))
        field = np.maximum(field, contrib)
    return field


def _bias_field(spec: DomainSpec, rng: Rng) -> np.ndarray:
    h, w = spec.resolution
    if spec.bias_amplitude == 0.0:
        return np.zeros((h, w))
    gy, gx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    u, v, s = rng.uniform((3,), -1.0, 1.0)
    return spec.bias_amplitude * (u * gy + v * gx + s * gy * gx)


def gen_case(spec: DomainSpec, case_index: int):
    """One (image, label) pair; retries the ellipse placement if the label
    would come out empty."""
    base = Rng(spec.seed).derive("domain", spec.name)
    for attempt in range(10):
        rng = base.derive("case", case_index, attempt)
        field = _ellipse_field(spec, rng)
        label = (field > 0.5).astype(np.float32)
        if label.any():
            break
    else:
        raise DataError(f"domain {spec.name!r} case {case_index}: no foreground after 10 tries")
    if spec.polarity == "dark":
        field = 1.0 - field
    elif spec.polarity == "mixed" and rng.uniform((1,))[0] < 0.5:
        field = 1.0 - field
    noise = rng.normal(spec.resolution, spec.noise_sigma) if spec.noise_sigma > 0 else 0.0
    image = spec.intensity_scale * field + spec.intensity_shift + _bias_field(spec, rng) + noise
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return image, label


def gen_domain(spec: DomainSpec):
    """All cases of one domain, bitwise reproducible from the spec."""
    return [gen_case(spec, i) for i in range(spec.n_cases)]


def split_dataset(cases, test_fraction: float = 0.2, seed: int = 0):
    """Seeded disjoint, exhaustive train/test split over case indices."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test fraction must be in (0, 1), got {test_fraction}")
    n = len(cases)
    if n < 5:
        raise ValueError(f"need at least 5 cases to split, got {n}")
    order = [int(i) for i in Rng(seed).derive("split").permutation(n)]
    n_test = max(1, int(round(n * test_fraction)))
    test = sorted(order[:n_test])
    train = sorted(order[n_test:])
    return train, test


# ---------------------------------------------------------------------------
# RTI files


def rti_write(path, array) -> None:
    arr = np.asarray(array, dtype="<f4")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"refusing to write non-finite values to {path}")
    header = RTI_MAGIC + struct.pack("<B", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr).tobytes())


def rti_read(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != RTI_MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r}")
    rank = blob[4]
    offset = 5 + 4 * rank
    if len(blob) < offset:
        raise DataError(f"{path}: truncated header")
    extents = struct.unpack(f"<{rank}I", blob[5:offset])
    n = int(np.prod(extents)) if rank else 1
    payload = blob[offset:]
    if len(payload) != 4 * n:
        raise DataError(f"{path}: payload holds {len(payload)} bytes, expected {4 * n}")
    return np.frombuffer(payload, dtype="<f4").reshape(extents).copy()


# ---------------------------------------------------------------------------
# dataset directory


def default_benchmark(seed: int) -> list:
    """Three domains with increasing shift; the third also changes resolution.

    The first domain mixes both blob polarities so a model trained on it has
    seen the whole appearance family; the second shifts to dim bright-only
    blobs, the third to dark-only blobs at a different resolution. Training
    on the third alone is what erases bright-blob behavior from an
    unprotected model.
    """
    return [
        DomainSpec(name="base", resolution=(32, 32), n_cases=20,
                   radius_range=(0.16, 0.30), polarity="mixed",
                   intensity_scale=0.90, intensity_shift=0.05,
                   noise_sigma=0.05, bias_amplitude=0.08, seed=seed),
        DomainSpec(name="dim", resolution=(32, 32), n_cases=20,
                   radius_range=(0.14, 0.26), polarity="bright",
                   intensity_scale=0.50, intensity_shift=0.32,
                   noise_sigma=0.07, bias_amplitude=0.12, seed=seed + 1),
        DomainSpec(name="inverted", resolution=(48, 40), n_cases=20,
                   radius_range=(0.18, 0.32), polarity="dark",
                   intensity_scale=0.90, intensity_shift=0.05,
                   noise_sigma=0.03, bias_amplitude=0.05, seed=seed + 2),
    ]


def write_dataset(data_dir, specs, test_fraction: float = 0.2, seed: int = 0) -> dict:
    """Generate every domain, persist cases and the split manifest."""
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"schema_version": 1, "seed": seed, "domains": []}
    for spec in specs:
        cases = gen_domain(spec)
        train, test = split_dataset(cases, test_fraction, seed=Rng(seed).derive(spec.name).stream)
        ddir = data_dir / spec.name
        ddir.mkdir(parents=True, exist_ok=True)
        for i, (img, lbl) in enumerate(cases):
            rti_write(ddir / f"case_{i:03d}_img.rti", img)
            rti_write(ddir / f"case_{i:03d}_lbl.rti", lbl)
        manifest["domains"].append(
            {
                "name": spec.name,
                "resolution": list(spec.resolution),
                "n_cases": spec.n_cases,
                "spec_hash": spec.spec_hash(),
                "spec": json.loads(spec.canonical_json()),
                "split": {"train": train, "test": test},
            }
        )
    with open(data_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise DataError(f"no dataset manifest at {path}")
    with open(path) as fh:
        return json.load(fh)


def load_cases(data_dir, domain: str, indices):
    ddir = Path(data_dir) / domain
    out = []
    for i in indices:
        img = rti_read(ddir / f"case_{i:03d}_img.rti")
        lbl = rti_read(ddir / f"case_{i:03d}_lbl.rti")
        bad = np.setdiff1d(np.unique(lbl), [0.0, 1.0])
        if bad.size:
            raise DataError(f"{domain} case {i}: label values outside {{0, 1}}: {bad}")
        out.append((img, lbl))
    return out


def load_split(data_dir, domain: str, part: str):
    manifest = load_manifest(data_dir)
    for entry in manifest["domains"]:
        if entry["name"] == domain:
            return load_cases(data_dir, domain, entry["split"][part])
    raise DataError(f"domain {domain!r} not in dataset manifest")
