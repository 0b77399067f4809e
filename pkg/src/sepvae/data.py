"""Contrastive datasets: synthetic generation, image-folder I/O and splitting.

The synthetic images are grayscale and built from

* common content (both populations): a linear intensity ramp with orientation
  ``theta`` and a soft-edged disk at ``(disk_u, disk_v)`` with radius ``disk_r``;
* salient content (targets only): a bright square whose subtype picks the
  quadrant and whose ``intensity`` is continuous.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ContractViolation, DataLoadError

COMMON_FACTORS = ("theta", "disk_u", "disk_v", "disk_r")
SALIENT_FACTORS = ("intensity",)
# columns of the recorded salient factor vector: sampled intensity plus the
# square centre (u, v), which the subtype determines
SALIENT_COLUMNS = ("intensity", "square_u", "square_v")
SPLITS = ("train", "val", "test")


def _default_common_ranges():
    return {
        "theta": (0.0, 2.0 * math.pi),
        "disk_u": (0.25, 0.75),
        "disk_v": (0.25, 0.75),
        "disk_r": (0.1, 0.22),
    }


def _default_salient_ranges():
    return {"intensity": (0.35, 0.75)}


@dataclass
class DataGenConfig:
    n_background: int = 2000
    n_target: int = 2000
    image_size: tuple = (32, 32)
    n_subtypes: int = 2
    common_factor_ranges: dict = field(default_factory=_default_common_ranges)
    salient_factor_ranges: dict = field(default_factory=_default_salient_ranges)
    noise_std: float = 0.05
    # None keeps float pixels; 8 rounds to k/255 so PNG export is lossless
    bit_depth: int | None = 8
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.common_factor_ranges = {k: tuple(map(float, v)) for k, v in self.common_factor_ranges.items()}
        self.salient_factor_ranges = {k: tuple(map(float, v)) for k, v in self.salient_factor_ranges.items()}
        bad = []
        if self.n_background < 1:
            bad.append("n_background")
        if self.n_target < 1:
            bad.append("n_target")
        if len(self.image_size) != 2 or min(self.image_size) < 4:
            bad.append("image_size")
        if not 1 <= self.n_subtypes <= 4:
            bad.append("n_subtypes")
        if set(self.common_factor_ranges) != set(COMMON_FACTORS):
            bad.append("common_factor_ranges (keys)")
        if set(self.salient_factor_ranges) != set(SALIENT_FACTORS):
            bad.append("salient_factor_ranges (keys)")
        for name, (lo, hi) in {**self.common_factor_ranges, **self.salient_factor_ranges}.items():
            if not lo < hi:
                bad.append(f"range {name}")
        if not self.noise_std >= 0:
            bad.append("noise_std")
        if self.bit_depth not in (None, 8):
            bad.append("bit_depth")
        if bad:
            raise ContractViolation(f"invalid DataGenConfig fields: {', '.join(bad)}")

    @property
    def target_fraction(self):
        return self.n_target / (self.n_background + self.n_target)

    def to_dict(self):
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["common_factor_ranges"] = {k: list(v) for k, v in self.common_factor_ranges.items()}
        d["salient_factor_ranges"] = {k: list(v) for k, v in self.salient_factor_ranges.items()}
        return d

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ContrastiveSample:
    image: np.ndarray
    y: int
    common_factors: np.ndarray | None
    salient_factors: np.ndarray | None
    salient_subtype: int | None


@dataclass
class ContrastiveDataset:
    """Immutable-by-convention arrays for N samples.

    ``salient_factors`` rows are NaN and ``subtypes`` is -1 for background
    samples. ``attributes`` holds per-sample metadata columns (float, NaN =
    missing) used by the probes.
    """

    images: np.ndarray
    y: np.ndarray
    common_factors: np.ndarray | None = None
    salient_factors: np.ndarray | None = None
    subtypes: np.ndarray | None = None
    attributes: dict = field(default_factory=dict)
    filenames: list | None = None

    def __post_init__(self):
        n = len(self.images)
        if self.images.ndim != 4:
            raise ContractViolation("images must be (N, C, H, W)")
        if self.y.shape != (n,):
            raise ContractViolation("labels must be (N,)")
        if not np.isin(self.y, (0, 1)).all():
            raise ContractViolation("labels must be 0 (background) or 1 (target)")
        for name, col in self.attributes.items():
            if len(col) != n:
                raise ContractViolation(f"attribute {name!r} has {len(col)} rows, expected {n}")

    def __len__(self):
        return len(self.y)

    def __getitem__(self, i) -> ContrastiveSample:
        y = int(self.y[i])
        sub = None if self.subtypes is None or y == 0 else int(self.subtypes[i])
        sal = None if self.salient_factors is None or y == 0 else self.salient_factors[i]
        com = None if self.common_factors is None else self.common_factors[i]
        return ContrastiveSample(self.images[i], y, com, sal, sub)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "ContrastiveDataset":
        idx = np.asarray(indices, dtype=np.int64)
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return ContrastiveDataset(
            images=self.images[idx],
            y=self.y[idx],
            common_factors=pick(self.common_factors),
            salient_factors=pick(self.salient_factors),
            subtypes=pick(self.subtypes),
            attributes={k: v[idx] for k, v in self.attributes.items()},
            filenames=None if self.filenames is None else [self.filenames[i] for i in idx],
        )

    def tensors(self):
        return torch.from_numpy(np.ascontiguousarray(self.images, dtype=np.float32)), torch.from_numpy(
            self.y.astype(np.int64)
        )

    def metadata_rows(self):
        rows = []
        for i in range(len(self)):
            row = {"index": i, "y": int(self.y[i])}
            if self.filenames is not None:
                row["filename"] = self.filenames[i]
            for name, col in self.attributes.items():
                v = float(col[i])
                row[name] = None if math.isnan(v) else v
            rows.append(row)
        return rows

    def save_npz(self, path):
        arrays = {"images": self.images, "y": self.y}
        for name in ("common_factors", "salient_factors", "subtypes"):
            if getattr(self, name) is not None:
                arrays[name] = getattr(self, name)
        for name, col in self.attributes.items():
            arrays[f"attr__{name}"] = col
        np.savez_compressed(path, **arrays)

    @classmethod
    def load_npz(cls, path):
        with np.load(path) as z:
            attrs = {k[len("attr__"):]: z[k] for k in z.files if k.startswith("attr__")}
            get = lambda k: z[k] if k in z.files else None  # noqa: E731
            return cls(
                images=z["images"],
                y=z["y"],
                common_factors=get("common_factors"),
                salient_factors=get("salient_factors"),
                subtypes=get("subtypes"),
                attributes=attrs,
            )


@dataclass
class DatasetManifest:
    splits: dict
    rows: list
    config_hash: str | None = None
    config: dict | None = None
    seed: int | None = None

    def __post_init__(self):
        self.splits = {k: [int(i) for i in v] for k, v in self.splits.items()}
        every = sorted(i for v in self.splits.values() for i in v)
        if every != list(range(len(self.rows))):
            raise ContractViolation("splits must be disjoint and cover every sample")

    def indices(self, name):
        return np.asarray(self.splits.get(name, []), dtype=np.int64)

    def to_json(self):
        return json.dumps(
            {
                "config": self.config,
                "config_hash": self.config_hash,
                "seed": self.seed,
                "splits": self.splits,
                "rows": self.rows,
            },
            indent=1,
            sort_keys=True,
        )

    def write(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def read(cls, path):
        d = json.loads(Path(path).read_text())
        return cls(d["splits"], d["rows"], d.get("config_hash"), d.get("config"), d.get("seed"))

    def hash(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def quadrant_box(subtype, image_size):
    """(row0, row1, col0, col1) of the quadrant a subtype's square lives in."""
    h, w = image_size
    q = int(subtype) % 4
    r, c = divmod(q, 2)
    return (r * h // 2, (r + 1) * h // 2, c * w // 2, (c + 1) * w // 2)


def square_box(subtype, image_size):
    """Pixel box of the salient square: half a quadrant wide, centred in it."""
    r0, r1, c0, c1 = quadrant_box(subtype, image_size)
    dh, dw = (r1 - r0) // 4, (c1 - c0) // 4
    return (r0 + dh, r1 - dh, c0 + dw, c1 - dw)


def render(image_size, common, salient=None, subtype=None):
    """Noise-free image from factor values (dicts keyed like the factor names)."""
    h, w = image_size
    yy, xx = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    theta = common["theta"]
    img = 0.25 + 0.25 * ((xx - 0.5) * math.cos(theta) + (yy - 0.5) * math.sin(theta))
    dist = np.hypot(xx - common["disk_u"], yy - common["disk_v"])
    img = img + 0.3 * np.clip((common["disk_r"] - dist) * w + 0.5, 0.0, 1.0)
    if salient is not None:
        r0, r1, c0, c1 = square_box(subtype, image_size)
        img[r0:r1, c0:c1] += salient["intensity"]
    return img


def _uniform(rng, lo_hi):
    lo, hi = lo_hi
    return float(rng.uniform(lo, hi))


def generate_synthetic(config: DataGenConfig):
    """Build ``(dataset, manifest)``; every split lands in ``train`` until :func:`split` is called."""
    n = config.n_background + config.n_target
    h, w = config.image_size
    images = np.empty((n, 1, h, w), dtype=np.float32)
    y = np.zeros(n, dtype=np.int64)
    y[config.n_background:] = 1
    common = np.empty((n, len(COMMON_FACTORS)))
    salient = np.full((n, len(SALIENT_COLUMNS)), np.nan)
    subtypes = np.full(n, -1, dtype=np.int64)

    for i in range(n):
        rng = np.random.default_rng([config.seed, i])
        cf = {k: _uniform(rng, config.common_factor_ranges[k]) for k in COMMON_FACTORS}
        sf = sub = None
        if y[i] == 1:
            sub = (i - config.n_background) % config.n_subtypes
            sf = {k: _uniform(rng, config.salient_factor_ranges[k]) for k in SALIENT_FACTORS}
            r0, r1, c0, c1 = square_box(sub, config.image_size)
            salient[i] = [sf["intensity"], 0.5 * (c0 + c1) / w, 0.5 * (r0 + r1) / h]
            subtypes[i] = sub
        img = render(config.image_size, cf, sf, sub)
        if config.noise_std > 0:
            img = img + rng.normal(0.0, config.noise_std, size=img.shape)
        img = np.clip(img, 0.0, 1.0)
        if config.bit_depth == 8:
            img = np.round(img * 255.0).astype(np.float32) / np.float32(255.0)
        images[i, 0] = img
        common[i] = [cf[k] for k in COMMON_FACTORS]

    attributes = {
        "subtype": np.where(subtypes >= 0, subtypes, np.nan).astype(np.float64),
        "intensity": salient[:, 0].copy(),
        "theta_cos": np.cos(common[:, 0]),
        "theta_sin": np.sin(common[:, 0]),
        "disk_u": common[:, 1].copy(),
        "disk_v": common[:, 2].copy(),
        "disk_r": common[:, 3].copy(),
    }
    dataset = ContrastiveDataset(images, y, common, salient, subtypes, attributes)
    manifest = DatasetManifest(
        {"train": list(range(n)), "val": [], "test": []},
        dataset.metadata_rows(),
        config.hash(),
        config.to_dict(),
        config.seed,
    )
    return dataset, manifest


# Which synthetic attributes are categorical, and which only exist for targets.
SYNTHETIC_ATTRIBUTES = {
    "subtype": ("classification", True),
    "intensity": ("regression", True),
    "theta_cos": ("regression", False),
    "theta_sin": ("regression", False),
    "disk_u": ("regression", False),
    "disk_v": ("regression", False),
    "disk_r": ("regression", False),
}


def _largest_remainder(n, fractions):
    raw = [f * n for f in fractions]
    counts = [int(math.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda k: (-(raw[k] - counts[k]), k))
    for k in order[: n - sum(counts)]:
        counts[k] += 1
    return counts


def split(dataset: ContrastiveDataset, fractions=(0.8, 0.1, 0.1), seed=0, stratify_on_y=True, base=None):
    """Deterministic train/val/test assignment.

    ``base`` (a manifest) supplies config/hash fields to carry over.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ContractViolation(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(dataset)
    if n < 3:
        raise ContractViolation("splitting needs at least 3 samples")
    rng = np.random.default_rng(seed)
    groups = [np.flatnonzero(dataset.y == lab) for lab in (0, 1)] if stratify_on_y else [np.arange(n)]
    out = {k: [] for k in SPLITS}
    for members in groups:
        members = rng.permutation(members)
        start = 0
        for name, count in zip(SPLITS, _largest_remainder(len(members), fractions)):
            out[name].extend(int(i) for i in members[start:start + count])
            start += count
    for name in SPLITS:
        out[name].sort()
    return DatasetManifest(
        out,
        dataset.metadata_rows(),
        None if base is None else base.config_hash,
        None if base is None else base.config,
        seed,
    )


def save_image_folder(dataset: ContrastiveDataset, root):
    """Write ``root/images/*.png`` and ``root/labels.csv`` (8-bit PNGs)."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    names = list(dataset.attributes)
    with open(root / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "y", *names])
        for i in range(len(dataset)):
            fname = f"{i:06d}.png"
            img = np.round(np.clip(dataset.images[i], 0, 1) * 255).astype(np.uint8)
            if img.shape[0] == 1:
                Image.fromarray(img[0], mode="L").save(root / "images" / fname)
            else:
                Image.fromarray(np.transpose(img, (1, 2, 0)), mode="RGB").save(root / "images" / fname)
            vals = []
            for name in names:
                v = float(dataset.attributes[name][i])
                vals.append("" if math.isnan(v) else repr(v))
            writer.writerow([fname, int(dataset.y[i]), *vals])
    return root


def load_image_folder(root, labels_file=None, image_shape=None):
    """Read a folder dataset; returns ``(dataset, manifest)`` with everything in ``train``.

    ``image_shape`` is ``(C, H, W)``; images are converted and resized to it.
    When omitted, it is taken from the first image.
    """
    root = Path(root)
    labels_file = Path(labels_file) if labels_file is not None else root / "labels.csv"
    try:
        fh = open(labels_file, newline="")
    except OSError as exc:
        raise DataLoadError(f"cannot open labels file {labels_file}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["filename", "y"]:
            raise DataLoadError(f"{labels_file}: header must start with 'filename,y'")
        attr_names = header[2:]
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataLoadError(f"{labels_file}:{lineno}: expected {len(header)} columns, got {len(row)}")
            try:
                label = int(row[1])
                if label not in (0, 1):
                    raise ValueError(f"label {label} not in {{0, 1}}")
                attrs = [float(v) if v.strip() else math.nan for v in row[2:]]
            except ValueError as exc:
                raise DataLoadError(f"{labels_file}:{lineno}: unparseable row ({exc})") from exc
            records.append((row[0], label, attrs))
    if not records:
        raise DataLoadError(f"{labels_file}: no samples")

    images = []
    for fname, _, _ in records:
        path = root / "images" / fname
        if not path.exists():
            raise DataLoadError(f"image file referenced by labels.csv not found: {path}")
        with Image.open(path) as im:
            if image_shape is None:
                channels = 1 if im.mode in ("L", "I;16", "1") else 3
                image_shape = (channels, im.height, im.width)
            c, h, w = image_shape
            im = im.convert("L" if c == 1 else "RGB")
            if im.size != (w, h):
                im = im.resize((w, h), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / np.float32(255.0)
        images.append(arr[None] if c == 1 else np.transpose(arr, (2, 0, 1)))

    attrs = np.array([r[2] for r in records], dtype=np.float64).reshape(len(records), len(attr_names))
    dataset = ContrastiveDataset(
        images=np.stack(images).astype(np.float32),
        y=np.array([r[1] for r in records], dtype=np.int64),
        attributes={name: attrs[:, k] for k, name in enumerate(attr_names)},
        filenames=[r[0] for r in records],
    )
    if "subtype" in dataset.attributes:
        sub = dataset.attributes["subtype"]
        dataset.subtypes = np.where(np.isnan(sub), -1, sub).astype(np.int64)
    manifest = DatasetManifest({"train": list(range(len(dataset))), "val": [], "test": []}, dataset.metadata_rows())
    return dataset, manifest


def attribute_specs(dataset: ContrastiveDataset):
    """``{name: (task, target_only)}`` for every probe-able attribute column."""
    specs = {}
    for name, col in dataset.attributes.items():
        if name in SYNTHETIC_ATTRIBUTES:
            specs[name] = SYNTHETIC_ATTRIBUTES[name]
            continue
        vals = col[~np.isnan(col)]
        if len(vals) == 0:
            continue
        categorical = np.all(vals == np.round(vals)) and len(np.unique(vals)) <= 10
        target_only = bool(np.isnan(col[dataset.y == 0]).all()) if (dataset.y == 0).any() else False
        specs[name] = ("classification" if categorical else "regression", target_only)
    return specs
