"""Synthetic live/spoof image domains, image file IO, manifests, batching.

Each sample is a smooth radial "face" blob on a soft background. Live
samples pair the blob with a nonzero depth dome; spoof samples overlay a
high-frequency grating (a stand-in for recapture moire) and carry an all-zero
depth target. A domain's style (per-channel gain, brightness offset, blur
passes, sensor noise) is applied around the class signal so that styles
shift image statistics without destroying separability.

Files are binary PPM (images) and PGM (depth); a JSON manifest lists every
record. Rendering is a pure function of (label, spec, seed), so datasets are
byte-identical across machines and reruns.
"""

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .rng import Rng, derive_seed

MANIFEST_SCHEMA_VERSION = 1


@dataclass
class DomainSpec:
    """Rendering style and size of one synthetic domain."""

    name: str
    gain: tuple = (1.0, 1.0, 1.0)  # per-channel multiplier
    brightness: float = 0.0
    blur: int = 0  # passes of a 3x3 box filter over the scene
    noise: float = 0.01
    count_per_class: int = 100
    seed: int = 0


@dataclass
class Dataset:
    """In-memory view of one manifest."""

    images: np.ndarray  # [N,3,32,32]
    labels: np.ndarray  # [N], -1 where the record is unlabeled
    depths: np.ndarray  # [N,1,8,8], zeros where absent
    splits: list = field(default_factory=list)
    domains: list = field(default_factory=list)
    paths: list = field(default_factory=list)

    def subset(self, split: str) -> "Dataset":
        keep = [i for i, s in enumerate(self.splits) if s == split]
        return Dataset(
            images=self.images[keep],
            labels=self.labels[keep],
            depths=self.depths[keep],
            splits=[self.splits[i] for i in keep],
            domains=[self.domains[i] for i in keep],
            paths=[self.paths[i] for i in keep],
        )


def _box_blur(img: np.ndarray, passes: int) -> np.ndarray:
    """3x3 mean filter with edge replication, applied per channel."""
    out = img
    for _ in range(passes):
        padded = np.pad(out, [(0, 0), (1, 1), (1, 1)], mode="edge")
        acc = np.zeros_like(out)
        for dy in range(3):
            for dx in range(3):
                acc += padded[:, dy : dy + 32, dx : dx + 32]
        out = acc / 9.0
    return out


def render_sample(label: int, spec: DomainSpec, seed: int):
    """One (image [3,32,32] in [0,1], depth [1,8,8]) pair.

    The grating that marks a spoof is injected after the style blur: it
    models a capture artifact, so domain styles must not erase it.
    """
    r = Rng(seed)
    size = 32
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1.0)

    cx = 0.5 + 0.12 * (r.uniform(1)[0] - 0.5)
    cy = 0.5 + 0.12 * (r.uniform(1)[0] - 0.5)
    radius = 0.30 + 0.08 * r.uniform(1)[0]
    dist2 = ((xx - cx) ** 2 + (yy - cy) ** 2) / (radius * radius)
    blob = np.exp(-dist2)

    base = 0.25 + 0.1 * r.uniform(1)[0]
    tilt = 0.08 * (r.uniform(1)[0] - 0.5)
    background = base + tilt * (xx + yy - 1.0)
    face_tone = np.array([0.55, 0.45, 0.38]).reshape(3, 1, 1)
    scene = background[None, :, :] + face_tone * blob[None, :, :]
    scene = _box_blur(scene, spec.blur)

    if label == 0:
        # recapture grating: frequency radius in (8, 13] cycles per image,
        # safely above the size/4 = 8 low-frequency band
        freq = 9.0 + 4.0 * r.uniform(1)[0]
        angle = np.pi * r.uniform(1)[0]
        phase = 2.0 * np.pi * r.uniform(1)[0]
        fx, fy = freq * np.cos(angle), freq * np.sin(angle)
        grating = 0.1 * np.sin(2.0 * np.pi * (fx * xx + fy * yy) + phase)
        scene = scene + grating[None, :, :]

    gain = np.asarray(spec.gain).reshape(3, 1, 1)
    styled = scene * gain + spec.brightness
    styled = styled + r.gaussian(3 * size * size, std=spec.noise).reshape(
        3, size, size
    )
    image = np.clip(styled, 0.0, 1.0)

    if label == 1:
        gy, gx = np.mgrid[0:8, 0:8] / 7.0
        gd2 = ((gx - cx) ** 2 + (gy - cy) ** 2) / (radius * radius)
        depth = np.exp(-gd2)[None, :, :]
    else:
        depth = np.zeros((1, 8, 8))
    return image, depth


# ---------------------------------------------------------------------------
# PPM / PGM


def ppm_write(path: str, image: np.ndarray):
    """Binary P6, maxval 255; image is [3,H,W] in [0,1]."""
    _, h, w = image.shape
    pixels = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.transpose(1, 2, 0).tobytes())


def pgm_write(path: str, image: np.ndarray):
    """Binary P5, maxval 255; image is [1,H,W] in [0,1]."""
    _, h, w = image.shape
    pixels = np.clip(np.round(image[0] * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def _read_netpbm(path: str, magic: bytes, channels: int):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] in (b"P3", b"P2"):
        raise ValueError(
            f"{path}: ASCII netpbm variant {blob[:2].decode()} not supported,"
            " expected binary " + magic.decode()
        )
    if blob[:2] != magic:
        raise ValueError(f"{path}: bad magic {blob[:2]!r}, expected {magic!r}")
    # header: magic, width, height, maxval as whitespace-separated tokens,
    # with optional '#' comments; payload starts after the maxval whitespace
    pos = 2
    tokens = []
    while len(tokens) < 3:
        if pos >= len(blob):
            raise ValueError(f"{path}: malformed header")
        ch = blob[pos:pos + 1]
        if ch == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(blob) and not blob[pos:pos + 1].isspace():
                pos += 1
            tokens.append(blob[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as err:
        raise ValueError(f"{path}: malformed header") from err
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    payload = blob[pos:pos + w * h * channels]
    if len(payload) != w * h * channels:
        raise ValueError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype=np.uint8), h, w


def ppm_read(path: str) -> np.ndarray:
    raw, h, w = _read_netpbm(path, b"P6", 3)
    return raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def pgm_read(path: str) -> np.ndarray:
    raw, h, w = _read_netpbm(path, b"P5", 1)
    return raw.reshape(1, h, w).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# dataset generation and manifests


def _worker_count() -> int:
    env = os.environ.get("GDA_THREADS", "")
    if env.strip():
        return max(1, int(env))
    return min(4, os.cpu_count() or 1)


def generate_domain_dataset(spec: DomainSpec, out_dir: str,
                            unlabeled_train: bool = False) -> dict:
    """Render a class-balanced domain to disk and write its manifest.

    Records alternate live/spoof; every fifth record is the held-out test
    split. With ``unlabeled_train`` the train-split records drop their label
    and depth entirely (the adaptation input), while test records stay
    labeled for sealed evaluation.
    """
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "depth"), exist_ok=True)
    total = 2 * spec.count_per_class

    def make(idx: int):
        label = 1 - (idx % 2)  # even index live, odd spoof
        return idx, label, render_sample(
            label, spec, derive_seed(spec.seed, idx)
        )

    workers = _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rendered = list(pool.map(make, range(total)))
    else:
        rendered = [make(i) for i in range(total)]

    records = []
    for idx, label, (image, depth) in rendered:
        split = "test" if idx % 5 == 4 else "train"
        stem = f"{spec.name}_{split}_{idx:05d}"
        image_rel = f"images/{stem}.ppm"
        ppm_write(os.path.join(out_dir, image_rel), image)
        record = {"image": image_rel, "domain": spec.name, "split": split}
        unlabeled = unlabeled_train and split == "train"
        if not unlabeled:
            record["label"] = label
            depth_rel = f"depth/{stem}.pgm"
            pgm_write(os.path.join(out_dir, depth_rel), depth)
            record["depth"] = depth_rel
        records.append(record)

    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "domain": spec.name,
        "records": records,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(root: str) -> dict:
    path = os.path.join(root, "manifest.json")
    with open(path) as fh:
        manifest = json.load(fh)
    version = manifest.get("schema_version")
    if version != MANIFEST_SCHEMA_VERSION:
        raise ValueError(
            f"{path}: manifest schema version {version!r}, expected "
            f"{MANIFEST_SCHEMA_VERSION}"
        )
    paths = [rec["image"] for rec in manifest["records"]]
    if len(paths) != len(set(paths)):
        raise ValueError(f"{path}: duplicate image paths in manifest")
    return manifest


def load_dataset(root: str) -> Dataset:
    """Read every record of a manifest into memory."""
    manifest = load_manifest(root)
    images, labels, depths = [], [], []
    splits, domains, paths = [], [], []
    for rec in manifest["records"]:
        images.append(ppm_read(os.path.join(root, rec["image"])))
        labels.append(rec.get("label", -1))
        if "depth" in rec:
            depths.append(pgm_read(os.path.join(root, rec["depth"])))
        else:
            depths.append(np.zeros((1, 8, 8)))
        splits.append(rec["split"])
        domains.append(rec["domain"])
        paths.append(rec["image"])
    return Dataset(
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        depths=np.stack(depths),
        splits=splits,
        domains=domains,
        paths=paths,
    )


def merge_datasets(datasets) -> Dataset:
    """Concatenate several in-memory datasets into one pool."""
    return Dataset(
        images=np.concatenate([d.images for d in datasets]),
        labels=np.concatenate([d.labels for d in datasets]),
        depths=np.concatenate([d.depths for d in datasets]),
        splits=sum((d.splits for d in datasets), []),
        domains=sum((d.domains for d in datasets), []),
        paths=sum((d.paths for d in datasets), []),
    )


def batch_iterator(dataset: Dataset, batch_size: int, seed: int,
                   drop_last: bool = False):
    """Yield index-batches over a seeded shuffle of the dataset."""
    n = len(dataset.images)
    order = Rng(seed).shuffle(np.arange(n))
    stop = (n // batch_size) * batch_size if drop_last else n
    for start in range(0, stop, batch_size):
        idx = order[start:start + batch_size]
        yield {
            "images": dataset.images[idx],
            "labels": dataset.labels[idx],
            "depths": dataset.depths[idx],
            "indices": idx,
        }


def default_domain_specs(count_per_class: int = 320, seed: int = 100):
    """The two-domain benchmark pair used by the end-to-end runs.

    The styles share geometry but disagree in channel balance and exposure,
    a gap the generator can close with low-frequency color corrections while
    the spoof grating survives untouched.
    """
    source = DomainSpec(
        name="source",
        gain=(1.0, 0.92, 0.86),
        brightness=0.02,
        blur=0,
        noise=0.01,
        count_per_class=count_per_class,
        seed=derive_seed(seed, 1),
    )
    target = DomainSpec(
        name="target",
        gain=(0.60, 0.85, 1.10),
        brightness=0.12,
        blur=1,
        noise=0.015,
        count_per_class=count_per_class,
        seed=derive_seed(seed, 2),
    )
    return source, target
