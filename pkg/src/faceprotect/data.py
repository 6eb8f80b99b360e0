"""Face corpus ingestion, synthetic identities and gallery/probe splits.

Images live in CHW float32 arrays with values in [-1, 1], RGB channel order.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

SPLITS = ("train", "gallery", "probe", "target")


class DatasetError(ValueError):
    """Raised for manifest problems; ``items`` lists per-sample failures."""

    def __init__(self, message: str, items: list[tuple[str, str]] | None = None):
        self.items = items or []
        if self.items:
            detail = "; ".join(f"{sid}: {why}" for sid, why in self.items)
            message = f"{message} ({detail})"
        super().__init__(message)


@dataclass
class LabeledFace:
    image: np.ndarray
    identity_id: str
    sample_id: str


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    identity_id: str
    path: str
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path | None = None

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def sample_ids(self, name: str) -> list[str]:
        return [e.sample_id for e in self.entries if e.split == name]

    def validate(self) -> None:
        ids = [e.sample_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate sample_id in manifest")
        bad = [e.sample_id for e in self.entries if e.split not in SPLITS]
        if bad:
            raise DatasetError("unknown split", [(b, "split") for b in bad])
        probe_ids = {e.identity_id for e in self.split("probe")}
        clash = sorted(probe_ids & {e.identity_id for e in self.split("target")})
        if clash:
            raise DatasetError(f"target identities overlap probe identities: {clash}")

    def write(self, path: str | Path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            for e in self.entries:
                w.writerow([e.sample_id, e.identity_id, e.path, e.split])

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        entries = []
        with path.open(newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), 1):
                if not row or row[0].startswith("#"):
                    continue
                if len(row) != 4:
                    raise DatasetError(f"{path}:{lineno}: expected 4 tab-separated fields")
                entries.append(ManifestEntry(*row))
        m = cls(entries, root=path.parent)
        m.validate()
        return m


def normalize_u8(pixels: np.ndarray) -> np.ndarray:
    """Affine map of 8-bit values onto [-1, 1]."""
    return (pixels.astype(np.float32) * (2.0 / 255.0) - 1.0).astype(np.float32)


def denormalize_u8(image: np.ndarray) -> np.ndarray:
    x = (np.clip(image, -1.0, 1.0) + 1.0) * 127.5
    return np.rint(x).astype(np.uint8)


def check_resolution(resolution: int) -> None:
    if resolution <= 0 or resolution % 4:
        raise ValueError(f"resolution must be a positive multiple of 4, got {resolution}")


def read_image(path: str | Path, resolution: int) -> np.ndarray:
    with Image.open(path) as im:
        im.load()
        if im.width != im.height:
            raise ValueError(f"non-square image {im.width}x{im.height}")
        im = im.convert("RGB")
        if im.width != resolution:
            im = im.resize((resolution, resolution), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.uint8)
    return normalize_u8(arr).transpose(2, 0, 1).copy()


def write_image(path: str | Path, image: np.ndarray) -> None:
    Image.fromarray(denormalize_u8(image).transpose(1, 2, 0)).save(path, format="PNG")


def load_dataset(manifest_path: str | Path, resolution: int,
                 splits: tuple[str, ...] | None = None) -> list[LabeledFace]:
    """Read the images listed in a manifest, in manifest order.

    Faces are assumed pre-cropped; only resizing and intensity normalization
    happen here. All unreadable entries are collected into one DatasetError.
    """
    check_resolution(resolution)
    manifest = DatasetManifest.read(manifest_path)
    root = manifest.root
    faces, errors = [], []
    for e in manifest.entries:
        if splits is not None and e.split not in splits:
            continue
        p = Path(e.path)
        if not p.is_absolute():
            p = root / p
        if not p.exists():
            errors.append((e.sample_id, f"missing file {p}"))
            continue
        try:
            img = read_image(p, resolution)
        except Exception as exc:  # PIL raises a zoo of types for corrupt files
            errors.append((e.sample_id, str(exc) or type(exc).__name__))
            continue
        faces.append(LabeledFace(img, e.identity_id, e.sample_id))
    if errors:
        raise DatasetError(f"failed to load {len(errors)} item(s)", errors)
    return faces


def _smoothstep_mask(d: np.ndarray, width: float) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(d / width))


_SKIN = (np.array([0.95, 0.8, 0.7]), np.array([0.45, 0.3, 0.22]))
_HAIR = (np.array([0.08, 0.06, 0.05]), np.array([0.75, 0.6, 0.35]))


def _lerp(ends: tuple[np.ndarray, np.ndarray], t: float) -> np.ndarray:
    return ends[0] * (1 - t) + ends[1] * t


def _identity_params(rng: np.random.Generator) -> dict:
    return {
        # skin and hair on narrow natural-colour axes, so that colour is a weak cue
        "skin": _lerp(_SKIN, rng.uniform()) + rng.uniform(-0.03, 0.03, size=3),
        "hair": _lerp(_HAIR, rng.uniform()) + rng.uniform(-0.03, 0.03, size=3),
        "axes": rng.uniform([0.5, 0.62], [0.72, 0.85]),
        "hairline": rng.uniform(-0.75, -0.35),
        "eye_y": rng.uniform(-0.3, -0.05),
        "eye_dx": rng.uniform(0.18, 0.36),
        "eye_r": rng.uniform(0.05, 0.12),
        "eye_col": _lerp((np.array([0.1, 0.07, 0.05]), np.array([0.3, 0.45, 0.6])), rng.uniform()),
        "mouth_y": rng.uniform(0.3, 0.55),
        "mouth_w": rng.uniform(0.12, 0.32),
        "mouth_col": rng.uniform([0.55, 0.2, 0.2], [0.8, 0.35, 0.35]),
        "nose_len": rng.uniform(0.08, 0.25),
        # low-frequency identity texture: a few random plane waves per channel
        "freq": rng.uniform(-3.0, 3.0, size=(6, 2)) * np.pi / 2,
        "phase": rng.uniform(0, 2 * np.pi, size=6),
        "amp": rng.normal(0.0, 0.04, size=(6, 3)),
        # finer identity texture (periods of roughly 6-16 px at R=64)
        "freq_hi": rng.uniform(8.0, 20.0, size=8) * np.exp(1j * rng.uniform(0, 2 * np.pi, size=8)),
        "phase_hi": rng.uniform(0, 2 * np.pi, size=8),
        "amp_hi": rng.normal(0.0, 0.035, size=8),
    }


def _render(p: dict, resolution: int, shift: tuple[float, float], bg: np.ndarray) -> np.ndarray:
    """Render an identity template on a [0, 1] HWC canvas."""
    t = (np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0
    v, u = np.meshgrid(t - shift[1], t - shift[0], indexing="ij")
    edge = 2.0 / resolution

    img = np.broadcast_to(bg, (resolution, resolution, 3)).copy()
    ax, ay = p["axes"]
    face_d = (np.sqrt((u / ax) ** 2 + (v / ay) ** 2) - 1.0) * min(ax, ay)
    face = _smoothstep_mask(face_d, edge)[..., None]
    tex = np.zeros((resolution, resolution, 3))
    for k in range(len(p["phase"])):
        wave = np.cos(p["freq"][k, 0] * u + p["freq"][k, 1] * v + p["phase"][k])
        tex += wave[..., None] * p["amp"][k]
    for k in range(len(p["phase_hi"])):
        f = p["freq_hi"][k]
        tex += (np.cos(f.real * u + f.imag * v + p["phase_hi"][k]) * p["amp_hi"][k])[..., None]
    img = img * (1 - face) + (p["skin"] + tex) * face

    hair = _smoothstep_mask(v - p["hairline"], edge)[..., None] * face
    img = img * (1 - hair) + p["hair"] * hair
    for sx in (-1.0, 1.0):
        d = np.sqrt((u - sx * p["eye_dx"]) ** 2 + (v - p["eye_y"]) ** 2) - p["eye_r"]
        eye = _smoothstep_mask(d, edge)[..., None]
        img = img * (1 - eye) + p["eye_col"] * eye
    mouth_d = np.maximum(np.abs(u) - p["mouth_w"], np.abs(v - p["mouth_y"]) - 0.035)
    mouth = _smoothstep_mask(mouth_d, edge)[..., None]
    img = img * (1 - mouth) + p["mouth_col"] * mouth
    nose_d = np.maximum(np.abs(u) - 0.03, np.abs(v - (p["eye_y"] + p["mouth_y"]) / 2) - p["nose_len"] / 2)
    nose = _smoothstep_mask(nose_d, edge)[..., None]
    img = img * (1 - 0.5 * nose) + 0.5 * nose * p["skin"] * 0.6
    return img


def make_synthetic_identities(num_identities: int, samples_per_identity: int,
                              resolution: int, seed: int,
                              prefix: str = "id") -> list[LabeledFace]:
    """Procedural face-like identities with per-sample nuisance variation.

    Each identity is a fixed low-frequency template; each sample applies a
    global shift of at most 10% of the side, a random background colour, an
    illumination gain in [0.8, 1.2] times a per-channel white-balance gain in
    [0.95, 1.05], and Gaussian noise (sigma 0.02 on the [0, 1] scale).
    Outputs are quantized to the 8-bit grid so PNG round-trips are lossless.
    """
    if num_identities <= 0 or samples_per_identity <= 0:
        raise ValueError("num_identities and samples_per_identity must be positive")
    check_resolution(resolution)
    root = np.random.SeedSequence(seed)
    faces = []
    for i, child in enumerate(root.spawn(num_identities)):
        id_rng, sample_rng = (np.random.default_rng(s) for s in child.spawn(2))
        params = _identity_params(id_rng)
        ident = f"{prefix}{i:04d}"
        for j in range(samples_per_identity):
            shift = tuple(sample_rng.uniform(-0.2, 0.2, size=2))  # 10% of R on a [-1, 1] axis
            gain = sample_rng.uniform(0.8, 1.2) * sample_rng.uniform(0.95, 1.05, size=3)
            bg = sample_rng.uniform(0.05, 0.95, size=3)
            img = _render(params, resolution, shift, bg) * gain
            img = img + sample_rng.normal(0.0, 0.02, size=img.shape)
            u8 = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
            faces.append(LabeledFace(normalize_u8(u8).transpose(2, 0, 1).copy(), ident, f"{ident}_{j:03d}"))
    return faces


def build_splits(faces: list[LabeledFace], gallery_fraction: float, seed: int) -> DatasetManifest:
    """Partition each identity's samples into gallery and probe.

    Every identity keeps at least one sample on each side. The gallery count
    per identity is ``round(n * gallery_fraction)`` clamped to [1, n - 1].
    """
    if not 0.0 < gallery_fraction < 1.0:
        raise ValueError("gallery_fraction must lie in (0, 1)")
    by_id: dict[str, list[LabeledFace]] = {}
    for f in faces:
        by_id.setdefault(f.identity_id, []).append(f)
    singles = [k for k, v in by_id.items() if len(v) < 2]
    if singles:
        raise DatasetError(f"identities with a single sample cannot be split: {singles}")
    rng = np.random.default_rng(seed)
    split_of = {}
    for ident, items in by_id.items():
        n = len(items)
        n_gal = min(max(int(round(n * gallery_fraction)), 1), n - 1)
        order = rng.permutation(n)
        for rank, idx in enumerate(order):
            split_of[items[idx].sample_id] = "gallery" if rank < n_gal else "probe"
    entries = [ManifestEntry(f.sample_id, f.identity_id, f"{f.sample_id}.png", split_of[f.sample_id])
               for f in faces]
    m = DatasetManifest(entries)
    m.validate()
    return m


def add_split(manifest: DatasetManifest, faces: list[LabeledFace], split: str) -> DatasetManifest:
    entries = list(manifest.entries) + [
        ManifestEntry(f.sample_id, f.identity_id, f"{f.sample_id}.png", split) for f in faces]
    m = DatasetManifest(entries, manifest.root)
    m.validate()
    return m


def select(faces: list[LabeledFace], manifest: DatasetManifest, split: str) -> list[LabeledFace]:
    wanted = set(manifest.sample_ids(split))
    return [f for f in faces if f.sample_id in wanted]


def write_dataset(root: str | Path, faces: list[LabeledFace], manifest: DatasetManifest) -> Path:
    """Write PNGs plus ``manifest.tsv`` under ``root``; returns the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    by_id = {f.sample_id: f for f in faces}
    for e in manifest.entries:
        write_image(root / e.path, by_id[e.sample_id].image)
    path = root / "manifest.tsv"
    manifest.write(path)
    return path


def stack(faces: list[LabeledFace]) -> np.ndarray:
    return np.stack([f.image for f in faces]).astype(np.float32)
