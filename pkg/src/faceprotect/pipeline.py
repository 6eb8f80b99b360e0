"""End-to-end wiring: data, extractor, protector, swap proxies and evaluation.

The toy data, the splits and the extractor depend only on ``data_seed``; the
protector depends on ``train.seed``. Swap proxies are trained on gallery and
target images and applied with probe images as sources.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluate as ev
from .config import RunConfig
from .data import (DatasetManifest, LabeledFace, add_split, build_splits, load_dataset,
                   make_synthetic_identities, select, stack, write_dataset)
from .extractor import IdentityExtractor, embed_array, load_extractor, save_extractor, train_extractor
from .metrics import psnr, ssim
from .swap import SwapModel, load_swap, pair_targets, save_swap, train_swap
from .trainer import ProtectorState, protect_array, train

log = logging.getLogger(__name__)

TARGET_PREFIX = "tg"


@dataclass
class Split:
    images: np.ndarray
    labels: list[str]
    sample_ids: list[str]

    @classmethod
    def of(cls, faces: list[LabeledFace]) -> "Split":
        if not faces:
            return cls(np.zeros((0, 3, 1, 1), np.float32), [], [])
        return cls(stack(faces), [f.identity_id for f in faces], [f.sample_id for f in faces])

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Data:
    gallery: Split
    probe: Split
    target: Split
    manifest: DatasetManifest


def synthesize(cfg: RunConfig) -> tuple[list[LabeledFace], DatasetManifest]:
    r = cfg.train.resolution
    faces = make_synthetic_identities(cfg.num_identities, cfg.samples_per_identity, r, cfg.data_seed)
    manifest = build_splits(faces, cfg.gallery_fraction, cfg.data_seed)
    if cfg.num_targets:
        targets = make_synthetic_identities(cfg.num_targets, cfg.target_samples, r, cfg.data_seed + 1,
                                            prefix=TARGET_PREFIX)
        manifest = add_split(manifest, targets, "target")
        faces = faces + targets
    return faces, manifest


def load_data(cfg: RunConfig) -> Data:
    if cfg.data_root:
        path = Path(cfg.data_root) / "manifest.tsv"
        faces = load_dataset(path, cfg.train.resolution)
        manifest = DatasetManifest.read(path)
    else:
        faces, manifest = synthesize(cfg)
    return Data(*(Split.of(select(faces, manifest, s)) for s in ("gallery", "probe", "target")), manifest)


def make_data(cfg: RunConfig, root: str | Path) -> Path:
    faces, manifest = synthesize(cfg)
    return write_dataset(root, faces, manifest)


def get_extractor(cfg: RunConfig, data: Data, path: str | Path | None = None) -> IdentityExtractor:
    """Load the extractor from ``path`` if it exists, else train it (and save it there)."""
    if path is not None and Path(path).is_file():
        return load_extractor(Path(path).read_bytes())
    ex = train_extractor(data.gallery.images, data.gallery.labels, d_f=cfg.train.d_f,
                         epochs=cfg.extractor_epochs, batch_size=cfg.extractor_batch_size, seed=cfg.data_seed,
                         backend=cfg.extractor_backend,
                         heldout=(data.probe.images, data.probe.labels) if len(data.probe) else None)
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(save_extractor(ex))
    return ex


def train_protector(cfg: RunConfig, data: Data, extractor: IdentityExtractor,
                    run_dir: str | Path | None = None, state: ProtectorState | None = None,
                    **kw) -> ProtectorState:
    return train(data.gallery.images, cfg.train, extractor, run_dir=run_dir, state=state, **kw)


def swap_pairs(cfg: RunConfig, data: Data) -> np.ndarray:
    """Target image for each probe, row-aligned with the probes."""
    if not len(data.target):
        raise ValueError("swap evaluation needs target identities (num_targets > 0 or a target split)")
    return data.target.images[pair_targets(len(data.probe), len(data.target), cfg.data_seed)]


def get_swap_models(cfg: RunConfig, data: Data, extractor: IdentityExtractor,
                    directory: str | Path | None = None) -> dict[str, SwapModel]:
    models = {}
    pool = np.concatenate([data.gallery.images, data.target.images]) if len(data.target) else data.gallery.images
    for variant in cfg.swap_variants:
        path = Path(directory) / f"swap_{variant}.bin" if directory is not None else None
        if path is not None and path.is_file():
            models[variant] = load_swap(path.read_bytes())
            continue
        models[variant] = train_swap(pool, extractor, epochs=cfg.swap_epochs, seed=cfg.data_seed,
                                     variant=variant, heldout=(data.probe.images, swap_pairs(cfg, data)),
                                     min_transfer=cfg.swap_min_transfer)
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(save_swap(models[variant]))
    return models


def _report_kw(cfg: RunConfig) -> dict:
    return {"config_fingerprint": cfg.fingerprint(), "seed": cfg.seed}


def eval_id(cfg: RunConfig, data: Data, extractor: IdentityExtractor, protected: np.ndarray) -> ev.EvalReport:
    gallery = ev.GalleryIndex.build(extractor, data.gallery.images, data.gallery.labels)
    rep = ev.identification_report(extractor, gallery, {"clean": data.probe.images, "protected": protected},
                                   data.probe.labels, cfg.topk, cfg.topk_mode, **_report_kw(cfg))
    rep.meta.update(gallery="clean gallery split", probes="probe split", distractors=0)
    sim = ev.similarity_report(extractor, data.probe.images, protected, data.probe.labels,
                               data.gallery.images, data.gallery.labels)
    for row in rep.rows:
        row.update(sim_pair=sim.rows[0]["sim_pair"] if row["condition"] == "protected" else 1.0,
                   sim_id=sim.rows[0]["sim_id_" + row["condition"]])
    return rep


def eval_swap(cfg: RunConfig, data: Data, extractor: IdentityExtractor, protected: np.ndarray,
              models: dict[str, SwapModel]) -> ev.EvalReport:
    return ev.swap_defense_report(extractor, models, data.probe.images, protected,
                                  swap_pairs(cfg, data), **_report_kw(cfg))


def eval_quality(cfg: RunConfig, data: Data, extractor: IdentityExtractor,
                 protected: np.ndarray) -> ev.EvalReport:
    return ev.quality_report(extractor, data.probe.images, protected, **_report_kw(cfg))


def eval_robust(cfg: RunConfig, data: Data, extractor: IdentityExtractor,
                protected: np.ndarray) -> ev.EvalReport:
    gallery = ev.GalleryIndex.build(extractor, data.gallery.images, data.gallery.labels)
    return ev.robustness_sweep(extractor, protected, data.probe.labels, gallery, ks=cfg.topk,
                               seed=cfg.seed, config_fingerprint=cfg.fingerprint())


def alpha_sweep(cfg: RunConfig, data: Data, extractor: IdentityExtractor,
                alphas: tuple[float, ...] | None = None,
                states: dict[float, ProtectorState] | None = None,
                swap_models: dict[str, SwapModel] | None = None) -> ev.EvalReport:
    """Train one protector per alpha from scratch and score each on the probes.

    ``states`` may supply already-trained protectors keyed by alpha; with
    ``swap_models`` each row also carries swap-vs-swap similarity per model.
    """
    alphas = tuple(cfg.alpha_grid if alphas is None else alphas)
    states = dict(states or {})
    gallery = ev.GalleryIndex.build(extractor, data.gallery.images, data.gallery.labels)
    rows = []
    for a in alphas:
        if a not in states:
            tc = dataclasses.replace(cfg.train, alpha=a, epochs=cfg.alpha_epochs or cfg.train.epochs)
            states[a] = train(data.gallery.images, tc, extractor)
        prot = protect_array(states[a], extractor, data.probe.images)
        emb = embed_array(extractor, prot)
        row = {"alpha": a, "psnr": float(psnr(data.probe.images, prot).mean()),
               "ssim": float(ssim(data.probe.images, prot).mean())}
        for k in cfg.topk:
            row[f"acc{k}"] = ev.topk_accuracy(emb, data.probe.labels, gallery, k, cfg.topk_mode)
        row["sim_pair"] = float(ev.cosine(embed_array(extractor, data.probe.images), emb).mean())
        if swap_models:
            sw = ev.swap_defense_report(extractor, swap_models, data.probe.images, prot, swap_pairs(cfg, data))
            for r in sw.rows:
                row[f"swap_vs_swap_{r['swap_model']}"] = r["swap_vs_swap"]
        rows.append(row)
    return ev.EvalReport("alpha", rows, **_report_kw(cfg))
