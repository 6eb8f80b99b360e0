"""Identification, similarity, swap-defense, quality and robustness protocols."""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .degrade import DegradationSpec, default_specs, degrade
from .extractor import IdentityExtractor, embed_array
from .swap import SwapModel, swap_array


@dataclass
class GalleryIndex:
    identity_ids: list[str]
    embeddings: np.ndarray
    backend_id: str = ""

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if len(self.identity_ids) != len(self.embeddings) or not len(self.identity_ids):
            raise ValueError("gallery needs one label per embedding and at least one entry")
        # identities in order of first appearance; ties resolve toward earlier entries
        self.identities = list(dict.fromkeys(self.identity_ids))
        pos = {ident: i for i, ident in enumerate(self.identities)}
        self._entry_identity = np.array([pos[i] for i in self.identity_ids])

    @classmethod
    def build(cls, extractor: IdentityExtractor, images: np.ndarray, labels: list[str]) -> "GalleryIndex":
        return cls(list(labels), embed_array(extractor, images), extractor.backend_id)

    def identity_scores(self, probes: np.ndarray) -> np.ndarray:
        """(P, n_identities) best cosine per identity."""
        sims = np.asarray(probes, np.float64) @ self.embeddings.T
        out = np.full((len(sims), len(self.identities)), -np.inf)
        for j in range(len(self.identities)):
            out[:, j] = sims[:, self._entry_identity == j].max(axis=1)
        return out


def _rank_of(scores: np.ndarray, target: np.ndarray) -> np.ndarray:
    """0-based rank of column ``target[i]`` in row i under (score desc, column asc)."""
    rows = np.arange(len(scores))
    t = scores[rows, target][:, None]
    cols = np.arange(scores.shape[1])[None, :]
    better = (scores > t) | ((scores == t) & (cols < target[:, None]))
    return better.sum(axis=1)


def topk_detail(probe_emb: np.ndarray, probe_labels: list[str], gallery: GalleryIndex, k: int,
                mode: str = "identity") -> dict:
    """Top-k identification. Probes whose identity is absent from the gallery are
    excluded from the denominator and counted in ``excluded``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if mode not in ("identity", "sample"):
        raise ValueError(f"mode must be 'identity' or 'sample', got {mode!r}")
    known = {ident: i for i, ident in enumerate(gallery.identities)}
    keep = np.array([lab in known for lab in probe_labels], dtype=bool)
    n_used = int(keep.sum())
    if n_used == 0:
        return {"accuracy": float("nan"), "used": 0, "excluded": len(probe_labels)}
    emb = np.asarray(probe_emb, np.float64)[keep]
    labels = [lab for lab, kp in zip(probe_labels, keep) if kp]
    if mode == "identity":
        target = np.array([known[lab] for lab in labels])
        hits = _rank_of(gallery.identity_scores(emb), target) < k
    else:
        sims = emb @ gallery.embeddings.T
        order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        ent = np.asarray(gallery.identity_ids)
        hits = np.array([lab in set(ent[o]) for lab, o in zip(labels, order)])
    return {"accuracy": float(hits.mean()), "used": n_used, "excluded": len(probe_labels) - n_used}


def topk_accuracy(probe_emb: np.ndarray, probe_labels: list[str], gallery: GalleryIndex, k: int,
                  mode: str = "identity") -> float:
    return topk_detail(probe_emb, probe_labels, gallery, k, mode)["accuracy"]


def cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return (a * b).sum(-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))


def sim_id(protected_emb: np.ndarray, clean_embs: np.ndarray) -> float:
    """Mean cosine between one protected embedding and N clean same-identity embeddings."""
    clean_embs = np.atleast_2d(clean_embs)
    if len(clean_embs) == 0:
        raise ValueError("sim_id needs at least one clean image")
    return float(cosine(clean_embs, np.asarray(protected_emb)[None, :]).mean())


def sim_pair(original_emb: np.ndarray, protected_emb: np.ndarray) -> float:
    return float(cosine(original_emb, protected_emb))


def sim_id_mean(protected_emb: np.ndarray, labels: list[str], clean_emb: np.ndarray,
                clean_labels: list[str]) -> float:
    lab = np.asarray(clean_labels)
    return float(np.mean([sim_id(e, clean_emb[lab == l]) for e, l in zip(protected_emb, labels)]))


def fingerprint(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(round(float(v), 10))
    if isinstance(v, np.integer):
        return int(v)
    return v


@dataclass
class EvalReport:
    protocol: str
    rows: list[dict]
    config_fingerprint: str = ""
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def columns(self) -> list[str]:
        cols: dict[str, None] = {}
        for r in self.rows:
            cols.update(dict.fromkeys(r))
        return list(cols)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# protocol={self.protocol} fingerprint={self.config_fingerprint} seed={self.seed}\n")
        w = csv.writer(buf, lineterminator="\n")
        cols = self.columns()
        w.writerow(cols)
        for r in self.rows:
            w.writerow([_fmt(r.get(c, "")) for c in cols])
        return buf.getvalue()

    def to_json(self) -> str:
        def native(v):
            if isinstance(v, np.generic):
                return v.item()
            return v
        rows = [{k: native(v) for k, v in r.items()} for r in self.rows]
        return json.dumps({"protocol": self.protocol, "config_fingerprint": self.config_fingerprint,
                           "seed": self.seed, "meta": self.meta, "rows": rows}, sort_keys=True, indent=1)

    def write(self, directory: str | Path, name: str | None = None) -> tuple[Path, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        stem = name or self.protocol
        csv_path, json_path = d / f"{stem}.csv", d / f"{stem}.json"
        csv_path.write_text(self.to_csv())
        json_path.write_text(self.to_json())
        return csv_path, json_path

    def row(self, **match) -> dict:
        for r in self.rows:
            if all(r.get(k) == v for k, v in match.items()):
                return r
        raise KeyError(match)


def identification_report(extractor: IdentityExtractor, gallery: GalleryIndex, conditions: dict,
                          labels: list[str], ks=(1, 5), mode: str = "identity", **report_kw) -> EvalReport:
    """``conditions`` maps a name (e.g. clean/protected) to probe images."""
    rows = []
    for name, images in conditions.items():
        emb = embed_array(extractor, images)
        row = {"condition": name, "backend": extractor.backend_id}
        for k in ks:
            d = topk_detail(emb, labels, gallery, k, mode)
            row[f"acc{k}"] = d["accuracy"]
        row.update(probes=d["used"], excluded=d["excluded"], gallery_entries=len(gallery.identity_ids),
                   gallery_identities=len(gallery.identities), mode=mode)
        rows.append(row)
    return EvalReport("id", rows, **report_kw)


def similarity_report(extractor: IdentityExtractor, originals: np.ndarray, protecteds: np.ndarray,
                      labels: list[str], clean_ref: np.ndarray, clean_ref_labels: list[str],
                      **report_kw) -> EvalReport:
    e_o, e_p = embed_array(extractor, originals), embed_array(extractor, protecteds)
    e_ref = embed_array(extractor, clean_ref)
    row = {"backend": extractor.backend_id,
           "sim_id_clean": sim_id_mean(e_o, labels, e_ref, clean_ref_labels),
           "sim_id_protected": sim_id_mean(e_p, labels, e_ref, clean_ref_labels),
           "sim_pair": float(cosine(e_o, e_p).mean()), "n": len(labels)}
    return EvalReport("similarity", [row], **report_kw)


def swap_defense_report(extractor: IdentityExtractor, swap_models: dict[str, SwapModel],
                        sources: np.ndarray, protected: np.ndarray, targets: np.ndarray,
                        **report_kw) -> EvalReport:
    """Per swap model: swap-vs-swap identity similarity and source-vs-swap scores.

    ``targets`` is already paired with ``sources`` row by row.
    """
    e_src = embed_array(extractor, sources)
    rows = []
    for name, model in swap_models.items():
        sw_o = swap_array(model, extractor, sources, targets)
        sw_p = swap_array(model, extractor, protected, targets)
        e_o, e_p = embed_array(extractor, sw_o), embed_array(extractor, sw_p)
        rows.append({
            "swap_model": name,
            "baseline_transfer": float(cosine(e_src, e_o).mean()),  # clean source vs clean swap
            "swap_vs_swap": float(cosine(e_o, e_p).mean()),
            "p_score": float(cosine(e_src, e_p).mean()),
            "n": len(sources),
        })
    return EvalReport("swap", rows, **report_kw)


def quality_report(extractor: IdentityExtractor, originals: np.ndarray, protecteds: np.ndarray,
                   **report_kw) -> EvalReport:
    q = metrics.quality_summary(extractor, originals, protecteds)
    q["backend"] = extractor.backend_id
    q["frechet_note"] = "extractor-feature Frechet distance, not Inception FID"
    return EvalReport("quality", [q], **report_kw)


def split_evenly(n: int, parts: int) -> list[np.ndarray]:
    return np.array_split(np.arange(n), parts)


def robustness_sweep(extractor: IdentityExtractor, images: np.ndarray, labels: list[str],
                     gallery: GalleryIndex, specs: list[DegradationSpec] | None = None,
                     ks=(1, 5), seed: int = 0, **report_kw) -> EvalReport:
    """Each degradation kind sees every image once: images are split evenly (in
    order) across that kind's grid values. A "none" row gives the undegraded
    score; per kind there is one pooled row (value "all") and one row per value
    scored on that value's share of the images."""
    specs = default_specs() if specs is None else specs
    labels = np.asarray(list(labels), dtype=object)

    def score(emb, idx, kind, value, parts):
        row = {"kind": kind, "value": value, "n": len(idx), "parts": parts}
        for k in ks:
            row[f"acc{k}"] = topk_accuracy(emb[idx], list(labels[idx]), gallery, k) if len(idx) else float("nan")
        return row

    every = np.arange(len(images))
    rows = [score(embed_array(extractor, images), every, "none", "", 1)]
    for spec in specs:
        chunks = split_evenly(len(images), len(spec.grid))
        degraded = np.empty_like(images)
        for value, idx in zip(spec.grid, chunks):
            if len(idx):
                degraded[idx] = degrade(images[idx], spec.kind, value, seed)
        emb = embed_array(extractor, degraded)
        rows.append(score(emb, every, spec.kind, "all", len(spec.grid)))
        rows.extend(score(emb, idx, spec.kind, value, 1) for value, idx in zip(spec.grid, chunks))
    return EvalReport("robust", rows, seed=seed, **report_kw)


def split_by(report: EvalReport, key: str) -> dict[str, EvalReport]:
    """One report per distinct value of ``key``, in first-appearance order."""
    groups: dict[str, list[dict]] = {}
    for r in report.rows:
        groups.setdefault(str(r[key]), []).append(r)
    return {name: EvalReport(report.protocol, rows, report.config_fingerprint, report.seed, dict(report.meta))
            for name, rows in groups.items()}


def write_plot(report: EvalReport, path: str | Path) -> Path:
    """Static PNG for a report: a line plot for the alpha sweep, bars otherwise."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    rows = report.rows
    if report.protocol == "alpha":
        xs = [r["alpha"] for r in rows]
        for col in [c for c in report.columns() if c.startswith("acc")]:
            ax.plot(xs, [r[col] for r in rows], marker="o", label=col)
        ax.set_xlabel("alpha")
        ax.set_ylabel("accuracy")
        ax2 = ax.twinx()
        ax2.plot(xs, [r["psnr"] for r in rows], marker="s", color="k", label="psnr")
        ax2.set_ylabel("PSNR (dB)")
        ax.legend(loc="upper left")
    else:
        label_key = {"id": "condition", "swap": "swap_model", "robust": "kind"}.get(report.protocol)
        if report.protocol == "robust":
            rows = [r for r in rows if r["value"] in ("", "all")]
        names = [str(r.get(label_key, i)) if label_key else str(i) for i, r in enumerate(rows)]
        cols = [c for c in report.columns()
                if all(isinstance(r.get(c), (float, np.floating)) for r in rows)]
        width = 0.8 / max(len(cols), 1)
        for j, col in enumerate(cols):
            ax.bar(np.arange(len(rows)) + j * width, [r[col] for r in rows], width, label=col)
        ax.set_xticks(np.arange(len(rows)) + 0.4 - width / 2)
        ax.set_xticklabels(names)
        ax.legend(fontsize="small")
    ax.set_title(f"{report.protocol} ({report.config_fingerprint})")
    fig.tight_layout()
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, format="png", metadata={"Software": None, "Description": report.config_fingerprint})
    plt.close(fig)
    return path
