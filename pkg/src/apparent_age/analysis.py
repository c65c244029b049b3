"""Embedding, similarity, projection and saliency analyses of a trained model."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .age_head import DEFAULT_GRID, AgeGrid
from .datasets import load_image
from .exceptions import InvalidInputError, ProjectorUnavailableError

DECADE_EDGES = (0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100)


# ---------------------------------------------------------------------------
# age bins
# ---------------------------------------------------------------------------

def bin_labels(edges):
    """Labels for half-open bins ``[e_i, e_i+1)``; the last bin is closed."""
    edges = list(edges)
    labels = []
    for i, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
        last = i == len(edges) - 2
        if all(float(e).is_integer() for e in (lo, hi)):
            labels.append(f"{int(lo)}-{int(hi) if last else int(hi) - 1}")
        else:
            labels.append(f"[{lo:g}, {hi:g}{']' if last else ')'}")
    return labels


def assign_bin(age, edges):
    """Index of the bin containing ``age`` or None if outside the edges."""
    edges = np.asarray(edges, dtype=np.float64)
    if age is None or not edges[0] <= age <= edges[-1]:
        return None
    if age == edges[-1]:
        return len(edges) - 2
    return int(np.searchsorted(edges, age, side="right") - 1)


def _check_edges(edges):
    edges = np.asarray(edges, dtype=np.float64)
    if edges.size < 2 or not np.all(np.diff(edges) > 0):
        raise InvalidInputError("bin edges must be strictly increasing with at least two entries")
    return edges


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingTable:
    sample_ids: list
    embeddings: np.ndarray
    age_labels: list
    races: list
    genders: list

    def __post_init__(self):
        self.embeddings = np.atleast_2d(np.asarray(self.embeddings, dtype=np.float64))
        n = len(self.sample_ids)
        if self.embeddings.shape[0] != n or not (len(self.age_labels) == len(self.races) == len(self.genders) == n):
            raise InvalidInputError("embedding table columns differ in length")
        if not np.all(np.isfinite(self.embeddings)):
            raise InvalidInputError("embeddings must be finite")

    def __len__(self):
        return len(self.sample_ids)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def rows(self):
        for i, sid in enumerate(self.sample_ids):
            yield {"sample_id": sid, "embedding": self.embeddings[i], "age_label": self.age_labels[i],
                   "race": self.races[i], "gender": self.genders[i]}


def _resolve_model(model):
    """Accept a Checkpoint or an ``nn.Module``; return ``(module, grid)``."""
    if hasattr(model, "build_model"):
        return model.build_model(), model.age_grid()
    return model, DEFAULT_GRID


def extract_embeddings(model, manifest, layer=None, split=None, batch_size=128) -> EmbeddingTable:
    """Capture the output of ``layer`` (default: the backbone's embedding layer) per image."""
    net, _ = _resolve_model(model)
    layer = layer or getattr(net, "embedding_layer", None)
    modules = dict(net.named_modules())
    if layer not in modules:
        raise InvalidInputError(f"unknown layer {layer!r}; available: {', '.join(n for n in modules if n)}")
    records = manifest.split(split).records if split else list(manifest.records)
    size = getattr(net, "image_size", None)
    channels = getattr(net, "in_channels", 1)

    captured = []
    handle = modules[layer].register_forward_hook(lambda _m, _i, out: captured.append(out.detach().flatten(1)))
    net.eval()
    try:
        with torch.no_grad():
            for i in range(0, len(records), batch_size):
                chunk = records[i:i + batch_size]
                x = np.stack([load_image(manifest.resolve(r), size, channels) for r in chunk])
                net(torch.from_numpy(x))
    finally:
        handle.remove()
    emb = torch.cat(captured).double().numpy() if captured else np.zeros((0, 0))
    return EmbeddingTable([r.sample_id for r in records], emb, [r.reference_age() for r in records],
                          [r.race for r in records], [r.gender for r in records])


def age_group_centroids(table: EmbeddingTable, bin_edges=DECADE_EDGES) -> dict:
    """Mean embedding per age bin, keyed by bin label. Empty bins are omitted."""
    edges = _check_edges(bin_edges)
    labels = bin_labels(edges)
    members = {lab: [] for lab in labels}
    for i, age in enumerate(table.age_labels):
        b = assign_bin(age, edges)
        if b is not None:
            members[labels[b]].append(i)
    centroids = {}
    for lab in labels:
        if members[lab]:
            centroids[lab] = table.embeddings[members[lab]].mean(axis=0)
        else:
            warnings.warn(f"age bin {lab} has no members; omitted", stacklevel=2)
    return centroids


def cosine_similarity(v, c) -> float:
    v = np.asarray(v, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if v.shape != c.shape:
        raise InvalidInputError(f"dimension mismatch: {v.shape} vs {c.shape}")
    nv, nc = np.linalg.norm(v), np.linalg.norm(c)
    if nv == 0 or nc == 0:
        warnings.warn("cosine similarity with a zero vector defined as 0", stacklevel=2)
        return 0.0
    return float(np.clip(v @ c / (nv * nc), -1.0, 1.0))


def centroid_cosine_similarity(table: EmbeddingTable, centroids, bin_edges=DECADE_EDGES) -> list:
    """Similarity of each embedding to the centroid of its own age bin."""
    edges = _check_edges(bin_edges)
    labels = bin_labels(edges)
    rows = []
    for row in table.rows():
        b = assign_bin(row["age_label"], edges)
        if b is None or labels[b] not in centroids:
            continue
        rows.append({"sample_id": row["sample_id"], "age_bin": labels[b],
                     "similarity": cosine_similarity(row["embedding"], centroids[labels[b]]),
                     "race": row["race"], "gender": row["gender"]})
    return rows


def summarize_similarity(rows, by="race") -> dict:
    groups = {}
    for r in rows:
        groups.setdefault(r.get(by) or "unknown", []).append(r["similarity"])
    return {g: {"mean": float(np.mean(v)), "std": float(np.std(v)), "median": float(np.median(v)), "count": len(v)}
            for g, v in sorted(groups.items())}


# ---------------------------------------------------------------------------
# 2D projection
# ---------------------------------------------------------------------------

def _project_umap(x, seed, **kw):
    try:
        import umap
    except ImportError:
        raise ProjectorUnavailableError("umap", "umap-learn", extra="umap") from None
    kw.setdefault("n_neighbors", min(15, len(x) - 1))
    return umap.UMAP(n_components=2, random_state=seed, **kw).fit_transform(x)


def _project_tsne(x, seed, **kw):
    from sklearn.manifold import TSNE

    kw.setdefault("perplexity", min(30.0, (len(x) - 1) / 3))
    return TSNE(n_components=2, random_state=seed, init="pca", **kw).fit_transform(x)


PROJECTORS = {"umap": _project_umap, "tsne": _project_tsne}


def project_2d(table: EmbeddingTable, projector="umap", seed=0, **options) -> list:
    """Neighbor-embedding projection to 2D, one labeled row per sample."""
    if len(table) < 2:
        raise InvalidInputError("projection needs at least 2 rows")
    if projector not in PROJECTORS:
        raise InvalidInputError(f"unknown projector {projector!r}; expected one of {sorted(PROJECTORS)}")
    if np.ptp(table.embeddings, axis=0).max() == 0:
        # all points coincide; some projectors fail outright on zero variance
        xy = np.zeros((len(table), 2))
    else:
        xy = np.asarray(PROJECTORS[projector](table.embeddings, seed, **options), dtype=np.float64)
    return [{"sample_id": sid, "x": float(xy[i, 0]), "y": float(xy[i, 1]), "age_label": table.age_labels[i],
             "race": table.races[i], "gender": table.genders[i]}
            for i, sid in enumerate(table.sample_ids)]


# ---------------------------------------------------------------------------
# saliency
# ---------------------------------------------------------------------------

@dataclass
class SaliencyMap:
    sample_id: str
    grid: np.ndarray
    predicted_age: float
    reference_age: float | None = None
    degenerate: bool = False


def saliency_map(model, image, reference_age=None, sample_id="", method="gradient", grid: AgeGrid | None = None):
    """Input-gradient saliency of the expected-age readout.

    The map is ``|d age / d pixel|`` maxed over channels, scaled so its
    maximum is 1. A model whose readout ignores the input gives an all-zero
    map with ``degenerate=True``.
    """
    if method != "gradient":
        raise InvalidInputError(f"unknown saliency method {method!r}; available: gradient")
    net, ckpt_grid = _resolve_model(model)
    grid = grid or ckpt_grid
    x = torch.as_tensor(np.asarray(image, dtype=np.float32))
    if x.ndim == 2:
        x = x[None]
    size = getattr(net, "image_size", None)
    if size is not None and tuple(x.shape[-2:]) != (size, size):
        raise InvalidInputError(f"image is {tuple(x.shape[-2:])}, model expects {(size, size)}")
    x = x[None].clone().requires_grad_(True)
    ages = torch.tensor(np.array(grid.ages), dtype=torch.float32)

    net.eval()
    net.zero_grad(set_to_none=True)
    logits = net(x)
    age = (torch.softmax(logits, dim=-1) * ages).sum()
    (g,) = torch.autograd.grad(age, x, allow_unused=True)
    if g is None:
        g = torch.zeros_like(x)
    g = g.detach()[0].double().numpy()
    if not np.all(np.isfinite(g)):
        raise FloatingPointError(f"{sample_id}: non-finite input gradient (predicted age {age.item():.3f})")
    sal = np.abs(g).max(axis=0)
    peak = sal.max()
    degenerate = peak == 0
    if not degenerate:
        sal = sal / peak
    return SaliencyMap(sample_id, sal, age.item(), reference_age, bool(degenerate))


def saliency_overlay(smap: SaliencyMap, image=None) -> Image.Image:
    """RGB overlay: grayscale input with saliency in the red channel."""
    heat = smap.grid
    base = np.zeros_like(heat) if image is None else np.asarray(image, dtype=np.float64).reshape(-1, *heat.shape).mean(0)
    rgb = np.stack([np.maximum(base, heat), base * (1 - heat), base * (1 - heat)], axis=-1)
    return Image.fromarray(np.clip(np.rint(rgb * 255), 0, 255).astype(np.uint8), mode="RGB")


# ---------------------------------------------------------------------------
# representative images
# ---------------------------------------------------------------------------

def representative_images(records, bin_edges=DECADE_EDGES, age_of=None) -> dict:
    """Per age bin, the sample whose age is nearest the bin midpoint.

    Ties go to the lexicographically smallest sample_id. ``records`` may be a
    manifest or any iterable of SampleRecord; ``age_of`` defaults to each
    record's best available age label.
    """
    edges = _check_edges(bin_edges)
    labels = bin_labels(edges)
    age_of = age_of or (lambda r: r.reference_age())
    records = getattr(records, "records", records)
    best = {}
    for r in records:
        age = age_of(r)
        b = assign_bin(age, edges)
        if b is None:
            continue
        key = (abs(age - (edges[b] + edges[b + 1]) / 2), r.sample_id)
        if labels[b] not in best or key < best[labels[b]][0]:
            best[labels[b]] = (key, r.sample_id)
    return {lab: best[lab][1] for lab in labels if lab in best}


# ---------------------------------------------------------------------------
# tabular output
# ---------------------------------------------------------------------------

def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rows(path, rows, columns):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c)) for c in columns])
    return path


def write_embeddings(path, table: EmbeddingTable):
    cols = ["sample_id", "age_label", "race", "gender"] + [f"e{j}" for j in range(table.dim)]
    rows = []
    for r in table.rows():
        d = {k: r[k] for k in ("sample_id", "age_label", "race", "gender")}
        d.update({f"e{j}": float(v) for j, v in enumerate(r["embedding"])})
        rows.append(d)
    return write_rows(path, rows, cols)


def read_embeddings(path) -> EmbeddingTable:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise InvalidInputError(f"{path}: no embedding rows")
    ecols = [c for c in rows[0] if c.startswith("e") and c[1:].isdigit()]
    return EmbeddingTable(
        [r["sample_id"] for r in rows],
        np.array([[float(r[c]) for c in ecols] for r in rows]),
        [float(r["age_label"]) if r["age_label"] else None for r in rows],
        [r["race"] or None for r in rows],
        [r["gender"] or None for r in rows],
    )
