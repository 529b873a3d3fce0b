"""Evaluation scores over externally extracted boxes and embeddings.

Nothing here runs a detector or feature extractor.  An evaluation document
supplies, per image of every set:

``given_boxes``
    list of boxes, or ``{"label", "box"}`` objects, one per subject.
``detected_boxes``
    same format, or ``null`` when detection failed.
``fg_embeds`` / ``bg_embeds``
    ``{family: vectors}``; for the foreground one vector per subject,
    for the background a single vector (or a one-element list).
``lpips_pairs``
    ``{"fg": [...], "bg": [...]}`` perceptual distances, already computed.
``clip_t``
    text-image similarity scalar.

Every score is reported in percentage form: cosine-type scores, LPIPS
distances and CLIP-T scalars are multiplied by 100.  Each set is scored on
its own and the report averages the per-set scores.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ._validation import ValidationError
from .layout import BoundingBox
from .rng import stream

COLUMNS = ("mIoU", "DINO-fg", "CLIP-fg", "LPIPS-fg", "CLIP-T", "DINO-bg", "CLIP-bg", "LPIPS-bg")
_FAMILY_COLUMNS = {("fg", "dino"): "DINO-fg", ("fg", "clip"): "CLIP-fg",
                   ("bg", "dino"): "DINO-bg", ("bg", "clip"): "CLIP-bg"}
CI_LEVELS = (80, 95)


class EvalParseError(ValueError):
    """The evaluation document does not match the documented format."""


def iou(a, b) -> float:
    """Intersection over union of two normalized boxes; 0 when disjoint."""
    a, b = BoundingBox.coerce(a), BoundingBox.coerce(b)
    dh = min(a.h_max, b.h_max) - max(a.h_min, b.h_min)
    dw = min(a.w_max, b.w_max) - max(a.w_min, b.w_min)
    if dh <= 0 or dw <= 0:
        return 0.0
    inter = dh * dw
    return inter / (a.area + b.area - inter)


def _labelled(boxes):
    out = []
    for k, item in enumerate(boxes):
        if isinstance(item, dict):
            out.append((item.get("label"), BoundingBox.coerce(item["box"])))
        else:
            out.append((None, BoundingBox.coerce(item)))
    return out


def match_boxes(given, detected) -> list[float]:
    """Per given box, the IoU with its greedily matched detection (0 if none).

    Boxes only match within the same label; within a label the highest-IoU
    pair is taken first.
    """
    given = _labelled(given)
    detected = _labelled(detected or [])
    scores = [0.0] * len(given)
    for label in {g[0] for g in given}:
        gi = [k for k, g in enumerate(given) if g[0] == label]
        di = [k for k, d in enumerate(detected) if d[0] == label]
        if not di:
            continue
        M = np.array([[iou(given[g][1], detected[d][1]) for d in di] for g in gi])
        M[M <= 0] = -1.0
        while M.size and M.max() > 0:
            r, c = np.unravel_index(np.argmax(M), M.shape)
            scores[gi[r]] = float(M[r, c])
            M[r, :] = -1.0
            M[:, c] = -1.0
    return scores


def pairwise_cosine_mean(vectors, name: str = "vectors") -> float:
    """Mean cosine similarity over all unordered pairs, times 100."""
    V = np.asarray(vectors, dtype=np.float64)
    if V.ndim != 2 or V.shape[0] < 2:
        raise ValidationError(f"{name}: need at least 2 vectors of equal dimension, got shape {V.shape}")
    norms = np.linalg.norm(V, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ValidationError(f"{name}: vector {int(zero[0])} has zero norm")
    U = V / norms[:, None]
    G = U @ U.T
    iu = np.triu_indices(V.shape[0], k=1)
    return float(G[iu].mean() * 100.0)


@dataclass
class EvalRecord:
    set_id: str
    image_id: str
    given_boxes: list
    detected_boxes: list | None
    fg_embeds: dict = field(default_factory=dict)
    bg_embeds: dict = field(default_factory=dict)
    lpips: dict = field(default_factory=dict)
    clip_t: float | None = None


def parse_eval(doc) -> list[EvalRecord]:
    if not isinstance(doc, dict) or not isinstance(doc.get("sets"), list):
        raise EvalParseError("$: expected an object with a 'sets' list")
    records = []
    for s, st in enumerate(doc["sets"]):
        where = f"$.sets[{s}]"
        if not isinstance(st, dict) or "id" not in st or not isinstance(st.get("images"), list):
            raise EvalParseError(f"{where}: needs 'id' and an 'images' list")
        for k, img in enumerate(st["images"]):
            at = f"{where}.images[{k}]"
            if not isinstance(img, dict) or not isinstance(img.get("given_boxes"), list):
                raise EvalParseError(f"{at}: needs a 'given_boxes' list")
            try:
                _labelled(img["given_boxes"])
                if img.get("detected_boxes") is not None:
                    _labelled(img["detected_boxes"])
            except (ValueError, TypeError, KeyError) as exc:
                raise EvalParseError(f"{at}: bad box ({exc})") from None
            for key in ("fg_embeds", "bg_embeds", "lpips_pairs"):
                if not isinstance(img.get(key, {}), dict):
                    raise EvalParseError(f"{at}.{key}: expected an object")
            clip_t = img.get("clip_t")
            if clip_t is not None and (isinstance(clip_t, bool) or not isinstance(clip_t, (int, float))):
                raise EvalParseError(f"{at}.clip_t: expected a number")
            records.append(EvalRecord(str(st["id"]), str(img.get("id", k)), img["given_boxes"],
                                      img.get("detected_boxes"), img.get("fg_embeds", {}),
                                      img.get("bg_embeds", {}), img.get("lpips_pairs", {}), clip_t))
    return records


def load_eval(path) -> list[EvalRecord]:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise EvalParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    try:
        return parse_eval(doc)
    except EvalParseError as exc:
        raise EvalParseError(f"{path}: {exc}") from None


def mean_iou(records) -> float:
    """Mean IoU over every given box of every record, times 100."""
    records = list(records)
    if not records:
        raise ValidationError("mean_iou needs at least one record")
    scores = [v for r in records for v in match_boxes(r.given_boxes, r.detected_boxes)]
    if not scores:
        raise ValidationError("records hold no given boxes")
    return float(np.mean(scores) * 100.0)


def _per_subject(vectors) -> list[np.ndarray]:
    a = np.asarray(vectors, dtype=np.float64)
    return [a] if a.ndim == 1 else list(a)


def _consistency(records, region: str, family: str) -> float | None:
    by_subject: dict[int, list] = {}
    for r in records:
        embeds = r.fg_embeds if region == "fg" else r.bg_embeds
        if family in embeds:
            for m, vec in enumerate(_per_subject(embeds[family])):
                by_subject.setdefault(m, []).append(vec)
    scores = [pairwise_cosine_mean(vs, f"set {records[0].set_id} {region}/{family} subject {m}")
              for m, vs in sorted(by_subject.items()) if len(vs) >= 2]
    return float(np.mean(scores)) if scores else None


def score_set(records) -> dict[str, float | None]:
    """All columns for the records of one set; ``None`` marks an absent score."""
    out: dict[str, float | None] = {c: None for c in COLUMNS}
    out["mIoU"] = mean_iou(records)
    for (region, family), col in _FAMILY_COLUMNS.items():
        out[col] = _consistency(records, region, family)
    for region in ("fg", "bg"):
        d = [float(x) for r in records for x in r.lpips.get(region, [])]
        out[f"LPIPS-{region}"] = float(np.mean(d) * 100.0) if d else None
    ct = [float(r.clip_t) for r in records if r.clip_t is not None]
    out["CLIP-T"] = float(np.mean(ct) * 100.0) if ct else None
    return out


@dataclass
class ScoreEntry:
    mean: float
    std: float
    n_sets: int
    ci: dict[int, tuple[float, float]]

    def to_dict(self) -> dict:
        d = {"mean": self.mean, "std": self.std, "n_sets": self.n_sets}
        for level, (lo, hi) in self.ci.items():
            d[f"ci{level}"] = [lo, hi]
        return d


def bootstrap_ci(values, levels=CI_LEVELS, n_resamples: int = 1000, seed: int = 0, name: str = "score"):
    """Percentile bootstrap intervals for the mean.

    Values are sorted first so the result does not depend on input order.
    """
    x = np.sort(np.asarray(values, dtype=np.float64))
    rng = stream(seed, "bootstrap", name)
    idx = rng.integers(0, x.size, size=(n_resamples, x.size))
    means = x[idx].mean(axis=1)
    out = {}
    for level in levels:
        tail = (100.0 - level) / 2.0
        lo, hi = np.percentile(means, [tail, 100.0 - tail])
        out[level] = (float(lo), float(hi))
    return out


def summarize(values, n_resamples: int = 1000, seed: int = 0, name: str = "score") -> ScoreEntry:
    x = np.asarray(values, dtype=np.float64)
    std = float(x.std(ddof=1)) if x.size > 1 else 0.0
    return ScoreEntry(float(x.mean()), std, int(x.size), bootstrap_ci(x, CI_LEVELS, n_resamples, seed, name))


@dataclass
class ScoreReport:
    scores: dict[str, ScoreEntry | None]
    per_set: dict[str, dict[str, float | None]]

    def to_dict(self) -> dict:
        return {
            "scores": {c: (None if self.scores[c] is None else self.scores[c].to_dict()) for c in COLUMNS},
            "per_set": self.per_set,
        }

    def csv_rows(self):
        header = ["metric", "mean", "std", "n_sets", "ci80_lo", "ci80_hi", "ci95_lo", "ci95_hi"]
        rows = []
        for c in COLUMNS:
            e = self.scores[c]
            if e is None:
                rows.append([c, "", "", 0, "", "", "", ""])
            else:
                rows.append([c, e.mean, e.std, e.n_sets, *e.ci[80], *e.ci[95]])
        return header, rows


def aggregate_report(records, n_resamples: int = 1000, seed: int = 0) -> ScoreReport:
    """Score each set, then average across sets with bootstrap intervals."""
    records = list(records)
    if not records:
        raise ValidationError("aggregate_report needs records covering at least one set")
    groups: dict[str, list[EvalRecord]] = {}
    for r in records:
        groups.setdefault(r.set_id, []).append(r)
    per_set = {sid: score_set(sorted(rs, key=lambda r: r.image_id)) for sid, rs in sorted(groups.items())}
    scores = {}
    for c in COLUMNS:
        vals = [v[c] for v in per_set.values() if v[c] is not None]
        scores[c] = summarize(vals, n_resamples, seed, c) if vals else None
    return ScoreReport(scores, per_set)


def bootstrap_coverage(n_sets: int = 20, trials: int = 200, level: int = 95, seed: int = 0,
                       mu: float = 70.0, sd: float = 10.0, n_resamples: int = 1000) -> float:
    """Fraction of synthetic trials whose interval contains the true mean."""
    hits = 0
    for t in range(trials):
        x = stream(seed, "coverage", t).normal(mu, sd, size=n_sets)
        lo, hi = bootstrap_ci(x, (level,), n_resamples, seed + t + 1)[level]
        hits += lo <= mu <= hi
    return hits / trials
