"""Prompt/box benchmark construction from COCO-style detection annotations.

Pipeline: ``load_annotations`` -> ``clean_boxes`` -> ``assemble_sets`` ->
``fill_prompts``.  Every random choice draws from a named stream of one seed,
so a run is reproducible byte for byte.
"""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field, replace
from importlib import resources
from itertools import combinations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import ValidationError
from .rng import stream

SCHEMA = "actorbench/1"
SUBJECT_TYPES = ("human", "animal", "object")
SET_SIZE = 4

ANIMALS = frozenset({"bird", "cat", "dog", "horse", "sheep", "cow", "elephant", "bear", "zebra", "giraffe"})
DEFAULT_TYPE_MAP = {"person": "human", **{a: "animal" for a in ANIMALS}}
# uniform-looking or hard-to-personalize categories
DEFAULT_DENY = frozenset({
    "apple", "orange", "banana", "broccoli", "carrot", "donut", "sandwich", "pizza", "hot dog",
    "airplane", "traffic light", "stop sign", "fire hydrant", "parking meter", "sports ball",
    "kite", "skis", "knife", "fork", "spoon", "toothbrush", "scissors", "dining table",
})


class BenchParseError(ValueError):
    """The annotation file does not match the documented subset."""


@dataclass(frozen=True)
class AnnotationRecord:
    ann_id: int
    image_id: int
    category: str
    bbox: tuple[float, float, float, float]  # x, y, w, h in pixels
    width: int
    height: int

    @property
    def box(self) -> tuple[float, float, float, float]:
        """Normalized ``(h_min, w_min, h_max, w_max)``."""
        x, y, w, h = self.bbox
        return (y / self.height, x / self.width, (y + h) / self.height, (x + w) / self.width)

    @property
    def area_frac(self) -> float:
        return self.bbox[2] * self.bbox[3] / (self.width * self.height)

    @property
    def edge_margin(self) -> float:
        h0, w0, h1, w1 = self.box
        return min(h0, w0, 1.0 - h1, 1.0 - w1)


@dataclass(frozen=True)
class CleaningPolicy:
    min_area_frac: float = 0.05
    min_edge_margin_frac: float = 0.02
    type_map: dict = field(default_factory=lambda: dict(DEFAULT_TYPE_MAP))
    allow: frozenset | None = None
    deny: frozenset = DEFAULT_DENY
    conversions: dict = field(default_factory=dict)
    conversion_rate: float = 0.0
    max_sets_per_category: int | None = None

    def __post_init__(self):
        for name in ("min_area_frac", "min_edge_margin_frac"):
            v = getattr(self, name)
            if not 0.0 < v < 0.5:
                raise ValidationError(f"{name} must lie in (0, 0.5), got {v}")
        if not 0.0 <= self.conversion_rate <= 1.0:
            raise ValidationError("conversion_rate must lie in [0, 1]")
        bad = {t for t in self.type_map.values() if t not in SUBJECT_TYPES}
        if bad:
            raise ValidationError(f"unknown subject types {sorted(bad)}")

    def subject_type(self, category: str) -> str:
        return self.type_map.get(category, "object")

    def keeps(self, rec: AnnotationRecord) -> bool:
        if rec.category in self.deny:
            return False
        if self.allow is not None and rec.category not in self.allow:
            return False
        return rec.area_frac >= self.min_area_frac and rec.edge_margin >= self.min_edge_margin_frac

    @classmethod
    def from_dict(cls, d: dict) -> "CleaningPolicy":
        kw = dict(d)
        for key in ("allow", "deny"):
            if key in kw and kw[key] is not None:
                kw[key] = frozenset(kw[key])
        return cls(**kw)


@dataclass
class BenchPair:
    boxes: list[tuple[float, float, float, float]]
    annotation_ids: list[int]
    image_id: int | None = None
    prompt: str = ""
    segments: dict = field(default_factory=dict)


@dataclass
class BenchSet:
    set_id: str
    categories: tuple[str, ...]
    subjects: tuple[str, ...]
    types: tuple[str, ...]
    pairs: list[BenchPair]

    def to_dict(self) -> dict:
        return {
            "id": self.set_id,
            "categories": list(self.categories),
            "subjects": list(self.subjects),
            "types": list(self.types),
            "pairs": [
                {"prompt": p.prompt, "segments": p.segments, "boxes": [list(b) for b in p.boxes],
                 "annotation_ids": p.annotation_ids, "image_id": p.image_id}
                for p in self.pairs
            ],
        }


# ------------------------------------------------------------------ loading


def _num(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise BenchParseError(f"{where}: expected a number, got {value!r}")
    return float(value)


def parse_annotations(doc) -> tuple[list[AnnotationRecord], list[dict]]:
    """Validate a decoded COCO document; returns ``(records, rejections)``.

    Structural problems raise ``BenchParseError`` naming the offending path;
    individually bad boxes are rejected and reported instead.
    """
    if not isinstance(doc, dict):
        raise BenchParseError("$: expected a JSON object")
    for key in ("images", "annotations", "categories"):
        if not isinstance(doc.get(key, []), list):
            raise BenchParseError(f"$.{key}: expected a list")
    images, cats = {}, {}
    for k, img in enumerate(doc.get("images", [])):
        where = f"$.images[{k}]"
        if not isinstance(img, dict) or not {"id", "width", "height"} <= img.keys():
            raise BenchParseError(f"{where}: needs id, width, height")
        w, h = _num(img["width"], where + ".width"), _num(img["height"], where + ".height")
        if w <= 0 or h <= 0:
            raise BenchParseError(f"{where}: non-positive image size")
        images[img["id"]] = (int(w), int(h))
    for k, cat in enumerate(doc.get("categories", [])):
        if not isinstance(cat, dict) or not {"id", "name"} <= cat.keys():
            raise BenchParseError(f"$.categories[{k}]: needs id and name")
        cats[cat["id"]] = str(cat["name"])

    records, rejections = [], []
    for k, ann in enumerate(doc.get("annotations", [])):
        where = f"$.annotations[{k}]"
        if not isinstance(ann, dict) or not {"image_id", "category_id", "bbox"} <= ann.keys():
            raise BenchParseError(f"{where}: needs image_id, category_id, bbox")
        bbox = ann["bbox"]
        if not isinstance(bbox, list) or len(bbox) != 4:
            raise BenchParseError(f"{where}.bbox: expected 4 numbers")
        x, y, bw, bh = (_num(v, f"{where}.bbox[{j}]") for j, v in enumerate(bbox))
        ann_id = int(ann.get("id", k))

        def reject(reason):
            rejections.append({"index": k, "annotation_id": ann_id, "reason": reason})

        if ann["image_id"] not in images:
            reject("unknown image_id")
            continue
        if ann["category_id"] not in cats:
            reject("unknown category_id")
            continue
        W, H = images[ann["image_id"]]
        if bw <= 0 or bh <= 0:
            reject("non-positive box area")
            continue
        if x < 0 or y < 0 or x + bw > W or y + bh > H:
            reject("box outside image bounds")
            continue
        records.append(AnnotationRecord(ann_id, ann["image_id"], cats[ann["category_id"]], (x, y, bw, bh), W, H))
    return records, rejections


def load_annotations(path) -> tuple[list[AnnotationRecord], list[dict]]:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise BenchParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    try:
        return parse_annotations(doc)
    except BenchParseError as exc:
        raise BenchParseError(f"{path}: {exc}") from None


# ----------------------------------------------------------------- cleaning


def clean_boxes(records, policy: CleaningPolicy | None = None) -> list[AnnotationRecord]:
    policy = policy or CleaningPolicy()
    return [r for r in records if policy.keeps(r)]


class BoxCleaner(TransformerMixin, BaseEstimator):
    """Transformer wrapper around ``clean_boxes`` for pipeline use."""

    def __init__(self, min_area_frac=0.05, min_edge_margin_frac=0.02, deny=DEFAULT_DENY, allow=None):
        self.min_area_frac = min_area_frac
        self.min_edge_margin_frac = min_edge_margin_frac
        self.deny = deny
        self.allow = allow

    def fit(self, X=None, y=None):
        self.policy_ = CleaningPolicy(self.min_area_frac, self.min_edge_margin_frac,
                                      allow=None if self.allow is None else frozenset(self.allow),
                                      deny=frozenset(self.deny))
        return self

    def transform(self, X):
        if not hasattr(self, "policy_"):
            self.fit()
        return clean_boxes(X, self.policy_)


# ----------------------------------------------------------------- assembly


def _distinct_first(recs: list[AnnotationRecord], rng: np.random.Generator) -> list[AnnotationRecord]:
    """Seeded shuffle, then stable-sort so each image's first box comes before its second."""
    shuffled = [recs[k] for k in rng.permutation(len(recs))]
    seen: dict[int, int] = defaultdict(int)
    ranked = []
    for pos, r in enumerate(shuffled):
        ranked.append((seen[r.image_id], pos, r))
        seen[r.image_id] += 1
    return [r for _, _, r in sorted(ranked, key=lambda t: (t[0], t[1]))]


def _n_sets(available: int, policy: CleaningPolicy) -> int:
    n = available // SET_SIZE
    return n if policy.max_sets_per_category is None else min(n, policy.max_sets_per_category)


def _convert(categories, policy: CleaningPolicy, rng_seed: int, set_id: str) -> tuple[str, ...]:
    rng = stream(rng_seed, "convert", set_id)
    names = []
    for cat in categories:
        options = policy.conversions.get(cat, [])
        if options and rng.random() < policy.conversion_rate:
            names.append(str(options[rng.integers(len(options))]))
        else:
            names.append(cat)
    return tuple(names)


def assemble_sets(records, policy: CleaningPolicy | None = None, rng_seed: int = 0):
    """Group cleaned records into single- and double-subject sets of four.

    Returns ``(single_sets, double_sets, report)``; ``report["skipped"]`` lists
    categories and category pairs with fewer than four usable boxes.
    """
    policy = policy or CleaningPolicy()
    by_cat: dict[str, list[AnnotationRecord]] = defaultdict(list)
    by_image: dict[int, dict[str, list[AnnotationRecord]]] = defaultdict(lambda: defaultdict(list))
    for r in sorted(records, key=lambda r: (r.category, r.image_id, r.ann_id)):
        by_cat[r.category].append(r)
        by_image[r.image_id][r.category].append(r)

    skipped = []
    singles = []
    for cat in sorted(by_cat):
        recs = by_cat[cat]
        n = _n_sets(len(recs), policy)
        if n == 0:
            skipped.append({"kind": "single", "categories": [cat], "available": len(recs)})
            continue
        ordered = _distinct_first(recs, stream(rng_seed, "single", cat))
        for k in range(n):
            chunk = ordered[k * SET_SIZE:(k + 1) * SET_SIZE]
            set_id = f"single/{cat}/{k}"
            singles.append(BenchSet(
                set_id, (cat,), _convert((cat,), policy, rng_seed, set_id), (policy.subject_type(cat),),
                [BenchPair([r.box], [r.ann_id], r.image_id) for r in chunk]))

    co: dict[tuple[str, str], list[int]] = defaultdict(list)
    for image_id in sorted(by_image):
        for a, b in combinations(sorted(by_image[image_id]), 2):
            co[(a, b)].append(image_id)
    doubles = []
    for a, b in sorted(co):
        image_ids = co[(a, b)]
        n = _n_sets(len(image_ids), policy)
        if n == 0:
            skipped.append({"kind": "double", "categories": [a, b], "available": len(image_ids)})
            continue
        picks = []
        for image_id in image_ids:
            rng = stream(rng_seed, "pick", a, b, image_id)
            ra, rb = by_image[image_id][a], by_image[image_id][b]
            picks.append((ra[rng.integers(len(ra))], rb[rng.integers(len(rb))]))
        order = stream(rng_seed, "double", a, b).permutation(len(picks))
        for k in range(n):
            chunk = [picks[j] for j in order[k * SET_SIZE:(k + 1) * SET_SIZE]]
            set_id = f"double/{a}+{b}/{k}"
            doubles.append(BenchSet(
                set_id, (a, b), _convert((a, b), policy, rng_seed, set_id),
                (policy.subject_type(a), policy.subject_type(b)),
                [BenchPair([ra.box, rb.box], [ra.ann_id, rb.ann_id], ra.image_id) for ra, rb in chunk]))
    return singles, doubles, {"skipped": skipped}


# ------------------------------------------------------------------ prompts

SEGMENTS = ("appearance", "action", "background", "style")


def default_template_bank() -> dict:
    return json.loads(resources.files("dualguide").joinpath("data/templates.json").read_text("utf-8"))


def _options(bank: dict, segment: str, subject_type: str) -> list[str]:
    entry = bank.get(segment)
    if isinstance(entry, dict):
        entry = entry.get(subject_type, [])
    return list(entry or [])


def check_template_bank(bank: dict, types) -> None:
    for t in set(types):
        for seg in SEGMENTS:
            if seg == "action" and t == "object":
                continue
            if not _options(bank, seg, t):
                raise ValidationError(f"template bank has no {seg!r} entry for type {t!r}")


def _subject_phrase(appearance: str, subject: str, action: str) -> str:
    phrase = appearance.format(subject=subject) if "{subject}" in appearance else f"{appearance} {subject}"
    return f"{phrase} {action}" if action else phrase


def fill_prompts(bench_set: BenchSet, bank: dict, rng_seed: int = 0) -> BenchSet:
    """Attach ``[appearance]+[action]+[background]+[style]`` prompts to every pair.

    Appearance (per subject) and style are drawn once per set; action and
    background once per pair.  Objects get no action.
    """
    check_template_bank(bank, bench_set.types)
    rng = stream(rng_seed, "prompt", bench_set.set_id)

    def draw(seg, t):
        opts = _options(bank, seg, t)
        return opts[rng.integers(len(opts))]

    appearance = [draw("appearance", t) for t in bench_set.types]
    style = draw("style", bench_set.types[0])
    pairs = []
    for p in bench_set.pairs:
        actions = ["" if t == "object" else draw("action", t) for t in bench_set.types]
        background = draw("background", bench_set.types[0])
        subjects = " and ".join(_subject_phrase(ap, s, ac)
                                for ap, s, ac in zip(appearance, bench_set.subjects, actions))
        prompt = f"{subjects}, {background}, {style}"
        segs = {"appearance": appearance, "action": actions, "background": background, "style": style}
        pairs.append(replace(p, prompt=prompt, segments=segs))
    return replace(bench_set, pairs=pairs)


def build_benchmark(records, policy: CleaningPolicy | None = None, bank: dict | None = None,
                    rng_seed: int = 0, rejections=()) -> dict:
    """Full pipeline to the ``actorbench/1`` document."""
    policy = policy or CleaningPolicy()
    bank = default_template_bank() if bank is None else bank
    kept = clean_boxes(records, policy)
    singles, doubles, report = assemble_sets(kept, policy, rng_seed)
    sets = [fill_prompts(s, bank, rng_seed) for s in singles + doubles]
    report = {
        "records": len(records),
        "kept": len(kept),
        "rejected": list(rejections),
        "skipped": report["skipped"],
        "single_sets": len(singles),
        "double_sets": len(doubles),
    }
    return {"schema": SCHEMA, "sets": [s.to_dict() for s in sets], "report": report}
