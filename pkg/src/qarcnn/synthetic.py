"""Seeded synthetic worlds of visually confusable, semantically exclusive categories.

Categories are grouped into superclusters. Members of one supercluster have
nearby feature centers and nearby word vectors, yet no object ever carries
two member labels, so they are the hard negatives of each other. Every image
holds one object of its own category and, with ``distractor_probability``,
a second object from a different supercluster; all objects are annotated.
Each object gets one proposal that is a jittered copy of its box; the other
proposals overlap every object by less than 0.3 IoU. A few feature dimensions encode
the proposal-to-object offset so box regression is learnable.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from qarcnn.detector import Box, regression_targets
from qarcnn.embedding import Phrase, WordVectorTable, save_word_vectors
from qarcnn.metrics import iou
from qarcnn.npa import CooccurrenceStats, Taxonomy
from qarcnn.store import (
    Annotation,
    FeatureSet,
    write_annotations,
    write_cooccurrence,
    write_feature_file,
    write_taxonomy,
)

_NAME_POOL = [
    ("animal", ["dog", "cat", "horse", "cow", "sheep"]),
    ("vehicle", ["car", "bus", "truck", "van", "tractor"]),
    ("furniture", ["chair", "sofa", "bench", "stool", "bed"]),
    ("instrument", ["guitar", "violin", "cello", "banjo", "harp"]),
    ("garment", ["shirt", "jacket", "coat", "sweater", "vest"]),
    ("fruit", ["apple", "pear", "peach", "plum", "orange"]),
]
_MODIFIERS = ["big", "small", "old", "young", "red", "white", "dark", "running", "standing", "little"]
_DETERMINERS = ["a", "the", "this", "one"]

IMAGE_SIZE = 100.0
SPLITS = ("train", "val", "test")


@dataclass
class SyntheticWorldSpec:
    superclusters: int = 5
    categories_per_supercluster: int = 3
    images: int = 60  # training images per category
    val_images: int = 200
    test_images: int = 120
    regions_per_image: int = 10
    feature_dim: int = 32
    embed_dim: int = 24
    supercluster_scale: float = 4.0
    intra_supercluster_separation: float = 1.5
    feature_noise: float = 0.5
    word_separation: float = 0.5
    word_noise: float = 0.3
    proposal_jitter: float = 0.1
    distractor_probability: float = 0.5
    seed: int = 0

    def __post_init__(self):
        ints = ("superclusters", "categories_per_supercluster", "images", "val_images", "test_images",
                "regions_per_image", "feature_dim", "embed_dim")
        for name in ints:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("supercluster_scale", "intra_supercluster_separation", "feature_noise",
                     "word_separation", "word_noise", "proposal_jitter", "distractor_probability"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.feature_dim < 8:
            raise ValueError("feature_dim must be at least 8")
        if self.regions_per_image < 2:
            raise ValueError("regions_per_image must be at least 2")

    @property
    def loc_dim(self) -> int:
        return 8 if self.feature_dim >= 16 else 4


@dataclass
class SyntheticWorld:
    spec: SyntheticWorldSpec
    categories: list[str]
    supercluster_of: dict[str, str]
    words: WordVectorTable
    taxonomy: Taxonomy
    cooc: CooccurrenceStats
    features: dict[str, FeatureSet]
    annotations: dict[str, list[Annotation]]
    category_centers: np.ndarray  # (n_categories, feature_dim)
    background_center: np.ndarray  # (feature_dim,)
    queries: list[str]

    def siblings(self, category: str) -> list[str]:
        sup = self.supercluster_of[category]
        return [c for c in self.categories if c != category and self.supercluster_of[c] == sup]

    @property
    def lexicon(self) -> frozenset[str]:
        return frozenset(self.categories) | frozenset(self.supercluster_of.values())

    def write(self, out: str | Path) -> dict[str, Path]:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        paths = {}
        for split in SPLITS:
            paths[f"{split}_features"] = out / f"{split}.qarf"
            paths[f"{split}_annotations"] = out / f"{split}.jsonl"
            write_feature_file(paths[f"{split}_features"], self.features[split])
            write_annotations(paths[f"{split}_annotations"], self.annotations[split])
        paths["words"] = out / "words.txt"
        save_word_vectors(self.words, paths["words"])
        paths["taxonomy"] = out / "taxonomy.tsv"
        write_taxonomy(paths["taxonomy"], self.taxonomy)
        paths["cooc_totals"] = out / "cooc_totals.tsv"
        paths["cooc_pairs"] = out / "cooc_pairs.tsv"
        write_cooccurrence(paths["cooc_totals"], paths["cooc_pairs"], self.cooc)
        paths["queries"] = out / "queries.txt"
        paths["queries"].write_text("".join(q + "\n" for q in self.queries), encoding="utf-8")
        paths["world"] = out / "world.json"
        meta = {"spec": asdict(self.spec), "supercluster_of": self.supercluster_of}
        paths["world"].write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return paths


def _names(spec: SyntheticWorldSpec) -> tuple[list[str], dict[str, str]]:
    categories, sup_of = [], {}
    for s in range(spec.superclusters):
        if s < len(_NAME_POOL) and spec.categories_per_supercluster <= len(_NAME_POOL[s][1]):
            sup, members = _NAME_POOL[s][0], _NAME_POOL[s][1][: spec.categories_per_supercluster]
        else:
            sup = f"group{s}"
            members = [f"kind{s}x{j}" for j in range(spec.categories_per_supercluster)]
        for c in members:
            categories.append(c)
            sup_of[c] = sup
    return categories, sup_of


def _unit(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _random_box(rng) -> Box:
    w, h = rng.uniform(25, 50, size=2)
    x1 = rng.uniform(0, IMAGE_SIZE - w)
    y1 = rng.uniform(0, IMAGE_SIZE - h)
    return Box(x1, y1, x1 + w, y1 + h)


def _jitter(rng, gt: Box, jitter: float) -> Box:
    for _ in range(100):
        dx1, dx2 = rng.uniform(-jitter, jitter, 2) * gt.width
        dy1, dy2 = rng.uniform(-jitter, jitter, 2) * gt.height
        box = Box(gt.x1 + dx1, gt.y1 + dy1, gt.x2 + dx2, gt.y2 + dy2)
        if box.is_valid() and iou(box, gt) > 0.5:
            return box
    return gt


def _place_objects(rng, n: int) -> list[Box]:
    """Boxes for ``n`` objects that overlap each other by less than 0.3 IoU."""
    for _ in range(1000):
        boxes = [_random_box(rng) for _ in range(n)]
        if all(iou(a, b) < 0.3 for i, a in enumerate(boxes) for b in boxes[i + 1 :]):
            return boxes
    raise RuntimeError("could not place objects")


def _background_box(rng, gts: list[Box]) -> Box:
    for _ in range(1000):
        w, h = rng.uniform(10, 60, size=2)
        x1 = rng.uniform(0, IMAGE_SIZE - w)
        y1 = rng.uniform(0, IMAGE_SIZE - h)
        box = Box(x1, y1, x1 + w, y1 + h)
        if all(iou(box, g) < 0.3 for g in gts):
            return box
    raise RuntimeError("could not place a background proposal")


def generate_world(spec: SyntheticWorldSpec) -> SyntheticWorld:
    rng = np.random.default_rng(spec.seed)
    categories, sup_of = _names(spec)
    sups = list(dict.fromkeys(sup_of.values()))
    n_cat = len(categories)
    app_dim = spec.feature_dim - spec.loc_dim

    # appearance
    sup_centers = spec.supercluster_scale * _unit(rng, len(sups), app_dim)
    background = spec.supercluster_scale * _unit(rng, 1, app_dim)[0]
    offsets = spec.intra_supercluster_separation * _unit(rng, n_cat, app_dim)
    centers = np.stack([sup_centers[sups.index(sup_of[c])] for c in categories]) + offsets
    loc_basis, _ = np.linalg.qr(rng.normal(size=(spec.loc_dim, 4)))
    loc_scale = 1.0 / max(spec.proposal_jitter, 1e-3)

    # words
    sup_words = _unit(rng, len(sups), spec.embed_dim)
    cat_words = (
        np.stack([sup_words[sups.index(sup_of[c])] for c in categories])
        + spec.word_separation * _unit(rng, n_cat, spec.embed_dim)
    )
    fillers = _DETERMINERS + _MODIFIERS
    filler_words = spec.word_noise * _unit(rng, len(fillers), spec.embed_dim)
    entries = {c: cat_words[i] for i, c in enumerate(categories)}
    entries.update({s: sup_words[i] for i, s in enumerate(sups)})
    entries.update({f: filler_words[i] for i, f in enumerate(fillers)})
    words = WordVectorTable(entries, dim=spec.embed_dim)

    taxonomy = Taxonomy((c, sup_of[c]) for c in categories)

    cat_index = {c: i for i, c in enumerate(categories)}
    others = {c: [o for o in categories if sup_of[o] != sup_of[c]] for c in categories}
    features, annotations = {}, {}
    train_objects: dict[str, int] = {c: 0 for c in categories}
    next_image = 0
    counts = {split: n for split, n in zip(SPLITS, (spec.images, spec.val_images, spec.test_images))}
    for split in SPLITS:
        ids, rids, boxes, feats, anns = [], [], [], [], []
        for cat in categories:
            for _ in range(counts[split]):
                image_id = next_image
                next_image += 1
                objects = [cat]
                if others[cat] and spec.regions_per_image >= 3 and rng.random() < spec.distractor_probability:
                    objects.append(str(rng.choice(others[cat])))
                gts = _place_objects(rng, len(objects))
                instances = [centers[cat_index[o]] + spec.feature_noise * rng.normal(size=app_dim) for o in objects]
                slots = rng.permutation(spec.regions_per_image)[: len(objects)]
                for r in range(spec.regions_per_image):
                    loc = 0.05 * rng.normal(size=spec.loc_dim)
                    hit = np.flatnonzero(slots == r)
                    if len(hit):
                        j = int(hit[0])
                        box = _jitter(rng, gts[j], spec.proposal_jitter)
                        app = instances[j]
                        loc = loc + loc_scale * loc_basis @ regression_targets(box, gts[j])
                    else:
                        box = _background_box(rng, gts)
                        cover = np.array([iou(box, g) for g in gts])
                        if cover.sum() > 1:
                            cover = cover / cover.sum()
                        app = (
                            sum(a * inst for a, inst in zip(cover, instances))
                            + (1 - cover.sum()) * background
                            + spec.feature_noise * rng.normal(size=app_dim)
                        )
                    ids.append(image_id)
                    rids.append(r)
                    boxes.append(tuple(box))
                    feats.append(np.concatenate([app, loc]))
                for obj, gt in zip(objects, gts):
                    if split == "train":
                        train_objects[obj] += 1
                        tokens = [str(rng.choice(_DETERMINERS))]
                        if rng.random() < 0.7:
                            tokens.append(str(rng.choice(_MODIFIERS)))
                        tokens.append(obj)
                        phrase = Phrase.from_tokens(tokens)
                    else:
                        phrase = Phrase(obj)
                    anns.append(Annotation(image_id, phrase, Box(*(float(np.float32(v)) for v in gt))))
        features[split] = FeatureSet(ids, rids, boxes, np.array(feats))
        annotations[split] = anns

    # every object is also labeled with its supercluster name
    cooc = CooccurrenceStats()
    for cat, n in train_objects.items():
        cooc.total[cat] = n
        cooc.total[sup_of[cat]] = cooc.total.get(sup_of[cat], 0) + n
        cooc.add_pair(cat, sup_of[cat], n)

    return SyntheticWorld(
        spec=spec,
        categories=categories,
        supercluster_of=sup_of,
        words=words,
        taxonomy=taxonomy,
        cooc=cooc,
        features=features,
        annotations=annotations,
        category_centers=np.hstack([centers, np.zeros((n_cat, spec.loc_dim))]),
        background_center=np.concatenate([background, np.zeros(spec.loc_dim)]),
        queries=list(categories),
    )
