"""One-image-per-minibatch training of the detector generator.

Classification uses sigmoid cross-entropy over every non-ignored
(phrase, region) cell; regression uses smooth-L1 on the positive cells of
the original phrases. Gradients are analytic and the optimizer is Adam.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from qarcnn.detector import GeneratorParams, regression_targets
from qarcnn.embedding import Phrase, WordVectorTable, embed_phrase, head_noun
from qarcnn.metrics import iou_matrix
from qarcnn.npa import (
    DEFAULT_CANDIDATES,
    DEFAULT_COOC_RATIO,
    IGNORE,
    NEG,
    POS,
    ConfusionTable,
    CooccurrenceStats,
    LabeledObjects,
    Taxonomy,
    augment_minibatch,
    build_confusion_table,
)

log = logging.getLogger(__name__)

POSITIVE_IOU = 0.5


@dataclass
class AnnotatedImage:
    image_id: int
    region_ids: np.ndarray  # (n_r,)
    boxes: np.ndarray  # (n_r, 4)
    features: np.ndarray  # (n_r, d_feat)
    phrases: list[Phrase]
    gt_boxes: np.ndarray  # (C_i, 4)

    def __post_init__(self):
        self.region_ids = np.asarray(self.region_ids)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.gt_boxes = np.asarray(self.gt_boxes, dtype=np.float64).reshape(-1, 4)
        if len(self.boxes) < 1 or len(self.phrases) < 1:
            raise ValueError(f"image {self.image_id} needs at least one region and one phrase")
        if len(self.features) != len(self.boxes) or len(self.region_ids) != len(self.boxes):
            raise ValueError(f"image {self.image_id}: region arrays differ in length")
        if len(self.gt_boxes) != len(self.phrases):
            raise ValueError(f"image {self.image_id}: one gt box per phrase required")

    @property
    def n_regions(self) -> int:
        return len(self.boxes)


def assign_labels(image: AnnotatedImage) -> np.ndarray:
    """POS where a region overlaps the phrase's box by more than 0.5 IoU, else NEG."""
    overlaps = iou_matrix(image.gt_boxes, image.boxes)
    return np.where(overlaps > POSITIVE_IOU, POS, NEG).astype(np.int8)


@dataclass
class Batch:
    """Everything one loss evaluation needs.

    Rows of ``labels`` beyond ``len(gt_boxes)`` are augmented negative
    phrases and carry no regression targets.
    """

    embeddings: np.ndarray  # (C, dim)
    features: np.ndarray  # (n_r, d_feat)
    boxes: np.ndarray  # (n_r, 4)
    gt_boxes: np.ndarray  # (C_orig, 4)
    labels: np.ndarray  # (C, n_r)


def smooth_l1(x: np.ndarray, delta: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise smooth-L1 value and derivative."""
    ax = np.abs(x)
    small = ax < delta
    value = np.where(small, 0.5 * x * x / delta, ax - 0.5 * delta)
    grad = np.where(small, x / delta, np.sign(x))
    return value, grad


def loss_terms(params: GeneratorParams, batch: Batch, reg_weight: float = 1.0, delta: float = 1.0):
    """Forward and backward pass.

    Returns ``(total, cls_loss, reg_loss, grads)`` with ``grads`` shaped like
    ``params``.
    """
    V = np.asarray(batch.embeddings, dtype=np.float64)
    F = batch.features
    labels = np.asarray(batch.labels)
    n_orig = len(batch.gt_boxes)

    mask = labels != IGNORE
    n_cls = int(mask.sum())
    if n_cls == 0:
        raise ValueError("degenerate batch: every cell is ignored")
    y = (labels == POS).astype(np.float64)

    Wc = V @ params.W.T  # (C, d_feat)
    S = Wc @ F.T  # (C, n_r)
    # -[y log s(x) + (1-y) log(1-s(x))] = softplus(x) - y x
    softplus = np.logaddexp(0.0, S)
    cls_loss = float(((softplus - y * S) * mask).sum() / n_cls)
    sig = 0.5 * (1.0 + np.tanh(0.5 * S))
    dS = (sig - y) * mask / n_cls
    dWc = dS @ F
    gW = dWc.T @ V

    pre = V @ params.H1.T + params.b1  # (C, hidden)
    hidden = np.maximum(pre, 0.0)
    gH1 = np.zeros_like(params.H1)
    gb1 = np.zeros_like(params.b1)
    gH2 = np.zeros_like(params.H2)
    gb2 = np.zeros_like(params.b2)

    pos_rows, pos_cols = np.nonzero(labels[:n_orig] == POS)
    n_pos = len(pos_rows)
    reg_loss = 0.0
    if n_pos and reg_weight:
        targets = regression_targets(batch.boxes[pos_cols], batch.gt_boxes[pos_rows])  # (P, 4)
        h_pos = hidden[:n_orig]
        # w_r[k] for original rows: (4, C_orig, d_feat)
        Wr = np.einsum("kdh,ch->kcd", params.H2, h_pos) + params.b2[:, None, :]
        pred = np.einsum("kpd,pd->pk", Wr[:, pos_rows, :], F[pos_cols])
        value, grad = smooth_l1(pred - targets, delta)
        reg_loss = float(value.sum() / n_pos)
        dpred = reg_weight * grad / n_pos  # (P, 4)
        dWr = np.zeros((4, n_orig, F.shape[1]))
        for k in range(4):
            np.add.at(dWr[k], pos_rows, dpred[:, k : k + 1] * F[pos_cols])
        gH2 = np.einsum("kcd,ch->kdh", dWr, h_pos)
        gb2 = dWr.sum(axis=1)
        dh = np.einsum("kcd,kdh->ch", dWr, params.H2)
        dpre = dh * (pre[:n_orig] > 0)
        gH1 = dpre.T @ V[:n_orig]
        gb1 = dpre.sum(axis=0)

    total = cls_loss + reg_weight * reg_loss
    grads = GeneratorParams(W=gW, H1=gH1, b1=gb1, H2=gH2, b2=gb2)
    return total, cls_loss, reg_loss, grads


def minibatch_loss(params: GeneratorParams, batch: Batch, reg_weight: float = 1.0, delta: float = 1.0):
    total, _, _, grads = loss_terms(params, batch, reg_weight, delta)
    return total, grads


class Adam:
    def __init__(self, params: GeneratorParams, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.arrays().items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays().items()}
        self.t = 0

    def step(self, params: GeneratorParams, grads: GeneratorParams) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.arrays().items():
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p = getattr(params, name)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    iterations: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    regression_loss_weight: float = 1.0
    smooth_l1_delta: float = 1.0
    seed: int = 0
    npa_enabled: bool = False
    npa_negatives_per_phrase: int = 1
    confusion_refresh_interval: int = 10000
    confusion_min_frequency: int = 50
    lr_milestones: tuple[int, ...] = ()
    lr_gamma: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0 or self.iterations < 0:
            raise ValueError("learning_rate must be positive and iterations non-negative")
        if self.npa_negatives_per_phrase < 1 or self.confusion_refresh_interval < 1:
            raise ValueError("NPA settings must be positive")


@dataclass
class NpaInputs:
    valset: LabeledObjects
    lexicon: frozenset[str]
    taxonomy: Taxonomy | None = None
    cooc: CooccurrenceStats | None = None
    candidates: int = DEFAULT_CANDIDATES
    ratio: float = DEFAULT_COOC_RATIO


@dataclass
class TrainResult:
    params: GeneratorParams
    losses: list[float] = field(default_factory=list)
    table_builds: list[int] = field(default_factory=list)
    table: ConfusionTable | None = None
    npa_rows: list[int] = field(default_factory=list)


class _EmbeddingCache:
    def __init__(self, words: WordVectorTable):
        self.words = words
        self._cache: dict[tuple[str, ...], np.ndarray] = {}

    def __call__(self, phrase: Phrase) -> np.ndarray:
        vec = self._cache.get(phrase.tokens)
        if vec is None:
            vec = self._cache[phrase.tokens] = embed_phrase(self.words, phrase)
        return vec


def train(
    params: GeneratorParams,
    dataset: Sequence[AnnotatedImage],
    words: WordVectorTable,
    config: TrainConfig,
    npa: NpaInputs | None = None,
    callback: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Run ``config.iterations`` Adam steps, one image per step.

    Images are visited in a seeded shuffled order, reshuffled every epoch.
    With NPA enabled the confusion table is rebuilt after every
    ``confusion_refresh_interval`` iterations from the categories seen at
    least ``confusion_min_frequency`` times in that window (the whole
    dataset when it is smaller than the window); augmentation starts after
    the first build.
    """
    if not dataset:
        raise ValueError("empty dataset")
    if config.npa_enabled and npa is None:
        raise ValueError("npa_enabled requires NpaInputs")
    params = params.copy()
    result = TrainResult(params=params)
    if config.iterations == 0:
        return result

    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.eps)
    embed = _EmbeddingCache(words)
    base_labels = [assign_labels(img) for img in dataset]
    lexicon = npa.lexicon if npa is not None else frozenset()
    nouns = [[head_noun(p, lexicon)[1] for p in img.phrases] for img in dataset]
    dataset_counts = Counter(n for ns in nouns for n in ns)

    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(dataset))
    cursor = 0
    window: Counter = Counter()
    table: ConfusionTable | None = None

    for it in range(1, config.iterations + 1):
        if cursor == len(order):
            order = rng.permutation(len(dataset))
            cursor = 0
        idx = int(order[cursor])
        cursor += 1
        img = dataset[idx]
        phrases, labels = img.phrases, base_labels[idx]
        if config.npa_enabled and table:
            step_rng = np.random.default_rng([config.seed, it])
            phrases, labels = augment_minibatch(
                phrases, labels, table, lexicon, config.npa_negatives_per_phrase, step_rng
            )
        result.npa_rows.append(len(phrases) - len(img.phrases))
        batch = Batch(
            embeddings=np.stack([embed(p) for p in phrases]),
            features=img.features,
            boxes=img.boxes,
            gt_boxes=img.gt_boxes,
            labels=labels,
        )
        loss, _, _, grads = loss_terms(params, batch, config.regression_loss_weight, config.smooth_l1_delta)
        result.losses.append(loss)
        if callback is not None:
            callback(it, loss)
        opt.lr = config.learning_rate * config.lr_gamma ** sum(it > m for m in config.lr_milestones)
        opt.step(params, grads)

        if config.npa_enabled:
            window.update(nouns[idx])
            if it % config.confusion_refresh_interval == 0:
                counts = window if len(dataset) >= config.confusion_refresh_interval else dataset_counts
                frequent = sorted(c for c, n in counts.items() if n >= config.confusion_min_frequency)
                table = build_confusion_table(
                    params, words, npa.valset, frequent, npa.taxonomy, npa.cooc, npa.candidates, npa.ratio
                )
                result.table_builds.append(it)
                result.table = table
                log.info("iteration %d: confusion table rebuilt with %d entries", it, len(table))
                window = Counter()
    return result


def labeled_objects(images: Sequence[AnnotatedImage], lexicon) -> LabeledObjects:
    """One object per annotated phrase: its best-overlapping region, labeled by head noun.

    Phrases whose best region does not exceed 0.5 IoU are skipped.
    """
    feats, labels = [], []
    for img in images:
        overlaps = iou_matrix(img.gt_boxes, img.boxes)
        for c, phrase in enumerate(img.phrases):
            r = int(np.argmax(overlaps[c]))
            if overlaps[c, r] > POSITIVE_IOU:
                feats.append(img.features[r])
                labels.append(head_noun(phrase, lexicon)[1])
    if not feats:
        raise ValueError("no annotated object overlaps a region")
    return LabeledObjects(np.stack(feats), labels)


def build_images(features, annotations) -> list[AnnotatedImage]:
    """Join a :class:`~qarcnn.store.FeatureSet` with its annotations by image id.

    Images without annotations are dropped; annotations of images without
    regions raise.
    """
    groups = features.by_image()
    phrases: dict[int, list] = {}
    for ann in annotations:
        phrases.setdefault(ann.image_id, []).append(ann)
    images = []
    for image_id in sorted(phrases):
        rows = groups.get(image_id)
        if rows is None:
            raise ValueError(f"annotated image {image_id} has no regions")
        anns = phrases[image_id]
        images.append(
            AnnotatedImage(
                image_id=image_id,
                region_ids=features.region_ids[rows],
                boxes=features.boxes[rows],
                features=features.features[rows],
                phrases=[a.phrase for a in anns],
                gt_boxes=[tuple(a.box) for a in anns],
            )
        )
    return images
