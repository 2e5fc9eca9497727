"""Baseline vs. negative-phrase-augmented training on a synthetic world."""

from __future__ import annotations

from dataclasses import dataclass, field

from qarcnn.detector import GeneratorParams
from qarcnn.evaluation import evaluate
from qarcnn.npa import ConfusionTable
from qarcnn.synthetic import SyntheticWorld, SyntheticWorldSpec, generate_world
from qarcnn.training import NpaInputs, TrainConfig, TrainResult, build_images, labeled_objects, train


@dataclass
class ExperimentConfig:
    hidden_dim: int = 16
    iterations: int = 6000
    learning_rate: float = 5e-3
    confusion_refresh_interval: int = 1000
    confusion_min_frequency: int = 50
    npa_negatives_per_phrase: int = 1
    confusion_depth: int = 100

    def train_config(self, seed: int, npa: bool) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            iterations=self.iterations,
            seed=seed,
            npa_enabled=npa,
            npa_negatives_per_phrase=self.npa_negatives_per_phrase,
            confusion_refresh_interval=self.confusion_refresh_interval,
            confusion_min_frequency=self.confusion_min_frequency,
            lr_milestones=(2 * self.iterations // 3,),
        )


@dataclass
class ComparisonResult:
    world: SyntheticWorld
    baseline: dict
    npa: dict
    table: ConfusionTable | None
    runs: dict[str, TrainResult] = field(default_factory=dict)

    @property
    def relative_gain(self) -> float:
        return self.npa["map"] / self.baseline["map"] - 1.0

    def sibling_false_alarms(self, report: dict) -> dict[str, int]:
        return {
            q: sum(n for cat, n in entry["false_alarms"].items() if cat in self.world.siblings(q))
            for q, entry in report["queries"].items()
        }

    def summary(self) -> dict:
        base = self.sibling_false_alarms(self.baseline)
        npa = self.sibling_false_alarms(self.npa)
        return {
            "seed": self.world.spec.seed,
            "map_baseline": self.baseline["map"],
            "map_npa": self.npa["map"],
            "relative_gain": self.relative_gain,
            "sibling_false_alarms_baseline": base,
            "sibling_false_alarms_npa": npa,
            "fraction_queries_fewer_sibling_false_alarms": sum(npa[q] < base[q] for q in base) / len(base),
        }


def train_world(world: SyntheticWorld, cfg: ExperimentConfig, npa: bool, seed: int | None = None) -> TrainResult:
    seed = world.spec.seed if seed is None else seed
    images = build_images(world.features["train"], world.annotations["train"])
    npa_inputs = None
    if npa:
        val = build_images(world.features["val"], world.annotations["val"])
        npa_inputs = NpaInputs(labeled_objects(val, world.lexicon), world.lexicon, world.taxonomy, world.cooc)
    params = GeneratorParams.initialize(world.spec.embed_dim, world.spec.feature_dim, cfg.hidden_dim, seed=seed)
    return train(params, images, world.words, cfg.train_config(seed, npa), npa_inputs)


def evaluate_world(world: SyntheticWorld, params: GeneratorParams, cfg: ExperimentConfig) -> dict:
    return evaluate(
        params,
        world.words,
        world.annotations["test"],
        world.queries,
        features=world.features["test"],
        lexicon=world.lexicon,
        confusion_depth=cfg.confusion_depth,
    )


def compare_npa(spec: SyntheticWorldSpec, cfg: ExperimentConfig | None = None) -> ComparisonResult:
    cfg = cfg or ExperimentConfig()
    world = generate_world(spec)
    base = train_world(world, cfg, npa=False)
    aug = train_world(world, cfg, npa=True)
    return ComparisonResult(
        world=world,
        baseline=evaluate_world(world, base.params, cfg),
        npa=evaluate_world(world, aug.params, cfg),
        table=aug.table,
        runs={"baseline": base, "npa": aug},
    )
