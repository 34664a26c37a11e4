"""End-to-end bias-mitigation experiment: original, balanced and regularized arms."""
from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .attribution import average_maps, normalize01, pixel_map, region_maps
from .augmentation import ALL_SCHEMES, AugmentationPolicy, Scheme, apply_mask, apply_noise, augment_rng, policy_mask
from .confidence import DEFAULT_METHOD, ConfidenceMethod
from .dataset import (BiasSpec, DatasetManifest, build_balanced_subset, build_balanced_testset,
                      build_biased_subset, check_disjoint)
from .errors import ConfigError
from .grid import PatchGridSpec
from .nn import checkpoint
from .nn.functional import cross_entropy_batch
from .nn.layers import Sequential
from .nn.models import small_cnn
from .nn.optim import AdamW, LRSchedule
from .region import RegionClassifierModel, RegionTrainConfig, train_region_classifier

log = logging.getLogger(__name__)


@dataclass
class TargetTrainConfig:
    lr0: float = 1e-5
    gamma: float = 0.95
    batch_size: int = 128
    epochs_noise: int = 20
    epochs_mask: int = 10
    # Arms without augmentation; the source gives no count, the mask count is reused.
    epochs_plain: int = 10
    dropout: float = 0.3
    weight_decay: float = 0.01
    label_smoothing: float = 0.0
    widths: tuple = (8, 16, 32)

    def __post_init__(self):
        if self.lr0 <= 0 or self.batch_size < 1:
            raise ConfigError(f"invalid target training config: {self}")
        self.widths = tuple(self.widths)

    def epochs_for(self, scheme: Scheme | None) -> int:
        if scheme is None:
            return self.epochs_plain
        return self.epochs_noise if scheme.is_noise else self.epochs_mask


class TargetClassifier:
    """Full-image CNN for the target attribute; inputs are shifted by -0.5."""

    def __init__(self, cnn: Sequential, in_channels: int, n_classes: int = 2):
        self.cnn = cnn
        self.in_channels = in_channels
        self.n_classes = n_classes

    def logits(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = [self.cnn.forward(np.asarray(images[s:s + batch_size], np.float32) - np.float32(0.5), train=False)
               for s in range(0, len(images), batch_size)]
        return np.concatenate(out)

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return self.logits(images, batch_size).argmax(axis=1)

    def to_bytes(self) -> bytes:
        tensors = {k: p.data for k, p in self.cnn.parameters().items()}
        tensors.update(self.cnn.buffers())
        return checkpoint.encode_checkpoint(tensors, None, {"kind": "target", "in_channels": self.in_channels,
                                                            "n_classes": self.n_classes})


def train_target(images: np.ndarray, labels: np.ndarray, config: TargetTrainConfig, epochs: int, seed: int,
                 perturb=None) -> TargetClassifier:
    """Train the target CNN. ``perturb(epoch)`` returns that epoch's training images."""
    labels = np.asarray(labels, dtype=np.int64)
    init_ss, shuffle_ss = np.random.SeedSequence(seed).spawn(2)
    rng_init = np.random.default_rng(init_ss)
    rng = np.random.default_rng(shuffle_ss)
    net = small_cnn(images.shape[1], 2, rng_init, dropout=config.dropout, widths=config.widths)
    opt = AdamW(net.parameters(), lr=config.lr0, weight_decay=config.weight_decay)
    schedule = LRSchedule(config.lr0, "exponential", gamma=config.gamma)
    n = len(images)
    for epoch in range(epochs):
        opt.lr = schedule(epoch)
        x = perturb(epoch) if perturb is not None else images
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            opt.zero_grad()
            out = net.forward(x[idx] - np.float32(0.5), train=True)
            _, d = cross_entropy_batch(out, labels[idx], config.label_smoothing)
            net.backward(d)
            opt.step()
    return TargetClassifier(net, images.shape[1])


@dataclass
class SubgroupResult:
    accuracy: float
    accuracy_group0: float
    accuracy_group1: float
    gap: float


def subgroup_metrics(predictions, targets, groups) -> SubgroupResult:
    pred = np.asarray(predictions)
    tgt = np.asarray(targets)
    grp = np.asarray(groups)
    if pred.size == 0:
        raise ConfigError("empty evaluation set")
    accs = []
    for g in (0, 1):
        sel = grp == g
        if not sel.any():
            raise ConfigError(f"group {g} is empty in the evaluation set")
        accs.append(float(np.mean(pred[sel] == tgt[sel])))
    return SubgroupResult(float(np.mean(pred == tgt)), accs[0], accs[1], abs(accs[0] - accs[1]))


def evaluate_subgroups(model, images: np.ndarray, testset: DatasetManifest, target_attr: str,
                       group_attr: str) -> SubgroupResult:
    """Overall and per-group accuracy of ``model.predict`` on a labelled test set."""
    return subgroup_metrics(model.predict(images), testset.column(target_attr), testset.column(group_attr))


# -- experiment ---------------------------------------------------------------

@dataclass
class ExperimentConfig:
    target_attr: str
    confounder_attr: str
    bias: BiasSpec
    grid: PatchGridSpec
    schemes: tuple = ALL_SCHEMES
    quantiles: tuple = (0.6, 0.7, 0.8, 0.95)
    seeds: int = 5
    seed: int = 0
    test_per_cell: int = 100
    region_pool_per_cell: int = 100
    region: RegionTrainConfig = field(default_factory=RegionTrainConfig)
    target: TargetTrainConfig = field(default_factory=TargetTrainConfig)
    method: ConfidenceMethod = DEFAULT_METHOD
    sigma: float = 0.5
    mask_value: float = 0.5
    resample: bool = True
    # Subgroups for accuracy and gap; the target attribute itself unless set.
    group_attr: str | None = None
    threads: int = 1

    def __post_init__(self):
        self.schemes = tuple(Scheme.parse(s) for s in self.schemes)
        self.quantiles = tuple(float(q) for q in self.quantiles)
        self.method = ConfidenceMethod.parse(self.method)
        if self.seeds < 1:
            raise ConfigError("need at least one seed")
        for q in self.quantiles:
            if not 0.0 < q < 1.0:
                raise ConfigError(f"quantile {q} outside (0, 1)")
        if self.target_attr == self.confounder_attr:
            raise ConfigError("target and confounder attributes must differ")

    def run_seeds(self) -> list[int]:
        return [self.seed + i for i in range(self.seeds)]

    def to_dict(self) -> dict:
        return {
            "target": self.target_attr, "confounder": self.confounder_attr,
            "group_attr": self.group_attr or self.target_attr,
            "bias": list(self.bias.as_tuple()), "grid": list(self.grid.as_tuple()),
            "schemes": [s.value for s in self.schemes], "quantiles": list(self.quantiles),
            "seeds": self.run_seeds(), "seed": self.seed, "test_per_cell": self.test_per_cell,
            "region_pool_per_cell": self.region_pool_per_cell, "region": asdict(self.region),
            "target_training": {**asdict(self.target), "widths": list(self.target.widths)},
            "method": self.method.value, "sigma": self.sigma, "mask_value": self.mask_value,
            "resample": self.resample,
        }


@dataclass
class ArmResult:
    name: str
    scheme: str | None
    quantile: float | None
    per_seed: list[tuple[int, SubgroupResult]]

    def median(self, key: str) -> float:
        return float(np.median([getattr(r, key) for _, r in self.per_seed]))

    def to_dict(self) -> dict:
        return {
            "name": self.name, "scheme": self.scheme, "quantile": self.quantile,
            "accuracy": self.median("accuracy"), "accuracy_group0": self.median("accuracy_group0"),
            "accuracy_group1": self.median("accuracy_group1"), "gap": self.median("gap"),
            "seeds": [{"seed": s, **asdict(r)} for s, r in self.per_seed],
        }


@dataclass
class ExperimentReport:
    attribute: str
    arms: list[ArmResult]
    config: dict
    runtime: float = 0.0

    def arm(self, name: str) -> ArmResult:
        for a in self.arms:
            if a.name == name:
                return a
        raise KeyError(name)

    def regularized(self) -> list[ArmResult]:
        return [a for a in self.arms if a.scheme is not None]

    def to_dict(self) -> dict:
        # Runtime is left out so reruns produce identical files.
        return {"attribute": self.attribute, "arms": [a.to_dict() for a in self.arms], "config": self.config}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        arms = [ArmResult(a["name"], a["scheme"], a["quantile"],
                          [(s["seed"], SubgroupResult(s["accuracy"], s["accuracy_group0"],
                                                      s["accuracy_group1"], s["gap"])) for s in a["seeds"]])
                for a in d["arms"]]
        return cls(d["attribute"], arms, d["config"])


REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["attribute", "arms", "config"],
    "properties": {
        "attribute": {"type": "string"},
        "config": {"type": "object"},
        "arms": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["name", "scheme", "quantile", "accuracy", "accuracy_group0",
                             "accuracy_group1", "gap", "seeds"],
                "properties": {
                    "name": {"type": "string"},
                    "scheme": {"type": ["string", "null"]},
                    "quantile": {"type": ["number", "null"], "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                    "accuracy": {"type": "number", "minimum": 0, "maximum": 1},
                    "accuracy_group0": {"type": "number", "minimum": 0, "maximum": 1},
                    "accuracy_group1": {"type": "number", "minimum": 0, "maximum": 1},
                    "gap": {"type": "number", "minimum": 0, "maximum": 1},
                    "seeds": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["seed", "accuracy", "accuracy_group0", "accuracy_group1", "gap"],
                            "properties": {"seed": {"type": "integer"}},
                        },
                    },
                },
            },
        },
    },
}


def validate_report(d: dict) -> None:
    import jsonschema

    jsonschema.validate(d, REPORT_SCHEMA)


@dataclass
class PreparedData:
    """Everything the arms share: subsets, images and attribution maps."""

    train: DatasetManifest
    train_images: np.ndarray
    balanced: DatasetManifest
    balanced_images: np.ndarray
    test: DatasetManifest
    test_images: np.ndarray
    region_model: RegionClassifierModel
    general_map: object
    specific_maps: list


def _index_of(manifest: DatasetManifest) -> dict:
    return {r.path: i for i, r in enumerate(manifest.records)}


def prepare(images: np.ndarray, manifest: DatasetManifest, config: ExperimentConfig,
            region_model: RegionClassifierModel | None = None) -> PreparedData:
    t, c = config.target_attr, config.confounder_attr
    pos = _index_of(manifest)
    take = lambda sub: images[[pos[r.path] for r in sub.records]]  # noqa: E731
    train = build_biased_subset(manifest, t, c, config.bias, config.seed)
    test = build_balanced_testset(manifest, t, c, config.test_per_cell, config.seed + 1, exclude=train.paths())
    used = set(train.paths()) | set(test.paths())
    balanced = build_balanced_subset(manifest, t, c, config.bias.total, config.seed + 2, exclude=test.paths())
    check_disjoint(test, balanced)
    if region_model is None:
        pool = build_balanced_subset(manifest, t, c, 4 * config.region_pool_per_cell, config.seed + 3,
                                     exclude=used)
        log.info("training region classifier for %r on %d pool images", c, len(pool))
        region_model, _ = train_region_classifier(take(pool), pool.column(c), config.grid, config.region,
                                                  attribute_name=c)
    train_images = take(train)
    log.info("computing attribution maps for %d training images", len(train))
    rmaps = region_maps(region_model, train_images, config.method, threads=config.threads)
    general = normalize01(pixel_map(average_maps(rmaps), config.grid))
    specific = [normalize01(pixel_map(m, config.grid)) for m in rmaps]
    return PreparedData(train, train_images, balanced, take(balanced), test, take(test),
                        region_model, general, specific)


def _perturber(images, masks, policy: AugmentationPolicy, seed: int):
    if not policy.scheme.is_noise:
        static = np.stack([apply_mask(im, m, policy.mask_value) for im, m in zip(images, masks)])
        return lambda epoch: static
    cache = {}

    def noisy(epoch):
        e = epoch if policy.resample else 0
        if e not in cache:
            cache.clear()
            cache[e] = np.stack([apply_noise(im, m, policy.sigma, augment_rng(seed, i, e))
                                 for i, (im, m) in enumerate(zip(images, masks))])
        return cache[e]

    return noisy


def _arm_jobs(config: ExperimentConfig):
    jobs = [("original", None, None), ("balanced", None, None)]
    for scheme in config.schemes:
        for q in config.quantiles:
            jobs.append((f"{scheme.value}@{q:g}", scheme, q))
    return jobs


def run_arm(data: PreparedData, config: ExperimentConfig, name: str, scheme, quantile, seed: int) -> SubgroupResult:
    group = config.group_attr or config.target_attr
    labels_col = config.target_attr
    if name == "balanced":
        images, labels, perturb = data.balanced_images, data.balanced.column(labels_col), None
    else:
        images, labels, perturb = data.train_images, data.train.column(labels_col), None
        if scheme is not None:
            policy = AugmentationPolicy(scheme, quantile, config.sigma, config.mask_value, config.resample,
                                        general_map=data.general_map)
            masks = [policy_mask(policy, m) for m in data.specific_maps]
            perturb = _perturber(images, masks, policy, seed)
    model = train_target(images, labels, config.target, config.target.epochs_for(scheme), seed, perturb)
    return evaluate_subgroups(model, data.test_images, data.test, labels_col, group)


def run_experiment(images: np.ndarray, manifest: DatasetManifest, config: ExperimentConfig,
                   region_model: RegionClassifierModel | None = None) -> ExperimentReport:
    """Train and evaluate every arm for every seed; arms report per-metric medians.

    All arms of one seed share the target-CNN initialization and the test set.
    """
    start = time.perf_counter()
    data = prepare(images, manifest, config, region_model)
    jobs = [(arm, seed) for arm in _arm_jobs(config) for seed in config.run_seeds()]

    def run(job):
        (name, scheme, q), seed = job
        res = run_arm(data, config, name, scheme, q, seed)
        log.info("arm %-22s seed %d: acc %.3f g0 %.3f g1 %.3f gap %.3f", name, seed,
                 res.accuracy, res.accuracy_group0, res.accuracy_group1, res.gap)
        return res

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    arms = []
    for (name, scheme, q) in _arm_jobs(config):
        per_seed = [(seed, res) for (arm, seed), res in zip(jobs, results) if arm[0] == name]
        arms.append(ArmResult(name, scheme.value if scheme else None, q, per_seed))
    return ExperimentReport(config.confounder_attr, arms, config.to_dict(), time.perf_counter() - start)


# -- sweep table ----------------------------------------------------------------

SWEEP_HEADER = ("scheme", "quantile", "accuracy", "acc_g0", "acc_g1", "gap")


def quantile_sweep(report: ExperimentReport, schemes=None, quantiles=None) -> list[dict]:
    """One row per regularized (scheme, quantile) arm, optionally filtered."""
    schemes = None if schemes is None else {Scheme.parse(s).value for s in schemes}
    rows = []
    for arm in report.regularized():
        if schemes is not None and arm.scheme not in schemes:
            continue
        if quantiles is not None and not any(abs(arm.quantile - q) < 1e-12 for q in quantiles):
            continue
        rows.append({"scheme": arm.scheme, "quantile": arm.quantile, "accuracy": arm.median("accuracy"),
                     "acc_g0": arm.median("accuracy_group0"), "acc_g1": arm.median("accuracy_group1"),
                     "gap": arm.median("gap")})
    return rows


def best_row(rows: list[dict]) -> dict:
    """Minimum-gap row; ties go to higher accuracy, then table order."""
    if not rows:
        raise ConfigError("empty sweep table")
    return min(enumerate(rows), key=lambda t: (t[1]["gap"], -t[1]["accuracy"], t[0]))[1]


def write_sweep_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow([r["scheme"], repr(r["quantile"])] + [repr(float(r[k])) for k in SWEEP_HEADER[2:]])
