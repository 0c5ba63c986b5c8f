"""End-to-end experiments: data, classifier, GMM, then a detection task.

All randomness flows from ``ExperimentConfig.seed`` through
:func:`derive_seed`, which gives each stage its own stream keyed by a fixed
counter, so adding a stage never perturbs the streams of earlier ones.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from featdensity import attacks, classifier, data, gmm, metrics, purify, scoring

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

STAGES = {
    "data": 0,
    "split": 1,
    "init": 2,
    "shuffle": 3,
    "gmm": 4,
    "attack": 5,
    "ood_test": 6,
    "ood_val": 7,
}


def derive_seed(seed: int, stage: str) -> int:
    """Sub-seed for ``stage``, a pure function of (global seed, stage counter)."""
    ss = np.random.SeedSequence(seed, spawn_key=(STAGES[stage],))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class ExperimentConfig:
    """Flat experiment description; loaded from a single JSON object."""

    seed: int = 0
    out_dir: str = "out"
    threads: int = 1
    # data: either a CSV file or synthetic blobs
    data_csv: str | None = None
    classes: int = 5
    per_class: int = 600
    dim: int = 10
    spread: float = 1.0
    separation: float = 3.25
    train_fraction: float = 0.6
    val_fraction: float = 0.2
    test_fraction: float = 0.2
    # classifier
    hidden: list = field(default_factory=lambda: [64])
    feature_dim: int = 32
    epochs: int = 15
    batch_size: int = 32
    learning_rate: float = 0.005
    momentum: float = 0.9
    l2_weight: float = 1e-4
    # density model
    gmm_components: int = 10
    em_max_iters: int = 200
    em_tol: float = 1e-6
    em_variance_floor: float = 1e-6
    em_init: str = "kmeanspp"
    # scoring; "logits" is max-softmax at T=1 unless logits_convention is "max_logit"
    score_kinds: list = field(default_factory=lambda: ["gmm", "logits", "calibrated", "mahalanobis"])
    logits_convention: str = "max_softmax"
    ece_bins: int = 10
    # attacks
    attack_methods: list = field(default_factory=lambda: ["fgsm", "bim"])
    attack_epsilon: float = 0.5
    bim_steps: int = 10
    bim_step_size: float | None = None
    # out-of-distribution sets
    ood_kinds: list = field(default_factory=lambda: ["shifted_blobs", "gaussian_noise", "uniform_noise"])
    ood_count: int = 1000
    ood_shift_magnitude: float = 10.0
    ood_gaussian_magnitude: float = 10.0
    ood_uniform_magnitude: float = 10.0
    # purification grid
    purify_step_sizes: list = field(default_factory=lambda: [0.1, 0.01])
    purify_nus: list = field(default_factory=lambda: [0.0, 0.01, 0.1, 1.0])
    purify_iterations: int = 100

    def __post_init__(self):
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        bad = set(self.score_kinds) - {"gmm", "logits", "max_softmax", "max_logit", "calibrated", "mahalanobis"}
        if bad:
            raise ValueError(f"unknown score kinds {sorted(bad)}")
        if self.logits_convention not in ("max_softmax", "max_logit"):
            raise ValueError(f"unknown logits_convention {self.logits_convention!r}")
        if set(self.attack_methods) - set(attacks.METHODS):
            raise ValueError(f"unknown attack methods in {self.attack_methods}")
        if set(self.ood_kinds) - set(data.OOD_KINDS):
            raise ValueError(f"unknown OOD kinds in {self.ood_kinds}")
        # construct the nested configs once so their invariants are checked up front
        self.split_spec()
        self.train_config()
        self.em_config()
        self.attack_config("bim")

    @classmethod
    def from_dict(cls, doc: dict) -> ExperimentConfig:
        if not isinstance(doc, dict):
            raise ValueError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def split_spec(self) -> data.SplitSpec:
        return data.SplitSpec(self.train_fraction, self.val_fraction, self.test_fraction,
                              derive_seed(self.seed, "split"))

    def train_config(self) -> classifier.TrainConfig:
        return classifier.TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.momentum,
                                      self.l2_weight, derive_seed(self.seed, "shuffle"))

    def em_config(self) -> gmm.EmConfig:
        return gmm.EmConfig(self.em_max_iters, self.em_tol, self.em_variance_floor,
                            derive_seed(self.seed, "gmm"), self.em_init, self.threads)

    def attack_config(self, method: str) -> attacks.AttackConfig:
        bounds = data.DOMAIN
        if method == "fgsm":
            return attacks.AttackConfig(self.attack_epsilon, 1, self.attack_epsilon, bounds)
        return attacks.AttackConfig(self.attack_epsilon, self.bim_steps, self.bim_step_size, bounds)


@dataclass
class Prepared:
    """Everything upstream of a detection experiment."""

    train: data.LabeledDataset
    val: data.LabeledDataset
    test: data.LabeledDataset
    model: classifier.MlpClassifier
    train_report: classifier.TrainReport
    density: gmm.GmmModel
    em_report: gmm.EmReport
    temperature: float
    mahalanobis: scoring.MahalanobisModel


def load_dataset(cfg: ExperimentConfig) -> data.LabeledDataset:
    if cfg.data_csv:
        return data.load_csv(cfg.data_csv)
    return data.gen_blobs(cfg.classes, cfg.per_class, cfg.dim, cfg.spread,
                          derive_seed(cfg.seed, "data"), separation=cfg.separation)


def prepare_model(cfg: ExperimentConfig):
    ds = load_dataset(cfg)
    train_ds, val_ds, test_ds = data.split(ds, cfg.split_spec())
    model = classifier.init_mlp(ds.dim, cfg.hidden, cfg.feature_dim, ds.class_count,
                                derive_seed(cfg.seed, "init"))
    report = classifier.train(model, train_ds, val_ds, cfg.train_config())
    logger.info("trained classifier: val accuracy %.4f", report.val_accuracy[-1] if report.val_accuracy else float("nan"))
    return train_ds, val_ds, test_ds, model, report


def prepare(cfg: ExperimentConfig) -> Prepared:
    train_ds, val_ds, test_ds, model, report = prepare_model(cfg)
    train_feats = classifier.extract_features(model, train_ds.inputs)
    density, em_report = gmm.fit_em(train_feats, cfg.gmm_components, cfg.em_config())
    logger.info("fitted GMM: K=%d, %d EM iterations", cfg.gmm_components, em_report.iterations)
    _, val_logits, _ = classifier.forward_batch(model, val_ds.inputs)
    temperature = scoring.fit_temperature(val_logits, val_ds.labels)
    maha = scoring.fit_mahalanobis(train_feats, train_ds.labels, train_ds.class_count)
    return Prepared(train_ds, val_ds, test_ds, model, report, density, em_report, temperature, maha)


def compute_scores(prep: Prepared, inputs, kind: str, logits_convention: str = "max_softmax") -> np.ndarray:
    """Confidence scores (higher = more confident) of one kind for a batch of inputs."""
    feats, logits, _ = classifier.forward_batch(prep.model, inputs)
    if kind == "logits":
        kind = logits_convention
    if kind == "gmm":
        return scoring.score_gmm(prep.density, feats)
    if kind == "max_softmax":
        return scoring.score_max_softmax(logits, 1.0)
    if kind == "max_logit":
        return scoring.score_max_logit(logits)
    if kind == "calibrated":
        return scoring.score_max_softmax(logits, prep.temperature)
    if kind == "mahalanobis":
        return scoring.score_mahalanobis(prep.mahalanobis, feats)
    raise ValueError(f"unknown score kind {kind!r}")


def _method_entry(kind, in_test, out_test, in_val, out_val) -> dict:
    """Metrics for separating confident (``in``) samples from failures (``out``)."""
    entry = {}
    if len(in_test) and len(out_test):
        entry.update(metrics.detection_summary(in_test, out_test))
        entry["mann_whitney"] = metrics.mann_whitney(in_test, out_test).to_dict()
    else:
        entry["note"] = "one test group is empty; metrics undefined"
    try:
        thr = metrics.select_threshold(np.r_[in_val, out_val],
                                       np.r_[np.zeros(len(in_val), bool), np.ones(len(out_val), bool)], kind)
        flags = scoring.apply_threshold(np.r_[in_test, out_test], thr)
        truth = np.r_[np.zeros(len(in_test), bool), np.ones(len(out_test), bool)]
        entry["threshold"] = {"value": thr.value, "val_f1": thr.f1,
                              "test_f1": metrics.f1_score(flags, truth)}
    except ValueError as exc:
        entry["threshold"] = {"error": str(exc)}
    return entry


def mistake_detection(cfg: ExperimentConfig, prep: Prepared) -> tuple[dict, dict]:
    """Correct vs misclassified test samples, for every enabled score kind."""
    test_ok = classifier.predict_batch(prep.model, prep.test.inputs) == prep.test.labels
    val_ok = classifier.predict_batch(prep.model, prep.val.inputs) == prep.val.labels
    methods, scores = {}, {}
    for kind in cfg.score_kinds:
        s_test = compute_scores(prep, prep.test.inputs, kind, cfg.logits_convention)
        s_val = compute_scores(prep, prep.val.inputs, kind, cfg.logits_convention)
        scores[kind] = s_test
        methods[kind] = _method_entry(kind, s_test[test_ok], s_test[~test_ok], s_val[val_ok], s_val[~val_ok])
    section = {"test_accuracy": float(test_ok.mean()), "n_correct": int(test_ok.sum()),
               "n_wrong": int((~test_ok).sum()), "methods": methods}
    return section, scores


def adversarial_sets(cfg: ExperimentConfig, prep: Prepared) -> dict:
    """``{method: (test AttackResult, val AttackResult)}``."""
    return {
        method: (attacks.attack_batch(prep.model, prep.test, method, cfg.attack_config(method)),
                 attacks.attack_batch(prep.model, prep.val, method, cfg.attack_config(method)))
        for method in cfg.attack_methods
    }


def adversarial_detection(cfg: ExperimentConfig, prep: Prepared, adv_sets=None) -> tuple[dict, dict]:
    """Clean vs adversarial test inputs, per attack and score kind."""
    adv_sets = adv_sets or adversarial_sets(cfg, prep)
    section, scores = {}, {}
    for method, (res_test, res_val) in adv_sets.items():
        methods = {}
        for kind in cfg.score_kinds:
            clean_t = compute_scores(prep, prep.test.inputs, kind, cfg.logits_convention)
            adv_t = compute_scores(prep, res_test.adversarial.inputs, kind, cfg.logits_convention)
            clean_v = compute_scores(prep, prep.val.inputs, kind, cfg.logits_convention)
            adv_v = compute_scores(prep, res_val.adversarial.inputs, kind, cfg.logits_convention)
            scores[f"{method}_{kind}"] = np.r_[clean_t, adv_t]
            methods[kind] = _method_entry(kind, clean_t, adv_t, clean_v, adv_v)
        cfg_used = cfg.attack_config(method)
        section[method] = {"epsilon": cfg_used.epsilon, "steps": cfg_used.steps,
                           "step_size": cfg_used.step_size, "attack": res_test.stats(),
                           "methods": methods}
    return section, scores


def ood_sets(cfg: ExperimentConfig, prep: Prepared) -> dict:
    """``{kind: (test OOD inputs, val OOD inputs)}``."""
    magnitudes = {"shifted_blobs": cfg.ood_shift_magnitude, "gaussian_noise": cfg.ood_gaussian_magnitude,
                  "uniform_noise": cfg.ood_uniform_magnitude}
    if cfg.data_csv and "shifted_blobs" in cfg.ood_kinds:
        raise ValueError("shifted_blobs OOD needs the synthetic blob generator, not a CSV dataset")
    out = {}
    for kind in cfg.ood_kinds:
        sets = []
        for stage in ("ood_test", "ood_val"):
            sets.append(data.gen_ood(kind, cfg.ood_count, prep.train.dim, magnitudes[kind],
                                     derive_seed(cfg.seed, stage), class_count=cfg.classes,
                                     spread=cfg.spread, separation=cfg.separation,
                                     blob_seed=derive_seed(cfg.seed, "data")).inputs)
        out[kind] = tuple(sets)
    return out


def ood_detection(cfg: ExperimentConfig, prep: Prepared) -> tuple[dict, dict]:
    section, scores = {}, {}
    for kind, (ood_test, ood_val) in ood_sets(cfg, prep).items():
        methods = {}
        for score_kind in cfg.score_kinds:
            in_t = compute_scores(prep, prep.test.inputs, score_kind, cfg.logits_convention)
            out_t = compute_scores(prep, ood_test, score_kind, cfg.logits_convention)
            in_v = compute_scores(prep, prep.val.inputs, score_kind, cfg.logits_convention)
            out_v = compute_scores(prep, ood_val, score_kind, cfg.logits_convention)
            scores[f"{kind}_{score_kind}"] = np.r_[in_t, out_t]
            methods[score_kind] = _method_entry(score_kind, in_t, out_t, in_v, out_v)
        section[kind] = {"count": int(ood_test.shape[0]), "methods": methods}
    return section, scores


def calibration(cfg: ExperimentConfig, prep: Prepared) -> dict:
    _, val_logits, _ = classifier.forward_batch(prep.model, prep.val.inputs)
    _, test_logits, _ = classifier.forward_batch(prep.model, prep.test.inputs)
    t = prep.temperature
    return {
        "temperature": t,
        "val_nll_before": scoring.temperature_nll(val_logits, prep.val.labels, 1.0),
        "val_nll_after": scoring.temperature_nll(val_logits, prep.val.labels, t),
        "test_ece_before": scoring.ece(classifier.softmax(test_logits), prep.test.labels, cfg.ece_bins),
        "test_ece_after": scoring.ece(classifier.softmax(test_logits / t), prep.test.labels, cfg.ece_bins),
        "bins": cfg.ece_bins,
    }


def purification(cfg: ExperimentConfig, prep: Prepared) -> dict:
    splits = {"val": (prep.val.inputs, prep.val.labels), "test": (prep.test.inputs, prep.test.labels)}
    grid = purify.purification_grid(prep.model, prep.density, splits, cfg.purify_step_sizes,
                                    cfg.purify_nus, cfg.purify_iterations)
    best = max(grid, key=lambda c: (c["val_accuracy"], c["test_accuracy"]))
    return {
        "iterations": cfg.purify_iterations,
        "original": {"val_accuracy": classifier.accuracy(prep.model, prep.val),
                     "test_accuracy": classifier.accuracy(prep.model, prep.test)},
        "grid": grid,
        "best_cell": {"step_size": best["step_size"], "nu": best["nu"],
                      "test_delta": best["test_delta"], "val_delta": best["val_delta"]},
    }
