from __future__ import annotations
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence, Tuple, Union
import numpy as np
import metrics
from clinical import Task, patient_folds
from imaging import Mask

logger = logging.getLogger(__name__)


class MilException(Exception): pass
class DimensionMismatchException(MilException): pass
class BadLabelException(MilException): pass
class EmptyDatasetException(MilException): pass
class SingleClassDatasetException(MilException): pass
class ModelFileException(MilException): pass


PROB_CLAMP = 1e-7
MODEL_SCHEMA = 1
PARAMETER_NAMES = ("V", "b_v", "w", "W1", "b1", "W2", "b2")


@dataclass
class Bag:
    slide_id: str
    features: np.ndarray # n×d, row k is the patch embedding h_k
    coords: np.ndarray   # n×2, (x, y) pixels
    label: int = 0

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        if self.features.shape[0] < 1:
            raise ValueError(f"bag {self.slide_id} has no patches")
        if self.coords.shape[0] != self.features.shape[0]:
            raise ValueError(f"bag {self.slide_id}: {self.coords.shape[0]} coords for "
                             f"{self.features.shape[0]} patches")
        if not np.all(np.isfinite(self.features)):
            raise ValueError(f"bag {self.slide_id} has non-finite features")
        # canonical (y, x) order; lexsort is stable so duplicate coords keep their order
        order = np.lexsort((self.coords[:, 0], self.coords[:, 1]))
        self.features = self.features[order]
        self.coords = self.coords[order]

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


@dataclass
class MilHyperparams:
    attention_dim: int = 16 # h
    hidden_dim: int = 16    # m
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    epochs: int = 50
    seed: int = 7


@dataclass
class MilModel:
    V: np.ndarray   # h×d
    b_v: np.ndarray # h
    w: np.ndarray   # h
    W1: np.ndarray  # m×d
    b1: np.ndarray  # m
    W2: np.ndarray  # C×m
    b2: np.ndarray  # C
    hyperparams: MilHyperparams = field(default_factory=MilHyperparams)
    task: str = Task.OS_RISK.value
    loss_log: list = field(default_factory=list)

    def __post_init__(self):
        for name in PARAMETER_NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        h, d = self.V.shape
        m = self.W1.shape[0]
        C = self.W2.shape[0]
        expected = {"V": (h, d), "b_v": (h,), "w": (h,), "W1": (m, d), "b1": (m,),
                    "W2": (C, m), "b2": (C,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionMismatchException(
                    f"parameter {name} has shape {getattr(self, name).shape}, expected {shape}"
                )
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"parameter {name} is not finite")

    @property
    def d(self) -> int:
        return self.V.shape[1]

    @property
    def h(self) -> int:
        return self.V.shape[0]

    @property
    def m(self) -> int:
        return self.W1.shape[0]

    @property
    def C(self) -> int:
        return self.W2.shape[0]

    def parameters(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAMETER_NAMES}

    def copy(self) -> MilModel:
        return MilModel(
            **{name: value.copy() for name, value in self.parameters().items()},
            hyperparams=MilHyperparams(**asdict(self.hyperparams)),
            task=self.task,
            loss_log=list(self.loss_log)
        )

    @classmethod
    def zeros(cls, d: int, h: int, m: int, C: int, **kwargs) -> MilModel:
        return cls(V=np.zeros((h, d)), b_v=np.zeros(h), w=np.zeros(h),
                   W1=np.zeros((m, d)), b1=np.zeros(m),
                   W2=np.zeros((C, m)), b2=np.zeros(C), **kwargs)

    @classmethod
    def initialize(cls, d: int, h: int, m: int, C: int, rng: np.random.Generator, **kwargs) -> MilModel:
        """
        Xavier-uniform weights drawn from `rng` in the order V, w, W1, W2; zero biases
        """
        def xavier(fan_out: int, fan_in: int) -> np.ndarray:
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-limit, limit, size=(fan_out, fan_in))

        V = xavier(h, d)
        w = xavier(1, h)[0]
        W1 = xavier(m, d)
        W2 = xavier(C, m)
        return cls(V=V, b_v=np.zeros(h), w=w, W1=W1, b1=np.zeros(m),
                   W2=W2, b2=np.zeros(C), **kwargs)


@dataclass
class MilOutput:
    probs: np.ndarray     # C, sums to 1
    attention: np.ndarray # n, sums to 1


@dataclass
class RiskScore:
    slide_id: str
    task: Task
    value: float


def _softmax(values: np.ndarray) -> np.ndarray:
    shifted = np.exp(values - values.max())
    return shifted / shifted.sum()

def _forward_cache(bag: Bag, model: MilModel) -> dict[str, np.ndarray]:
    if bag.d != model.d:
        raise DimensionMismatchException(f"bag {bag.slide_id} has {bag.d}-d features, model expects {model.d}")
    H = bag.features
    U = np.tanh(H @ model.V.T + model.b_v)
    scores = U @ model.w
    attention = _softmax(scores)
    z = attention @ H
    r1 = model.W1 @ z + model.b1
    q = np.maximum(r1, 0.0)
    logits = model.W2 @ q + model.b2
    return {"U": U, "scores": scores, "attention": attention, "z": z,
            "r1": r1, "q": q, "logits": logits, "probs": _softmax(logits)}

def mil_forward(bag: Bag, model: MilModel) -> MilOutput:
    """
    Attention pooling over the bag followed by the two-layer classifier.

    s_k = wᵀ tanh(V h_k + b_v), a = softmax(s), z = Σ a_k h_k,
    probs = softmax(W2 relu(W1 z + b1) + b2)
    """
    cache = _forward_cache(bag, model)
    return MilOutput(probs=cache["probs"], attention=cache["attention"])

def _check_label(label: int, C: int) -> None:
    if not 0 <= label < C:
        raise BadLabelException(f"label {label} outside [0, {C})")

def mil_loss(output: MilOutput, label: int) -> float:
    """
    Negative log-likelihood of the label under the clamped class probabilities
    """
    _check_label(label, len(output.probs))
    return -math.log(min(max(float(output.probs[label]), PROB_CLAMP), 1.0 - PROB_CLAMP))

def _loss_and_gradients(bag: Bag, model: MilModel, label: int) -> Tuple[float, dict[str, np.ndarray]]:
    _check_label(label, model.C)
    cache = _forward_cache(bag, model)
    probs = cache["probs"]
    loss = mil_loss(MilOutput(probs, cache["attention"]), label)

    p_label = probs[label]
    if p_label < PROB_CLAMP or p_label > 1.0 - PROB_CLAMP:
        # the clamp is flat here
        return loss, {name: np.zeros_like(value) for name, value in model.parameters().items()}

    H, U, a = bag.features, cache["U"], cache["attention"]
    d_logits = probs.copy()
    d_logits[label] -= 1.0

    d_W2 = np.outer(d_logits, cache["q"])
    d_b2 = d_logits
    d_r1 = (model.W2.T @ d_logits) * (cache["r1"] > 0)
    d_W1 = np.outer(d_r1, cache["z"])
    d_b1 = d_r1
    d_z = model.W1.T @ d_r1

    # softmax backward through the attention weights
    d_a = H @ d_z
    d_scores = a * (d_a - a @ d_a)
    d_w = U.T @ d_scores
    d_pre = np.outer(d_scores, model.w) * (1.0 - U ** 2)
    d_V = d_pre.T @ H
    d_b_v = d_pre.sum(axis=0)

    return loss, {"V": d_V, "b_v": d_b_v, "w": d_w, "W1": d_W1, "b1": d_b1, "W2": d_W2, "b2": d_b2}

def mil_gradients(bag: Bag, model: MilModel, label: int) -> dict[str, np.ndarray]:
    """
    Exact gradients of `mil_loss` with respect to every model parameter

    :return: parameter name -> gradient array of the parameter's shape
    """
    return _loss_and_gradients(bag, model, label)[1]

def mil_train(
        bags: Sequence[Bag],
        hyperparams: Optional[MilHyperparams] = None,
        n_classes: Optional[int] = None,
        task: Union[Task, str] = Task.OS_RISK
    ) -> MilModel:
    """
    Train a model with Adam, one bag per step, shuffling bags every epoch.
    Initialization and shuffling draw from a single generator seeded with `hyperparams.seed`,
    so a fixed seed reproduces the model bit for bit.

    :return: trained model; `loss_log` holds the mean training loss of each epoch
    :raises: EmptyDatasetException, SingleClassDatasetException
    """
    hyperparams = hyperparams or MilHyperparams()
    if not bags:
        raise EmptyDatasetException("no bags to train on")
    labels = sorted({bag.label for bag in bags})
    if len(bags) < 2 or len(labels) < 2:
        raise SingleClassDatasetException(f"training needs at least two classes, got {labels}")
    dims = {bag.d for bag in bags}
    if len(dims) != 1:
        raise DimensionMismatchException(f"bags have mixed feature widths {sorted(dims)}")

    C = n_classes or max(2, labels[-1] + 1)
    rng = np.random.default_rng(hyperparams.seed)
    model = MilModel.initialize(dims.pop(), hyperparams.attention_dim, hyperparams.hidden_dim, C, rng,
                                hyperparams=hyperparams, task=Task(task).value)

    lr, beta1, beta2 = hyperparams.learning_rate, hyperparams.beta1, hyperparams.beta2
    first_moment = {name: np.zeros_like(value) for name, value in model.parameters().items()}
    second_moment = {name: np.zeros_like(value) for name, value in model.parameters().items()}
    step = 0
    for epoch in range(hyperparams.epochs):
        losses = []
        for index in rng.permutation(len(bags)):
            bag = bags[index]
            loss, gradients = _loss_and_gradients(bag, model, bag.label)
            losses.append(loss)
            step += 1
            for name, param in model.parameters().items():
                g = gradients[name]
                first_moment[name] = beta1 * first_moment[name] + (1.0 - beta1) * g
                second_moment[name] = beta2 * second_moment[name] + (1.0 - beta2) * g * g
                m_hat = first_moment[name] / (1.0 - beta1 ** step)
                v_hat = second_moment[name] / (1.0 - beta2 ** step)
                # decoupled weight decay
                param -= lr * (m_hat / (np.sqrt(v_hat) + hyperparams.eps) + hyperparams.weight_decay * param)
        model.loss_log.append(float(np.mean(losses)))
        logger.debug("epoch %d/%d: mean loss %.6f", epoch + 1, hyperparams.epochs, model.loss_log[-1])
    return model

def predict_risk(
        bag: Bag,
        model: MilModel,
        task: Union[Task, str],
        positive_class: Optional[int] = None
    ) -> RiskScore:
    """
    Slide risk score: the predicted probability of the task's positive class.
    Subtyping scores ccRCC (class 0); every other task scores class 1.
    """
    task = Task(task)
    if positive_class is None:
        positive_class = 0 if task is Task.SUBTYPE else 1
    output = mil_forward(bag, model)
    return RiskScore(slide_id=bag.slide_id, task=task, value=float(output.probs[positive_class]))

def predict_bags(bags: Sequence[Bag], model: MilModel, task: Union[Task, str], workers: int = 1) -> list[RiskScore]:
    """
    Risk scores for many slides, ordered by slide_id
    """
    ordered = sorted(bags, key=lambda bag: bag.slide_id)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda bag: predict_risk(bag, model, task), ordered))
    return [predict_risk(bag, model, task) for bag in ordered]

def attention_heatmap(
        bag: Bag,
        output: MilOutput,
        cell: int,
        extent: Optional[Tuple[int, int]] = None
    ) -> Mask:
    """
    Attention heatmap on a grid of `cell`-pixel cells; each patch's cell holds
    a_k / max_j a_j so the hottest patch is 1.0, empty cells are 0.

    :param extent: slide (width, height) in pixels; defaults to the patch bounding box
    """
    if cell < 1:
        raise ValueError("cell must be at least 1 pixel")
    if extent is None:
        extent = (int(bag.coords[:, 0].max()) + cell, int(bag.coords[:, 1].max()) + cell)
    columns = -(-extent[0] // cell)
    rows = -(-extent[1] // cell)
    grid = np.zeros((rows, columns))
    relative = output.attention / output.attention.max()
    for (x, y), value in zip(bag.coords, relative):
        if not (0 <= x < extent[0] and 0 <= y < extent[1]):
            raise ValueError(f"patch ({x}, {y}) lies outside the slide extent {extent}")
        grid[y // cell, x // cell] = max(grid[y // cell, x // cell], value)
    return Mask(grid)


# region [cross-validation]

@dataclass
class FoldResult:
    fold: int
    slide_ids: list[str]
    auc: Optional[float]  # None when the held-out fold has a single class
    class_aucs: dict = field(default_factory=dict)


@dataclass
class CrossValidation:
    folds: list[FoldResult]
    scores: dict[str, float]              # out-of-fold risk score per slide
    probabilities: dict[str, np.ndarray]  # out-of-fold class probabilities per slide
    labels: dict[str, int]

    @property
    def mean_auc(self) -> float:
        defined = [fold.auc for fold in self.folds if fold.auc is not None]
        return float(np.mean(defined)) if defined else math.nan

    def pooled_class_aucs(self) -> dict:
        ids = sorted(self.probabilities)
        return metrics.one_vs_rest_auc(np.array([self.probabilities[i] for i in ids]),
                                       [self.labels[i] for i in ids])


def _held_out_auc(probabilities: np.ndarray, scores: Sequence[float], labels: Sequence[int], task: Task):
    try:
        if task is Task.SUBTYPE:
            class_aucs = metrics.one_vs_rest_auc(probabilities, labels)
            return class_aucs["mean"], class_aucs
        return metrics.roc_curve(scores, labels).auc, {}
    except metrics.SingleClassException:
        return None, {}

def cross_validate(
        bags: Sequence[Bag],
        k: int,
        hyperparams: Optional[MilHyperparams] = None,
        n_classes: Optional[int] = None,
        task: Union[Task, str] = Task.OS_RISK
    ) -> CrossValidation:
    """
    Patient-level k-fold cross-validation: each fold is scored by a model trained on the other k-1.
    Folds are drawn with `hyperparams.seed`, so the split is fixed by the seed.

    :raises: EmptyDatasetException, SingleClassDatasetException when a training split lacks a class
    """
    hyperparams = hyperparams or MilHyperparams()
    task = Task(task)
    by_id = {bag.slide_id: bag for bag in bags}
    if not by_id:
        raise EmptyDatasetException("no bags to cross-validate")
    C = n_classes or max(2, max(bag.label for bag in bags) + 1)

    results, scores, probabilities = [], {}, {}
    for index, held_out in enumerate(patient_folds(by_id, k, hyperparams.seed)):
        held = set(held_out)
        training = [by_id[i] for i in sorted(by_id) if i not in held]
        model = mil_train(training, hyperparams, n_classes=C, task=task)
        fold_probs = np.array([mil_forward(by_id[i], model).probs for i in held_out])
        fold_scores = [predict_risk(by_id[i], model, task).value for i in held_out]
        auc, class_aucs = _held_out_auc(fold_probs, fold_scores, [by_id[i].label for i in held_out], task)
        if auc is None:
            logger.warning("fold %d holds a single class, its AUC is undefined", index + 1)
        else:
            logger.info("fold %d/%d: %d slides, AUC %.4f", index + 1, k, len(held_out), auc)
        results.append(FoldResult(fold=index + 1, slide_ids=list(held_out), auc=auc, class_aucs=class_aucs))
        scores.update(zip(held_out, fold_scores))
        probabilities.update(zip(held_out, fold_probs))
    return CrossValidation(folds=results, scores=scores, probabilities=probabilities,
                           labels={i: bag.label for i, bag in by_id.items()})

# endregion


# region [model.json]

def model_to_dict(model: MilModel) -> dict:
    return {
        "schema": MODEL_SCHEMA,
        "task": model.task,
        "dims": {"d": model.d, "h": model.h, "m": model.m, "C": model.C},
        "weights": {name: [float(v) for v in value.ravel()] for name, value in model.parameters().items()},
        "hyperparams": asdict(model.hyperparams),
        "seed": model.hyperparams.seed,
        "loss_log": [float(v) for v in model.loss_log]
    }

def model_from_dict(data: dict) -> MilModel:
    """
    :raises: ModelFileException on an unknown schema or malformed weights
    """
    if data.get("schema") != MODEL_SCHEMA:
        raise ModelFileException(f"unsupported model schema {data.get('schema')}")
    try:
        dims = data["dims"]
        d, h, m, C = dims["d"], dims["h"], dims["m"], dims["C"]
        shapes = {"V": (h, d), "b_v": (h,), "w": (h,), "W1": (m, d), "b1": (m,), "W2": (C, m), "b2": (C,)}
        weights = {name: np.asarray(data["weights"][name], dtype=np.float64).reshape(shape)
                   for name, shape in shapes.items()}
        return MilModel(**weights, hyperparams=MilHyperparams(**data["hyperparams"]),
                        task=data["task"], loss_log=list(data.get("loss_log", [])))
    except (KeyError, ValueError, TypeError) as e:
        raise ModelFileException(f"malformed model file: {e}")

def save_model(model: MilModel, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(model_to_dict(model), f, indent=2)

def load_model(path: str) -> MilModel:
    with open(path, "r", encoding="utf-8") as f:
        return model_from_dict(json.load(f))

# endregion


def bags_from_features(
        slides: dict[str, Tuple[np.ndarray, np.ndarray]],
        labels: Optional[dict[str, int]] = None
    ) -> list[Bag]:
    """
    Assemble bags from `imaging.read_features_csv` output.
    With `labels`, slides without a label are skipped.
    """
    bags = []
    for slide_id, (coords, features) in sorted(slides.items()):
        if labels is not None and slide_id not in labels:
            continue
        bags.append(Bag(slide_id=slide_id, features=features, coords=coords,
                        label=labels[slide_id] if labels is not None else 0))
    return bags
