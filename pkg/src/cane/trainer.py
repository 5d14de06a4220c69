"""Candidates-vs-noises losses, gradients, and SGD training loops.

The sampled objective treats a small candidate set exactly and
represents the remaining classes by noise draws whose scores are
importance-weighted by their sampling probability.  When the observed
label falls outside the candidates it takes the place of the sampled
noise.  All denominators are evaluated through max-shifted exponentials,
and sampling probabilities enter as subtracted logs, so losses stay
finite for any finite scores.

Training maximizes the objective (gradient ascent).  Iteration order,
accumulation order, and noise draws are all fixed by the seed, so a
(dataset, config, seed) triple reproduces a model bit for bit.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import ClassUnigram, Dataset, class_unigram
from .sampling import NoiseDraw, NoiseSampler
from .search import beam_top
from .tree import LabelTree, Representation, edge_dots

__all__ = [
    "TrainConfig",
    "CaneModel",
    "FlatModel",
    "SampledLossContext",
    "BeamTreeStats",
    "loss_in",
    "loss_out",
    "grad_generic_in",
    "grad_generic_out",
    "grad_tree_edge_in",
    "grad_tree_edge_out",
    "train_beam_tree",
    "train_generic",
    "empirical_objective_exact",
    "exact_sampled_gradient",
    "softmax_train",
    "softmax_loss_grad",
    "build_noise_unigram",
    "top_candidates",
]


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters shared by the generic and beam-tree trainers."""

    num_candidates: int
    num_noises: int
    learning_rate: float
    epochs: int
    branching: int = 10
    sampler: str = "uniform"  # "uniform" | "unigram"
    power: float = 1.0
    seed: int = 0
    eval_every: int = 1
    lr_decay: str = "none"  # "none" | "inv_sqrt"

    def __post_init__(self):
        if self.num_candidates < 1:
            raise ValueError("num_candidates must be >= 1")
        if self.num_noises < 1:
            raise ValueError("num_noises must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.branching < 2:
            raise ValueError("branching must be >= 2")
        if self.sampler not in ("uniform", "unigram"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if not 0.0 <= self.power <= 1.0:
            raise ValueError("power must lie in [0, 1]")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.lr_decay not in ("none", "inv_sqrt"):
            raise ValueError(f"unknown lr_decay {self.lr_decay!r}")

    def check_classes(self, num_classes: int) -> None:
        if self.num_candidates + self.num_noises > num_classes:
            raise ValueError(
                f"num_candidates + num_noises = "
                f"{self.num_candidates + self.num_noises} exceeds K = {num_classes}"
            )


@dataclass
class CaneModel:
    """Label tree, edge parameters, and label bookkeeping."""

    tree: LabelTree
    edge_params: np.ndarray
    representation: Representation
    label_dictionary: dict[int, int]
    num_features: int

    @property
    def num_classes(self) -> int:
        return self.tree.num_classes


@dataclass
class FlatModel:
    """Per-class linear model (equivalent to a depth-1 tree)."""

    params: np.ndarray  # (K, d)
    num_features: int
    label_dictionary: dict[int, int] | None = None
    unigram: ClassUnigram | None = None
    config: TrainConfig | None = None

    @property
    def num_classes(self) -> int:
        return self.params.shape[0]

    def scores(self, idx: np.ndarray, val: np.ndarray) -> np.ndarray:
        return self.params[:, idx] @ val


@dataclass(frozen=True)
class SampledLossContext:
    """Scores and sampling facts for one example's update.

    ``scores`` covers every selected class (candidates plus draws, or
    candidates plus the out-of-set label).  Exactly one of ``draws``
    (label inside the candidates) and ``q_y`` (label outside) is set.
    """

    scores: Mapping[int, float]
    candidates: tuple[int, ...]
    y: int
    draws: tuple[NoiseDraw, ...] = ()
    q_y: float | None = None

    def __post_init__(self):
        if not self.candidates:
            raise ValueError("candidate set must be non-empty")
        inside = self.y in self.candidates
        if inside and (not self.draws or self.q_y is not None):
            raise ValueError("label inside candidates requires noise draws")
        if not inside and (self.draws or self.q_y is None):
            raise ValueError("label outside candidates requires q_y and no draws")


@dataclass
class BeamTreeStats:
    """Instrumentation for the beam-tree trainer."""

    examples: int = 0
    edge_updates: int = 0
    max_edge_updates_per_example: int = 0
    shared_edge_skips: int = 0


def _shifted_denominator(candidate_scores: Sequence[float], extra: float) -> tuple[float, float, np.ndarray, float]:
    """Max-shifted denominator over candidate scores plus one noise term.

    Returns ``(shift, log_denominator, candidate_exps, extra_exp)`` where
    the exponentials are taken after subtracting the shift.
    """
    arr = np.asarray(candidate_scores, dtype=np.float64)
    shift = max(float(arr.max()), extra)
    exps = np.exp(arr - shift)
    extra_exp = math.exp(extra - shift)
    denom = float(exps.sum()) + extra_exp
    return shift, shift + math.log(denom), exps, extra_exp


def loss_in(scores_c: Mapping[int, float], y: int, s_j: float, q_j: float) -> float:
    """Sampled log-probability of label ``y`` inside the candidate set.

    ``log [exp(s_y) / (sum_{k in C} exp(s_k) + exp(s_j)/q_j)]`` for one
    noise draw ``j`` with probability ``q_j``.
    """
    if y not in scores_c:
        raise ValueError("y must be a candidate")
    if not 0.0 < q_j <= 1.0:
        raise ValueError("q_j must lie in (0, 1]")
    _, log_den, _, _ = _shifted_denominator(list(scores_c.values()), s_j - math.log(q_j))
    return scores_c[y] - log_den


def loss_out(scores_c: Mapping[int, float], s_y: float, q_y: float) -> float:
    """Sampled log-probability when the label stands in for the noise."""
    if not 0.0 < q_y <= 1.0:
        raise ValueError("q_y must lie in (0, 1]")
    _, log_den, _, _ = _shifted_denominator(list(scores_c.values()), s_y - math.log(q_y))
    return s_y - log_den


def grad_generic_in(
    scores_c: Mapping[int, float],
    grads_c: Mapping[int, np.ndarray],
    y: int,
    draws: Sequence[tuple[float, float, np.ndarray]],
) -> np.ndarray:
    """Ascent gradient for a label inside the candidates.

    ``draws`` holds ``(s_j, q_j, grad_j)`` triples; the weighted-average
    term is averaged over them.  Score gradients are combined linearly,
    so this applies to any differentiable score parameterization.
    """
    if y not in scores_c:
        raise ValueError("y must be a candidate")
    if not draws:
        raise ValueError("need at least one noise draw")
    cand = list(scores_c)
    cand_scores = [scores_c[k] for k in cand]
    grad = np.array(grads_c[y], dtype=np.float64, copy=True)
    inv = 1.0 / len(draws)
    for s_j, q_j, grad_j in draws:
        _, _, exps, extra_exp = _shifted_denominator(cand_scores, s_j - math.log(q_j))
        denom = float(exps.sum()) + extra_exp
        for k, e in zip(cand, exps):
            grad -= (inv * e / denom) * grads_c[k]
        grad -= (inv * extra_exp / denom) * np.asarray(grad_j, dtype=np.float64)
    return grad


def grad_generic_out(
    scores_c: Mapping[int, float],
    grads_c: Mapping[int, np.ndarray],
    s_y: float,
    q_y: float,
    grad_y: np.ndarray,
) -> np.ndarray:
    """Ascent gradient when the label stands in for the noise."""
    cand = list(scores_c)
    cand_scores = [scores_c[k] for k in cand]
    _, _, exps, extra_exp = _shifted_denominator(cand_scores, s_y - math.log(q_y))
    denom = float(exps.sum()) + extra_exp
    grad = (1.0 - extra_exp / denom) * np.asarray(grad_y, dtype=np.float64)
    for k, e in zip(cand, exps):
        grad -= (e / denom) * grads_c[k]
    return grad


def _edge_coefficient(
    ctx: SampledLossContext,
    paths: Mapping[int, np.ndarray],
    edge: int,
) -> float:
    """Indicator-weighted coefficient of one edge's gradient.

    The masked numerator and the denominator accumulate the same terms
    in the same order, so an edge lying on every selected path gets a
    coefficient of exactly zero.
    """
    on_path = {k: edge in set(paths[k].tolist()) for k in paths}
    cand_scores = [ctx.scores[k] for k in ctx.candidates]
    in_y = 1.0 if on_path[ctx.y] else 0.0

    def one_noise(j: int, q_j: float) -> float:
        extra = ctx.scores[j] - math.log(q_j)
        shift = max(max(cand_scores), extra)
        num = 0.0
        den = 0.0
        for k, s in zip(ctx.candidates, cand_scores):
            e = math.exp(s - shift)
            den += e
            if on_path[k]:
                num += e
        e = math.exp(extra - shift)
        den += e
        if on_path[j]:
            num += e
        return num / den

    if ctx.q_y is not None:
        return in_y - one_noise(ctx.y, ctx.q_y)
    total = 0.0
    for draw in ctx.draws:
        total += in_y - one_noise(draw.class_id, draw.prob)
    return total / len(ctx.draws)


def grad_tree_edge_in(
    ctx: SampledLossContext,
    paths: Mapping[int, np.ndarray],
    edge: int,
    g: np.ndarray,
) -> np.ndarray:
    """Ascent gradient of one edge vector, label inside the candidates."""
    if ctx.q_y is not None:
        raise ValueError("context is for a label outside the candidates")
    return _edge_coefficient(ctx, paths, edge) * np.asarray(g, dtype=np.float64)


def grad_tree_edge_out(
    ctx: SampledLossContext,
    paths: Mapping[int, np.ndarray],
    edge: int,
    g: np.ndarray,
) -> np.ndarray:
    """Ascent gradient of one edge vector, label outside the candidates."""
    if ctx.q_y is None:
        raise ValueError("context is for a label inside the candidates")
    return _edge_coefficient(ctx, paths, edge) * np.asarray(g, dtype=np.float64)


def build_noise_unigram(dataset: Dataset, config: TrainConfig) -> ClassUnigram:
    """Noise weights for a run: uniform, or smoothed power-raised counts."""
    if config.sampler == "uniform":
        k = dataset.num_classes
        return ClassUnigram(np.full(k, 1.0 / k), 0.0)
    return class_unigram(dataset, config.power)


def top_candidates(scores: np.ndarray, count: int) -> np.ndarray:
    """Indices of the ``count`` largest scores, ties to the lower id."""
    order = np.lexsort((np.arange(scores.shape[0]), -scores))
    return order[:count]


def _learning_rate(config: TrainConfig, step: int) -> float:
    if config.lr_decay == "inv_sqrt":
        return config.learning_rate / math.sqrt(step)
    return config.learning_rate


def _class_coefficients(
    scores: np.ndarray,
    cand: np.ndarray,
    y: int,
    draws: Sequence[NoiseDraw] | None,
    q_y: float | None,
) -> tuple[dict[int, float], float]:
    """Per-class update coefficients and the sampled objective value.

    The gradient of the sampled objective with respect to any score is a
    per-class coefficient; the parameter update scatters coefficient
    times input into the touched rows (or tree edges).
    """
    cand_scores = scores[cand]
    coef: dict[int, float] = {int(k): 0.0 for k in cand}
    if q_y is None:
        assert draws
        inv = 1.0 / len(draws)
        value = 0.0
        for draw in draws:
            extra = scores[draw.class_id] - math.log(draw.prob)
            shift = max(float(cand_scores.max()), extra)
            exps = np.exp(cand_scores - shift)
            extra_exp = math.exp(extra - shift)
            denom = float(exps.sum()) + extra_exp
            for k, e in zip(cand, exps):
                coef[int(k)] -= inv * e / denom
            j = int(draw.class_id)
            coef[j] = coef.get(j, 0.0) - inv * extra_exp / denom
            value += inv * (scores[y] - (shift + math.log(denom)))
        coef[y] = coef.get(y, 0.0) + 1.0
        return coef, value
    extra = scores[y] - math.log(q_y)
    shift = max(float(cand_scores.max()), extra)
    exps = np.exp(cand_scores - shift)
    extra_exp = math.exp(extra - shift)
    denom = float(exps.sum()) + extra_exp
    for k, e in zip(cand, exps):
        coef[int(k)] -= e / denom
    coef[y] = coef.get(y, 0.0) + 1.0 - extra_exp / denom
    return coef, scores[y] - (shift + math.log(denom))


CandidateSelector = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def train_generic(
    dataset: Dataset,
    config: TrainConfig,
    candidate_selector: CandidateSelector | None = None,
) -> FlatModel:
    """Doubly-stochastic SGD on a flat per-class linear model.

    ``candidate_selector(params, idx, val)`` may supply the candidate
    ids for an example; the default picks the top scorers under the
    current parameters.  Epochs are shuffled full passes.
    """
    config.check_classes(dataset.num_classes)
    k, d = dataset.num_classes, dataset.num_features
    params = np.zeros((k, d))
    unigram = build_noise_unigram(dataset, config)
    sampler = NoiseSampler(unigram)
    rng = np.random.default_rng(config.seed)
    step = 0
    for _ in range(config.epochs):
        for i in rng.permutation(len(dataset)):
            ex = dataset.examples[i]
            idx, val = ex.features
            scores = params[:, idx] @ val
            if candidate_selector is None:
                cand = top_candidates(scores, config.num_candidates)
            else:
                cand = np.asarray(candidate_selector(params, idx, val), dtype=np.int64)
            if ex.label in cand:
                draws = sampler.sample(cand, config.num_noises, rng)
                coef, _ = _class_coefficients(scores, cand, ex.label, draws, None)
            else:
                q_y = sampler.noise_prob(cand, ex.label)
                coef, _ = _class_coefficients(scores, cand, ex.label, None, q_y)
            step += 1
            lr = _learning_rate(config, step)
            rows = sorted(coef)
            weights = np.asarray([coef[r] for r in rows])
            params[np.ix_(rows, idx)] += (lr * weights)[:, None] * val[None, :]
    return FlatModel(params, d, dict(dataset.label_dictionary), unigram, config)


def train_beam_tree(
    dataset: Dataset,
    tree: LabelTree,
    config: TrainConfig,
    eval_dataset: Dataset | None = None,
    metrics_sink: Callable[[dict], None] | None = None,
    stats: BeamTreeStats | None = None,
) -> CaneModel:
    """Beam-tree SGD: beam-selected candidates, sampled noises, edge updates.

    Per example the beam picks the candidate classes; if the label is
    among them noises are sampled, otherwise the label itself enters the
    denominator with its renormalized probability.  Only edges on the
    selected paths are touched, and edges shared by every selected path
    are skipped outright since their gradient vanishes.
    """
    config.check_classes(dataset.num_classes)
    if tree.num_classes != dataset.num_classes:
        raise ValueError("tree and dataset disagree on the number of classes")
    rep = Representation(dataset.num_features)
    params = np.zeros((tree.num_edges, rep.dim))
    model = CaneModel(tree, params, rep, dict(dataset.label_dictionary), dataset.num_features)
    unigram = build_noise_unigram(dataset, config)
    sampler = NoiseSampler(unigram)
    rng = np.random.default_rng(config.seed)
    started = time.perf_counter()
    step = 0
    examples_seen = 0
    for epoch in range(1, config.epochs + 1):
        objective_sum = 0.0
        for i in rng.permutation(len(dataset)):
            ex = dataset.examples[i]
            idx, val = rep.apply(*ex.features)
            ranked = beam_top(tree, params, rep, (idx, val), config.num_candidates)
            cand = [cls for cls, _ in ranked]
            scores = {cls: s for cls, s in ranked}
            if ex.label in scores:
                draws = tuple(sampler.sample(cand, config.num_noises, rng))
                for draw in draws:
                    if draw.class_id not in scores:
                        scores[draw.class_id] = _path_score(tree, params, draw.class_id, idx, val)
                ctx = SampledLossContext(scores, tuple(cand), ex.label, draws=draws)
                selected = cand + [d.class_id for d in draws if d.class_id not in cand]
            else:
                scores[ex.label] = _path_score(tree, params, ex.label, idx, val)
                q_y = sampler.noise_prob(cand, ex.label)
                ctx = SampledLossContext(scores, tuple(cand), ex.label, q_y=q_y)
                selected = cand + [ex.label]
            coef, value = _ctx_coefficients(ctx)
            objective_sum += value

            paths = {cls: tree.path(cls) for cls in selected}
            shared = set(paths[selected[0]].tolist())
            for cls in selected[1:]:
                shared.intersection_update(paths[cls].tolist())
            edge_coef: dict[int, float] = {}
            for cls in selected:
                a = coef[cls]
                for e in paths[cls]:
                    edge_coef[int(e)] = edge_coef.get(int(e), 0.0) + a

            step += 1
            lr = _learning_rate(config, step)
            edges = [e for e in sorted(edge_coef) if e not in shared]
            if stats is not None:
                stats.examples += 1
                stats.edge_updates += len(edges)
                stats.max_edge_updates_per_example = max(
                    stats.max_edge_updates_per_example, len(edges)
                )
                stats.shared_edge_skips += sum(1 for e in edge_coef if e in shared)
            if edges:
                weights = np.asarray([edge_coef[e] for e in edges])
                params[np.ix_(edges, idx)] += (lr * weights)[:, None] * val[None, :]
        examples_seen += len(dataset)

        if metrics_sink is not None and (
            epoch % config.eval_every == 0 or epoch == config.epochs
        ):
            record = {
                "epoch": epoch,
                "examples_seen": examples_seen,
                "sampled_objective_mean": objective_sum / len(dataset),
                "test_accuracy_top1": None,
                "coverage_topNc": None,
                "wall_seconds": time.perf_counter() - started,
            }
            if eval_dataset is not None:
                from .evaluate import coverage_probability, topk_accuracy

                record["test_accuracy_top1"] = topk_accuracy(model, eval_dataset, 1)[1]
                record["coverage_topNc"] = coverage_probability(
                    model, eval_dataset, config.num_candidates
                )
            metrics_sink(record)
    return model


def _path_score(tree: LabelTree, params: np.ndarray, cls: int, idx, val) -> float:
    score = 0.0
    for dot in edge_dots(params, tree.path(cls), idx, val):
        score += float(dot)
    return score


def _ctx_coefficients(ctx: SampledLossContext) -> tuple[dict[int, float], float]:
    """Per-class coefficients and objective value from a loss context."""
    classes = list(ctx.candidates)
    for extra_cls in ctx.scores:
        if extra_cls not in ctx.candidates:
            classes.append(extra_cls)
    index = {cls: i for i, cls in enumerate(classes)}
    scores = np.asarray([ctx.scores[cls] for cls in classes])
    cand = np.asarray([index[c] for c in ctx.candidates])
    if ctx.q_y is None:
        draws = [NoiseDraw(index[d.class_id], d.prob) for d in ctx.draws]
        coef, value = _class_coefficients(scores, cand, index[ctx.y], draws, None)
    else:
        coef, value = _class_coefficients(scores, cand, index[ctx.y], None, ctx.q_y)
    return {classes[i]: c for i, c in coef.items()}, value


def empirical_objective_exact(
    model: FlatModel,
    dataset: Dataset,
    candidate_selector: CandidateSelector | None = None,
) -> float:
    """Sampled objective with the noise expectation enumerated exactly.

    Averages, over the dataset, the per-example objective with the sum
    over noise classes computed in full instead of sampled.  Meant for
    verification at small K.
    """
    if model.unigram is None or model.config is None:
        raise ValueError("model must carry its unigram and config")
    sampler = NoiseSampler(model.unigram)
    k = model.num_classes
    total = 0.0
    for ex in dataset.examples:
        idx, val = ex.features
        scores = model.params[:, idx] @ val
        if candidate_selector is None:
            cand = top_candidates(scores, model.config.num_candidates)
        else:
            cand = np.asarray(candidate_selector(model.params, idx, val), dtype=np.int64)
        cand_set = set(int(c) for c in cand)
        complement = np.asarray([c for c in range(k) if c not in cand_set])
        cand_scores = scores[cand]
        if complement.size == 0:
            # Degenerate full-candidate case: plain softmax over C.
            shift = float(cand_scores.max())
            total += scores[ex.label] - (
                shift + math.log(float(np.exp(cand_scores - shift).sum()))
            )
            continue
        if ex.label in cand_set:
            value = 0.0
            for j in complement:
                q_j = sampler.noise_prob(cand_set, int(j))
                value += q_j * loss_in(
                    {int(c): float(scores[c]) for c in cand},
                    ex.label,
                    float(scores[j]),
                    q_j,
                )
            total += value
        else:
            q_y = sampler.noise_prob(cand_set, ex.label)
            total += loss_out(
                {int(c): float(scores[c]) for c in cand}, float(scores[ex.label]), q_y
            )
    return total / len(dataset)


def exact_sampled_gradient(
    params: np.ndarray,
    example,
    sampler: NoiseSampler,
    cand: np.ndarray,
) -> np.ndarray:
    """Exact-enumeration gradient of the per-example sampled objective.

    Dense (K, d); used to probe stationarity at known-good parameters.
    """
    idx, val = example.features
    k = params.shape[0]
    scores = params[:, idx] @ val
    cand_set = set(int(c) for c in cand)
    complement = [c for c in range(k) if c not in cand_set]
    coef = np.zeros(k)
    y = example.label
    if y in cand_set:
        for j in complement:
            q_j = sampler.noise_prob(cand_set, j)
            extra = scores[j] - math.log(q_j)
            shift = max(float(scores[cand].max()), extra)
            exps = np.exp(scores[cand] - shift)
            extra_exp = math.exp(extra - shift)
            denom = float(exps.sum()) + extra_exp
            coef[cand] -= q_j * exps / denom
            coef[j] -= q_j * extra_exp / denom
        coef[y] += 1.0
    else:
        q_y = sampler.noise_prob(cand_set, y)
        extra = scores[y] - math.log(q_y)
        shift = max(float(scores[cand].max()), extra)
        exps = np.exp(scores[cand] - shift)
        extra_exp = math.exp(extra - shift)
        denom = float(exps.sum()) + extra_exp
        coef[cand] -= exps / denom
        coef[y] += 1.0 - extra_exp / denom
    grad = np.zeros_like(params)
    grad[:, idx] = coef[:, None] * val[None, :]
    return grad


def softmax_loss_grad(model: FlatModel, example) -> tuple[float, np.ndarray]:
    """Exact softmax log-likelihood and its dense (K, d) ascent gradient."""
    idx, val = example.features
    scores = model.params[:, idx] @ val
    shift = float(scores.max())
    exps = np.exp(scores - shift)
    log_z = shift + math.log(float(exps.sum()))
    probs = exps / float(exps.sum())
    coef = -probs
    coef[example.label] += 1.0
    grad = np.zeros_like(model.params)
    grad[:, idx] = coef[:, None] * val[None, :]
    return float(scores[example.label] - log_z), grad


def softmax_train(dataset: Dataset, config: TrainConfig) -> FlatModel:
    """Full-softmax SGD baseline; touches all K rows every step."""
    k, d = dataset.num_classes, dataset.num_features
    params = np.zeros((k, d))
    rng = np.random.default_rng(config.seed)
    step = 0
    for _ in range(config.epochs):
        for i in rng.permutation(len(dataset)):
            ex = dataset.examples[i]
            idx, val = ex.features
            scores = params[:, idx] @ val
            shift = float(scores.max())
            exps = np.exp(scores - shift)
            coef = -exps / float(exps.sum())
            coef[ex.label] += 1.0
            step += 1
            lr = _learning_rate(config, step)
            params[:, idx] += (lr * coef)[:, None] * val[None, :]
    return FlatModel(params, d, dict(dataset.label_dictionary), None, config)
