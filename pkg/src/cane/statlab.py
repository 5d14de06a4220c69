"""Numerical verification lab for the estimator's statistical theory.

Checks, at desk scale, that the sampled estimator behaves as the theory
predicts: the population optimum is the log-odds function, the estimator
is consistent, its asymptotic covariance matches the predicted inverse
information form, and that covariance approaches the full-softmax MLE's
as the candidate set captures almost all label mass.

Index convention: with K classes, class K-1 is the reference whose score
is pinned to zero inside this module; vectors and matrices over the
remaining classes use their natural id order 0..K-2.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .data import Dataset, Example
from .evaluate import coverage_probability
from .sampling import NoiseDraw
from .trainer import (
    FlatModel,
    SampledLossContext,
    TrainConfig,
    grad_generic_in,
    grad_generic_out,
    grad_tree_edge_in,
    grad_tree_edge_out,
    loss_in,
    loss_out,
    softmax_loss_grad,
    softmax_train,
    train_generic,
)
from .tree import rebalance

__all__ = [
    "SyntheticSpec",
    "VarianceInputs",
    "generate_synthetic",
    "log_odds_mse",
    "consistency_experiment",
    "variance_matrix_M",
    "variance_matrix_mle",
    "corollary1_gap",
    "corollary1_limit_check",
    "corollary1_trend",
    "fit_exact_pinned",
    "estimator_variance_mc",
    "coverage_probability",
    "numeric_gradient",
    "gradient_check",
    "random_variance_inputs",
]


@dataclass(frozen=True)
class SyntheticSpec:
    """Ground truth for synthetic classification draws.

    Features are i.i.d. standard normal; labels follow the softmax of
    ``weights @ x``.  The last weight row is pinned to zero so the true
    log-odds (and hence the estimand) are unique.
    """

    num_classes: int
    num_features: int
    num_examples: int
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        if w.shape != (self.num_classes, self.num_features):
            raise ValueError("weights must be (K, d)")
        if not np.isfinite(w).all():
            raise ValueError("weights must be finite")
        if self.num_classes >= 1 and not np.allclose(w[-1], 0.0, atol=0.0):
            raise ValueError("last weight row must be zero")

    @classmethod
    def random(cls, num_classes, num_features, num_examples, seed, scale=1.0):
        rng = np.random.default_rng(seed)
        w = scale * rng.standard_normal((num_classes, num_features))
        w[-1] = 0.0
        return cls(num_classes, num_features, num_examples, w)


def generate_synthetic(spec: SyntheticSpec, seed):
    """Draw a dataset from the spec; returns it with the true log-odds map.

    The second return value maps ``(x, k)`` to the log-odds of class k
    against the reference class (or the full length K-1 vector when k is
    omitted).
    """
    rng = np.random.default_rng(seed)
    n, d, k = spec.num_examples, spec.num_features, spec.num_classes
    features = rng.standard_normal((n, d))
    logits = features @ spec.weights.T
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    u = rng.random(n)
    labels = (probs.cumsum(axis=1) < u[:, None]).sum(axis=1)
    np.clip(labels, 0, k - 1, out=labels)

    all_idx = np.arange(d)
    examples = [
        Example(all_idx, features[i], int(labels[i])) for i in range(n)
    ]
    dataset = Dataset.build(examples, k, d, {c: c for c in range(k)})

    def true_log_odds(x, class_id: int | None = None):
        scores = spec.weights @ np.asarray(x, dtype=np.float64)
        odds = scores[: k - 1] - scores[k - 1]
        return odds if class_id is None else float(odds[class_id])

    return dataset, true_log_odds


def log_odds_mse(params: np.ndarray, probe: np.ndarray, spec: SyntheticSpec) -> float:
    """Mean squared log-odds error of a flat model over probe inputs."""
    k = spec.num_classes
    fitted = probe @ params.T
    fitted = fitted[:, : k - 1] - fitted[:, k - 1 :]
    truth = probe @ spec.weights.T
    truth = truth[:, : k - 1] - truth[:, k - 1 :]
    return float(((fitted - truth) ** 2).mean(axis=1).mean())


def consistency_experiment(
    spec: SyntheticSpec,
    config: TrainConfig,
    n_grid,
    probe_size: int = 2000,
    method: str = "cane",
) -> list[tuple[int, float]]:
    """Log-odds MSE of the trained model across training-set sizes.

    A consistent estimator drives the MSE toward zero as n grows; the
    probe set is fixed across the grid so the numbers are comparable.
    """
    if method not in ("cane", "softmax"):
        raise ValueError(f"unknown method {method!r}")
    probe = np.random.default_rng((config.seed, 104729)).standard_normal(
        (probe_size, spec.num_features)
    )
    results = []
    for n in n_grid:
        spec_n = dataclasses.replace(spec, num_examples=int(n))
        dataset, _ = generate_synthetic(spec_n, (config.seed, int(n)))
        if method == "cane":
            model = train_generic(dataset, config)
        else:
            model = softmax_train(dataset, config)
        results.append((int(n), log_odds_mse(model.params, probe, spec)))
    return results


@dataclass(frozen=True)
class VarianceInputs:
    """Pointwise ingredients of the asymptotic precision matrix.

    ``probs`` are the K class probabilities at a fixed input (reference
    class last); ``candidates`` lists the candidate classes among
    0..K-2; ``noise_probs`` maps every remaining non-reference class to
    its sampling probability (summing to one).
    """

    probs: np.ndarray
    candidates: tuple[int, ...]
    noise_probs: dict[int, float]

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "candidates", tuple(self.candidates))
        k = p.shape[0]
        if (p <= 0).any() or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("probs must be positive and sum to 1")
        cand = set(self.candidates)
        noise = set(self.noise_probs)
        if cand & noise:
            raise ValueError("candidate and noise sets overlap")
        if cand | noise != set(range(k - 1)):
            raise ValueError("candidates and noises must partition 0..K-2")
        total_q = math.fsum(self.noise_probs.values())
        if noise and (abs(total_q - 1.0) > 1e-9 or min(self.noise_probs.values()) <= 0):
            raise ValueError("noise probabilities must be positive and sum to 1")


def variance_matrix_M(inputs: VarianceInputs) -> np.ndarray:
    """Precision building block of the sampled estimator, (K-1)x(K-1).

    Rows/columns follow natural class order 0..K-2.  For each noise
    class j the rank-one correction uses the importance-weighted mass
    p_j/q_j in the j slot and the candidate masses elsewhere.
    """
    p = inputs.probs
    k = p.shape[0]
    cand = list(inputs.candidates)
    m = np.zeros((k - 1, k - 1))
    ref_plus_cand = p[k - 1] + float(p[np.asarray(cand, dtype=np.int64)].sum()) if cand else p[k - 1]
    for j, q_j in sorted(inputs.noise_probs.items()):
        u = np.zeros(k - 1)
        for c in cand:
            u[c] = p[c]
        u[j] = p[j] / q_j
        d_j = ref_plus_cand + p[j] / q_j
        m += q_j * (np.diag(u) - np.outer(u, u) / d_j)
    return m


def variance_matrix_mle(probs: np.ndarray) -> np.ndarray:
    """Precision building block of the full-softmax MLE, (K-1)x(K-1)."""
    p = np.asarray(probs, dtype=np.float64)
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("probs must sum to 1")
    head = p[:-1]
    return np.diag(head) - np.outer(head, head)


def corollary1_gap(inputs: VarianceInputs) -> float:
    """Relative Frobenius distance between the two precision blocks."""
    m = variance_matrix_M(inputs)
    m_mle = variance_matrix_mle(inputs.probs)
    return float(np.linalg.norm(m - m_mle) / np.linalg.norm(m_mle))


def _random_split_probs(
    k: int,
    candidates: tuple[int, ...],
    noise_mass: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Random class probabilities with the given total mass on the noises."""
    cand = list(candidates)
    noise = [c for c in range(k - 1) if c not in candidates]
    p = np.zeros(k)
    covered = rng.dirichlet(np.ones(len(cand) + 1))
    p[cand] = (1.0 - noise_mass) * covered[:-1]
    p[k - 1] = (1.0 - noise_mass) * covered[-1]
    p[noise] = noise_mass * rng.dirichlet(np.ones(len(noise)))
    return p


def corollary1_limit_check(
    num_classes: int,
    candidates,
    noise_probs: dict[int, float],
    noise_mass: float,
    seed,
) -> float:
    """Gap for one random probability draw with the given noise mass.

    As the candidate set's label mass approaches one (noise mass to
    zero) the gap vanishes.
    """
    rng = np.random.default_rng(seed)
    p = _random_split_probs(num_classes, tuple(candidates), noise_mass, rng)
    return corollary1_gap(VarianceInputs(p, tuple(candidates), dict(noise_probs)))


def corollary1_trend(
    num_classes: int,
    candidates,
    eps_grid,
    draws: int,
    seed,
) -> np.ndarray:
    """Mean gap per noise mass, holding the random directions fixed.

    For each draw, the relative proportions within the covered and
    noise parts (and the sampling distribution q) stay fixed while the
    noise mass sweeps the grid.
    """
    candidates = tuple(candidates)
    noise = [c for c in range(num_classes - 1) if c not in candidates]
    rng = np.random.default_rng(seed)
    gaps = np.zeros((draws, len(eps_grid)))
    for d in range(draws):
        covered_dir = rng.dirichlet(np.ones(len(candidates) + 1))
        noise_dir = rng.dirichlet(np.ones(len(noise)))
        q_dir = rng.dirichlet(5.0 * np.ones(len(noise)))
        q = {j: float(q_dir[i]) for i, j in enumerate(noise)}
        for e, eps in enumerate(eps_grid):
            p = np.zeros(num_classes)
            p[list(candidates)] = (1.0 - eps) * covered_dir[:-1]
            p[num_classes - 1] = (1.0 - eps) * covered_dir[-1]
            p[noise] = eps * noise_dir
            gaps[d, e] = corollary1_gap(VarianceInputs(p, candidates, q))
    return gaps.mean(axis=0)


def _pinned_objective(theta_flat, features, labels, cand, noise, q, k):
    """Exact sampled objective (and gradient) with the reference pinned.

    The reference class contributes a constant 1 to every denominator.
    Enumerates the noise expectation exactly; returns the negated value
    and gradient for use with a minimizer.
    """
    n, d = features.shape
    theta = theta_flat.reshape(k - 1, d)
    scores = features @ theta.T  # (n, K-1)
    cand_arr = np.asarray(cand, dtype=np.int64)
    value = 0.0
    coef = np.zeros((n, k - 1))
    in_cov = np.isin(labels, np.append(cand_arr, k - 1))
    label_score = np.where(labels == k - 1, 0.0, scores[np.arange(n), np.minimum(labels, k - 2)])
    # Rows whose label is covered (candidates or reference) average over
    # every noise class; rows whose label is a noise class use only it.
    log_e = {}
    w_cand = {}
    w_noise = {}
    for j in noise:
        t_j = scores[:, j] - math.log(q[j])
        shift = np.maximum(t_j, 0.0)
        if cand:
            shift = np.maximum(shift, scores[:, cand_arr].max(axis=1))
        total = np.exp(-shift) + np.exp(t_j - shift)
        if cand:
            total = total + np.exp(scores[:, cand_arr] - shift[:, None]).sum(axis=1)
        log_e[j] = shift + np.log(total)
        if cand:
            w_cand[j] = np.exp(scores[:, cand_arr] - log_e[j][:, None])
        w_noise[j] = np.exp(t_j - log_e[j])

    # Covered rows: value and coefficients, averaged over all noises.
    if in_cov.any():
        rows = np.flatnonzero(in_cov)
        for j in noise:
            q_j = q[j]
            value += float((q_j * (label_score - log_e[j]))[rows].sum())
            if cand:
                coef[np.ix_(rows, cand_arr)] -= q_j * w_cand[j][rows]
            coef[rows, j] -= q_j * w_noise[j][rows]
        cand_labels = rows[labels[rows] != k - 1]
        coef[cand_labels, labels[cand_labels]] += 1.0
    # Rows labeled with a noise class.
    for j in noise:
        rows = np.flatnonzero(labels == j)
        if rows.size == 0:
            continue
        value += float((scores[rows, j] - log_e[j][rows]).sum())
        if cand:
            coef[np.ix_(rows, cand_arr)] -= w_cand[j][rows]
        coef[rows, j] += 1.0 - w_noise[j][rows]

    grad = coef.T @ features / n
    return -value / n, -grad.ravel()


def fit_exact_pinned(
    features: np.ndarray,
    labels: np.ndarray,
    candidates,
    noise_probs: dict[int, float],
    num_classes: int,
) -> np.ndarray:
    """Maximizer of the exact sampled objective with the reference pinned.

    Returns the (K-1, d) parameter block; the reference class's score is
    identically zero.  Deterministic: L-BFGS from zero with tight
    tolerances.
    """
    cand = sorted(candidates)
    noise = sorted(noise_probs)
    d = features.shape[1]
    result = minimize(
        _pinned_objective,
        np.zeros((num_classes - 1) * d),
        args=(features, labels.astype(np.int64), cand, noise, noise_probs, num_classes),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": 500, "gtol": 1e-10, "ftol": 1e-15},
    )
    return result.x.reshape(num_classes - 1, d)


def estimator_variance_mc(
    spec: SyntheticSpec,
    candidates,
    noise_probs: dict[int, float],
    n: int,
    reps: int,
    seed,
    x_draws: int = 10_000,
) -> dict:
    """Monte Carlo check of the estimator's asymptotic covariance.

    Repeatedly draws a dataset of size n, fits the exact sampled
    objective, and compares the sample covariance of sqrt(n) times the
    estimation error against the predicted inverse-information form,
    which is estimated by averaging over fresh inputs.  Also reports the
    analytic trace alongside the full-softmax MLE's for the same inputs.
    """
    k, d = spec.num_classes, spec.num_features
    candidates = tuple(sorted(candidates))
    theta_star = spec.weights[: k - 1]
    deviations = np.zeros((reps, (k - 1) * d))
    for rep in range(reps):
        spec_n = dataclasses.replace(spec, num_examples=n)
        dataset, _ = generate_synthetic(spec_n, (seed, rep))
        features = np.vstack([ex.values for ex in dataset.examples])
        labels = dataset.labels()
        theta_hat = fit_exact_pinned(features, labels, candidates, noise_probs, k)
        deviations[rep] = math.sqrt(n) * (theta_hat - theta_star).ravel()
    empirical_cov = np.cov(deviations, rowvar=False)

    rng = np.random.default_rng((seed, 424242))
    dim = (k - 1) * d
    info_cane = np.zeros((dim, dim))
    info_mle = np.zeros((dim, dim))
    for _ in range(x_draws):
        x = rng.standard_normal(d)
        scores = spec.weights @ x
        scores -= scores.max()
        p = np.exp(scores)
        p /= p.sum()
        xxt = np.outer(x, x)
        inputs = VarianceInputs(p, candidates, noise_probs)
        info_cane += np.kron(variance_matrix_M(inputs), xxt)
        info_mle += np.kron(variance_matrix_mle(p), xxt)
    info_cane /= x_draws
    info_mle /= x_draws
    analytic_cov = np.linalg.inv(info_cane)
    analytic_cov_mle = np.linalg.inv(info_mle)

    emp_diag = np.diag(empirical_cov)
    ana_diag = np.diag(analytic_cov)
    return {
        "empirical_cov": empirical_cov,
        "analytic_cov": analytic_cov,
        "analytic_cov_mle": analytic_cov_mle,
        "diag_rel_err": float((np.abs(emp_diag - ana_diag) / ana_diag).max()),
        "trace_cane": float(np.trace(analytic_cov)),
        "trace_mle": float(np.trace(analytic_cov_mle)),
        "reps": reps,
        "n": n,
    }


def numeric_gradient(fn, x0: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, one coordinate at a time."""
    grad = np.zeros_like(x0, dtype=np.float64)
    for i in range(x0.size):
        plus = x0.copy()
        plus.flat[i] += step
        minus = x0.copy()
        minus.flat[i] -= step
        grad.flat[i] = (fn(plus) - fn(minus)) / (2.0 * step)
    return grad


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.linalg.norm(numeric)), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def _flat_scores(theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    return theta @ x


def _tree_scores(tree, params: np.ndarray, x: np.ndarray, classes) -> dict[int, float]:
    scores = {}
    for cls in classes:
        scores[cls] = float(sum(params[e] @ x for e in tree.path(cls)))
    return scores


def gradient_check(instances: int = 100, seed=0, step: float = 1e-5) -> dict:
    """Analytic vs. finite-difference gradients on random small instances.

    Exercises the two generic gradients, the two tree-edge gradients,
    and the softmax baseline gradient.  Reports the worst relative error
    per family and overall.
    """
    rng = np.random.default_rng(seed)
    worst = {
        "generic_in": 0.0,
        "generic_out": 0.0,
        "tree_in": 0.0,
        "tree_out": 0.0,
        "softmax": 0.0,
    }
    for _ in range(instances):
        k = int(rng.integers(3, 17))
        d = int(rng.integers(2, 9))
        x = rng.standard_normal(d)
        theta = 0.5 * rng.standard_normal((k, d))
        perm = rng.permutation(k)
        n_c = int(rng.integers(1, k - 1))
        cand = sorted(int(c) for c in perm[:n_c])
        complement = [c for c in range(k) if c not in cand]

        basis = {}
        for cls in range(k):
            vec = np.zeros(k * d)
            vec[cls * d : (cls + 1) * d] = x
            basis[cls] = vec

        # Label inside the candidates, a few independent noise draws.
        y_in = int(rng.choice(cand))
        n_draws = int(rng.integers(1, min(3, len(complement)) + 1))
        draw_cls = [int(c) for c in rng.choice(complement, size=n_draws, replace=True)]
        draw_q = [float(q) for q in rng.uniform(0.05, 1.0, size=n_draws)]

        def mean_loss_in(flat, _cls=draw_cls, _q=draw_q, _y=y_in, _cand=cand, _d=d, _k=k):
            th = flat.reshape(_k, _d)
            s = _flat_scores(th, x)
            sc = {c: float(s[c]) for c in _cand}
            return sum(
                loss_in(sc, _y, float(s[j]), q) for j, q in zip(_cls, _q)
            ) / len(_cls)

        scores = _flat_scores(theta, x)
        scores_c = {c: float(scores[c]) for c in cand}
        analytic = grad_generic_in(
            scores_c,
            basis,
            y_in,
            [(float(scores[j]), q, basis[j]) for j, q in zip(draw_cls, draw_q)],
        )
        numeric = numeric_gradient(mean_loss_in, theta.ravel(), step)
        worst["generic_in"] = max(worst["generic_in"], _relative_error(analytic, numeric))

        # Label outside the candidates.
        y_out = int(rng.choice(complement))
        q_y = float(rng.uniform(0.05, 1.0))

        def loss_out_flat(flat, _y=y_out, _q=q_y, _cand=cand, _d=d, _k=k):
            th = flat.reshape(_k, _d)
            s = _flat_scores(th, x)
            return loss_out({c: float(s[c]) for c in _cand}, float(s[_y]), _q)

        analytic = grad_generic_out(scores_c, basis, float(scores[y_out]), q_y, basis[y_out])
        numeric = numeric_gradient(loss_out_flat, theta.ravel(), step)
        worst["generic_out"] = max(worst["generic_out"], _relative_error(analytic, numeric))

        # Tree-edge gradients on a random balanced tree.
        b = int(rng.integers(2, 5))
        tree = rebalance([int(c) for c in rng.permutation(k)], b)
        params = 0.5 * rng.standard_normal((tree.num_edges, d))
        sel_in = sorted(set(cand) | set(draw_cls))
        paths_in = {cls: tree.path(cls) for cls in sel_in}
        tree_scores = _tree_scores(tree, params, x, sel_in)
        draws = tuple(NoiseDraw(j, q) for j, q in zip(draw_cls, draw_q))
        ctx_in = SampledLossContext(tree_scores, tuple(cand), y_in, draws=draws)
        analytic_full = np.zeros_like(params)
        touched = sorted({int(e) for cls in sel_in for e in paths_in[cls]})
        for e in touched:
            analytic_full[e] = grad_tree_edge_in(ctx_in, paths_in, e, x)

        def mean_tree_loss_in(flat, _tree=tree, _sel=sel_in, _cls=draw_cls, _q=draw_q):
            p = flat.reshape(params.shape)
            s = _tree_scores(_tree, p, x, _sel)
            sc = {c: s[c] for c in cand}
            return sum(loss_in(sc, y_in, s[j], q) for j, q in zip(_cls, _q)) / len(_cls)

        numeric_full = numeric_gradient(mean_tree_loss_in, params.ravel(), step).reshape(
            params.shape
        )
        worst["tree_in"] = max(worst["tree_in"], _relative_error(analytic_full, numeric_full))

        sel_out = sorted(set(cand) | {y_out})
        paths_out = {cls: tree.path(cls) for cls in sel_out}
        tree_scores_out = _tree_scores(tree, params, x, sel_out)
        ctx_out = SampledLossContext(tree_scores_out, tuple(cand), y_out, q_y=q_y)
        analytic_full = np.zeros_like(params)
        touched = sorted({int(e) for cls in sel_out for e in paths_out[cls]})
        for e in touched:
            analytic_full[e] = grad_tree_edge_out(ctx_out, paths_out, e, x)

        def tree_loss_out(flat, _tree=tree, _sel=sel_out):
            p = flat.reshape(params.shape)
            s = _tree_scores(_tree, p, x, _sel)
            return loss_out({c: s[c] for c in cand}, s[y_out], q_y)

        numeric_full = numeric_gradient(tree_loss_out, params.ravel(), step).reshape(
            params.shape
        )
        worst["tree_out"] = max(worst["tree_out"], _relative_error(analytic_full, numeric_full))

        # Softmax baseline.
        y_any = int(rng.integers(k))
        example = Example(np.arange(d), x, y_any)
        model = FlatModel(theta, d)
        _, analytic_sm = softmax_loss_grad(model, example)

        def softmax_loglik(flat, _y=y_any, _d=d, _k=k):
            th = flat.reshape(_k, _d)
            s = _flat_scores(th, x)
            shift = float(s.max())
            return float(s[_y] - (shift + math.log(np.exp(s - shift).sum())))

        numeric_sm = numeric_gradient(softmax_loglik, theta.ravel(), step).reshape(k, d)
        worst["softmax"] = max(worst["softmax"], _relative_error(analytic_sm, numeric_sm))

    worst["max"] = max(worst.values())
    worst["instances"] = instances
    return worst


def random_variance_inputs(num_classes: int, seed) -> VarianceInputs:
    """Random probabilities, candidate split, and noise distribution."""
    rng = np.random.default_rng(seed)
    k = num_classes
    p = rng.dirichlet(np.ones(k))
    n_c = int(rng.integers(1, k - 1))
    perm = rng.permutation(k - 1)
    cand = tuple(sorted(int(c) for c in perm[:n_c]))
    noise = [int(c) for c in perm[n_c:]]
    q_dir = rng.dirichlet(5.0 * np.ones(len(noise)))
    q = {j: float(q_dir[i]) for i, j in enumerate(noise)}
    return VarianceInputs(p, cand, q)
