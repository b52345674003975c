"""Misclassification under Gaussian input noise and its linear-view model.

The model treats each correctly classified point as flipping once the noise
component along its loss gradient exceeds the minimum perturbation ``a``
found by a line search. With ``a ~ N(mu_a, sigma_a^2)`` and per-axis noise
``eta0 ~ N(0, sigma^2)``, ``delta = eta0 - a`` is Gaussian and

    predicted = P(miss) + (1 - P(miss)) * n * P(delta >= 0).
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.integrate import simpson

from . import model as mdl
from .dataio import one_hot
from .numcore import InvalidParameterError, gaussian_cdf, gaussian_sf, standard_normals
from .train import EVAL_CHUNK, evaluate_error


class EstimatorUndefinedError(ValueError):
    pass


# line-search outcome codes
FLIPPED, MISCLASSIFIED, NO_FLIP, ZERO_GRADIENT = 0, 1, 2, 3


@dataclass(frozen=True)
class NoiseModel:
    sigma_noise: float
    d: int = 784

    def __post_init__(self):
        if self.sigma_noise < 0:
            raise InvalidParameterError("noise standard deviation must be non-negative")


def example_noise(base_seed, trial, index, sigma, d):
    """Noise vector for one (trial, example) pair from its own substream.

    Each pair gets a generator seeded by ``(base_seed, trial, index)``, so
    the draws do not depend on evaluation order or chunking.
    """
    rng = np.random.default_rng([base_seed, trial, index])
    return sigma * standard_normals(rng, d)


def noise_misclassification(model, data, noise, trials=1, rng=None):
    """Mean error rate over ``trials`` independent corruptions ``x + eta``.

    One base seed is drawn from ``rng``; example ``i`` in trial ``j`` uses
    the substream ``(base, j, i)``. The corrupted inputs are not clipped
    back into [0, 1].
    """
    if trials < 1:
        raise InvalidParameterError("trials must be at least 1")
    if noise.sigma_noise == 0:
        return evaluate_error(model, data)
    if rng is None:
        rng = np.random.default_rng(0)
    base = int(rng.integers(2 ** 63))
    wrong = 0
    for trial in range(trials):
        for start in range(0, len(data), EVAL_CHUNK):
            x = data.inputs[start:start + EVAL_CHUNK]
            eta = np.stack([example_noise(base, trial, start + k, noise.sigma_noise, x.shape[1])
                            for k in range(len(x))]) if len(x) else x
            pred = mdl.predict(model, x + eta)
            wrong += int(np.sum(pred != data.labels[start:start + EVAL_CHUNK]))
    return wrong / (trials * len(data))


def _grid_size(step, t_max):
    if not step > 0 or t_max < step:
        raise InvalidParameterError("line search needs 0 < step <= t_max")
    return int(math.floor(t_max / step + 1e-9))


def line_search_batch(model, x, labels, step=0.01, t_max=20.0):
    """Minimum flip distance along each row's unit loss gradient.

    The direction is fixed at the start; distances ``step, 2*step, ...`` up
    to ``t_max`` are tried. Returns ``(lengths, status)`` where ``lengths``
    is NaN unless ``status`` is ``FLIPPED``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    n_steps = _grid_size(step, t_max)
    k = model.num_classes
    lengths = np.full(len(x), np.nan)
    status = np.full(len(x), MISCLASSIFIED)

    trace = mdl.forward(model, x)
    correct = np.argmax(trace.y, axis=1) == labels
    grad = mdl.backprop(model, x, one_hot(labels, k), trace=trace).grad_input
    gnorm = np.sqrt(np.sum(grad * grad, axis=1))
    zero = correct & (gnorm == 0)
    status[zero] = ZERO_GRADIENT
    active = np.flatnonzero(correct & ~zero)
    status[active] = NO_FLIP
    # The input only enters through the first (linear) layer, so move along
    # the line in that layer's pre-activation space.
    first = model.layers[0]
    direction = grad[active] / gnorm[active, None]
    base = trace.pre_activations[0][active]
    slope = direction @ first.weight.T
    want = labels[active]
    for i in range(1, n_steps + 1):
        if active.size == 0:
            break
        t = i * step
        o = mdl.logits_from_first_preactivation(model, base + t * slope)
        flipped = np.argmax(o, axis=1) != want
        if flipped.any():
            hit = active[flipped]
            lengths[hit] = t
            status[hit] = FLIPPED
            keep = ~flipped
            active, slope, base, want = active[keep], slope[keep], base[keep], want[keep]
    return lengths, status


def min_perturbation_line_search(model, x, t, step=0.01, t_max=20.0):
    """Smallest grid distance along the loss gradient that changes a correct
    prediction, or ``None`` (misclassified input, zero gradient, no flip)."""
    label = int(np.argmax(t))
    lengths, status = line_search_batch(model, x, [label], step, t_max)
    return float(lengths[0]) if status[0] == FLIPPED else None


def histogram_counts(values, bin_width):
    """Counts in bins ``[k w, (k+1) w)`` starting at 0.

    Values sitting within 1e-9 bins of an upper edge are counted in the
    next bin, so grid-quantised values land deterministically.
    """
    if not bin_width > 0:
        raise InvalidParameterError("bin_width must be positive")
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return np.zeros(0, dtype=np.int64)
    idx = np.floor(values / bin_width + 1e-9).astype(np.int64)
    return np.bincount(idx)


@dataclass
class MinPerturbStats:
    samples: np.ndarray
    mu_a: float
    sigma_a: float
    bin_width: float = 0.01
    counts: np.ndarray = field(default=None, repr=False)
    n_misclassified: int = 0
    n_no_flip: int = 0
    n_zero_gradient: int = 0

    @classmethod
    def from_samples(cls, samples, bin_width=0.01, **counts):
        samples = np.asarray(samples, dtype=np.float64)
        if samples.size and samples.min() < 0:
            raise ValueError("minimum perturbations must be non-negative")
        mu = float(samples.mean()) if samples.size else math.nan
        sd = float(samples.std(ddof=1)) if samples.size > 1 else 0.0
        return cls(samples, mu, sd, bin_width, histogram_counts(samples, bin_width), **counts)

    @classmethod
    def from_moments(cls, mu_a, sigma_a):
        """A Gaussian fit without underlying samples (no histogram)."""
        return cls(np.zeros(0), float(mu_a), float(sigma_a), counts=np.zeros(0, dtype=np.int64))


def line_search_dataset(model, data, step=0.01, t_max=20.0, chunk=EVAL_CHUNK):
    """:func:`line_search_batch` over a whole dataset, in chunks."""
    lengths, status = [np.zeros(0)], [np.zeros(0, dtype=int)]
    for start in range(0, len(data), chunk):
        l, s = line_search_batch(model, data.inputs[start:start + chunk],
                                 data.labels[start:start + chunk], step, t_max)
        lengths.append(l)
        status.append(s)
    return np.concatenate(lengths), np.concatenate(status)


def stats_from_search(lengths, status, bin_width=0.01):
    return MinPerturbStats.from_samples(
        lengths[status == FLIPPED], bin_width,
        n_misclassified=int(np.sum(status == MISCLASSIFIED)),
        n_no_flip=int(np.sum(status == NO_FLIP)),
        n_zero_gradient=int(np.sum(status == ZERO_GRADIENT)))


def min_perturb_stats(model, data, step=0.01, t_max=20.0, bin_width=0.01, chunk=EVAL_CHUNK):
    """Line-search every row and fit mean / sample std over the flipped ones."""
    return stats_from_search(*line_search_dataset(model, data, step, t_max, chunk), bin_width)


def flip_probability(mu_a, sigma_a, sigma_noise):
    """P(eta0 - a >= 0) for a ~ N(mu_a, sigma_a^2), eta0 ~ N(0, sigma_noise^2)."""
    var = sigma_noise ** 2 + sigma_a ** 2
    if var == 0:
        return 0.0 if mu_a > 0 else 1.0
    return float(gaussian_cdf(-mu_a / math.sqrt(var)))


def adversarial_bound(n, per_direction):
    """Union bound on the adversarial event over ``n`` directions."""
    if not 0.0 <= per_direction <= 1.0:
        raise InvalidParameterError("per-direction probability must lie in [0, 1]")
    return min(1.0, n * per_direction)


def equal_distortion_bound(n, d):
    """Bound when the noise variance equals the mean squared distortion
    ``||a||^2 / d``: each direction needs a sqrt(d)-sigma excursion."""
    return adversarial_bound(n, float(gaussian_sf(math.sqrt(d))))


def missrate(p_miss, mu_a, sigma_a, sigma_noise, n=1):
    if n < 1:
        raise InvalidParameterError("n must be at least 1")
    extra = n * flip_probability(mu_a, sigma_a, sigma_noise)
    return min(1.0, max(0.0, p_miss + (1.0 - p_miss) * extra))


def predict_missrate(p_miss, stats, noise, n=1):
    return missrate(p_miss, stats.mu_a, stats.sigma_a, noise.sigma_noise, n)


def monte_carlo_missrate(p_miss, stats, noise, trials=100_000, rng=None):
    """Simulated counterpart of :func:`predict_missrate` (n = 1)."""
    if rng is None:
        rng = np.random.default_rng(0)
    z = standard_normals(rng, (2, trials))
    a = stats.mu_a + stats.sigma_a * z[0]
    eta0 = noise.sigma_noise * z[1]
    return p_miss + (1.0 - p_miss) * float(np.mean(eta0 >= a))


def fit_linear_density(stats, cutoff=0.1):
    """Least-squares slope ``c`` of a density ``f(a) = c a`` fitted to the
    histogram bins lying inside ``[0, cutoff]``.

    Bin heights are normalised by the total number of samples, so ``f``
    is a density of the whole minimum-perturbation distribution.
    """
    w = stats.bin_width
    n_bins = int(math.floor(cutoff / w + 1e-9))
    counts = np.asarray(stats.counts)
    total = len(stats.samples)
    if n_bins == 0 or total == 0:
        raise EstimatorUndefinedError("no histogram bins inside the cutoff")
    region = np.zeros(n_bins)
    m = min(n_bins, len(counts))
    region[:m] = counts[:m]
    if region.sum() == 0:
        raise EstimatorUndefinedError("no minimum perturbations below the cutoff")
    centers = (np.arange(n_bins) + 0.5) * w
    heights = region / (total * w)
    return float(centers @ heights / (centers @ centers))


def linear_density_increase(slope, p_miss, sigma_noise, cutoff=0.1, nodes=2001):
    """Extra error ``(1 - P(miss)) * int_0^cutoff c a P(eta0 >= a) da``."""
    if sigma_noise == 0:
        return 0.0
    a = np.linspace(0.0, cutoff, nodes)
    integrand = slope * a * gaussian_sf(a / sigma_noise)
    return float((1.0 - p_miss) * simpson(integrand, x=a))


def linear_density_missrate(stats, p_miss, noise, cutoff=0.1):
    return linear_density_increase(fit_linear_density(stats, cutoff), p_miss,
                                   noise.sigma_noise, cutoff)


@dataclass
class RiskReport:
    sigma_noise: float
    p_miss_clean: float
    predicted_rate: float
    actual_rate: float
    n_directions: int = 1


def write_min_perturb_csv(lengths, status, labels, path):
    names = {FLIPPED: "flipped", MISCLASSIFIED: "misclassified",
             NO_FLIP: "no_flip", ZERO_GRADIENT: "zero_gradient"}
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["example", "label", "status", "min_perturbation"])
        for i, (l, s, y) in enumerate(zip(lengths, status, labels)):
            w.writerow([i, int(y), names[int(s)], "" if math.isnan(l) else repr(float(l))])


def write_summary_json(stats, reports, path, **extra):
    doc = {
        "mu_a": stats.mu_a,
        "sigma_a": stats.sigma_a,
        "n_samples": int(len(stats.samples)),
        "n_misclassified": stats.n_misclassified,
        "n_no_flip": stats.n_no_flip,
        "n_zero_gradient": stats.n_zero_gradient,
        "noise_levels": [asdict(r) for r in reports],
    }
    doc.update(extra)
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
