import os

import numpy as np
import pytest

from gradreg import model as mdl
from gradreg.numcore import make_rng

MNIST_DIR = os.environ.get("GRADREG_MNIST_DIR", "/root/data/mnist")
MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def mnist_path(key):
    base = os.path.join(MNIST_DIR, MNIST_FILES[key])
    for candidate in (base, base + ".gz"):
        if os.path.isfile(candidate):
            return candidate
    return None


def have_mnist():
    return all(mnist_path(k) for k in MNIST_FILES)


needs_mnist = pytest.mark.skipif(not have_mnist(), reason=f"MNIST not found in {MNIST_DIR}")


@pytest.fixture
def rng():
    return make_rng(1234)


def random_mlp(rng, sizes=(6, 5, 3)):
    """Small sigmoid MLP with weights large enough to be non-trivial."""
    model = mdl.init_mlp(list(sizes), rng)
    for layer in model.layers:
        layer.weight *= 2.0
        layer.bias[:] = rng.normal(scale=0.5, size=layer.bias.shape)
    return model


def one_hot_row(k, label):
    t = np.zeros(k)
    t[label] = 1.0
    return t


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def central_jacobian(f, x, h=1e-5):
    """Rows are d f_k / d x by central differences (f vector valued)."""
    x = np.array(x, dtype=np.float64)
    cols = []
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.array(cols).T


def rel_err(a, b, rtol=1e-5, atol=1e-8):
    """Worst relative error, with entries whose absolute error is below
    ``atol`` counted as passing a ``rtol`` relative check.

    Dividing by max(|a|, |b|, atol / rtol) gives exactly that: an entry
    scores below ``rtol`` iff its relative error is below ``rtol`` or its
    absolute error is below ``atol``.
    """
    a, b = np.asarray(a), np.asarray(b)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), atol / rtol)
    return float(np.max(np.abs(a - b) / scale))


# Reproduction protocol for the softmax models (see README, "Reproduction").
SOFTMAX_LAMBDAS = (1e-4, 1e-2, 1.0)
SOFTMAX_PROTOCOL = """\
dataset = mnist
lr = 0.2
epochs = 250
batch = 100
momentum = 0.5
seed = 0
noise_levels = 0,0.1,0.3
noise_trials = 5
stats_split = train
ld_sigma = 0.01
"""


def mnist_config_lines():
    return "".join(f"{k} = {mnist_path(k)}\n" for k in MNIST_FILES)


def run_softmax_protocol(out_dir, lam):
    """Train and analyse one softmax model through the CLI; returns artifacts.

    With GRADREG_RUN_CACHE set, finished runs in that directory whose
    resolved config matches are reused instead of retrained.
    """
    import json

    from gradreg.cli import RunConfig, main

    out_dir = str(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    text = SOFTMAX_PROTOCOL + mnist_config_lines() + f"lambda = {lam!r}\nout_dir = {out_dir}\n"
    cfg_path = os.path.join(out_dir, "run.cfg")
    expected = RunConfig.parse(text).dump()
    resolved = os.path.join(out_dir, "resolved_config.txt")
    done = os.path.join(out_dir, "robust.json")
    reuse = (os.environ.get("GRADREG_RUN_CACHE") and os.path.exists(done)
             and os.path.exists(resolved) and open(resolved).read() == expected)
    if not reuse:
        with open(cfg_path, "w") as f:
            f.write(text)
        assert main(["train", "--config", cfg_path]) == 0
        assert main(["robust", "--config", cfg_path]) == 0
    with open(os.path.join(out_dir, "summary.json")) as f:
        summary = json.load(f)
    with open(done) as f:
        report = json.load(f)
    return {"dir": out_dir, "summary": summary, "robust": report,
            "model": mdl.load_model(os.path.join(out_dir, "model.bin"))}


@pytest.fixture(scope="session")
def softmax_runs(tmp_path_factory):
    if not have_mnist():
        pytest.skip(f"MNIST not found in {MNIST_DIR}")
    base = os.environ.get("GRADREG_RUN_CACHE") or str(tmp_path_factory.mktemp("softmax"))
    return {lam: run_softmax_protocol(os.path.join(base, f"lambda_{lam:g}"), lam)
            for lam in SOFTMAX_LAMBDAS}


@pytest.fixture(scope="session")
def mnist_sets():
    if not have_mnist():
        pytest.skip(f"MNIST not found in {MNIST_DIR}")
    from gradreg.dataio import load_mnist
    return (load_mnist(mnist_path("train_images"), mnist_path("train_labels")),
            load_mnist(mnist_path("test_images"), mnist_path("test_labels")))


def noise_rate(report, sigma, field="actual_rate"):
    for r in report["noise_levels"]:
        if r["sigma_noise"] == sigma:
            return r[field]
    raise KeyError(sigma)


# Acceptance verdicts, printed together at the end of the session.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
