import json
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lyricgen import cli
from lyricgen.corpus import bundled_corpus_path, corpus_pairs, read_corpus
from lyricgen.model import ModelConfig, build_model

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow], print_blob=True
)
settings.load_profile("default")

# small enough to overfit the bundled corpus well inside the CPU budget
OVERFIT_FLAGS = [
    "--hidden", "32", "--embedding", "32", "--layers", "1", "--lr", "0.001",
    "--batch-size", "4", "--dropout-rate", "0", "--sampling-prob", "0",
    "--epochs", "300", "--seed", "0",
]


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` over every coordinate of ``x`` (modified in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        up = f()
        flat[j] = orig - eps
        down = f()
        flat[j] = orig
        gflat[j] = (up - down) / (2 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)))


@pytest.fixture
def tiny_model():
    def make(vocab_size=7, hidden=4, embedding=3, layers=1, use_structure=True, seed=0):
        cfg = ModelConfig(vocab_size=vocab_size, embedding=embedding, hidden=hidden,
                          layers=layers, use_structure=use_structure)
        return build_model(cfg, seed=seed)
    return make


@pytest.fixture(scope="session")
def bundled_pairs():
    return corpus_pairs(read_corpus(bundled_corpus_path()))


def _train_run(tmp_path_factory, name, extra_flags):
    out = tmp_path_factory.mktemp(name)
    ckpt = out / "model.json"
    log = out / "train.jsonl"
    start = time.process_time()
    code = cli.main(["train", "--checkpoint", str(ckpt), "--log", str(log), *OVERFIT_FLAGS,
                     *extra_flags])
    elapsed = time.process_time() - start
    history = [json.loads(line) for line in log.read_text(encoding="utf-8").splitlines()]
    return {"code": code, "checkpoint": ckpt, "log": log, "history": history, "cpu_seconds": elapsed,
            "dir": out}


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """Structure-conditioned model trained on the bundled corpus."""
    return _train_run(tmp_path_factory, "overfit", [])


@pytest.fixture(scope="session")
def baseline_run(tmp_path_factory):
    """Same recipe without the structure channel."""
    return _train_run(tmp_path_factory, "baseline", ["--mode", "baseline"])


ACCEPTANCE_LINES = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
