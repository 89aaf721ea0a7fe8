import json
from pathlib import Path

import numpy as np
import pytest

from threem.cli import TOY_SETTINGS, DEFAULTS, run_train
from threem.corpus import StyleVocabulary, Vocabulary, load_dataset
from threem.toy import make_toy
from threem.trainer import load_checkpoint


def toy_settings(**train) -> dict:
    settings = json.loads(json.dumps(DEFAULTS))
    for section, values in TOY_SETTINGS.items():
        settings[section].update(values)
    settings["train"].update(train)
    return settings


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("toy")
    make_toy(out)
    return out


@pytest.fixture(scope="session")
def trained_toy(toy_dir, tmp_path_factory):
    """The toy corpus memorised with the shipped toy settings (about a minute)."""
    import time
    out = tmp_path_factory.mktemp("toy_run")
    t0 = time.perf_counter()
    summary = run_train(toy_settings(), str(toy_dir / "toy.jsonl"), out)
    elapsed = time.perf_counter() - t0
    model, meta = load_checkpoint(out / "model.ckpt")
    vocab = Vocabulary(meta["vocab"], meta["min_frequency"])
    styles = StyleVocabulary(meta["styles"])
    records = load_dataset(toy_dir / "toy.jsonl", vocab, styles)
    return {"dir": out, "model": model, "vocab": vocab, "styles": styles, "records": records,
            "summary": summary, "seconds": elapsed}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[str, str] = {}


def record(name: str, passed: bool, detail: str) -> bool:
    ACCEPTANCE[name] = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
    print(ACCEPTANCE[name])
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE.values():
            terminalreporter.write_line(line)
