import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from weednet.data import Sample
from weednet.synthetic import make_synthetic
from weednet.training import TrainConfig, train

OVERFIT_STEPS = 500
OVERFIT_EPOCHS = 63  # 16 images / batch 2 = 8 steps per epoch; 63 epochs covers 500 steps


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion reported at session end")


_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    key = (marker.args[0], marker.args[1])
    failed = report.failed
    if report.when == "call" or failed or report.skipped:
        previous = _criteria.get(key, "PASS")
        status = "FAIL" if failed else ("SKIP" if report.skipped else "PASS")
        _criteria[key] = "FAIL" if "FAIL" in (previous, status) else status


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), status in sorted(_criteria.items()):
        terminalreporter.write_line(f"criterion {number:>2}  {status}  {title}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def synthetic_tiny():
    return make_synthetic(n_per_class=4, extent=128, seed=0)


def _overfit_run(out_dir, X, y):
    samples = [Sample(img, int(label)) for img, label in zip(X, y)]
    config = TrainConfig(out_dir=str(out_dir), profile="tiny", epochs=OVERFIT_EPOCHS, batch_size=2,
                         learning_rate=1e-4, seed_init=0, seed_shuffle=0, max_steps=OVERFIT_STEPS,
                         record_time=False)
    tic = time.perf_counter()
    with threadpool_limits(limits=1):
        # validation on the training images themselves: per-epoch accuracy of the whole training set
        graph, history = train(config, train_part=samples, test_part=samples)
    return {"dir": out_dir, "graph": graph, "history": history, "seconds": time.perf_counter() - tic}


@pytest.fixture(scope="session")
def overfit_runs(tmp_path_factory, synthetic_tiny):
    """Two identically seeded 500-step runs on 16 synthetic images (tiny profile)."""
    X, y = synthetic_tiny
    return [_overfit_run(tmp_path_factory.mktemp(f"overfit{i}"), X, y) for i in range(2)]
