import numpy as np
import pytest
import torch

from adrm.data import DatasetHandle, LabeledDataset, make_synthetic

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_dataset():
    return make_synthetic(n_classes=10, image_size=8, n_train_per_class=30, n_test_per_class=10, seed=3)


def blob_dataset(n_classes=4, dim=16, n_train=100, n_test=50, spread=0.05, seed=0):
    """Gaussian blobs shaped as 1x4x4 images; class means are far apart."""
    rng = np.random.default_rng(seed)
    means = rng.uniform(0.2, 0.8, size=(n_classes, dim))

    def draw(n):
        y = np.repeat(np.arange(n_classes), n)
        x = means[y] + spread * rng.standard_normal((len(y), dim))
        return np.clip(x, 0, 1).reshape(-1, 1, 4, 4), y

    xtr, ytr = draw(n_train)
    xte, yte = draw(n_test)
    return LabeledDataset("blobs", DatasetHandle("blobs", xtr, ytr, "train"),
                          DatasetHandle("blobs", xte, yte, "test"), n_classes)


@pytest.fixture(scope="session")
def blobs():
    return blob_dataset()


# --------------------------------------------------------------------------
# desk-scale runs shared by the acceptance and desk tests

DESK_SEEDS = (0, 1, 2)


class DeskRuns:
    """Lazily trained desk-preset runs, keyed by (preset, seed)."""

    def __init__(self):
        self.cache = {}
        self.datasets = {}

    def config(self, preset, seed):
        from adrm.config import parse_config
        return parse_config({"preset": preset,
                             "seeds": {"data": seed, "init": seed, "memory": seed, "diversify": seed}})

    def stream(self, cfg):
        from adrm.data import load_dataset, make_task_stream
        key = repr(cfg.dataset.loader_spec())
        if key not in self.datasets:
            self.datasets[key] = load_dataset(cfg.dataset.loader_spec())
        return make_task_stream(self.datasets[key], cfg.stream.n_steps, cfg.stream.class_order_seed)

    def get(self, preset, seed=0):
        """(model, accuracy matrix, stream) for one desk run."""
        from adrm.trainer import run_stream
        if (preset, seed) not in self.cache:
            cfg = self.config(preset, seed)
            stream = self.stream(cfg)
            model, matrix, _ = run_stream(stream, cfg.to_train_config())
            self.cache[preset, seed] = (model, matrix, stream)
        return self.cache[preset, seed]

    def test_set(self, preset, seed=0):
        """All test images with labels mapped to head positions."""
        _, _, stream = self.get(preset, seed)
        order = np.asarray(stream.class_order)
        position = np.empty(len(order), dtype=np.int64)
        position[order] = np.arange(len(order))
        test = stream.dataset.test
        return torch.from_numpy(test.images), torch.from_numpy(position[test.labels])


@pytest.fixture(scope="session")
def desk():
    return DeskRuns()


@pytest.fixture(scope="session")
def desk_cli_runs(tmp_path_factory):
    """The desk-adrm-r10 preset trained twice through cmd_train in separate roots."""
    from adrm.runs import cmd_train
    root = tmp_path_factory.mktemp("desk")
    return [cmd_train("desk-adrm-r10", str(root / tag)) for tag in ("a", "b")]


# --------------------------------------------------------------------------
# acceptance report

ACCEPTANCE = {}


@pytest.fixture
def report():
    def record(criterion, ok, detail):
        status = ok if isinstance(ok, str) else ("PASS" if ok else "FAIL")
        ACCEPTANCE.setdefault(criterion, []).append(f"[{status}] criterion {criterion}: {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE):
        for line in ACCEPTANCE[criterion]:
            terminalreporter.write_line(line)
