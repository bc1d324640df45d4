"""Run-directory orchestration behind the CLI: train, eval and analyze phases.

Layout of a run directory::

    config.yaml            verbatim copy of the submitted config
    config.json            normalized config (defaults materialized)
    manifest.json          digests, artifact checksums, per-phase status
    checkpoints/task_*.pt  one checkpoint per finished task
    accuracy_matrix.csv    R[t][i]
    metrics.csv            one row per optimizer step
    diversifier.csv        one row per diversified rehearsal step
    corruption_sweep.csv / adversarial_sweep.csv   written by eval
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from contextlib import contextmanager
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock, Timeout

from .attacks import SWEEP_HEADER, AttackSpec, evaluate_under_attack
from .config import load_config, parse_config
from .data import load_dataset, make_task_stream, subset_indices
from .errors import AdrmError, ArtifactNotFound, IncompatibleRuns, InvalidArgument
from .evaluation import (CORRUPTION_HEADER, corruption_sweep, extract_features,
                         similarity_matrix, write_rows)
from .trainer import DIAG_HEADER, STEP_HEADER, load_checkpoint, run_stream

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "ADRM_OUTPUT_ROOT"
MANIFEST = "manifest.json"

CSV_SCHEMAS = {
    "metrics.csv": STEP_HEADER,
    "diversifier.csv": DIAG_HEADER,
    "corruption_sweep.csv": CORRUPTION_HEADER,
    "adversarial_sweep.csv": SWEEP_HEADER,
}


def framework_version():
    try:
        return version("adrm")
    except PackageNotFoundError:
        return "0+unknown"


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


class RunManifest:
    def __init__(self, run_dir, data=None):
        self.run_dir = Path(run_dir)
        self.data = data or {"phases": {}, "artifacts": {}, "timestamps": {}}

    @classmethod
    def load(cls, run_dir):
        path = Path(run_dir) / MANIFEST
        if not path.exists():
            raise ArtifactNotFound(f"no manifest in {run_dir}")
        return cls(run_dir, json.loads(path.read_text()))

    def record(self, *paths):
        for p in paths:
            p = Path(p)
            if p.exists():
                self.data["artifacts"][str(p.relative_to(self.run_dir))] = sha256_file(p)

    def phase(self, name, status):
        self.data["phases"][name] = status
        self.data["timestamps"][f"{name}_{status}"] = _now()
        self.save()

    def save(self):
        (self.run_dir / MANIFEST).write_text(json.dumps(self.data, indent=2, sort_keys=True))

    def verify(self):
        """Names of artifacts that are missing or fail their checksum."""
        bad = []
        for rel, digest in self.data["artifacts"].items():
            p = self.run_dir / rel
            if not p.exists() or sha256_file(p) != digest:
                bad.append(rel)
        return bad


@contextmanager
def run_lock(run_dir):
    lock = FileLock(str(Path(run_dir) / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise AdrmError(f"another process is writing to {run_dir}") from None
    try:
        yield
    finally:
        lock.release()


def resolve_run_dir(config, output_dir=None):
    root = output_dir or config.output_dir or os.environ.get(OUTPUT_ROOT_ENV) or "runs"
    return Path(root) / config.name


def cmd_train(config_source, output_dir=None):
    """Train per config and return the run directory; raises after recording failure."""
    if isinstance(config_source, dict):
        config = parse_config(config_source)
        raw = json.dumps(config_source, indent=2, sort_keys=True)
    else:
        config, raw = load_config(config_source)
    run_dir = resolve_run_dir(config, output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    with run_lock(run_dir):
        (run_dir / "config.yaml").write_text(raw)
        (run_dir / "config.json").write_text(json.dumps(config.normalized(), indent=2, sort_keys=True))
        dataset = load_dataset(config.dataset.loader_spec())
        manifest = RunManifest(run_dir)
        manifest.data.update({
            "model_id": config.name,
            "config_digest": config.digest(),
            "framework_version": framework_version(),
            "dataset": {"name": dataset.name, "digest": dataset.digest()},
        })
        manifest.record(run_dir / "config.yaml", run_dir / "config.json")
        manifest.phase("train", "running")
        stream = make_task_stream(dataset, config.stream.n_steps, config.stream.class_order_seed)
        torch.manual_seed(config.seeds.init)
        try:
            _, matrix, artifacts = run_stream(stream, config.to_train_config(), run_dir,
                                              config.digest())
        except Exception:
            manifest.record(*sorted(run_dir.glob("checkpoints/*.pt")),
                            *(run_dir / n for n in ("accuracy_matrix.csv", "metrics.csv", "diversifier.csv")))
            manifest.data["partial"] = True
            manifest.phase("train", "failed")
            raise
        manifest.data["final_checkpoint"] = str(artifacts.checkpoints[-1].relative_to(run_dir))
        manifest.data["partial"] = False
        manifest.record(*artifacts.checkpoints,
                        *(run_dir / n for n in ("accuracy_matrix.csv", "metrics.csv", "diversifier.csv")))
        manifest.phase("train", "completed")
    return run_dir


def _load_run(run_dir):
    run_dir = Path(run_dir)
    manifest = RunManifest.load(run_dir)
    if manifest.data["phases"].get("train") != "completed":
        raise ArtifactNotFound(f"run {run_dir} has no completed training phase")
    ckpt = run_dir / manifest.data.get("final_checkpoint", "")
    if not manifest.data.get("final_checkpoint") or not ckpt.exists():
        raise ArtifactNotFound(f"final checkpoint missing in {run_dir}")
    config = parse_config(json.loads((run_dir / "config.json").read_text()))
    model, payload = load_checkpoint(ckpt)
    return manifest, config, model, payload


def _test_set(config, payload, max_examples=None, seed=0):
    """Test images of every class the model has learned, labels mapped to head positions."""
    dataset = load_dataset(config.dataset.loader_spec())
    order = payload["class_order"]
    position = np.full(dataset.n_classes, -1)
    position[order] = np.arange(len(order))
    keep = np.flatnonzero(position[dataset.test.labels] >= 0)
    if max_examples is not None and max_examples < len(keep):
        keep = keep[subset_indices(len(keep), max_examples, seed)]
    x = torch.from_numpy(dataset.test.images[keep])
    y = torch.from_numpy(position[dataset.test.labels[keep]])
    return dataset, x, y


def cmd_eval(run_dir, kinds=None, severities=None, attacks=None, epsilons_255=None,
             corruption=True, adversarial=True, max_examples=None):
    """Write corruption and adversarial sweep CSVs for a completed run."""
    run_dir = Path(run_dir)
    manifest, config, model, payload = _load_run(run_dir)
    ev = config.evaluation
    seed = config.seeds.eval
    _, x, y = _test_set(config, payload, max_examples or ev.max_examples, seed)
    model_id = manifest.data["model_id"]
    outputs = {}
    with run_lock(run_dir):
        manifest.phase("eval", "running")
        try:
            if corruption:
                rows = corruption_sweep(model, x.numpy(), y, kinds or ev.corruption.kinds,
                                        ev.corruption.severities if severities is None else severities,
                                        seed, model_id)
                path = run_dir / "corruption_sweep.csv"
                write_rows(path, CORRUPTION_HEADER, rows)
                outputs["corruption"] = rows
                manifest.record(path)
            if adversarial:
                rows = []
                for kind in attacks or ev.attacks.kinds:
                    for e255 in (ev.attacks.epsilons_255 if epsilons_255 is None else epsilons_255):
                        eps = e255 / 255 * (ev.attacks.l2_scale if kind == "pgd_l2" else 1.0)
                        spec = AttackSpec(kind, eps, steps=None if kind == "fgsm" else ev.attacks.pgd_steps,
                                          seed=seed)
                        acc = evaluate_under_attack(model, x, y, spec)
                        rows.append({"model_id": model_id, "attack": kind, "epsilon": eps,
                                     "accuracy": acc, "n": len(y), "seed": seed})
                path = run_dir / "adversarial_sweep.csv"
                write_rows(path, SWEEP_HEADER, rows)
                outputs["adversarial"] = rows
                manifest.record(path)
        except Exception:
            manifest.phase("eval", "failed")
            raise
        manifest.phase("eval", "completed")
    return outputs


def cmd_analyze(run_dirs, out_dir, subset_seed=0, subset_size=None):
    """Extract paired penultimate features and write the CKA matrix across runs."""
    seen, unique = set(), []
    for rd in run_dirs:
        key = Path(rd).resolve()
        if key not in seen:
            seen.add(key)
            unique.append(Path(rd))
    if not unique:
        raise InvalidArgument("analyze needs at least one run")
    loaded = [_load_run(rd) for rd in unique]
    digests = {m.data["dataset"]["digest"] for m, *_ in loaded}
    if len(digests) != 1:
        raise IncompatibleRuns("runs were trained on different datasets")
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    _, config, _, _ = loaded[0]
    dataset = load_dataset(config.dataset.loader_spec())
    size = subset_size or config.evaluation.analysis_subset
    idx = subset_indices(len(dataset.test), size, subset_seed)
    images = torch.from_numpy(dataset.test.images[idx])
    labels = dataset.test.labels[idx]
    feats, ids = [], []
    for manifest, _, model, _ in loaded:
        mid = manifest.data["model_id"]
        while mid in ids:
            mid += "+"
        ids.append(mid)
        fm = extract_features(model, images, labels, model_id=mid)
        fm.meta = {"subset_seed": subset_seed, "subset_size": int(len(idx)),
                   "dataset_digest": manifest.data["dataset"]["digest"]}
        fm.save(out_dir / "features")
        feats.append(fm)
    sim = similarity_matrix(feats)
    sim.to_csv(out_dir / "cka_matrix.csv")
    return sim


def check_csv(path):
    """Header problems for a CSV this package emits; an empty list means valid."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return [f"{path.name}: empty file"]
    header = rows[0]
    problems = []
    if path.name in CSV_SCHEMAS:
        if tuple(header) != CSV_SCHEMAS[path.name]:
            problems.append(f"{path.name}: header {header} != {list(CSV_SCHEMAS[path.name])}")
    elif path.name == "accuracy_matrix.csv":
        T = len(header) - 1
        if header != ["step"] + [f"task_{i}" for i in range(T)]:
            problems.append(f"{path.name}: bad header {header}")
        if len(rows) - 1 != T:
            problems.append(f"{path.name}: {len(rows) - 1} rows for {T} tasks")
        for t, row in enumerate(rows[1:]):
            if len(row) == len(header) and any(row[1 + i] != "" for i in range(t + 1, T)):
                problems.append(f"{path.name}: row {t} is not lower-triangular")
    elif path.name == "cka_matrix.csv":
        ids = header[1:]
        if header[:1] != ["model_id"] or [r[0] for r in rows[1:]] != ids:
            problems.append(f"{path.name}: row and column model ids disagree")
    else:
        problems.append(f"{path.name}: no known schema")
    for i, row in enumerate(rows[1:], 1):
        if len(row) != len(header):
            problems.append(f"{path.name}: row {i} has {len(row)} fields, expected {len(header)}")
    return problems


def check_run(run_dir):
    """Verify manifest checksums and the header schema of every CSV in a run."""
    run_dir = Path(run_dir)
    problems = [f"checksum mismatch: {rel}" for rel in RunManifest.load(run_dir).verify()]
    for p in sorted(run_dir.glob("*.csv")):
        problems += check_csv(p)
    return problems
