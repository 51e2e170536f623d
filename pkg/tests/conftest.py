from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import pytest

from tlbench.data_model import DatasetManifest, PatientRecord
from tlbench.synth import SynthConfig, generate_corpus

HEADER = ["image_ref", "label", "country", "age", "sex", "modality", "source"]


def record(i, label="covid", country="Spain", age=40.0, sex="female", **kw):
    return PatientRecord(f"img_{i:06d}.png", label, country, age, sex,
                         kw.pop("modality", "xray"), kw.pop("source", "fixture"), **kw)


def manifest_from(rows) -> DatasetManifest:
    return DatasetManifest(tuple(rows))


def write_csv(path: Path, rows, header=HEADER):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """240 images of 32x32 with geometry, shared read-only across tests."""
    out = tmp_path_factory.mktemp("tiny_corpus")
    manifest = generate_corpus(out, SynthConfig(n=240, image_size=32, seed=3))
    return out, manifest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    number = int(report.nodeid.split("test_criterion_")[1].split("_")[0])
    title = report.nodeid.split("test_criterion_")[1].split("_", 1)[1].replace("_", " ")
    ACCEPTANCE[number] = ("PASS" if report.passed else "FAIL", title)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, title = ACCEPTANCE[number]
        terminalreporter.write_line(f"{status} criterion {number:2d}: {title}")
