import json
import os
import time
from pathlib import Path

import pytest
import torch

from anovlm.config import load_config
from anovlm.training import run_pipeline


def pytest_configure(config):
    torch.set_num_threads(max(1, os.cpu_count() or 1))


@pytest.fixture()
def cfg():
    return load_config(None, 0)


@pytest.fixture(scope="session")
def session_cfg():
    return load_config(None, 0)


def _run_complete(run_dir: Path) -> bool:
    need = [run_dir / "checkpoints" / f"stage{s}.avw" for s in "0123"]
    need += [run_dir / "digests" / f"stage{s}.json" for s in "0123"]
    need.append(run_dir / "wall_time.json")
    return all(p.exists() for p in need)


@pytest.fixture(scope="session")
def trained_run(session_cfg, tmp_path_factory):
    """Full default-seed curriculum run shared by the slow tests.

    Trains fresh once per session. Set ANOVLM_TEST_RUN to a directory to keep
    the run across sessions (it is reused only if complete).
    """
    env = os.environ.get("ANOVLM_TEST_RUN")
    run_dir = Path(env) if env else tmp_path_factory.mktemp("run")
    if not _run_complete(run_dir):
        started = time.time()
        run_pipeline(session_cfg, run_dir)
        with open(run_dir / "wall_time.json", "w") as fh:
            json.dump({"pipeline_seconds": time.time() - started}, fh)
    return run_dir
