import json

import numpy as np
import pytest
import torch

from dualwaf.checkpoint import (
    BLOB,
    MANIFEST,
    CheckpointError,
    ChecksumMismatch,
    load_checkpoint,
    save_checkpoint,
)
from dualwaf.config import RunConfig, TrainConfig
from dualwaf.data import generate_synthetic
from dualwaf.detector import Detector
from dualwaf.training import build_vocabs, train

from helpers import toy_config

torch.set_num_threads(1)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    records = generate_synthetic(120, seed=5).records
    run = RunConfig(model=toy_config(), train=TrainConfig(epochs=2, lr=1e-3))
    model = Detector(run.model, build_vocabs(records, run.model), seed=0)
    result = train(model, records, run.train, epochs=1)
    path = save_checkpoint(tmp_path_factory.mktemp("ck") / "a", model, run, result.state)
    return records, run, model, result, path


def test_round_trip_predictions(trained):
    records, run, model, result, path = trained
    loaded, run2, state = load_checkpoint(path)
    assert run2 == run
    assert state.step == result.state.step and state.epochs_done == 1
    for a, b in zip(model.predict(records[:20]), loaded.predict(records[:20])):
        assert np.array_equal(a.probs, b.probs)
    for (n, p), q in zip(model.state_dict().items(), loaded.state_dict().values()):
        assert torch.equal(p, q), n


def test_save_is_byte_identical(trained, tmp_path):
    _, run, model, result, path = trained
    again = save_checkpoint(tmp_path / "b", model, run, result.state)
    for name in (MANIFEST, BLOB, "url_vocab.txt", "param_vocab.txt", "char_vocab.json"):
        assert (path / name).read_bytes() == (again / name).read_bytes(), name


def test_manifest_layout(trained):
    path = trained[4]
    m = json.loads((path / MANIFEST).read_text())
    assert m["format"] == "dualwaf-checkpoint/1"
    spans = sorted((e["offset"], e["nbytes"]) for e in m["tensors"].values())
    assert spans[0][0] == 0
    assert all(a + n == b for (a, n), (b, _) in zip(spans, spans[1:]))
    assert sum(n for _, n in spans) == (path / BLOB).stat().st_size
    assert any(k.startswith("optim.exp_avg.") for k in m["tensors"])


def test_resume_from_disk_matches_uninterrupted(trained):
    records, run, _, _, path = trained
    full = Detector(run.model, build_vocabs(records, run.model), seed=0)
    train(full, records, run.train)
    resumed, _, state = load_checkpoint(path)
    train(resumed, records, run.train, state=state)
    for (n, p), q in zip(full.state_dict().items(), resumed.state_dict().values()):
        assert torch.allclose(p, q, atol=1e-6), n


def test_checksum_mismatch(trained, tmp_path):
    _, run, model, result, _ = trained
    path = save_checkpoint(tmp_path / "c", model, run, result.state)
    blob = bytearray((path / BLOB).read_bytes())
    blob[100] ^= 0xFF
    (path / BLOB).write_bytes(bytes(blob))
    with pytest.raises(ChecksumMismatch):
        load_checkpoint(path)


def test_not_a_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)
    (tmp_path / MANIFEST).write_text('{"format": "other"}')
    (tmp_path / BLOB).write_bytes(b"")
    with pytest.raises(CheckpointError, match="format"):
        load_checkpoint(tmp_path)
