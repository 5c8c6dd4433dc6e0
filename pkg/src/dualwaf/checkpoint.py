"""Checkpoint directory: manifest.json, one little-endian weight blob, vocab files.

The blob holds every model tensor and, when present, the optimizer's
first and second moments (``optim.exp_avg.<name>``, ``optim.exp_avg_sq.<name>``).
Writing is deterministic: the same model state gives byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .detector import Detector, Vocabs
from .tokenizer import CHAR_VOCAB, CharVocab, Vocab
from .training import TrainState

FORMAT = "dualwaf-checkpoint/1"
MANIFEST = "manifest.json"
BLOB = "weights.bin"
URL_VOCAB = "url_vocab.txt"
PARAM_VOCAB = "param_vocab.txt"
CHAR_VOCAB_FILE = "char_vocab.json"

_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}


class CheckpointError(OSError):
    pass


class ChecksumMismatch(CheckpointError):
    pass


def _tensors(model: Detector, optimizer: torch.optim.Optimizer | None) -> list[tuple[str, torch.Tensor]]:
    out = [(name, t) for name, t in model.state_dict().items()]
    if optimizer is not None:
        for name, p in model.named_parameters():
            st = optimizer.state.get(p)
            if st:
                out.append((f"optim.exp_avg.{name}", st["exp_avg"]))
                out.append((f"optim.exp_avg_sq.{name}", st["exp_avg_sq"]))
    return out


def save_checkpoint(path: str | Path, model: Detector, run: RunConfig,
                    state: TrainState | None = None) -> Path:
    path = Path(path)
    state = state or TrainState()
    try:
        path.mkdir(parents=True, exist_ok=True)
        entries = {}
        chunks = []
        offset = 0
        for name, t in _tensors(model, state.optimizer):
            dt = _DTYPES.get(t.dtype)
            if dt is None:
                raise CheckpointError(f"tensor {name} has unsupported dtype {t.dtype}")
            data = t.detach().cpu().contiguous().numpy().astype(dt, copy=False).tobytes()
            entries[name] = {"shape": list(t.shape), "dtype": dt, "offset": offset, "nbytes": len(data)}
            chunks.append(data)
            offset += len(data)
        blob = b"".join(chunks)
        (path / BLOB).write_bytes(blob)
        vocab_files = {}
        if model.vocabs.url is not None:
            model.vocabs.url.save(path / URL_VOCAB)
            vocab_files["url"] = URL_VOCAB
        if model.vocabs.param is not None:
            model.vocabs.param.save(path / PARAM_VOCAB)
            vocab_files["param"] = PARAM_VOCAB
        CHAR_VOCAB.save(path / CHAR_VOCAB_FILE)
        manifest = {
            "format": FORMAT,
            "config": run.to_dict(),
            "state": {"step": state.step, "epochs_done": state.epochs_done},
            "blob": BLOB,
            "sha256": hashlib.sha256(blob).hexdigest(),
            "vocab_files": vocab_files,
            "char_vocab": CHAR_VOCAB_FILE,
            "tensors": entries,
        }
        (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"cannot write checkpoint to {path}: {e}") from e
    return path


def load_checkpoint(path: str | Path, with_optimizer: bool = True) -> tuple[Detector, RunConfig, TrainState]:
    """Rebuild model, config and training state; verifies the blob checksum."""
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
        blob = (path / manifest.get("blob", BLOB)).read_bytes()
    except FileNotFoundError as e:
        raise CheckpointError(f"{path} is not a checkpoint: {e}") from e
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise ChecksumMismatch(f"{path / BLOB}: sha256 does not match the manifest")

    run = RunConfig.from_dict(manifest["config"])
    files = manifest.get("vocab_files", {})
    try:
        vocabs = Vocabs(
            Vocab.load(path / files["url"]) if "url" in files else None,
            Vocab.load(path / files["param"]) if "param" in files else None,
        )
        CharVocab.load(path / manifest.get("char_vocab", CHAR_VOCAB_FILE))
    except OSError as e:
        raise CheckpointError(f"cannot read vocabulary files in {path}: {e}") from e

    def tensor(name: str) -> torch.Tensor:
        e = manifest["tensors"][name]
        arr = np.frombuffer(blob, dtype=e["dtype"], count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"])
        return torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True)).reshape(e["shape"])

    model = Detector(run.model, vocabs)
    expected = model.state_dict()
    missing = [n for n in expected if n not in manifest["tensors"]]
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {missing[:5]}")
    model.load_state_dict({n: tensor(n) for n in expected})

    state = TrainState(step=manifest["state"]["step"], epochs_done=manifest["state"]["epochs_done"])
    if with_optimizer:
        from .nn_core import make_optimizer

        opt = make_optimizer(model.named_parameters(), lr=run.train.lr, weight_decay=run.train.weight_decay)
        for name, p in model.named_parameters():
            key = f"optim.exp_avg.{name}"
            if key in manifest["tensors"]:
                opt.state[p] = {
                    "step": torch.tensor(float(state.step)),
                    "exp_avg": tensor(key).to(p.dtype),
                    "exp_avg_sq": tensor(f"optim.exp_avg_sq.{name}").to(p.dtype),
                }
        state.optimizer = opt
    model.eval()
    return model, run, state
