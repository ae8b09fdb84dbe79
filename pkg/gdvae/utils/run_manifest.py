"""Run directories: layout, manifest, and reloading a trained run."""

import json
import logging
import os
import shutil
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Dict, List, Optional, Tuple

from ..checkpoint import load_checkpoint
from ..config import RUN_ROOT, TrainConfig, config_digest, load_config
from ..corpus import Corpus, load_admissions
from ..graph import AdmissionGraph, build_graph
from ..model import GDVAE

logger = logging.getLogger("gdvae.run_manifest")

CONFIG_FILE = "config.cfg"
CORPUS_FILE = "corpus.jsonl"
SPLITS_FILE = "splits.json"
CHECKPOINT_FILE = "checkpoint.gdvae"
EPOCHS_FILE = "epochs.jsonl"
METRICS_FILE = "metrics.jsonl"
MANIFEST_FILE = "manifest.json"


class RunDirectoryError(ValueError):
    """Raised for missing, incomplete or protected run directories."""


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """Digests, seed and artifact paths of one run directory."""

    config_digest: str
    corpus_digest: str
    split_digest: str
    seed: int
    artifacts: Dict[str, str] = field(default_factory=dict)
    created: str = field(default_factory=_now)
    updated: str = field(default_factory=_now)

    def record(self, name: str, filename: str) -> None:
        self.artifacts[name] = filename
        self.updated = _now()

    def save(self, run_dir: str) -> None:
        with open(os.path.join(run_dir, MANIFEST_FILE), "w", encoding="utf-8") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, run_dir: str) -> "RunManifest":
        path = os.path.join(run_dir, MANIFEST_FILE)
        try:
            with open(path, encoding="utf-8") as f:
                return cls(**json.load(f))
        except FileNotFoundError:
            raise RunDirectoryError(f"No manifest in run directory {run_dir}") from None
        except (json.JSONDecodeError, TypeError) as e:
            raise RunDirectoryError(f"Corrupt manifest {path}: {e}") from e


def default_run_dir(config: TrainConfig, root: Optional[str] = None) -> str:
    """``<root>/<digest[:12]>-s<seed>``, root defaulting to GDVAE_RUN_ROOT."""
    return os.path.join(root or RUN_ROOT, f"{config_digest(config)[:12]}-s{config.seed}")


def prepare_run_dir(path: str, force: bool = False) -> str:
    """Create an empty run directory; an existing nonempty one is replaced only with ``force``."""
    if os.path.exists(path):
        if not os.path.isdir(path):
            raise RunDirectoryError(f"Run path {path} exists and is not a directory")
        if os.listdir(path):
            if not force:
                raise RunDirectoryError(f"Run directory {path} already exists; pass --force to overwrite")
            logger.warning(f"Overwriting run directory {path}")
            shutil.rmtree(path)
    os.makedirs(path, exist_ok=True)
    return path


def save_splits(splits: Tuple[List[str], List[str], List[str]], path: str) -> None:
    train_ids, val_ids, test_ids = splits
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"train": train_ids, "val": val_ids, "test": test_ids}, f, indent=1)
        f.write("\n")


def load_splits(path: str) -> Tuple[List[str], List[str], List[str]]:
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
        return list(data["train"]), list(data["val"]), list(data["test"])
    except FileNotFoundError:
        raise RunDirectoryError(f"Splits file not found: {path}") from None
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise RunDirectoryError(f"Corrupt splits file {path}: {e}") from e


@dataclass
class LoadedRun:
    """Everything needed to evaluate a trained run."""

    run_dir: str
    config: TrainConfig
    corpus: Corpus
    splits: Tuple[List[str], List[str], List[str]]
    graph: AdmissionGraph
    model: GDVAE
    manifest: RunManifest


def load_run(run_dir: str) -> LoadedRun:
    """Rebuild the graph from the stored corpus and splits and load the checkpoint into a fresh model."""
    if not os.path.isdir(run_dir):
        raise RunDirectoryError(f"Run directory not found: {run_dir}")
    manifest = RunManifest.load(run_dir)
    config = load_config(os.path.join(run_dir, CONFIG_FILE))
    if config_digest(config) != manifest.config_digest:
        raise RunDirectoryError(f"Config in {run_dir} does not match its manifest digest")
    corpus = load_admissions(os.path.join(run_dir, CORPUS_FILE))
    splits = load_splits(os.path.join(run_dir, SPLITS_FILE))
    graph = build_graph(corpus, splits[0], config.graph_variant)
    model = GDVAE(config, graph, len(corpus.labels))
    load_checkpoint(os.path.join(run_dir, CHECKPOINT_FILE), config, model)
    return LoadedRun(run_dir, config, corpus, splits, graph, model, manifest)
