import hashlib
import json
import os
import random
import subprocess
from typing import Iterable, Optional

import numpy as np
import torch
from tqdm import tqdm

RESULTS_DIR = os.environ['RESULTS_DIR'] if 'RESULTS_DIR' in os.environ else 'results/'

FORMAT_VERSION = "1"


class ContractViolation(ValueError):
    """Raised when a shape, dimension or set-size contract is broken."""


class ConfigurationError(ValueError):
    pass


class ArtifactError(RuntimeError):
    """Missing or incompatible run artifacts (datasets, checkpoints, output directories)."""


class FrozenParameterDrift(RuntimeError):
    def __init__(self, component: str, expected: str, actual: str):
        super().__init__(f"Frozen component '{component}' changed: checksum {expected} -> {actual}")
        self.component = component


class NonFiniteLoss(RuntimeError):
    def __init__(self, epoch: int, batch: int, components: dict):
        parts = ", ".join(f"{k}={v}" for k, v in sorted(components.items()))
        super().__init__(f"Non-finite loss at epoch {epoch}, batch {batch}: {parts}")
        self.epoch = epoch
        self.batch = batch
        self.components = components


def derive_seed(master_seed: int, *parts) -> int:
    """
    Derives a 64-bit seed from a master seed and any number of labels (sample ids, split names, ...).
    The result does not depend on the order in which other seeds were derived.
    """
    key = json.dumps([int(master_seed)] + [str(p) for p in parts])
    return int(hashlib.sha256(key.encode('utf-8')).hexdigest()[:16], 16)


def set_seed(seed: int):
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def make_generator(seed: int, device='cpu') -> torch.Generator:
    gen = torch.Generator(device=device)
    gen.manual_seed(seed % (2**63))
    return gen


def module_checksum(module: torch.nn.Module) -> str:
    """
    sha256 over the parameters and buffers of a module, in state-dict order.
    """
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode('utf-8'))
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


def json_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode('utf-8')).hexdigest()[:16]


def code_version() -> str:
    try:
        out = subprocess.run(['git', 'rev-parse', '--short', 'HEAD'], capture_output=True, text=True,
                             cwd=os.path.dirname(__file__), timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from dpersona import __version__
    return f"v{__version__}"


def write_jsonl(path: str, records: Iterable[dict], append: bool = False):
    with open(path, 'a' if append else 'w') as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + '\n')


def read_jsonl(path: str) -> list:
    with open(path, 'r') as f:
        return [json.loads(line) for line in f if line.strip()]


def write_json(path: str, obj):
    with open(path, 'w') as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write('\n')


def read_json(path: str):
    with open(path, 'r') as f:
        return json.load(f)


class Logger:
    """
    Logger for training and evaluation runs.

    Writes a text log to <out_dir>/logs/<run_name>.log and a line-delimited JSON metric stream
    to <out_dir>/<run_name>_log.jsonl. log_level 0 keeps only the metric stream, 1 adds the text log,
    2 also echoes text messages to the console.
    """
    def __init__(self, out_dir: str, run_name: str, log_level: int = 1):
        self.log_level = log_level
        self.is_closed = False
        os.makedirs(os.path.join(out_dir, 'logs'), exist_ok=True)
        self.log_file = os.path.join(out_dir, 'logs', f'{run_name}.log')
        self.metrics_file = os.path.join(out_dir, f'{run_name}_log.jsonl')

        if self.log_level >= 1:
            self.file = open(self.log_file, 'w')
        self.metrics = open(self.metrics_file, 'w')

    def log(self, msg):
        if self.log_level >= 1:
            self.file.write(msg + '\n')
            self.file.flush()
        if self.log_level >= 2:
            tqdm.write(msg)

    def log_check(self, msg):
        if self.log_level >= 1:
            self.file.write(f"\n[Check]\n{msg}\n")
            self.file.flush()
        if self.log_level >= 2:
            tqdm.write(f"[Check] {msg}")

    def log_error(self, msg):
        if self.log_level >= 1:
            self.file.write(f"\n[ERROR]\n{msg}\n")
            self.file.flush()
        tqdm.write(f"[ERROR] {msg}")

    def log_metrics(self, record: dict):
        self.metrics.write(json.dumps(record, sort_keys=True) + '\n')
        self.metrics.flush()

    def close(self):
        if self.log_level >= 1:
            self.file.close()
        self.metrics.close()
        self.is_closed = True

    def open(self):
        if self.log_level >= 1:
            self.file = open(self.log_file, 'a')
        self.metrics = open(self.metrics_file, 'a')
        self.is_closed = False


class EmptyLogger(Logger):
    """
    A logger that does not write to file. Used while running tests.
    """
    def __init__(self):
        self.is_closed = False
    def log(self, msg):
        pass
    def log_check(self, msg):
        pass
    def log_error(self, msg):
        pass
    def log_metrics(self, record: dict):
        pass
    def close(self):
        pass
    def open(self):
        pass


class ListLogger(EmptyLogger):
    """
    Keeps metric records in memory. Handy for tests that inspect training traces.
    """
    def __init__(self):
        super().__init__()
        self.records: list = []
        self.messages: list = []
    def log(self, msg):
        self.messages.append(msg)
    def log_check(self, msg):
        self.messages.append(msg)
    def log_metrics(self, record: dict):
        self.records.append(dict(record))


def ensure_fresh_dir(path: str, force: bool = False, logger: Optional[Logger] = None):
    if os.path.exists(path) and os.listdir(path) and not force:
        raise ArtifactError(f"Output directory {path} already exists; pass --force to overwrite")
    os.makedirs(path, exist_ok=True)
    if logger is not None:
        logger.log(f"Writing to {path}")
