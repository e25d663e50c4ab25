import hashlib
import json
import logging
import math
import os
import sys
import tempfile
import time
from datetime import datetime, timezone
from pathlib import Path

from omegaconf import OmegaConf

from mctsep.exceptions import ArtifactMismatchError

logger = logging.getLogger(__name__)

# Keys that only say where inputs and outputs live or when a run happened.
HASH_EXCLUDED = (
    ("command",),
    ("run", "output_dir"),
    ("run", "resume"),
    ("run", "created_at"),
    ("policy", "checkpoint"),
    ("eval", "checkpoint"),
    ("datasets", "trajectories"),
    ("datasets", "pairs"),
    ("datasets", "expert"),
    ("hydra",),
)

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"


def canonical_json(obj):
    """Compact JSON with sorted keys; the byte form every artifact is written in."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def sha256_hex(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def atomic_write_text(path, text):
    """Write `text` to `path` through a temporary file and an atomic rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    atomic_write_text(path, canonical_json(obj) + "\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def config_container(config):
    if OmegaConf.is_config(config):
        # hydra:* resolvers only work inside a running Hydra app
        if "hydra" in config:
            config = OmegaConf.masked_copy(config, [key for key in config if key != "hydra"])
        return OmegaConf.to_container(config, resolve=True)
    return dict(config)


def config_hash(config):
    """sha256 of the resolved config, ignoring keys that only say where or when a run happens.

    Args:
        config (omegaconf.DictConfig | dict): The run configuration.

    Returns:
        str: Hex digest recorded in every artifact manifest.
    """
    data = config_container(config)
    for path in HASH_EXCLUDED:
        node = data
        for key in path[:-1]:
            node = node.get(key, {}) if isinstance(node, dict) else {}
        if isinstance(node, dict):
            node.pop(path[-1], None)
    return sha256_hex(canonical_json(data))


def check_hashes(artifacts):
    """Reject a mix of input artifacts produced under different run configs.

    Args:
        artifacts (dict): Artifact name -> recorded config hash (None when the artifact carries none).

    Returns:
        str | None: The shared hash.
    """
    recorded = {name: value for name, value in artifacts.items() if value is not None}
    if len(set(recorded.values())) > 1:
        listing = ", ".join(f"{name}={value[:12]}" for name, value in sorted(recorded.items()))
        raise ArtifactMismatchError(f"artifacts come from different run configs: {listing}")
    return next(iter(recorded.values()), None)


def created_at(config=None):
    """Manifest timestamp: `run.created_at`, else SOURCE_DATE_EPOCH, else now."""
    if config is not None:
        value = OmegaConf.select(config, "run.created_at") if OmegaConf.is_config(config) else None
        if value:
            return str(value)
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    moment = datetime.fromtimestamp(int(epoch) if epoch else time.time(), tz=timezone.utc)
    return moment.strftime("%Y-%m-%dT%H:%M:%SZ")


def derive_seed(base_seed, *parts):
    """Stable 32-bit seed from a base seed and identifying parts (task ids, iteration indices)."""
    unique_str = "_".join([str(base_seed)] + [str(part) for part in parts])
    hashed = hashlib.sha256(unique_str.encode()).hexdigest()
    return int(hashed[:8], 16)


def mean_and_standard_error(values):
    """Mean and standard error of the mean (population deviation / √n), 0 error for n ≤ 1."""
    n = len(values)
    if n == 0:
        return 0.0, 0.0
    mean = sum(values) / n
    if n == 1:
        return mean, 0.0
    std_dev = math.sqrt(sum((x - mean) ** 2 for x in values) / n)
    return mean, std_dev / math.sqrt(n)


class JsonLinesFormatter(logging.Formatter):
    """One canonical JSON object per record."""

    def format(self, record):
        entry = {
            "time": datetime.fromtimestamp(record.created, tz=timezone.utc).isoformat(timespec="milliseconds"),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        if record.exc_info:
            entry["exc_info"] = self.formatException(record.exc_info)
        return json.dumps(entry, sort_keys=True, ensure_ascii=False)


def setup_logging(output_dir=None, level=logging.INFO):
    """Root logger with a stderr handler and, when `output_dir` is given, a JSON-lines file handler."""
    handlers = [logging.StreamHandler(sys.stderr)]
    handlers[0].setFormatter(logging.Formatter(LOG_FORMAT))
    if output_dir is not None:
        Path(output_dir).mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(Path(output_dir) / "run.log.jsonl", encoding="utf-8")
        file_handler.setFormatter(JsonLinesFormatter())
        handlers.append(file_handler)
    logging.basicConfig(level=level, handlers=handlers, force=True)


def print_summary_table(report):
    """Print overall and per-family results of an evaluation report.

    Args:
        report (EvalReport): Report from `EvaluatorManager.run`.
    """
    print("\nSummary of Results:")
    print(
        f"Overall Success Rate: {100 * report.success_rate:.2f}% ± {100 * report.standard_error:.2f}%, "
        f"Mean Steps: {report.mean_steps:.2f}, Episodes: {report.episodes}"
    )
    print("Per-Family Results:")
    for family, data in report.families.items():
        print(
            f"  {family}: {100 * data.success_rate:.2f}% ± {100 * data.standard_error:.2f}%, "
            f"Steps: {data.mean_steps:.2f}, Episodes: {data.episodes}"
        )
    for note in report.notes:
        print(f"  note: {note}")
