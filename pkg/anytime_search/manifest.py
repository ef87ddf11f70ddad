"""
Run manifests: one JSON file per output directory recording the resolved
configuration, inputs and every artifact produced, with checksums.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple, Union

from .data import sha256_file
from .errors import ManifestError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
RUNNING = "running"
COMPLETE = "complete"


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    code_version: str
    status: str = RUNNING
    input_checksums: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    started_at: str = ""
    finished_at: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "RunManifest":
        try:
            return cls(**payload)
        except TypeError as e:
            raise ManifestError(f"malformed manifest: {e}") from e

    def save(self, out_dir: Union[str, Path]) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, out_dir: Union[str, Path]) -> Optional["RunManifest"]:
        path = Path(out_dir) / MANIFEST_NAME
        if not path.is_file():
            return None
        try:
            return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as e:
            raise ManifestError(f"{path} is not valid JSON: {e}") from e


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def prepare_run(
    out_dir: Union[str, Path],
    command: str,
    config: dict,
    seed: int,
    code_version: str,
    inputs: Optional[Dict[str, str]] = None,
    force: bool = False,
) -> Tuple[RunManifest, bool]:
    """
    Claim an output directory for a command.

    Args:
        out_dir: Output directory
        command: Subcommand name
        config: Resolved flat configuration
        seed: Run seed
        code_version: Package version string
        inputs: Checksums of input files by name
        force: Start over even if the directory holds a run

    Returns:
        (manifest, resume) where resume is True when an interrupted run of the
        same command and configuration should be continued

    Raises:
        ManifestError: The directory holds a completed run, or a run of a
            different command or configuration, and force is not set
    """
    out_dir = Path(out_dir)
    existing = RunManifest.load(out_dir)
    resume = False
    if existing is not None and not force:
        if existing.command != command:
            raise ManifestError(f"{out_dir} holds a {existing.command!r} run; use another --out-dir or pass --force")
        if existing.status == COMPLETE:
            raise ManifestError(f"{out_dir} already holds a completed {command} run; use another --out-dir or pass --force")
        if existing.config != config or existing.seed != seed:
            raise ManifestError(f"{out_dir} holds an interrupted {command} run with a different configuration; pass --force to restart")
        resume = True
        logger.warning(f"Found interrupted {command} run in {out_dir}; resuming")
    elif existing is not None:
        logger.warning(f"Overwriting previous {existing.command} run in {out_dir}")

    manifest = RunManifest(
        command=command,
        config=config,
        seed=seed,
        code_version=code_version,
        input_checksums=dict(inputs or {}),
        started_at=existing.started_at if resume else _now(),
    )
    manifest.save(out_dir)
    return manifest, resume


def finalize_run(manifest: RunManifest, out_dir: Union[str, Path], outputs: Iterable[Union[str, Path]]) -> Path:
    """Record the checksum of every produced artifact and mark the run complete."""
    out_dir = Path(out_dir)
    inventory = {}
    for output in outputs:
        path = Path(output)
        if path.is_dir():
            files = sorted(p for p in path.rglob("*") if p.is_file())
        else:
            files = [path]
        for file in files:
            if not file.is_file():
                raise ManifestError(f"expected output {file} was not written")
            inventory[str(file.relative_to(out_dir))] = sha256_file(file)
    manifest.outputs = inventory
    manifest.status = COMPLETE
    manifest.finished_at = _now()
    path = manifest.save(out_dir)
    logger.info(f"Run complete: {len(inventory)} artifacts recorded in {path}")
    return path
