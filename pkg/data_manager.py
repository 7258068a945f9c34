"""
Data Manager for run artifacts.
Every file a task emits goes through here: motion and rig text files,
checkpoints, reports, loss curves and the run manifest.
"""

import json
import os
import logging
import zipfile
from typing import Any, Callable, Dict, List, Optional
from threading import Lock

import numpy as np

import utils

logger = logging.getLogger(__name__)

# Fixed member timestamp so identical arrays give identical archives
NPZ_DATE_TIME = (1980, 1, 1, 0, 0, 0)


class FormatError(ValueError):
    """A text artifact does not follow its documented format."""

    def __init__(self, line: int, reason: str):
        self.line = line
        self.reason = reason
        super().__init__(f"line {line}: {reason}")


class IoError(OSError):
    """An artifact could not be read or written."""


def _write_with_backup(file_path: str, writer: Callable[[Any], None], mode: str):
    """Rename any existing file to .backup, write, drop the backup; restore it on failure."""
    backup_path = file_path + '.backup'
    try:
        directory = os.path.dirname(file_path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        if os.path.exists(file_path):
            os.replace(file_path, backup_path)

        if 'b' in mode:
            with open(file_path, mode) as f:
                writer(f)
        else:
            with open(file_path, mode, encoding='utf-8', newline='\n') as f:
                writer(f)

        if os.path.exists(backup_path):
            os.remove(backup_path)

    except Exception as e:
        logger.error(f"Error saving {file_path}: {e}")
        if os.path.exists(backup_path):
            os.replace(backup_path, file_path)
        raise IoError(f"Could not write {file_path}: {e}") from e


def atomic_write_text(file_path: str, text: str):
    _write_with_backup(file_path, lambda f: f.write(text), 'w')


def read_text(file_path: str) -> str:
    try:
        with open(file_path, 'r', encoding='utf-8') as f:
            return f.read()
    except (OSError, UnicodeDecodeError) as e:
        raise IoError(f"Could not read {file_path}: {e}") from e


def write_npz(file_path: str, arrays: Dict[str, np.ndarray]):
    """Write named arrays as an .npz archive with stable member order and timestamps."""
    def writer(f):
        with zipfile.ZipFile(f, mode='w', compression=zipfile.ZIP_STORED) as zf:
            for name in sorted(arrays):
                info = zipfile.ZipInfo(f"{name}.npy", date_time=NPZ_DATE_TIME)
                with zf.open(info, 'w', force_zip64=True) as entry:
                    np.lib.format.write_array(entry, np.asarray(arrays[name]), allow_pickle=False)

    _write_with_backup(file_path, writer, 'wb')


def read_npz(file_path: str) -> Dict[str, np.ndarray]:
    try:
        with np.load(file_path, allow_pickle=False) as archive:
            return {name: archive[name] for name in archive.files}
    except (OSError, ValueError, zipfile.BadZipFile) as e:
        raise IoError(f"Could not read {file_path}: {e}") from e


class DataManager:
    """Owns one run directory and the artifacts written into it."""

    def __init__(self, run_dir: str):
        self.run_dir = run_dir
        self.manifest_file = os.path.join(self.run_dir, "manifest.json")
        self.artifacts: List[str] = []

        # Thread lock for file operations
        self.lock = Lock()

        os.makedirs(self.run_dir, exist_ok=True)
        logger.info(f"Run directory: {self.run_dir}")

    def path(self, name: str) -> str:
        return os.path.join(self.run_dir, name)

    def _record(self, name: str):
        if name not in self.artifacts:
            self.artifacts.append(name)

    def artifact_path(self, name: str) -> str:
        """Path for an artifact another module writes; listed in the manifest."""
        with self.lock:
            self._record(name)
        return self.path(name)

    def _load_json(self, file_path: str) -> Dict:
        try:
            with open(file_path, 'r', encoding='utf-8') as f:
                return json.load(f)
        except FileNotFoundError as e:
            raise IoError(f"Missing {file_path}") from e
        except json.JSONDecodeError as e:
            raise FormatError(e.lineno, f"invalid JSON: {e.msg}") from e

    def _save_json(self, file_path: str, data: Any):
        text = json.dumps(data, indent=2, sort_keys=True, default=str) + '\n'
        atomic_write_text(file_path, text)

    def save_json(self, name: str, data: Any) -> str:
        with self.lock:
            file_path = self.path(name)
            self._save_json(file_path, data)
            self._record(name)
        logger.info(f"Wrote {file_path}")
        return file_path

    def load_json(self, name: str) -> Dict:
        with self.lock:
            return self._load_json(self.path(name))

    def save_text(self, name: str, text: str) -> str:
        with self.lock:
            file_path = self.path(name)
            atomic_write_text(file_path, text)
            self._record(name)
        logger.info(f"Wrote {file_path}")
        return file_path

    def save_arrays(self, name: str, arrays: Dict[str, np.ndarray]) -> str:
        with self.lock:
            file_path = self.path(name)
            write_npz(file_path, arrays)
            self._record(name)
        logger.info(f"Wrote {file_path}")
        return file_path

    def save_report(self, report, stem: str = 'report') -> List[str]:
        """Write a MetricReport as `<stem>.txt` and `<stem>.json`."""
        return [self.save_text(f"{stem}.txt", report.to_text()),
                self.save_text(f"{stem}.json", report.to_json())]

    def save_loss_curve(self, curve: List[Dict[str, float]], name: str = 'loss_curve.json') -> str:
        return self.save_json(name, curve)

    def write_manifest(self, task: str, seed: int, config_hash: str,
                       extra: Optional[Dict[str, Any]] = None) -> str:
        """Task, seed, config hash and the artifacts written so far."""
        manifest = {
            'task': task,
            'seed': seed,
            'config_hash': config_hash,
            'artifacts': sorted(self.artifacts),
        }
        if extra:
            manifest.update(extra)
        with self.lock:
            self._save_json(self.manifest_file, manifest)
        logger.info(f"Run manifest written at {utils.format_timestamp(utils.get_current_timestamp())}")
        return self.manifest_file

    def get_stats(self) -> Dict:
        """Artifact counts and total size on disk."""
        with self.lock:
            sizes = [os.path.getsize(self.path(n)) for n in self.artifacts if os.path.exists(self.path(n))]
            return {
                'total_artifacts': len(self.artifacts),
                'total_bytes': int(sum(sizes)),
            }
