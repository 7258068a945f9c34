"""
Command handler for the mmdm tasks.
Maps each task name to the TaskManager operation that runs it.
"""

import logging
from typing import Any, Callable, Dict, Optional

from config import ConfigError, TaskConfig
from data_manager import DataManager
from pipelines import TaskManager

logger = logging.getLogger(__name__)


class MMDMCommandHandler:
    """Dispatches a configured task and records the run manifest."""

    def __init__(self, cfg: TaskConfig, data_manager: Optional[DataManager] = None):
        """Initialize the handler with the given task configuration."""
        self.cfg = cfg
        self.task_manager = TaskManager(cfg, data_manager)
        self.handlers: Dict[str, Callable[[], Dict[str, Any]]] = {}
        self._setup_handlers()

    def _setup_handlers(self):
        """Set up one handler per task."""
        self.add_handler('train', self.train_command)
        self.add_handler('complete', self.complete_command)
        self.add_handler('refine', self.refine_command)
        self.add_handler('inbetween', self.inbetween_command)
        self.add_handler('simulate', self.simulate_command)
        self.add_handler('eval', self.eval_command)

    def add_handler(self, task: str, handler: Callable[[], Dict[str, Any]]):
        self.handlers[task] = handler

    def train_command(self) -> Dict[str, Any]:
        result = self.task_manager.train()
        return {'checkpoint': result.checkpoint, 'steps': len(result.curve)}

    def complete_command(self) -> Dict[str, Any]:
        completed, report = self.task_manager.run_completion()
        return {'frames': completed.T, 'metrics': report.values}

    def refine_command(self) -> Dict[str, Any]:
        refined, report = self.task_manager.run_refinement()
        return {'frames': refined.T, 'metrics': report.values}

    def inbetween_command(self) -> Dict[str, Any]:
        _, report = self.task_manager.run_inbetween()
        return {'frames': self.cfg.split.transition, 'metrics': report.values}

    def simulate_command(self) -> Dict[str, Any]:
        result = self.task_manager.run_simulate()
        return {'tracks': result.reconstruction.N, 'metrics': result.report.values}

    def eval_command(self) -> Dict[str, Any]:
        if not self.cfg.pred or not self.cfg.gt:
            raise ConfigError("eval needs --pred and --gt motion files")
        report = self.task_manager.run_eval()
        return {'metrics': report.values}

    def run(self, task: Optional[str] = None) -> Dict[str, Any]:
        """Run one task and write the manifest; library errors propagate to the caller."""
        task = task or self.cfg.task
        if task not in self.handlers:
            raise ConfigError(f"unknown task '{task}', expected one of {sorted(self.handlers)}")
        logger.info(f"Running task '{task}' ({self.cfg})")
        summary = self.handlers[task]()
        self.task_manager.finish()
        logger.info(f"Task '{task}' finished: {self.task_manager.data_manager.get_stats()}")
        return summary
