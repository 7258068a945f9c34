"""
Configuration for masked motion diffusion runs.

Two layers:
- Settings: process-wide values from the environment (log level, output
  directory, checkpoint cadence), validated on construction.
- TaskConfig: one run's parameters, read from a JSON object of dotted keys
  on top of DEFAULTS, with command-line overrides applied last.
"""

import os
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np

from data_manager import IoError, read_text
from diffusion import OBJECTIVES, SCHEDULE_KINDS
from kaa_network import NetworkConfig, NetworkError
from masking import MaskingConfig, MaskingError
from motion_data import JOINT_TOKENS, SYNTH_KINDS, TOKEN_DIM, MotionDataError, SegmentSplit
import utils

logger = logging.getLogger(__name__)

TASKS = ('complete', 'refine', 'inbetween', 'train', 'simulate', 'eval')
TRAIN_MODES = ('diffusion', 'mae')
LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL')
# Keys that name where a run writes, not what it computes
RUN_LOCAL_KEYS = ('output_dir',)

_NETWORK_DEFAULTS = NetworkConfig.preset('tiny').to_dict()

DEFAULTS: Dict[str, Any] = {
    'task': 'complete',
    'seed': 0,
    'output_dir': '',
    'checkpoint': '',

    # Task inputs
    'input': '',
    'gt': '',
    'pred': '',
    'label': '',
    'metrics': 'mpjpe,pcp,accel',

    # Network; a non-empty preset replaces the per-field defaults
    'network.preset': '',
    **{f'network.{name}': value for name, value in _NETWORK_DEFAULTS.items()},

    'schedule.K': 1000,
    'schedule.kind': 'scaled-linear',
    'schedule.refine_K': 50,
    'objective': 'signal',
    # 0 samples with DDPM, N >= 1 with DDIM jumps of N steps
    'ddim_stride': 0,

    'masking.pretrain.pattern': 'A',
    'masking.pretrain.ratio': 0.5,
    'masking.finetune.pattern': 'C',
    'masking.finetune.ratio': 0.3,
    'masking.omega': 1.0,
    'masking.force_invisible': True,

    'dataset.size': 16,
    'dataset.joints': 17,
    'dataset.kinds': ','.join(SYNTH_KINDS),
    'dataset.augment': True,
    'dataset.noise_std': 0.05,

    'seq_len': 10,
    'split.preceding': 10,
    'split.transition': 30,
    'split.succeeding': 10,

    'optimizer.lr': 1e-5,
    'optimizer.weight_decay': 0.01,

    'train.model': 'completion',
    'train.mode': 'diffusion',
    'train.steps': 2000,
    'train.finetune_steps': 500,
    'train.finetune_loss': 'masked',
    'train.batch_size': 4,
    'train.checkpoint_every': 500,
    'train.val_every': 100,
    'train.val_size': 4,

    'imputation.emphasis_factor': 10.0,
    'imputation.emphasis': False,
    'imputation.emphasis_dims': '',
    'imputation.guidance_scale': 0.0,

    'simulation.views': 4,
    'simulation.radius': 5.0,
    'simulation.height': 1.6,
    'simulation.people': 2,
    'simulation.frames': 10,
    'simulation.noise_px': 2.0,
    'simulation.occl_prob': 0.1,
    'simulation.sigma_max': 20.0,
    'simulation.rig': '',
}


class ConfigError(ValueError):
    """Invalid configuration file, key or value."""


class Settings:
    """Environment-derived settings shared by every task."""

    def __init__(self):
        """Initialize settings from the environment."""

        # Logging settings
        self.LOG_LEVEL = os.getenv('MMDM_LOG_LEVEL', 'INFO').upper()
        self.LOG_FILE = os.getenv('MMDM_LOG_FILE', '')

        # Output settings
        self.OUTPUT_DIR = os.getenv('MMDM_OUTPUT_DIR', 'runs')
        self.CHECKPOINT_EVERY = utils.safe_int(
            os.getenv('MMDM_CHECKPOINT_EVERY', str(DEFAULTS['train.checkpoint_every'])), -1)

        # Validation
        self._validate_config()

    def _validate_config(self):
        """Validate configuration values."""
        if self.LOG_LEVEL not in LOG_LEVELS:
            raise ConfigError(f"MMDM_LOG_LEVEL must be one of {LOG_LEVELS}, got '{self.LOG_LEVEL}'")

        if not self.OUTPUT_DIR:
            raise ConfigError("MMDM_OUTPUT_DIR must not be empty")

        if self.CHECKPOINT_EVERY <= 0:
            raise ConfigError("MMDM_CHECKPOINT_EVERY must be a positive integer")

    def __str__(self):
        return f"Settings(log_level={self.LOG_LEVEL}, output_dir='{self.OUTPUT_DIR}')"


@dataclass(frozen=True)
class ImputationConfig:
    """Boundary imputation for in-betweening.

    emphasis_dims are flat indices into one frame's J x d features; empty
    means the root token's slots.
    """

    emphasis_factor: float = 10.0
    emphasis: bool = False
    emphasis_dims: Tuple[int, ...] = ()
    guidance_scale: float = 0.0
    goal: str = 'l2'

    def __post_init__(self):
        if not self.emphasis_factor > 0:
            raise ConfigError(f"emphasis_factor must be > 0, got {self.emphasis_factor}")
        if self.guidance_scale < 0:
            raise ConfigError(f"guidance_scale must be >= 0, got {self.guidance_scale}")
        if self.goal != 'l2':
            raise ConfigError(f"only the 'l2' goal is supported, got '{self.goal}'")
        if any(i < 0 for i in self.emphasis_dims):
            raise ConfigError(f"emphasis_dims must be non-negative, got {self.emphasis_dims}")

    def emphasis_scale(self, J: int, d: int) -> np.ndarray:
        """Diagonal of M as a J x d array (all ones when emphasis is off)."""
        scale = np.ones(J * d)
        if not self.emphasis:
            return scale.reshape(J, d)
        dims = self.emphasis_dims or tuple(range(d))
        if max(dims) >= J * d:
            raise ConfigError(f"emphasis_dims {dims} exceed the {J * d} features of a frame")
        scale[list(dims)] = self.emphasis_factor
        return scale.reshape(J, d)


@dataclass(frozen=True)
class TrainConfig:
    model: str = 'completion'
    mode: str = 'diffusion'
    steps: int = 2000
    finetune_steps: int = 500
    finetune_loss: str = 'masked'
    batch_size: int = 4
    checkpoint_every: int = 500
    val_every: int = 100
    val_size: int = 4
    lr: float = 1e-5
    weight_decay: float = 0.01


@dataclass(frozen=True)
class SimulationConfig:
    views: int = 4
    radius: float = 5.0
    height: float = 1.6
    people: int = 2
    frames: int = 10
    noise_px: float = 2.0
    occl_prob: float = 0.1
    sigma_max: float = 20.0
    rig: str = ''


@dataclass(frozen=True)
class DatasetConfig:
    size: int = 16
    joints: int = 17
    kinds: Tuple[str, ...] = SYNTH_KINDS
    augment: bool = True
    noise_std: float = 0.05


@dataclass(frozen=True)
class TaskConfig:
    task: str
    seed: int
    network: NetworkConfig
    schedule_K: int
    schedule_kind: str
    refine_K: int
    objective: str
    ddim_stride: int
    seq_len: int
    pretrain_mask: MaskingConfig
    finetune_mask: MaskingConfig
    split: SegmentSplit
    imputation: ImputationConfig
    train: TrainConfig
    simulation: SimulationConfig
    dataset: DatasetConfig
    output_dir: str = ''
    checkpoint: str = ''
    input: str = ''
    gt: str = ''
    pred: str = ''
    label: str = ''
    metrics: Tuple[str, ...] = ()
    values: Dict[str, Any] = field(default_factory=dict, compare=False)

    def config_hash(self) -> str:
        """md5 of the canonical JSON of the flat key map, output location excluded."""
        return utils.config_hash({k: v for k, v in self.values.items() if k not in RUN_LOCAL_KEYS})

    def metadata(self) -> Dict[str, Any]:
        return {'config_hash': self.config_hash(), 'seed': self.seed, 'task': self.task}

    def masking_for(self, phase: str, seed: int) -> MaskingConfig:
        base = self.pretrain_mask if phase == 'pretrain' else self.finetune_mask
        return MaskingConfig(base.pattern, base.ratio, base.omega, seed, base.force_invisible)

    def __str__(self):
        return f"TaskConfig(task={self.task}, seed={self.seed}, K={self.schedule_K}, hash={self.config_hash()})"


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            if isinstance(value, str) and value.strip().lower() not in ('true', 'false', '1', '0', 'yes', 'no'):
                raise ValueError(value)
            return utils.parse_bool(value)
        if isinstance(default, int):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if isinstance(value, (list, tuple)):
            return ','.join(str(v) for v in value)
        if not isinstance(value, str):
            raise ValueError(value)
        return value
    except (TypeError, ValueError) as e:
        raise ConfigError(f"'{key}' expects {type(default).__name__}, got {value!r}") from e


def _split_names(text: str) -> Tuple[str, ...]:
    return tuple(name.strip() for name in text.split(',') if name.strip())


def _parse_dims(text: str) -> Tuple[int, ...]:
    dims = []
    for token in _split_names(text):
        if '-' in token:
            low, high = token.split('-', 1)
            dims.extend(range(int(low), int(high) + 1))
        else:
            dims.append(int(token))
    return tuple(dims)


def read_config_file(path: str) -> Dict[str, Any]:
    """Raw dotted-key map from a JSON config file."""
    try:
        text = read_text(path)
    except IoError as e:
        raise ConfigError(str(e)) from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno}: {e.msg}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object of dotted keys")
    return data


def _network(values: Dict[str, Any], explicit: set) -> NetworkConfig:
    fields_ = {name: values[f'network.{name}'] for name in _NETWORK_DEFAULTS}
    preset = values['network.preset']
    if preset:
        chosen = {name: v for name, v in fields_.items() if f'network.{name}' in explicit}
        return NetworkConfig.preset(preset, **chosen)
    return NetworkConfig(**fields_)


def build_task_config(values: Dict[str, Any], explicit: Optional[set] = None) -> TaskConfig:
    """Assemble a TaskConfig from a complete, coerced flat map."""
    explicit = explicit or set()
    if values['task'] not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got '{values['task']}'")
    if values['objective'] not in OBJECTIVES:
        raise ConfigError(f"objective must be one of {OBJECTIVES}, got '{values['objective']}'")
    if values['schedule.kind'] not in SCHEDULE_KINDS:
        raise ConfigError(f"schedule.kind must be one of {SCHEDULE_KINDS}, got '{values['schedule.kind']}'")
    if values['train.mode'] not in TRAIN_MODES:
        raise ConfigError(f"train.mode must be one of {TRAIN_MODES}, got '{values['train.mode']}'")
    if values['train.finetune_loss'] not in ('masked', 'full'):
        raise ConfigError(f"train.finetune_loss must be 'masked' or 'full', got '{values['train.finetune_loss']}'")
    for key in ('schedule.K', 'schedule.refine_K', 'seq_len', 'train.batch_size', 'train.checkpoint_every',
                'train.val_every', 'simulation.views', 'simulation.frames', 'dataset.joints'):
        if values[key] < 1:
            raise ConfigError(f"'{key}' must be >= 1, got {values[key]}")
    for key in ('ddim_stride', 'train.steps', 'train.finetune_steps', 'dataset.size', 'train.val_size',
                'simulation.people'):
        if values[key] < 0:
            raise ConfigError(f"'{key}' must be >= 0, got {values[key]}")
    if not 0.0 <= values['simulation.occl_prob'] <= 1.0:
        raise ConfigError(f"simulation.occl_prob must lie in [0, 1], got {values['simulation.occl_prob']}")
    if values['simulation.noise_px'] < 0 or values['dataset.noise_std'] < 0:
        raise ConfigError("noise levels must be >= 0")
    if values['simulation.sigma_max'] <= 0:
        raise ConfigError("simulation.sigma_max must be > 0")
    kinds = _split_names(values['dataset.kinds'])
    unknown_kinds = sorted(set(kinds) - set(SYNTH_KINDS))
    if not kinds or unknown_kinds:
        raise ConfigError(f"dataset.kinds must name kinds from {SYNTH_KINDS}, got {values['dataset.kinds']!r}")

    try:
        network = _network(values, explicit)
        pretrain = MaskingConfig(values['masking.pretrain.pattern'], values['masking.pretrain.ratio'],
                                 values['masking.omega'], values['seed'], values['masking.force_invisible'])
        finetune = MaskingConfig(values['masking.finetune.pattern'], values['masking.finetune.ratio'],
                                 values['masking.omega'], values['seed'], values['masking.force_invisible'])
        split = SegmentSplit(values['split.preceding'], values['split.transition'], values['split.succeeding'])
        imputation = ImputationConfig(values['imputation.emphasis_factor'], values['imputation.emphasis'],
                                      _parse_dims(values['imputation.emphasis_dims']),
                                      values['imputation.guidance_scale'])
    except (NetworkError, MaskingError, MotionDataError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from e
    if values['optimizer.lr'] <= 0 or values['optimizer.weight_decay'] < 0:
        raise ConfigError(f"optimizer.lr must be > 0 and weight_decay >= 0, got {values['optimizer.lr']}, "
                          f"{values['optimizer.weight_decay']}")
    if values['train.model'] == 'inbetween' and (network.in_dim, network.out_dim) != (TOKEN_DIM, TOKEN_DIM):
        raise ConfigError(f"in-betweening works on {JOINT_TOKENS} x {TOKEN_DIM} joint-level tokens; "
                          f"set network.in_dim and network.out_dim to {TOKEN_DIM}")
    if values['train.model'] not in ('completion', 'inbetween'):
        raise ConfigError(f"train.model must be 'completion' or 'inbetween', got '{values['train.model']}'")

    train = TrainConfig(
        model=values['train.model'],
        mode=values['train.mode'],
        steps=values['train.steps'],
        finetune_steps=values['train.finetune_steps'],
        finetune_loss=values['train.finetune_loss'],
        batch_size=values['train.batch_size'],
        checkpoint_every=values['train.checkpoint_every'],
        val_every=values['train.val_every'],
        val_size=values['train.val_size'],
        lr=values['optimizer.lr'],
        weight_decay=values['optimizer.weight_decay'],
    )
    simulation = SimulationConfig(
        views=values['simulation.views'],
        radius=values['simulation.radius'],
        height=values['simulation.height'],
        people=values['simulation.people'],
        frames=values['simulation.frames'],
        noise_px=values['simulation.noise_px'],
        occl_prob=values['simulation.occl_prob'],
        sigma_max=values['simulation.sigma_max'],
        rig=values['simulation.rig'],
    )
    dataset = DatasetConfig(
        size=values['dataset.size'],
        joints=values['dataset.joints'],
        kinds=kinds,
        augment=values['dataset.augment'],
        noise_std=values['dataset.noise_std'],
    )
    return TaskConfig(
        task=values['task'],
        seed=values['seed'],
        network=network,
        schedule_K=values['schedule.K'],
        schedule_kind=values['schedule.kind'],
        refine_K=values['schedule.refine_K'],
        objective=values['objective'],
        ddim_stride=values['ddim_stride'],
        seq_len=values['seq_len'],
        pretrain_mask=pretrain,
        finetune_mask=finetune,
        split=split,
        imputation=imputation,
        train=train,
        simulation=simulation,
        dataset=dataset,
        output_dir=values['output_dir'],
        checkpoint=values['checkpoint'],
        input=values['input'],
        gt=values['gt'],
        pred=values['pred'],
        label=values['label'],
        metrics=_split_names(values['metrics']),
        values=dict(values),
    )


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None,
                settings: Optional[Settings] = None) -> TaskConfig:
    """DEFAULTS, then environment settings, then the file, then overrides (None values skipped)."""
    values = dict(DEFAULTS)
    explicit = set()
    if settings is not None:
        values['train.checkpoint_every'] = settings.CHECKPOINT_EVERY
        values['output_dir'] = settings.OUTPUT_DIR

    layers = [read_config_file(path) if path else {}, {k: v for k, v in (overrides or {}).items() if v is not None}]
    for layer in layers:
        unknown = sorted(set(layer) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown configuration keys: {unknown}")
        for key, value in layer.items():
            values[key] = _coerce(key, value)
            explicit.add(key)

    cfg = build_task_config(values, explicit)
    logger.debug(f"Loaded {cfg}")
    return cfg


def default_config(**overrides) -> TaskConfig:
    """TaskConfig from DEFAULTS; keyword names use '__' for '.' (network__depth=1)."""
    return load_config(overrides={key.replace('__', '.'): value for key, value in overrides.items()})
