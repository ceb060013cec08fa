"""Run configuration: presets, JSON loading, dotted-key overrides."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .extract import GridSpec
from .meta import FinetuneConfig, ReptileConfig
from .sdfmodel import IGRConfig
from .skinning import SkinningLossWeights, SkinningTrainConfig
from .synthbody import DatasetConfig


@dataclass
class EvalConfig:
    n_gt_points: int = 8000
    samples_per_area: float = 4000.0
    eikonal_samples: int = 10000
    filter_threshold_cm: float = 2.0
    max_frames: int = 0  # 0 = all validation frames

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass
class RunConfig:
    seed: int = 0
    preset: str = "desk"
    run_dir: str = "runs/default"
    sdf_hidden: tuple = (64, 64, 64)
    sdf_omega0: float = 30.0
    code_dim: int = 64
    hyper_hidden: int = 64
    encoder_variant: str = "hierarchical"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    skinning: SkinningTrainConfig = field(default_factory=SkinningTrainConfig)
    meta_sdf: ReptileConfig = field(default_factory=ReptileConfig)
    meta_hyper: ReptileConfig = field(default_factory=ReptileConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    igr: IGRConfig = field(default_factory=IGRConfig)
    grid: GridSpec = field(default_factory=GridSpec)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def sdf_spec(self):
        from .nets import MLPSpec

        return MLPSpec.siren(3, tuple(self.sdf_hidden), 1, self.sdf_omega0)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "preset": self.preset,
            "run_dir": self.run_dir,
            "sdf_hidden": list(self.sdf_hidden),
            "sdf_omega0": self.sdf_omega0,
            "code_dim": self.code_dim,
            "hyper_hidden": self.hyper_hidden,
            "encoder_variant": self.encoder_variant,
            "dataset": self.dataset.to_json(),
            "skinning": self.skinning.to_json(),
            "meta_sdf": self.meta_sdf.to_json(),
            "meta_hyper": self.meta_hyper.to_json(),
            "finetune": self.finetune.to_json(),
            "igr": self.igr.to_json(),
            "grid": self.grid.to_json(),
            "eval": self.eval.to_json(),
        }


def desk_preset() -> dict:
    """CPU-scale defaults preserving the full algorithm structure."""
    return RunConfig(
        preset="desk",
        sdf_hidden=(64, 64, 64),
        dataset=DatasetConfig(
            n_meta_subjects=2,
            frames_per_meta_subject=20,
            n_holdout_subjects=2,
            finetune_frames=8,
            validation_frames=10,
            n_points=5000,
            depth_resolution=250,
        ),
        skinning=SkinningTrainConfig(iters=5000, lr=1e-3, batch_frames=2, points_per_frame=384, k_cond=384),
        meta_sdf=ReptileConfig(
            meta_lr=5e-4, inner_lr=5e-4, max_iterations=400, inner_steps=4,
            task_batch=3, inner_points=256,
        ),
        meta_hyper=ReptileConfig(
            meta_lr=2e-4, inner_lr=2e-4, epochs=60, inner_steps=6, inner_points=256,
            minibatch_frames=4, max_task_frames=20,
        ),
        finetune=FinetuneConfig(epochs=256, lr=2e-4, minibatch_frames=12, points_per_frame=512),
        grid=GridSpec(64),
    ).to_dict()


def paper_preset() -> dict:
    """Full-scale hyperparameters (GPU-scale budgets; not for the test suite)."""
    return RunConfig(
        preset="paper",
        sdf_hidden=(256, 256, 256, 256, 256),
        dataset=DatasetConfig(
            n_meta_subjects=10,
            frames_per_meta_subject=200,
            n_holdout_subjects=4,
            finetune_frames=64,
            validation_frames=64,
            n_points=5000,
            depth_resolution=250,
        ),
        skinning=SkinningTrainConfig(iters=200000, lr=1e-4, batch_frames=12, points_per_frame=512, k_cond=5000),
        meta_sdf=ReptileConfig(
            meta_lr=1e-5, inner_lr=1e-4, max_iterations=160000, inner_steps=24,
            task_batch=3, inner_points=5000,
        ),
        meta_hyper=ReptileConfig(
            meta_lr=1e-6, inner_lr=1e-6, epochs=50, inner_steps=24, inner_points=5000,
            minibatch_frames=12, max_task_frames=64,
        ),
        finetune=FinetuneConfig(epochs=256, lr=1e-6, minibatch_frames=12, points_per_frame=512),
        grid=GridSpec(128),
    ).to_dict()


PRESETS = {"desk": desk_preset, "paper": paper_preset}

_SECTIONS = {
    "dataset": DatasetConfig,
    "skinning": SkinningTrainConfig,
    "meta_sdf": ReptileConfig,
    "meta_hyper": ReptileConfig,
    "finetune": FinetuneConfig,
    "igr": IGRConfig,
    "grid": GridSpec,
    "eval": EvalConfig,
}
_SCALARS = (
    "seed", "preset", "run_dir", "sdf_hidden", "sdf_omega0",
    "code_dim", "hyper_hidden", "encoder_variant",
)


def _merge(base: dict, extra: dict, path: str = "") -> dict:
    out = dict(base)
    for key, value in extra.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a table")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def _apply_override(data: dict, spec: str) -> None:
    if "=" not in spec:
        raise ConfigError(f"override {spec!r} must look like section.key=value")
    key, _, raw = spec.partition("=")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings allowed
    node = data
    parts = key.strip().split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config section in override: {key}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key in override: {key}")
    node[parts[-1]] = value


def _build_section(cls, data: dict, name: str):
    data = dict(data)
    try:
        if cls is SkinningTrainConfig and isinstance(data.get("loss_weights"), list):
            data["loss_weights"] = SkinningLossWeights(*data["loss_weights"])
        if cls is GridSpec:
            return GridSpec(data["resolution"], tuple(data["bounds"]))
        if cls is DatasetConfig:
            return DatasetConfig.from_json(data)
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {name} config: {exc}") from exc


def load_config(path=None, preset: str | None = None, overrides=(), seed=None, run_dir=None) -> RunConfig:
    """Resolve preset -> file -> overrides -> flags into one RunConfig."""
    file_data = {}
    if path is not None:
        try:
            file_data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    preset_name = preset or file_data.get("preset", "desk")
    if preset_name not in PRESETS:
        raise ConfigError(f"unknown preset {preset_name!r}")
    data = PRESETS[preset_name]()
    data = _merge(data, file_data)
    if seed is not None:
        data["seed"] = seed
    # one seed drives every stage unless the file pinned a stage seed
    for section in ("dataset", "skinning", "meta_sdf", "meta_hyper", "finetune"):
        if "seed" not in file_data.get(section, {}):
            data[section]["seed"] = data["seed"]
    for spec in overrides:
        _apply_override(data, spec)
    if run_dir is not None:
        data["run_dir"] = run_dir

    kwargs = {k: data[k] for k in _SCALARS}
    kwargs["sdf_hidden"] = tuple(kwargs["sdf_hidden"])
    for name, cls in _SECTIONS.items():
        kwargs[name] = _build_section(cls, data[name], name)
    cfg = RunConfig(**kwargs)
    if cfg.encoder_variant not in ("quat", "hierarchical"):
        raise ConfigError(f"unknown encoder variant {cfg.encoder_variant!r}")
    return cfg
