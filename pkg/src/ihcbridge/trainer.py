"""Two-stage training.

Stage 1 fits the duplex <-> IF CycleGAN (G_AC, G_CA against D_C, D_A) with
stain guidance, eosin absence on monoplex inputs and the supervised
separation terms. Stage 2 freezes it, builds the synthetic monoplex target
``G_CA(restain(G_AC(x_A)))`` per batch and fits G_AB against D_B with the
L1 guidance term.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from . import losses as L
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint, state_checksum
from .data_io import PatchDataset, UnpairedBatch, sample_batch
from .networks import (
    Discriminator,
    DiscriminatorSpec,
    Generator,
    GeneratorSpec,
    build_discriminator,
    build_generator,
)
from .stain_space import (
    DEFAULT_ALPHA,
    DEFAULT_STAIN_MATRIX,
    od_to_concentrations,
    rgb_to_od,
    validate_alpha,
    validate_stain_matrix,
)

logger = logging.getLogger(__name__)

LOG_NAME = "log.jsonl"


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: int = 1
    steps: int = 3000
    batch_size: int = 4
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    betas: Tuple[float, float] = (0.5, 0.999)
    optimizer: str = "adam"
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    alpha: List[List[float]] = field(default_factory=lambda: DEFAULT_ALPHA.tolist())
    stain_matrix: List[List[float]] = field(default_factory=lambda: DEFAULT_STAIN_MATRIX.tolist())
    fluorescence_gain: float = 1.0
    seed: int = 0
    checkpoint_interval: int = 1000
    out_dir: str = "runs"
    labeled_fraction: float = 0.25
    flips: bool = False
    gen_width: int = 32
    gen_levels: int = 2
    gen_res_blocks: int = 3
    disc_width: int = 32
    disc_blocks: int = 3
    single_thread: bool = True

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = L.LossWeights(**self.weights)
        self.betas = tuple(self.betas)
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_g < 0 or self.lr_d < 0:
            raise ValueError("learning rates must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be >= 1")
        validate_alpha(self.alpha)
        validate_stain_matrix(self.stain_matrix)

    @property
    def generator_spec(self) -> GeneratorSpec:
        return GeneratorSpec(width=self.gen_width, levels=self.gen_levels, res_blocks=self.gen_res_blocks)

    @property
    def discriminator_spec(self) -> DiscriminatorSpec:
        return DiscriminatorSpec(width=self.disc_width, blocks=self.disc_blocks)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**values)


def set_single_thread() -> None:
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def restain_tensor(x: torch.Tensor, alpha) -> torch.Tensor:
    """Channel remap of an NCHW stain batch, clamped at zero."""
    a = torch.as_tensor(np.array(alpha), dtype=x.dtype)
    return torch.clamp(torch.einsum("oi,nihw->nohw", a, x), min=0.0)


class AnalyticDeconvolution(nn.Module):
    """Brightfield RGB -> IF emission by classical colour deconvolution.

    Stands in for G_AC in sanity checks and supplies the pseudo-IF target
    of the stain-guidance term.
    """

    def __init__(self, stain_matrix=DEFAULT_STAIN_MATRIX, gain: float = 1.0):
        super().__init__()
        self.m = validate_stain_matrix(stain_matrix)
        self.gain = gain

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        arr = x.detach().cpu().double().numpy().transpose(0, 2, 3, 1)
        arr = np.clip(arr, 0.0, 1.0)
        conc = np.stack([od_to_concentrations(rgb_to_od(p), self.m) for p in arr])
        out = np.clip(conc * self.gain, 0.0, 1.0)
        return torch.from_numpy(out.transpose(0, 3, 1, 2).copy()).to(x.dtype)


class AnalyticReconstruction(nn.Module):
    """IF emission -> brightfield RGB via the Beer-Lambert forward model."""

    def __init__(self, stain_matrix=DEFAULT_STAIN_MATRIX, gain: float = 1.0):
        super().__init__()
        self.m = torch.from_numpy(np.array(validate_stain_matrix(stain_matrix)))
        self.gain = gain

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        conc = x.double() / self.gain
        od = torch.einsum("nshw,sc->nchw", conc, self.m)
        return torch.clamp(torch.pow(10.0, -od), 0.0, 1.0).to(x.dtype)


@torch.no_grad()
def compute_f_ab(x_a: torch.Tensor, g_ac: Callable, g_ca: Callable, alpha=DEFAULT_ALPHA) -> torch.Tensor:
    """Synthetic monoplex target ``G_CA(restain(G_AC(x_A), alpha))``, without gradients."""
    if x_a.ndim != 4 or x_a.shape[1] != 3:
        raise ValueError(f"expected an N x 3 x H x W batch, got {tuple(x_a.shape)}")
    modes = [(m, m.training) for m in (g_ac, g_ca) if isinstance(m, nn.Module)]
    for m, _ in modes:
        m.eval()
    try:
        synthetic_if = g_ac(x_a)
        if synthetic_if.shape != x_a.shape:
            raise ValueError(f"G_AC changed the shape: {tuple(synthetic_if.shape)}")
        out = g_ca(restain_tensor(synthetic_if, validate_alpha(alpha)))
        if out.shape != x_a.shape:
            raise ValueError(f"G_CA changed the shape: {tuple(out.shape)}")
    finally:
        for m, was in modes:
            m.train(was)
    return torch.clamp(out, 0.0, 1.0).detach()


def _set_requires_grad(modules, flag: bool) -> None:
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(flag)


def _tensor(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a.transpose(0, 3, 1, 2)))


class _StageTrainer:
    stage: int
    live: Tuple[str, ...] = ()

    def __init__(self, config: TrainConfig):
        self.config = config
        self.step_index = 0
        self.rng = np.random.default_rng(np.random.SeedSequence([config.seed, self.stage]))
        self.nets: Dict[str, nn.Module] = {}
        self.optimizers: Dict[str, torch.optim.Optimizer] = {}

    def _optimizer(self, params, lr: float) -> torch.optim.Optimizer:
        if self.config.optimizer == "sgd":
            return torch.optim.SGD(params, lr=lr)
        return torch.optim.Adam(params, lr=lr, betas=self.config.betas)

    def _seed(self, k: int) -> int:
        return int(np.random.SeedSequence([self.config.seed, self.stage, 100 + k]).generate_state(1)[0])

    # checkpointing -------------------------------------------------------
    def state(self) -> dict:
        nets = {}
        for name, net in self.nets.items():
            kind = "generator" if isinstance(net, Generator) else "discriminator"
            nets[name] = {"type": kind, "spec": asdict(net.spec), "state": net.state_dict()}
        return {
            "kind": f"stage{self.stage}",
            "step": self.step_index,
            "networks": nets,
            "optimizers": {k: o.state_dict() for k, o in self.optimizers.items()},
            "config": self.config.to_dict(),
            "rng": {"numpy": self.rng.bit_generator.state, "torch": torch.get_rng_state()},
            "extra": self._extra_state(),
        }

    def _extra_state(self) -> dict:
        return {}

    def load_state(self, ckpt: dict) -> None:
        if ckpt.get("kind") != f"stage{self.stage}":
            raise CheckpointError(f"expected a stage{self.stage} checkpoint, got {ckpt.get('kind')!r}")
        for name, net in self.nets.items():
            net.load_state_dict(ckpt["networks"][name]["state"])
        for name, opt in self.optimizers.items():
            opt.load_state_dict(ckpt["optimizers"][name])
        self.rng.bit_generator.state = ckpt["rng"]["numpy"]
        torch.set_rng_state(ckpt["rng"]["torch"])
        self.step_index = int(ckpt["step"])

    def save(self, root: Path) -> Path:
        return save_checkpoint(self.state(), root / f"step_{self.step_index:06d}")

    # loop ----------------------------------------------------------------
    def next_batch(self) -> UnpairedBatch:
        raise NotImplementedError

    def train_step(self, batch: UnpairedBatch) -> Tuple[L.LossReport, float]:
        raise NotImplementedError

    def run(self, out_dir=None, steps: Optional[int] = None) -> Path:
        """Train up to ``steps`` total steps, logging every step and checkpointing periodically.

        Returns the path of the final checkpoint.
        """
        cfg = self.config
        if cfg.single_thread:
            set_single_thread()
        steps = cfg.steps if steps is None else steps
        root = Path(out_dir if out_dir is not None else cfg.out_dir) / f"stage{self.stage}"
        root.mkdir(parents=True, exist_ok=True)
        log_path = root / LOG_NAME
        _truncate_log(log_path, self.step_index)
        last = None
        with open(log_path, "a") as log:
            while self.step_index < steps:
                report, d_loss = self.train_step(self.next_batch())
                self.step_index += 1
                record = report.to_record(self.step_index)
                record["discriminator"] = d_loss
                log.write(json.dumps(record) + "\n")
                log.flush()
                if self.step_index % cfg.checkpoint_interval == 0 or self.step_index == steps:
                    last = self.save(root)
        if last is None:  # nothing trained in this call
            last = self.save(root)
        return last


def _truncate_log(path: Path, step: int) -> None:
    if not path.exists():
        return
    keep = [ln for ln in path.read_text().splitlines() if ln and json.loads(ln)["step"] <= step]
    path.write_text("".join(ln + "\n" for ln in keep))


def read_log(path) -> List[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / LOG_NAME
    return [json.loads(ln) for ln in path.read_text().splitlines() if ln]


def _check_finite(report: L.LossReport, step: int) -> None:
    if not math.isfinite(report.total):
        raise DivergenceError(f"generator loss is {report.total} at step {step + 1}: {report.terms}")


class Stage1Trainer(_StageTrainer):
    """Duplex (A) <-> IF (C) CycleGAN with stain constraints; B feeds only eosin absence."""

    stage = 1

    def __init__(self, config: TrainConfig, data_a: PatchDataset, data_b: PatchDataset, data_c: PatchDataset):
        super().__init__(config)
        self.data = (data_a, data_b, data_c)
        g, d = config.generator_spec, config.discriminator_spec
        self.nets = {
            "g_ac": build_generator(g, self._seed(0)),
            "g_ca": build_generator(g, self._seed(1)),
            "d_a": build_discriminator(d, self._seed(2)),
            "d_c": build_discriminator(d, self._seed(3)),
        }
        n = self.nets
        self.optimizers = {
            "g": self._optimizer(list(n["g_ac"].parameters()) + list(n["g_ca"].parameters()), config.lr_g),
            "d": self._optimizer(list(n["d_a"].parameters()) + list(n["d_c"].parameters()), config.lr_d),
        }
        self.pseudo_if = AnalyticDeconvolution(config.stain_matrix, config.fluorescence_gain)

    def next_batch(self) -> UnpairedBatch:
        cfg = self.config
        use_labels = cfg.weights.lambda_sup_e > 0 or cfg.weights.lambda_sup_d > 0
        return sample_batch(self.data, cfg.batch_size, self.rng,
                            cfg.labeled_fraction if use_labels else 0.0, cfg.flips)

    def generator_terms(self, x_a, x_b, x_c, mask_e=None, mask_d=None) -> Dict[str, torch.Tensor]:
        n = self.nets
        variant = self.config.weights.separation_variant
        fake_c = n["g_ac"](x_a)
        fake_a = n["g_ca"](x_c)
        terms = {
            "adversarial": L.lsgan_generator_loss(n["d_c"](fake_c)) + L.lsgan_generator_loss(n["d_a"](fake_a)),
            "cycle": L.cycle_loss(x_a, n["g_ca"](fake_c)) + L.cycle_loss(x_c, n["g_ac"](fake_a)),
            "stain_guidance": L.stain_guidance_loss(fake_c, self.pseudo_if(x_a)),
            "eosin_absence": L.eosin_absence_loss(n["g_ac"](x_b)),
        }
        if mask_e is not None and mask_e.any():
            terms["sup_e"] = L.supervised_separation_loss(fake_c, mask_e, "E", variant)
        if mask_d is not None and mask_d.any():
            terms["sup_d"] = L.supervised_separation_loss(fake_c, mask_d, "D", variant)
        return terms

    def train_step(self, batch: UnpairedBatch) -> Tuple[L.LossReport, float]:
        n = self.nets
        x_a, x_b, x_c = _tensor(batch.x_A), _tensor(batch.x_B), _tensor(batch.x_C)
        discs = (n["d_a"], n["d_c"])

        with torch.no_grad():
            fake_c = n["g_ac"](x_a)
            fake_a = n["g_ca"](x_c)
        d_loss = L.lsgan_discriminator_loss(n["d_c"](x_c), n["d_c"](fake_c)) + L.lsgan_discriminator_loss(
            n["d_a"](x_a), n["d_a"](fake_a)
        )
        self.optimizers["d"].zero_grad()
        d_loss.backward()
        self.optimizers["d"].step()

        _set_requires_grad(discs, False)
        terms = self.generator_terms(
            x_a, x_b, x_c, torch.from_numpy(batch.mask_e), torch.from_numpy(batch.mask_d)
        )
        report = L.total_generator_loss(terms, self.config.weights, 1)
        _check_finite(report, self.step_index)
        self.optimizers["g"].zero_grad()
        report.objective.backward()
        self.optimizers["g"].step()
        _set_requires_grad(discs, True)
        return report, float(d_loss.detach())


class Stage2Trainer(_StageTrainer):
    """G_AB against D_B plus L1 guidance toward the frozen stage-1 target."""

    stage = 2

    def __init__(self, config: TrainConfig, data_a: PatchDataset, data_b: PatchDataset, stage1: dict):
        super().__init__(config)
        self.data = (data_a, data_b, None)
        self.frozen = {name: network_from_checkpoint(stage1, name) for name in ("g_ac", "g_ca")}
        for net in self.frozen.values():
            net.eval()
            _set_requires_grad([net], False)
        self.frozen_checksums = {k: state_checksum(v) for k, v in self.frozen.items()}
        self.nets = {
            "g_ab": build_generator(self.config.generator_spec, self._seed(0)),
            "d_b": build_discriminator(self.config.discriminator_spec, self._seed(1)),
        }
        self.optimizers = {
            "g": self._optimizer(self.nets["g_ab"].parameters(), config.lr_g),
            "d": self._optimizer(self.nets["d_b"].parameters(), config.lr_d),
        }

    def _extra_state(self) -> dict:
        frozen = {}
        for name, net in self.frozen.items():
            frozen[name] = {"type": "generator", "spec": asdict(net.spec), "state": net.state_dict()}
        return {"frozen": frozen, "frozen_checksums": self.frozen_checksums}

    def next_batch(self) -> UnpairedBatch:
        return sample_batch(self.data, self.config.batch_size, self.rng, 0.0, self.config.flips)

    def target(self, x_a: torch.Tensor) -> torch.Tensor:
        return compute_f_ab(x_a, self.frozen["g_ac"], self.frozen["g_ca"], self.config.alpha)

    def train_step(self, batch: UnpairedBatch) -> Tuple[L.LossReport, float]:
        g, d = self.nets["g_ab"], self.nets["d_b"]
        x_a, x_b = _tensor(batch.x_A), _tensor(batch.x_B)
        target = self.target(x_a)

        with torch.no_grad():
            fake_b = g(x_a)
        d_loss = L.lsgan_discriminator_loss(d(x_b), d(fake_b))
        self.optimizers["d"].zero_grad()
        d_loss.backward()
        self.optimizers["d"].step()

        _set_requires_grad([d], False)
        fake_b = g(x_a)
        terms = {"adversarial": L.lsgan_generator_loss(d(fake_b)), "guidance": L.guidance_loss(fake_b, target)}
        report = L.total_generator_loss(terms, self.config.weights, 2)
        _check_finite(report, self.step_index)
        self.optimizers["g"].zero_grad()
        report.objective.backward()
        self.optimizers["g"].step()
        _set_requires_grad([d], True)
        return report, float(d_loss.detach())


def network_from_checkpoint(ckpt: dict, name: str) -> nn.Module:
    """Rebuild one network (live or frozen) from a loaded checkpoint."""
    entry = ckpt["networks"].get(name) or ckpt.get("extra", {}).get("frozen", {}).get(name)
    if entry is None:
        raise CheckpointError(f"checkpoint has no network {name!r}")
    if entry["type"] == "generator":
        net = Generator(GeneratorSpec(**entry["spec"]))
    elif entry["type"] == "discriminator":
        net = Discriminator(DiscriminatorSpec(**entry["spec"]))
    else:
        raise CheckpointError(f"unknown network type {entry['type']!r}")
    net.load_state_dict(entry["state"])
    net.eval()
    return net


def train_stage1(config: TrainConfig, datasets, resume_from=None, out_dir=None) -> Path:
    """Run stage 1 on ``datasets = (A, B, C)``; returns the final checkpoint path."""
    trainer = Stage1Trainer(config, *datasets)
    if resume_from is not None:
        trainer.load_state(load_checkpoint(resume_from))
    return trainer.run(out_dir)


def train_stage2(config: TrainConfig, datasets, stage1_ckpt, resume_from=None, out_dir=None) -> Path:
    """Run stage 2 on ``datasets = (A, B)`` with a frozen stage-1 checkpoint."""
    stage1 = load_checkpoint(stage1_ckpt) if not isinstance(stage1_ckpt, dict) else stage1_ckpt
    if stage1.get("kind") != "stage1":
        raise CheckpointError("stage 2 needs a stage-1 checkpoint")
    trainer = Stage2Trainer(config, datasets[0], datasets[1], stage1)
    if resume_from is not None:
        trainer.load_state(load_checkpoint(resume_from))
    return trainer.run(out_dir)
