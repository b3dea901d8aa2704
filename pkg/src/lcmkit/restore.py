"""Image restoration by optimizing a latent against a degradation energy.

Three modes share one loop: "manifold" runs projected SGD on the fresh
parameters of a latent ConvNet (the box constraint is active at every
step), "zspace" drops that constraint and descends directly on the latent
map, and "glo" descends on a free map or vector latent, as appropriate for
a generator trained that way.

The generator and its normalization statistics are frozen throughout, and
the best-energy iterate is returned rather than the last one, since plain
SGD at high learning rates oscillates around minima.
"""

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import metrics, nets
from . import tensor as T
from .degrade import DegradationSpec, apply_degradation, energy
from .nets import GloLatent
from .tensor import ParamBlock, Tape, TensorMap

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 100


class DivergenceError(RuntimeError):
    """Energy exploded or became non-finite; carries the trace so far."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class RestoreConfig:
    steps: int = 2000
    lr: Optional[float] = None        # None: 1.0 for manifold/zspace, 10.0 for glo
    seed: int = 0
    latent_penalty: float = 0.0
    init: str = "random"              # "random" | "provided"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.lr is not None and self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.latent_penalty < 0:
            raise ValueError("latent penalty must be >= 0")


@dataclass
class RestorationResult:
    image: TensorMap
    energy_trace: list
    best_energy: float
    final_known_mse: float
    wall_clock: float
    mode: str


def _effective_spec(spec: DegradationSpec, cfg: RestoreConfig) -> DegradationSpec:
    lam = spec.latent_penalty if spec.latent_penalty > 0 else cfg.latent_penalty
    if lam == spec.latent_penalty:
        return spec
    return DegradationSpec(kind=spec.kind, mask=spec.mask, factor=spec.factor,
                           latent_penalty=lam)


def _known_fit_mse(image: TensorMap, y: TensorMap, spec: DegradationSpec) -> float:
    """Data-fit error of the restored image against the evidence."""
    if spec.kind == "inpaint":
        return metrics.mse_region(image.data, y.data, spec.mask, "known")
    degraded = apply_degradation(image.data, spec)
    d = degraded - y.data
    return float(np.mean(d * d))


def _descend(model: nets.GeneratorModel, y: TensorMap, spec: DegradationSpec,
             cfg: RestoreConfig, lr: float, blocks: list,
             make_z: Callable[[Tape], TensorMap], mode: str) -> RestorationResult:
    spec = _effective_spec(spec, cfg)
    t0 = time.perf_counter()
    trace = []
    best_e = np.inf
    best_img = None
    bad_streak = 0
    model.set_frozen(True)
    try:
        for _ in range(cfg.steps):
            tape = Tape()
            z = make_z(tape)
            znorm = None
            if spec.latent_penalty > 0:
                znorm = T.sum_all(T.square(z, tape=tape), tape=tape)
            x = nets.forward_generator(model, z, mode="eval", tape=tape)
            e = energy(x, y, spec, latent_norm_sq=znorm, tape=tape)
            val = e.item()
            if not np.isfinite(val):
                raise DivergenceError(f"non-finite energy at step {len(trace)}", trace)
            trace.append(val)
            if val < best_e:
                best_e = val
                best_img = x.copy()
            floor = max(trace[0], 1e-12)
            bad_streak = bad_streak + 1 if val > DIVERGENCE_FACTOR * floor else 0
            if bad_streak >= DIVERGENCE_PATIENCE:
                raise DivergenceError(
                    f"energy above {DIVERGENCE_FACTOR}x the initial value for "
                    f"{DIVERGENCE_PATIENCE} consecutive steps", trace)
            for b in blocks:
                b.zero_grad()
            T.backward(tape, e)
            for b in blocks:
                b.value.data -= lr * b.grad.data
                b.project()
    finally:
        model.set_frozen(False)
    return RestorationResult(
        image=best_img, energy_trace=trace, best_energy=best_e,
        final_known_mse=_known_fit_mse(best_img, y, spec),
        wall_clock=time.perf_counter() - t0, mode=mode)


def restore_manifold(model: nets.GeneratorModel, latent_arch: nets.ArchSpec,
                     noise: TensorMap, y: TensorMap, spec: DegradationSpec,
                     cfg: RestoreConfig, init_codec=None) -> RestorationResult:
    """Projected SGD over fresh latent-net parameters, generator frozen."""
    if cfg.init == "provided":
        if init_codec is None:
            raise ValueError("init='provided' needs an initial codec")
        codec = init_codec
    else:
        codec = nets.init_latent_codec(latent_arch, seed=[cfg.seed, 11], name="restore")
    lr = cfg.lr if cfg.lr is not None else 1.0

    def make_z(tape):
        return nets.forward_latent(codec, noise, tape=tape)

    return _descend(model, y, spec, cfg, lr, codec.phi, make_z, "manifold")


def restore_zspace(model: nets.GeneratorModel, latent_arch: nets.ArchSpec,
                   noise: TensorMap, y: TensorMap, spec: DegradationSpec,
                   cfg: RestoreConfig) -> RestorationResult:
    """Direct descent on the latent map, initialized on the manifold.

    The starting point is f_phi0(s) for a fresh boxed phi0, i.e. the same
    distribution the manifold restoration starts from, but the constraint
    is dropped afterwards.
    """
    codec = nets.init_latent_codec(latent_arch, seed=[cfg.seed, 11], name="restore")
    z0 = nets.forward_latent(codec, noise, tape=None)
    zp = ParamBlock("z", z0.data.copy())
    lr = cfg.lr if cfg.lr is not None else 1.0

    def make_z(tape):
        return T.as_tensor(zp, tape=tape)

    return _descend(model, y, spec, cfg, lr, [zp], make_z, "zspace")


def restore_glo(model: nets.GeneratorModel, y: TensorMap, spec: DegradationSpec,
                cfg: RestoreConfig, kind: str = "map", dim: Optional[int] = None,
                template: Optional[GloLatent] = None) -> RestorationResult:
    """Descent on a free map or vector latent for a GLO-trained generator."""
    if template is not None:
        latent = template
    else:
        if kind == "vector" and dim is None:
            dim = model.vector_dim
        latent = nets.init_glo_latent(model.arch, seed=[cfg.seed, 11],
                                      kind=kind, dim=dim, name="restore.z")
    lr = cfg.lr if cfg.lr is not None else 10.0

    def make_z(tape):
        return T.as_tensor(latent.value, tape=tape)

    return _descend(model, y, spec, cfg, lr, [latent.value], make_z,
                    f"glo_{latent.kind}")
