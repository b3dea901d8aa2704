"""Joint training of the shared generator and the per-image latents.

Plain SGD, no momentum or weight decay.  Each step forwards the batch
latents (per-image ConvNets for the main model, free maps or vectors for
the baselines), pushes them through the generator in train mode, takes one
gradient step on the batch's latent parameters and on the generator, and
clamps every boxed parameter back into [-B, B].

The shuffle order is derived from (seed, epoch) so interrupted runs can be
reproduced exactly; a NaN or Inf loss aborts with a pointer to the last
checkpoint written.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import data, losses, nets
from . import tensor as T
from .nets import GloLatent, LatentCodec
from .tensor import Tape, TensorMap

VARIANTS = ("lcm", "glo_map", "glo_vector")


class NumericsError(RuntimeError):
    """Loss became NaN or Inf during optimization."""


@dataclass
class TrainConfig:
    epochs: int = 100
    steps: Optional[int] = None       # overall step budget; trumps epochs when set
    batch_size: int = 8
    lr_latent: float = 1.0
    lr_generator: float = 1.0
    lr_glo: float = 10.0
    seed: int = 0
    box: float = 0.01
    pyramid_levels: Optional[int] = None
    checkpoint_every: int = 0         # epochs between checkpoints; 0 = only final
    preset: str = "toy32"
    vector_dim: int = 64              # glo_vector only

    def __post_init__(self):
        # zero is allowed so frozen no-op runs stay expressible
        if min(self.lr_latent, self.lr_generator, self.lr_glo) < 0:
            raise ValueError("learning rates must not be negative")
        if self.box <= 0:
            raise ValueError("box bound must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


@dataclass
class TrainState:
    variant: str
    generator: nets.GeneratorModel
    latents: list                     # LatentCodec | GloLatent per image
    noise: TensorMap
    latent_arch: Optional[nets.ArchSpec]
    config: TrainConfig
    epoch: int = 0
    loss_history: list = field(default_factory=list)   # (epoch, split, loss)
    step_losses: list = field(default_factory=list)
    last_checkpoint: Optional[str] = None

    def latent_blocks(self, indices) -> list:
        blocks = []
        for i in indices:
            lat = self.latents[i]
            blocks += lat.phi if isinstance(lat, LatentCodec) else [lat.value]
        return blocks


def _latent_lr(config: TrainConfig, variant: str) -> float:
    return config.lr_latent if variant == "lcm" else config.lr_glo


def _generator_lr(config: TrainConfig, variant: str) -> float:
    return config.lr_generator if variant == "lcm" else config.lr_glo


def _pyramid_spec(config: TrainConfig, h: int, w: int) -> losses.PyramidSpec:
    j = config.pyramid_levels or losses.default_levels(h, w)
    return losses.PyramidSpec(j)


def forward_batch(state: TrainState, indices, mode: str, tape: Optional[Tape]) -> TensorMap:
    """Latent paths for the given images, concatenated and run through the generator."""
    zs = []
    for i in indices:
        lat = state.latents[i]
        if isinstance(lat, LatentCodec):
            zs.append(nets.forward_latent(lat, state.noise, tape=tape))
        else:
            zs.append(T.as_tensor(lat.value, tape=tape))
    z = zs[0] if len(zs) == 1 else T.concat_batch(zs, tape=tape)
    return nets.forward_generator(state.generator, z, mode=mode, tape=tape)


def train_step(state: TrainState, indices, images: np.ndarray,
               config: TrainConfig) -> float:
    """One SGD step on a minibatch; returns the batch loss."""
    indices = list(indices)
    if any(i < 0 or i >= len(state.latents) for i in indices):
        raise IndexError(f"minibatch indices out of range: {indices}")
    tape = Tape()
    x_hat = forward_batch(state, indices, "train", tape)
    target = TensorMap(images[indices])
    spec = _pyramid_spec(config, target.shape[2], target.shape[3])
    loss = losses.combined_loss(x_hat, target, spec, tape=tape)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericsError(
            f"non-finite loss at step {len(state.step_losses)}; "
            f"last good checkpoint: {state.last_checkpoint or 'none written'}")
    lat_blocks = state.latent_blocks(indices)
    gen_blocks = state.generator.theta
    for b in lat_blocks + gen_blocks:
        b.zero_grad()
    T.backward(tape, loss)
    lat_lr = _latent_lr(config, state.variant)
    gen_lr = _generator_lr(config, state.variant)
    for b in lat_blocks:
        b.value.data -= lat_lr * b.grad.data
        b.project()
    for b in gen_blocks:
        b.value.data -= gen_lr * b.grad.data
    state.step_losses.append(value)
    return value


def init_state(n_images: int, config: TrainConfig, variant: str) -> TrainState:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    latent_arch, gen_arch = nets.toy_arch_templates(config.preset)
    noise = nets.init_noise(latent_arch.input_shape, seed=config.seed)
    vdim = config.vector_dim if variant == "glo_vector" else None
    generator = nets.init_generator(gen_arch, seed=config.seed + 1, vector_dim=vdim)
    latents = []
    for i in range(n_images):
        if variant == "lcm":
            latents.append(nets.init_latent_codec(
                latent_arch, seed=[config.seed, 2, i], name=f"phi{i}", box=config.box))
        elif variant == "glo_map":
            latents.append(nets.init_glo_latent(gen_arch, seed=[config.seed, 2, i],
                                                kind="map", name=f"z{i}"))
        else:
            latents.append(nets.init_glo_latent(gen_arch, seed=[config.seed, 2, i],
                                                kind="vector", dim=config.vector_dim,
                                                name=f"z{i}"))
    return TrainState(variant=variant, generator=generator, latents=latents,
                      noise=noise, latent_arch=latent_arch if variant == "lcm" else None,
                      config=config)


def train(images: np.ndarray, config: TrainConfig, variant: str = "lcm",
          out_dir=None, manifest_hash: Optional[str] = None,
          latent_ids: Optional[list] = None) -> TrainState:
    """Optimize the joint objective over shuffled minibatches.

    ``images`` is the stacked dataset (N, C, H, W) in [0, 1].  Returns the
    final state; when ``out_dir`` is given, also writes the loss-history CSV
    and checkpoints there.
    """
    n = int(images.shape[0])
    if n == 0:
        raise ValueError("empty dataset")
    state = init_state(n, config, variant)
    if images.shape[2:] != state.generator.arch.output_shape[1:] or \
            images.shape[1] != state.generator.arch.output_shape[0]:
        raise T.ShapeError(
            f"dataset images {images.shape[1:]} do not match generator output "
            f"{state.generator.arch.output_shape}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    ids = latent_ids if latent_ids is not None else list(range(n))

    budget = config.steps
    steps_done = 0
    epoch = 0
    while True:
        if budget is None and epoch >= config.epochs:
            break
        if budget is not None and steps_done >= budget:
            break
        order = np.random.default_rng([config.seed, 7, epoch]).permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            if budget is not None and steps_done >= budget:
                break
            batch = order[start:start + config.batch_size]
            epoch_losses.append(train_step(state, batch, images, config))
            steps_done += 1
        state.epoch = epoch + 1
        state.loss_history.append((state.epoch, "train", float(np.mean(epoch_losses))))
        if out is not None and config.checkpoint_every and \
                state.epoch % config.checkpoint_every == 0:
            ck = out / f"checkpoint_ep{state.epoch:05d}.lcmk"
            _save_state(state, ck, manifest_hash, ids)
        epoch += 1

    if out is not None:
        ck = out / "model.lcmk"
        _save_state(state, ck, manifest_hash, ids)
        write_loss_csv(state.loss_history, out / "loss_history.csv")
    return state


def _save_state(state: TrainState, path, manifest_hash, ids) -> None:
    latents = {ids[i]: lat for i, lat in enumerate(state.latents)}
    data.save_checkpoint(path, state.generator, state.noise, latents,
                         variant=state.variant, config=vars(state.config).copy(),
                         latent_arch=state.latent_arch, manifest_hash=manifest_hash)
    state.last_checkpoint = str(path)


def write_loss_csv(history, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "split", "loss"])
        for epoch, split, loss in history:
            w.writerow([epoch, split, f"{loss:.17g}"])


def eval_loss(state: TrainState, images: np.ndarray, config: TrainConfig,
              mode: str = "eval", unseen: bool = False,
              fit_steps: int = 500, fit_seed: int = 123) -> float:
    """Mean combined loss over a split without parameter updates.

    For unseen images the latents are first fitted by restoration under an
    identity degradation (full-observation energy); seen images reuse the
    trained latents.
    """
    n = int(images.shape[0])
    if n == 0:
        raise ValueError("empty split")
    spec = _pyramid_spec(config, images.shape[2], images.shape[3])
    if unseen:
        if state.variant != "lcm":
            raise ValueError("unseen-image evaluation is defined for the lcm variant")
        from . import restore as restore_mod
        from .degrade import DegradationSpec
        total = 0.0
        for i in range(n):
            full = DegradationSpec(
                "inpaint", mask=np.ones(images.shape[2:], dtype=images.dtype))
            cfg = restore_mod.RestoreConfig(steps=fit_steps, seed=fit_seed + i)
            res = restore_mod.restore_manifold(
                state.generator, state.latent_arch, state.noise,
                TensorMap(images[i:i + 1]), full, cfg)
            total += losses.combined_loss(res.image, TensorMap(images[i:i + 1]),
                                          spec).item()
        return total / n
    total = 0.0
    batches = 0
    for start in range(0, n, config.batch_size):
        idx = list(range(start, min(start + config.batch_size, n)))
        x_hat = forward_batch(state, idx, mode, tape=None)
        total += losses.combined_loss(x_hat, TensorMap(images[idx]), spec).item()
        batches += 1
    return total / batches
