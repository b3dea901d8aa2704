"""Image and dataset ingestion plus checkpoint persistence.

PNG in and out through Pillow (8-bit, values mapped to [0, 1]), dataset
manifests as JSON whose entry order defines the latent index, and a small
little-endian binary checkpoint: magic, version, a length-prefixed JSON
header describing architectures and blob layout, then raw float32 blobs in
declaration order.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from . import nets
from . import tensor as T
from .nets import ArchSpec, GeneratorModel, GloLatent, LatentCodec
from .tensor import ParamBlock, TensorMap

MAGIC = b"LCMK"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# images


def load_image(path, target_shape) -> TensorMap:
    """Decode an 8-bit PNG to a (1, C, H, W) tensor in [0, 1].

    Resizing to the target is anisotropic bilinear: both axes scale
    independently, no cropping.
    """
    c, h, w = target_shape
    try:
        img = Image.open(path)
        img.load()
    except Exception as e:
        raise IOError(f"cannot decode image {path}: {e}") from e
    img = img.convert("RGB" if c == 3 else "L")
    if img.size != (w, h):
        img = img.resize((w, h), Image.BILINEAR)
    arr = np.asarray(img, dtype=T.default_dtype()) / T.default_dtype().type(255)
    if c == 1:
        arr = arr[:, :, None]
    return TensorMap(np.ascontiguousarray(arr.transpose(2, 0, 1)[None]))


def save_image(x, path) -> None:
    """Write a (C, H, W) or (1, C, H, W) tensor in [0, 1] as an 8-bit PNG.

    Quantization is round-half-up; out-of-range values clamp, never wrap.
    """
    arr = x.data if isinstance(x, TensorMap) else np.asarray(x)
    if arr.ndim == 4:
        arr = arr[0]
    q = np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    if q.shape[0] == 1:
        Image.fromarray(q[0], mode="L").save(path, format="PNG")
    else:
        Image.fromarray(q.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# manifests


@dataclass
class DatasetManifest:
    """Ordered image list; the position of an entry is its latent index."""

    root: str
    target_shape: tuple
    entries: list = field(default_factory=list)   # [(id, relative path), ...]
    resize: str = "anisotropic-bilinear"

    def __post_init__(self):
        ids = [e[0] for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest ids must be unique")

    def to_json(self) -> str:
        return json.dumps({
            "root": self.root,
            "target_shape": list(self.target_shape),
            "resize": self.resize,
            "entries": [{"id": i, "path": p} for i, p in self.entries],
        }, indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        d = json.loads(Path(path).read_text())
        return cls(root=d["root"], target_shape=tuple(d["target_shape"]),
                   entries=[(e["id"], e["path"]) for e in d["entries"]],
                   resize=d["resize"])

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def load_images(self) -> list:
        root = Path(self.root)
        return [load_image(root / p, self.target_shape) for _, p in self.entries]


def build_manifest(src_dir, target_shape) -> tuple:
    """Scan a directory for decodable PNGs; returns (manifest, skipped count)."""
    src = Path(src_dir)
    files = sorted(p for p in src.iterdir() if p.is_file())
    if not files:
        raise ValueError(f"no files in {src_dir}")
    entries, skipped = [], 0
    for p in files:
        try:
            with Image.open(p) as img:
                img.verify()
        except Exception:
            skipped += 1
            continue
        entries.append((p.stem, p.name))
    if not entries:
        raise ValueError(f"no decodable images in {src_dir}")
    return DatasetManifest(root=str(src), target_shape=tuple(target_shape),
                           entries=entries), skipped


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class CheckpointData:
    """Everything load_checkpoint reconstructs."""

    variant: str
    generator: GeneratorModel
    noise: TensorMap
    latents: dict                 # id -> LatentCodec | GloLatent
    latent_arch: Optional[ArchSpec]
    config: dict
    manifest_hash: Optional[str]
    latent_ids: list


def _blob_specs(generator, noise, latents, latent_ids):
    blobs = [("noise", noise.data)]
    for b in generator.theta:
        blobs.append((b.name, b.value.data))
    for i, st in enumerate(generator.norm_stats):
        if st is not None:
            blobs.append((f"norm.{i}.mean", st.mean))
            blobs.append((f"norm.{i}.var", st.var))
    for lid in latent_ids:
        lat = latents[lid]
        if isinstance(lat, LatentCodec):
            for k, b in enumerate(lat.phi):
                blobs.append((f"lat.{lid}.{k}", b.value.data))
        else:
            blobs.append((f"lat.{lid}.z", lat.value.value.data))
    return blobs


def save_checkpoint(path, generator: GeneratorModel, noise: TensorMap,
                    latents: dict, variant: str, config: Optional[dict] = None,
                    latent_arch: Optional[ArchSpec] = None,
                    manifest_hash: Optional[str] = None) -> None:
    latent_ids = list(latents.keys())
    blobs = _blob_specs(generator, noise, latents, latent_ids)
    header = {
        "variant": variant,
        "vector_dim": generator.vector_dim,
        "generator_arch": generator.arch.to_dict(),
        "latent_arch": latent_arch.to_dict() if latent_arch is not None else None,
        "noise_shape": list(noise.shape),
        "config": config or {},
        "manifest_hash": manifest_hash,
        "latent_ids": latent_ids,
        "latent_kinds": {str(k): ("codec" if isinstance(v, LatentCodec) else v.kind)
                         for k, v in latents.items()},
        "blobs": [{"name": n, "shape": list(a.shape)} for n, a in blobs],
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(hdr)))
        f.write(hdr)
        for _, arr in blobs:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path) -> CheckpointData:
    dt = T.default_dtype()
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise CheckpointError("bad magic: not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", _read_exact(f, 4, "header length"))
        try:
            header = json.loads(_read_exact(f, hlen, "header").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"corrupt header: {e}") from e
        arrays = {}
        for spec in header["blobs"]:
            shape = tuple(spec["shape"])
            n = int(np.prod(shape)) if shape else 1
            raw = _read_exact(f, 4 * n, f"blob {spec['name']}")
            arrays[spec["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(dt)

    gen_arch = ArchSpec.from_dict(header["generator_arch"])
    latent_arch = (ArchSpec.from_dict(header["latent_arch"])
                   if header["latent_arch"] else None)
    generator = nets.init_generator(gen_arch, seed=0, vector_dim=header["vector_dim"])
    for b in generator.theta:
        b.value.data[...] = arrays[b.name]
        b.grad.data[...] = 0
    for i, st in enumerate(generator.norm_stats):
        if st is not None:
            st.mean[...] = arrays[f"norm.{i}.mean"]
            st.var[...] = arrays[f"norm.{i}.var"]
    noise = TensorMap(arrays["noise"])
    latents = {}
    for lid in header["latent_ids"]:
        kind = header["latent_kinds"][str(lid)]
        if kind == "codec":
            codec = nets.init_latent_codec(latent_arch, seed=0, name=f"phi{lid}")
            for k, b in enumerate(codec.phi):
                b.value.data[...] = arrays[f"lat.{lid}.{k}"]
                b.grad.data[...] = 0
            latents[lid] = codec
        else:
            latents[lid] = GloLatent(kind=kind,
                                     value=ParamBlock("z", arrays[f"lat.{lid}.z"]))
    return CheckpointData(
        variant=header["variant"], generator=generator, noise=noise,
        latents=latents, latent_arch=latent_arch, config=header["config"],
        manifest_hash=header["manifest_hash"], latent_ids=header["latent_ids"])


# ---------------------------------------------------------------------------
# synthetic toy data


def _bilinear_matrix(out: int, src: int) -> np.ndarray:
    m = np.zeros((out, src))
    for i in range(out):
        s = min(max((i + 0.5) * src / out - 0.5, 0.0), src - 1.0)
        k = int(np.floor(s))
        t = s - k
        m[i, k] += 1.0 - t
        if k + 1 < src:
            m[i, k + 1] += t
    return m


def synthetic_images(n: int, size: int, seed: int) -> np.ndarray:
    """Smooth random RGB images in [0, 1], shape (n, 3, size, size).

    Each image is a random low-resolution color field upsampled bilinearly,
    which gives the kind of large-scale structure the toy models can fit.
    """
    rng = np.random.default_rng(seed)
    up = _bilinear_matrix(size, 4)
    imgs = np.empty((n, 3, size, size), dtype=T.default_dtype())
    for i in range(n):
        base = rng.uniform(0.05, 0.95, size=(3, 4, 4))
        imgs[i] = (up @ base @ up.T).astype(T.default_dtype())
    return imgs


def write_synthetic_dataset(out_dir, n: int, size: int, seed: int) -> list:
    """Write the synthetic images as PNGs; returns the file paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(synthetic_images(n, size, seed)):
        p = out / f"img{i:04d}.png"
        save_image(img, p)
        paths.append(p)
    return paths
