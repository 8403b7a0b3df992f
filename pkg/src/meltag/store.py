"""Weight container format and the registry of shipped model names.

The on-disk format is deliberately boring: a magic string, a fixed-width
decimal manifest length, a line-oriented UTF-8 manifest describing the config
and every tensor in order, then all tensor payloads concatenated as
little-endian float32. Everything a loader needs is recomputable from the
manifest, so truncation and corruption are detectable before any tensor is
handed to a model.
"""

from __future__ import annotations

import io
import os

import numpy as np

from .dsp import DspConfig
from .errors import (
    BadMagicError,
    ConfigInvalidError,
    ManifestCorruptError,
    PayloadTruncatedError,
    ShapeMismatchError,
    UnknownModelError,
)
from .network import Model, ModelConfig, build_model
from .rng import fnv1a64

MAGIC = b"MCN1"
_LEN_DIGITS = 10  # manifest byte length, zero-padded decimal

FORMAT_VERSION = 1

MTT_TAGS = (
    "guitar", "classical", "slow", "techno", "strings", "drums", "electronic",
    "rock", "fast", "piano", "ambient", "beat", "violin", "vocal", "synth",
    "female", "indian", "opera", "male", "singing", "vocals", "no vocals",
    "harpsichord", "loud", "quiet", "flute", "woman", "male vocal", "no vocal",
    "pop", "soft", "sitar", "solo", "man", "classic", "choir", "voice",
    "new age", "dance", "male voice", "female vocal", "beats", "harp",
    "cello", "no voice", "weird", "country", "metal", "female voice", "choral",
)

MSD_TAGS = (
    "rock", "pop", "alternative", "indie", "electronic", "female vocalists",
    "dance", "00s", "alternative rock", "jazz", "beautiful", "metal",
    "chillout", "male vocalists", "classic rock", "soul", "indie rock",
    "mellow", "electronica", "80s", "folk", "90s", "chill", "instrumental",
    "punk", "oldies", "blues", "hard rock", "ambient", "acoustic",
    "experimental", "female vocalist", "guitar", "hip-hop", "70s", "party",
    "country", "easy listening", "sexy", "catchy", "funk", "electro",
    "heavy metal", "progressive rock", "60s", "rnb", "indie pop",
    "sad", "house", "happy",
)


def _registry_configs() -> dict[str, tuple[ModelConfig, tuple[str, ...]]]:
    base = dict(dsp=DspConfig())
    return {
        "MTT_musicnn": (ModelConfig(family="musicnn", backend="temporal_pooling", **base), MTT_TAGS),
        "MSD_musicnn": (ModelConfig(family="musicnn", backend="attention", **base), MSD_TAGS),
        "MSD_musicnn_big": (
            ModelConfig(
                family="musicnn",
                backend="attention",
                midend_channels=512,
                penultimate_units=500,
                **base,
            ),
            MSD_TAGS,
        ),
        "MTT_vgg": (ModelConfig(family="vgg", **base), MTT_TAGS),
        "MSD_vgg": (ModelConfig(family="vgg", **base), MSD_TAGS),
    }


MODEL_NAMES = tuple(_registry_configs())


def registry_names() -> tuple[str, ...]:
    return MODEL_NAMES


def registry_get(name: str) -> tuple[ModelConfig, tuple[str, ...]]:
    configs = _registry_configs()
    if name not in configs:
        known = ", ".join(MODEL_NAMES)
        raise UnknownModelError(f"unknown model {name!r}; known models: {known}")
    return configs[name]


def load_registry_model(name: str) -> Model:
    """Deterministically materialized weights for a registry name.

    The seed is derived from the model name, so every process that asks for
    e.g. 'MTT_musicnn' gets bit-identical parameters.
    """
    config, tags = registry_get(name)
    return build_model(config, init="random", seed=fnv1a64(name.encode()), tags=tags)


# --- serialization ------------------------------------------------------------


def _config_lines(config: ModelConfig) -> list[str]:
    d = config.dsp
    lines = [
        f"format_version {FORMAT_VERSION}",
        f"family {config.family}",
        f"backend {config.backend}",
        f"n_tags {config.n_tags}",
        f"sample_rate {d.sample_rate}",
        f"fft_size {d.fft_size}",
        f"hop_size {d.hop_size}",
        f"n_mels {d.n_mels}",
        f"fmin {d.fmin!r}",
        f"fmax {d.fmax!r}",
        f"log_offset {d.log_offset!r}",
        f"patch_frames {d.patch_frames}",
        f"patch_hop_frames {d.patch_hop_frames}",
        "timbral_filter_heights " + " ".join(repr(f) for f in config.timbral_filter_heights),
        f"timbral_channels {config.timbral_channels}",
        "temporal_filter_lengths " + " ".join(str(n) for n in config.temporal_filter_lengths),
        f"temporal_channels {config.temporal_channels}",
        f"midend_channels {config.midend_channels}",
        f"midend_kernel {config.midend_kernel}",
        f"penultimate_units {config.penultimate_units}",
        "vgg_block_channels " + " ".join(str(c) for c in config.vgg_block_channels),
        "vgg_pool_shapes " + " ".join(f"{h}x{w}" for h, w in config.vgg_pool_shapes),
    ]
    return lines


def _parse_config(fields: dict[str, str]) -> ModelConfig:
    try:
        dsp = DspConfig(
            sample_rate=int(fields["sample_rate"]),
            fft_size=int(fields["fft_size"]),
            hop_size=int(fields["hop_size"]),
            n_mels=int(fields["n_mels"]),
            fmin=float(fields["fmin"]),
            fmax=float(fields["fmax"]),
            log_offset=float(fields["log_offset"]),
            patch_frames=int(fields["patch_frames"]),
            patch_hop_frames=int(fields["patch_hop_frames"]),
        )
        pools = tuple(
            (int(h), int(w))
            for h, w in (p.split("x") for p in fields["vgg_pool_shapes"].split())
        )
        return ModelConfig(
            family=fields["family"],
            backend=fields["backend"],
            n_tags=int(fields["n_tags"]),
            dsp=dsp,
            timbral_filter_heights=tuple(float(f) for f in fields["timbral_filter_heights"].split()),
            timbral_channels=int(fields["timbral_channels"]),
            temporal_filter_lengths=tuple(int(n) for n in fields["temporal_filter_lengths"].split()),
            temporal_channels=int(fields["temporal_channels"]),
            midend_channels=int(fields["midend_channels"]),
            midend_kernel=int(fields["midend_kernel"]),
            penultimate_units=int(fields["penultimate_units"]),
            vgg_block_channels=tuple(int(c) for c in fields["vgg_block_channels"].split()),
            vgg_pool_shapes=pools,
        )
    except KeyError as exc:
        raise ManifestCorruptError(f"manifest missing field {exc.args[0]!r}") from None
    except (ValueError, ConfigInvalidError) as exc:
        raise ManifestCorruptError(f"manifest config invalid: {exc}") from None


def save_model(model: Model, path: str | os.PathLike) -> None:
    """Write config, tags, and every tensor as little-endian float32."""
    lines = _config_lines(model.config)
    for tag in model.tags:
        lines.append(f"tag {tag}")
    tensors = model.tensors()
    payload = io.BytesIO()
    for key, tensor in tensors.items():
        shape = " ".join(str(n) for n in tensor.shape)
        lines.append(f"tensor {key} {shape}")
        payload.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
    manifest = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"{len(manifest):0{_LEN_DIGITS}d}".encode("ascii"))
        fh.write(manifest)
        fh.write(payload.getvalue())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise PayloadTruncatedError(f"file ends inside {what} ({len(data)} of {n} bytes)")
    return data


def load_model(path: str | os.PathLike) -> Model:
    """Read a container back; raises a named error for each failure mode.

    BadMagicError        not this format at all
    ManifestCorruptError header fields unreadable or inconsistent
    PayloadTruncatedError file shorter than the manifest promises
    ShapeMismatchError   tensor list disagrees with the config algebra
    """
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
        length_field = _read_exact(fh, _LEN_DIGITS, "the manifest length field")
        if not length_field.isdigit():
            raise ManifestCorruptError(f"manifest length field {length_field!r} is not decimal")
        manifest_bytes = _read_exact(fh, int(length_field), "the manifest")
        try:
            manifest = manifest_bytes.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ManifestCorruptError(f"manifest is not UTF-8: {exc}") from None

        fields: dict[str, str] = {}
        tags: list[str] = []
        tensor_specs: list[tuple[str, tuple[int, ...]]] = []
        for lineno, line in enumerate(manifest.splitlines(), start=1):
            if not line.strip():
                continue
            key, _, rest = line.partition(" ")
            if key == "tag":
                tags.append(rest)
            elif key == "tensor":
                name, _, shape_part = rest.partition(" ")
                try:
                    shape = tuple(int(n) for n in shape_part.split())
                except ValueError:
                    raise ManifestCorruptError(
                        f"manifest line {lineno}: bad tensor shape {shape_part!r}"
                    ) from None
                tensor_specs.append((name, shape))
            elif key in fields:
                raise ManifestCorruptError(f"manifest line {lineno}: duplicate field {key!r}")
            else:
                fields[key] = rest
        if fields.get("format_version") != str(FORMAT_VERSION):
            raise ManifestCorruptError(
                f"unsupported format_version {fields.get('format_version')!r}"
            )
        config = _parse_config(fields)
        if len(tags) != config.n_tags:
            raise ManifestCorruptError(
                f"manifest lists {len(tags)} tags for an n_tags={config.n_tags} config"
            )

        expected = [
            (f"{layer}.{field_name}", shape)
            for layer, tensors in config.layer_shapes().items()
            for field_name, shape in tensors.items()
        ]
        if tensor_specs != expected:
            raise ShapeMismatchError(
                "manifest tensor list does not match the shapes implied by the config"
            )

        values: dict[str, np.ndarray] = {}
        for name, shape in tensor_specs:
            n_bytes = int(np.prod(shape)) * 4
            raw = _read_exact(fh, n_bytes, f"tensor {name}")
            values[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()

    model = build_model(config, init="zeros", tags=tuple(tags))
    model.set_tensors(values)
    return model
