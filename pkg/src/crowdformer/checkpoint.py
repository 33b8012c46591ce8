"""Single-file checkpoint container.

Layout: a UTF-8 text header followed by raw little-endian float64 array
data. The header records the format version, the semantic config
fingerprint, the full config text (so a checkpoint alone suffices to
rebuild the model), training step, source dataset id, RNG state, and one
``<name>\t<shape>`` line per array in blob order. Parameters come first in
model order, then first moments, then second moments, which makes
save -> load -> save byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, parse_config, serialize_config

MAGIC = "crowdformer-checkpoint v1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    fingerprint: str
    step: int
    source_dataset: str
    rng_state: dict | None
    config: RunConfig
    arrays: "dict[str, np.ndarray]"  # insertion order == blob order


def _rng_state_json(rng: np.random.Generator | None) -> str:
    if rng is None:
        return "null"
    return json.dumps(rng.bit_generator.state, sort_keys=True, separators=(",", ":"))


def restore_rng(state: dict | None) -> np.random.Generator:
    if state is None:
        raise CheckpointError("checkpoint carries no RNG state")
    bitgen_cls = getattr(np.random, state["bit_generator"])
    gen = np.random.Generator(bitgen_cls())
    gen.bit_generator.state = state
    return gen


def save_checkpoint(
    path: str | Path,
    model,
    config: RunConfig,
    optimizer=None,
    rng: np.random.Generator | None = None,
    source_dataset: str = "-",
    step: int | None = None,
) -> None:
    """Serialize model parameters (and optimizer state, when given) to one file."""
    arrays = {f"param/{name}": p.data for name, p in model.named_params().items()}
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
        if step is None:
            step = optimizer.step_count
    ckpt = Checkpoint(
        fingerprint=config.fingerprint(),
        step=int(step or 0),
        source_dataset=source_dataset,
        rng_state=rng.bit_generator.state if rng is not None else None,
        config=config,
        arrays=arrays,
    )
    write_checkpoint(ckpt, path)


def write_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    header = [MAGIC]
    header.append(f"fingerprint={ckpt.fingerprint}")
    header.append(f"step={ckpt.step}")
    header.append(f"source_dataset={ckpt.source_dataset}")
    rng_json = (
        json.dumps(ckpt.rng_state, sort_keys=True, separators=(",", ":"))
        if ckpt.rng_state is not None
        else "null"
    )
    header.append(f"rng={rng_json}")
    header.append("config-begin")
    header.append(serialize_config(ckpt.config).rstrip("\n"))
    header.append("config-end")
    header.append(f"arrays={len(ckpt.arrays)}")
    for name, arr in ckpt.arrays.items():
        shape = ",".join(str(s) for s in arr.shape)
        header.append(f"{name}\t{shape}")
    header.append("end-header")
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in ckpt.arrays.values())
    Path(path).write_bytes("\n".join(header).encode("utf-8") + b"\n" + blob)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    marker = b"\nend-header\n"
    cut = raw.find(marker)
    if cut < 0 or not raw.startswith(MAGIC.encode("utf-8")):
        raise CheckpointError(f"{path}: not a {MAGIC} file")
    lines = raw[:cut].decode("utf-8").split("\n")
    blob = raw[cut + len(marker) :]

    def take(prefix: str, line: str) -> str:
        if not line.startswith(prefix):
            raise CheckpointError(f"{path}: malformed header, expected {prefix!r}")
        return line[len(prefix) :]

    fingerprint = take("fingerprint=", lines[1])
    step = int(take("step=", lines[2]))
    source_dataset = take("source_dataset=", lines[3])
    rng_state = json.loads(take("rng=", lines[4]))
    if lines[5] != "config-begin":
        raise CheckpointError(f"{path}: malformed header, missing config block")
    cfg_end = lines.index("config-end")
    config = parse_config("\n".join(lines[6:cfg_end]))
    n_arrays = int(take("arrays=", lines[cfg_end + 1]))
    array_lines = lines[cfg_end + 2 :]
    if len(array_lines) != n_arrays:
        raise CheckpointError(f"{path}: header lists {len(array_lines)} arrays, expected {n_arrays}")

    if config.fingerprint() != fingerprint:
        raise CheckpointError(f"{path}: fingerprint does not match the embedded config")

    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for line in array_lines:
        name, _, shape_text = line.partition("\t")
        shape = tuple(int(s) for s in shape_text.split(",") if s)
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(blob):
            raise CheckpointError(f"{path}: truncated array data for {name!r}")
        arrays[name] = np.frombuffer(blob[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes after arrays")
    return Checkpoint(
        fingerprint=fingerprint,
        step=step,
        source_dataset=source_dataset,
        rng_state=rng_state,
        config=config,
        arrays=arrays,
    )


def apply_to_model(ckpt: Checkpoint, model) -> None:
    """Copy checkpoint parameters into the model, validating the name set."""
    params = model.named_params()
    stored = {n[len("param/") :]: a for n, a in ckpt.arrays.items() if n.startswith("param/")}
    missing = sorted(set(params) - set(stored))
    extra = sorted(set(stored) - set(params))
    if missing or extra:
        raise CheckpointError(
            f"parameter set mismatch: missing {missing[:3]}..., unexpected {extra[:3]}..."
            if len(missing) + len(extra) > 6
            else f"parameter set mismatch: missing {missing}, unexpected {extra}"
        )
    for name, p in params.items():
        if stored[name].shape != p.data.shape:
            raise CheckpointError(
                f"parameter {name!r}: checkpoint shape {stored[name].shape} != model shape {p.data.shape}"
            )
        p.data = stored[name].copy()


def optimizer_arrays(ckpt: Checkpoint) -> dict:
    return {n: a for n, a in ckpt.arrays.items() if n.startswith(("adam_m/", "adam_v/"))}
