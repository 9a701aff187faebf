"""Binary wire/disk formats: style vectors, model checkpoints, world corpora.

All numeric payloads are little-endian float64. Field-level layouts are
documented in docs/formats.md and must not change without bumping the
version markers below.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ArchConfig, ParamSet
from .spectral import Style

__all__ = [
    "style_to_bytes",
    "style_from_bytes",
    "save_checkpoint",
    "load_checkpoint",
    "export_corpus",
    "load_corpus",
]

_STYLE_HEADER = struct.Struct("<III")  # channels, window_size, reserved flags
CHECKPOINT_MAGIC = b"FSCK"
CHECKPOINT_VERSION = 1


def style_to_bytes(style: Style) -> bytes:
    header = _STYLE_HEADER.pack(style.channels, style.window_size, 0)
    return header + style.values.astype("<f8").tobytes()


def style_from_bytes(blob: bytes) -> Style:
    if len(blob) < _STYLE_HEADER.size:
        raise ValueError("style blob too short for header")
    channels, window, flags = _STYLE_HEADER.unpack_from(blob)
    if flags != 0:
        raise ValueError(f"unsupported style flags {flags}")
    values = np.frombuffer(blob, dtype="<f8", offset=_STYLE_HEADER.size)
    return Style(window_size=window, channels=channels, values=values.copy())


def save_checkpoint(
    path: str | Path, params: ParamSet, velocity: dict[str, np.ndarray] | None = None
) -> None:
    """magic, version byte, u32 header length, JSON header, then raw payloads."""
    names = sorted(params.groups)
    header = {
        "arch": {
            "in_channels": params.arch.in_channels,
            "hidden": params.arch.hidden,
            "classes": params.arch.classes,
        },
        "groups": [{"name": n, "length": int(params.groups[n].shape[0])} for n in names],
        "has_velocity": velocity is not None,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(bytes([CHECKPOINT_VERSION]))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for n in names:
            fh.write(params.groups[n].astype("<f8").tobytes())
        if velocity is not None:
            for n in names:
                fh.write(velocity[n].astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ParamSet, dict[str, np.ndarray] | None]:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a fedstyle checkpoint")
        version = fh.read(1)[0]
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen))
        arch = ArchConfig(**header["arch"])
        groups = {}
        for entry in header["groups"]:
            raw = fh.read(entry["length"] * 8)
            groups[entry["name"]] = np.frombuffer(raw, dtype="<f8").copy()
        velocity = None
        if header["has_velocity"]:
            velocity = {}
            for entry in header["groups"]:
                raw = fh.read(entry["length"] * 8)
                velocity[entry["name"]] = np.frombuffer(raw, dtype="<f8").copy()
    params = ParamSet(arch, groups)
    # A checkpoint may hold a slice (e.g. only the global groups); validate
    # shapes for whichever groups are present.
    sizes = arch.group_sizes()
    for name, vec in groups.items():
        if name in sizes and vec.shape != (sizes[name],):
            raise ValueError(f"group {name!r} has wrong length {vec.shape[0]}")
    return params, velocity


def _write_pair(
    root: Path, stem: str, img: np.ndarray, labels: np.ndarray | None
) -> dict:
    (root / f"{stem}.img").write_bytes(np.ascontiguousarray(img, dtype="<f8").tobytes())
    entry = {"stem": stem, "shape": list(img.shape)}
    if labels is not None:
        (root / f"{stem}.lab").write_bytes(
            np.ascontiguousarray(labels, dtype="<i4").tobytes()
        )
        entry["labels"] = True
    return entry


def export_corpus(world, out_dir: str | Path) -> Path:
    """Flat binary dump of a generated world plus a manifest JSON."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    manifest: dict = {"version": 1, "source": [], "clients": {}, "test": []}
    for i, (img, lab) in enumerate(world.source.items):
        manifest["source"].append(_write_pair(root, f"source_{i:04d}", img, lab))
    for client in world.clients:
        entries = []
        for i, img in enumerate(client.images):
            entries.append(_write_pair(root, f"{client.client_id}_{i:04d}", img, None))
        manifest["clients"][client.client_id] = {
            "domain": client.domain_id,
            "images": entries,
        }
    for i, (img, lab, dom) in enumerate(world.test):
        entry = _write_pair(root, f"test_{i:04d}", img, lab)
        entry["domain"] = dom
        manifest["test"].append(entry)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root / "manifest.json"


def _read_pair(root: Path, entry: dict) -> tuple[np.ndarray, np.ndarray | None]:
    shape = tuple(entry["shape"])
    img = np.frombuffer((root / f"{entry['stem']}.img").read_bytes(), dtype="<f8")
    img = img.reshape(shape).copy()
    labels = None
    if entry.get("labels"):
        labels = np.frombuffer((root / f"{entry['stem']}.lab").read_bytes(), dtype="<i4")
        labels = labels.reshape(shape[:2]).astype(np.int64)
    return img, labels


def load_corpus(corpus_dir: str | Path):
    """Rehydrate a world exported with export_corpus."""
    from .synthdata import ClientData, LabeledSet, World

    root = Path(corpus_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    source = LabeledSet([_read_pair(root, e) for e in manifest["source"]])
    clients = []
    truth = {}
    for cid, info in manifest["clients"].items():
        images = [_read_pair(root, e)[0] for e in info["images"]]
        clients.append(ClientData(client_id=cid, domain_id=info["domain"], images=images))
        truth[cid] = info["domain"]
    test = []
    for e in manifest["test"]:
        img, lab = _read_pair(root, e)
        test.append((img, lab, e["domain"]))
    return World(source=source, clients=clients, test=test, domains=[], truth=truth)
