"""File formats: visits CSV, VVOL1 volumes, checkpoints, flat config.

VVOL1: ASCII magic line ``VVOL1``, one JSON header line
(``{"dims": [D, H, W], "channels": C, "voxel_size_mm": s}``), then a raw
little-endian float32 payload in channel-major C order.

Checkpoint: one JSON manifest line (format version, config hash, seed,
epoch, ordered parameter names/shapes/partitions, optimizer summary)
followed by the packed little-endian float64 payload in manifest order.
"""

from __future__ import annotations

import csv
import json

import numpy as np

from .errors import ConfigError, DataError
from .longitudinal import Visit

CSV_HEADER = ["patient_id", "study", "month", "age", "sex", "diagnosis",
              "education", "bmi", "apoe4", "cdrsb", "mmse", "adas_cog12",
              "faq", "volume_path"]
_FLOAT_FIELDS = ("month", "age", "education", "bmi", "cdrsb", "mmse",
                 "adas_cog12", "faq")
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# visits CSV


def write_visits_csv(path, visits):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for v in visits:
            row = [v.patient_id, v.study_id, v.month, v.age, v.sex,
                   v.diagnosis, v.education, v.bmi, v.apoe4, v.cdrsb,
                   v.mmse, v.adas_cog12, v.faq, v.volume_ref]
            w.writerow(["" if x is None else x for x in row])


def read_visits_csv(path):
    visits = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise DataError(
                f"bad visits CSV header in {path}: {reader.fieldnames}")
        for i, row in enumerate(reader):
            kw = {}
            for col in CSV_HEADER:
                raw = row[col].strip() if row[col] is not None else ""
                val = None if raw == "" else raw
                if val is not None and col in _FLOAT_FIELDS:
                    try:
                        val = float(val)
                    except ValueError:
                        raise DataError(
                            f"{path} line {i + 2}: non-numeric "
                            f"{col}={raw!r}")
                kw[col] = val
            if kw["patient_id"] is None or kw["month"] is None:
                raise DataError(f"{path} line {i + 2}: missing patient_id "
                                f"or month")
            visits.append(Visit(
                patient_id=kw["patient_id"], study_id=kw["study"],
                month=kw["month"], age=kw["age"], sex=kw["sex"],
                diagnosis=kw["diagnosis"], education=kw["education"],
                bmi=kw["bmi"], apoe4=kw["apoe4"], cdrsb=kw["cdrsb"],
                mmse=kw["mmse"], adas_cog12=kw["adas_cog12"],
                faq=kw["faq"], volume_ref=kw["volume_path"]))
    return visits


# ---------------------------------------------------------------------------
# VVOL1 volumes


def write_vvol(path, volume, voxel_size_mm=1.0):
    vol = np.asarray(volume, dtype=np.float32)
    if vol.ndim == 3:
        vol = vol[None]
    if vol.ndim != 4:
        raise DataError(f"volume must be [C,D,H,W], got {vol.shape}")
    header = {"dims": list(vol.shape[1:]), "channels": vol.shape[0],
              "voxel_size_mm": voxel_size_mm}
    with open(path, "wb") as fh:
        fh.write(b"VVOL1\n")
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(vol).astype("<f4").tobytes())


def read_vvol(path):
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != b"VVOL1\n":
            raise DataError(f"{path}: not a VVOL1 file")
        try:
            header = json.loads(fh.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise DataError(f"{path}: bad VVOL1 header ({e})")
        dims = header["dims"]
        c = header["channels"]
        payload = fh.read()
    n = c * int(np.prod(dims))
    vol = np.frombuffer(payload, dtype="<f4")
    if vol.size != n:
        raise DataError(f"{path}: payload has {vol.size} voxels, header "
                        f"promises {n}")
    return vol.reshape(c, *dims).astype(np.float64), header


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params, config_hash="", seed=0, epoch=0,
                    optimizer_summary="", partitions=None):
    entries = []
    blobs = []
    keep = (sorted(params.partitions) if partitions is None
            else [p for p in sorted(params.partitions) if p in partitions])
    for partition in keep:
        for name in sorted(params.partitions[partition]):
            t = params.partitions[partition][name]
            entries.append({"name": f"{partition}.{name}",
                            "partition": partition,
                            "shape": list(t.data.shape)})
            blobs.append(np.ascontiguousarray(t.data).astype("<f8"))
    buffers = []
    for name in sorted(params.buffers):
        if partitions is not None and name.split(".", 1)[0] not in keep:
            continue
        buffers.append({"name": name,
                        "shape": list(params.buffers[name].shape)})
        blobs.append(np.ascontiguousarray(params.buffers[name])
                     .astype("<f8"))
    manifest = {"format_version": CHECKPOINT_VERSION,
                "config_hash": config_hash, "seed": seed, "epoch": epoch,
                "params": entries, "buffers": buffers,
                "optimizer": optimizer_summary}
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8")
                 + b"\n")
        for b in blobs:
            fh.write(b.tobytes())


def load_checkpoint(path):
    """Returns (manifest, {name: array}, {buffer_name: array})."""
    with open(path, "rb") as fh:
        manifest = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version "
                        f"{manifest.get('format_version')}")
    arrays, buffers = {}, {}
    offset = 0
    flat = np.frombuffer(payload, dtype="<f8")
    for entry in manifest["params"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arrays[entry["name"]] = flat[offset:offset + n].reshape(
            entry["shape"]).astype(np.float64)
        offset += n
    for entry in manifest.get("buffers", []):
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        buffers[entry["name"]] = flat[offset:offset + n].reshape(
            entry["shape"]).astype(np.float64)
        offset += n
    if offset != flat.size:
        raise DataError(f"{path}: checkpoint payload size mismatch")
    return manifest, arrays, buffers


def restore_params(params, arrays, buffers=None, partitions=None):
    """Load checkpoint arrays into a ModelParams, exact-shape matching.
    `partitions` restricts loading (e.g. ("f",) for backbone transfer)."""
    for name, t in params.named(partitions):
        if name not in arrays:
            raise ConfigError(f"checkpoint missing parameter {name}")
        if list(arrays[name].shape) != list(t.data.shape):
            raise ConfigError(
                f"shape mismatch for {name}: checkpoint "
                f"{arrays[name].shape} vs model {t.data.shape}")
        t.data = np.array(arrays[name], dtype=np.float64)
    if buffers:
        for name, buf in params.buffers.items():
            part = name.split(".", 1)[0]
            if partitions is not None and part not in partitions:
                continue
            if name in buffers:
                params.buffers[name][...] = buffers[name]


# ---------------------------------------------------------------------------
# flat key=value config files


def read_flat_config(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path} line {i + 1}: expected "
                                  f"key = value, got {line!r}")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out
