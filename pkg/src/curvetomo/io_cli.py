"""Configuration, file formats and the experiment pipeline.

Grid files are a raw little-endian float64 payload (row-major) next to a
JSON sidecar carrying kind, dims, geometry metadata and a CRC64 checksum of
the payload.  Configuration is a strict JSON document (unknown keys are
rejected at every level) naming builtin phase/motion/weight families.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from .errors import ConfigError, OutOfRangeError
from .geometry import (
    TWO_PI,
    BumpWeight,
    UnitWeight,
    make_dynamic_phase,
    make_fanbeam_phase,
    make_motion,
    make_static_phase,
)
from .operators import ImageGrid, SinoSpec, Sinogram

TOOL_VERSION = "0.1.0"
DEFAULT_SEED = 0xC0FFEE


# ---------------------------------------------------------------------------
# CRC64 (ECMA-182) for payload checksums
# ---------------------------------------------------------------------------

_CRC64_POLY = 0x42F0E1EBA9EA3693
_CRC64_TABLE = None


def _crc64_table():
    global _CRC64_TABLE
    if _CRC64_TABLE is None:
        table = []
        for i in range(256):
            crc = i << 56
            for _ in range(8):
                if crc & (1 << 63):
                    crc = ((crc << 1) ^ _CRC64_POLY) & 0xFFFFFFFFFFFFFFFF
                else:
                    crc = (crc << 1) & 0xFFFFFFFFFFFFFFFF
            table.append(crc)
        _CRC64_TABLE = table
    return _CRC64_TABLE


def crc64(data):
    """CRC64/ECMA-182 of a bytes-like object, as a 16-hex-digit string."""
    table = _crc64_table()
    crc = 0
    for byte in bytes(data):
        crc = (table[((crc >> 56) ^ byte) & 0xFF] ^ (crc << 8)) & 0xFFFFFFFFFFFFFFFF
    return f"{crc:016x}"


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

_PHASE_KEYS = {
    "static": {"family"},
    "dynamic": {"family", "motion", "use_analytic"},
    "fanbeam": {"family", "R", "support_radius", "t_margin"},
}
_MOTION_KEYS = {
    "identity": {"name"},
    "rotation": {"name", "rate"},
    "affine": {"name", "amplitude"},
    "breathing": {"name", "amplitude", "r_flat", "r_support"},
}
_WEIGHT_KEYS = {
    "unit": {"name"},
    "bump": {"name", "amplitude", "center", "width"},
}
_TOP_KEYS = {"phase", "weight", "t_range", "image", "sinogram", "atlas", "seed",
             "interp", "chunk_t", "phantom"}
_IMAGE_KEYS = {"nx", "support_radius"}
_SINO_KEYS = {"ns", "nt", "s_range"}
_ATLAS_KEYS = {"n_charts"}


def _reject_unknown(d, allowed, where):
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)} in {where}")


@dataclass
class GeometryConfig:
    """Validated experiment configuration; canonical JSON round-trips
    bit-exactly (sorted keys, fixed separators)."""

    phase: dict
    weight: dict
    image: dict
    sinogram: dict
    atlas: dict
    t_range: list | None = None
    seed: int = DEFAULT_SEED
    interp: str = "cubic"
    chunk_t: int = 32
    phantom: list | None = None

    @classmethod
    def from_dict(cls, raw):
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        _reject_unknown(raw, _TOP_KEYS, "config root")
        phase = dict(raw.get("phase", {"family": "static"}))
        fam = phase.get("family")
        if fam not in _PHASE_KEYS:
            raise ConfigError(f"unknown phase family {fam!r}")
        _reject_unknown(phase, _PHASE_KEYS[fam], f"phase ({fam})")
        if fam == "dynamic":
            motion = dict(phase.get("motion", {"name": "identity"}))
            name = motion.get("name")
            if name not in _MOTION_KEYS:
                raise ConfigError(f"unknown motion family {name!r}")
            _reject_unknown(motion, _MOTION_KEYS[name], f"motion ({name})")
            phase["motion"] = motion
        weight = dict(raw.get("weight", {"name": "unit"}))
        wname = weight.get("name")
        if wname not in _WEIGHT_KEYS:
            raise ConfigError(f"unknown weight family {wname!r}")
        _reject_unknown(weight, _WEIGHT_KEYS[wname], f"weight ({wname})")
        image = dict(raw.get("image", {"nx": 64, "support_radius": 1.0}))
        _reject_unknown(image, _IMAGE_KEYS, "image")
        sinogram = dict(raw.get("sinogram", {}))
        _reject_unknown(sinogram, _SINO_KEYS, "sinogram")
        atlas = dict(raw.get("atlas", {"n_charts": 1}))
        _reject_unknown(atlas, _ATLAS_KEYS, "atlas")
        interp = raw.get("interp", "cubic")
        if interp not in ("cubic", "linear"):
            raise ConfigError("interp must be 'cubic' or 'linear'")
        t_range = raw.get("t_range")
        if t_range is not None:
            t_range = [float(t_range[0]), float(t_range[1])]
            if not t_range[1] > t_range[0]:
                raise ConfigError("t_range must be increasing")
        phantom = raw.get("phantom")
        if phantom is not None and not isinstance(phantom, list):
            raise ConfigError("phantom must be a list of ellipse specs")
        return cls(phase=phase, weight=weight, image=image, sinogram=sinogram,
                   atlas=atlas, t_range=t_range, seed=int(raw.get("seed", DEFAULT_SEED)),
                   interp=interp, chunk_t=int(raw.get("chunk_t", 32)), phantom=phantom)

    @classmethod
    def from_json(cls, text):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON at line {exc.lineno} column {exc.colno}: "
                              f"{exc.msg}") from exc
        return cls.from_dict(raw)

    def to_dict(self):
        out = {k: v for k, v in asdict(self).items() if v is not None}
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def build_geometry(config):
    """Instantiate (phase, weight, sino_spec, image factory) from a config."""
    phase_cfg = config.phase
    fam = phase_cfg["family"]
    image_kw = {"nx": int(config.image.get("nx", 64)),
                "support_radius": float(config.image.get("support_radius", 1.0))}
    if fam == "static":
        pf = make_static_phase()
    elif fam == "dynamic":
        mcfg = dict(phase_cfg["motion"])
        name = mcfg.pop("name")
        motion = make_motion(name, **mcfg)
        pf = make_dynamic_phase(motion, use_analytic=phase_cfg.get("use_analytic", True))
    else:
        pf = make_fanbeam_phase(
            float(phase_cfg.get("R", 3.0)),
            support_radius=float(phase_cfg.get("support_radius",
                                               1.05 * image_kw["support_radius"])),
            t_margin=float(phase_cfg.get("t_margin", 0.05)),
        )
    if config.t_range is not None:
        pf.t_range = tuple(config.t_range)
    wcfg = dict(config.weight)
    wname = wcfg.pop("name")
    if wname == "unit":
        mu = UnitWeight()
    else:
        if "center" in wcfg:
            wcfg["center"] = tuple(wcfg["center"])
        mu = BumpWeight(**wcfg)
    nx = image_kw["nx"]
    sino = config.sinogram
    spec = SinoSpec(
        ns=int(sino.get("ns", int(nx * 1.05) + 1)),
        nt=int(sino.get("nt", 180)),
        s_range=tuple(sino["s_range"]) if sino.get("s_range") else None,
    )
    return pf, mu, spec, image_kw


# ---------------------------------------------------------------------------
# grid files
# ---------------------------------------------------------------------------


def write_grid_file(path, obj, geometry_hash=""):
    """Write an ImageGrid or Sinogram as payload + JSON sidecar."""
    if isinstance(obj, ImageGrid):
        sidecar = {
            "kind": "image",
            "dims": [obj.nx, obj.ny],
            "spacing": obj.spacing,
            "origin": list(map(float, obj.origin)),
            "support_radius": obj.support_radius,
        }
        payload = np.ascontiguousarray(obj.values, dtype="<f8").tobytes()
    elif isinstance(obj, Sinogram):
        sidecar = {
            "kind": "sinogram",
            "dims": [obj.ns, obj.nt],
            "s_grid": [float(obj.s_grid[0]), float(obj.s_grid[-1])],
            "t_grid": [float(obj.t_grid[0]), float(obj.t_grid[-1])],
        }
        payload = np.ascontiguousarray(obj.values, dtype="<f8").tobytes()
    else:
        raise TypeError("expected ImageGrid or Sinogram")
    sidecar["geometry"] = geometry_hash
    sidecar["checksum"] = crc64(payload)
    with open(path, "wb") as fh:
        fh.write(payload)
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=1)
    return sidecar


def read_grid_file(path):
    """Read a grid file back; verifies checksum and dims."""
    with open(str(path) + ".json") as fh:
        sidecar = json.load(fh)
    with open(path, "rb") as fh:
        payload = fh.read()
    if crc64(payload) != sidecar["checksum"]:
        raise ConfigError(f"checksum mismatch reading {path}")
    dims = sidecar["dims"]
    data = np.frombuffer(payload, dtype="<f8")
    if len(data) != dims[0] * dims[1]:
        raise ConfigError(f"payload length does not match dims in {path}")
    data = data.reshape(dims).astype(float)
    if sidecar["kind"] == "image":
        return ImageGrid(dims[0], dims[1], sidecar["spacing"],
                         np.asarray(sidecar["origin"]), data,
                         sidecar["support_radius"]), sidecar
    s0, s1 = sidecar["s_grid"]
    t0, t1 = sidecar["t_grid"]
    return Sinogram(np.linspace(s0, s1, dims[0]),
                    np.linspace(t0, t1, dims[1]), data), sidecar


def write_pgm16(path, array, lo=None, hi=None):
    """16-bit binary PGM quicklook of a 2-D array (NaN rendered as 0)."""
    a = np.asarray(array, dtype=float)
    finite = a[np.isfinite(a)]
    lo = float(finite.min()) if lo is None and finite.size else (lo or 0.0)
    hi = float(finite.max()) if hi is None and finite.size else (hi or 1.0)
    span = (hi - lo) if hi > lo else 1.0
    scaled = np.clip(np.nan_to_num(a, nan=lo) - lo, 0, span) / span
    img = (scaled * 65535).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{a.shape[1]} {a.shape[0]}\n65535\n".encode())
        fh.write(img.tobytes())


# ---------------------------------------------------------------------------
# fan-beam rebinning
# ---------------------------------------------------------------------------


def fanbeam_convert(g_fan, R, ns, n_beta, s_range=None, beta_range=None,
                    weight_jacobian=False):
    """Rebin fan data (s-axis = fan angle gamma, t-axis = source angle t)
    onto the parallel grid (s, beta) through s = R sin gamma,
    beta = t + gamma - pi/2.

    Bilinear interpolation of samples; the Jacobian R cos(gamma) is recorded
    (and applied only when ``weight_jacobian``: rebinning moves samples, not
    measures).  Target cells without fan coverage are NaN and counted;
    raises OutOfRangeError if nothing is covered.
    """
    gamma = g_fan.s_grid
    t_grid = g_fan.t_grid
    if np.max(np.abs(gamma)) >= 0.5 * math.pi:
        raise OutOfRangeError("fan angles must satisfy |gamma| < pi/2")
    if s_range is None:
        smax = R * math.sin(float(np.max(np.abs(gamma)))) * 0.98
        s_range = (-smax, smax)
    if beta_range is None:
        beta_range = (float(t_grid[0] + gamma[0] - 0.5 * math.pi),
                      float(t_grid[-1] + gamma[-1] - 0.5 * math.pi))
    s_par = np.linspace(s_range[0], s_range[1], ns)
    b_par = np.linspace(beta_range[0], beta_range[1], n_beta)
    SS, BB = np.meshgrid(s_par, b_par, indexing="ij")
    if np.max(np.abs(SS)) >= R:
        raise OutOfRangeError("target |s| must be below the source radius")
    GG = np.arcsin(SS / R)
    TT = BB - GG + 0.5 * math.pi

    dg = gamma[1] - gamma[0]
    dt = t_grid[1] - t_grid[0]
    full_circle = abs(len(t_grid) * dt - TWO_PI) < 1e-9
    tt = TT - t_grid[0]
    if full_circle:
        tt = np.mod(tt, TWO_PI)
    ci = tt / dt
    cj = (GG - gamma[0]) / dg
    from scipy import ndimage

    vals = g_fan.values.T  # (nt, ngamma) for (t, gamma) coordinates
    if weight_jacobian:
        vals = vals * (R * np.cos(gamma))[None, :]
    if full_circle:
        mode = "grid-wrap"
        valid = (cj >= 0) & (cj <= len(gamma) - 1)
    else:
        mode = "constant"
        valid = (ci >= 0) & (ci <= len(t_grid) - 1) & (cj >= 0) & (cj <= len(gamma) - 1)
    out = ndimage.map_coordinates(vals, np.stack([ci.ravel(), cj.ravel()]),
                                  order=1, mode=mode, cval=np.nan).reshape(ns, n_beta)
    out = np.where(valid, out, np.nan)
    n_uncovered = int(np.sum(~np.isfinite(out)))
    if n_uncovered == out.size:
        raise OutOfRangeError("no target cell is covered by the fan data")
    return Sinogram(s_par, b_par, out), {"jacobian": "R*cos(gamma)",
                                         "jacobian_applied": bool(weight_jacobian),
                                         "uncovered_cells": n_uncovered}
