"""Artifact files: policy checkpoints, sample banks, knowledge bases.

Every writer goes through ``atomic_write`` so an interrupted process never
leaves a truncated file under the final name.
"""
from __future__ import annotations

import io
import json
import os
import tempfile

import numpy as np

from . import env as E
from .cola import Bucket, SampleBank
from .policy import Arch, PolicyParams
from .ssc import SSCFunction

CHECKPOINT_FORMAT = "numerla-checkpoint/1"
BANK_FORMAT = "numerla-bank/1"
KB_FORMAT = "numerla-kb/1"


class ArtifactError(E.ConfigError):
    """Missing, corrupt or mismatched artifact file."""


def atomic_write(path, data):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    mode = "wb" if isinstance(data, (bytes, bytearray)) else "w"
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_json(path, fmt):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ArtifactError(f"{path}: no such file") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ArtifactError(f"{path}: corrupt file ({exc})") from None
    if not isinstance(data, dict) or data.get("format") != fmt:
        raise ArtifactError(f"{path}: expected format {fmt}, found {data.get('format') if isinstance(data, dict) else None}")
    return data


# --- policy checkpoint -------------------------------------------------------

def save_checkpoint(path, params: PolicyParams, seed=None):
    doc = {"format": CHECKPOINT_FORMAT, "arch": params.arch.to_dict(), "d": int(params.theta.size),
           "lineage": list(params.lineage), "seed": seed, "policy_version": params.version,
           "theta": [float(x).hex() for x in params.theta]}
    atomic_write(path, json.dumps(doc, indent=0))


def load_checkpoint(path, arch: Arch = None) -> PolicyParams:
    doc = _read_json(path, CHECKPOINT_FORMAT)
    stored = Arch(**doc["arch"])
    if arch is not None and stored != arch:
        raise ArtifactError(f"{path}: checkpoint arch {stored} does not match expected {arch}")
    theta = np.array([float.fromhex(x) for x in doc["theta"]])
    if theta.size != doc["d"] or theta.size != stored.n_params:
        raise ArtifactError(f"{path}: parameter count {theta.size} inconsistent with header")
    params = PolicyParams(theta, stored, tuple(doc.get("lineage", ())))
    if params.version != doc["policy_version"]:
        raise ArtifactError(f"{path}: content hash does not match stored policy version")
    return params


# --- sample bank -------------------------------------------------------------

_BUCKET_FIELDS = ("obs", "actions", "rewards", "logp", "valid", "start_states")


def save_bank(path, bank: SampleBank):
    header = {"format": BANK_FORMAT, "K": bank.K, "policy_version": bank.policy_version,
              "modes": list(bank.mode_ids)}
    arrays = {"header": np.array(json.dumps(header))}
    for i, mid in enumerate(bank.mode_ids):
        b = bank.buckets[mid]
        for name in _BUCKET_FIELDS:
            val = getattr(b, name)
            if val is not None:
                arrays[f"m{i}_{name}"] = val
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write(path, buf.getvalue())


def load_bank(path, policy_version: str = None) -> SampleBank:
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(str(z["header"]))
            if header.get("format") != BANK_FORMAT:
                raise ArtifactError(f"{path}: not a sample bank")
            bank = SampleBank(int(header["K"]), header["policy_version"])
            for i, mid in enumerate(header["modes"]):
                fields = {n: (z[f"m{i}_{n}"] if f"m{i}_{n}" in z else None) for n in _BUCKET_FIELDS}
                bank.buckets[mid] = Bucket(**fields)
    except FileNotFoundError:
        raise ArtifactError(f"{path}: no such file") from None
    except (OSError, ValueError, KeyError) as exc:
        raise ArtifactError(f"{path}: corrupt bank ({exc})") from None
    if policy_version is not None and bank.policy_version != policy_version:
        raise ArtifactError(f"{path}: bank collected under policy {bank.policy_version}, "
                            f"checkpoint is {policy_version}")
    return bank


# --- knowledge base ----------------------------------------------------------

def save_ssc(path, f: SSCFunction):
    atomic_write(path, json.dumps({"format": KB_FORMAT, **f.to_dict()}, indent=1))


def load_ssc(path) -> SSCFunction:
    doc = _read_json(path, KB_FORMAT)
    try:
        return SSCFunction.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise ArtifactError(f"{path}: corrupt knowledge base ({exc})") from None
