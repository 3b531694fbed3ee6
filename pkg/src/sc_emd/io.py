"""Readers and writers for the on-disk formats.

All numbers are written with ``repr`` so values survive a round trip
exactly.  Writers go through :func:`atomic_write`.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .emd_core import (GroundDistance, check_histogram, default_k,
                       ground_distance, ground_from_prototypes)
from .errors import InputError
from .mil_pipeline import Bag, PrototypeSet
from .scemd import ScemdModel

MODEL_FORMAT = "SCEMD v1"


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _fmt(v) -> str:
    # adding 0.0 turns -0.0 into 0.0
    return repr(float(v) + 0.0)


def format_matrix(rows, header: Optional[str] = None,
                  comments: Sequence[str] = ()) -> str:
    lines = [f"# {c}" for c in comments]
    if header is not None:
        lines.append(header)
    lines += [",".join(_fmt(v) for v in row) for row in np.atleast_2d(rows)]
    return "\n".join(lines) + "\n"


def parse_matrix(text: str, name: str = "csv") -> np.ndarray:
    rows = []
    for ln in text.splitlines():
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        try:
            rows.append([float(tok) for tok in ln.split(",")])
        except ValueError:
            if not rows:
                continue  # column header line
            raise InputError(f"{name}: non-numeric entry in {ln!r}")
    if not rows:
        raise InputError(f"{name}: no data rows")
    if len({len(r) for r in rows}) != 1:
        raise InputError(f"{name}: rows have differing lengths")
    return np.array(rows, dtype=float)


def comment_lines(text: str) -> List[str]:
    return [ln[1:].strip() for ln in text.splitlines() if ln.startswith("#")]


def _read(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from exc


# histograms --------------------------------------------------------------------


def read_histograms(path) -> np.ndarray:
    X = parse_matrix(_read(path), str(path))
    for n, x in enumerate(X):
        check_histogram(x, name=f"{path} row {n + 1}")
    return X


def write_histograms(path, X) -> None:
    atomic_write(path, format_matrix(X))


def read_histogram(path) -> np.ndarray:
    """One histogram from CSV (single row) or JSON ``{"bins": [...]}``."""
    text = _read(path)
    if text.lstrip().startswith("{"):
        try:
            bins = json.loads(text)["bins"]
        except (ValueError, KeyError, TypeError) as exc:
            raise InputError(f"{path}: expected {{\"bins\": [...]}}") from exc
        x = np.asarray(bins, dtype=float)
    else:
        X = parse_matrix(text, str(path))
        if X.shape[0] != 1:
            raise InputError(f"{path}: expected exactly one histogram row")
        x = X[0]
    return check_histogram(x, name=str(path))


# ground distance and prototypes ---------------------------------------------


def read_ground_distance(path) -> GroundDistance:
    return ground_distance(parse_matrix(_read(path), str(path)))


def write_ground_distance(path, gd: GroundDistance) -> None:
    atomic_write(path, format_matrix(gd.d))


def read_prototypes(path) -> PrototypeSet:
    text = _read(path)
    seed = 0
    for c in comment_lines(text):
        if c.startswith("seed="):
            seed = int(c.split("=", 1)[1])
    return PrototypeSet(parse_matrix(text, str(path)), seed)


def write_prototypes(path, protos: PrototypeSet) -> None:
    atomic_write(path, format_matrix(protos.centroids,
                                     comments=[f"seed={protos.seed}"]))


# bags and labels -----------------------------------------------------------------


def read_bags(path) -> List[Bag]:
    bags = []
    for lineno, ln in enumerate(_read(path).splitlines(), 1):
        if not ln.strip():
            continue
        try:
            rec = json.loads(ln)
            bags.append(Bag(np.asarray(rec["instances"], dtype=float),
                            rec.get("label")))
        except (ValueError, KeyError, TypeError) as exc:
            raise InputError(f"{path}:{lineno}: bad bag record") from exc
    if not bags:
        raise InputError(f"{path}: no bags")
    return bags


def write_bags(path, bags: Sequence[Bag]) -> None:
    lines = []
    for b in bags:
        label = b.label if b.label is None else (
            int(b.label) if isinstance(b.label, (int, np.integer)) else b.label)
        lines.append(json.dumps({"label": label,
                                 "instances": b.instances.tolist()}))
    atomic_write(path, "\n".join(lines) + "\n")


def read_labels(path) -> np.ndarray:
    vals = [ln.strip() for ln in _read(path).splitlines()[1:] if ln.strip()]
    if not vals:
        raise InputError(f"{path}: no labels")
    try:
        return np.array([int(v) for v in vals])
    except ValueError:
        return np.array(vals)


def write_labels(path, labels) -> None:
    atomic_write(path, "label\n" + "".join(f"{l}\n" for l in labels))


# model and codes ----------------------------------------------------------------


def model_to_json(model: ScemdModel) -> str:
    doc = {
        "format": MODEL_FORMAT,
        "D": model.D,
        "M": model.M,
        "gamma": model.gamma,
        "K": model.K,
        "ground_distance": model.gd.d.tolist(),
        "dictionary": model.dictionary.T.tolist(),
        "fit_trace": list(map(float, model.fit_trace)),
        "converged": bool(model.converged),
        "n_iter": int(model.n_iter),
    }
    return json.dumps(doc, indent=1) + "\n"


def write_model(path, model: ScemdModel) -> None:
    atomic_write(path, model_to_json(model))


def read_model(path) -> ScemdModel:
    try:
        doc = json.loads(_read(path))
    except ValueError as exc:
        raise InputError(f"{path}: not JSON") from exc
    if doc.get("format") != MODEL_FORMAT:
        raise InputError(f"{path}: not an {MODEL_FORMAT} model")
    try:
        gd_spec = doc["ground_distance"]
        if isinstance(gd_spec, dict):
            # {"prototypes": "<csv path, relative to the model file>"}
            ref = Path(path).parent / gd_spec["prototypes"]
            gd = ground_from_prototypes(read_prototypes(ref))
        else:
            gd = ground_distance(gd_spec)
        U = np.asarray(doc["dictionary"], dtype=float).T
        D, M = int(doc["D"]), int(doc["M"])
        if U.shape != (D, M) or gd.size != D:
            raise InputError(f"{path}: D/M disagree with stored arrays")
        model = ScemdModel.from_dictionary(U, float(doc["gamma"]), gd,
                                           int(doc.get("K", default_k(D))))
    except (KeyError, TypeError) as exc:
        raise InputError(f"{path}: missing or malformed field {exc}") from exc
    model.fit_trace = [float(v) for v in doc.get("fit_trace", [])]
    model.converged = bool(doc.get("converged", False))
    model.n_iter = int(doc.get("n_iter", 0))
    return model


def write_codes(path, codes, model_hash: str) -> None:
    atomic_write(path, format_matrix(codes,
                                     comments=[f"model_sha256={model_hash}"]))


def read_codes(path) -> np.ndarray:
    return parse_matrix(_read(path), str(path))


def write_curve(path, curve, x_name: str, y_name: str) -> None:
    atomic_write(path, format_matrix(np.column_stack([curve.x, curve.y]),
                                     header=f"{x_name},{y_name}"))


def write_json(path, doc) -> None:
    atomic_write(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")
