"""File formats shared by bundles, predictions, and reports.

Matrices travel as MatrixMarket coordinate files (sparse-friendly,
language-neutral) or dense TSV for tiny fixtures; row/column identities as
one-id-per-line text files; structured outputs as canonical JSON (sorted
keys, compact separators) so identical values serialize to identical bytes.
"""

from __future__ import annotations

import io
import json
import os
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import io as spio
from scipy import sparse

from .errors import LoadError, ValidationError
from .metrics import ExpressionMatrix


def canonical_json(doc: Any) -> str:
    """Stable JSON text for byte-identical replay."""
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False,
                      allow_nan=False)


def write_json(path: str, doc: Any) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(doc) + "\n")


def read_json(path: str) -> Any:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path} is not valid JSON: {exc}") from exc


def read_id_list(path: str) -> List[str]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            ids = [line.rstrip("\n") for line in fh]
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    ids = [i for i in ids if i]
    if not ids:
        raise LoadError(f"{path} lists no identifiers")
    return ids


def write_id_list(path: str, ids: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i in ids:
            fh.write(str(i) + "\n")


def read_matrix(path: str) -> np.ndarray:
    """Dense float64 array from a .mtx (MatrixMarket) or .tsv file."""
    if not os.path.exists(path):
        raise LoadError(f"matrix file not found: {path}")
    try:
        if path.endswith(".mtx"):
            mat = spio.mmread(path)
            if sparse.issparse(mat):
                mat = mat.toarray()
            return np.asarray(mat, dtype=np.float64)
        arr = np.loadtxt(path, dtype=np.float64, ndmin=2)
        return arr
    except LoadError:
        raise
    except Exception as exc:
        raise LoadError(f"cannot parse matrix {path}: {exc}") from exc


def write_matrix_market(path: str, values: np.ndarray) -> None:
    values = np.asarray(values, dtype=np.float64)
    spio.mmwrite(path, sparse.coo_matrix(values))


def find_matrix_file(directory: str, stem: str) -> str:
    for ext in (".mtx", ".tsv"):
        candidate = os.path.join(directory, stem + ext)
        if os.path.exists(candidate):
            return candidate
    raise LoadError(f"no {stem}.mtx or {stem}.tsv under {directory}")


def read_table(path: str) -> Tuple[List[str], List[Dict[str, str]]]:
    """Header-row TSV into (column names, list of row dicts)."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = [line.rstrip("\n") for line in fh]
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    lines = [line for line in lines if line]
    if not lines:
        raise LoadError(f"table {path} is empty")
    header = lines[0].split("\t")
    rows = []
    for n, line in enumerate(lines[1:], start=2):
        cells = line.split("\t")
        if len(cells) != len(header):
            raise LoadError(f"{path}:{n}: expected {len(header)} columns, got {len(cells)}")
        rows.append(dict(zip(header, cells)))
    return header, rows


def write_table(path: str, header: Sequence[str], rows: Sequence[Dict[str, str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(str(row[col]) for col in header) + "\n")


PREDICTIONS_STEM = "predictions"
PREDICTIONS_ROWS = "predictions_rows.tsv"
PREDICTIONS_COLS = "predictions_cols.tsv"


def read_predictions(path: str) -> ExpressionMatrix:
    """Load a prediction artifact: matrix plus row/column order files.

    ``path`` may be the directory holding ``predictions.mtx`` (or ``.tsv``)
    or the matrix file itself; the id files must sit beside the matrix.
    """
    if os.path.isdir(path):
        directory = path
        matrix_path = find_matrix_file(directory, PREDICTIONS_STEM)
    else:
        directory = os.path.dirname(path) or "."
        matrix_path = path
        if not os.path.exists(matrix_path):
            raise LoadError(f"prediction file not found: {matrix_path}")
    values = read_matrix(matrix_path)
    row_ids = read_id_list(os.path.join(directory, PREDICTIONS_ROWS))
    col_ids = read_id_list(os.path.join(directory, PREDICTIONS_COLS))
    if len(row_ids) != values.shape[0]:
        raise ValidationError(
            f"prediction rows file lists {len(row_ids)} ids for {values.shape[0]} rows"
        )
    if len(col_ids) != values.shape[1]:
        raise ValidationError(
            f"prediction columns file lists {len(col_ids)} ids for {values.shape[1]} columns"
        )
    return ExpressionMatrix(values, row_ids=tuple(row_ids), column_ids=tuple(col_ids))


def write_predictions(directory: str, matrix: ExpressionMatrix) -> None:
    os.makedirs(directory, exist_ok=True)
    write_matrix_market(os.path.join(directory, PREDICTIONS_STEM + ".mtx"), matrix.values)
    write_id_list(os.path.join(directory, PREDICTIONS_ROWS), matrix.row_ids)
    write_id_list(os.path.join(directory, PREDICTIONS_COLS), matrix.column_ids)


def align_predictions(pred: ExpressionMatrix, truth: ExpressionMatrix) -> ExpressionMatrix:
    """Reorder a prediction matrix onto the truth's row/column order."""
    if not truth.row_ids or not truth.column_ids:
        raise ValidationError("truth matrix needs row and column ids for alignment")
    row_pos = {rid: i for i, rid in enumerate(pred.row_ids)}
    col_pos = {cid: j for j, cid in enumerate(pred.column_ids)}
    missing_rows = [r for r in truth.row_ids if r not in row_pos]
    if missing_rows:
        raise ValidationError(f"predictions missing rows: {missing_rows[:5]}")
    missing_cols = [c for c in truth.column_ids if c not in col_pos]
    if missing_cols:
        raise ValidationError(f"predictions missing columns: {missing_cols[:5]}")
    ridx = [row_pos[r] for r in truth.row_ids]
    cidx = [col_pos[c] for c in truth.column_ids]
    values = pred.values[np.ix_(ridx, cidx)]
    return ExpressionMatrix(values, row_ids=truth.row_ids, column_ids=truth.column_ids)
