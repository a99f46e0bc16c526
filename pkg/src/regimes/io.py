"""TSV ingestion and long-format exports.

Counts files have a header row whose first cell names the species column
and whose remaining cells are numeric sample times; each following row is
one species ID then one nonnegative value per sample. The optional taxonomy
sidecar maps species ID to family, one pair per row after a header.
"""

import csv
import math
import warnings
from pathlib import Path

import numpy as np

from .core import SeriesPanel, prevalence_filter


class IngestError(ValueError):
    """Malformed input file; the message carries path and line number."""


def _read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return [(i + 1, row) for i, row in enumerate(csv.reader(fh, delimiter="\t"))
                if row and any(cell.strip() for cell in row)]


def _float(cell, path, line, what):
    try:
        v = float(cell)
    except ValueError:
        raise IngestError(f"{path}:{line}: {what} {cell!r} is not a number") from None
    if not math.isfinite(v):
        raise IngestError(f"{path}:{line}: {what} {cell!r} is not finite")
    return v


def read_counts_tsv(path):
    """Return ``(species, times, counts)`` from one subject's counts file."""
    rows = _read_rows(path)
    if not rows:
        raise IngestError(f"{path}: empty file")
    line, header = rows[0]
    times = np.array([_float(c, path, line, "time") for c in header[1:]])
    if times.size == 0:
        raise IngestError(f"{path}:{line}: header has no sample times")
    if np.any(np.diff(times) <= 0):
        raise IngestError(f"{path}:{line}: sample times must be strictly increasing")
    species, values = [], []
    for line, row in rows[1:]:
        if len(row) != times.size + 1:
            raise IngestError(f"{path}:{line}: expected {times.size + 1} fields, got {len(row)}")
        sid = row[0].strip()
        if not sid:
            raise IngestError(f"{path}:{line}: empty species ID")
        if sid in species:
            raise IngestError(f"{path}:{line}: duplicate species {sid!r}")
        vals = [_float(c, path, line, "count") for c in row[1:]]
        if min(vals) < 0:
            raise IngestError(f"{path}:{line}: negative count")
        species.append(sid)
        values.append(vals)
    counts = np.array(values, dtype=float).reshape(len(species), times.size)
    return species, times, counts


def read_taxonomy_tsv(path):
    rows = _read_rows(path)
    out = {}
    for line, row in rows[1:]:
        if len(row) != 2:
            raise IngestError(f"{path}:{line}: expected 2 fields, got {len(row)}")
        out[row[0].strip()] = row[1].strip()
    return out


def ingest(counts, taxonomy=None, prevalence=0.2):
    """Build a validated panel from per-subject counts files.

    Parameters
    ----------
    counts : dict subject -> path, or list of paths (subject = file stem).
    taxonomy : optional sidecar path.
    prevalence : keep species positive in at least this fraction of samples.

    Species missing from a subject are zero-filled; the species axis keeps
    first-seen order across subjects.
    """
    if not isinstance(counts, dict):
        counts = {Path(p).stem: p for p in counts}
    if not counts:
        raise IngestError("no counts files given")
    if not 0.0 <= prevalence <= 1.0:
        raise ValueError("prevalence must lie in [0, 1]")
    parsed = {s: read_counts_tsv(p) for s, p in counts.items()}
    species = []
    for sp, _, _ in parsed.values():
        species.extend(s for s in sp if s not in species)
    index = {s: i for i, s in enumerate(species)}
    times, mats = [], []
    for sp, t, c in parsed.values():
        full = np.zeros((len(species), t.size))
        full[[index[s] for s in sp]] = c
        times.append(t)
        mats.append(full)
    tax = read_taxonomy_tsv(taxonomy) if taxonomy else {}
    unknown = sorted(set(tax) - set(species))
    if unknown:
        warnings.warn(f"taxonomy lists {len(unknown)} species absent from the counts: "
                      f"{', '.join(unknown[:5])}", RuntimeWarning, stacklevel=2)
    panel = SeriesPanel(list(parsed), times, mats, species, tax)
    return prevalence_filter(panel, prevalence)


# --------------------------------------------------------------------------
# writers

def fmt(v, digits=12):
    """Fixed-precision text for a float; NaN is written as ``NA``."""
    v = float(v)
    return "NA" if math.isnan(v) else f"{v:.{digits}g}"


def write_tsv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(c) if isinstance(c, (float, np.floating)) else c for c in row])


def write_counts_tsv(path, species, times, counts):
    """Inverse of :func:`read_counts_tsv`; floats use shortest round-trip repr."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["species"] + [repr(float(t)) for t in times])
        for s, row in zip(species, counts):
            w.writerow([s] + [repr(float(v)) for v in row])


def heatmap_rows(subject, species, times, values, kind):
    """Long rows ``(subject, species, time, value, kind)`` in species then time order."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    if values.shape != (len(species), len(times)):
        raise ValueError(f"values shape {values.shape} != ({len(species)}, {len(times)})")
    return [(subject, s, float(t), float(values[i, j]), kind)
            for i, s in enumerate(species) for j, t in enumerate(times)]


HEATMAP_HEADER = ("subject", "species", "time", "value", "kind")


def export_heatmap_data(path, blocks):
    """Write blocks of ``(subject, species, times, values, kind)`` as one long TSV."""
    rows = []
    for b in blocks:
        rows.extend(heatmap_rows(*b))
    write_tsv(path, HEATMAP_HEADER, rows)
    return len(rows)


def read_heatmap_tsv(path):
    rows = _read_rows(path)
    out = []
    for line, row in rows[1:]:
        if len(row) != 5:
            raise IngestError(f"{path}:{line}: expected 5 fields, got {len(row)}")
        val = math.nan if row[3] == "NA" else _float(row[3], path, line, "value")
        out.append((row[0], row[1], _float(row[2], path, line, "time"), val, row[4]))
    return out
