"""Separation metrics and ablation reports.

SDR here is the plain energy ratio ``10 log10(|s|^2 / |s - s_hat|^2)``
without the BSSEval distortion filter, so values are not comparable with
museval/BSSEval v4 numbers. Reports aggregate with the median over tracks.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import _StemCache, read_manifest, render_mixture
from .dsp import AudioClip
from .separator import load_model, separate

log = logging.getLogger(__name__)

SDR_CAP = 60.0
REPORT_NOTE = ("SDR = 10*log10(|s|^2/|s - s_hat|^2) (plain SDR, not BSSEval v4); "
               "median over tracks; not comparable to published museval tables.")


def _samples(x) -> np.ndarray:
    return x.samples if isinstance(x, AudioClip) else np.asarray(x, dtype=np.float64)


def sdr(reference, estimate) -> float:
    """Signal-to-distortion ratio in dB, capped at 60 dB for (near) perfect estimates."""
    if isinstance(reference, AudioClip) and isinstance(estimate, AudioClip):
        if reference.sample_rate != estimate.sample_rate:
            raise ValueError("sample rates differ")
    s = _samples(reference)
    e = _samples(estimate)
    if s.shape != e.shape:
        raise ValueError(f"reference {s.shape} and estimate {e.shape} differ in shape")
    num = float(np.sum(s * s))
    if num == 0.0:
        raise ValueError("SDR is undefined for an all-zero reference")
    den = float(np.sum((s - e) ** 2))
    if den < 1e-12 * num:
        return SDR_CAP
    return min(SDR_CAP, 10.0 * math.log10(num / den))


@dataclass
class EvalResult:
    """Per-track SDRs by class plus skipped tracks."""

    classes: tuple
    scores: dict = field(default_factory=dict)      # class -> list of SDR
    tracks: list = field(default_factory=list)      # (track id, class, SDR)
    skipped: list = field(default_factory=list)     # (track id, reason)

    def add(self, track: str, cls: str, value: float):
        self.scores.setdefault(cls, []).append(value)
        self.tracks.append((track, cls, value))

    def median(self) -> dict:
        return {c: float(np.median(self.scores[c])) if self.scores.get(c) else float("nan")
                for c in self.classes}

    def mean(self) -> dict:
        return {c: float(np.mean(self.scores[c])) if self.scores.get(c) else float("nan")
                for c in self.classes}


def evaluate_estimates(tracks, classes) -> EvalResult:
    """Score ``(track id, references, estimates)`` triples; dicts are keyed by class."""
    result = EvalResult(tuple(classes))
    for track, refs, ests in tracks:
        for c in classes:
            if c not in refs or c not in ests:
                log.warning("%s: no %s reference/estimate, skipped", track, c)
                result.skipped.append((track, f"missing {c}"))
                continue
            try:
                result.add(track, c, sdr(refs[c], ests[c]))
            except ValueError as e:
                log.warning("%s/%s skipped: %s", track, c, e)
                result.skipped.append((track, f"{c}: {e}"))
    return result


def _iter_rendered(manifest):
    specs = read_manifest(manifest) if isinstance(manifest, (str, Path)) else list(manifest)
    cache = None
    for spec in specs:
        if cache is None or cache.sample_rate != spec.sample_rate:
            cache = _StemCache(spec.sample_rate)
        try:
            mix, stems = render_mixture(spec, cache)
        except (OSError, ValueError) as e:
            log.warning("%s: cannot render references (%s), skipped", spec.id, e)
            yield spec.id, None, None
            continue
        yield spec.id, mix, stems


def evaluate_testset(manifest, checkpoint, classes=None) -> EvalResult:
    """Separate every manifest mixture with ``checkpoint`` and score it against its stems."""
    model = load_model(checkpoint)
    classes = tuple(classes or model.classes)

    def tracks():
        for tid, mix, stems in _iter_rendered(manifest):
            if mix is None:
                continue
            yield tid, stems, separate(mix, model)

    return evaluate_estimates(tracks(), classes)


def mixture_as_estimate(manifest, classes) -> EvalResult:
    """Score the unprocessed mixture as the estimate of every class."""
    def tracks():
        for tid, mix, stems in _iter_rendered(manifest):
            if mix is not None:
                yield tid, stems, {c: mix for c in classes}
    return evaluate_estimates(tracks(), classes)


def _column(c: str) -> str:
    return c.capitalize()


def format_table(rows: dict, classes, note: str = REPORT_NOTE) -> str:
    """Aligned plain-text table: one row per approach, one column per class."""
    cols = ["Approach"] + [_column(c) for c in classes]
    body = [[name] + [f"{vals.get(c, float('nan')):.2f}" for c in classes]
            for name, vals in rows.items()]
    widths = [max(len(r[i]) for r in [cols] + body) for i in range(len(cols))]

    def fmt(r):
        return " | ".join(v.ljust(w) if i == 0 else v.rjust(w)
                          for i, (v, w) in enumerate(zip(r, widths)))

    lines = [fmt(cols), "-+-".join("-" * w for w in widths)] + [fmt(r) for r in body]
    return "\n".join(([f"# {note}"] if note else []) + lines) + "\n"


def write_report(rows: dict, csv_path, classes, txt_path=None, note: str = REPORT_NOTE,
                 skipped=()) -> None:
    """Write the approach x class table as CSV (and optionally as aligned text)."""
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["approach"] + [_column(c) for c in classes])
        for name, vals in rows.items():
            w.writerow([name] + [f"{vals.get(c, float('nan')):.4f}" for c in classes])
    if txt_path is not None:
        text = format_table(rows, classes, note)
        if skipped:
            text += "\nskipped:\n" + "\n".join(f"  {t}: {r}" for t, r in skipped) + "\n"
        Path(txt_path).write_text(text)


MIXTURE_ROW = "Mixture (no separation)"


def model_label(model) -> str:
    """Report row name: ``BLSTM`` for the baseline, the covariance label otherwise."""
    return "BLSTM" if model.is_baseline else model.covariance.label


def ablation_report(checkpoints, manifest, csv_path, txt_path=None, include_mixture=True,
                    aggregate: str = "median") -> dict:
    """Evaluate every checkpoint on ``manifest`` and write one report row per model.

    Rows are ordered baseline first, then in the order given. Returns the
    ``{row name: {class: SDR}}`` table that was written.
    """
    if aggregate not in ("median", "mean"):
        raise ValueError("aggregate must be 'median' or 'mean'")
    specs = read_manifest(manifest) if isinstance(manifest, (str, Path)) else list(manifest)
    models = [load_model(c) for c in checkpoints]
    if not models:
        raise ValueError("no checkpoints given")
    classes = models[0].classes
    if any(m.classes != classes for m in models):
        raise ValueError("checkpoints disagree on the class list")
    models.sort(key=lambda m: not m.is_baseline)
    rows, skipped = {}, []
    if include_mixture:
        res = mixture_as_estimate(specs, classes)
        rows[MIXTURE_ROW] = getattr(res, aggregate)()
    for m in models:
        res = evaluate_testset(specs, m, classes)
        name = model_label(m)
        while name in rows:
            name += "'"
        rows[name] = getattr(res, aggregate)()
        skipped.extend(res.skipped)
    note = REPORT_NOTE if aggregate == "median" else REPORT_NOTE.replace("median", "mean")
    write_report(rows, csv_path, classes, txt_path, note, sorted(set(skipped)))
    return rows
