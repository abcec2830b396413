"""Delimited key=value reports, text tables, and rendered figures.

Reports are plain ``key=value`` lines sorted by key so byte equality is
meaningful. Detection ratios print with 3 decimals everywhere. Figures
render through the Agg backend straight to files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

__all__ = [
    "fmt_fdr",
    "write_kv",
    "read_kv",
    "render_audit_table",
    "render_fdr_table",
    "render_confusion",
    "compare_fdr",
    "render_comparison",
    "save_loss_curve",
    "save_confusion_heatmap",
    "save_comparison_bars",
    "save_correlation_heatmap",
]


def fmt_fdr(value: float) -> str:
    return f"{value:.3f}"


def write_kv(path, mapping: dict) -> None:
    """Write one key=value per line, keys sorted, trailing newline."""
    lines = []
    for key in sorted(mapping):
        value = mapping[key]
        if isinstance(value, float):
            value = repr(float(value))
        lines.append(f"{key}={value}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_kv(path) -> dict[str, str]:
    out = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{line_no}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        out[key] = value
    return out


# ---- text tables -----------------------------------------------------------------


def _format_rows(rows: list[list[str]], header: list[str]) -> str:
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    def line(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    rule = "-" * len(line(header))
    return "\n".join([line(header), rule] + [line(r) for r in rows])


def render_audit_table(spec) -> str:
    """Per-layer notation, output shape, parameter count, receptive field."""
    from .model import audit_parameters, receptive_fields

    audit = audit_parameters(spec)
    counts = {name: n for name, _, n in audit.per_layer}
    fields = receptive_fields(spec)
    rows = []
    for layer in spec.layers:
        shape = layer.out_shape
        shape_txt = (f"({shape[1]}, {shape[2]}, {shape[3]})"
                     if shape[0] == "map" else f"({shape[1]})")
        rf = fields[layer.name]
        rows.append([
            layer.name,
            layer.table_notation(),
            shape_txt,
            str(counts[layer.name]),
            f"{rf.height}x{rf.width}",
        ])
    table = _format_rows(rows, ["layer", "op", "output", "params", "field"])
    return (f"model {spec.name}\n"
            f"input ({spec.input_shape.channels}, {spec.input_shape.height}, "
            f"{spec.input_shape.width})\n\n{table}\n\ntotal parameters: "
            f"{audit.total}\n")


def render_fdr_table(per_class_fdr: dict[int, float], mean_fdr: float,
                     title: str = "FDR") -> str:
    """Two side-by-side (class, ratio) columns, low half left, high right."""
    ids = sorted(per_class_fdr)
    half = (len(ids) + 1) // 2
    left, right = ids[:half], ids[half:]
    rows = []
    for i in range(half):
        row = [str(left[i]), fmt_fdr(per_class_fdr[left[i]])]
        if i < len(right):
            row += [str(right[i]), fmt_fdr(per_class_fdr[right[i]])]
        else:
            row += ["", ""]
        rows.append(row)
    table = _format_rows(rows, ["fault", title, "fault", title])
    return f"{table}\n\nmean {title}: {fmt_fdr(mean_fdr)}\n"


def render_confusion(confusion: np.ndarray, class_ids: tuple[int, ...]) -> str:
    header = ["true\\pred"] + [str(c) for c in class_ids]
    rows = [[str(cid)] + [str(int(v)) for v in confusion[i]]
            for i, cid in enumerate(class_ids)]
    return _format_rows(rows, header) + "\n"


# ---- comparison ------------------------------------------------------------------


def compare_fdr(fdr_a: dict[int, float], fdr_b: dict[int, float]):
    """Per-class deltas (b - a) plus winner marks; class sets must match."""
    if set(fdr_a) != set(fdr_b):
        only_a = sorted(set(fdr_a) - set(fdr_b))
        only_b = sorted(set(fdr_b) - set(fdr_a))
        raise ValueError(
            f"reports cover different classes (only in first: {only_a}, "
            f"only in second: {only_b})")
    if not fdr_a:
        raise ValueError("reports are empty")
    rows = []
    for cid in sorted(fdr_a):
        a, b = fdr_a[cid], fdr_b[cid]
        winner = "=" if abs(a - b) < 5e-4 else ("a" if a > b else "b")
        rows.append((cid, a, b, b - a, winner))
    mean_a = float(np.mean(list(fdr_a.values())))
    mean_b = float(np.mean(list(fdr_b.values())))
    return rows, mean_a, mean_b


def render_comparison(fdr_a: dict[int, float], fdr_b: dict[int, float],
                      name_a: str, name_b: str) -> str:
    rows, mean_a, mean_b = compare_fdr(fdr_a, fdr_b)
    body = []
    for cid, a, b, delta, winner in rows:
        mark_a = "*" if winner == "a" else " "
        mark_b = "*" if winner == "b" else " "
        body.append([str(cid), fmt_fdr(a) + mark_a, fmt_fdr(b) + mark_b,
                     f"{delta:+.3f}"])
    table = _format_rows(body, ["fault", name_a, name_b, "delta"])
    return (f"{table}\n\nmean: {name_a} {fmt_fdr(mean_a)}  "
            f"{name_b} {fmt_fdr(mean_b)}  delta {mean_b - mean_a:+.3f}\n")


# ---- figures ---------------------------------------------------------------------

# a None Software entry drops the version text chunk, keeping PNGs
# byte-stable across environments
_PNG_META = {"metadata": {"Software": None}}


def _save(fig, path):
    fig.savefig(path, format="png", dpi=100, **_PNG_META)
    plt.close(fig)


def save_loss_curve(epoch_loss, path, accuracy=None) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = np.arange(1, len(epoch_loss) + 1)
    ax.plot(epochs, epoch_loss, marker="o", label="mean loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    if accuracy is not None:
        twin = ax.twinx()
        twin.plot(epochs, accuracy, marker="s", color="tab:green", label="accuracy")
        twin.set_ylabel("training accuracy")
        twin.set_ylim(0, 1.05)
    ax.set_title("training progress")
    fig.tight_layout()
    _save(fig, path)


def save_confusion_heatmap(confusion: np.ndarray, class_ids, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(confusion, cmap="Blues")
    ax.set_xticks(range(len(class_ids)), [str(c) for c in class_ids])
    ax.set_yticks(range(len(class_ids)), [str(c) for c in class_ids])
    ax.set_xlabel("predicted fault")
    ax.set_ylabel("true fault")
    ax.set_title("confusion matrix")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    _save(fig, path)


def save_comparison_bars(fdr_a, fdr_b, name_a: str, name_b: str, path) -> None:
    ids = sorted(fdr_a)
    x = np.arange(len(ids))
    fig, ax = plt.subplots(figsize=(max(6, len(ids) * 0.5), 4))
    ax.bar(x - 0.2, [fdr_a[c] for c in ids], width=0.4, label=name_a)
    ax.bar(x + 0.2, [fdr_b[c] for c in ids], width=0.4, label=name_b)
    ax.set_xticks(x, [str(c) for c in ids])
    ax.set_xlabel("fault")
    ax.set_ylabel("FDR")
    ax.set_ylim(0, 1.05)
    ax.legend()
    ax.set_title("per-fault detection ratio")
    fig.tight_layout()
    _save(fig, path)


def save_correlation_heatmap(corr: np.ndarray, path, names=None) -> None:
    fig, ax = plt.subplots(figsize=(7, 6))
    im = ax.imshow(corr, cmap="coolwarm", vmin=-1.0, vmax=1.0)
    ax.set_xlabel("variable")
    ax.set_ylabel("variable")
    ax.set_title("process variable correlation")
    if names is not None and len(names) <= 60:
        step = max(1, len(names) // 26)
        ticks = list(range(0, len(names), step))
        ax.set_xticks(ticks, [names[i] for i in ticks], rotation=90, fontsize=5)
        ax.set_yticks(ticks, [names[i] for i in ticks], fontsize=5)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    _save(fig, path)
