"""Minimal SVG emission for ROC / PR curves.

Direct text output, no plotting dependency; the CSV files next to the
plot are the source of truth.
"""

PANEL = 280
PAD = 45


def _polyline(xs, ys, x0, color, dashed=False):
    pts = " ".join(
        f"{x0 + PAD + x * PANEL:.1f},{PAD + (1.0 - y) * PANEL:.1f}"
        for x, y in zip(xs, ys)
    )
    dash = ' stroke-dasharray="6,4"' if dashed else ""
    return f'<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{pts}"/>'


def _panel(x0, title, xlabel, ylabel):
    left = x0 + PAD
    top = PAD
    parts = [
        f'<rect x="{left}" y="{top}" width="{PANEL}" height="{PANEL}" fill="none" stroke="black"/>',
        f'<text x="{left + PANEL / 2:.0f}" y="{top - 12}" text-anchor="middle" font-size="13">{title}</text>',
        f'<text x="{left + PANEL / 2:.0f}" y="{top + PANEL + 32}" text-anchor="middle" font-size="11">{xlabel}</text>',
        f'<text x="{x0 + 14}" y="{top + PANEL / 2:.0f}" text-anchor="middle" font-size="11" '
        f'transform="rotate(-90 {x0 + 14} {top + PANEL / 2:.0f})">{ylabel}</text>',
    ]
    for t in (0.0, 0.5, 1.0):
        parts.append(
            f'<text x="{left + t * PANEL:.0f}" y="{top + PANEL + 16}" text-anchor="middle" font-size="10">{t:g}</text>'
        )
        parts.append(
            f'<text x="{left - 6}" y="{top + (1 - t) * PANEL + 4:.0f}" text-anchor="end" font-size="10">{t:g}</text>'
        )
    return parts


def curves_svg(curve, prevalence):
    """Two-panel SVG: ROC and PR curves with dashed no-skill baselines."""
    width = 2 * (PANEL + 2 * PAD)
    height = PANEL + 2 * PAD + 20
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif">'
    ]
    x_roc = 0
    x_pr = PANEL + 2 * PAD
    parts += _panel(x_roc, f"ROC (AuROC {curve.auroc:.3f})", "false positive rate", "true positive rate")
    parts += _panel(x_pr, f"PR (AuPRC {curve.auprc:.3f})", "recall", "precision")
    parts.append(_polyline([0.0, 1.0], [0.0, 1.0], x_roc, "red", dashed=True))
    parts.append(_polyline([0.0, 1.0], [prevalence, prevalence], x_pr, "red", dashed=True))
    parts.append(_polyline(curve.fpr, curve.tpr, x_roc, "steelblue"))
    parts.append(_polyline(curve.recall, curve.precision, x_pr, "steelblue"))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
