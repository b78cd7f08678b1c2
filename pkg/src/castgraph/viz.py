"""Figure rendering for the report-producing CLI paths.

Colors mirror the annotation UI: suggested yellow, confirmed green,
conflicted red, rejected gray.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

STATUS_COLORS = {
    "suggested": "#e0b400",
    "confirmed": "#2e9e44",
    "conflicted": "#d0392b",
    "rejected": "#999999",
}


def render_graph_figure(export: dict, path: str | Path) -> None:
    """Node-link view of an exported graph, circular layout."""
    entities = export.get("entities", [])
    triples = export.get("triples", [])
    n = max(1, len(entities))
    pos = {}
    for i, ent in enumerate(entities):
        angle = 2 * math.pi * i / n
        pos[ent["id"]] = (math.cos(angle), math.sin(angle))

    fig, ax = plt.subplots(figsize=(8, 8))
    for t in triples:
        if t["status"] == "rejected":
            continue
        x1, y1 = pos[t["src"]]
        x2, y2 = pos[t["dst"]]
        color = STATUS_COLORS.get(t["status"], "#555555")
        ax.annotate(
            "",
            xy=(x2, y2),
            xytext=(x1, y1),
            arrowprops=dict(
                arrowstyle="-|>", color=color, lw=1.4, shrinkA=14, shrinkB=14,
                connectionstyle="arc3,rad=0.08",
            ),
        )
        ax.text(
            (x1 + x2) / 2,
            (y1 + y2) / 2,
            t["rel"].replace("_", " "),
            fontsize=7,
            color=color,
            ha="center",
        )
    for ent in entities:
        x, y = pos[ent["id"]]
        node_color = STATUS_COLORS.get(ent.get("status", "confirmed"), "#cccccc")
        ax.plot([x], [y], "o", markersize=18, color="white", mec=node_color, mew=2)
        ax.text(x, y - 0.12, ent["canonical"], fontsize=9, ha="center")
    ax.set_xlim(-1.3, 1.3)
    ax.set_ylim(-1.3, 1.3)
    ax.set_aspect("equal")
    ax.axis("off")
    ax.set_title("relationship graph")
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)


def render_swi_figure(report: dict, path: str | Path) -> None:
    """Clustering and path length against their lattice/random references."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    ax1.bar(
        ["graph", "random", "lattice"],
        [report["C"], report["C_rand"], report["C_latt"]],
        color=["#2e9e44", "#888888", "#bbbbbb"],
    )
    ax1.set_title("clustering coefficient")
    ax2.bar(
        ["graph", "random", "lattice"],
        [report["L"], report["L_rand"], report["L_latt"]],
        color=["#2e9e44", "#888888", "#bbbbbb"],
    )
    ax2.set_title("characteristic path length")
    swi = report.get("swi")
    label = f"SWI = {swi:.3f}" if swi is not None else "SWI undefined"
    fig.suptitle(f"{label}  (n={report['n_nodes']}, m={report['n_edges']})")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_eval_figure(report: dict, path: str | Path) -> None:
    """Overall P/R/F1 plus per-relation F1 bars."""
    per = report.get("per_relation", {})
    fig, (ax1, ax2) = plt.subplots(
        1, 2, figsize=(10, 4), gridspec_kw={"width_ratios": [1, 2]}
    )
    ax1.bar(
        ["precision", "recall", "f1"],
        [report["precision"], report["recall"], report["f1"]],
        color="#2e6e9e",
    )
    ax1.set_ylim(0, 1.05)
    ax1.set_title("overall")
    if per:
        rels = sorted(per)
        f1s = []
        for rel in rels:
            tp, fp, fn = per[rel]["tp"], per[rel]["fp"], per[rel]["fn"]
            p = tp / (tp + fp) if tp + fp else 0.0
            r = tp / (tp + fn) if tp + fn else 0.0
            f1s.append(2 * p * r / (p + r) if p + r else 0.0)
        ax2.barh(rels, f1s, color="#2e9e44")
        ax2.set_xlim(0, 1.05)
        ax2.set_title("per-relation F1")
    else:
        ax2.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
