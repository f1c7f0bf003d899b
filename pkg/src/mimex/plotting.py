"""Learning-curve SVGs: one line per labelled aggregate plus its CI band.

Output is byte-stable for identical inputs: the SVG id salt is fixed and
no date is embedded.
"""

from __future__ import annotations

import re
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .autodiff import ContractError  # noqa: E402


def series_id(index: int, label: str) -> str:
    return f"series-{index}-" + re.sub(r"[^A-Za-z0-9_.-]+", "_", label)


def emit_plot(aggregates: Sequence, labels: Sequence[str], out_path, title: str | None = None) -> Path:
    if not aggregates:
        raise ContractError("emit_plot needs at least one aggregate")
    if len(labels) != len(aggregates):
        raise ContractError(f"{len(aggregates)} aggregates but {len(labels)} labels")
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context({"svg.hashsalt": "mimex", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6.4, 4.0))
        for i, (agg, label) in enumerate(zip(aggregates, labels)):
            (line,) = ax.plot(agg.env_steps, agg.mean, label=label, gid=series_id(i, label), linewidth=1.5)
            ax.fill_between(agg.env_steps, agg.mean - agg.halfwidth, agg.mean + agg.halfwidth,
                            color=line.get_color(), alpha=0.2, linewidth=0, gid=f"band-{i}")
        ax.set_xlabel("env_steps")
        ax.set_ylabel("success_rate")
        ax.set_ylim(-0.05, 1.05)
        if title:
            ax.set_title(title)
        ax.legend(loc="best", fontsize="small")
        fig.tight_layout()
        fig.savefig(out, format="svg", metadata={"Date": None})
        plt.close(fig)
    return out
