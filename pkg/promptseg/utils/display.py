"""
Terminal rendering helpers for the command line.

Banners, per-class IoU tables and sweep summaries are printed with
``tinycolors`` so that numbers stand out from log lines.
"""

from __future__ import annotations

import os
from typing import Iterable, Mapping, Sequence


def make_divider(divisor: str = "-", count: int = 60) -> str:
    """
    Create a divider string for output formatting.

    :param divisor: Character to use for the divider.
    :type divisor: str
    :param count: Number of times to repeat the divisor character.
    :type count: int
    :return: Divider string.
    :rtype: str
    """
    return divisor * count


def center_text(text: str) -> str:
    """
    Center text within the terminal window.

    Falls back to 80 columns when the terminal size is unavailable
    (pipes, CI logs).

    :param text: The text to center.
    :type text: str
    :return: Centered text with appropriate padding.
    :rtype: str
    """
    try:
        total_width = os.get_terminal_size().columns
    except OSError:
        total_width = 80

    lines = [line.rstrip() for line in text.splitlines() if line.strip()]
    if not lines:
        return ""

    left_padding = max(0, (total_width - max(len(line) for line in lines)) // 2)
    return "\n".join(" " * left_padding + line for line in lines)


def banner(title: str, subtitle: str | None = None) -> None:
    """
    Print a boxed title.

    :param title: Main line.
    :type title: str
    :param subtitle: Optional second line.
    :type subtitle: str | None
    """
    from tinycolors import cprint

    cprint(make_divider("="), as_="bold white")
    cprint(center_text(title), as_="bold cyan")
    if subtitle:
        cprint(center_text(subtitle), as_="italic white")
    cprint(make_divider("="), as_="bold white")


def format_iou_rows(per_class: Mapping[int, float | None],
                    class_names: Sequence[str] | None = None) -> list[str]:
    """
    Render per-class IoU values as aligned text rows.

    Classes absent from the ground truth carry ``None`` and print as ``-``.

    :param per_class: Mapping from class index to IoU in [0, 1] or None.
    :type per_class: Mapping[int, float | None]
    :param class_names: Optional display names indexed by class.
    :type class_names: Sequence[str] | None
    :return: One formatted line per class.
    :rtype: list[str]
    """
    rows = []
    for k in sorted(per_class):
        name = class_names[k] if class_names is not None else f"class_{k}"
        value = per_class[k]
        shown = "-" if value is None else f"{100.0 * value:6.2f}"
        rows.append(f"{name:<16}{shown:>8}")
    return rows


def print_iou_table(per_class: Mapping[int, float | None], miou: float,
                    title: str = "Per-class IoU (%)") -> None:
    """
    Print an IoU table followed by the mIoU line.

    :param per_class: Mapping from class index to IoU or None.
    :type per_class: Mapping[int, float | None]
    :param miou: Mean IoU in [0, 1].
    :type miou: float
    :param title: Table heading.
    :type title: str
    """
    from tinycolors import cprint

    cprint(title, as_="bold yellow")
    cprint(make_divider("- ", 12), as_="bold white")
    for row in format_iou_rows(per_class):
        print(row)
    cprint(make_divider("- ", 12), as_="bold white")
    cprint(f"{'mIoU':<16}{100.0 * miou:8.2f}", as_="bold green")


def print_summary_table(header: Sequence[str],
                        rows: Iterable[Sequence[object]]) -> None:
    """
    Print a left-aligned table with a bold header.

    :param header: Column titles.
    :type header: Sequence[str]
    :param rows: Table rows; cells are stringified.
    :type rows: Iterable[Sequence[object]]
    """
    from tinycolors import cprint

    body = [[str(cell) for cell in row] for row in rows]
    widths = [len(h) for h in header]
    for row in body:
        widths = [max(w, len(cell)) for w, cell in zip(widths, row)]

    cprint("  ".join(h.ljust(w) for h, w in zip(header, widths)), as_="bold white")
    cprint(make_divider("-", sum(widths) + 2 * (len(widths) - 1)), as_="bold white")
    for row in body:
        print("  ".join(cell.ljust(w) for cell, w in zip(row, widths)))
