"""Text layout utilities for reports - headers, separators, aligned tables."""
from typing import List, Optional, Sequence, Tuple

DEFAULT_WIDTH = 80


def center_text(text: str, width: int = DEFAULT_WIDTH) -> str:
    """Center text within a given width."""
    text_len = len(text)
    if text_len >= width:
        return text[:width]
    padding = (width - text_len) // 2
    return ' ' * padding + text


def create_header(text: str, width: int = DEFAULT_WIDTH, char: str = '=') -> str:
    """Create a centered header with border."""
    centered = center_text(text, width)
    border = char * width
    return f"{border}\n{centered}\n{border}"


def create_separator(width: int = DEFAULT_WIDTH, char: str = '-') -> str:
    """Create a horizontal separator line."""
    return char * width


def create_status_bar(left_text: str, right_text: str, width: int = DEFAULT_WIDTH) -> str:
    """Create a status bar with left and right aligned text.

    Example: "MOT16-02                          frames: 600"
    """
    total_used = len(left_text) + len(right_text)
    if total_used >= width:
        available = width - len(right_text) - 1
        left_text = left_text[:available] if available > 0 else ""
        spacing = " "
    else:
        spacing = " " * (width - total_used)
    return left_text + spacing + right_text


def format_table(columns: Sequence[str], rows: Sequence[Sequence[str]], gap: int = 2) -> str:
    """Render rows under a header; the first column is left aligned, the rest right aligned."""
    widths = [len(c) for c in columns]
    for row in rows:
        widths = [max(w, len(cell)) for w, cell in zip(widths, row)]

    def render(cells: Sequence[str]) -> str:
        parts: List[str] = []
        for i, (cell, w) in enumerate(zip(cells, widths)):
            parts.append(cell.ljust(w) if i == 0 else cell.rjust(w))
        return (' ' * gap).join(parts).rstrip()

    total = sum(widths) + gap * (len(widths) - 1)
    lines = [render(columns), create_separator(total)]
    lines.extend(render(row) for row in rows)
    return '\n'.join(lines)


def format_report(title: str, columns: Sequence[str], rows: Sequence[Sequence[str]],
                  status: Optional[Tuple[str, str]] = None) -> str:
    """Header plus aligned table, newline terminated; ``status`` adds a footer bar."""
    table = format_table(columns, rows)
    width = max(len(line) for line in table.split('\n'))
    text = f"{create_header(title, width)}\n{table}\n"
    if status:
        text += f"{create_separator(width)}\n{create_status_bar(*status, width=width)}\n"
    return text
