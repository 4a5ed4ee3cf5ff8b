"""共通の表示フォーマッタ群（CLI の表出力）"""

from typing import Dict, List, Sequence

from voxpipe.evaluation.metrics import MetricsReport


def format_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    """左寄せの固定幅テーブル"""
    cells = [list(map(str, header))] + [list(map(str, r)) for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def format_report(title: str, report: MetricsReport, mode: str = "case") -> str:
    """指標ごとに「平均 ± 標準偏差」を1行"""
    if not report.rows:
        return f"{title}: (no data)"
    summary: Dict[str, str] = report.summary(mode)
    body = format_table(["metric", "mean ± std"], [[m, v] for m, v in summary.items()])
    return f"{title} (n={len(report.rows)}, per {mode})\n{body}"


def format_stats(methods: Sequence[str], chi2: float, df: int, p: float, rank_means: Sequence[float], cd: float, pairs: List) -> str:
    lines = [f"chi2 {chi2:.4f}  df {df}  p {p:.4g}", f"nemenyi CD {cd:.4f}"]
    lines.append(format_table(["method", "mean rank"], [[m, f"{r:.3f}"] for m, r in zip(methods, rank_means)]))
    if pairs:
        lines.append("significant: " + ", ".join(f"{a} vs {b}" for a, b in pairs))
    else:
        lines.append("significant: none")
    return "\n".join(lines)
