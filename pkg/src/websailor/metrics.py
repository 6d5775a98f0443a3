"""Metrics rows sampled during a run, their CSV form, and derived numbers."""

from __future__ import annotations

from dataclasses import dataclass

CSV_HEADER = "t,entity,pages_stored,connections,pending_seeds,rate_cmds"


@dataclass
class MetricsRow:
    t: float                 # seconds since run start
    entity: str              # client id, "server:<dset>" or "total"
    pages_stored: int
    connections: int
    pending_seeds: int
    rate_cmds: int

    def csv_row(self) -> str:
        return "%.3f,%s,%d,%d,%d,%d" % (self.t, self.entity, self.pages_stored,
                                        self.connections, self.pending_seeds,
                                        self.rate_cmds)


def write_metrics(rows, path) -> None:
    """CSV with `\\n` endings; entities never contain commas so no quoting."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(CSV_HEADER + "\n")
        for row in rows:
            fh.write(row.csv_row() + "\n")


def read_metrics(path) -> list[MetricsRow]:
    rows: list[MetricsRow] = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise ValueError("unexpected metrics header %r" % header)
        for line in fh:
            t, entity, stored, conns, pending, cmds = line.strip().split(",")
            rows.append(MetricsRow(float(t), entity, int(stored), int(conns),
                                   int(pending), int(cmds)))
    return rows


def host_concurrency_metric(dispatch_log) -> float:
    """Fraction of seed batches that contain two or more same-host URLs.

    Takes (batch_id, client_id, urls) or (batch_id, urls) entries; an empty
    log scores 0.0. This is reported, not thresholded: it measures how often
    one web server would see concurrent fetches from a single batch.
    """
    batches = 0
    crowded = 0
    for entry in dispatch_log:
        urls = entry[-1]
        batches += 1
        hosts: set[str] = set()
        clash = False
        for url in urls:
            rest = str(url).split("://", 1)[-1]
            host = rest.split("/", 1)[0].lower()
            if host in hosts:
                clash = True
                break
            hosts.add(host)
        if clash:
            crowded += 1
    return crowded / batches if batches else 0.0


def window_rates(rows, entity: str, window: float) -> list[tuple[float, float]]:
    """Pages/second for one entity over fixed windows of the sampled series.

    The cumulative pages_stored column is resampled at window boundaries
    (last sample at or before each boundary) and differenced; returns
    (window_end_t, rate) pairs for every boundary the samples reach.
    """
    series = sorted((r.t, r.pages_stored) for r in rows if r.entity == entity)
    if len(series) < 2:
        return []
    t0, first_pages = series[0]
    boundary_values: list[int] = []
    boundary = t0 + window
    last = first_pages
    for t, pages in series:
        while t > boundary:
            boundary_values.append(last)
            boundary += window
        last = pages
    if series[-1][0] >= boundary - 1e-9:  # final sample lands on the boundary
        boundary_values.append(last)
    out: list[tuple[float, float]] = []
    prev = first_pages
    for i, value in enumerate(boundary_values):
        out.append((t0 + (i + 1) * window, (value - prev) / window))
        prev = value
    return out


def coefficient_of_variation(values) -> float:
    values = list(values)
    if not values:
        return 0.0
    mean = sum(values) / len(values)
    if mean == 0:
        return float("inf")
    variance = sum((v - mean) ** 2 for v in values) / len(values)
    return variance ** 0.5 / mean
