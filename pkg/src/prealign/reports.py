"""
Output files: tabular reports (csv / json / table), the per-run metrics.csv log, and SVG heatmaps.

Every file written here carries the config hash and tool version; nothing time-dependent goes into them.
"""

import csv
import io
import logging
import os
import sys
import time

import runez
from runez.render import PrettyTable

from prealign import __version__, canonical_json, MissingMetricsError, PREALIGN


LOG = logging.getLogger(__name__)
METRIC_COLUMNS = ["variant", "seed", "stage", "metric", "value", "config_hash", "checkpoint_hash", "tool_version"]


def represented_value(value):
    """str: Stable textual form of 'value' for csv cells"""
    if value is None:
        return ""

    if isinstance(value, bool):
        return str(value).lower()

    if isinstance(value, float):
        return repr(value)

    return runez.stringified(value)


class TabularReport:
    """Reports that can be shown as table, csv or json"""

    def __init__(self, columns, border="github"):
        """
        Args:
            columns (str | list): Column headers
            border (str): Table border to use
        """
        self.border = border
        self.columns = runez.flattened(columns, split=",")
        self.table = PrettyTable(self.columns, border=border)
        self.mapped_values = []
        self.values = []

    def __repr__(self):
        return f"report with {runez.plural(self.values, 'row')}"

    def add_row(self, **kwargs):
        values = [represented_value(kwargs.get(n)) for n in self.columns]
        self.mapped_values.append({k: kwargs.get(k) for k in self.columns})
        self.values.append(values)
        self.table.add_row(values)

    def represented(self, format=None):
        if format in ("csv", "tsv"):
            buffer = io.StringIO()
            writer = csv.writer(buffer, delimiter="\t" if format == "tsv" else ",", lineterminator="\n")
            writer.writerow(self.columns)
            writer.writerows(self.values)
            return buffer.getvalue()

        if format == "json":
            return runez.represented_json(self.mapped_values)

        return self.table.get_string()


def provenance(config_hash):
    return dict(config_hash=config_hash, tool_version=__version__)


def write_table(path, columns, rows, config_hash):
    """
    Args:
        path (str): Where to write the csv
        columns (str | list): Columns of 'rows'
        rows (list[dict]): Rows to write
        config_hash (str): Hash of the config that produced 'rows'
    """
    report = TabularReport(runez.flattened(columns, split=",") + ["config_hash", "tool_version"])
    for row in rows:
        report.add_row(**row, **provenance(config_hash))

    runez.write(path, report.represented("csv"), logger=False)
    LOG.info("Wrote %s", runez.short(path))
    return report


def write_json(path, data, config_hash):
    data = dict(data, provenance=provenance(config_hash))
    runez.write(path, canonical_json(data) + "\n", logger=False)
    LOG.info("Wrote %s", runez.short(path))


def read_table(path):
    """list[dict]: Rows of csv file 'path' (as written by write_table or MetricsLog)"""
    with open(path, newline="") as fh:
        rows = [row for row in csv.reader(fh) if row]

    if not rows:
        return []

    return [dict(zip(rows[0], row)) for row in rows[1:]]


class SoftLockException(Exception):
    """Raised when soft lock can't be acquired"""


class SoftLock:
    """
    Simple soft file lock, ensures only one prealign process writes to a given run folder at a time.
    A lock is a file containing 2 lines: process id holding it, and the command it was invoked with.
    """

    def __init__(self, lock_path, give_up=120, invalid=None):
        """
        Args:
            lock_path (str): Path to lock file
            give_up (int): Timeout in seconds after which to give up (raise SoftLockException) if lock could not be acquired
            invalid (int | None): Age in seconds after which to consider existing lock as invalid
        """
        self.lock_path = lock_path
        self.give_up = give_up
        self.invalid = invalid or self.give_up * 2

    def __repr__(self):
        return f"lock {runez.short(self.lock_path)}"

    def _locked_by(self):
        """
        Returns:
            (str): Command of process holding the lock, if any
        """
        if self.invalid and self.invalid > 0 and not runez.file.is_younger(self.lock_path, self.invalid):
            return None  # Lock file does not exist or invalidation age reached

        pid = None
        for line in runez.readlines(self.lock_path):
            if pid is not None:
                return line  # 2nd line holds the command process was invoked with

            pid = runez.to_int(line)
            if not runez.check_pid(pid):
                return None  # PID is no longer active

    def __enter__(self):
        """Acquire lock"""
        cutoff = time.time() + self.give_up
        holder_args = self._locked_by()
        while holder_args:
            if time.time() >= cutoff:
                lock = runez.bold(runez.short(self.lock_path))
                holder_args = runez.bold(holder_args)
                raise SoftLockException(f"Can't grab lock {lock}, giving up\nIt is being held by: {holder_args}")

            time.sleep(1)
            holder_args = self._locked_by()

        runez.log.trace(f"Acquired {runez.short(self.lock_path)}")
        holder = runez.joined(PREALIGN, runez.quoted(sys.argv[1:]))
        runez.write(self.lock_path, runez.joined(os.getpid(), holder, delimiter="\n"), logger=False)
        return self

    def __exit__(self, *_):
        """Release lock"""
        runez.log.trace(f"Released {runez.short(self.lock_path)}")
        runez.delete(self.lock_path, logger=False)


class MetricsLog:
    """
    metrics.csv of one run folder, one metric per row.
    Recording a (variant, seed, stage) again replaces its previous rows, so reruns reproduce the same file.
    """

    def __init__(self, folder):
        self.folder = folder
        self.path = os.path.join(folder, "metrics.csv")

    def __repr__(self):
        return runez.short(self.path)

    def rows(self):
        if not os.path.exists(self.path):
            return []

        return read_table(self.path)

    def record(self, variant, seed, stage, metrics, config_hash, checkpoint_hash=None):
        """
        Args:
            variant (str): Pipeline variant
            seed (int): Run seed
            stage (str): Stage the metrics are about
            metrics (dict): Metric name -> value
            config_hash (str): Hash of config used
            checkpoint_hash (str | None): Hash of checkpoint the metrics were measured on
        """
        new_rows = []
        for name in sorted(metrics):
            new_rows.append(
                dict(
                    variant=variant,
                    seed=seed,
                    stage=stage,
                    metric=name,
                    value=metrics[name],
                    config_hash=config_hash,
                    checkpoint_hash=checkpoint_hash,
                    tool_version=__version__,
                )
            )

        runez.ensure_folder(self.folder, logger=False)
        with SoftLock(os.path.join(self.folder, ".metrics.lock")):
            key = (str(variant), str(seed), stage)
            kept = [r for r in self.rows() if (r["variant"], r["seed"], r["stage"]) != key]
            report = TabularReport(METRIC_COLUMNS)
            for row in kept + new_rows:
                report.add_row(**row)

            runez.write(self.path, report.represented("csv"), logger=False)

        LOG.info("Recorded %s in %s", runez.plural(new_rows, "metric"), runez.short(self.path))


def load_metrics(run_dir):
    """list[dict]: metrics.csv rows of 'run_dir'"""
    path = os.path.join(run_dir, "metrics.csv")
    rows = read_table(path) if os.path.exists(path) else []
    if not rows:
        raise MissingMetricsError(f"No metrics found in {runez.short(run_dir)} (expecting {runez.short(path)})")

    return rows


def similarity_svg(matrix, title, config_hash, cell=24):
    """
    Args:
        matrix (np.ndarray): Square matrix with values in [0, 1]
        title (str): Title shown above the heatmap
        config_hash (str): Recorded as a comment
        cell (int): Cell size in pixels

    Returns:
        (str): Linear grayscale heatmap, lighter means higher
    """
    n = len(matrix)
    size = n * cell
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + cell}" viewBox="0 0 {size} {size + cell}">',
        f"<!-- {PREALIGN} {__version__} config {config_hash} -->",
        f'<text x="2" y="{cell - 6}" font-family="monospace" font-size="{cell // 2}">{title}</text>',
    ]
    for i in range(n):
        for j in range(n):
            level = int(round(255 * min(1.0, max(0.0, float(matrix[i][j])))))
            x, y = j * cell, (i + 1) * cell
            lines.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({level},{level},{level})"/>')

    lines.append("</svg>")
    return "\n".join(lines) + "\n"
