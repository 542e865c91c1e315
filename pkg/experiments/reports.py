# experiments/reports.py
"""
Machine-readable experiment reports.

A report is a table of rows plus named verdicts, stamped with the command and the
resolved config that produced it. Rendering is deterministic: no timestamps, rows in
the order they were added, floats written with their shortest round-tripping repr.
"""

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from numerics.exceptions import TensorIOError

logger = logging.getLogger(__name__)


def plain(value):
    """JSON/CSV friendly scalar: numpy scalars unwrapped, non-finite floats spelled out"""
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return 'nan' if math.isnan(value) else ('inf' if value > 0 else '-inf')
    if isinstance(value, (list, tuple)):
        return [plain(item) for item in value]
    if isinstance(value, dict):
        return {str(key): plain(item) for key, item in value.items()}
    return value


@dataclass
class Report:
    command: str
    config: dict
    columns: tuple
    rows: list = field(default_factory=list)
    verdicts: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def add_row(self, **values):
        unknown = set(values) - set(self.columns)
        if unknown:
            raise ValueError(f"Columns {sorted(unknown)} are not part of the {self.command} report")
        self.rows.append({name: plain(values.get(name, '')) for name in self.columns})

    def verdict(self, name, held):
        self.verdicts[name] = bool(held)
        if not held:
            logger.warning("%s verdict failed: %s", self.command, name)

    @property
    def passed(self):
        return all(self.verdicts.values())

    def failed(self):
        return [name for name, held in self.verdicts.items() if not held]

    # -- rendering ------------------------------------------------------

    def _header(self):
        return {
            'command': self.command,
            'config': plain(self.config),
            'summary': plain(self.summary),
            'verdicts': self.verdicts,
        }

    def to_json(self):
        payload = self._header()
        payload['columns'] = list(self.columns)
        payload['rows'] = self.rows
        return json.dumps(payload, indent=2) + '\n'

    def to_csv(self):
        """Header lines start with '#'; readers can skip them with comment='#'"""
        buffer = io.StringIO()
        buffer.write(f"# command: {self.command}\n")
        buffer.write(f"# config: {json.dumps(plain(self.config), separators=(',', ':'))}\n")
        if self.summary:
            buffer.write(f"# summary: {json.dumps(plain(self.summary), separators=(',', ':'))}\n")
        for name, held in self.verdicts.items():
            buffer.write(f"# verdict {name}: {'pass' if held else 'FAIL'}\n")
        writer = csv.DictWriter(buffer, fieldnames=self.columns, lineterminator='\n')
        writer.writeheader()
        writer.writerows(self.rows)
        return buffer.getvalue()

    def render(self, emit):
        if emit == 'json':
            return self.to_json()
        if emit == 'csv':
            return self.to_csv()
        raise ValueError(f"Unknown report format {emit!r}")


def write_report(text, path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding='utf-8')
    except OSError as exc:
        raise TensorIOError(f"Cannot write report to {path}: {exc}") from exc
    logger.info("Wrote report to %s (%d bytes)", path, len(text))
    return path
